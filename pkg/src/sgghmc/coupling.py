"""Two-chain coupling: reflection or synchronous refreshment, then shared legs.

Pairs may carry a leading ensemble axis; the branch is then chosen per member.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .constants import DerivedConstants
from .integrator import (
    AlgoParams,
    ChainState,
    draw_leg_randomness,
    hamiltonian_leg,
    velocity_refresh,
)
from .model import ForceField, ParameterError
from .streams import SLOT_COUPLING, SLOT_REFRESH, StreamView


class StaleConstantsError(ValueError):
    """Constants were derived for different sampler parameters."""


class Branch(IntEnum):
    SYNCHRONOUS = 0
    REFLECTION = 1


def _norm(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(a * a, axis=-1))


def difference_coords(first: ChainState, second: ChainState, constants: DerivedConstants):
    """Return ``(z, q, q_hat)`` for the pair; ``1/gamma`` is exactly 0 when ``eta = 0``."""
    z = first.x - second.x
    dv = first.v - second.v
    gi = constants.gamma_inv
    q = z + gi * dv
    scale = constants.qhat_scale
    q_hat = constants.r_star * scale * (z + constants.eta * (constants.T + gi) * dv)
    return z, q, q_hat


@dataclass
class CoupledPair:
    first: ChainState
    second: ChainState
    z: np.ndarray
    q: np.ndarray
    q_hat: np.ndarray
    branch: np.ndarray  # Branch values, one per member; -1 before any iteration

    @classmethod
    def from_states(cls, first: ChainState, second: ChainState, constants: DerivedConstants, branch=None) -> "CoupledPair":
        if first.x.shape != second.x.shape:
            raise ValueError("coupled chains must have equal shapes")
        z, q, q_hat = difference_coords(first, second, constants)
        if branch is None:
            branch = np.full(first.x.shape[:-1], -1, dtype=np.int8)
        return cls(first, second, z, q, q_hat, np.asarray(branch, dtype=np.int8))

    def switching_value(self, constants: DerivedConstants) -> np.ndarray:
        """``|q| + 1.09 alpha |z|``, compared against ``R_hat`` by the coupling rule."""
        return _norm(self.q) + constants.alpha_hat * _norm(self.z)


def _unit_direction(q_hat: np.ndarray):
    norm = _norm(q_hat)
    e1 = np.zeros_like(q_hat)
    e1[..., 0] = 1.0
    safe = np.where(norm > 0, norm, 1.0)[..., None]
    e = np.where((norm > 0)[..., None], q_hat / safe, e1)
    return e, norm


def reflection_partner(g, q_hat, uniform) -> np.ndarray:
    """Partner normal for ``g``: the translate ``g + q_hat`` with probability
    ``min(1, phi(e.g + |q_hat|) / phi(e.g))``, otherwise the mirror image of ``g``
    across the hyperplane orthogonal to ``q_hat``.
    """
    g = np.asarray(g, dtype=np.float64)
    q_hat = np.asarray(q_hat, dtype=np.float64)
    e, norm = _unit_direction(q_hat)
    eg = np.sum(e * g, axis=-1)
    log_ratio = -eg * norm - 0.5 * norm * norm
    accept = np.log(uniform) <= log_ratio
    return np.where(accept[..., None], g + q_hat, g - 2.0 * eg[..., None] * e)


def k_value(vbar, gbar, constants: DerivedConstants) -> np.ndarray:
    scale = constants.qhat_scale
    vbar = np.asarray(vbar, dtype=np.float64)
    gbar = np.asarray(gbar, dtype=np.float64)
    return _norm(vbar / (constants.r_star * scale) + scale * gbar)


def _check_consistent(params: AlgoParams, constants: DerivedConstants) -> None:
    if constants.params != params:
        raise StaleConstantsError(f"constants were derived for {constants.params}, not {params}")


def coupled_iteration(pair: CoupledPair, params: AlgoParams, field: ForceField, constants: DerivedConstants, stream: StreamView) -> CoupledPair:
    _check_consistent(params, constants)
    d = pair.first.x.shape[-1]
    g = stream.normal(SLOT_REFRESH, d)
    uniform = stream.uniform(SLOT_COUPLING, 1)[..., 0]
    synchronous = pair.switching_value(constants) >= constants.R_hat
    partner = reflection_partner(g, pair.q_hat, uniform)
    g_second = np.where(np.asarray(synchronous)[..., None], g, partner)
    rand = draw_leg_randomness(field, params, stream)
    first = hamiltonian_leg(velocity_refresh(pair.first, params, g), params, field, rand)
    second = hamiltonian_leg(velocity_refresh(pair.second, params, g_second), params, field, rand)
    branch = np.where(synchronous, Branch.SYNCHRONOUS, Branch.REFLECTION)
    return CoupledPair.from_states(first, second, constants, branch)


def twisted_distance(a: ChainState, b: ChainState, constants: DerivedConstants) -> np.ndarray:
    z = a.x - b.x
    return constants.alpha_hat * _norm(z) + _norm(z + constants.gamma_inv * (a.v - b.v))


def concave_f0(x, g: float, R_hat: float):
    """``(1 - exp(-g min(x, R_hat))) / g``: concave, saturating beyond ``R_hat``."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ParameterError("concave_f0 is defined for nonnegative arguments only")
    out = -np.expm1(-g * np.minimum(x, R_hat)) / g
    return float(out) if out.ndim == 0 else out


def mbar_seminorm(z, dv, gamma: float):
    """Squared modified norm ``|z|^2 + 2 z.dv / gamma + 2 |dv|^2 / gamma^2``."""
    z = np.asarray(z, dtype=np.float64)
    dv = np.asarray(dv, dtype=np.float64)
    gi = 0.0 if np.isinf(gamma) else 1.0 / gamma
    out = np.sum(z * z + 2 * gi * z * dv + 2 * gi * gi * dv * dv, axis=-1)
    return float(out) if out.ndim == 0 else out


def rho_star(a: ChainState, b: ChainState, constants: DerivedConstants):
    z = a.x - b.x
    dv = a.v - b.v
    q = z + constants.gamma_inv * dv
    arg = _norm(q) + constants.alpha_hat * _norm(z)
    return concave_f0(arg, constants.g, constants.R_hat) + constants.eps_star * mbar_seminorm(z, dv, constants.gamma)
