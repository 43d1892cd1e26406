"""One SGgHMC iteration: partial velocity refresh, then K integrator sub-steps.

Sub-steps are velocity Verlet (``u = 0``) or randomized midpoint (``u = 1``).
States may carry a leading ensemble axis; all arithmetic broadcasts over it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import DETERMINISTIC, ForceField, GradientIndex, ParameterError
from .streams import SLOT_REFRESH, StreamView, substep_slot


@dataclass(frozen=True)
class AlgoParams:
    K: int
    h: float
    eta: float
    u: int = 0

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ParameterError("K must be a positive integer")
        if not self.h > 0:
            raise ParameterError("step size h must be positive")
        if not 0.0 <= self.eta < 1.0:
            raise ParameterError(f"eta={self.eta} outside the admissible range [0,1)")
        if self.u not in (0, 1):
            raise ParameterError("integrator selector u must be 0 or 1")

    @property
    def T(self) -> float:
        return self.K * self.h


@dataclass
class ChainState:
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.x.shape != self.v.shape:
            raise ValueError(f"position shape {self.x.shape} != velocity shape {self.v.shape}")

    def copy(self) -> "ChainState":
        return ChainState(self.x.copy(), self.v.copy())


@dataclass(frozen=True)
class LegRandomness:
    thetas: Sequence[GradientIndex]
    theta_primes: Sequence[GradientIndex]
    midpoints: np.ndarray  # (K,) or (K, n)

    def __post_init__(self):
        if not len(self.thetas) == len(self.theta_primes) == len(self.midpoints):
            raise ValueError("leg randomness lengths must agree")

    @property
    def K(self) -> int:
        return len(self.thetas)

    @classmethod
    def deterministic(cls, K: int, midpoint: float = 0.5) -> "LegRandomness":
        return cls([DETERMINISTIC] * K, [DETERMINISTIC] * K, np.full(K, midpoint))

    def reversed(self) -> "LegRandomness":
        """Reverse the sub-step order, swapping theta and theta' within each step."""
        return LegRandomness(list(self.theta_primes[::-1]), list(self.thetas[::-1]), self.midpoints[::-1])


def velocity_refresh(state: ChainState, params: AlgoParams, g) -> ChainState:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != state.v.shape:
        raise ValueError(f"refresh draw shape {g.shape} != velocity shape {state.v.shape}")
    eta = params.eta
    return ChainState(state.x, eta * state.v + np.sqrt(1.0 - eta * eta) * g)


def verlet_step(state: ChainState, h: float, field: ForceField, theta: GradientIndex, theta_prime: GradientIndex) -> ChainState:
    v = state.v - 0.5 * h * field(state.x, theta)
    x = state.x + h * v
    v = v - 0.5 * h * field(x, theta_prime)
    return ChainState(x, v)


def _as_column(u, like: np.ndarray):
    u = np.asarray(u, dtype=np.float64)
    return u[..., None] if u.ndim and like.ndim > 1 else u


def randomized_midpoint_step(state: ChainState, h: float, field: ForceField, theta: GradientIndex, midpoint_u) -> ChainState:
    x, v = state.x, state.v
    shift = _as_column(midpoint_u, x)
    g = field(x + shift * h * v, theta)
    return ChainState(x + h * v - 0.5 * h * h * g, v - h * g)


def hamiltonian_leg(state: ChainState, params: AlgoParams, field: ForceField, rand: LegRandomness, trajectory: bool = False):
    """Run the K sub-steps. With ``trajectory`` the states at every grid time are returned."""
    if rand.K != params.K:
        raise ValueError(f"leg randomness has {rand.K} sub-steps, expected {params.K}")
    path = [state] if trajectory else None
    for k in range(params.K):
        if params.u == 0:
            state = verlet_step(state, params.h, field, rand.thetas[k], rand.theta_primes[k])
        else:
            state = randomized_midpoint_step(state, params.h, field, rand.thetas[k], rand.midpoints[k])
        if trajectory:
            path.append(state)
    return path if trajectory else state


def draw_leg_randomness(field: ForceField, params: AlgoParams, stream: StreamView) -> LegRandomness:
    """Draw theta, theta' and the midpoint uniform for each sub-step, in that order."""
    thetas, primes, mids = [], [], []
    count = field.stochastic.component_count if field.stochastic else 0
    for k in range(params.K):
        if count:
            thetas.append(field.draw_index(stream.uniform(substep_slot(k, 0), count)))
            primes.append(field.draw_index(stream.uniform(substep_slot(k, 1), count)))
        else:
            thetas.append(DETERMINISTIC)
            primes.append(DETERMINISTIC)
        mids.append(stream.uniform(substep_slot(k, 2), 1)[..., 0])
    return LegRandomness(thetas, primes, np.asarray(mids))


def ghmc_iteration(state: ChainState, params: AlgoParams, field: ForceField, stream: StreamView) -> ChainState:
    g = stream.normal(SLOT_REFRESH, state.x.shape[-1])
    refreshed = velocity_refresh(state, params, g)
    return hamiltonian_leg(refreshed, params, field, draw_leg_randomness(field, params, stream))


def exact_gaussian_leg(state: ChainState, T: float, curvature: float) -> ChainState:
    """Exact Hamiltonian flow over time ``T`` for the drift ``curvature * x``."""
    w = np.sqrt(curvature)
    c, s = np.cos(w * T), np.sin(w * T)
    return ChainState(c * state.x + (s / w) * state.v, -w * s * state.x + c * state.v)
