"""Admissibility checks and every explicit contraction, concentration and bias constant.

For nonconvex targets the rate constants sit near ``exp(-g R_hat)`` and
routinely underflow, so each such constant is carried as a natural log
alongside its float value (which may be 0.0 or inf).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from .integrator import AlgoParams
from .model import ForceField, ParameterError

# friction-like tuning constant in the weighted distance
DISTANCE_WEIGHT = 1.09
# LT(T+h) ceiling shared by the a-priori estimates and the step condition
STEP_CEILING = 16.0**2


def _exp(log_value: float) -> float:
    if log_value > 709.0:
        return math.inf
    return math.exp(log_value)


@dataclass(frozen=True)
class AdmissibilityReport:
    friction_lhs: float
    friction_rhs: float
    step_lhs: float
    step_rhs: float

    @property
    def friction_ok(self) -> bool:
        return self.friction_lhs <= self.friction_rhs

    @property
    def step_ok(self) -> bool:
        return self.step_lhs <= self.step_rhs

    @property
    def passed(self) -> bool:
        return self.friction_ok and self.step_ok

    @property
    def friction_slack(self) -> float:
        return self.friction_rhs - self.friction_lhs

    @property
    def step_slack(self) -> float:
        return self.step_rhs - self.step_lhs


@dataclass(frozen=True)
class DerivedConstants:
    params: AlgoParams
    m: float
    L: float
    R: float
    dim: int
    gamma: float  # inf when eta = 0
    gamma_inv: float
    alpha: float
    alpha_hat: float
    r_star: float
    T_hat: float
    R_hat: float
    g: float
    log_eps_star: float
    eps_star: float
    c0: float
    log_c0: float
    log_c: float
    c: float
    log_M1: float
    M1: float
    log_M2: float
    log_C_conc: float
    C_conc: float
    R_prime: float
    d_star: float
    admissibility: AdmissibilityReport

    @property
    def T(self) -> float:
        return self.params.T

    @property
    def eta(self) -> float:
        return self.params.eta

    @property
    def admissible(self) -> bool:
        return self.admissibility.passed

    @property
    def gR_hat(self) -> float:
        return self.g * self.R_hat

    @property
    def qhat_scale(self) -> float:
        """Factor ``(T + 1/gamma) sqrt(1 - eta^2)`` used in the refresh-direction vector."""
        return (self.T + self.gamma_inv) * math.sqrt(1.0 - self.eta**2)


def radius_hat(field: ForceField, params: AlgoParams) -> float:
    T, eta, u = params.T, params.eta, params.u
    alpha = field.L * T * T / (1.0 - eta) ** 2
    inner = (6 + 4 * u) * (1 + (3 + 5 * u) * math.sqrt(alpha) + DISTANCE_WEIGHT * alpha)
    return max(inner * field.R * (1 + field.L / field.m), (4 * field.L) ** -0.5)


def check_admissibility(field: ForceField, params: AlgoParams) -> AdmissibilityReport:
    L, T, h, eta = field.L, params.T, params.h, params.eta
    R_hat = radius_hat(field, params)
    return AdmissibilityReport(
        friction_lhs=4 * L * T * T,
        friction_rhs=(1 - eta) ** 2,
        step_lhs=L * (T + h) ** 2 * (1 + eta) / (1 - eta),
        step_rhs=min(1.0 / (L * R_hat * R_hat), 1.0) / STEP_CEILING,
    )


def _indicator_weight(eta: float, alpha: float) -> float:
    # jumps at eta = 0 by construction of the semimetric
    return 2.0 / alpha**2 if eta != 0 else 1.0


def derive_constants(field: ForceField, params: AlgoParams, dim: Optional[int] = None, r_star: Optional[float] = None) -> DerivedConstants:
    if not 0.0 <= params.eta < 1.0:
        raise ParameterError(f"eta={params.eta} outside the admissible range [0,1)")
    dim = field.dim if dim is None else dim
    m, L, R = field.m, field.L, field.R
    T, eta = params.T, params.eta
    gamma_inv = eta * T / (1 - eta)
    gamma = math.inf if gamma_inv == 0 else 1.0 / gamma_inv
    alpha = L * T * T / (1 - eta) ** 2
    T_hat = T * math.sqrt((1 + eta) / (1 - eta))
    default_r_star = (1 - eta) / (T * T * (1 + eta))
    if r_star is None:
        r_star = default_r_star
    elif not 0 < r_star <= default_r_star * (1 + 1e-12):
        raise ParameterError(f"r_star must lie in (0, {default_r_star:g}]")
    R_hat = radius_hat(field, params)
    g = 0.4 * max(16 * L * R_hat, 2 * math.sqrt(L))
    gR = g * R_hat
    weight = _indicator_weight(eta, alpha)

    log_eps_star = min(
        -gR - math.log(101 * weight * R_hat),
        math.log(math.sqrt(2 * math.pi) * g) - gR - math.log(1024),
    )
    # gR / (5 (e^{gR} - 1)), kept in log form since it underflows for large gR
    log_c0 = math.log(gR) - gR - math.log(-5 * math.expm1(-gR)) + math.log(min(1 / (4 * alpha), 1.0))
    log_c = (
        math.log(m) + 2 * math.log(T) - gR - math.log(1 - eta)
        + math.log(min(4 / weight, 1.0)) - math.log(6592)
    )
    log_M1 = 0.5 * (math.log(g) - math.log(2 * math.log(2)) - log_eps_star)
    log_M2 = math.log(2) - log_eps_star
    if eta != 0:
        log_C = math.log(19 * g * (1 + eta)) - math.log(alpha) - log_eps_star
    else:
        log_C = math.log(3 * g) - log_eps_star
    R_prime = 4 * R * (1 + L / m)
    d_star = max(16 * L * R * R * (1 + L / m) ** 2, dim) / m
    return DerivedConstants(
        params=params, m=m, L=L, R=R, dim=dim,
        gamma=gamma, gamma_inv=gamma_inv,
        alpha=alpha, alpha_hat=DISTANCE_WEIGHT * alpha,
        r_star=r_star, T_hat=T_hat, R_hat=R_hat, g=g,
        log_eps_star=log_eps_star, eps_star=_exp(log_eps_star),
        c0=_exp(log_c0), log_c0=log_c0, log_c=log_c, c=_exp(log_c),
        log_M1=log_M1, M1=_exp(log_M1), log_M2=log_M2,
        log_C_conc=log_C, C_conc=_exp(log_C),
        R_prime=R_prime, d_star=d_star,
        admissibility=check_admissibility(field, params),
    )


def log1m_c(constants: DerivedConstants) -> float:
    """``log(1 - c)``, exact even when ``c`` underflows."""
    return math.log1p(-constants.c) if constants.c > 1e-300 else -_exp(constants.log_c)


def contraction_bound(constants: DerivedConstants, n: int, w1_initial: float) -> float:
    """Upper bound ``M1 (1-c)^n W1`` on the distance after ``n`` iterations."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    if w1_initial == 0:
        return 0.0
    return _exp(constants.log_M1 + n * log1m_c(constants) + math.log(w1_initial))


def concentration_exponent(constants: DerivedConstants, params: AlgoParams, N: int, lip_norm: float, r: float) -> float:
    """Log of the concentration bound (a nonpositive number)."""
    if N < 1 or not lip_norm > 0:
        raise ValueError("need N >= 1 and a positive Lipschitz norm")
    if r <= 0:
        return 0.0
    T, eta = params.T, params.eta
    cN = N * constants.c
    if cN == 0.0:
        # c^2 / (1 + 1/(cN)) = c^3 N / (1 + cN) ~ c^3 N
        log_frac = 3 * constants.log_c + math.log(N)
    else:
        log_frac = 2 * constants.log_c + math.log(cN / (1 + cN))
    log_mag = (
        math.log(1 - eta) + math.log(N) + 2 * math.log(r) + log_frac
        - constants.log_C_conc - 2 * math.log(T) - 2 * math.log(lip_norm)
    )
    return -_exp(log_mag)


def concentration_bound(constants: DerivedConstants, params: AlgoParams, N: int, lip_norm: float, r: float) -> float:
    return math.exp(concentration_exponent(constants, params, N, lip_norm, r))


@dataclass(frozen=True)
class BiasBounds:
    """Bias bounds with their natural logs. ``None`` marks a bound whose data is missing."""

    log_verlet_h: float
    log_midpoint: float
    log_verlet_h2: Optional[float]
    sg_term: Optional[float]

    @property
    def verlet_h(self) -> float:
        return _exp(self.log_verlet_h)

    @property
    def midpoint(self) -> float:
        return _exp(self.log_midpoint)

    @property
    def verlet_h2(self) -> Optional[float]:
        return None if self.log_verlet_h2 is None else _exp(self.log_verlet_h2)


def bias_bound(field: ForceField, params: AlgoParams, constants: DerivedConstants, dim: int, horizon: Optional[int] = None) -> BiasBounds:
    """Numerical-integration bias bounds and the stochastic-gradient term at ``horizon``."""
    L, m, h, T = field.L, field.m, params.h, params.T
    log_base = math.log(2 * constants.g / math.log(2)) - constants.log_eps_star
    # exponent sqrt(L) T / c, computed as a log to survive tiny c
    log_power = math.log(math.sqrt(L) * T) - constants.log_c
    log_growth = _exp(log_power) * log_base
    spread = max(dim * L / m, (L * constants.R_prime) ** 2 / m)
    log_verlet = math.log(16) + log_growth + math.log(h) + 0.5 * math.log(spread)
    log_mid = (
        math.log(144 * math.sqrt(6)) - math.log(T) + log_growth
        - 0.25 * math.log(L) + 1.5 * math.log(h) + 0.5 * math.log(spread)
    )
    log_h2 = None
    if field.hessian_lipschitz is not None:
        log_h2 = (
            math.log(66 * (1 + field.hessian_lipschitz / L**1.5)) + log_growth
            + 0.5 * math.log(L) + 2 * math.log(h) + math.log(spread)
        )
    if field.stochastic is None:
        sg = 0.0
    elif horizon is None:
        sg = None
    else:
        sg = sg_bias_term(field, params, horizon)
    return BiasBounds(log_verlet, log_mid, log_h2, sg)


def sg_bias_term(field: ForceField, params: AlgoParams, horizon: int) -> float:
    """Stochastic-gradient displacement bound after ``horizon`` iterations."""
    if field.stochastic is None:
        return 0.0
    sL = math.sqrt(field.L)
    h = params.h
    log_val = (
        math.log(field.stochastic.variance_bound * sL * h) if field.stochastic.variance_bound > 0 else -math.inf
    )
    log_val += horizon * params.K * math.log1p(3 * sL * h) - math.log(field.stochastic.p)
    return math.sqrt(_exp(log_val)) if log_val > -math.inf else 0.0


def synchronous_rate(constants: DerivedConstants) -> float:
    """Per-iteration contraction of the modified squared norm under synchronous coupling."""
    return constants.m * constants.T**2 / (16 * (1 - constants.eta))


def reflection_growth(constants: DerivedConstants) -> float:
    return 10 * constants.L * constants.T**2 / (1 - constants.eta)


def reflection_offset(constants: DerivedConstants, q_hat_norm: float) -> float:
    eta, T = constants.eta, constants.T
    return 2 * T * T * (1 + eta) / (1 - eta) * max(8 * q_hat_norm / math.sqrt(2 * math.pi), 4.0)


def concave_rate(constants: DerivedConstants) -> float:
    """One-step decrease factor of the concave distance inside the reflection region."""
    return constants.c0 * constants.L * constants.T**2 / (1 - constants.eta)


def concave_drift(constants: DerivedConstants, q_hat_norm: float) -> float:
    eta, T, g = constants.eta, constants.T, constants.g
    return g * math.exp(-constants.gR_hat) * T * T * (1 + eta) / (32 * (1 - eta)) * min(q_hat_norm, 67 / 50)


def coordinate_lipschitz(constants: DerivedConstants) -> float:
    """Lipschitz norm of ``x -> x_1`` with respect to the twisted distance."""
    if constants.eta == 0:
        return 1.0 / (1.0 + constants.alpha_hat)
    return 1.0 / constants.alpha_hat
