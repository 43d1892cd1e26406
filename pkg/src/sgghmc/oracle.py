"""Closed-form and brute-force references used to validate the sampler and coupling.

None of these functions call into the coupling code; tests compare the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import integrate
from scipy.special import erfc

from .integrator import AlgoParams, ChainState, LegRandomness, hamiltonian_leg
from .model import DETERMINISTIC, ForceField, ParameterError

APRIORI_CONSTANT = 256.0
BORDERLINE = 1e-9
# relative rounding allowance when comparing two sides that can coincide exactly
ROUNDING = 1e-12


def normal_cdf(x):
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) / math.sqrt(2.0))


def normal_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _t_hat_squared(T: float, eta: float) -> float:
    if not 0.0 <= eta < 1.0:
        raise ParameterError(f"eta={eta} outside the admissible range [0,1)")
    return T * T * (1 - eta * eta) / (1 - eta) ** 2


def k_second_moment_exact(q_hat_norm: float, T: float, eta: float) -> float:
    """``E[K^2]`` for the reflection coupling at ``r* = 1/T_hat^2``."""
    a = float(q_hat_norm)
    bracket = (4 + a * a) * (normal_cdf(a / 2) - normal_cdf(-a / 2)) + 4 * a * normal_pdf(a / 2)
    return _t_hat_squared(T, eta) * float(bracket)


def k_second_moment_quadrature(q_hat_norm: float, T: float, eta: float) -> float:
    """Direct quadrature of ``(a + 2 xi)^2`` against the rejection density."""
    a = float(q_hat_norm)

    def integrand(xi):
        return (a + 2 * xi) ** 2 * (normal_pdf(xi) - normal_pdf(xi + a))

    value, _ = integrate.quad(integrand, -a / 2, np.inf, epsabs=1e-13, epsrel=1e-12)
    return _t_hat_squared(T, eta) * value


def _check_lemexes_ranges(g_hat, C, c1, c2, T_hat):
    if not (g_hat > 0 and C > 1 and 0 < c1 < 1 and c2 > 0 and T_hat > 0):
        raise ParameterError("need g_hat > 0, C > 1, 0 < c1 < 1, c2 > 0 and T_hat > 0")


def lemexes_lower_bound(q_hat_norm: float, g_hat: float, C: float, c1: float, c2: float, T_hat: float) -> float:
    """Lower bound on ``E[exp(-g_hat C (K - r))]`` with ``r* T_hat^2 = 1``."""
    _check_lemexes_ranges(g_hat, C, c1, c2, T_hat)
    if q_hat_norm < 0:
        raise ParameterError("q_hat_norm must be nonnegative")
    r = q_hat_norm * T_hat  # |q_hat| / (r* T_hat)
    lo = -c2 + math.log(c1) / (2 * g_hat * T_hat)
    nodes, weights = leggauss(64)
    half = 0.5 * (-c2 - lo)
    phi_integral = half * float(np.sum(weights * normal_cdf(lo + half * (nodes + 1))))
    prefactor = 4 * c1 * g_hat * T_hat * phi_integral
    if r < 2 * c2 * T_hat:
        growth = math.expm1(g_hat * r)
    else:
        growth = math.expm1(2 * c2 * g_hat * C * T_hat)
    return 1.0 + prefactor * growth


def lemexes_exact(q_hat_norm: float, g_hat: float, C: float, T_hat: float, r_star: Optional[float] = None) -> float:
    """Exact ``E[exp(-g_hat C (K - r))]`` as a one-dimensional integral."""
    if r_star is None:
        r_star = 1.0 / T_hat**2
    r = q_hat_norm / (r_star * T_hat)
    a = r_star * T_hat * r
    kappa = g_hat * C
    accepted = 2 * math.exp(kappa * r_star * T_hat**2 * r) * float(normal_cdf(-a / 2))

    def integrand(u):
        return math.exp(-2 * kappa * T_hat * u) * (math.exp(-u * u / 2) - math.exp(-((u + a) ** 2) / 2))

    rejected, _ = integrate.quad(integrand, -a / 2, np.inf, epsabs=1e-13, epsrel=1e-11, limit=200)
    return accepted + rejected / math.sqrt(2 * math.pi)


class PropositionVariant(Enum):
    LBA = "LBA"
    LAB = "LAB"
    LBA2 = "LBA2"
    LAB2 = "LAB2"
    LBA_R = "LBA_R"
    LBA2_R = "LBA2_R"
    EXPO = "EXPO"
    EXPO2 = "EXPO2"
    RVR = "RVR"


@dataclass(frozen=True)
class _VariantRule:
    form: str  # "BA", "AB" or "BA_R"
    squared: bool
    factor: str  # "contract", "one", "expand3", "expand2"
    region: str  # "dq", "dq_half", "dq_mid", "dp_17", "dp_4", "all"
    delta_max: str  # "half", "one", "eta1_half", "eta1", "eta0"
    h_cap: bool  # whether L h^2 <= 1/256 is also required


_RULES = {
    PropositionVariant.LBA: _VariantRule("BA", True, "contract", "dq", "half", False),
    PropositionVariant.LAB: _VariantRule("AB", False, "one", "dq_half", "half", False),
    PropositionVariant.LBA_R: _VariantRule("BA_R", True, "contract", "dq_mid", "one", False),
    PropositionVariant.LBA2: _VariantRule("BA", True, "contract", "dp_17", "eta1_half", True),
    PropositionVariant.LAB2: _VariantRule("AB", False, "one", "dp_17", "half", True),
    PropositionVariant.LBA2_R: _VariantRule("BA_R", True, "contract", "dp_4", "eta0", True),
    PropositionVariant.EXPO: _VariantRule("BA", True, "expand3", "all", "eta0", False),
    PropositionVariant.EXPO2: _VariantRule("AB", True, "expand2", "all", "eta1", False),
    PropositionVariant.RVR: _VariantRule("BA_R", True, "expand3", "all", "eta0", True),
}


def uses_midpoint(variant: PropositionVariant) -> bool:
    return _RULES[variant].form == "BA_R"


@dataclass(frozen=True)
class NormCheck:
    holds: bool
    lhs: float
    rhs: float
    hypotheses_met: bool


def _vnorm(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(a * a, axis=-1))


def _m_norm_sq(a: np.ndarray, b: np.ndarray, k) -> np.ndarray:
    return np.sum(a * a, axis=-1) + 2 * k * np.sum(a * b, axis=-1) + 2 * k * k * np.sum(b * b, axis=-1)


def _delta_limit(rule: _VariantRule, eta1: np.ndarray) -> np.ndarray:
    if rule.delta_max == "half":
        return np.full_like(eta1, 0.5)
    if rule.delta_max in ("one", "eta0"):
        return np.ones_like(eta1)
    if rule.delta_max == "eta1_half":
        return np.minimum(eta1, 0.5)
    return eta1


def _region_margin(rule: _VariantRule, field: ForceField, dq, dp, h, ubar) -> np.ndarray:
    """Signed margin of the region predicate (nonnegative inside)."""
    Rp = field.R_prime
    if rule.region == "dq":
        return _vnorm(dq) - Rp
    if rule.region == "dq_half":
        return _vnorm(dq + 0.5 * h[:, None] * dp) - Rp
    if rule.region == "dq_mid":
        return _vnorm(dq + ubar[:, None] * dp) - Rp
    if rule.region == "dp_17":
        return _vnorm(dp) - math.sqrt(17 * field.L / 4) * _vnorm(dq)
    if rule.region == "dp_4":
        return _vnorm(dp) - 4 * math.sqrt(field.L) * _vnorm(dq)
    return np.full(dq.shape[0], np.inf)


def _hypotheses(rule, field, h, eta0, eta1, ubar, dq, dp) -> np.ndarray:
    delta = eta0 - eta1
    ok = (eta1 >= 0) & (eta0 <= 1) & (h > 0)
    ok &= (delta > 0) & (delta <= _delta_limit(rule, eta1))
    h_bound = delta * delta
    if rule.h_cap:
        h_bound = np.minimum(h_bound, 1.0 / 256)
    ok &= field.L * h * h <= h_bound * (1 - BORDERLINE)
    if rule.form == "BA_R":
        ok &= (ubar > 0) & (ubar < h)
    margin = _region_margin(rule, field, dq, dp, h, ubar)
    scale = 1.0 + field.R_prime + _vnorm(dq) + _vnorm(dp)
    # borderline draws are discarded rather than tested
    return ok & (margin >= BORDERLINE * scale)


def check_norm_batch(variant: PropositionVariant, qbar, qbar2, pbar, pbar2, h, eta0, eta1, field: ForceField, midpoint_u=None, theta=None):
    """Vectorized form of :func:`check_norm_inequality` over a leading batch axis.

    Returns arrays ``(holds, lhs, rhs, hypotheses_met)``.
    """
    theta = DETERMINISTIC if theta is None else theta
    rule = _RULES[variant]
    qbar, qbar2, pbar, pbar2 = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (qbar, qbar2, pbar, pbar2))
    n = qbar.shape[0]
    h, eta0, eta1 = (np.broadcast_to(np.asarray(a, dtype=np.float64), (n,)) for a in (h, eta0, eta1))
    dq = qbar - qbar2
    dp = pbar - pbar2
    ubar = None
    if rule.form == "BA_R":
        if midpoint_u is None:
            raise ParameterError(f"{variant.value} needs midpoint_u")
        ubar = np.broadcast_to(np.asarray(midpoint_u, dtype=np.float64), (n,)) * h
    met = _hypotheses(rule, field, h, eta0, eta1, ubar, dq, dp)
    delta = eta0 - eta1
    safe_delta = np.where(delta > 0, delta, 1.0)
    k = h / (2 * safe_delta)
    hc = h[:, None]

    if rule.form == "BA":
        db = field(qbar, theta) - field(qbar2, theta)
    elif rule.form == "BA_R":
        db = field(qbar + ubar[:, None] * pbar, theta) - field(qbar2 + ubar[:, None] * pbar2, theta)
    else:
        db = field(qbar + 0.5 * hc * pbar, theta) - field(qbar2 + 0.5 * hc * pbar2, theta)
    if rule.form == "AB":
        new_q = dq + 0.5 * hc * dp
    else:
        new_q = dq + 0.5 * hc * dp - 0.25 * hc * hc * db
    new_p = dp - 0.5 * hc * db

    lhs = _m_norm_sq(new_q, eta1[:, None] * new_p, k)
    base = _m_norm_sq(dq, eta0[:, None] * dp, k)
    if rule.factor == "contract":
        factor = 1 - field.m * eta0 * h * h / (16 * safe_delta)
    elif rule.factor == "one":
        factor = np.ones(n)
    elif rule.factor == "expand3":
        factor = 1 + 3 * field.L * eta0 * h * h / safe_delta
    else:
        factor = 1 + 2 * field.L * eta0 * h * h / safe_delta
    rhs = factor * base
    if not rule.squared:
        lhs, rhs = np.sqrt(lhs), np.sqrt(np.maximum(rhs, 0.0))
    holds = lhs <= rhs * (1 + ROUNDING) + 1e-300
    return holds, lhs, rhs, met


def check_norm_inequality(
    variant: PropositionVariant,
    qbar,
    qbar2,
    pbar,
    pbar2,
    h: float,
    eta0: float,
    eta1: float,
    field: ForceField,
    midpoint_u: Optional[float] = None,
    theta=None,
) -> NormCheck:
    """Evaluate both sides of the weighted-norm inequality for one half or full step.

    ``midpoint_u`` is the fraction of ``h`` at which the randomized-midpoint
    forms evaluate the drift, so the shift is ``midpoint_u * h``. Unsquared
    variants report norms, the others squared norms.
    """
    holds, lhs, rhs, met = check_norm_batch(variant, qbar, qbar2, pbar, pbar2, h, eta0, eta1, field, midpoint_u, theta)
    return NormCheck(bool(holds[0]), float(lhs[0]), float(rhs[0]), bool(met[0]))


def _random_directions(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    u = rng.standard_normal((n, dim))
    return u / _vnorm(u)[:, None]


def sample_variant_inputs(variant: PropositionVariant, field: ForceField, rng: np.random.Generator, n: int = 1) -> dict:
    """Random batch of ``n`` inputs drawn inside the variant's hypotheses.

    Scales are mixed over several orders of magnitude so that both the
    force-dominated and the velocity-dominated corners are visited.
    """
    rule = _RULES[variant]
    dim, L = field.dim, field.L
    eta0 = rng.uniform(0.02, 1.0, n)
    cap = {
        "half": np.minimum(0.5, eta0),
        "one": eta0,
        "eta1_half": np.minimum(0.5, eta0 / 2),
        "eta1": eta0 / 2,
        "eta0": eta0,
    }[rule.delta_max]
    delta = cap * rng.uniform(0.01, 1.0, n)
    eta1 = eta0 - delta
    h_bound = delta * delta
    if rule.h_cap:
        h_bound = np.minimum(h_bound, 1.0 / 256)
    h = np.sqrt(h_bound / L) * rng.uniform(0.01, 1.0, n)
    frac = rng.uniform(0.0, 1.0, n) if rule.form == "BA_R" else None
    ubar = frac * h if frac is not None else np.zeros(n)

    length = max(field.R_prime, 1.0 / math.sqrt(L))
    qbar = length * rng.standard_normal((n, dim))
    pbar = rng.standard_normal((n, dim)) * rng.exponential(2.0, (n, 1))
    col = lambda a: a[:, None]  # noqa: E731
    if rule.region in ("dq", "dq_half", "dq_mid"):
        radius = field.R_prime + length * rng.exponential(1.0, n)
        target = col(radius) * _random_directions(rng, n, dim)
        dp = rng.standard_normal((n, dim)) * col(length * rng.exponential(1.0, n) / h ** rng.uniform(0, 1, n))
        shift = {"dq": np.zeros(n), "dq_half": 0.5 * h, "dq_mid": ubar}[rule.region]
        dq = target - col(shift) * dp
    elif rule.region in ("dp_17", "dp_4"):
        dq = col(length * rng.exponential(1.0, n)) * _random_directions(rng, n, dim)
        ratio = math.sqrt(17 * L / 4) if rule.region == "dp_17" else 4 * math.sqrt(L)
        size = ratio * _vnorm(dq) * (1 + rng.exponential(1.0, n))
        dp = col(size) * _random_directions(rng, n, dim)
    else:
        dq = length * rng.standard_normal((n, dim)) * rng.exponential(1.0, (n, 1))
        dp = rng.standard_normal((n, dim)) * col(rng.exponential(2.0, n) / np.sqrt(h) ** rng.uniform(0, 1, n))
    return dict(
        variant=variant, qbar=qbar, qbar2=qbar - dq, pbar=pbar, pbar2=pbar - dp,
        h=h, eta0=eta0, eta1=eta1, field=field, midpoint_u=frac,
    )


@dataclass(frozen=True)
class SweepResult:
    violations: int
    tested: int
    discarded: int
    worst_ratio: float  # largest lhs / rhs among tested draws


def sweep_variant(variant: PropositionVariant, field: ForceField, draws: int, seed: int = 0, batch: int = 10_000) -> SweepResult:
    """Check the inequality on ``draws`` random inputs inside the hypotheses."""
    rng = np.random.default_rng(seed)
    violations = tested = discarded = 0
    worst = 0.0
    remaining = draws
    while remaining > 0:
        n = min(batch, remaining)
        remaining -= n
        holds, lhs, rhs, met = check_norm_batch(**sample_variant_inputs(variant, field, rng, n))
        discarded += int(np.sum(~met))
        tested += int(np.sum(met))
        violations += int(np.sum(met & ~holds))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(rhs > 0, lhs / rhs, 0.0)
        if np.any(met):
            worst = max(worst, float(np.max(ratio[met])))
    return SweepResult(violations, tested, discarded, worst)


@dataclass(frozen=True)
class AprioriResult:
    holds_q: bool
    holds_p: bool
    margin_q: float
    margin_p: float
    precondition_met: bool


def apriori_check(field: ForceField, params: AlgoParams, first: ChainState, second: ChainState, rand: LegRandomness) -> AprioriResult:
    """Run both legs with shared randomness and test the leg-wise difference bounds.

    Velocities are also checked just after each opening half kick of a
    Verlet sub-step, where the piecewise-constant velocity path takes values
    not visible on the grid.
    """
    c = APRIORI_CONSTANT
    T, h = params.T, params.h
    met = field.L * T * (T + h) <= 1.0 / c
    path1 = hamiltonian_leg(first, params, field, rand, trajectory=True)
    path2 = hamiltonian_leg(second, params, field, rand, trajectory=True)
    z = first.x - second.x
    dv = first.v - second.v
    scale = max(float(np.linalg.norm(z)), float(np.linalg.norm(z + T * dv)))
    q_err = 0.0
    p_err = 0.0
    for k, (s1, s2) in enumerate(zip(path1, path2)):
        s = k * h
        q_err = max(q_err, float(np.linalg.norm(s1.x - s2.x - z - s * dv)))
        p_err = max(p_err, float(np.linalg.norm(s1.v - s2.v - dv)))
        if params.u == 0 and k < params.K:
            theta = rand.thetas[k]
            half1 = s1.v - 0.5 * h * field(s1.x, theta)
            half2 = s2.v - 0.5 * h * field(s2.x, theta)
            p_err = max(p_err, float(np.linalg.norm(half1 - half2 - dv)))
    q_bound = 3 / (2 * c - 1) * scale
    p_bound = 6 * c / (2 * c - 1) * field.L * T * scale
    return AprioriResult(q_err <= q_bound, p_err <= p_bound, q_bound - q_err, p_bound - p_err, met)


def target_moment_oracle(field: ForceField, beta: int, dim: Optional[int] = None) -> float:
    """Upper bound on the ``beta``-th absolute moment of the target position law."""
    if beta not in (2, 4):
        raise ParameterError("beta must be 2 or 4")
    dim = field.dim if dim is None else dim
    return ((3 * field.L * field.R_prime**2 + 2 * dim + 2 * beta - 4) / field.m) ** (beta / 2)


# Linear (Gaussian-target) references


def verlet_matrix(h: float, curvature: float) -> np.ndarray:
    """One Verlet sub-step on ``b(x) = curvature * x`` as a 2x2 map of ``(x, v)``."""
    a = h * h * curvature
    return np.array([[1 - a / 2, h], [-h * curvature * (1 - a / 4), 1 - a / 2]])


def midpoint_matrix(h: float, curvature: float, u: float) -> np.ndarray:
    """One randomized-midpoint sub-step with midpoint fraction ``u``."""
    lam = curvature
    return np.array(
        [[1 - h * h * lam / 2, h - u * h**3 * lam / 2], [-h * lam, 1 - u * h * h * lam]]
    )


def leg_matrix(params: AlgoParams, curvature: float, midpoints=None) -> np.ndarray:
    """Product of sub-step maps in application order (so the result acts on column vectors)."""
    out = np.eye(2)
    for k in range(params.K):
        if params.u == 0:
            step = verlet_matrix(params.h, curvature)
        else:
            step = midpoint_matrix(params.h, curvature, midpoints[k])
        out = step @ out
    return out


def _expected_kron(params: AlgoParams, curvature: float):
    """``E[A (x) A]`` and ``E[A]`` for the leg map; midpoint fractions are uniform."""
    if params.u == 0:
        A = leg_matrix(params, curvature)
        return np.kron(A, A), A
    nodes, weights = leggauss(3)  # exact for the quadratic dependence on u
    nodes = 0.5 * (nodes + 1)
    weights = 0.5 * weights
    kron_step = sum(w * np.kron(midpoint_matrix(params.h, curvature, u), midpoint_matrix(params.h, curvature, u)) for u, w in zip(nodes, weights))
    mean_step = midpoint_matrix(params.h, curvature, 0.5)
    kron = np.eye(4)
    mean = np.eye(2)
    for _ in range(params.K):
        kron = kron_step @ kron
        mean = mean_step @ mean
    return kron, mean


def stationary_covariance(params: AlgoParams, curvature: float) -> np.ndarray:
    """Per-coordinate stationary covariance of ``(x, v)`` on a Gaussian target.

    The measure is recorded after the leg, before the next refresh.
    """
    eta = params.eta
    kron, _ = _expected_kron(params, curvature)
    D = np.diag([1.0, eta])
    e2 = np.array([0.0, 0.0, 0.0, 1.0])  # vec of e_2 e_2^T
    lhs = np.eye(4) - kron @ np.kron(D, D)
    vec = np.linalg.solve(lhs, (1 - eta * eta) * (kron @ e2))
    cov = vec.reshape(2, 2)
    return 0.5 * (cov + cov.T)


def stationary_second_moment(params: AlgoParams, curvature: float, dim: int) -> float:
    """Stationary ``E|x|^2`` of the sampler on ``b(x) = curvature * x``."""
    return dim * float(stationary_covariance(params, curvature)[0, 0])


def mean_path(params: AlgoParams, curvature: float, x0, v0, steps: int) -> np.ndarray:
    """``E[x_n]`` for ``n = 0..steps`` on a Gaussian target, started at a point."""
    _, mean_leg = _expected_kron(params, curvature)
    step = mean_leg @ np.diag([1.0, params.eta])
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    v0 = np.atleast_1d(np.asarray(v0, dtype=np.float64))
    state = np.stack([x0, v0])
    out = np.empty((steps + 1, x0.size))
    out[0] = x0
    for n in range(steps):
        state = step @ state
        out[n + 1] = state[0]
    return out


def double_well_second_moment(field: ForceField) -> float:
    """``E|x|^2`` under ``exp(-U)`` for the radial double well, via radial quadrature."""
    if field.name != "double_well":
        raise ParameterError("needs a double-well target")
    well = field.potential
    d = field.dim
    cap = field.params["cap_radius"]

    def density(r, power):
        return r**power * math.exp(-float(well(np.array([r] + [0.0] * (d - 1)))))

    def radial(power):
        breaks = sorted({0.0, well.a, cap}) + [np.inf]
        return sum(
            integrate.quad(density, lo, hi, args=(power,), epsabs=0, epsrel=1e-12, limit=200)[0]
            for lo, hi in zip(breaks[:-1], breaks[1:])
        )

    return radial(d + 1) / radial(d - 1)
