"""Target force fields together with their curvature constants.

A force field is the drift ``b(x, theta)`` driving the sampler, plus the
constants ``m`` (convexity outside a ball), ``L`` (global gradient
Lipschitz constant) and ``R`` (radius of the nonconvex ball). Drifts accept
positions of shape ``(..., d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ParameterError(ValueError):
    """Raised for parameter values outside an operation's domain."""


@dataclass(frozen=True)
class GradientIndex:
    """Which gradient estimate to use: the full batch (``None``) or a minibatch.

    ``component_ids`` has shape ``(p,)`` or, for an ensemble, ``(n, p)``.
    """

    component_ids: Optional[np.ndarray] = None

    @property
    def deterministic(self) -> bool:
        return self.component_ids is None

    @classmethod
    def minibatch(cls, ids) -> "GradientIndex":
        return cls(np.asarray(ids, dtype=np.int64))


DETERMINISTIC = GradientIndex()


@dataclass(frozen=True)
class MinibatchSpec:
    p: int
    component_count: int
    variance_bound: float


@dataclass(frozen=True)
class ForceField:
    """A drift ``b(x, theta)`` with its constants.

    ``potential`` is the scalar ``U`` with ``b = grad U`` when the field is
    conservative; the bias experiments use it for reference moments.
    """

    dim: int
    eval: Callable[[np.ndarray, GradientIndex], np.ndarray]
    m: float
    L: float
    R: float
    hessian_lipschitz: Optional[float] = None
    stochastic: Optional[MinibatchSpec] = None
    potential: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __call__(self, x, theta: GradientIndex = DETERMINISTIC) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected trailing dimension {self.dim}, got {x.shape}")
        return self.eval(x, theta)

    @property
    def R_prime(self) -> float:
        return 4.0 * self.R * (1.0 + self.L / self.m)

    def draw_index(self, uniforms: Optional[np.ndarray]) -> GradientIndex:
        """Turn ``component_count`` uniforms per member into a minibatch.

        Components are drawn without replacement by ranking the uniforms.
        """
        if self.stochastic is None:
            return DETERMINISTIC
        order = np.argsort(uniforms, axis=-1, kind="stable")
        return GradientIndex(order[..., : self.stochastic.p])


class _LinearDrift:
    def __init__(self, curvature: float):
        self.curvature = curvature

    def __call__(self, x, theta):
        return self.curvature * x


class _QuadraticPotential:
    def __init__(self, curvature: float):
        self.curvature = curvature

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return 0.5 * self.curvature * np.sum(x * x, axis=-1)


def make_gaussian_target(dim: int, curvature: float) -> ForceField:
    """Standard Gaussian target with precision ``curvature``: ``b(x) = curvature * x``."""
    if dim < 1:
        raise ParameterError("dim must be at least 1")
    if not curvature > 0:
        raise ParameterError("curvature must be positive")
    curvature = float(curvature)
    return ForceField(
        dim=dim,
        eval=_LinearDrift(curvature),
        m=curvature,
        L=curvature,
        R=0.0,
        hessian_lipschitz=0.0,
        potential=_QuadraticPotential(curvature),
        name="gaussian",
        params={"curvature": curvature},
    )


class DoubleWell:
    """Radial double well ``scale * (r**2 - a**2)**2 / (4 a**2)``, capped at ``cap``.

    Beyond the cap radius the radial profile continues as the quadratic that
    matches value, slope and curvature at the cap, so the Hessian is bounded
    and continuous.
    """

    def __init__(self, a: float, scale: float, cap: float):
        self.a = a
        self.scale = scale
        self.cap = cap
        a2 = a * a
        self.a2 = a2
        self.u_cap = scale * (cap * cap - a2) ** 2 / (4 * a2)
        self.du_cap = scale * cap * (cap * cap - a2) / a2
        self.kappa = scale * (3 * cap * cap - a2) / a2

    def radial_derivative(self, r):
        r = np.asarray(r, dtype=np.float64)
        inner = self.scale * r * (r * r - self.a2) / self.a2
        outer = self.du_cap + self.kappa * (r - self.cap)
        return np.where(r <= self.cap, inner, outer)

    def radial_second_derivative(self, r):
        r = np.asarray(r, dtype=np.float64)
        inner = self.scale * (3 * r * r - self.a2) / self.a2
        return np.where(r <= self.cap, inner, self.kappa)

    def __call__(self, x):
        """Potential value."""
        x = np.asarray(x, dtype=np.float64)
        r = np.sqrt(np.sum(x * x, axis=-1))
        inner = self.scale * (r * r - self.a2) ** 2 / (4 * self.a2)
        dr = r - self.cap
        outer = self.u_cap + self.du_cap * dr + 0.5 * self.kappa * dr * dr
        return np.where(r <= self.cap, inner, outer)

    def gradient(self, x, theta=DETERMINISTIC):
        x = np.asarray(x, dtype=np.float64)
        r2 = np.sum(x * x, axis=-1, keepdims=True)
        r = np.sqrt(r2)
        inner = self.scale * (r2 - self.a2) / self.a2
        safe_r = np.where(r > self.cap, r, 1.0)
        outer = (self.du_cap + self.kappa * (r - self.cap)) / safe_r
        return np.where(r <= self.cap, inner, outer) * x

    def hessian(self, x):
        """Exact Hessian at a single point ``x`` of shape ``(d,)``."""
        x = np.asarray(x, dtype=np.float64)
        d = x.shape[-1]
        r = float(np.sqrt(x @ x))
        u2 = float(self.radial_second_derivative(r))
        if r == 0.0:
            return u2 * np.eye(d)
        tangential = float(self.radial_derivative(r)) / r
        e = x / r
        return tangential * np.eye(d) + (u2 - tangential) * np.outer(e, e)


def make_double_well_target(dim: int, a: float, scale: float, cap_radius: Optional[float] = None) -> ForceField:
    """Nonconvex double well with analytically derived constants.

    The cap radius defaults to ``3 a``. Curvature outside the cap ball is at
    least ``m`` and the nonconvex ball is the cap ball itself, so ``R`` is the
    cap radius.
    """
    if dim < 1:
        raise ParameterError("dim must be at least 1")
    if not a > 0 or not scale > 0:
        raise ParameterError("a and scale must be positive")
    cap = 3.0 * a if cap_radius is None else float(cap_radius)
    # the Hessian eigenvalues outside the cap must be positive
    min_cap = a if dim > 1 else a / np.sqrt(3.0)
    if not cap > min_cap:
        raise ParameterError(f"cap_radius must exceed {min_cap:g} for dim={dim}")
    well = DoubleWell(float(a), float(scale), cap)
    radial = well.kappa
    # tangential curvature U'(r)/r is increasing in r on both pieces
    tangential_at_cap = scale * (cap * cap - a * a) / (a * a)
    m = radial if dim == 1 else min(radial, tangential_at_cap)
    L = max(scale, radial)
    return ForceField(
        dim=dim,
        eval=well.gradient,
        m=float(m),
        L=float(L),
        R=cap,
        hessian_lipschitz=float(6 * scale * cap / (a * a)),
        potential=well,
        name="double_well",
        params={"a": float(a), "scale": float(scale), "cap_radius": cap},
    )


class _MinibatchDrift:
    def __init__(self, components: Sequence[Callable], p: int):
        self.components = list(components)
        self.p = p

    def all_components(self, x):
        return np.stack([np.asarray(g(x), dtype=np.float64) for g in self.components])

    def __call__(self, x, theta):
        values = self.all_components(x)  # (count, ..., d)
        if theta.deterministic:
            return values.mean(axis=0)
        ids = np.asarray(theta.component_ids)
        if ids.ndim == 1:
            return values[ids].mean(axis=0)
        # one minibatch per ensemble member along the leading axis of x
        members = np.arange(ids.shape[0])[:, None]
        return values[ids, members].mean(axis=1)


def make_minibatch_target(
    components: Sequence,
    p: int,
    *,
    dim: Optional[int] = None,
    m: Optional[float] = None,
    L: Optional[float] = None,
    R: Optional[float] = None,
    variance_bound: Optional[float] = None,
    probe_points: Optional[np.ndarray] = None,
    seed: int = 0,
) -> ForceField:
    """Average of ``p`` of the component gradients, chosen per evaluation.

    Constants default to the worst case over components when those are
    ForceFields. The variance bound ``E|g_j(x) - mean_j g_j(x)|^2`` for one
    uniformly chosen component is maximized over probe points unless given.
    """
    count = len(components)
    if count == 0:
        raise ParameterError("need at least one component")
    if not 1 <= p <= count:
        raise ParameterError(f"p={p} must lie in [1, {count}]")
    fields = [c for c in components if isinstance(c, ForceField)]
    if len(fields) == count:
        dim = fields[0].dim if dim is None else dim
        m = min(f.m for f in fields) if m is None else m
        L = max(f.L for f in fields) if L is None else L
        R = max(f.R for f in fields) if R is None else R
    if dim is None or m is None or L is None or R is None:
        raise ParameterError("dim, m, L and R are required for plain callables")

    def grad_of(c):
        if isinstance(c, ForceField):
            return lambda x: c.eval(x, DETERMINISTIC)
        return c

    drift = _MinibatchDrift([grad_of(c) for c in components], p)
    if variance_bound is None:
        if probe_points is None:
            rng = np.random.default_rng(seed)
            probe_points = 3.0 * rng.standard_normal((256, dim))
        values = drift.all_components(np.asarray(probe_points, dtype=np.float64))
        spread = values - values.mean(axis=0)
        variance_bound = float(np.max(np.mean(np.sum(spread * spread, axis=-1), axis=0)))
    return ForceField(
        dim=dim,
        eval=drift,
        m=float(m),
        L=float(L),
        R=float(R),
        stochastic=MinibatchSpec(p=p, component_count=count, variance_bound=float(variance_bound)),
        name="minibatch",
        params={"p": p, "component_count": count},
    )


class _ShiftedLinear:
    def __init__(self, curvature: float, center: np.ndarray):
        self.curvature = curvature
        self.center = center

    def __call__(self, x):
        return self.curvature * (np.asarray(x, dtype=np.float64) - self.center)


def make_minibatch_gaussian_target(dim: int, curvature: float, components: int, spread: float, p: int) -> ForceField:
    """Data-average Gaussian: component ``j`` pulls towards a center on the first axis.

    Centers are evenly spaced on ``[-spread, spread]`` so their mean is the
    origin and the full-batch drift is ``curvature * x``. The variance bound
    is exact: ``curvature**2`` times the mean squared center norm.
    """
    if components < 1:
        raise ParameterError("components must be at least 1")
    if not curvature > 0:
        raise ParameterError("curvature must be positive")
    offsets = np.linspace(-spread, spread, components) if components > 1 else np.zeros(1)
    centers = np.zeros((components, dim))
    centers[:, 0] = offsets
    grads = [_ShiftedLinear(float(curvature), c) for c in centers]
    variance = float(curvature**2 * np.mean(offsets**2))
    target = make_minibatch_target(
        grads, p, dim=dim, m=curvature, L=curvature, R=0.0, variance_bound=variance
    )
    return ForceField(
        dim=dim,
        eval=target.eval,
        m=target.m,
        L=target.L,
        R=0.0,
        hessian_lipschitz=0.0,
        stochastic=target.stochastic,
        potential=_QuadraticPotential(float(curvature)),
        name="minibatch_gaussian_mixture",
        params={"curvature": float(curvature), "components": components, "spread": float(spread), "p": p},
    )
