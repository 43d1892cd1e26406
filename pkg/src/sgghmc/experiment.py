"""Ensemble engine and the statistical experiments: contraction, concentration, bias.

Members are processed in fixed blocks of ``BLOCK_SIZE``. Each block is a pure
function of the config and its member range, and block statistics are merged
in a fixed pairwise tree, so serial and parallel runs agree bit for bit.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import binomtest

from . import oracle
from .constants import (
    DerivedConstants,
    bias_bound,
    concentration_bound,
    coordinate_lipschitz,
    derive_constants,
    log1m_c,
    sg_bias_term,
)
from .coupling import CoupledPair, coupled_iteration, mbar_seminorm, rho_star, twisted_distance
from .integrator import (
    AlgoParams,
    ChainState,
    LegRandomness,
    draw_leg_randomness,
    exact_gaussian_leg,
    ghmc_iteration,
    hamiltonian_leg,
    velocity_refresh,
)
from .model import (
    DETERMINISTIC,
    ForceField,
    ParameterError,
    make_double_well_target,
    make_gaussian_target,
    make_minibatch_gaussian_target,
)
from .streams import SLOT_INIT, SLOT_REFRESH, CounterRNG, StreamView

log = logging.getLogger(__name__)

BLOCK_SIZE = 256
TARGETS = ("gaussian", "double_well", "minibatch_gaussian_mixture")
OBSERVABLES = ("x1", "norm_x", "sq_norm_x", "potential", "mean_potential")
RECORD_COLUMNS = ("step", "member", "twisted_dist", "rho_star", "mbar_sq", "branch", "observable")
AGGREGATE_COLUMNS = ("step", "mean_d", "var_d", "mean_rho", "var_rho", "frac_reflection")
# two-sided coverage of a 3 sigma normal interval
THREE_SIGMA_LEVEL = 0.9973002039367398


@dataclass(frozen=True)
class ExperimentConfig:
    target: str
    K: int
    h: float
    eta: float
    u: int = 0
    dim: int = 1
    curvature: float = 1.0
    well_a: float = 1.0
    well_scale: float = 1.0
    cap_radius: Optional[float] = None
    components: int = 10
    spread: float = 1.0
    batch_p: int = 1
    ensemble: int = 1000
    steps: int = 1000
    burn_in: Optional[int] = None
    seed: int = 0
    observable: str = "x1"
    output: Optional[str] = None
    init_x: tuple = (1.0,)
    init_v: tuple = (0.0,)
    init_y: tuple = (-1.0,)
    init_w: tuple = (0.0,)
    r_star: Optional[float] = None
    workers: int = 1
    record_every: int = 0
    n0: int = 1
    n_avg: int = 1000
    r_grid: tuple = (0.0, 0.05, 0.1, 0.2)
    h_grid: tuple = (0.02, 0.04, 0.08, 0.16)
    hold_T_fixed: bool = True
    p_grid: tuple = (1, 2, 5, 10)
    horizon: int = 10
    repetitions: int = 1000

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ParameterError(f"unknown target {self.target!r}; expected one of {', '.join(TARGETS)}")
        if self.observable not in OBSERVABLES:
            raise ParameterError(f"unknown observable {self.observable!r}")
        if self.ensemble < 1:
            raise ParameterError("ensemble must be at least 1")
        if self.steps < 1:
            raise ParameterError("steps must be at least 1")
        if self.burn_in is not None and not 0 <= self.burn_in < self.steps:
            raise ParameterError("burn_in must satisfy 0 <= burn_in < steps")
        if self.workers < 1:
            raise ParameterError("workers must be at least 1")
        if self.record_every < 0:
            raise ParameterError("record_every must be nonnegative")
        self.algo_params()  # validates K, h, eta, u

    @property
    def effective_burn_in(self) -> int:
        return self.steps // 10 if self.burn_in is None else self.burn_in

    def algo_params(self, **overrides) -> AlgoParams:
        values = dict(K=self.K, h=self.h, eta=self.eta, u=self.u)
        values.update(overrides)
        return AlgoParams(**values)

    def build_target(self, batch_p: Optional[int] = None) -> ForceField:
        if self.target == "gaussian":
            return make_gaussian_target(self.dim, self.curvature)
        if self.target == "double_well":
            return make_double_well_target(self.dim, self.well_a, self.well_scale, self.cap_radius)
        return make_minibatch_gaussian_target(
            self.dim, self.curvature, self.components, self.spread, self.batch_p if batch_p is None else batch_p
        )

    def vector(self, name: str) -> np.ndarray:
        values = np.asarray(getattr(self, name), dtype=np.float64)
        if values.size == 1:
            return np.full(self.dim, float(values[0]))
        if values.size != self.dim:
            raise ParameterError(f"{name} has {values.size} entries, expected 1 or {self.dim}")
        return values


def config_keys() -> list[str]:
    return [f.name for f in fields(ExperimentConfig)]


def observable_fn(config: ExperimentConfig, target: ForceField) -> Callable[[np.ndarray], np.ndarray]:
    name = config.observable
    if name == "x1":
        return lambda x: x[..., 0]
    if name == "norm_x":
        return lambda x: np.sqrt(np.sum(x * x, axis=-1))
    if name == "sq_norm_x":
        return lambda x: np.sum(x * x, axis=-1)
    if target.potential is None:
        raise ParameterError(f"observable {name!r} needs a target with a potential")
    return target.potential


# -- statistics ------------------------------------------------------------


@dataclass
class Moments:
    """Count, mean and centered sum of squares, mergeable in a fixed order."""

    n: np.ndarray
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def of(cls, values: np.ndarray, axis: int = -1) -> "Moments":
        values = np.asarray(values, dtype=np.float64)
        n = np.full(np.delete(values.shape, axis), values.shape[axis], dtype=np.float64)
        mean = values.mean(axis=axis)
        dev = values - np.expand_dims(mean, axis)
        return cls(n, mean, np.sum(dev * dev, axis=axis))

    def merge(self, other: "Moments") -> "Moments":
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.n * other.n / n)
        return Moments(n, mean, m2)

    @property
    def var(self) -> np.ndarray:
        return np.where(self.n > 1, self.m2 / np.maximum(self.n - 1, 1), 0.0)

    @property
    def sem(self) -> np.ndarray:
        return np.sqrt(self.var / self.n)


def tree_reduce(items: Sequence, combine: Callable):
    """Pairwise reduction whose shape depends only on ``len(items)``."""
    items = list(items)
    if not items:
        raise ValueError("nothing to reduce")
    while len(items) > 1:
        merged = [combine(items[i], items[i + 1]) for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            merged.append(items[-1])
        items = merged
    return items[0]


def blocks(total: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + BLOCK_SIZE, total)) for lo in range(0, total, BLOCK_SIZE)]


def _map_blocks(worker: Callable, config: ExperimentConfig, total: int, *args) -> list:
    spans = blocks(total)
    if config.workers == 1 or len(spans) == 1:
        return [worker(config, lo, hi, *args) for lo, hi in spans]
    with ProcessPoolExecutor(max_workers=config.workers) as pool:
        futures = [pool.submit(worker, config, lo, hi, *args) for lo, hi in spans]
        return [f.result() for f in futures]


def wilson_interval(successes: int, trials: int, level: float = THREE_SIGMA_LEVEL) -> tuple[float, float]:
    ci = binomtest(successes, trials).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def fitted_decay_rate(values: np.ndarray, start: int = 0) -> float:
    """Per-step rate ``lambda`` from a least-squares fit ``log v_n = a - lambda n``."""
    values = np.asarray(values, dtype=np.float64)
    n = np.arange(values.size)
    keep = (n >= start) & (values > 0)
    if keep.sum() < 2:
        return math.inf
    slope = np.polyfit(n[keep], np.log(values[keep]), 1)[0]
    return float(-slope)


def loglog_slope(h: Sequence[float], bias: Sequence[float]) -> float:
    h = np.asarray(h, dtype=np.float64)
    bias = np.abs(np.asarray(bias, dtype=np.float64))
    if np.any(bias == 0):
        return math.nan
    return float(np.polyfit(np.log(h), np.log(bias), 1)[0])


# -- records -----------------------------------------------------------------


@dataclass(frozen=True)
class RunRecord:
    step: int
    member: int
    twisted_dist: float
    rho_star: float
    mbar_sq: float
    branch: int
    observable: float


def _fmt(x) -> str:
    return repr(float(x))


def write_records(path: Path, records: np.ndarray) -> None:
    """``records`` is a structured array sorted by (step, member)."""
    with open(path, "w", newline="") as fh:
        fh.write(",".join(RECORD_COLUMNS) + "\n")
        for row in records:
            fh.write(
                f"{int(row['step'])},{int(row['member'])},{_fmt(row['twisted_dist'])},{_fmt(row['rho_star'])},"
                f"{_fmt(row['mbar_sq'])},{int(row['branch'])},{_fmt(row['observable'])}\n"
            )


def write_table(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    Path(path).write_text(buf.getvalue())


_RECORD_DTYPE = np.dtype(
    [("step", np.int64), ("member", np.int64), ("twisted_dist", np.float64), ("rho_star", np.float64),
     ("mbar_sq", np.float64), ("branch", np.int8), ("observable", np.float64)]
)


def _output_dir(config: ExperimentConfig) -> Optional[Path]:
    if config.output is None:
        return None
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _warn_if_inadmissible(constants: DerivedConstants, label: str = "") -> bool:
    if constants.admissible:
        return True
    report = constants.admissibility
    log.warning(
        "inadmissible parameters%s: 4LT^2 <= (1-eta)^2 is %s, step condition is %s; run proceeds flagged",
        f" ({label})" if label else "", report.friction_ok, report.step_ok,
    )
    return False


# -- contraction ---------------------------------------------------------------


@dataclass
class ContractionBlock:
    d: Moments  # per step 0..steps
    rho: Moments
    reflections: np.ndarray
    decay: Moments  # per step 1..steps of rho_{n} - (1-c) rho_{n-1}
    records: Optional[np.ndarray]

    def merge(self, other: "ContractionBlock") -> "ContractionBlock":
        records = None
        if self.records is not None:
            records = np.concatenate([self.records, other.records])
        return ContractionBlock(
            self.d.merge(other.d), self.rho.merge(other.rho), self.reflections + other.reflections,
            self.decay.merge(other.decay), records,
        )


def _initial_pair(config: ExperimentConfig, n: int, constants) -> CoupledPair:
    ones = np.ones((n, 1))
    first = ChainState(ones * config.vector("init_x"), ones * config.vector("init_v"))
    second = ChainState(ones * config.vector("init_y"), ones * config.vector("init_w"))
    return CoupledPair.from_states(first, second, constants)


def _contraction_block(config: ExperimentConfig, lo: int, hi: int) -> ContractionBlock:
    target = config.build_target()
    params = config.algo_params()
    constants = derive_constants(target, params, r_star=config.r_star)
    rng = CounterRNG(config.seed)
    observe = observable_fn(config, target)
    n = hi - lo
    pair = _initial_pair(config, n, constants)
    contraction = math.exp(log1m_c(constants))
    ds = np.empty((config.steps + 1, n))
    rhos = np.empty((config.steps + 1, n))
    refl = np.zeros(config.steps + 1)
    keep = config.record_every > 0
    rows = []

    def record(step, d, rho, pair):
        if keep and step % config.record_every == 0:
            chunk = np.empty(n, dtype=_RECORD_DTYPE)
            chunk["step"] = step
            chunk["member"] = np.arange(lo, hi)
            chunk["twisted_dist"] = d
            chunk["rho_star"] = rho
            chunk["mbar_sq"] = mbar_seminorm(pair.z, pair.first.v - pair.second.v, constants.gamma)
            chunk["branch"] = pair.branch
            chunk["observable"] = observe(pair.first.x)
            rows.append(chunk)

    for step in range(config.steps + 1):
        if step:
            stream = StreamView.for_members(rng, lo, hi, step - 1)
            pair = coupled_iteration(pair, params, target, constants, stream)
            refl[step] = float(np.sum(pair.branch == 1))
        ds[step] = twisted_distance(pair.first, pair.second, constants)
        rhos[step] = rho_star(pair.first, pair.second, constants)
        record(step, ds[step], rhos[step], pair)
    decay = rhos[1:] - contraction * rhos[:-1]
    records = np.concatenate(rows) if keep else None
    return ContractionBlock(Moments.of(ds), Moments.of(rhos), refl, Moments.of(decay), records)


@dataclass
class ContractionResult:
    constants: DerivedConstants
    admissible: bool
    mean_d: np.ndarray
    var_d: np.ndarray
    mean_rho: np.ndarray
    var_rho: np.ndarray
    frac_reflection: np.ndarray
    decay_mean: np.ndarray  # E[rho_{n+1} - (1-c) rho_n]
    decay_sem: np.ndarray
    ensemble: int
    rate_d: float
    rate_rho: float
    records: Optional[np.ndarray] = None

    @property
    def theoretical_rate(self) -> float:
        """``-log(1 - c)``, comparable with the fitted per-step rates."""
        return -log1m_c(self.constants)

    @property
    def sem_d(self) -> np.ndarray:
        return np.sqrt(self.var_d / self.ensemble)

    @property
    def sem_rho(self) -> np.ndarray:
        return np.sqrt(self.var_rho / self.ensemble)

    def step_bound_violations(self, sigmas: float = 3.0) -> np.ndarray:
        """Steps where ``E[rho_{n+1}] <= (1-c) E[rho_n]`` fails beyond ``sigmas`` standard errors."""
        return np.nonzero(self.decay_mean > sigmas * self.decay_sem)[0] + 1

    def envelope(self) -> np.ndarray:
        """``M1 (1-c)^n d_0`` at every step, as floats (may be inf)."""
        n = np.arange(self.mean_d.size)
        d0 = self.mean_d[0]
        if d0 == 0:
            return np.zeros_like(self.mean_d)
        logs = self.constants.log_M1 + n * log1m_c(self.constants) + math.log(d0)
        return np.exp(np.minimum(logs, 709.0))

    def envelope_crossings(self, sigmas: float = 3.0) -> np.ndarray:
        return np.nonzero(self.mean_d - sigmas * self.sem_d > self.envelope())[0]

    def aggregate_rows(self) -> list:
        return [
            (n, self.mean_d[n], self.var_d[n], self.mean_rho[n], self.var_rho[n], self.frac_reflection[n])
            for n in range(self.mean_d.size)
        ]


def run_contraction(config: ExperimentConfig) -> ContractionResult:
    target = config.build_target()
    params = config.algo_params()
    constants = derive_constants(target, params, r_star=config.r_star)
    admissible = _warn_if_inadmissible(constants)
    parts = _map_blocks(_contraction_block, config, config.ensemble)
    total = tree_reduce(parts, ContractionBlock.merge)
    frac = total.reflections / config.ensemble
    frac[0] = 0.0
    result = ContractionResult(
        constants=constants, admissible=admissible,
        mean_d=total.d.mean, var_d=total.d.var, mean_rho=total.rho.mean, var_rho=total.rho.var,
        frac_reflection=frac, decay_mean=total.decay.mean, decay_sem=total.decay.sem,
        ensemble=config.ensemble,
        rate_d=fitted_decay_rate(total.d.mean), rate_rho=fitted_decay_rate(total.rho.mean),
        records=None,
    )
    if total.records is not None:
        result.records = np.sort(total.records, order=("step", "member"), kind="stable")
    out = _output_dir(config)
    if out is not None:
        if result.records is not None:
            write_records(out / "records.csv", result.records)
        write_table(out / "aggregate.csv", AGGREGATE_COLUMNS, result.aggregate_rows())
    return result


# -- concentration ---------------------------------------------------------------


def _concentration_block(config: ExperimentConfig, lo: int, hi: int, n0: int, n_avg: int):
    target = config.build_target()
    params = config.algo_params()
    rng = CounterRNG(config.seed)
    observe = observable_fn(config, target)
    n = hi - lo
    ones = np.ones((n, 1))
    state = ChainState(ones * config.vector("init_x"), ones * config.vector("init_v"))
    total = np.zeros(n)
    for step in range(n0 + n_avg):
        state = ghmc_iteration(state, params, target, StreamView.for_members(rng, lo, hi, step))
        if step + 1 > n0:
            total += observe(state.x)
    return total / n_avg


@dataclass
class ConcentrationRow:
    r: float
    exceed: int
    trials: int
    wilson_low: float
    wilson_high: float
    bound: float

    @property
    def frequency(self) -> float:
        return self.exceed / self.trials

    @property
    def within_envelope(self) -> bool:
        return self.wilson_low <= self.bound


@dataclass
class ConcentrationResult:
    rows: list
    constants: DerivedConstants
    lip_norm: float
    centering: str
    averages: np.ndarray
    admissible: bool

    @property
    def passed(self) -> bool:
        return all(row.within_envelope for row in self.rows)


def _exact_mean_of_average(config, params, n0: int, n_avg: int) -> float:
    path = oracle.mean_path(params, config.curvature, config.vector("init_x")[:1], config.vector("init_v")[:1], n0 + n_avg)
    return float(np.mean(path[n0 + 1 : n0 + n_avg + 1, 0]))


def run_concentration(config: ExperimentConfig, N0: Optional[int] = None, N: Optional[int] = None, r_grid: Optional[Sequence[float]] = None) -> ConcentrationResult:
    N0 = config.n0 if N0 is None else N0
    N = config.n_avg if N is None else N
    r_grid = config.r_grid if r_grid is None else r_grid
    if N < 1:
        raise ParameterError("N must be at least 1")
    if N0 < 0 or (N0 == 0 and config.eta != 0):
        raise ParameterError("N0 must be at least 1 when eta != 0")
    if config.observable not in ("x1", "norm_x"):
        raise ParameterError("concentration needs a Euclidean 1-Lipschitz observable (x1 or norm_x)")
    target = config.build_target()
    params = config.algo_params()
    constants = derive_constants(target, params, r_star=config.r_star)
    admissible = _warn_if_inadmissible(constants)
    lip = coordinate_lipschitz(constants)
    parts = _map_blocks(_concentration_block, config, config.repetitions, N0, N)
    averages = np.concatenate(parts)
    if config.target == "gaussian" and config.observable == "x1":
        centre = _exact_mean_of_average(config, params, N0, N)
        centering = "exact"
    else:
        centre = float(tree_reduce([Moments.of(p[None, :]) for p in parts], Moments.merge).mean[0])
        centering = "ensemble"
    deviations = averages - centre
    rows = []
    for r in r_grid:
        exceed = int(np.sum(deviations > r))
        low, high = wilson_interval(exceed, averages.size)
        bound = concentration_bound(constants, params, N, lip, r) if r > 0 else 1.0
        rows.append(ConcentrationRow(float(r), exceed, averages.size, low, high, bound))
    result = ConcentrationResult(rows, constants, lip, centering, averages, admissible)
    out = _output_dir(config)
    if out is not None:
        write_table(
            out / "concentration.csv",
            ("r", "exceed", "trials", "frequency", "wilson_low", "wilson_high", "bound"),
            [(row.r, row.exceed, row.trials, row.frequency, row.wilson_low, row.wilson_high, row.bound) for row in rows],
        )
    return result


# -- bias ---------------------------------------------------------------------


def _stationary_start(config: ExperimentConfig, target: ForceField, rng: CounterRNG, lo: int, hi: int) -> ChainState:
    """Exact target draws for Gaussian-type targets, else the configured point."""
    n = hi - lo
    if target.name in ("gaussian", "minibatch_gaussian_mixture"):
        draws = StreamView.for_members(rng, lo, hi, 0).normal(SLOT_INIT, 2 * target.dim)
        x = draws[:, : target.dim] / math.sqrt(config.curvature)
        return ChainState(x, draws[:, target.dim :])
    ones = np.ones((n, 1))
    return ChainState(ones * config.vector("init_x"), ones * config.vector("init_v"))


def _bias_block(config: ExperimentConfig, lo: int, hi: int, params: AlgoParams):
    """Per-member long-run averages of ``|x|^2`` and of its control-variate difference."""
    target = config.build_target()
    rng = CounterRNG(config.seed)
    state = _stationary_start(config, target, rng, lo, hi)
    exact = state.copy() if target.name == "gaussian" else None
    burn = config.effective_burn_in
    plain = np.zeros(hi - lo)
    diff = np.zeros(hi - lo)
    for step in range(config.steps):
        stream = StreamView.for_members(rng, lo, hi, step + 1)
        g = stream.normal(SLOT_REFRESH, target.dim)
        state = hamiltonian_leg(velocity_refresh(state, params, g), params, target, draw_leg_randomness(target, params, stream))
        sq = np.sum(state.x * state.x, axis=-1)
        if exact is not None:
            exact = exact_gaussian_leg(velocity_refresh(exact, params, g), params.T, config.curvature)
        if step >= burn:
            plain += sq
            if exact is not None:
                diff += sq - np.sum(exact.x * exact.x, axis=-1)
    count = config.steps - burn
    return Moments.of((plain / count)[None, :]), Moments.of((diff / count)[None, :])


@dataclass
class BiasRow:
    h: float
    K: int
    estimate: float  # long-run E|x|^2
    bias: float
    bias_sem: float
    plain_bias: float
    plain_sem: float
    reference: float
    oracle_bias: Optional[float]
    admissible: bool
    bound: float


@dataclass
class BiasResult:
    rows: list
    slope: float
    oracle_slope: Optional[float]
    estimator: str


def run_bias_scan(config: ExperimentConfig, h_grid: Optional[Sequence[float]] = None, hold_T_fixed: Optional[bool] = None) -> BiasResult:
    h_grid = tuple(config.h_grid if h_grid is None else h_grid)
    hold = config.hold_T_fixed if hold_T_fixed is None else hold_T_fixed
    target = config.build_target()
    if target.name == "gaussian":
        reference = target.dim / config.curvature
    elif target.name == "double_well":
        reference = oracle.double_well_second_moment(target)
    else:
        raise ParameterError("bias scan needs the gaussian or double_well target")
    T = config.K * config.h
    rows = []
    for h in h_grid:
        K = max(1, int(round(T / h))) if hold else config.K
        if hold and not math.isclose(K * h, T, rel_tol=1e-9):
            raise ParameterError(f"h={h} does not divide the integration time T={T}")
        params = config.algo_params(K=K, h=float(h))
        constants = derive_constants(target, params)
        admissible = _warn_if_inadmissible(constants, f"h={h}")
        parts = _map_blocks(_bias_block, config, config.ensemble, params)
        plain = tree_reduce([p[0] for p in parts], Moments.merge)
        diff = tree_reduce([p[1] for p in parts], Moments.merge)
        estimate = float(plain.mean[0])
        oracle_bias = None
        if target.name == "gaussian":
            oracle_bias = oracle.stationary_second_moment(params, config.curvature, target.dim) - reference
            bias, sem = float(diff.mean[0]), float(diff.sem[0])
        else:
            bias, sem = estimate - reference, float(plain.sem[0])
        bounds = bias_bound(target, params, constants, target.dim)
        bound = bounds.verlet_h if params.u == 0 else bounds.midpoint
        rows.append(BiasRow(float(h), K, estimate, bias, sem, estimate - reference, float(plain.sem[0]), reference, oracle_bias, admissible, bound))
    slope = loglog_slope([r.h for r in rows], [r.bias for r in rows]) if len(rows) > 1 else math.nan
    oracle_slope = None
    if target.name == "gaussian" and len(rows) > 1:
        oracle_slope = loglog_slope([r.h for r in rows], [r.oracle_bias for r in rows])
    result = BiasResult(rows, slope, oracle_slope, "control_variate" if target.name == "gaussian" else "plain")
    out = _output_dir(config)
    if out is not None:
        write_table(
            out / "bias.csv",
            ("h", "K", "estimate", "bias", "bias_sem", "plain_bias", "plain_sem", "reference", "oracle_bias", "admissible", "bound"),
            [(r.h, r.K, r.estimate, r.bias, r.bias_sem, r.plain_bias, r.plain_sem, r.reference,
              "" if r.oracle_bias is None else r.oracle_bias, int(r.admissible), r.bound) for r in rows],
        )
    return result


# -- stochastic-gradient bias ----------------------------------------------------


def _full_batch_randomness(rand: LegRandomness) -> LegRandomness:
    K = rand.K
    return LegRandomness([DETERMINISTIC] * K, [DETERMINISTIC] * K, rand.midpoints)


def _sg_block(config: ExperimentConfig, lo: int, hi: int, p: int, horizon: int):
    """Long-run ``|x|^2`` gap and short-horizon coupled distances for one batch size."""
    target = config.build_target(batch_p=p)
    params = config.algo_params()
    rng = CounterRNG(config.seed)
    fb = _stationary_start(config, target, rng, lo, hi)
    sg = fb.copy()
    burn = config.effective_burn_in
    gap = np.zeros(hi - lo)
    for step in range(config.steps):
        stream = StreamView.for_members(rng, lo, hi, step + 1)
        g = stream.normal(SLOT_REFRESH, target.dim)
        rand = draw_leg_randomness(target, params, stream)
        sg = hamiltonian_leg(velocity_refresh(sg, params, g), params, target, rand)
        fb = hamiltonian_leg(velocity_refresh(fb, params, g), params, target, _full_batch_randomness(rand))
        if step >= burn:
            gap += np.sum(sg.x * sg.x, axis=-1) - np.sum(fb.x * fb.x, axis=-1)
    gap /= config.steps - burn

    # short horizon: both chains restart from the full-batch state and separate
    sg = fb.copy()
    sq_dist = np.empty((horizon + 1, hi - lo))
    sq_dist[0] = 0.0
    offset = config.steps + 1
    for n in range(horizon):
        stream = StreamView.for_members(rng, lo, hi, offset + n)
        g = stream.normal(SLOT_REFRESH, target.dim)
        rand = draw_leg_randomness(target, params, stream)
        sg = hamiltonian_leg(velocity_refresh(sg, params, g), params, target, rand)
        fb = hamiltonian_leg(velocity_refresh(fb, params, g), params, target, _full_batch_randomness(rand))
        sq_dist[n + 1] = np.sum((sg.x - fb.x) ** 2 + (sg.v - fb.v) ** 2, axis=-1)
    return Moments.of(gap[None, :]), Moments.of(sq_dist)


@dataclass
class SGBiasRow:
    p: int
    extra_bias: float
    extra_sem: float
    coupled_w2: np.ndarray  # sqrt(E|difference|^2) at n = 0..horizon
    bound: np.ndarray  # stochastic-gradient bound at n = 0..horizon
    long_run_bound: float  # bound at n = steps

    @property
    def dominated(self) -> bool:
        return bool(np.all(self.coupled_w2 <= self.bound))


@dataclass
class SGBiasResult:
    rows: list
    variance_bound: float
    horizon: int


def run_sg_bias(config: ExperimentConfig, p_grid: Optional[Sequence[int]] = None) -> SGBiasResult:
    if config.target != "minibatch_gaussian_mixture":
        raise ParameterError("sgbias needs the minibatch_gaussian_mixture target")
    p_grid = tuple(config.p_grid if p_grid is None else p_grid)
    horizon = config.horizon
    params = config.algo_params()
    rows = []
    variance = None
    for p in p_grid:
        target = config.build_target(batch_p=int(p))
        variance = target.stochastic.variance_bound
        constants = derive_constants(target, params)
        _warn_if_inadmissible(constants, f"p={p}")
        parts = _map_blocks(_sg_block, config, config.ensemble, int(p), horizon)
        gap = tree_reduce([q[0] for q in parts], Moments.merge)
        dist = tree_reduce([q[1] for q in parts], Moments.merge)
        bound = np.array([sg_bias_term(target, params, n) for n in range(horizon + 1)])
        rows.append(SGBiasRow(int(p), float(gap.mean[0]), float(gap.sem[0]), np.sqrt(dist.mean), bound, sg_bias_term(target, params, config.steps)))
    result = SGBiasResult(rows, variance, horizon)
    out = _output_dir(config)
    if out is not None:
        write_table(
            out / "sgbias.csv",
            ("p", "extra_bias", "extra_sem", "coupled_w2_at_horizon", "bound_at_horizon", "long_run_bound"),
            [(r.p, r.extra_bias, r.extra_sem, float(r.coupled_w2[-1]), float(r.bound[-1]), r.long_run_bound) for r in rows],
        )
    return result


def with_overrides(config: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(config, **changes)
