"""Command-line front end: ``sgghmc {bounds,verify,contract,concentrate,bias,sgbias}``."""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from . import oracle
from .constants import bias_bound, derive_constants
from .coupling import k_value, reflection_partner
from .experiment import (
    ExperimentConfig,
    run_bias_scan,
    run_concentration,
    run_contraction,
    run_sg_bias,
    write_table,
)
from .integrator import AlgoParams, ChainState, LegRandomness
from .model import GradientIndex, ParameterError, make_double_well_target, make_gaussian_target

log = logging.getLogger("sgghmc")

SEED_ENV = "SGGHMC_SEED"
REQUIRED = ("target", "K", "h", "eta")
EFFECTIVE_CONFIG = "effective_config.txt"

_INT = {"K", "u", "dim", "components", "batch_p", "ensemble", "steps", "seed", "workers", "record_every",
        "n0", "n_avg", "horizon", "repetitions"}
_OPT_INT = {"burn_in"}
_FLOAT = {"h", "eta", "curvature", "well_a", "well_scale", "spread"}
_OPT_FLOAT = {"cap_radius", "r_star"}
_FLOAT_LIST = {"init_x", "init_v", "init_y", "init_w", "r_grid", "h_grid"}
_INT_LIST = {"p_grid"}
_BOOL = {"hold_T_fixed"}
_STR = {"target", "observable"}
_OPT_STR = {"output"}


class ConfigError(ParameterError):
    """Malformed or invalid configuration text."""


def _convert(key: str, text: str):
    text = text.strip()
    none = text.lower() in ("none", "")
    if key in _INT:
        return int(text)
    if key in _OPT_INT:
        return None if none else int(text)
    if key in _FLOAT:
        return float(text)
    if key in _OPT_FLOAT:
        return None if none else float(text)
    if key in _FLOAT_LIST:
        return tuple(float(t) for t in text.split(","))
    if key in _INT_LIST:
        return tuple(int(t) for t in text.split(","))
    if key in _BOOL:
        lowered = text.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if key in _STR:
        return text
    if key in _OPT_STR:
        return None if none else text
    raise KeyError(key)


_KNOWN = {f.name for f in fields(ExperimentConfig)}


def _split_line(line: str):
    body = line.split("#", 1)[0].strip()
    if not body:
        return None
    if "=" not in body:
        raise ValueError("expected 'key = value'")
    key, value = body.split("=", 1)
    return key.strip(), value.strip()


def parse_config_text(text: str, overrides: Sequence[str] = (), source: str = "<config>") -> ExperimentConfig:
    """Parse ``key = value`` lines, then apply ``key=value`` overrides.

    Seed precedence: overrides, then the file, then ``SGGHMC_SEED``, then 0.
    """
    raw: dict = {}
    where: dict = {}
    for number, line in enumerate(text.splitlines(), start=1):
        try:
            item = _split_line(line)
        except ValueError as exc:
            raise ConfigError(f"{source}:{number}: {exc}") from None
        if item is None:
            continue
        key, value = item
        if key not in _KNOWN:
            raise ConfigError(f"{source}:{number}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{number}: duplicate key {key!r} (first set on line {where[key]})")
        raw[key] = value
        where[key] = number
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in _KNOWN:
            raise ConfigError(f"--set: unknown key {key!r}")
        raw[key] = value
        where[key] = "--set"
    values = {}
    for key, value in raw.items():
        try:
            values[key] = _convert(key, value)
        except ValueError as exc:
            label = f"line {where[key]}" if where[key] != "--set" else "--set"
            raise ConfigError(f"{source}:{label}: bad value for {key!r}: {exc}") from None
    missing = [k for k in REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"{source}: missing required key(s): {', '.join(missing)}")
    if "seed" not in values:
        env = os.environ.get(SEED_ENV)
        if env is not None:
            try:
                values["seed"] = int(env)
            except ValueError:
                raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    try:
        return ExperimentConfig(**values)
    except ParameterError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_config(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), overrides, source=str(path))


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(config: ExperimentConfig) -> str:
    return "".join(f"{key} = {_format_value(value)}\n" for key, value in asdict(config).items())


def _seed_banner(config_text: str, overrides: Sequence[str]) -> None:
    explicit = any(_split_line(line) and _split_line(line)[0] == "seed" for line in config_text.splitlines())
    explicit = explicit or any(o.split("=", 1)[0].strip() == "seed" for o in overrides)
    if not explicit and SEED_ENV not in os.environ:
        print("=" * 60, file=sys.stderr)
        print(f"NOTE: no seed given; using the default seed 0 (set seed, --set seed=N or {SEED_ENV})", file=sys.stderr)
        print("=" * 60, file=sys.stderr)


def _echo_config(config: ExperimentConfig) -> None:
    if config.output is None:
        return
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / EFFECTIVE_CONFIG).write_text(format_config(config))


# -- bounds --------------------------------------------------------------------


def bounds_table(config: ExperimentConfig) -> list[tuple[str, object]]:
    target = config.build_target()
    params = config.algo_params()
    c = derive_constants(target, params, dim=config.dim, r_star=config.r_star)
    b = bias_bound(target, params, c, config.dim, horizon=config.horizon)
    rep = c.admissibility
    return [
        ("target", target.name), ("m", c.m), ("L", c.L), ("R", c.R), ("dim", c.dim),
        ("K", params.K), ("h", params.h), ("eta", params.eta), ("u", params.u), ("T", params.T),
        ("gamma", c.gamma), ("gamma_inv", c.gamma_inv), ("alpha", c.alpha), ("alpha_hat", c.alpha_hat),
        ("r_star", c.r_star), ("T_hat", c.T_hat), ("R_hat", c.R_hat), ("g", c.g), ("gR_hat", c.gR_hat),
        ("eps_star", c.eps_star), ("log_eps_star", c.log_eps_star), ("c0", c.c0), ("log_c0", c.log_c0),
        ("c", c.c), ("log_c", c.log_c), ("M1", c.M1), ("log_M1", c.log_M1), ("log_M2", c.log_M2),
        ("C_conc", c.C_conc), ("log_C_conc", c.log_C_conc), ("R_prime", c.R_prime), ("d_star", c.d_star),
        ("bias_verlet_h", b.verlet_h), ("log_bias_verlet_h", b.log_verlet_h),
        ("bias_midpoint", b.midpoint), ("log_bias_midpoint", b.log_midpoint),
        ("bias_verlet_h2", "absent" if b.verlet_h2 is None else b.verlet_h2),
        ("sg_term", "absent" if b.sg_term is None else b.sg_term),
        ("friction_condition", "pass" if rep.friction_ok else "FAIL"), ("friction_slack", rep.friction_slack),
        ("step_condition", "pass" if rep.step_ok else "FAIL"), ("step_slack", rep.step_slack),
        ("admissible", c.admissible),
    ]


def _show(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.10g}"
    return str(value)


def cmd_bounds(config: ExperimentConfig, args) -> int:
    table = bounds_table(config)
    width = max(len(k) for k, _ in table)
    for key, value in table:
        print(f"{key.ljust(width)} = {_show(value)}")
    if args.csv:
        write_table(Path(args.csv), ("key", "value"), [(k, v) for k, v in table])
    return 0


# -- verify --------------------------------------------------------------------


def _teos_check(rng, samples: int) -> tuple[bool, str]:
    worst = 0.0
    for T in (0.01, 0.1):
        for eta in (0.0, 0.5, 0.9):
            c = derive_constants(make_gaussian_target(2, 1.0), AlgoParams(K=1, h=T, eta=eta))
            for a in (0.0, 0.5, 1.0, 2.0, 5.0):
                q_hat = np.zeros((samples, 2))
                q_hat[:, 0] = a
                g = rng.standard_normal((samples, 2))
                partner = reflection_partner(g, q_hat, rng.uniform(size=samples))
                k2 = k_value(q_hat, g - partner, c) ** 2
                exact = oracle.k_second_moment_exact(a, T, eta)
                sem = k2.std(ddof=1) / math.sqrt(samples)
                z = abs(k2.mean() - exact) / sem if sem > 0 else (0.0 if abs(k2.mean() - exact) < 1e-12 else math.inf)
                worst = max(worst, z)
    return worst <= 3.0, f"max |MC - exact| / sem = {worst:.2f}"


def _reflection_check(rng, samples: int) -> tuple[bool, str]:
    ok = True
    pvals = []
    for a in (0.5, 2.0):
        q_hat = np.zeros((samples, 3))
        q_hat[:, 0] = a
        partner = reflection_partner(rng.standard_normal((samples, 3)), q_hat, rng.uniform(size=samples))
        p = stats.kstest(partner[:, 0], "norm").pvalue
        pvals.append(p)
        ok &= p > 1e-3
    g = rng.standard_normal((100, 3))
    ok &= bool(np.array_equal(reflection_partner(g, np.zeros_like(g), rng.uniform(size=100)), g))
    return bool(ok), "KS p-values " + ", ".join(f"{p:.3g}" for p in pvals)


def _sweep_check(draws: int) -> tuple[bool, str]:
    total = 0
    for field in (make_gaussian_target(2, 1.0), make_double_well_target(1, 1.0, 1.0), make_double_well_target(2, 1.0, 1.0)):
        for variant in oracle.PropositionVariant:
            total += oracle.sweep_variant(variant, field, draws, seed=11).violations
    return total == 0, f"{total} violations"


def _apriori_check(rng, draws: int) -> tuple[bool, str]:
    field = make_double_well_target(1, 1.0, 1.0)
    bad = 0
    for u in (0, 1):
        params = AlgoParams(K=5, h=0.0012, eta=0.5, u=u)
        for _ in range(draws):
            first = ChainState(rng.normal(0, 3, 1), rng.normal(0, 3, 1))
            second = ChainState(rng.normal(0, 3, 1), rng.normal(0, 3, 1))
            rand = LegRandomness([GradientIndex()] * 5, [GradientIndex()] * 5, rng.uniform(size=5))
            res = oracle.apriori_check(field, params, first, second, rand)
            bad += not (res.holds_q and res.holds_p)
    return bad == 0, f"{bad} violations"


def _moment_check() -> tuple[bool, str]:
    field = make_gaussian_target(2, 1.0)
    ok = oracle.target_moment_oracle(field, 2) >= 2 and oracle.target_moment_oracle(field, 4) >= 8
    well = make_double_well_target(1, 1.0, 1.0)
    ok &= oracle.target_moment_oracle(well, 2) >= oracle.double_well_second_moment(well)
    return bool(ok), "moment bounds dominate exact moments"


def verification_suite(quick: bool = False, seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    samples = 20_000 if quick else 1_000_000
    return [
        ("k-second-moment", *_teos_check(rng, samples)),
        ("reflection-marginal", *_reflection_check(rng, 10_000 if quick else 100_000)),
        ("norm-inequalities", *_sweep_check(5_000 if quick else 100_000)),
        ("apriori-estimates", *_apriori_check(rng, 200 if quick else 5_000)),
        ("moment-bounds", *_moment_check()),
    ]


def cmd_verify(args) -> int:
    failures = 0
    for name, passed, detail in verification_suite(quick=args.quick, seed=args.seed):
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        failures += not passed
    return 2 if failures else 0


# -- experiments ---------------------------------------------------------------


def cmd_contract(config: ExperimentConfig, args) -> int:
    res = run_contraction(config)
    if not res.admissible:
        print("WARN parameters violate the admissibility conditions; results are flagged")
    print(f"steps={config.steps} ensemble={config.ensemble}")
    print(f"mean_d[0]={res.mean_d[0]:.6g} mean_d[end]={res.mean_d[-1]:.6g}")
    print(f"mean_rho[0]={res.mean_rho[0]:.6g} mean_rho[end]={res.mean_rho[-1]:.6g}")
    print(f"fitted_rate_d={res.rate_d:.6g} fitted_rate_rho={res.rate_rho:.6g} theoretical_rate={res.theoretical_rate:.6g}")
    print(f"final_frac_reflection={res.frac_reflection[-1]:.4g}")
    print(f"step_bound_violations={len(res.step_bound_violations())} envelope_crossings={len(res.envelope_crossings())}")
    return 0


def cmd_concentrate(config: ExperimentConfig, args) -> int:
    res = run_concentration(config)
    if not res.admissible:
        print("WARN parameters violate the admissibility conditions; results are flagged")
    print(f"lip_norm={res.lip_norm:.6g} centering={res.centering}")
    for row in res.rows:
        print(f"r={row.r:g} frequency={row.frequency:.4g} wilson_low={row.wilson_low:.4g} bound={row.bound:.6g} "
              f"{'ok' if row.within_envelope else 'EXCEEDED'}")
    return 0


def cmd_bias(config: ExperimentConfig, args) -> int:
    res = run_bias_scan(config)
    for row in res.rows:
        flag = "" if row.admissible else " WARN inadmissible"
        print(f"h={row.h:g} K={row.K} bias={row.bias:.6g} sem={row.bias_sem:.3g} bound={row.bound:.4g}{flag}")
    print(f"slope={res.slope:.4f}" + ("" if res.oracle_slope is None else f" oracle_slope={res.oracle_slope:.4f}"))
    return 0


def cmd_sgbias(config: ExperimentConfig, args) -> int:
    res = run_sg_bias(config)
    print(f"variance_bound={res.variance_bound:.6g} horizon={res.horizon}")
    for row in res.rows:
        print(f"p={row.p} extra_bias={row.extra_bias:.6g} sem={row.extra_sem:.3g} "
              f"coupled_w2={row.coupled_w2[-1]:.4g} bound={row.bound[-1]:.4g} long_run_bound={row.long_run_bound:.4g}")
    return 0


_RUNNERS = {"bounds": cmd_bounds, "contract": cmd_contract, "concentrate": cmd_concentrate, "bias": cmd_bias, "sgbias": cmd_sgbias}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgghmc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _RUNNERS:
        p = sub.add_parser(name)
        p.add_argument("config", help="line-based key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        if name == "bounds":
            p.add_argument("--csv", help="also write the table as key,value CSV")
    v = sub.add_parser("verify")
    v.add_argument("--quick", action="store_true", help="smaller sample sizes")
    v.add_argument("--seed", type=int, default=0)
    return parser


def _setup_logging() -> None:
    logging.addLevelName(logging.WARNING, "WARN")
    handler = logging.StreamHandler(sys.stdout)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root = logging.getLogger("sgghmc")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)
    root.propagate = False


def dispatch(args) -> int:
    if args.command == "verify":
        return cmd_verify(args)
    try:
        config = parse_config(args.config, args.overrides)
        _seed_banner(Path(args.config).read_text(), args.overrides)
        _echo_config(config)
        return _RUNNERS[args.command](config, args)
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv: Optional[Iterable[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(None if argv is None else list(argv))
    return dispatch(args)


if __name__ == "__main__":
    sys.exit(main())
