import os
import subprocess
import sys

import pytest

from sgghmc.cli import ConfigError, format_config, main, parse_config, parse_config_text

MINIMAL = """
# smallest useful run
target = gaussian
K = 1
h = 0.01
eta = 0.5
seed = 1
ensemble = 100
steps = 1000
"""

EXAMPLE = "target = gaussian\nK = 1\nh = 0.01\neta = 0.5\n"


def run_cli(*args, env=None):
    return subprocess.run([sys.executable, "-m", "sgghmc", *args], capture_output=True, text=True, env=env)


def test_minimal_config_parses():
    cfg = parse_config_text(MINIMAL)
    assert (cfg.target, cfg.K, cfg.h, cfg.eta, cfg.seed, cfg.ensemble, cfg.steps) == ("gaussian", 1, 0.01, 0.5, 1, 100, 1000)


def test_eta_one_rejected_with_range():
    with pytest.raises(ConfigError, match=r"\[0,1\)"):
        parse_config_text(MINIMAL.replace("eta = 0.5", "eta = 1.0"))


def test_duplicate_key_names_line():
    with pytest.raises(ConfigError, match=r"<config>:10: duplicate key 'K'"):
        parse_config_text(MINIMAL + "K = 2\n")


def test_unknown_key_and_bad_value():
    with pytest.raises(ConfigError, match="unknown key 'colour'"):
        parse_config_text(MINIMAL + "colour = red\n")
    with pytest.raises(ConfigError, match="bad value for 'K'"):
        parse_config_text(MINIMAL.replace("K = 1", "K = one"))
    with pytest.raises(ConfigError, match="missing required"):
        parse_config_text("target = gaussian\n")
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        parse_config_text(MINIMAL + "just words\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config(tmp_path / "nope.cfg")


def test_overrides_beat_file():
    cfg = parse_config_text(MINIMAL, ["steps=7", "init_x = 0.5,1.5", "dim=2"])
    assert cfg.steps == 7 and cfg.init_x == (0.5, 1.5)


def test_seed_precedence(monkeypatch):
    monkeypatch.setenv("SGGHMC_SEED", "42")
    assert parse_config_text(EXAMPLE).seed == 42
    assert parse_config_text(MINIMAL).seed == 1
    assert parse_config_text(MINIMAL, ["seed=9"]).seed == 9
    monkeypatch.delenv("SGGHMC_SEED")
    assert parse_config_text(EXAMPLE).seed == 0


def test_format_round_trip():
    cfg = parse_config_text(MINIMAL, ["cap_radius=2.5", "r_grid=0,0.3", "hold_T_fixed=false", "output=out"])
    assert parse_config_text(format_config(cfg)) == cfg


def test_effective_config_echo_round_trips(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(EXAMPLE + "ensemble = 8\nsteps = 5\n")
    out = tmp_path / "out"
    assert main(["contract", str(path), "--set", f"output={out}", "--set", "h=0.02"]) == 0
    echoed = parse_config(out / "effective_config.txt")
    assert echoed == parse_config(path, [f"output={out}", "h=0.02"])
    assert (out / "aggregate.csv").exists()


def test_bounds_prints_gamma(tmp_path, capsys):
    path = tmp_path / "b.cfg"
    path.write_text(EXAMPLE)
    assert main(["bounds", str(path), "--csv", str(tmp_path / "b.csv")]) == 0
    out = capsys.readouterr().out
    line = next(l for l in out.splitlines() if l.startswith("gamma "))
    assert line.split("=")[1].strip() == "100"
    assert "key,value" in (tmp_path / "b.csv").read_text()


def test_binary_exit_codes(tmp_path):
    good = tmp_path / "good.cfg"
    good.write_text(EXAMPLE)
    assert run_cli("bounds", str(good)).returncode == 0
    bad = tmp_path / "bad.cfg"
    bad.write_text(EXAMPLE.replace("eta = 0.5", "eta = 1.0"))
    res = run_cli("bounds", str(bad))
    assert res.returncode == 1 and "[0,1)" in res.stderr
    assert run_cli("bounds", str(tmp_path / "missing.cfg")).returncode == 1


def test_default_seed_banner(tmp_path, monkeypatch):
    path = tmp_path / "g.cfg"
    path.write_text(EXAMPLE)
    env = {k: v for k, v in os.environ.items() if k != "SGGHMC_SEED"}
    assert "default seed 0" in run_cli("bounds", str(path), env=env).stderr
    assert "default seed 0" not in run_cli("bounds", str(path), "--set", "seed=3", env=env).stderr


def test_contract_inadmissible_warns(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("target = gaussian\nK = 5\nh = 0.3\neta = 0.1\nensemble = 10\nsteps = 5\nseed = 0\n")
    res = run_cli("contract", str(path))
    assert res.returncode == 0
    assert any(line.startswith("WARN") for line in res.stdout.splitlines())


def test_verify_quick_exits_zero():
    res = run_cli("verify", "--quick")
    assert res.returncode == 0, res.stdout
    assert res.stdout.count("PASS") == 5


def test_other_subcommands_run(tmp_path):
    base = "target = gaussian\nK = 2\nh = 0.02\neta = 0.5\nseed = 0\nensemble = 20\nsteps = 20\n"
    conc = tmp_path / "conc.cfg"
    conc.write_text(base + "repetitions = 20\nn_avg = 10\n")
    assert main(["concentrate", str(conc)]) == 0
    bias = tmp_path / "bias.cfg"
    bias.write_text(base + "h_grid = 0.02,0.04\n")
    assert main(["bias", str(bias)]) == 0
    sg = tmp_path / "sg.cfg"
    sg.write_text(base.replace("gaussian", "minibatch_gaussian_mixture") + "p_grid = 1,10\nhorizon = 3\n")
    assert main(["sgbias", str(sg)]) == 0
    assert main(["sgbias", str(conc)]) == 1
