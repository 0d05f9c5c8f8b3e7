import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kpzlab import harness as hz
from kpzlab.cli import main
from kpzlab.errors import ConfigError, UsageError

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def test_loglog_slope_exact_power_law():
    x = np.array([4, 8, 16, 32, 64.0])
    fit = hz.loglog_slope(x, 3 * x ** -1.5)
    assert fit.slope == pytest.approx(-1.5, abs=1e-12)
    assert fit.stderr == 0.0 and fit.ci95[0] == fit.ci95[1]
    assert fit.within(-1.6, -1.4) and not fit.within(-1.4, -1.0)


def test_loglog_slope_noisy_interval():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    y = x ** -2 * np.array([1.05, 0.97, 1.02, 0.99])
    fit = hz.loglog_slope(x, y, yerr=0.03 * y)
    assert fit.ci95[0] < -2 < fit.ci95[1]
    assert fit.ci95[1] - fit.ci95[0] > 0


def test_loglog_slope_edge_cases():
    fit = hz.loglog_slope([1, 2], [1, 2])
    assert fit.status == "insufficient" and not fit.within(-10, 10)
    with pytest.raises(UsageError):
        hz.loglog_slope([1, 2, 3], [1, -1, 2])


def test_summarize_checks():
    rows = [{"n": n, "err": 2.0 * n ** -1.0, "gap": 1e-12} for n in (8, 16, 32)]
    out = hz.summarize({"t": rows}, [
        {"kind": "slope", "table": "t", "x": "n", "y": "err", "lo": -1.1, "hi": -0.9, "name": "s"},
        {"kind": "max_abs", "table": "t", "column": "gap", "tol": 1e-10},
        {"kind": "decreasing", "table": "t", "x": "n", "y": "err"},
    ])
    assert out["schema"] == hz.SCHEMA_VERSION
    assert [c["verdict"] for c in out["checks"]] == ["pass", "pass", "pass"]
    assert out["columns"]["t"]["n"]["mean"] == pytest.approx(56 / 3)
    short = hz.summarize({"t": rows[:2]}, [{"kind": "slope", "table": "t", "x": "n", "y": "err", "lo": -2, "hi": 0}])
    assert short["checks"][0]["verdict"] == "insufficient"
    with pytest.raises(UsageError):
        hz.summarize({"t": rows}, [{"kind": "median", "table": "t"}])


def test_mean_se():
    m, se = hz.mean_se([1.0, 2.0, 3.0])
    assert m == 2.0 and se == pytest.approx(1 / math.sqrt(3))


def test_verdict_line():
    v = hz.Verdict("x.y", False, 0.123456789, 0.1, "note")
    assert v.line() == "[FAIL] x.y: value=0.123457 tol=0.1 note"


json_scalar = st.one_of(st.integers(-1000, 1000), st.floats(-1e6, 1e6, allow_nan=False), st.text(max_size=8))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(hz.EXPERIMENTS), st.lists(st.integers(1, 512), min_size=1, max_size=4, unique=True),
       st.floats(1e-3, 10), st.integers(0, 2 ** 63), st.dictionaries(st.from_regex(r"[a-z_]{1,10}", fullmatch=True),
                                                                  json_scalar, max_size=4))
def test_ini_round_trip(exp, ns, T, seed, options):
    cfg = hz.ExperimentConfig(exp, n=sorted(ns), T=T, seed=seed, options=options)
    back = hz.ExperimentConfig.from_ini(cfg.to_ini())
    assert back == cfg


@pytest.mark.parametrize("kw", [
    {"experiment": "nope"}, {"experiment": "bg", "T": -1.0}, {"experiment": "bg", "n": [32, 16]},
    {"experiment": "bg", "replicas": 0}, {"experiment": "bg", "seed": -3}, {"experiment": "bg", "potentials": []},
])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        hz.ExperimentConfig(**kw)


@pytest.mark.parametrize("text", ["[experiment]\nexperiment = bg\n", "[other]\nx = 1\n",
                                  "[experiment]\nexperiment = \"bg\"\nbogus = 1\n", "not an ini"])
def test_config_parse_errors(text):
    with pytest.raises(ConfigError):
        hz.ExperimentConfig.from_ini(text)


@pytest.mark.parametrize("name", sorted(os.listdir(CONFIGS)))
def test_shipped_configs_load(name):
    cfg = hz.ExperimentConfig.load(os.path.join(CONFIGS, name))
    assert cfg.experiment in hz.EXPERIMENTS
    cfg.potential_objects()
    cfg.eta_objects()


def test_overrides_keep_other_fields():
    cfg = hz.ExperimentConfig("bg", seed=5, replicas=9)
    new = cfg.with_overrides(seed=7, replicas=None, n=[8])
    assert (new.seed, new.replicas, new.n) == (7, 9, [8])


def test_resolve_threads(monkeypatch):
    monkeypatch.delenv(hz.THREADS_ENV, raising=False)
    assert hz.resolve_threads() == 1 and hz.resolve_threads(3) == 3
    monkeypatch.setenv(hz.THREADS_ENV, "2")
    assert hz.resolve_threads(5) == 2
    monkeypatch.setenv(hz.THREADS_ENV, "x")
    with pytest.raises(ConfigError):
        hz.resolve_threads()
    monkeypatch.setenv(hz.THREADS_ENV, "0")
    with pytest.raises(ConfigError):
        hz.resolve_threads()


def test_fan_out_order():
    out = hz.fan_out(lambda off, cnt: list(range(off, off + cnt)), 10, 3)
    assert sum(out, []) == list(range(10))
    assert hz.fan_out(lambda off, cnt: (off, cnt), 2, 8) == [(0, 1), (1, 1)]


def _small_bg(tmp_path, name):
    return hz.ExperimentConfig("bg", potentials=[{"family": "perturbed"}], n=[8, 16], T=0.02, replicas=6,
                               seed=4, out=str(tmp_path / name),
                               options={"records": 16, "quadratic_replicas": 2})


def test_threads_do_not_change_results(tmp_path, monkeypatch):
    monkeypatch.delenv(hz.THREADS_ENV, raising=False)
    a = hz.run(_small_bg(tmp_path, "a"), threads=1)
    b = hz.run(_small_bg(tmp_path, "b"), threads=2)
    assert a.tables.keys() == b.tables.keys()
    for name in a.tables:
        assert a.csv_text(name) == b.csv_text(name)
    files = sorted(os.listdir(tmp_path / "a"))
    assert {"config.ini", "summary.json", "metrics.json"} <= set(files)
    for f in files:
        if f not in ("metrics.json", "config.ini"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    cfg_a = hz.ExperimentConfig.load(tmp_path / "a" / "config.ini")
    assert cfg_a.with_overrides(out="b") == hz.ExperimentConfig.load(tmp_path / "b" / "config.ini").with_overrides(out="b")
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["experiment"] == "bg" and "verdicts" in summary
    assert not any(f.startswith(".tmp-") for f in files)


def test_csv_floats_round_trip(tmp_path):
    art = hz.RunArtifact(hz.ExperimentConfig("thermo"), {"t": [{"a": 0.1 + 0.2, "b": 3}]}, {}, [], {})
    text = art.csv_text("t")
    assert text.splitlines() == ["a,b", f"{0.1 + 0.2!r},3"]
    assert float(text.splitlines()[1].split(",")[0]) == 0.1 + 0.2


def _write_cfg(tmp_path, text):
    p = tmp_path / "cfg.ini"
    p.write_text(text)
    return str(p)


THERMO = """[experiment]
experiment = "thermo"
potentials = [{"family": "perturbed"}]
out = "%s"

[options]
lambdas = [0.0, 1.0]
tol_identity = %s
"""


def test_cli_exit_codes(tmp_path, capsys):
    ok = _write_cfg(tmp_path, THERMO % (tmp_path / "o1", "1e-8"))
    assert main(["thermo", "--config", ok]) == 0
    assert "[PASS] thermo.mean_dV" in capsys.readouterr().out
    bad = _write_cfg(tmp_path, THERMO % (tmp_path / "o2", "0.0"))
    assert main(["thermo", "--config", bad, "--out", str(tmp_path / "o3")]) == 2
    assert os.path.exists(tmp_path / "o3" / "summary.json")
    assert main(["bg", "--config", ok]) == 1
    assert main(["thermo", "--config", str(tmp_path / "missing.ini")]) == 1
    assert main(["thermo"]) == 1
    assert main(["thermo", "--config", ok, "--n", "a,b"]) == 1


def test_rejects_unknown_potential(tmp_path):
    cfg = hz.ExperimentConfig("thermo", potentials=[{"family": "quartic"}], out=str(tmp_path / "x"))
    with pytest.raises(UsageError):
        hz.run(cfg, write=False)
