"""Experiment configuration, dispatch, replica fan-out, persistence and summaries.

A run turns an :class:`ExperimentConfig` into a :class:`RunArtifact`: CSV
tables, a JSON summary with verdicts, and wall-clock metrics kept in a
separate file so that tables and summary are byte-reproducible.
"""
from __future__ import annotations

import configparser
import csv
import io
import json
import math
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import stats

from . import dynamics, ensembles, fluctuation, sbe, thermo
from .errors import ConfigError, NumericalError, UsageError
from .potentials import Potential, validate_assumption_v
from .seeding import SeedStream, replica_generators, seed_stream

__all__ = ["ExperimentConfig", "RunArtifact", "Verdict", "SlopeFit", "run", "summarize",
           "loglog_slope", "mean_se", "seed_stream", "write_artifact", "EXPERIMENTS",
           "THREADS_ENV", "resolve_threads"]

EXPERIMENTS = ("thermo", "ensembles", "dynamics", "scaling", "bg", "sbe", "compare")
SCHEMA_VERSION = 1
THREADS_ENV = "KPZLAB_THREADS"


# -- configuration ---------------------------------------------------------------


@dataclass
class ExperimentConfig:
    experiment: str
    potentials: list = field(default_factory=lambda: [{"family": "perturbed"}])
    lam0: float = 0.0
    n: list = field(default_factory=lambda: [16, 32, 64])
    T: float = 0.2
    dt: float = 0.05
    replicas: int = 100
    etas: list = field(default_factory=lambda: [{"family": "gaussian", "center": 0.0, "width": 0.25}])
    delta: float = 0.5
    ell: int = 1
    seed: int = 0
    out: str = "out"
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if not self.potentials:
            raise ConfigError("at least one potential is required")
        for name in ("T", "dt", "delta"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v)):
                raise ConfigError(f"{name} must be a positive number, got {v!r}")
        for name in ("replicas", "ell"):
            v = getattr(self, name)
            if not (isinstance(v, int) and v >= 1):
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not self.n or any(not isinstance(k, int) or k < 1 for k in self.n):
            raise ConfigError("n must be a non-empty list of positive integers")
        if list(self.n) != sorted(set(self.n)):
            raise ConfigError("n list must be strictly ascending")
        if not isinstance(self.seed, int) or self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if not isinstance(self.options, dict):
            raise ConfigError("options must be a mapping")

    # serialization: INI sections whose values are JSON literals
    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["experiment"] = {f.name: json.dumps(getattr(self, f.name), sort_keys=True)
                            for f in fields(self) if f.name != "options"}
        cp["options"] = {k: json.dumps(v, sort_keys=True) for k, v in sorted(self.options.items())}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        if "experiment" not in cp:
            raise ConfigError("config needs an [experiment] section")
        known = {f.name for f in fields(cls)} - {"options"}
        kw = {}
        for key, raw in cp["experiment"].items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [experiment]")
            kw[key] = _json_value(key, raw)
        if "options" in cp:
            kw["options"] = {k: _json_value(k, v) for k, v in cp["options"].items()}
        if "experiment" not in kw:
            raise ConfigError("missing 'experiment' key")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_ini(fh.read())

    def with_overrides(self, **kw) -> "ExperimentConfig":
        d = asdict(self)
        d.update({k: v for k, v in kw.items() if v is not None})
        return ExperimentConfig(**d)

    def opt(self, key, default):
        return self.options.get(key, default)

    def potential_objects(self) -> list:
        return [Potential.from_spec(p) for p in self.potentials]

    def eta_objects(self) -> tuple:
        return tuple(fluctuation.TestFunction.from_spec(e) for e in self.etas)


def _json_value(key, raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        raise ConfigError(f"value for {key!r} is not valid JSON: {raw!r}") from None


# -- statistics -------------------------------------------------------------------


@dataclass
class Verdict:
    name: str
    passed: bool
    value: object
    tolerance: object
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: value={_fmt(self.value)} tol={_fmt(self.tolerance)} {self.detail}".rstrip()


def _fmt(x):
    if isinstance(x, float):
        return f"{x:.6g}"
    if isinstance(x, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in x) + "]"
    return str(x)


@dataclass
class SlopeFit:
    slope: float
    stderr: float
    ci95: tuple
    points: int
    status: str = "ok"       # or "insufficient"

    def within(self, lo: float, hi: float) -> bool:
        return self.status == "ok" and lo <= self.slope <= hi


def mean_se(values, axis=0):
    """Replica-level mean and standard error."""
    v = np.asarray(values, dtype=float)
    R = v.shape[axis]
    se = v.std(axis=axis, ddof=1) / math.sqrt(R) if R > 1 else np.full_like(v.mean(axis=axis), np.nan)
    return v.mean(axis=axis), se


def loglog_slope(x, y, yerr=None) -> SlopeFit:
    """Weighted least squares of log y on log x, weights (y / yerr)^2.

    The 95% interval uses Student t with points - 2 degrees of freedom and the
    residual-scaled covariance, so an exact power law has zero width.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 3:
        return SlopeFit(math.nan, math.nan, (math.nan, math.nan), len(x), "insufficient")
    if np.any(x <= 0) or np.any(y <= 0):
        raise UsageError("log-log fit needs positive data")
    lx, ly = np.log(x), np.log(y)
    if yerr is None:
        w = np.ones_like(lx)
    else:
        rel = np.asarray(yerr, dtype=float) / y
        w = np.where(rel > 0, 1.0 / np.maximum(rel, 1e-300) ** 2, 1.0)
    W = w.sum()
    mx, my = (w * lx).sum() / W, (w * ly).sum() / W
    sxx = (w * (lx - mx) ** 2).sum()
    slope = float((w * (lx - mx) * (ly - my)).sum() / sxx)
    resid = ly - my - slope * (lx - mx)
    dof = len(x) - 2
    s2 = float((w * resid ** 2).sum() / dof)
    se = math.sqrt(max(s2, 0.0) / sxx)
    if se < 1e-13 * max(1.0, abs(slope)):
        se = 0.0
    q = float(stats.t.ppf(0.975, dof))
    return SlopeFit(slope, se, (slope - q * se, slope + q * se), len(x))


def summarize(tables: dict, checks=()) -> dict:
    """Means and replica standard errors of every numeric column, plus configured checks.

    A check is a mapping with ``kind``:
      - ``slope``: fields table, x, y, optional yerr, lo, hi (log-log WLS slope in [lo, hi]);
      - ``max_abs``: fields table, column, tol (max |column| <= tol);
      - ``decreasing``: fields table, x, y (y strictly decreasing in x).
    """
    out = {"schema": SCHEMA_VERSION, "columns": {}, "checks": []}
    for name, rows in tables.items():
        cols = {}
        for key in (rows[0].keys() if rows else []):
            vals = [r[key] for r in rows]
            if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
                m, se = mean_se(vals) if len(vals) > 1 else (float(vals[0]), math.nan)
                cols[key] = {"mean": float(m), "stderr": _nan_none(float(se))}
        out["columns"][name] = cols
    for chk in checks:
        rows = tables[chk["table"]]
        kind = chk["kind"]
        if kind == "slope":
            fit = loglog_slope([r[chk["x"]] for r in rows], [r[chk["y"]] for r in rows],
                               [r[chk["yerr"]] for r in rows] if chk.get("yerr") else None)
            verdict = "insufficient" if fit.status != "ok" else ("pass" if fit.within(chk["lo"], chk["hi"]) else "fail")
            out["checks"].append({"name": chk.get("name", kind), "kind": kind, "slope": _nan_none(fit.slope),
                                  "stderr": _nan_none(fit.stderr), "ci95": [_nan_none(c) for c in fit.ci95],
                                  "range": [chk["lo"], chk["hi"]], "verdict": verdict})
        elif kind == "max_abs":
            m = max(abs(float(r[chk["column"]])) for r in rows)
            out["checks"].append({"name": chk.get("name", kind), "kind": kind, "value": m, "tol": chk["tol"],
                                  "verdict": "pass" if m <= chk["tol"] else "fail"})
        elif kind == "decreasing":
            pts = sorted((r[chk["x"]], r[chk["y"]]) for r in rows)
            ok = all(a[1] > b[1] for a, b in zip(pts, pts[1:]))
            out["checks"].append({"name": chk.get("name", kind), "kind": kind, "values": [p[1] for p in pts],
                                  "verdict": "pass" if ok else "fail"})
        else:
            raise UsageError(f"unknown check kind {kind!r}")
    return out


def _nan_none(x):
    return None if isinstance(x, float) and not math.isfinite(x) else x


# -- artifacts --------------------------------------------------------------------


@dataclass
class RunArtifact:
    config: ExperimentConfig
    tables: dict
    summary: dict
    verdicts: list
    metrics: dict
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and all(v.passed for v in self.verdicts)

    def csv_text(self, name: str) -> str:
        rows = self.tables[name]
        buf = io.StringIO()
        if rows:
            w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
        return buf.getvalue()


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return _nan_none(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_artifact(art: RunArtifact, out_dir: str | None = None) -> str:
    """Write config snapshot, CSV tables, summary.json and metrics.json under out_dir."""
    out_dir = out_dir or art.config.out
    _atomic_write(os.path.join(out_dir, "config.ini"), art.config.to_ini())
    for name in art.tables:
        _atomic_write(os.path.join(out_dir, f"{name}.csv"), art.csv_text(name))
    summary = dict(art.summary)
    summary["verdicts"] = [asdict(v) for v in art.verdicts]
    summary["passed"] = art.passed
    summary["error"] = art.error
    _atomic_write(os.path.join(out_dir, "summary.json"),
                  json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    _atomic_write(os.path.join(out_dir, "metrics.json"),
                  json.dumps(_jsonable(art.metrics), indent=2, sort_keys=True) + "\n")
    return out_dir


# -- replica fan-out --------------------------------------------------------------


def resolve_threads(threads: int | None = None) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            threads = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from None
    threads = 1 if threads is None else int(threads)
    if threads < 1:
        raise ConfigError("thread count must be positive")
    return threads


def _slices(total: int, parts: int):
    parts = max(1, min(parts, total))
    base, extra = divmod(total, parts)
    out, start = [], 0
    for k in range(parts):
        size = base + (k < extra)
        out.append((start, size))
        start += size
    return out


def fan_out(work, total: int, threads: int):
    """Run ``work(offset, count)`` over replica slices; results in replica order."""
    sl = _slices(total, threads)
    if len(sl) == 1:
        return [work(*sl[0])]
    with ThreadPoolExecutor(max_workers=len(sl)) as pool:
        futures = [pool.submit(work, off, cnt) for off, cnt in sl]
        return [f.result() for f in futures]


def _scaling_trace(cfg: ExperimentConfig, pot: Potential, n: int, replicas: int, tag: str,
                   threads: int, check_identity: bool = True, T: float | None = None):
    sc = fluctuation.ScalingConfig(pot, cfg.lam0, n, cfg.T if T is None else T, cfg.dt,
                                   cfg.eta_objects(), delta=cfg.delta,
                                   records=int(cfg.opt("records", 256)), replicas=replicas,
                                   seed=cfg.seed, check_identity=check_identity)

    def work(off, cnt):
        gens = replica_generators(cfg.seed, f"{tag}-{_label(pot)}-n{n}", cnt, off)
        return fluctuation.run_scaling(sc, generators=gens, replica_offset=off)

    parts = fan_out(work, replicas, threads)
    return parts[0] if len(parts) == 1 else fluctuation.FluctuationTrace.merge(parts)


# -- experiments ------------------------------------------------------------------


def _label(pot: Potential) -> str:
    if pot.family == "quadratic":
        return "quadratic"
    return f"perturbed-{pot.shape}"


def _exp_thermo(cfg, threads):
    lams = cfg.opt("lambdas", [-1.0, 0.0, 0.5, 2.0])
    tol_id = cfg.opt("tol_identity", 1e-8)
    tol_rt = cfg.opt("tol_roundtrip", 1e-9)
    tol_fd = cfg.opt("tol_fd", 1e-5)
    rows, ident, verdicts = [], [], []
    for pot in cfg.potential_objects():
        lab = _label(pot)
        for r in thermo.thermo_table(pot, lams):
            rows.append({"potential": lab, **r})
        for lam in lams:
            pr = thermo.moments(pot, float(lam), 4)
            tm = thermo.tilted_measure(pot, float(lam))
            e_dv = tm.expect(pot.dV)
            var_dv = tm.expect(lambda u: (pot.dV(u) - e_dv) ** 2)
            e_d2v = tm.expect(pot.d2V)
            bc = thermo.burgers_coefficients(pot, float(lam))
            d1, d2 = thermo.chemical_potential_fd(pot, float(lam))
            ident.append({"potential": lab, "lambda": float(lam), "mean_dV_err": abs(e_dv - lam),
                          "var_identity_err": abs(var_dv - e_d2v),
                          "roundtrip_err": abs(thermo.tilt_for_mean(pot, pr.rho_prime) - lam),
                          "dphi_fd_err": abs(d1 - bc.dphi), "d2phi_fd_err": abs(d2 - bc.d2phi)})
    worst = lambda k: max(r[k] for r in ident)
    verdicts += [
        Verdict("thermo.mean_dV", worst("mean_dV_err") <= tol_id, worst("mean_dV_err"), tol_id),
        Verdict("thermo.var_identity", worst("var_identity_err") <= tol_id, worst("var_identity_err"), tol_id),
        Verdict("thermo.legendre_roundtrip", worst("roundtrip_err") <= tol_rt, worst("roundtrip_err"), tol_rt),
        Verdict("thermo.dphi_fd", worst("dphi_fd_err") <= tol_fd, worst("dphi_fd_err"), tol_fd),
    ]
    return {"thermo": rows, "identities": ident}, verdicts, []


def _exp_ensembles(cfg, threads):
    llt_N = cfg.opt("llt_N", [4, 8, 16, 32, 64])
    eq_N = cfg.opt("eq_N", [8, 16, 32, 64])
    llt_range = cfg.opt("llt_slope_range", [-1.9, -1.2])
    quad_gap_tol = cfg.opt("quadratic_gap_tol", 1e-5)
    quad_res_tol = cfg.opt("quadratic_residual_tol", 1e-7)
    eq_slope_max = cfg.opt("eq_slope_max", -1.4)
    rows, verdicts, checks = [], [], []
    for pot in cfg.potential_objects():
        lab = _label(pot)
        F = ensembles.LocalObservable(pot.dV, cfg.ell, name="dV")
        rho0 = thermo.moments(pot, cfg.lam0, 2).rho_prime
        for N in sorted(set(llt_N) | set(eq_N)):
            row = {"potential": lab, "N": int(N),
                   "llt_gap": ensembles.llt_gap(pot, cfg.lam0, int(N)) if N in llt_N else math.nan,
                   "residual_pointwise": math.nan, "residual_L2": math.nan}
            if N in eq_N:
                r = ensembles.equivalence_residual(F, ensembles.CanonicalSpec(cfg.ell, rho0), int(N), cfg.lam0, pot)
                row["residual_pointwise"], row["residual_L2"] = r.pointwise, r.l2
            rows.append(row)
        mine = [r for r in rows if r["potential"] == lab]
        if pot.family == "quadratic":
            g = max(r["llt_gap"] for r in mine if _n_in(r, llt_N))
            e = max(abs(r["residual_pointwise"]) for r in mine if _n_in(r, eq_N))
            verdicts.append(Verdict(f"ensembles.{lab}.llt_gap", g <= quad_gap_tol, g, quad_gap_tol))
            verdicts.append(Verdict(f"ensembles.{lab}.residual_exact", e <= quad_res_tol, e, quad_res_tol))
        else:
            f1 = loglog_slope([r["N"] for r in mine if _n_in(r, llt_N)], [r["llt_gap"] for r in mine if _n_in(r, llt_N)])
            f2 = loglog_slope([r["N"] for r in mine if _n_in(r, eq_N)],
                              [abs(r["residual_pointwise"]) for r in mine if _n_in(r, eq_N)])
            verdicts.append(Verdict(f"ensembles.{lab}.llt_slope", f1.within(*llt_range), f1.slope, llt_range,
                                    f"ci95={_fmt(list(f1.ci95))}"))
            verdicts.append(Verdict(f"ensembles.{lab}.residual_slope", f2.status == "ok" and f2.slope <= eq_slope_max,
                                    f2.slope, eq_slope_max, f"ci95={_fmt(list(f2.ci95))}"))
    return {"ensembles": rows}, verdicts, checks


def _n_in(row, Ns):
    return row["N"] in Ns


def _exp_dynamics(cfg, threads):
    mode = cfg.opt("mode", "stationarity")
    rows, verdicts = [], []
    if mode == "conservation":
        tol = cfg.opt("drift_tol", 1e-10)
        zmax = cfg.opt("z_max", 3.0)
        for pot in cfg.potential_objects():
            rep = dynamics.conservation_report(pot, cfg.lam0, int(cfg.opt("n_sites", 1024)),
                                               int(cfg.opt("steps", 10 ** 6)), cfg.dt,
                                               float(cfg.opt("alpha", 0.0)), cfg.seed)
            lab = _label(pot)
            rows.append({"potential": lab, **rep})
            verdicts += [
                Verdict(f"dynamics.{lab}.sum_drift", rep["relative_drift"] <= tol, rep["relative_drift"], tol),
                Verdict(f"dynamics.{lab}.noise_var", abs(rep["noise_var_z"]) <= zmax, rep["noise_var_z"], zmax, "z"),
                Verdict(f"dynamics.{lab}.noise_nn_cov", abs(rep["noise_nn_cov_z"]) <= zmax, rep["noise_nn_cov_z"], zmax, "z"),
            ]
        return {"conservation": rows}, verdicts, []
    if mode == "stationarity":
        zmax = cfg.opt("z_max", 3.0)
        for pot in cfg.potential_objects():
            for alpha in cfg.opt("alphas", [0.0, 0.2]):
                dc = dynamics.DynamicsConfig(pot, cfg.lam0, float(alpha), int(cfg.opt("n_sites", 256)), cfg.T,
                                             cfg.dt, cfg.replicas, cfg.seed)
                rep = dynamics.stationarity_report(dc)
                lab = _label(pot)
                for name, m, se, z, ze in zip(rep["names"], rep["diff_mean"], rep["diff_se"], rep["z_paired"],
                                              rep["z_exact"]):
                    rows.append({"potential": lab, "alpha": float(alpha), "statistic": name, "diff_mean": m,
                                 "diff_se": se, "z_paired": z, "z_exact": ze})
                worst = max(abs(z) for z in rep["z_paired"])
                verdicts.append(Verdict(f"dynamics.{lab}.alpha={alpha}.stationary", worst <= zmax, worst, zmax,
                                        "max |z| over m1-m4, nn_cov"))
        return {"stationarity": rows}, verdicts, []
    if mode == "reversal":
        for pot in cfg.potential_objects():
            rc = dynamics.ReversalConfig(pot, cfg.lam0, float(cfg.opt("alpha", 0.3)), int(cfg.opt("n_sites", 64)),
                                         cfg.T, cfg.dt, cfg.replicas, cfg.seed)
            rep = dynamics.reversal_report(rc)
            lab = _label(pot)
            rows.append({"potential": lab, **{k: v for k, v in rep.items() if k != "passed"}})
            verdicts.append(Verdict(f"dynamics.{lab}.reversal", rep["passed"], rep["z"], 3.0, "z"))
        return {"reversal": rows}, verdicts, []
    raise ConfigError(f"unknown dynamics mode {mode!r}")


def _exp_scaling(cfg, threads):
    zmax = cfg.opt("z_max", 3.0)
    band = cfg.opt("variance_band", [0.95, 1.05])
    qv_tol = {int(k): v for k, v in cfg.opt("qv_tol", {"16": 0.15, "64": 0.05}).items()}
    p_min = cfg.opt("normality_alpha", 0.01)
    etas = cfg.eta_objects()
    pairs = [tuple(p) for p in cfg.opt("pairs", [[0, 1]] if len(etas) > 1 else [])]
    rows, prow, trows, verdicts = [], [], [], []
    for pot in cfg.potential_objects():
        lab = _label(pot)
        for n in cfg.n:
            tr = _scaling_trace(cfg, pot, n, cfg.replicas, "scaling", threads)
            frame = fluctuation.make_frame(n, etas, tr.meta["sigma2"], cfg.T, tr.meta["n_sites"])
            t_end = float(tr.times[-1])
            exact = [fluctuation.finite_n_variance(e, frame, t_end, tr.meta["sigma2"]) for e in etas]
            wn = fluctuation.white_noise_stats(tr.v[-1], etas, tr.meta["sigma2"], pairs, exact,
                                               min_replicas=int(cfg.opt("min_replicas", 1000)))
            for i, (e, st) in enumerate(zip(etas, wn.per_eta)):
                qv_real = float(tr.qv_real[-1, :, i].mean())
                qv_real_se = float(tr.qv_real[-1, :, i].std(ddof=1) / math.sqrt(tr.replicas))
                target = t_end * e.grad_l2_sq
                rows.append({"potential": lab, "n": n, "t": t_end, "eta_id": i, "mean": st.mean,
                             "mean_se": st.mean_se, "var_ratio": st.var_ratio, "var_ratio_se": st.var_ratio_se,
                             "var_ratio_exact": st.var_ratio_exact, "skewness": st.skewness,
                             "excess_kurtosis": st.excess_kurtosis, "normal_p": st.normal_p,
                             "qv_ratio": qv_real / target, "qv_ratio_se": qv_real_se / target,
                             "qv_pred_ratio": float(tr.qv_pred[-1, i]) / target,
                             "identity_err": float(tr.identity_error().max())})
            for ps in wn.pairs:
                prow.append({"potential": lab, "n": n, "i": ps.i, "j": ps.j, "cov": ps.cov, "target": ps.target,
                             "se": ps.se, "z": ps.z})
            trows += [{"potential": lab, **r} for r in fluctuation.trace_rows(tr)]
    n_top = cfg.n[-1]
    for r in rows:
        lab, n, i = r["potential"], r["n"], r["eta_id"]
        if n == n_top:
            lo, hi = band[0] - zmax * r["var_ratio_se"], band[1] + zmax * r["var_ratio_se"]
            verdicts.append(Verdict(f"scaling.{lab}.n={n}.eta{i}.variance_ratio", lo <= r["var_ratio"] <= hi,
                                    r["var_ratio"], [lo, hi], f"se={r['var_ratio_se']:.3g}"))
        if lab == "quadratic":
            verdicts.append(Verdict(f"scaling.{lab}.n={n}.eta{i}.normality", r["normal_p"] > p_min, r["normal_p"],
                                    p_min, "p-value"))
        if n in qv_tol:
            err = abs(r["qv_ratio"] - 1.0)
            verdicts.append(Verdict(f"scaling.{lab}.n={n}.eta{i}.martingale_qv", err <= qv_tol[n], r["qv_ratio"],
                                    qv_tol[n], "relative tolerance"))
    for p in prow:
        verdicts.append(Verdict(f"scaling.{p['potential']}.n={p['n']}.pair{p['i']}{p['j']}.covariance",
                                abs(p["z"]) <= zmax, p["z"], zmax, "z"))
    return {"white_noise": rows, "pairs": prow, "trace": trows}, verdicts, []


def _exp_bg(cfg, threads):
    rv_range = cfg.opt("rv_slope_range", [0.3, 0.7])
    id_tol = cfg.opt("identity_tol", 1e-9)
    growth_cap = cfg.opt("ratio_growth_cap", 4.0)
    rv_mult = cfg.opt("rv_multiples", [1, 2, 4, 8, 16])
    rows, rvrows, erows, trows, verdicts = [], [], [], [], []
    for pot in cfg.potential_objects():
        lab = _label(pot)
        exact_case = pot.family == "quadratic"
        R = int(cfg.opt("quadratic_replicas", 16)) if exact_case else cfg.replicas
        for n in cfg.n:
            tr = _scaling_trace(cfg, pot, n, R, "bg", threads)
            b1 = fluctuation.bg1_from_trace(tr, pot)
            b2 = fluctuation.bg2_from_trace(tr, pot)
            er = fluctuation.energy_residual(tr)
            ms, mse = er.mean_square()
            mo, moe = er.mean_square(opposite=True)
            nl = fluctuation.nonlinearity_estimate(tr, tol=math.inf)
            step = tr.times[1] - tr.times[0]
            rvA = fluctuation.russo_vallois_qv(tr.A, tr.times, step * np.asarray(rv_mult, dtype=float))
            rvM = fluctuation.russo_vallois_qv(tr.M, tr.times, step * np.asarray(rv_mult, dtype=float))
            for i, e in enumerate(tr.etas):
                rows.append({"potential": lab, "n": n, "eta_id": i, "T": float(tr.times[-1]),
                             "bg1": float(b1.estimate[i]), "bg1_se": float(b1.stderr[i]),
                             "bg1_bound": float(b1.bound[i]), "bg1_ratio": float(b1.ratio[i]), "bg1_ell": b1.ell,
                             "bg2": float(b2.estimate[i]), "bg2_se": float(b2.stderr[i]),
                             "bg2_bound": float(b2.bound[i]), "bg2_ratio": float(b2.ratio[i]), "bg2_ell": b2.ell,
                             "bg1_maxabs": float(np.max(np.abs(tr.bg1))), "bg2_maxabs": float(np.max(np.abs(tr.bg2))),
                             "energy_ms": float(ms[-1, i]), "energy_ms_se": float(mse[-1, i]),
                             "energy_ms_opposite": float(mo[-1, i]), "energy_ms_opposite_se": float(moe[-1, i]),
                             "identity_err": float(tr.identity_error().max()),
                             "nl_identity_err": float(nl.identity_error.max())})
                A_vals = rvA.values[:, :, i].mean(axis=1)
                A_se = rvA.values[:, :, i].std(axis=1, ddof=1) / math.sqrt(tr.replicas)
                M_vals = rvM.values[:, :, i].mean(axis=1)
                for d, a, ase, m in zip(rvA.deltas, A_vals, A_se, M_vals):
                    rvrows.append({"potential": lab, "n": n, "eta_id": i, "delta_qv": float(d), "rv_A": float(a),
                                   "rv_A_se": float(ase), "rv_M_ratio": float(m / (rvM.horizon * e.grad_l2_sq))})
            trows += [{"potential": lab, **r} for r in fluctuation.trace_rows(tr)]
    for lab in sorted({r["potential"] for r in rows}):
        mine = [r for r in rows if r["potential"] == lab]
        for i in sorted({r["eta_id"] for r in mine}):
            sel = sorted((r for r in mine if r["eta_id"] == i), key=lambda r: r["n"])
            lo, hi = sel[0], sel[-1]
            worst_id = max(r["identity_err"] for r in sel)
            worst_nl = max(r["nl_identity_err"] for r in sel)
            verdicts.append(Verdict(f"bg.{lab}.eta{i}.sam_identity", worst_id <= id_tol, worst_id, id_tol))
            verdicts.append(Verdict(f"bg.{lab}.eta{i}.nonlinearity_identity", worst_nl <= id_tol, worst_nl, id_tol))
            if lab == "quadratic":
                z1 = max(r["bg1_maxabs"] for r in sel)
                z2 = max(r["bg2_maxabs"] for r in sel)
                verdicts.append(Verdict(f"bg.{lab}.eta{i}.bg1_exact_zero", z1 == 0.0, z1, 0.0))
                verdicts.append(Verdict(f"bg.{lab}.eta{i}.bg2_exact_zero", z2 == 0.0, z2, 0.0))
                continue
            for k in ("bg1", "bg2"):
                verdicts.append(Verdict(f"bg.{lab}.eta{i}.{k}_decreases", hi[k] < lo[k], [lo[k], hi[k]], "<",
                                        f"n={lo['n']} vs n={hi['n']}, se=({lo[k + '_se']:.2g}, {hi[k + '_se']:.2g})"))
                ratios = [r[k + "_ratio"] for r in sel]
                growth = max(ratios) / min(ratios) if min(ratios) > 0 else math.inf
                verdicts.append(Verdict(f"bg.{lab}.eta{i}.{k}_ratio_bounded", growth <= growth_cap, growth,
                                        growth_cap, f"ratios={_fmt(ratios)}"))
            en = [r["energy_ms"] for r in sel]
            dec = all(a > b for a, b in zip(en, en[1:]))
            verdicts.append(Verdict(f"bg.{lab}.eta{i}.energy_residual_decreasing", dec, en, "strictly decreasing",
                                    f"n={[r['n'] for r in sel]}"))
            top = [r for r in rvrows if r["potential"] == lab and r["eta_id"] == i and r["n"] == hi["n"]]
            fit = loglog_slope([r["delta_qv"] for r in top], [r["rv_A"] for r in top], [r["rv_A_se"] for r in top])
            verdicts.append(Verdict(f"bg.{lab}.eta{i}.rv_slope_A", fit.within(*rv_range), fit.slope, rv_range,
                                    f"n={hi['n']}, ci95={_fmt(list(fit.ci95))}"))
    return {"bg": rows, "russo_vallois": rvrows, "trace": trows}, verdicts, []


def _exp_sbe(cfg, threads):
    pot = cfg.potential_objects()[0]
    bc = thermo.burgers_coefficients(pot, cfg.lam0)
    linear = bool(cfg.opt("linear", True))
    params = sbe.SbeParams(nu=bc.nu, b=0.0 if linear else bc.b, L=float(cfg.opt("L", 8.0)),
                           K=int(cfg.opt("K", 128)), delta=float(cfg.opt("delta_sbe", 0.0625)),
                           dt=cfg.dt, sigma2=bc.sigma2)
    rng = SeedStream(cfg.seed, 0, "sbe-spectrum").generator()
    rep = sbe.stationary_spectrum_check(params, int(cfg.opt("burn_in", 0)), int(cfg.opt("samples", 200)), rng,
                                        replicas=cfg.replicas, every=int(cfg.opt("every", 20)))
    rows = rep.rows()
    zmax = cfg.opt("z_max", 3.0)
    verdicts = []
    if linear:
        verdicts.append(Verdict("sbe.linear_spectrum", rep.max_abs_z < zmax, rep.max_abs_z, zmax,
                                f"max |z| over {len(rep.k)} modes; chi2 p over all modes={rep.chi2_p:.3g}"))
    return {"spectrum": rows}, verdicts, []


def _exp_compare(cfg, threads):
    pot = cfg.potential_objects()[0]
    bc = thermo.burgers_coefficients(pot, cfg.lam0)
    n = cfg.n[-1]
    n_sites = int(cfg.opt("n_sites", 8 * n))
    L = n_sites / n
    width = float(cfg.opt("width", 0.25))
    spacing = float(cfg.opt("center_spacing", 0.25))
    centers = np.arange(int(round(L / spacing))) * spacing
    every = float(cfg.opt("every_macro", 0.005))
    x_lags = cfg.opt("x_lags", [0.0, 0.25, 0.5, 1.0])
    t_lags = cfg.opt("t_lags", [0.0, 0.01, 0.025, 0.05, 0.1])

    def work(off, cnt):
        gens = replica_generators(cfg.seed, f"compare-micro-n{n}", cnt, off)
        return sbe.micro_pairing_series(pot, cfg.lam0, n, n_sites, width, centers, cfg.T, every, gens, cfg.dt)

    parts = fan_out(work, cfg.replicas, threads)
    tm = parts[0][0]
    pm = np.concatenate([p[1] for p in parts], axis=1)
    params = sbe.SbeParams.from_coefficients(bc, L=L, K=int(cfg.opt("K", 128)),
                                             delta=float(cfg.opt("delta_sbe", 0.0625)),
                                             dt=float(cfg.opt("dt_sbe", 1e-3)))
    if params.dt > sbe.stability_dt(params):
        raise ConfigError(f"dt_sbe={params.dt} above the explicit stability estimate {sbe.stability_dt(params):.3g}")
    sbe_every = max(1, int(round(every / params.dt)))
    records = int(round(cfg.T / (sbe_every * params.dt)))
    rng = SeedStream(cfg.seed, 0, "compare-sbe").generator()
    ts, ps, _ = sbe.sbe_pairing_series(params, rng, int(cfg.opt("sbe_replicas", cfg.replicas)), width, centers,
                                       int(cfg.opt("burn_in", 200)), records, sbe_every)
    A = sbe.two_point_correlation(pm, tm, spacing, x_lags, t_lags)
    B = sbe.two_point_correlation(ps, ts, spacing, x_lags, t_lags)
    rep = sbe.compare_tables(A, B, threshold=float(cfg.opt("threshold", 0.8)))
    rows = []
    for i, t in enumerate(A.t):
        for j, x in enumerate(A.x):
            rows.append({"x": float(x), "t": float(t), "S_micro": float(A.S[i, j]), "se_micro": float(A.stderr[i, j]),
                         "S_sbe": float(B.S[i, j]), "se_sbe": float(B.stderr[i, j]),
                         "S_linear": sbe.ou_pairing_correlation(params, width, x, t),
                         "overlap": bool(rep.overlap[i, j])})
    verdicts = [Verdict("compare.overlap_fraction", rep.passed, rep.fraction, rep.threshold,
                        f"{int(rep.overlap.sum())}/{rep.overlap.size} cells")]
    return {"correlation": rows}, verdicts, []


_DISPATCH = {"thermo": _exp_thermo, "ensembles": _exp_ensembles, "dynamics": _exp_dynamics,
             "scaling": _exp_scaling, "bg": _exp_bg, "sbe": _exp_sbe, "compare": _exp_compare}


def run(config: ExperimentConfig, threads: int | None = None, write: bool = True) -> RunArtifact:
    """Validate, dispatch, summarise and (optionally) persist one experiment."""
    config.validate()
    pots = config.potential_objects()
    for pot in pots:
        rep = validate_assumption_v(pot)
        if not rep.passed:
            raise ConfigError(f"potential {pot.key} fails the convex-plus-bounded check: {rep.reasons}")
    threads = resolve_threads(threads)
    t0 = time.perf_counter()
    error = None
    tables, verdicts, checks = {}, [], []
    try:
        tables, verdicts, checks = _DISPATCH[config.experiment](config, threads)
    except NumericalError as exc:
        error = f"{type(exc).__name__}: {exc}"
        tables = tables or {}
        diag = getattr(exc, "diagnostics", None)
        if diag:
            tables["failure"] = [{"key": k, "value": v} for k, v in sorted(diag.items())]
    summary = summarize(tables, checks)
    summary["experiment"] = config.experiment
    metrics = {"wall_seconds": time.perf_counter() - t0, "threads": threads}
    art = RunArtifact(config, tables, summary, verdicts, metrics, error)
    if write:
        write_artifact(art)
    return art
