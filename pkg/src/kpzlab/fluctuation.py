"""Rescaled fluctuation field in the moving frame and its S/A/M decomposition.

For a test function eta the field is

    v_t(eta) = n^{-1/2} sum_k (u(k) - rho') eta(k/n + c_n t),   c_n = sqrt(n)/sigma^2,

with t the macroscopic time (microscopic time divided by n^2).  The
accumulator below splits every Euler-Maruyama increment of v_t(eta) into a
symmetric part S, an antisymmetric part A (drift plus frame motion) and a
martingale part M.  Test-function weights for S, A and M are taken at the end
of the step and the state at its start, which makes the split exact.
Boltzmann-Gibbs residuals and the quadratic field use the frame at step start.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import stats

from .dynamics import Integrator, grad2_D, lap_D, sample_replicas
from .errors import ConfigError, NumericalError, UsageError
from .potentials import Potential
from .thermo import burgers_coefficients, moments, tilted_measure

_PI_QUARTER = math.pi ** -0.25


# -- test functions ------------------------------------------------------------


def _hermite_functions(m: int, y):
    """Orthonormal Hermite functions psi_0..psi_m at y (list of arrays)."""
    out = [_PI_QUARTER * np.exp(-0.5 * y * y)]
    if m >= 1:
        out.append(math.sqrt(2.0) * y * out[0])
    for k in range(1, m):
        out.append(math.sqrt(2.0 / (k + 1)) * y * out[k] - math.sqrt(k / (k + 1)) * out[k - 1])
    return out


@dataclass(frozen=True)
class TestFunction:
    """Gaussian bump exp(-(x-c)^2 / 2w^2) or Hermite function psi_m((x-c)/w)."""

    family: str = "gaussian"
    center: float = 0.0
    width: float = 0.25
    order: int = 0

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.family not in ("gaussian", "hermite"):
            raise UsageError(f"unknown test-function family {self.family!r}")
        if not self.width > 0:
            raise UsageError("width must be positive")
        if self.order < 0:
            raise UsageError("order must be non-negative")

    @classmethod
    def from_spec(cls, spec: dict) -> "TestFunction":
        return cls(spec.get("family", "gaussian"), float(spec.get("center", 0.0)),
                   float(spec.get("width", 0.25)), int(spec.get("order", 0)))

    def to_spec(self) -> dict:
        return {"family": self.family, "center": self.center, "width": self.width, "order": self.order}

    def shifted(self, dx: float) -> "TestFunction":
        """x -> eta(x - dx)."""
        return TestFunction(self.family, self.center + dx, self.width, self.order)

    def __call__(self, x):
        y = (np.asarray(x, dtype=float) - self.center) / self.width
        if self.family == "gaussian":
            return np.exp(-0.5 * y * y)
        return _hermite_functions(self.order, y)[self.order]

    def grad(self, x):
        y = (np.asarray(x, dtype=float) - self.center) / self.width
        w = self.width
        if self.family == "gaussian":
            return -y / w * np.exp(-0.5 * y * y)
        m = self.order
        psi = _hermite_functions(m + 1, y)
        d = -math.sqrt((m + 1) / 2.0) * psi[m + 1]
        if m >= 1:
            d = d + math.sqrt(m / 2.0) * psi[m - 1]
        return d / w

    def lap(self, x):
        y = (np.asarray(x, dtype=float) - self.center) / self.width
        w = self.width
        if self.family == "gaussian":
            return (y * y - 1.0) / (w * w) * np.exp(-0.5 * y * y)
        m = self.order
        return (y * y - (2 * m + 1)) / (w * w) * _hermite_functions(m, y)[m]

    @property
    def l2_sq(self) -> float:
        if self.family == "gaussian":
            return self.width * math.sqrt(math.pi)
        return self.width

    @property
    def grad_l2_sq(self) -> float:
        if self.family == "gaussian":
            return math.sqrt(math.pi) / (2.0 * self.width)
        return (self.order + 0.5) / self.width

    def support_halfwidth(self, tol: float = 1e-16) -> float:
        """Half-width beyond which |eta| stays below tol * max|eta|."""
        y = np.linspace(0.0, 40.0 + 2 * math.sqrt(2 * self.order + 1), 40001)
        vals = np.abs(self((self.center + self.width * y)))
        vals = np.maximum(vals, np.abs(self(self.center - self.width * y)))
        big = np.nonzero(vals >= tol * vals.max())[0]
        return float(self.width * y[big[-1] + 1])

    def decay_constant(self, probe=None) -> float:
        """K with |eta(x)| <= K (1 + |x|)^-4 on the probe grid."""
        if probe is None:
            probe = np.linspace(-50.0, 50.0, 100001)
        probe = np.asarray(probe, dtype=float)
        return float(np.max(np.abs(self(probe)) * (1 + np.abs(probe)) ** 4))


def inner(eta: TestFunction, zeta: TestFunction, points: int = 200001) -> float:
    """L2 inner product by the trapezoid rule on a window covering both supports."""
    lo = min(eta.center - eta.support_halfwidth(), zeta.center - zeta.support_halfwidth())
    hi = max(eta.center + eta.support_halfwidth(), zeta.center + zeta.support_halfwidth())
    x = np.linspace(lo, hi, points)
    return float(np.trapezoid(eta(x) * zeta(x), x))


# -- geometry ------------------------------------------------------------------


@dataclass(frozen=True)
class Frame:
    """Maps array index i to lattice label k = i - offset and moves at speed c_n."""

    n: int
    n_sites: int
    offset: int
    c_n: float

    def positions(self, t_macro: float) -> np.ndarray:
        k = np.arange(self.n_sites) - self.offset
        return k / self.n + self.c_n * t_macro


def lattice_size(n: int, etas, sigma2: float, T: float, margin: float = 0.2) -> int:
    """Power of two covering the test-function support plus the distance travelled by the frame."""
    span = _support_span(etas)
    need = n * span + n ** 1.5 / sigma2 * T
    return int(2 ** math.ceil(math.log2(math.ceil(need * (1 + margin)))))


def _support_span(etas):
    lo = min(e.center - e.support_halfwidth() for e in etas)
    hi = max(e.center + e.support_halfwidth() for e in etas)
    return hi - lo


def make_frame(n: int, etas, sigma2: float, T: float, n_sites: int | None = None) -> Frame:
    """Place the supports so that they never cross the periodic seam up to time T."""
    c_n = math.sqrt(n) / sigma2
    if n_sites is None:
        n_sites = lattice_size(n, etas, sigma2, T)
    lo = min(e.center - e.support_halfwidth() for e in etas)
    hi = max(e.center + e.support_halfwidth() for e in etas)
    k_hi = math.ceil(n * hi) + 1
    k_lo = math.floor(n * (lo - c_n * T)) - 1
    if k_hi - k_lo + 1 > n_sites:
        raise ConfigError(f"lattice of {n_sites} sites cannot hold the test functions up to T={T}")
    spare = n_sites - (k_hi - k_lo + 1)
    return Frame(n, n_sites, -k_lo + spare // 2, c_n)


def field_eval(u, eta: TestFunction, n: int, t_macro: float, rho_prime: float, sigma2: float,
               offset: int = 0, check_support: bool = True) -> np.ndarray | float:
    """v^n_t(eta) for a state (last axis = sites, index i <-> k = i - offset)."""
    u = np.asarray(u, dtype=float)
    N = u.shape[-1]
    frame = Frame(n, N, offset, math.sqrt(n) / sigma2)
    x = frame.positions(t_macro)
    w = eta(x)
    if check_support:
        edge = max(abs(w[0]), abs(w[-1]))
        if edge > 1e-12 * max(np.abs(w).max(), 1e-300):
            raise ConfigError("test function support reaches the lattice boundary")
    out = np.sum((u - rho_prime) * w, axis=-1) / math.sqrt(n)
    return float(out) if np.ndim(out) == 0 else out


# -- quadratic field -----------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _rowdot_kernel(X, W, out):
    R, N = X.shape
    m = W.shape[1]
    for r in range(R):
        for j in range(m):
            out[r, j] = 0.0
        for i in range(N):
            x = X[r, i]
            for j in range(m):
                out[r, j] += x * W[i, j]


def rowdot(X, W) -> np.ndarray:
    """X @ W for 2-D X, summed in a fixed order per row.

    Unlike BLAS, the rounding of each row does not depend on how many rows
    are in the batch, so splitting replicas across workers changes nothing.
    """
    X = np.ascontiguousarray(X, dtype=float)
    W = np.ascontiguousarray(W, dtype=float)
    out = np.empty((X.shape[0], W.shape[1]))
    _rowdot_kernel(X, W, out)
    return out


@numba.njit(cache=True, nogil=True)
def _block_route(u, ell, rho, s2, out):
    """Q from sliding sums of the raw state (periodic windows k..k+ell-1)."""
    R, N = u.shape
    for r in range(R):
        acc = 0.0
        for j in range(ell):
            acc += u[r, j % N]
        for k in range(N):
            mean = acc / ell
            out[r, k] = (mean - rho) ** 2 - s2 / ell
            acc += u[r, (k + ell) % N] - u[r, k]


@numba.njit(cache=True, nogil=True)
def _mollified_route(u, ell, rho, s2, n, delta, out):
    """n^{-1}(v(i_delta)^2 - s2/delta) from sliding sums of the centred state."""
    R, N = u.shape
    scale = 1.0 / (math.sqrt(n) * delta)
    for r in range(R):
        acc = 0.0
        for j in range(ell):
            acc += u[r, j % N] - rho
        for k in range(N):
            v = acc * scale
            out[r, k] = (v * v - s2 / delta) / n
            acc += (u[r, (k + ell) % N] - rho) - (u[r, k] - rho)


@dataclass(frozen=True)
class QuadraticField:
    """Q(ell; u)_k = (mean of u over sites k..k+ell-1 - rho')^2 - sigma^2 / ell."""

    ell: int
    rho_prime: float
    sigma2: float

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        u2 = np.ascontiguousarray(u.reshape(-1, u.shape[-1]))
        out = np.empty_like(u2)
        _block_route(u2, self.ell, self.rho_prime, self.sigma2, out)
        return out.reshape(u.shape)


def mollified_square(u, n: int, delta: float, rho_prime: float, sigma2: float) -> np.ndarray:
    """n^{-1} [ v(i_delta(x_k))^2 - sigma^2/delta ] with i_delta = delta^{-1} 1_[x, x+delta)."""
    ell = int(round(delta * n))
    u = np.asarray(u, dtype=float)
    u2 = np.ascontiguousarray(u.reshape(-1, u.shape[-1]))
    out = np.empty_like(u2)
    _mollified_route(u2, ell, rho_prime, sigma2, n, delta, out)
    return out.reshape(u.shape)


# -- accumulator ---------------------------------------------------------------


@dataclass
class ScalingConfig:
    potential: Potential
    lam0: float = 0.0
    n: int = 16
    T: float = 0.1
    dt: float = 0.05
    etas: tuple = (TestFunction(),)
    delta: float = 0.5
    records: int = 256
    replicas: int = 100
    seed: int = 0
    alpha: float | None = None      # defaults to n^{-1/2}
    n_sites: int | None = None
    check_identity: bool = True
    chunk: int = 64

    def resolved_alpha(self) -> float:
        return 1.0 / math.sqrt(self.n) if self.alpha is None else float(self.alpha)


@dataclass
class FluctuationTrace:
    """Time series recorded on ``times`` (macroscopic); arrays are (n_rec, R, n_eta)."""

    n: int
    lam0: float
    times: np.ndarray
    etas: tuple
    v: np.ndarray
    S: np.ndarray
    A: np.ndarray
    M: np.ndarray
    qv_real: np.ndarray
    bg1: np.ndarray
    bg2: np.ndarray
    nl: np.ndarray
    nl_moll: np.ndarray
    qv_pred: np.ndarray      # (n_rec, n_eta)
    g_norm2: np.ndarray      # (n_rec, n_eta) running int sum_k g^2 ds
    meta: dict = field(default_factory=dict)

    _SERIES = ("v", "S", "A", "M", "qv_real", "bg1", "bg2", "nl", "nl_moll")

    @property
    def replicas(self) -> int:
        return self.v.shape[1]

    def identity_error(self) -> np.ndarray:
        """|v_t - v_0 - (S + A + M)| relative to the rms field size, per record time."""
        gap = self.v - self.v[:1] - (self.S + self.A + self.M)
        scale = max(float(np.sqrt(np.mean(self.v ** 2))), 1e-300)
        return np.max(np.abs(gap), axis=(1, 2)) / scale

    def nonlinearity_identity_error(self) -> np.ndarray:
        """Relative gap between block-average and mollified-square routes."""
        scale = max(float(np.max(np.abs(self.nl))), 1e-300)
        return np.max(np.abs(self.nl - self.nl_moll), axis=(1, 2)) / scale

    @staticmethod
    def merge(parts) -> "FluctuationTrace":
        parts = list(parts)
        first = parts[0]
        kw = {k: np.concatenate([getattr(p, k) for p in parts], axis=1) for k in FluctuationTrace._SERIES}
        return FluctuationTrace(first.n, first.lam0, first.times, first.etas, qv_pred=first.qv_pred,
                                g_norm2=first.g_norm2, meta=dict(first.meta), **kw)


class SamAccumulator:
    """Per-step S/A/M split plus Boltzmann-Gibbs and quadratic-field integrals."""

    def __init__(self, n, frame: Frame, etas, rho_prime, sigma2, phi, d2phi, alpha, dt, delta,
                 replicas, check_identity=True):
        self.n, self.frame, self.etas = n, frame, tuple(etas)
        self.rho, self.s2, self.phi, self.d2phi = rho_prime, sigma2, phi, d2phi
        self.alpha, self.dt = alpha, dt
        self.h = dt / n ** 2
        self.delta = delta
        self.ell = int(round(delta * n))
        if self.ell < 1 or abs(self.ell - delta * n) > 1e-9:
            raise UsageError("delta * n must be a positive integer")
        self.Q = QuadraticField(self.ell, rho_prime, sigma2)
        self.check_identity = check_identity
        self.step_index = 0
        m = len(self.etas)
        z = lambda: np.zeros((replicas, m))
        self.S, self.A, self.M, self.qv_real = z(), z(), z(), z()
        self.bg1, self.bg2, self.nl, self.nl_moll = z(), z(), z(), z()
        self.qv_pred = np.zeros(m)
        self.g_norm2 = np.zeros(m)
        self._e = self.weights(0.0)

    def weights(self, t_macro):
        x = self.frame.positions(t_macro)
        return np.stack([eta(x) for eta in self.etas], axis=1)   # (N, m)

    def field(self, u, t_macro=None):
        e = self._e if t_macro is None else self.weights(t_macro)
        return rowdot(u - self.rho, e) / math.sqrt(self.n)

    def update(self, u_old, vp_old, xi):
        n, dt, sq_n = self.n, self.dt, math.sqrt(self.n)
        e = self._e
        self.step_index += 1
        e1 = self.weights(self.step_index * self.h)
        d1 = vp_old - self.phi
        d0 = u_old - self.rho
        g = n * grad2_D(e.T).T                                       # grad2_n eta at step start
        w_sym = 0.5 * dt / sq_n * lap_D(e1.T).T
        w_anti = -self.alpha * dt / sq_n * grad2_D(e1.T).T
        a1 = rowdot(d1, np.concatenate([w_sym, w_anti, g], axis=1))
        a0 = rowdot(d0, np.concatenate([(e1 - e) / sq_n, g], axis=1))
        m = e.shape[1]
        dS, dAd, vg = a1[:, :m], a1[:, m:2 * m], a1[:, 2 * m:]
        dAf, ug = a0[:, :m], a0[:, m:]
        w_mart = math.sqrt(dt) / sq_n * (np.roll(e1, 1, axis=0) - e1)
        dM = rowdot(xi, w_mart)
        self.S += dS
        self.A += dAd + dAf
        self.M += dM
        self.qv_real += dM * dM
        self.qv_pred += dt / n * np.sum((np.roll(e1, -1, axis=0) - e1) ** 2, axis=0)
        b1 = self.h * (vg - ug / self.s2)
        qg = self.h * rowdot(self.Q(u_old), g)
        self.bg1 += b1
        self.nl += qg
        self.bg2 += b1 - 0.5 * self.d2phi * qg
        if self.check_identity:
            self.nl_moll += self.h * rowdot(mollified_square(u_old, n, self.delta, self.rho, self.s2), g)
        self.g_norm2 += self.h * np.sum(g * g, axis=0)
        self._e = e1


def sam_accumulate(acc: SamAccumulator, u_old, vp_old, xi):
    """Fold one integrator step into the accumulator (returns it for chaining)."""
    acc.update(u_old, vp_old, xi)
    return acc


def run_scaling(cfg: ScalingConfig, generators=None, replica_offset: int = 0) -> FluctuationTrace:
    """Simulate ``cfg.replicas`` stationary replicas and record the fluctuation trace."""
    from .seeding import SeedStream

    pot, n = cfg.potential, cfg.n
    bc = burgers_coefficients(pot, cfg.lam0)
    pr = moments(pot, cfg.lam0, 3)
    rho, s2 = pr.rho_prime, pr.sigma2
    phi = cfg.lam0                      # E_lam0[V'] = lam0
    alpha = cfg.resolved_alpha()
    frame = make_frame(n, cfg.etas, s2, cfg.T, cfg.n_sites)
    if generators is None:
        generators = [SeedStream(cfg.seed, replica_offset + r, f"scaling-n{n}").generator()
                      for r in range(cfg.replicas)]
    R = len(generators)
    u = sample_replicas(frame.n_sites, cfg.lam0, generators, pot)
    integ = Integrator(pot, alpha, cfg.dt, generators, cfg.chunk)
    acc = SamAccumulator(n, frame, cfg.etas, rho, s2, phi, bc.d2phi, alpha, cfg.dt, cfg.delta, R,
                         cfg.check_identity)
    nsteps = int(round(cfg.T * n * n / cfg.dt))
    if nsteps < 1:
        raise ConfigError("T too short for one step")
    rec_every = max(1, nsteps // cfg.records)
    rec_steps = list(range(0, nsteps + 1, rec_every))
    if rec_steps[-1] != nsteps:
        rec_steps.append(nsteps)
    nrec, m = len(rec_steps), len(cfg.etas)
    series = {k: np.zeros((nrec, R, m)) for k in FluctuationTrace._SERIES}
    qv_pred = np.zeros((nrec, m))
    g_norm2 = np.zeros((nrec, m))

    def record(j, u):
        series["v"][j] = acc.field(u)
        for k, src in (("S", acc.S), ("A", acc.A), ("M", acc.M), ("qv_real", acc.qv_real),
                       ("bg1", acc.bg1), ("bg2", acc.bg2), ("nl", acc.nl), ("nl_moll", acc.nl_moll)):
            series[k][j] = src
        qv_pred[j] = acc.qv_pred
        g_norm2[j] = acc.g_norm2

    record(0, u)
    j = 1
    for s in range(1, nsteps + 1):
        u_new, vp, xi = integ.step(u)
        acc.update(u, vp, xi)
        u = u_new
        if s == rec_steps[j]:
            integ._check(u)
            record(j, u)
            j += 1
    times = np.array(rec_steps, dtype=float) * acc.h
    meta = {
        "n": n, "alpha": alpha, "dt": cfg.dt, "h": acc.h, "n_sites": frame.n_sites,
        "offset": frame.offset, "c_n": frame.c_n, "rho_prime": rho, "sigma2": s2, "phi": phi,
        "d2phi": bc.d2phi, "nu": bc.nu, "b": bc.b, "delta": cfg.delta, "ell_q": acc.ell,
        "T": float(times[-1]), "steps": nsteps,
    }
    return FluctuationTrace(n, cfg.lam0, times, tuple(cfg.etas), qv_pred=qv_pred, g_norm2=g_norm2,
                            meta=meta, **series)


# -- analysis ------------------------------------------------------------------


def finite_n_variance(eta: TestFunction, frame: Frame, t_macro: float, sigma2: float) -> float:
    """Exact stationary Var v^n_t(eta) = sigma^2 n^{-1} sum_k eta(k/n + c_n t)^2."""
    x = frame.positions(t_macro)
    return sigma2 * float(np.sum(eta(x) ** 2)) / frame.n


@dataclass
class EtaNoiseStats:
    mean: float
    mean_se: float
    var: float
    var_target: float
    var_ratio: float
    var_ratio_se: float
    var_ratio_exact: float | None
    skewness: float
    excess_kurtosis: float
    normal_p: float

    @property
    def ratio_z(self) -> float:
        return (self.var_ratio - 1.0) / self.var_ratio_se


@dataclass
class PairNoiseStats:
    i: int
    j: int
    cov: float
    target: float
    se: float

    @property
    def z(self) -> float:
        return (self.cov - self.target) / self.se


@dataclass
class WhiteNoiseReport:
    replicas: int
    per_eta: list
    pairs: list


def white_noise_stats(samples, etas, sigma2: float, pairs=(), exact_var=None,
                      min_replicas: int = 1000) -> WhiteNoiseReport:
    """Marginal statistics of v^n_t(eta_i) from ``samples`` of shape (R, m).

    The standard error of the sample variance uses the sample fourth moment,
    se(s^2) = sqrt((m4 - s^4)/R).
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    R, m = x.shape
    if R < min_replicas:
        raise UsageError(f"white-noise statistics need at least {min_replicas} replicas, got {R}")
    if len(etas) != m:
        raise UsageError("one test function per sample column")
    per = []
    for i, eta in enumerate(etas):
        col = x[:, i]
        c = col - col.mean()
        var = float(np.mean(c ** 2)) * R / (R - 1)
        m4 = float(np.mean(c ** 4))
        se_var = math.sqrt(max(m4 - var ** 2, 0.0) / R)
        target = sigma2 * eta.l2_sq
        ex = None if exact_var is None else var / float(exact_var[i])
        per.append(EtaNoiseStats(
            mean=float(col.mean()), mean_se=math.sqrt(var / R), var=var, var_target=target,
            var_ratio=var / target, var_ratio_se=se_var / target, var_ratio_exact=ex,
            skewness=float(stats.skew(col)), excess_kurtosis=float(stats.kurtosis(col)),
            normal_p=float(stats.normaltest(col).pvalue)))
    out_pairs = []
    for i, j in pairs:
        a = x[:, i] - x[:, i].mean()
        b = x[:, j] - x[:, j].mean()
        prod = a * b
        out_pairs.append(PairNoiseStats(i, j, float(prod.sum() / (R - 1)),
                                        sigma2 * inner(etas[i], etas[j]),
                                        float(prod.std(ddof=1) / math.sqrt(R))))
    return WhiteNoiseReport(R, per, out_pairs)


def sup_variance(potential: Potential, observable, lams=None) -> float:
    """sup over tilts of var_lambda(observable(u))."""
    lams = np.linspace(-5.0, 5.0, 41) if lams is None else lams
    best = 0.0
    for lam in lams:
        tm = tilted_measure(potential, float(lam))
        mu = tm.expect(observable)
        best = max(best, tm.expect(lambda u: (observable(u) - mu) ** 2))
    return best


@dataclass
class BGResidual:
    order: int
    n: int
    ell: int
    T: float
    estimate: np.ndarray     # (m,) MC mean of the squared residual at T
    stderr: np.ndarray
    bound: np.ndarray        # (m,)
    g_norm2: np.ndarray

    @property
    def ratio(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.bound > 0, self.estimate / self.bound, 0.0)


def _mc_square(x):
    sq = np.asarray(x) ** 2
    R = sq.shape[0]
    return sq.mean(axis=0), sq.std(axis=0, ddof=1) / math.sqrt(R) if R > 1 else np.zeros(sq.shape[1:])


def bg1_from_trace(trace: FluctuationTrace, potential: Potential, sup_var: float | None = None) -> BGResidual:
    """First-order residual with the bound (ell/n^2 + T/ell) ||g||^2 sup var at ell = floor(n sqrt T)."""
    n, T = trace.n, float(trace.times[-1])
    ell = max(1, int(math.floor(n * math.sqrt(T))))
    if sup_var is None:
        sup_var = sup_variance(potential, potential.dV)
    est, se = _mc_square(trace.bg1[-1])
    g2 = trace.g_norm2[-1]
    bound = (ell / n ** 2 + T / ell) * g2 * sup_var
    return BGResidual(1, n, ell, T, est, se, bound, g2)


def bg2_from_trace(trace: FluctuationTrace, potential: Potential, sup_var: float | None = None) -> BGResidual:
    """Second-order residual with the bound (ell/n^2 + T/ell^2) ||g||^2 sup var at ell = delta n."""
    n, T = trace.n, float(trace.times[-1])
    ell = int(trace.meta["ell_q"])
    if sup_var is None:
        s2 = trace.meta["sigma2"]
        sup_var = sup_variance(potential, lambda u: potential.dV(u) - u / s2)
    est, se = _mc_square(trace.bg2[-1])
    g2 = trace.g_norm2[-1]
    bound = (ell / n ** 2 + T / ell ** 2) * g2 * sup_var
    return BGResidual(2, n, ell, T, est, se, bound, g2)


@dataclass
class NonlinearitySeries:
    times: np.ndarray
    block: np.ndarray        # (n_rec, R, m)
    mollified: np.ndarray
    delta: float

    @property
    def identity_error(self) -> np.ndarray:
        scale = max(float(np.max(np.abs(self.block))), 1e-300)
        return np.max(np.abs(self.block - self.mollified), axis=(1, 2)) / scale

    def mean(self):
        return self.block.mean(axis=1)

    def stderr(self):
        return self.block.std(axis=1, ddof=1) / math.sqrt(self.block.shape[1])


def nonlinearity_estimate(trace: FluctuationTrace, tol: float = 1e-9) -> NonlinearitySeries:
    """Both routes for int_0^t sum_k Q(delta n; u)_k g_s(k) ds; raises if they disagree."""
    if not np.any(trace.nl_moll) and np.any(trace.nl):
        raise UsageError("trace was recorded without the mollified route")
    out = NonlinearitySeries(trace.times, trace.nl, trace.nl_moll, trace.meta["delta"])
    err = float(out.identity_error.max())
    if err > tol:
        raise NumericalError("block-average and mollified routes disagree",
                             diagnostics={"max_rel_err": err})
    return out


@dataclass
class EnergyResidual:
    times: np.ndarray
    R: np.ndarray            # (n_rec, R, m) A + (d2phi/2) NL
    R_opposite: np.ndarray   # A - (d2phi/2) NL
    coefficient: float       # d2phi / 2

    def mean_square(self, opposite: bool = False):
        """Replica mean of R^2 and its standard error, each (n_rec, m)."""
        x = self.R_opposite if opposite else self.R
        sq = x ** 2
        return sq.mean(axis=1), sq.std(axis=1, ddof=1) / math.sqrt(sq.shape[1])

    def sup_mean_square(self, opposite: bool = False) -> np.ndarray:
        return self.mean_square(opposite)[0].max(axis=0)


def energy_residual(trace: FluctuationTrace) -> EnergyResidual:
    """R(t; eta) = A_t(eta) + (d2phi/2) * NL_t(eta).

    With d2phi = -m3/sigma^6 the drift satisfies A ~ -(d2phi/2) NL, so this
    combination is the one that vanishes; the opposite sign is kept for
    comparison.
    """
    c = 0.5 * trace.meta["d2phi"]
    return EnergyResidual(trace.times, trace.A + c * trace.nl, trace.A - c * trace.nl, c)


@dataclass
class RVEstimate:
    deltas: np.ndarray
    horizon: float
    values: np.ndarray       # (len(deltas), ...) per series column

    def slope(self, column=None) -> float:
        y = self.values if column is None else self.values[(slice(None),) + tuple(np.atleast_1d(column))]
        y = np.asarray(y)
        if y.ndim > 1:
            y = y.reshape(len(self.deltas), -1).mean(axis=1)
        return float(np.polyfit(np.log(self.deltas), np.log(y), 1)[0])


def russo_vallois_qv(series, times, deltas) -> RVEstimate:
    """int_0^H (X_{s+d} - X_s)^2 / d ds for each d, with common horizon H = t_end - max d.

    ``series`` has time on axis 0; each d must be a multiple of the (uniform)
    grid spacing.
    """
    x = np.asarray(series, dtype=float)
    t = np.asarray(times, dtype=float)
    if len(t) < 2:
        raise UsageError("need at least two time points")
    step = np.diff(t)
    dt = float(step.mean())
    if np.max(np.abs(step - dt)) > 1e-9 * dt:
        raise UsageError("time grid must be uniform")
    deltas = np.asarray(deltas, dtype=float)
    if np.any(deltas < dt * (1 - 1e-9)):
        raise UsageError(f"delta below grid resolution {dt:g}")
    shifts = np.rint(deltas / dt).astype(int)
    if np.any(np.abs(shifts * dt - deltas) > 1e-6 * deltas):
        raise UsageError("deltas must be multiples of the grid spacing")
    kmax = int(shifts.max())
    nh = len(t) - 1 - kmax
    if nh < 1:
        raise UsageError("largest delta exceeds the recorded window")
    vals = []
    for k, d in zip(shifts, deltas):
        inc = x[k:k + nh] - x[:nh]
        vals.append(np.sum(inc ** 2, axis=0) * dt / d)
    return RVEstimate(deltas, nh * dt, np.array(vals))


def martingale_increment_z(trace: FluctuationTrace, lag: int = 1) -> np.ndarray:
    """z-scores of the replica mean of M_{t+lag} - M_t at every record, shape (n_rec - lag, m)."""
    inc = trace.M[lag:] - trace.M[:-lag]
    se = inc.std(axis=1, ddof=1) / math.sqrt(trace.replicas)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(se > 0, inc.mean(axis=1) / se, 0.0)


def qv_quadrature(eta: TestFunction, frame: Frame, T: float) -> float:
    """Independent route for n^{-1} sum_k int_0^T |grad1_n eta(k/n + c_n r)|^2 dr."""
    from scipy import integrate

    n = frame.n

    def integrand(r):
        x = frame.positions(r)
        e = eta(x)
        return float(np.sum((n * (np.roll(e, -1) - e)) ** 2)) / n

    val, _ = integrate.quad(integrand, 0.0, T, epsabs=0, epsrel=1e-10, limit=400)
    return val


def trace_rows(trace: FluctuationTrace) -> list[dict]:
    """Replica-mean rows (n, t, eta_id, v, S, A, M, qv_M, nonlin, energy_residual)."""
    er = energy_residual(trace)
    rows = []
    for j, t in enumerate(trace.times):
        for i in range(len(trace.etas)):
            rows.append({
                "n": trace.n, "t": float(t), "eta_id": i,
                "v": float(trace.v[j, :, i].mean()), "S": float(trace.S[j, :, i].mean()),
                "A": float(trace.A[j, :, i].mean()), "M": float(trace.M[j, :, i].mean()),
                "qv_M": float(trace.qv_real[j, :, i].mean()), "nonlin": float(trace.nl[j, :, i].mean()),
                "energy_residual": float(np.mean(er.R[j, :, i] ** 2)),
            })
    return rows


def bg1_residual(potential: Potential, n: int, T: float, eta: TestFunction, replicas: int,
                 seed: int = 0, dt: float = 0.05, lam0: float = 0.0) -> BGResidual:
    cfg = ScalingConfig(potential, lam0, n, T, dt, (eta,), replicas=replicas, seed=seed,
                        check_identity=False)
    return bg1_from_trace(run_scaling(cfg), potential)


def bg2_residual(potential: Potential, n: int, delta: float, T: float, eta: TestFunction,
                 replicas: int, seed: int = 0, dt: float = 0.05, lam0: float = 0.0) -> BGResidual:
    cfg = ScalingConfig(potential, lam0, n, T, dt, (eta,), delta=delta, replicas=replicas,
                        seed=seed, check_identity=False)
    return bg2_from_trace(run_scaling(cfg), potential)
