"""Thermodynamics of the tilted single-site measures p_lam(u) = exp(lam u - V(u)) / Z_lam.

Everything here is a pure function of an immutable Potential.  Quadrature
tables are cached per (potential, lam).  The quadratic family is handled by
closed forms unless ``force_quadrature=True`` is passed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from .errors import NumericalError, UsageError
from .potentials import Potential

_GL_ORDER = 16
_GL_X, _GL_W = np.polynomial.legendre.leggauss(_GL_ORDER)


@dataclass(frozen=True)
class QuadratureSpec:
    """Composite Gauss-Legendre rule on [mean - w*sigma, mean + w*sigma].

    ``width`` doubles until the density at both ends, times sigma, is below
    ``tail_tol``.  Panels are halved until Z changes by less than ``rel_tol``.
    """

    width: float = 12.0
    panels_per_sigma: int = 2
    tail_tol: float = 1e-14
    rel_tol: float = 1e-13
    max_doublings: int = 6
    max_refinements: int = 6


DEFAULT_QUAD = QuadratureSpec()


def _composite_nodes(lo: float, hi: float, panels: int):
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    x = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
    w = (half[:, None] * _GL_W[None, :]).ravel()
    return x, w


def _mode(potential: Potential, lam: float) -> tuple[float, float]:
    """Location and curvature scale of the maximum of lam*u - V(u)."""
    if potential.family != "user":
        u = lam / potential.a
        for _ in range(100):
            g = lam - potential.dV(u)
            h = potential.d2V(u)
            step = g / h if h > 0 else g / potential.a
            u += float(step)
            if abs(step) < 1e-14 * (1 + abs(u)):
                break
    else:
        grid = np.linspace(-200.0, 200.0, 40001)
        with np.errstate(over="ignore", invalid="ignore"):
            vals = lam * grid - potential(grid)
        vals = np.where(np.isfinite(vals), vals, -np.inf)
        u = float(grid[int(np.argmax(vals))])
    curv = float(potential.d2V(u))
    scale = 1.0 / math.sqrt(curv) if curv > 1e-6 else 1.0
    return float(u), scale


class TiltedMeasure:
    """Normalized single-site density p_lam with a cached quadrature rule."""

    def __init__(self, potential: Potential, lam: float, spec: QuadratureSpec = DEFAULT_QUAD):
        self.potential = potential
        self.lam = float(lam)
        self.spec = spec
        center, scale = _mode(potential, self.lam)
        # first pass locates mean and spread, second pass centres on them
        for _ in range(2):
            x, w, logz, width = self._build(center, scale)
            p = np.exp(self.lam * x - potential(x) - logz)
            mean = float(np.dot(w * p, x))
            sd = math.sqrt(float(np.dot(w * p, (x - mean) ** 2)))
            center, scale = mean, sd
        self.nodes, self.weights, self.log_z, self.width = x, w, logz, width
        self.pw = w * np.exp(self.lam * x - potential(x) - logz)
        self.mean = float(np.dot(self.pw, x))
        self.sigma = math.sqrt(float(np.dot(self.pw, (x - self.mean) ** 2)))

    def _build(self, center, scale):
        spec = self.spec
        width = spec.width
        for _ in range(spec.max_doublings + 1):
            lo, hi = center - width * scale, center + width * scale
            ends = np.array([lo, hi])
            panels = max(4, int(math.ceil(2 * width * spec.panels_per_sigma)))
            logz = None
            for _ in range(spec.max_refinements + 1):
                x, w = _composite_nodes(lo, hi, panels)
                new = float(logsumexp(self.lam * x - self.potential(x), b=w))
                if logz is not None and abs(new - logz) < spec.rel_tol:
                    logz = new
                    break
                logz = new
                panels *= 2
            else:
                raise NumericalError("quadrature refinement did not converge",
                                     lam=self.lam, interval=(lo, hi))
            tail = np.exp(self.lam * ends - self.potential(ends) - logz) * scale
            if np.all(tail < spec.tail_tol):
                return x, w, logz, width
            width *= 2.0
        raise NumericalError("tail mass above tolerance after interval doublings",
                             lam=self.lam, tail=tail.tolist(), width=width)

    @property
    def Z(self) -> float:
        return math.exp(self.log_z)

    def density(self, u):
        u = np.asarray(u, dtype=float)
        return np.exp(self.lam * u - self.potential(u) - self.log_z)

    def log_density(self, u):
        u = np.asarray(u, dtype=float)
        return self.lam * u - self.potential(u) - self.log_z

    def expect(self, f) -> float:
        return float(np.dot(self.pw, f(self.nodes)))

    def mass(self) -> float:
        return float(self.pw.sum())

    def interval(self) -> tuple[float, float]:
        return self.mean - self.width * self.sigma, self.mean + self.width * self.sigma


@lru_cache(maxsize=512)
def tilted_measure(potential: Potential, lam: float, spec: QuadratureSpec = DEFAULT_QUAD) -> TiltedMeasure:
    return TiltedMeasure(potential, float(lam), spec)


def _gaussian_closed_form(potential: Potential) -> bool:
    return potential.family == "quadratic" or (potential.family == "perturbed" and potential.b == 0.0)


def log_partition(potential: Potential, lam: float, force_quadrature: bool = False) -> tuple[float, float]:
    """Return (Z_lam, rho(lam) = log Z_lam)."""
    if _gaussian_closed_form(potential) and not force_quadrature:
        a = potential.a
        rho = lam * lam / (2 * a) + 0.5 * math.log(2 * math.pi / a)
    else:
        rho = tilted_measure(potential, float(lam)).log_z
    return math.exp(rho), rho


@dataclass
class ThermoProfile:
    lam: float
    Z: float
    rho: float
    rho_prime: float
    sigma2: float
    central: dict = field(default_factory=dict)
    e_dv: float = float("nan")
    var_dv: float = float("nan")
    e_d2v: float = float("nan")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)

    @property
    def m3(self) -> float:
        return self.central.get(3, float("nan"))

    @property
    def m4(self) -> float:
        return self.central.get(4, float("nan"))

    @property
    def cumulants(self) -> tuple:
        """(kappa_1, ..., kappa_4)."""
        return (self.rho_prime, self.sigma2, self.m3, self.m4 - 3 * self.sigma2 ** 2)


def _gauss_central(k: int, s2: float) -> float:
    if k % 2:
        return 0.0
    return float(np.prod(np.arange(k - 1, 0, -2))) * s2 ** (k // 2)


def moments(potential: Potential, lam: float, k_max: int = 4, force_quadrature: bool = False) -> ThermoProfile:
    """Mean, variance, centered moments up to ``k_max`` and the V' statistics."""
    if not 2 <= k_max <= 6:
        raise UsageError("k_max must lie in 2..6")
    lam = float(lam)
    Z, rho = log_partition(potential, lam, force_quadrature)
    if _gaussian_closed_form(potential) and not force_quadrature:
        a = potential.a
        s2 = 1.0 / a
        central = {k: _gauss_central(k, s2) for k in range(2, k_max + 1)}
        return ThermoProfile(lam, Z, rho, lam / a, s2, central, e_dv=lam, var_dv=a, e_d2v=a)
    tm = tilted_measure(potential, lam)
    x, pw = tm.nodes, tm.pw
    mean = float(np.dot(pw, x))
    d = x - mean
    central = {k: float(np.dot(pw, d ** k)) for k in range(2, k_max + 1)}
    dv = potential.dV(x)
    e_dv = float(np.dot(pw, dv))
    var_dv = float(np.dot(pw, (dv - e_dv) ** 2))
    e_d2v = float(np.dot(pw, potential.d2V(x)))
    return ThermoProfile(lam, Z, rho, mean, central[2], central, e_dv, var_dv, e_d2v)


def tilt_for_mean(potential: Potential, rho_target: float, tol: float = 1e-12,
                  max_doublings: int = 60, max_iter: int = 200) -> float:
    """Invert lam -> rho'(lam) by safeguarded Newton with bisection fallback."""
    rho_target = float(rho_target)
    if _gaussian_closed_form(potential):
        return potential.a * rho_target

    def f(lam):
        pr = moments(potential, lam, 2)
        return pr.rho_prime - rho_target, pr.sigma2

    lam = 0.0 if potential.family == "user" else potential.a * rho_target
    g, s2 = f(lam)
    if abs(g) <= tol:
        return lam
    # bracket by doubling steps in the direction of the root
    direction = -1.0 if g > 0 else 1.0
    step = max(abs(g) / s2, 1e-3)
    for _ in range(max_doublings):
        trial = lam + direction * step
        gt, _ = f(trial)
        if np.sign(gt) != np.sign(g):
            lo, hi = sorted((lam, trial))
            break
        step *= 2.0
    else:
        raise NumericalError("could not bracket the tilt", rho_target=rho_target)

    lam = 0.5 * (lo + hi)
    for _ in range(max_iter):
        g, s2 = f(lam)
        if abs(g) <= tol:
            return lam
        if g < 0:
            lo = lam
        else:
            hi = lam
        newton = lam - g / s2
        lam = newton if lo < newton < hi else 0.5 * (lo + hi)
        if hi - lo < 1e-15 * (1 + abs(lam)):
            return lam
    raise NumericalError("tilt_for_mean did not converge", rho_target=rho_target, lam=lam)


@dataclass(frozen=True)
class BurgersCoefficients:
    """Limit coefficients at the reference tilt lam0.

    ``nu`` multiplies the Laplacian and ``b`` the term -b d/dx(u^2).
    """

    lam0: float
    rho_prime: float
    sigma2: float
    m3: float
    nu: float
    b: float
    dphi: float
    d2phi: float

    def c_n(self, n) -> float:
        """Speed of the moving frame, sqrt(n) / sigma^2."""
        return math.sqrt(n) / self.sigma2

    def __iter__(self):
        return iter((self.nu, self.b, self.c_n))


def burgers_coefficients(potential: Potential, lam0: float) -> BurgersCoefficients:
    pr = moments(potential, lam0, 3)
    s2, m3 = pr.sigma2, pr.m3
    return BurgersCoefficients(
        lam0=float(lam0), rho_prime=pr.rho_prime, sigma2=s2, m3=m3,
        nu=1.0 / (2.0 * s2), b=m3 / (2.0 * s2 ** 3),
        dphi=1.0 / s2, d2phi=-m3 / s2 ** 3,
    )


def chemical_potential_fd(potential: Potential, lam0: float, h: float = 1e-3) -> tuple[float, float]:
    """Finite-difference first and second derivatives of rho -> E_{h'(rho)}[V'] at rho'(lam0)."""
    r0 = moments(potential, lam0, 2).rho_prime

    def phi(r):
        return moments(potential, tilt_for_mean(potential, r), 2).e_dv

    fp, f0, fm = phi(r0 + h), phi(r0), phi(r0 - h)
    return (fp - fm) / (2 * h), (fp - 2 * f0 + fm) / h ** 2


def hermite(k: int, u):
    """Probabilists' Hermite polynomial He_k, k in 0..6."""
    if k not in range(7):
        raise UsageError(f"hermite order must be in 0..6, got {k!r}")
    u = np.asarray(u, dtype=float)
    prev, cur = np.ones_like(u), u.copy()
    if k == 0:
        out = prev
    else:
        for j in range(1, k):
            prev, cur = cur, u * cur - j * prev
        out = cur
    return float(out) if out.ndim == 0 else out


_SQRT2PI = math.sqrt(2 * math.pi)


@dataclass(frozen=True)
class EdgeworthExpansion:
    """Two-term Edgeworth correction to the standardized N-fold sum density."""

    lam: float
    N: int
    c3: float  # m3 / (6 sigma^3)
    c4: float  # (m4 - 3 sigma^4) / (24 sigma^4)
    c6: float  # m3^2 / (72 sigma^6)

    @classmethod
    def from_profile(cls, pr: ThermoProfile, N: int) -> "EdgeworthExpansion":
        s = pr.sigma
        return cls(pr.lam, int(N), pr.m3 / (6 * s ** 3),
                   (pr.m4 - 3 * s ** 4) / (24 * s ** 4), pr.m3 ** 2 / (72 * s ** 6))

    @staticmethod
    def r0(u):
        u = np.asarray(u, dtype=float)
        return np.exp(-0.5 * u * u) / _SQRT2PI

    def r1(self, u):
        return self.r0(u) * self.c3 * hermite(3, u)

    def r2(self, u):
        return self.r0(u) * (self.c4 * hermite(4, u) + self.c6 * hermite(6, u))

    def density(self, u):
        return self.r0(u) + self.r1(u) / math.sqrt(self.N) + self.r2(u) / self.N


def edgeworth_density(potential: Potential, lam: float, N: int, u):
    if N < 1:
        raise UsageError("N must be >= 1")
    ex = EdgeworthExpansion.from_profile(moments(potential, lam, 4), N)
    out = ex.density(u)
    return float(out) if np.ndim(out) == 0 else out


def cumulant_second_difference(potential: Potential, lam: float, step: float = 1e-3) -> float:
    """Richardson-extrapolated second difference of rho(lam); estimates sigma^2."""

    def d2(h):
        r = [log_partition(potential, lam + s, force_quadrature=True)[1] for s in (-h, 0.0, h)]
        return (r[0] - 2 * r[1] + r[2]) / h ** 2

    return (4 * d2(step / 2) - d2(step)) / 3


def uniform_bound_probe(potential: Potential, lams) -> dict:
    """Constants bounding |m3|/s^3, |m4|/s^4, s^2 and 1/s^2 over a finite tilt window."""
    rows = [moments(potential, lam, 4) for lam in lams]
    vals = {
        "skew": [abs(p.m3) / p.sigma ** 3 for p in rows],
        "kurt": [abs(p.m4) / p.sigma2 ** 2 for p in rows],
        "sigma2": [p.sigma2 for p in rows],
        "inv_sigma2": [1.0 / p.sigma2 for p in rows],
    }
    out = {k: float(np.max(v)) for k, v in vals.items()}
    out["finite"] = bool(all(np.all(np.isfinite(v)) for v in vals.values()))
    return out


def thermo_table(potential: Potential, lams) -> list[dict]:
    """Rows with columns lambda, Z, rho, rho_prime, sigma2, m3, m4, h_prime_roundtrip_err."""
    rows = []
    for lam in lams:
        pr = moments(potential, float(lam), 4)
        back = tilt_for_mean(potential, pr.rho_prime)
        rows.append({
            "lambda": float(lam), "Z": pr.Z, "rho": pr.rho, "rho_prime": pr.rho_prime,
            "sigma2": pr.sigma2, "m3": pr.m3, "m4": pr.m4,
            "h_prime_roundtrip_err": abs(back - float(lam)),
        })
    return rows
