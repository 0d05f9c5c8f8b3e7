"""Canonical (fixed-sum) ensembles built from the tilted single-site law.

Sums of independent sites are handled on an anchored lattice: single-site
nodes sit at ``anchor + j*h`` so that every K-fold sum lands on
``K*anchor + k*h``.  Choosing ``anchor = rho`` puts the conditioning point
``N*rho`` exactly on a node for every tilt, so canonical expectations need no
interpolation and the tilt cancels identically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import fft as sfft

from .errors import NumericalError, UsageError
from .potentials import Potential
from .thermo import EdgeworthExpansion, moments, tilted_measure


@dataclass(frozen=True)
class GridDensity:
    """Density sampled at ``origin + h*arange(len(values))``."""

    origin: float
    h: float
    values: np.ndarray
    mass: float

    @classmethod
    def from_values(cls, origin: float, h: float, values) -> "GridDensity":
        values = np.asarray(values, dtype=float)
        return cls(float(origin), float(h), values, trapezoid_mass(values, h))

    @property
    def x(self) -> np.ndarray:
        return self.origin + self.h * np.arange(self.values.size)

    def normalized(self) -> "GridDensity":
        m = trapezoid_mass(self.values, self.h)
        return GridDensity(self.origin, self.h, self.values / m, 1.0)

    def mass_ok(self, tol: float = 1e-10) -> bool:
        return abs(trapezoid_mass(self.values, self.h) - self.mass) <= tol

    def boundary_flag(self, rel: float = 1e-14) -> bool:
        """True when the support touches the grid boundary."""
        peak = np.max(np.abs(self.values))
        return bool(max(abs(self.values[0]), abs(self.values[-1])) >= rel * peak)

    def moments(self) -> tuple[float, float]:
        x = self.x
        w = self.values * self.h
        m = float(np.dot(w, x) / w.sum())
        return m, float(np.dot(w, (x - m) ** 2) / w.sum())


def trapezoid_mass(values, h: float) -> float:
    v = np.asarray(values, dtype=float)
    return float(h * (v.sum() - 0.5 * (v[0] + v[-1])))


@dataclass(frozen=True)
class CanonicalSpec:
    ell: int
    rho: float

    def __post_init__(self):
        if self.ell < 1:
            raise UsageError("block length must be >= 1")


@dataclass(frozen=True)
class LocalObservable:
    """F acting on ``ell`` consecutive sites; ``func`` takes ``ell`` array arguments."""

    func: Callable
    ell: int = 1
    grad: Optional[Callable] = None
    name: str = "F"

    def __call__(self, *u):
        return self.func(*u)


def site_density(potential: Potential, lam: float, anchor: float, h_rel: float = 1e-3,
                 half_width: float = 12.0) -> GridDensity:
    """p_lam sampled on ``anchor + j*h`` covering +-half_width sigma around both the mean and the anchor."""
    tm = tilted_measure(potential, float(lam))
    mu, sd = tm.mean, tm.sigma
    h = h_rel * sd
    lo = min(mu, anchor) - half_width * sd
    hi = max(mu, anchor) + half_width * sd
    jlo = int(math.floor((lo - anchor) / h))
    jhi = int(math.ceil((hi - anchor) / h))
    x = anchor + h * np.arange(jlo, jhi + 1)
    return GridDensity.from_values(anchor + jlo * h, h, tm.density(x))


def _fft_power(values: np.ndarray, N: int) -> np.ndarray:
    L = N * (values.size - 1) + 1
    nfft = sfft.next_fast_len(L, real=True)
    spec = sfft.rfft(values, nfft)
    return sfft.irfft(spec ** N, nfft)[:L]


def sum_density(p: GridDensity, N: int) -> GridDensity:
    """Density of the N-fold sum on the lattice ``N*origin + k*h`` (full linear convolution)."""
    if N < 1:
        raise UsageError("N must be >= 1")
    if N == 1:
        return p
    vals = _fft_power(p.values, N) * p.h ** (N - 1)
    return GridDensity.from_values(N * p.origin, p.h, vals)


def convolve(f: GridDensity, g: GridDensity) -> GridDensity:
    """Density of the sum of two independent variables on a common spacing."""
    if not math.isclose(f.h, g.h, rel_tol=1e-12):
        raise UsageError("grid spacings differ")
    L = f.values.size + g.values.size - 1
    nfft = sfft.next_fast_len(L, real=True)
    vals = sfft.irfft(sfft.rfft(f.values, nfft) * sfft.rfft(g.values, nfft), nfft)[:L] * f.h
    return GridDensity.from_values(f.origin + g.origin, f.h, vals)


def standardize(g: GridDensity, center: float, scale: float) -> GridDensity:
    """Affine change of variable z = (x - center)/scale, renormalized to unit mass."""
    out = GridDensity((g.origin - center) / scale, g.h / scale, g.values * scale, 1.0)
    return out.normalized()


def convolve_power(p: GridDensity, N: int, mean: float | None = None,
                   sigma2: float | None = None) -> GridDensity:
    """Standardized density of sum_{i<N} (U_i - mean) / sqrt(N sigma2)."""
    if p.boundary_flag():
        raise NumericalError("single-site density touches the grid boundary; enlarge the grid")
    if mean is None or sigma2 is None:
        m, s2 = p.normalized().moments()
        mean = m if mean is None else mean
        sigma2 = s2 if sigma2 is None else sigma2
    g = sum_density(p.normalized(), N)
    return standardize(g, N * mean, math.sqrt(N * sigma2))


def llt_gap(potential: Potential, lam: float, N: int, h_rel: float = 1e-3) -> float:
    """sup over the grid of |f^N - r_N| for the two-term Edgeworth density r_N."""
    if N < 2:
        raise UsageError("N must be >= 2")
    pr = moments(potential, lam, 4)
    p = site_density(potential, lam, pr.rho_prime, h_rel)
    f = convolve_power(p, N, pr.rho_prime, pr.sigma2)
    ex = EdgeworthExpansion.from_profile(pr, N)
    return float(np.max(np.abs(f.values - ex.density(f.x))))


# -- canonical expectations ---------------------------------------------------

def _block_weights(F: LocalObservable, p: GridDensity):
    """Sum of F*prod p over sites, grouped by the lattice index of the block sum.

    Returns (H_F, H_1) indexed by m = sum of site indices (offset ell*jlo).
    """
    x, w = p.x, p.values * p.h
    if F.ell == 1:
        return np.asarray(F(x), dtype=float) * w, w.copy()
    if F.ell == 2:
        M = x.size
        vals = np.asarray(F(x[:, None], x[None, :]), dtype=float) * (w[:, None] * w[None, :])
        idx = (np.arange(M)[:, None] + np.arange(M)[None, :]).ravel()
        HF = np.bincount(idx, weights=vals.ravel(), minlength=2 * M - 1)
        H1 = np.convolve(w, w)
        return HF, H1
    raise UsageError("canonical_expectation supports ell in {1, 2}")


def _rest_density(p: GridDensity, K: int) -> np.ndarray:
    """Unnormalized lattice weights of the K-fold sum (delta at 0 for K=0)."""
    w = p.values * p.h
    if K == 0:
        return np.ones(1)
    return _fft_power(w, K) if K > 1 else w


class _Conditional:
    """Lattice model conditioned on the N-block sum, anchored at rho."""

    def __init__(self, potential, lam, rho, N, F: LocalObservable, h_rel):
        if N < F.ell:
            raise UsageError("need N >= ell")
        self.p = site_density(potential, lam, rho, h_rel)
        self.F = F
        self.N = N
        self.HF, self.H1 = _block_weights(F, self.p)
        self.rest = _rest_density(self.p, N - F.ell)
        M = self.p.values.size
        self.jlo = int(round((self.p.origin - rho) / self.p.h))
        self.ell = F.ell
        self.M = M

    def at_zero(self):
        """Numerator and denominator at total-sum index 0 (i.e. sum = N*rho)."""
        ell, N, jlo = self.ell, self.N, self.jlo
        m = np.arange(self.HF.size) + ell * jlo   # block-sum index
        r_idx = -m - (N - ell) * jlo              # rest index in its array
        ok = (r_idx >= 0) & (r_idx < self.rest.size)
        num = float(np.dot(self.HF[ok], self.rest[r_idx[ok]]))
        den = float(np.dot(self.H1[ok], self.rest[r_idx[ok]]))
        return num, den

    def full(self):
        """Numerator and denominator for every total-sum index."""
        if self.rest.size == 1:
            return self.HF.copy(), self.H1.copy()
        L = self.HF.size + self.rest.size - 1
        nfft = sfft.next_fast_len(L, real=True)
        R = sfft.rfft(self.rest, nfft)
        num = sfft.irfft(sfft.rfft(self.HF, nfft) * R, nfft)[:L]
        den = sfft.irfft(sfft.rfft(self.H1, nfft) * R, nfft)[:L]
        return num, den


def canonical_expectation(F: LocalObservable, spec: CanonicalSpec, N: int, lam0: float,
                          potential: Potential, lam_internal: float | None = None,
                          h_rel: float | None = None) -> float:
    """psi_F(N, rho) = E[F | mean of N sites = rho].

    ``lam_internal`` selects the tilt used to build the product weights; the
    result does not depend on it.
    """
    if spec.ell != F.ell:
        raise UsageError("observable block length does not match spec")
    if F.ell > 1 and F.ell > N / 2:
        raise UsageError("need ell <= N/2")
    if h_rel is None:
        h_rel = 1e-3 if F.ell == 1 else 2e-2
    lam = lam0 if lam_internal is None else lam_internal
    cond = _Conditional(potential, lam, spec.rho, N, F, h_rel)
    num, den = cond.at_zero()
    if den / cond.p.h < 1e-300:
        raise NumericalError("conditioning point out of range", rho=spec.rho, N=N)
    return num / den


@dataclass
class PhiDerivatives:
    phi: float
    dphi: float
    d2phi: float
    e_s: float   # E[F (S - ell rho)]
    e_s2: float  # E[F (S - ell rho)^2]


def phi_derivatives(F: LocalObservable, potential: Potential, lam0: float) -> PhiDerivatives:
    """phi_F(rho) = E_{h'(rho)}[F] and its first two rho-derivatives at rho'(lam0), in closed form."""
    pr = moments(potential, lam0, 3)
    s2, m3, rho, ell = pr.sigma2, pr.m3, pr.rho_prime, F.ell
    tm = tilted_measure(potential, float(lam0))
    x, w = tm.nodes, tm.pw
    if ell == 1:
        f = np.asarray(F(x), dtype=float)
        S = x - rho
        EF, ES, ES2 = np.dot(w, f), np.dot(w, f * S), np.dot(w, f * S * S)
    elif ell == 2:
        f = np.asarray(F(x[:, None], x[None, :]), dtype=float)
        W = w[:, None] * w[None, :]
        S = (x[:, None] - rho) + (x[None, :] - rho)
        EF, ES, ES2 = (W * f).sum(), (W * f * S).sum(), (W * f * S * S).sum()
    else:
        raise UsageError("phi_derivatives supports ell in {1, 2}")
    dphi = ES / s2
    d2phi = (ES2 / s2 - ell * EF - m3 / s2 ** 2 * ES) / s2
    return PhiDerivatives(float(EF), float(dphi), float(d2phi), float(ES), float(ES2))


def moment_expansion(F: LocalObservable, potential: Potential, lam0: float, N: int) -> float:
    """Second-order expansion written through E[F S] and E[F S^2]."""
    pr = moments(potential, lam0, 3)
    d = phi_derivatives(F, potential, lam0)
    s2, ell = pr.sigma2, F.ell
    return ((1 + ell / (2 * N)) * d.phi + pr.m3 / (2 * N * s2 ** 2) * d.e_s
            - d.e_s2 / (2 * N * s2))


def curvature_expansion(F: LocalObservable, potential: Potential, lam0: float, N: int) -> float:
    """Second-order expansion phi - sigma^2/(2N) d2phi."""
    pr = moments(potential, lam0, 2)
    d = phi_derivatives(F, potential, lam0)
    return d.phi - pr.sigma2 / (2 * N) * d.d2phi


@dataclass
class EquivalenceResidual:
    N: int
    pointwise: float
    l2: float
    psi: float
    phi: float
    d2phi: float


def equivalence_residual(F: LocalObservable, spec: CanonicalSpec, N: int, lam0: float,
                         potential: Potential, h_rel: float | None = None,
                         floor: float = 1e-10) -> EquivalenceResidual:
    """Pointwise residual psi - phi + sigma^2/(2N) d2phi at rho'(lam0), and the
    root-mean-square residual of the second-order expansion in the block mean,
    averaged over the exact law of the block mean under mu_lam0.

    ``spec.rho`` is ignored; the expansion point is always rho'(lam0).
    """
    pr = moments(potential, lam0, 3)
    rho0, s2 = pr.rho_prime, pr.sigma2
    d = phi_derivatives(F, potential, lam0)
    if h_rel is None:
        h_rel = 1e-3 if F.ell == 1 else 2e-2
    cond = _Conditional(potential, lam0, rho0, N, F, h_rel)
    num0, den0 = cond.at_zero()
    psi0 = num0 / den0
    pointwise = psi0 - d.phi + s2 / (2 * N) * d.d2phi

    num, den = cond.full()
    peak = den.max()
    keep = den >= floor * peak
    # total-sum lattice index k -> block mean rho0 + k*h/N
    k = np.arange(den.size) + N * cond.jlo
    rbar = rho0 + k * cond.p.h / N
    psi = np.zeros_like(den)
    psi[keep] = num[keep] / den[keep]
    dr = rbar - rho0
    res = psi - d.phi - d.dphi * dr - 0.5 * d.d2phi * (dr * dr - s2 / N)
    wts = np.where(keep, den, 0.0)
    l2 = math.sqrt(float(np.dot(wts, res * res) / wts.sum()))
    return EquivalenceResidual(N, float(pointwise), l2, float(psi0), d.phi, d.d2phi)


# -- canonical Metropolis sampler ----------------------------------------------

_QUANT = 2.0 ** -40


@dataclass
class SamplerResult:
    draws: np.ndarray      # (n_draws, ell) float
    width: float
    acceptance: float
    sums_exact: bool


def canonical_sampler(spec: CanonicalSpec, lam_ref: float, sweeps: int, rng: np.random.Generator,
                      potential: Potential, chains: int = 64, thin: int = 1,
                      warmup: int = 200, width: float | None = None) -> SamplerResult:
    """Metropolis-within-pairs sampler of the canonical measure on ``ell`` sites.

    The state is held as ``rho + q * 2**-40`` with integer ``q``, so the pair
    move (+d, -d) keeps sum(q) exactly zero.  The tilt cancels from the
    acceptance ratio; ``lam_ref`` only fixes the proposal scale.
    Returns ``sweeps // thin`` draws per chain after ``warmup`` sweeps.
    """
    ell, rho = spec.ell, float(spec.rho)
    q = np.zeros((chains, ell), dtype=np.int64)
    if ell == 1:
        n_keep = sweeps // thin
        draws = np.full((n_keep * chains, 1), rho)
        return SamplerResult(draws, 0.0, 0.0, True)
    if width is None:
        width = math.sqrt(moments(potential, lam_ref, 2).sigma2)
    rows = np.arange(chains)

    def step(w):
        i = rng.integers(0, ell, chains)
        j = (i + rng.integers(1, ell, chains)) % ell
        dq = np.rint(rng.uniform(-w, w, chains) / _QUANT).astype(np.int64)
        ui = rho + q[rows, i] * _QUANT
        uj = rho + q[rows, j] * _QUANT
        d = dq * _QUANT
        logr = potential(ui) + potential(uj) - potential(ui + d) - potential(uj - d)
        acc = np.log(rng.random(chains)) < logr
        q[rows[acc], i[acc]] += dq[acc]
        q[rows[acc], j[acc]] -= dq[acc]
        return acc.mean()

    # adaptive warm-up towards 30-50% acceptance, then the width is frozen
    for s in range(warmup):
        rate = np.mean([step(width) for _ in range(ell)])
        if s < warmup * 3 // 4:
            if rate < 0.3:
                width *= 0.8
            elif rate > 0.5:
                width *= 1.25
    out = []
    rates = []
    for s in range(sweeps):
        rates.append(np.mean([step(width) for _ in range(ell)]))
        if (s + 1) % thin == 0:
            out.append(rho + q * _QUANT)
    draws = np.concatenate(out, axis=0) if out else np.empty((0, ell))
    return SamplerResult(draws, float(width), float(np.mean(rates)) if rates else 0.0,
                         bool(np.all(q.sum(axis=1) == 0)))


@dataclass
class PoincareResult:
    variance: float
    dirichlet: float
    ratio: float
    constant: float      # ratio / ell^2
    infinite: bool


def poincare_ratio(F: LocalObservable, spec: CanonicalSpec, potential: Potential,
                   rng: np.random.Generator, lam_ref: float = 0.0, sweeps: int = 2000,
                   chains: int = 64, thin: int = 2) -> PoincareResult:
    """var(F) over the nearest-neighbour Dirichlet form (1/2) sum (d_i F - d_{i+1} F)^2.

    ``F.func`` takes the full ell-site state as an (n, ell) array and ``F.grad``
    returns the (n, ell) array of partial derivatives.
    """
    res = canonical_sampler(spec, lam_ref, sweeps, rng, potential, chains=chains, thin=thin)
    u = res.draws
    vals = np.asarray(F.func(u), dtype=float)
    var = float(np.var(vals))
    if F.grad is not None:
        g = np.asarray(F.grad(u), dtype=float)
    else:
        eps = 1e-6
        g = np.empty_like(u)
        for i in range(u.shape[1]):
            up, dn = u.copy(), u.copy()
            up[:, i] += eps
            dn[:, i] -= eps
            g[:, i] = (F.func(up) - F.func(dn)) / (2 * eps)
    dirichlet = float(np.mean(0.5 * np.sum((g[:, :-1] - g[:, 1:]) ** 2, axis=1)))
    var_tol = 1e-24 * max(1.0, float(np.mean(vals ** 2)))
    if dirichlet == 0.0:
        if var <= var_tol:
            return PoincareResult(var, 0.0, 0.0, 0.0, False)
        return PoincareResult(var, 0.0, math.inf, math.inf, True)
    ratio = var / dirichlet
    return PoincareResult(var, dirichlet, ratio, ratio / spec.ell ** 2, False)


def ensembles_table(potential: Potential, lam0: float, Ns, F: LocalObservable | None = None) -> list[dict]:
    """Rows with columns N, llt_gap, residual_pointwise, residual_L2."""
    if F is None:
        F = LocalObservable(potential.dV, 1, name="dV")
    rho0 = moments(potential, lam0, 2).rho_prime
    rows = []
    for N in Ns:
        r = equivalence_residual(F, CanonicalSpec(F.ell, rho0), int(N), lam0, potential)
        rows.append({"N": int(N), "llt_gap": llt_gap(potential, lam0, int(N)),
                     "residual_pointwise": r.pointwise, "residual_L2": r.l2})
    return rows
