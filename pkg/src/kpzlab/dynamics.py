"""Euler-Maruyama integration of the periodic weakly asymmetric gradient dynamics

    du(i) = [ 1/2 Lap V'(u)(i) + alpha Grad2 V'(u)(i) ] dt + dW(i+1) - dW(i)

in the height-difference variables, plus the diagnostics that go with it:
stationarity, time reversal and a coupled periodic-refinement test.

States are arrays whose last axis is the site index; leading axes are
independent replicas.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numba
import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import BlowUpError, UsageError
from .potentials import CODE_QUADRATIC, CODE_SINE, CODE_TANH, CODE_USER, Potential
from .seeding import SeedStream
from .thermo import moments, tilted_measure

# -- discrete operators --------------------------------------------------------


def lap_D(f):
    """f(i+1) + f(i-1) - 2 f(i), periodic along the last axis."""
    return np.roll(f, -1, axis=-1) + np.roll(f, 1, axis=-1) - 2.0 * f


def grad1_D(f):
    """f(i+1) - f(i), periodic."""
    return np.roll(f, -1, axis=-1) - f


def grad2_D(f):
    """(f(i+1) - f(i-1)) / 2, periodic."""
    return 0.5 * (np.roll(f, -1, axis=-1) - np.roll(f, 1, axis=-1))


def lap_n(eta, n, x):
    return n * n * (eta(x + 1.0 / n) + eta(x - 1.0 / n) - 2.0 * eta(x))


def grad1_n(eta, n, x):
    return n * (eta(x + 1.0 / n) - eta(x))


def grad2_n(eta, n, x):
    return 0.5 * n * (eta(x + 1.0 / n) - eta(x - 1.0 / n))


_LATTICE_OPS = {"lap": lap_D, "grad1": grad1_D, "grad2": grad2_D}
_SCALED_OPS = {"lap": lap_n, "grad1": grad1_n, "grad2": grad2_n}


def apply_discrete_op(op: str, f, i: int, periodic: bool = True) -> float:
    """Value of a lattice operator at site ``i``.

    With ``periodic=False`` the array is read as f(0..N-1) without wrap and
    ``i`` must be an interior site.
    """
    if op not in _LATTICE_OPS:
        raise UsageError(f"unknown operator {op!r}")
    f = np.asarray(f, dtype=float)
    N = f.shape[-1]
    if periodic:
        ip, im = (i + 1) % N, (i - 1) % N
    else:
        if not 0 < i < N - 1:
            raise UsageError("non-periodic evaluation needs an interior site")
        ip, im = i + 1, i - 1
    if op == "lap":
        return float(f[ip] + f[im] - 2.0 * f[i])
    if op == "grad1":
        return float(f[ip] - f[i])
    return float(0.5 * (f[ip] - f[im]))


def apply_scaled_op(op: str, eta, n: int, x):
    """Mesh-1/n operators on a real function ``eta``."""
    if op not in _SCALED_OPS:
        raise UsageError(f"unknown operator {op!r}")
    return _SCALED_OPS[op](eta, n, np.asarray(x, dtype=float))


# -- state ---------------------------------------------------------------------


@dataclass
class LatticeState:
    u: np.ndarray
    alpha: float
    potential: Potential
    lam0: float = 0.0
    time: float = 0.0
    steps: int = 0

    @property
    def n_sites(self) -> int:
        return self.u.shape[-1]

    def copy(self) -> "LatticeState":
        return replace(self, u=self.u.copy())


def drift(state: LatticeState) -> np.ndarray:
    vp = state.potential.dV(state.u)
    return 0.5 * lap_D(vp) + state.alpha * grad2_D(vp)


def em_step(state: LatticeState, dt: float, rng: np.random.Generator) -> LatticeState:
    """One Euler-Maruyama step driven by one standard normal per site."""
    if not dt > 0:
        raise UsageError("dt must be positive")
    xi = rng.standard_normal(state.u.shape)
    u = state.u + drift(state) * dt + grad1_D(xi) * math.sqrt(dt)
    if not np.all(np.isfinite(u)):
        raise BlowUpError("non-finite lattice state", step=state.steps + 1)
    return replace(state, u=u, time=state.time + dt, steps=state.steps + 1)


# -- compiled kernels ----------------------------------------------------------


@numba.njit(cache=True, inline="always")
def _dv(code, a, b, x):
    if code == 0:
        return a * x
    if code == 1:
        return a * x + b * math.cos(x)
    t = math.tanh(x)
    return a * x + b * (1.0 - t * t)


@numba.njit(cache=True, nogil=True)
def _step_kernel(u, xi, code, a, b, alpha, dt, u_out, vp):
    R, N = u.shape
    sq = math.sqrt(dt)
    for r in range(R):
        for i in range(N):
            vp[r, i] = _dv(code, a, b, u[r, i])
        for i in range(N):
            ip = i + 1 if i + 1 < N else 0
            im = i - 1 if i > 0 else N - 1
            d = 0.5 * (vp[r, ip] + vp[r, im] - 2.0 * vp[r, i]) + alpha * 0.5 * (vp[r, ip] - vp[r, im])
            u_out[r, i] = u[r, i] + d * dt + (xi[r, ip] - xi[r, i]) * sq


@numba.njit(cache=True, nogil=True)
def _chunk_kernel(u, xi, nsteps, code, a, b, alpha, dt):
    """Advance ``u`` in place by ``nsteps`` steps using xi[s, r, :]."""
    R, N = u.shape
    sq = math.sqrt(dt)
    vp = np.empty(N)
    for r in range(R):
        for s in range(nsteps):
            for i in range(N):
                vp[i] = _dv(code, a, b, u[r, i])
            for i in range(N):
                ip = i + 1 if i + 1 < N else 0
                im = i - 1 if i > 0 else N - 1
                d = 0.5 * (vp[ip] + vp[im] - 2.0 * vp[i]) + alpha * 0.5 * (vp[ip] - vp[im])
                u[r, i] += d * dt + (xi[s, r, ip] - xi[s, r, i]) * sq


def _step_numpy(potential, u, xi, alpha, dt):
    vp = potential.dV(u)
    d = 0.5 * lap_D(vp) + alpha * grad2_D(vp)
    return u + d * dt + grad1_D(xi) * math.sqrt(dt), vp


class Integrator:
    """Batched Euler-Maruyama driver for R independent replicas.

    Replica r draws its noise from its own generator in blocks of ``chunk``
    steps, so trajectories do not depend on how replicas are grouped.
    """

    def __init__(self, potential: Potential, alpha: float, dt: float, generators, chunk: int = 64):
        if not dt > 0:
            raise UsageError("dt must be positive")
        self.potential = potential
        self.alpha = float(alpha)
        self.dt = float(dt)
        self.gens = list(generators)
        self.chunk = int(chunk)
        self._buf = None
        self._pos = 0
        self.steps = 0
        self.compiled = potential.code != CODE_USER

    @property
    def replicas(self) -> int:
        return len(self.gens)

    def _refill(self, n_sites):
        C, R = self.chunk, self.replicas
        buf = np.empty((C, R, n_sites))
        for r, g in enumerate(self.gens):
            buf[:, r, :] = g.standard_normal((C, n_sites))
        self._buf, self._pos = buf, 0

    def noise(self, n_sites: int, nsteps: int) -> np.ndarray:
        """Next ``nsteps`` noise arrays, shape (nsteps, R, N)."""
        out = np.empty((nsteps, self.replicas, n_sites))
        k = 0
        while k < nsteps:
            if self._buf is None or self._pos >= self.chunk:
                self._refill(n_sites)
            take = min(nsteps - k, self.chunk - self._pos)
            out[k:k + take] = self._buf[self._pos:self._pos + take]
            self._pos += take
            k += take
        return out

    def _check(self, u):
        if not np.all(np.isfinite(u)):
            raise BlowUpError("non-finite lattice state", step=self.steps)

    def step(self, u: np.ndarray, xi: np.ndarray | None = None):
        """One step; returns (u_new, V'(u_old), xi)."""
        if xi is None:
            xi = self.noise(u.shape[-1], 1)[0]
        if self.compiled:
            p = self.potential
            u_new = np.empty_like(u)
            vp = np.empty_like(u)
            _step_kernel(u, xi, p.code, p.a, p.b, self.alpha, self.dt, u_new, vp)
        else:
            u_new, vp = _step_numpy(self.potential, u, xi, self.alpha, self.dt)
        self.steps += 1
        return u_new, vp, xi

    def advance(self, u: np.ndarray, nsteps: int, check_every: int = 1024) -> np.ndarray:
        """Advance a copy of ``u`` (shape (R, N)) by ``nsteps`` steps."""
        u = np.array(u, dtype=float, copy=True)
        done = 0
        while done < nsteps:
            take = min(self.chunk, nsteps - done)
            xi = self.noise(u.shape[-1], take)
            if self.compiled:
                p = self.potential
                _chunk_kernel(u, xi, take, p.code, p.a, p.b, self.alpha, self.dt)
            else:
                for s in range(take):
                    u, _ = _step_numpy(self.potential, u, xi[s], self.alpha, self.dt)
            done += take
            self.steps += take
            if done % check_every < take or done == nsteps:
                self._check(u)
        return u


# -- stationary sampling -------------------------------------------------------


@lru_cache(maxsize=64)
def _inverse_cdf(potential: Potential, lam: float, points: int = 40001):
    tm = tilted_measure(potential, lam)
    lo, hi = tm.interval()
    x = np.linspace(lo, hi, points)
    p = tm.density(x)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(x))])
    cdf /= cdf[-1]
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    return PchipInterpolator(cdf[keep], x[keep], extrapolate=False), (x, cdf)


def grid_cdf(potential: Potential, lam: float):
    """Tabulated CDF on the quadrature interval, as (x, F(x))."""
    return _inverse_cdf(potential, float(lam))[1]


def sample_stationary(n_sites: int, lam: float, rng: np.random.Generator, potential: Potential,
                      replicas: int | None = None, alpha: float = 0.0) -> LatticeState:
    """I.i.d. draws from p_lam by monotone inverse-CDF interpolation."""
    inv, _ = _inverse_cdf(potential, float(lam))
    shape = (n_sites,) if replicas is None else (replicas, n_sites)
    u = inv(rng.random(shape))
    return LatticeState(np.asarray(u, dtype=float), alpha, potential, float(lam))


def sample_replicas(n_sites: int, lam: float, generators, potential: Potential) -> np.ndarray:
    """(R, n_sites) stationary states, one generator per replica."""
    inv, _ = _inverse_cdf(potential, float(lam))
    return np.stack([inv(g.random(n_sites)) for g in generators])


# -- diagnostics ---------------------------------------------------------------


@dataclass
class DynamicsConfig:
    potential: Potential
    lam0: float = 0.0
    alpha: float = 0.0
    n_sites: int = 256
    T: float = 10.0
    dt: float = 1e-3
    replicas: int = 200
    seed: int = 0
    bias: bool = False
    bias_replicas: int = 64
    chunk: int = 64


def _moment_stats(u, mean):
    d = u - mean
    feats = [np.mean(u ** k, axis=-1) for k in range(1, 5)]
    feats.append(np.mean(d * np.roll(d, -1, axis=-1), axis=-1))
    return np.stack(feats, axis=-1)   # (R, 5)


MOMENT_NAMES = ("m1", "m2", "m3", "m4", "nn_cov")


def _z(diff):
    diff = np.asarray(diff, dtype=float)
    se = diff.std(axis=0, ddof=1) / math.sqrt(diff.shape[0])
    mean = diff.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, mean / se, 0.0)
    return mean, se, z


def _coupled_levels(potential, alpha, dt, u0, nsteps, gens, levels=3):
    """Final second moments at dt, dt/2, dt/4 driven by one Brownian path."""
    fine = 2 ** (levels - 1)
    R = u0.shape[0]
    us = [u0.copy() for _ in range(levels)]
    ints = [Integrator(potential, alpha, dt / 2 ** l, []) for l in range(levels)]
    for s in range(nsteps):
        zf = np.stack([g.standard_normal((fine, u0.shape[1])) for g in gens], axis=1)  # (fine, R, N)
        for l in range(levels):
            m = 2 ** l
            group = fine // m
            z = zf.reshape(m, group, R, -1).sum(axis=1) / math.sqrt(group)
            for k in range(m):
                us[l], _, _ = ints[l].step(us[l], z[k])
    return [np.mean(u ** 2, axis=-1) for u in us]


def stationarity_report(cfg: DynamicsConfig) -> dict:
    """Paired z-scores of site moments 1-4 and neighbour covariance between times 0 and T."""
    pot = cfg.potential
    gens = [SeedStream(cfg.seed, r, "stationarity").generator() for r in range(cfg.replicas)]
    u0 = sample_replicas(cfg.n_sites, cfg.lam0, gens, pot)
    nsteps = int(round(cfg.T / cfg.dt))
    integ = Integrator(pot, cfg.alpha, cfg.dt, gens, cfg.chunk)
    uT = integ.advance(u0, nsteps)
    pr = moments(pot, cfg.lam0, 4)
    f0, fT = _moment_stats(u0, pr.rho_prime), _moment_stats(uT, pr.rho_prime)
    mean, se, z = _z(fT - f0)
    exact = np.array([pr.rho_prime,
                      pr.sigma2 + pr.rho_prime ** 2,
                      pr.m3 + 3 * pr.rho_prime * pr.sigma2 + pr.rho_prime ** 3,
                      pr.m4 + 4 * pr.rho_prime * pr.m3 + 6 * pr.rho_prime ** 2 * pr.sigma2 + pr.rho_prime ** 4,
                      0.0])
    _, se_T, _ = _z(fT)
    with np.errstate(divide="ignore", invalid="ignore"):
        z_exact = (fT.mean(axis=0) - exact) / se_T
    report = {
        "alpha": cfg.alpha, "T": cfg.T, "dt": cfg.dt, "replicas": cfg.replicas, "n_sites": cfg.n_sites,
        "names": list(MOMENT_NAMES),
        "diff_mean": mean.tolist(), "diff_se": se.tolist(), "z_paired": z.tolist(),
        "z_exact": z_exact.tolist(),
        "passed": bool(np.all(np.abs(z) <= 3.0) and np.all(np.abs(z_exact[1:]) <= 3.0)),
    }
    if cfg.bias:
        report["bias"] = dt_bias(cfg)
    return report


def dt_bias(cfg: DynamicsConfig) -> dict:
    """Richardson ratio (m(dt) - m(dt/2)) / (m(dt/2) - m(dt/4)) for the second site moment.

    The first moment is conserved exactly by the scheme, so the second moment
    carries the weak-order signal.  A ratio near 2 indicates weak order one.
    """
    gens = [SeedStream(cfg.seed, r, "dt-bias").generator() for r in range(cfg.bias_replicas)]
    u0 = sample_replicas(cfg.n_sites, cfg.lam0, gens, cfg.potential)
    nsteps = int(round(cfg.T / cfg.dt))
    m = _coupled_levels(cfg.potential, cfg.alpha, cfg.dt, u0, nsteps, gens)
    b1, b2 = m[0] - m[1], m[1] - m[2]
    mb1, sb1, _ = _z(b1[:, None])
    mb2, sb2, _ = _z(b2[:, None])
    ratio = float(mb1[0] / mb2[0]) if mb2[0] != 0 else math.inf
    return {"bias_dt": float(mb1[0]), "bias_dt_se": float(sb1[0]),
            "bias_dt2": float(mb2[0]), "bias_dt2_se": float(sb2[0]), "ratio": ratio}


def conservation_report(potential: Potential, lam0: float = 0.5, n_sites: int = 1024,
                        nsteps: int = 10 ** 6, dt: float = 1e-3, alpha: float = 0.0,
                        seed: int = 0, chunk: int = 256) -> dict:
    """Drift of sum(u) over a long single-replica run, plus noise-increment statistics.

    The increments d(i) = (xi(i+1) - xi(i)) sqrt(dt) are read from the same
    buffers the integrator consumes.  Their variance (target 2 dt) and
    nearest-neighbour covariance (target -dt) get batch-means standard errors,
    one batch per chunk of steps.
    """
    gen = SeedStream(seed, 0, "conservation").generator()
    u = sample_replicas(n_sites, lam0, [gen], potential)
    integ = Integrator(potential, alpha, dt, [gen], chunk)
    s0 = math.fsum(u[0])
    scale = math.fsum(np.abs(u[0]))
    sq = math.sqrt(dt)
    var_b, cov_b = [], []
    done = 0
    p = potential
    while done < nsteps:
        take = min(chunk, nsteps - done)
        xi = integ.noise(n_sites, take)
        if integ.compiled:
            _chunk_kernel(u, xi, take, p.code, p.a, p.b, alpha, dt)
        else:
            for k in range(take):
                u, _ = _step_numpy(p, u, xi[k], alpha, dt)
        d = (np.roll(xi, -1, axis=-1) - xi) * sq
        var_b.append(float(np.mean(d * d)))
        cov_b.append(float(np.mean(d * np.roll(d, -1, axis=-1))))
        done += take
    integ._check(u)
    drift = abs(math.fsum(u[0]) - s0)
    out = {"n_sites": n_sites, "steps": nsteps, "dt": dt, "sum_initial": s0, "abs_drift": drift,
           "relative_drift": drift / scale}
    for name, vals, target in (("noise_var", var_b, 2 * dt), ("noise_nn_cov", cov_b, -dt)):
        v = np.asarray(vals)
        se = float(v.std(ddof=1) / math.sqrt(len(v)))
        out[name] = float(v.mean())
        out[name + "_se"] = se
        out[name + "_z"] = float((v.mean() - target) / se)
    return out


@dataclass
class ReversalConfig:
    potential: Potential
    lam0: float = 0.0
    alpha: float = 0.3
    n_sites: int = 64
    T: float = 1.0
    dt: float = 1e-2
    replicas: int = 400
    seed: int = 0
    f_site: int = 0
    g_site: int = 1
    chunk: int = 64


def reversal_report(cfg: ReversalConfig, F=None, G=None) -> dict:
    """E[F(u_0) G(u_T)] under +alpha against E[G(u_0) F(u_T)] under -alpha.

    Both runs share initial states and noise.  F and G default to the site
    values at ``f_site`` and ``g_site``; the estimate is averaged over all
    lattice translations.
    """
    pot = cfg.potential
    R, N = cfg.replicas, cfg.n_sites
    gens_a = [SeedStream(cfg.seed, r, "reversal").generator() for r in range(R)]
    gens_b = [SeedStream(cfg.seed, r, "reversal").generator() for r in range(R)]
    u0 = sample_replicas(N, cfg.lam0, gens_a, pot)
    for g in gens_b:
        g.random(N)  # keep the two noise streams aligned
    nsteps = int(round(cfg.T / cfg.dt))
    uf = Integrator(pot, cfg.alpha, cfg.dt, gens_a, cfg.chunk).advance(u0, nsteps)
    ub = Integrator(pot, -cfg.alpha, cfg.dt, gens_b, cfg.chunk).advance(u0, nsteps)
    rho = moments(pot, cfg.lam0, 2).rho_prime
    if F is None:
        F = lambda u: np.roll(u, -cfg.f_site, axis=-1) - rho
    if G is None:
        G = lambda u: np.roll(u, -cfg.g_site, axis=-1) - rho
    fwd = np.mean(F(u0) * G(uf), axis=-1)
    bwd = np.mean(G(u0) * F(ub), axis=-1)
    mean, se, z = _z((fwd - bwd)[:, None])
    return {"alpha": cfg.alpha, "T": cfg.T, "forward": float(fwd.mean()), "backward": float(bwd.mean()),
            "difference": float(mean[0]), "se": float(se[0]), "z": float(z[0]),
            "passed": bool(abs(z[0]) <= 3.0)}


def weighted_norm(u, r: float, center: int | None = None) -> float:
    """(sum_j |u(j)|^2 |j|^{-r})^{1/2} with |0|^{-r} := 1; site j sits at index center + j."""
    u = np.asarray(u, dtype=float)
    if center is None:
        center = u.shape[-1] // 2
    j = np.abs(np.arange(u.shape[-1]) - center).astype(float)
    w = np.where(j == 0, 1.0, np.power(np.maximum(j, 1.0), -r))
    return float(math.sqrt(np.sum(w * u * u)))


@dataclass
class RefinementConfig:
    potential: Potential = field(default_factory=Potential.quadratic)
    lam0: float = 0.0
    sizes: tuple = (128, 256, 512, 1024)
    T: float = 20.0
    dt: float = 1e-2
    r_prime: float = 2.0
    seed: int = 0
    record_every: int = 10


def periodic_refinement_test(cfg: RefinementConfig) -> dict:
    """Cauchy-type check of periodic approximations on growing lattices.

    Sites are labelled j in [-N/2, N/2).  The largest lattice carries an
    i.i.d. stationary initial state and noise; smaller lattices use the
    restriction of both to their window, extended periodically.  Reported:
    sup over recorded times of ||u_N - u_2N||_{r'} on the window of u_N.
    """
    sizes = sorted(cfg.sizes)
    big = sizes[-1]
    rng = SeedStream(cfg.seed, 0, "refinement").generator()
    u0_big = sample_stationary(big, cfg.lam0, rng, cfg.potential).u
    nsteps = int(round(cfg.T / cfg.dt))

    def window(arr, N):
        c = arr.shape[-1] // 2
        return arr[..., c - N // 2: c + N // 2]

    states = {N: window(u0_big, N)[None, :].copy() for N in sizes}
    integ = {N: Integrator(cfg.potential, 0.0, cfg.dt, []) for N in sizes}
    sup = {N: 0.0 for N in sizes[:-1]}
    for s in range(nsteps):
        xi = rng.standard_normal(big)
        for N in sizes:
            states[N], _, _ = integ[N].step(states[N], window(xi, N)[None, :])
        if (s + 1) % cfg.record_every == 0 or s + 1 == nsteps:
            for a, b in zip(sizes[:-1], sizes[1:]):
                diff = states[a][0] - window(states[b][0], a)
                sup[a] = max(sup[a], weighted_norm(diff, cfg.r_prime, a // 2))
    vals = [sup[N] for N in sizes[:-1]]
    return {"sizes": sizes[:-1], "sup_diff": vals,
            "decreasing": bool(all(x > y for x, y in zip(vals[:-1], vals[1:]))),
            "note": "N versus 2N coupled comparison; a Cauchy surrogate for the infinite-volume limit"}


# -- checkpoints ---------------------------------------------------------------

_MAGIC = b"GLCK"
_HEADER = struct.Struct("<4sIqdddidd")


def write_checkpoint(path, state: LatticeState, dt: float) -> None:
    """Flat binary layout: header then raw little-endian doubles."""
    u = np.ascontiguousarray(state.u, dtype="<f8").ravel()
    p = state.potential
    a = p.a if p.family != "user" else float("nan")
    head = _HEADER.pack(_MAGIC, 1, state.n_sites, dt, state.alpha, state.lam0, p.code, a, p.b)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(head)
        fh.write(struct.pack("<q", u.size))
        fh.write(u.tobytes())
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[LatticeState, float]:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, n_sites, dt, alpha, lam0, code, a, b = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC or version != 1:
        raise UsageError("not a lattice checkpoint")
    off = _HEADER.size
    (size,) = struct.unpack_from("<q", raw, off)
    u = np.frombuffer(raw, dtype="<f8", count=size, offset=off + 8).astype(float)
    if size != n_sites:
        u = u.reshape(-1, n_sites)
    if code == CODE_QUADRATIC:
        pot = Potential.quadratic(a)
    elif code in (CODE_SINE, CODE_TANH):
        pot = Potential.perturbed(a, b, "sine" if code == CODE_SINE else "tanh")
    else:
        raise UsageError("checkpoint holds a user potential; rebuild it explicitly")
    return LatticeState(u, alpha, pot, lam0), dt
