import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from kpzlab import fluctuation as fl
from kpzlab.errors import ConfigError, NumericalError, UsageError
from kpzlab.potentials import Potential
from kpzlab.seeding import SeedStream

GAUSS = fl.TestFunction("gaussian", 0.0, 0.25)
HERM1 = fl.TestFunction("hermite", 0.0, 0.25, 1)


@pytest.mark.parametrize("eta", [GAUSS, HERM1, fl.TestFunction("hermite", 0.3, 0.5, 4)])
def test_norms_against_quadrature(eta):
    f = lambda x: eta(x) ** 2
    g = lambda x: eta.grad(x) ** 2
    lo, hi = eta.center - 20 * eta.width, eta.center + 20 * eta.width
    assert eta.l2_sq == pytest.approx(integrate.quad(f, lo, hi, limit=200)[0], rel=1e-10)
    assert eta.grad_l2_sq == pytest.approx(integrate.quad(g, lo, hi, limit=200)[0], rel=1e-10)
    assert fl.inner(eta, eta) == pytest.approx(eta.l2_sq, rel=1e-8)


@pytest.mark.parametrize("eta", [GAUSS, fl.TestFunction("hermite", 0.1, 0.4, 3)])
def test_derivatives_finite_difference(eta):
    x = np.linspace(-1, 1, 41)
    h = 1e-5
    np.testing.assert_allclose(eta.grad(x), (eta(x + h) - eta(x - h)) / (2 * h), atol=1e-6)
    h = 1e-4
    np.testing.assert_allclose(eta.lap(x), (eta(x + h) - 2 * eta(x) + eta(x - h)) / h ** 2, atol=1e-3)


def test_hermite_orthonormal():
    a = fl.TestFunction("hermite", 0.0, 0.7, 2)
    b = fl.TestFunction("hermite", 0.0, 0.7, 3)
    assert abs(fl.inner(a, b)) < 1e-10
    assert fl.inner(a, a) / 0.7 == pytest.approx(1.0, rel=1e-9)


def test_test_function_validation_and_specs():
    with pytest.raises(UsageError):
        fl.TestFunction("box")
    with pytest.raises(UsageError):
        fl.TestFunction(width=0.0)
    eta = fl.TestFunction("hermite", 0.5, 0.2, 2)
    assert fl.TestFunction.from_spec(eta.to_spec()) == eta
    assert eta.shifted(0.25).center == 0.75
    assert GAUSS.decay_constant() < math.inf
    assert GAUSS.support_halfwidth() == pytest.approx(0.25 * math.sqrt(2 * math.log(1e16)), abs=2e-3)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2 ** 31))
def test_quadratic_field_against_loop(ell, seed):
    u = np.random.default_rng(seed).standard_normal((2, 23))
    Q = fl.QuadraticField(ell, 0.1, 1.3)(u)
    for r in range(2):
        for k in range(23):
            blk = np.mean([u[r, (k + j) % 23] for j in range(ell)])
            assert Q[r, k] == pytest.approx((blk - 0.1) ** 2 - 1.3 / ell, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([8, 16, 32]), st.sampled_from([0.25, 0.5]), st.integers(0, 2 ** 31))
def test_two_routes_for_quadratic_field(n, delta, seed):
    u = np.random.default_rng(seed).standard_normal((3, 64)) + 0.2
    a = fl.QuadraticField(int(delta * n), 0.2, 1.1)(u)
    b = fl.mollified_square(u, n, delta, 0.2, 1.1)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_frame_and_field_eval():
    frame = fl.make_frame(16, (GAUSS,), 1.0, 0.01)
    assert frame.c_n == 4.0
    assert frame.n_sites == fl.lattice_size(16, (GAUSS,), 1.0, 0.01)
    u = np.full(frame.n_sites, 0.3)
    assert fl.field_eval(u, GAUSS, 16, 0.0, 0.3, 1.0, offset=frame.offset) == 0.0
    with pytest.raises(ConfigError):
        fl.make_frame(16, (GAUSS,), 1.0, 0.01, n_sites=16)
    with pytest.raises(ConfigError):
        fl.field_eval(np.ones(8), GAUSS, 16, 0.0, 0.0, 1.0, offset=4)


def test_finite_n_variance_limit():
    frame = fl.make_frame(256, (GAUSS,), 1.0, 0.0)
    assert fl.finite_n_variance(GAUSS, frame, 0.0, 2.0) == pytest.approx(2 * GAUSS.l2_sq, rel=1e-10)


@pytest.fixture(scope="module")
def small_trace():
    pot = Potential.perturbed()
    cfg = fl.ScalingConfig(pot, 0.0, 8, 0.05, 0.05, (GAUSS, HERM1), delta=0.5, records=40,
                           replicas=16, seed=1)
    return cfg, fl.run_scaling(cfg)


def test_sam_identity_small_run(small_trace):
    _, tr = small_trace
    assert tr.identity_error().max() < 1e-9
    assert tr.nonlinearity_identity_error().max() < 1e-9
    assert tr.v.shape == (len(tr.times), 16, 2)
    assert np.all(tr.M[0] == 0) and np.all(tr.qv_real[0] == 0)
    nl = fl.nonlinearity_estimate(tr)
    assert nl.identity_error.max() < 1e-9
    assert nl.mean().shape == (len(tr.times), 2)


def test_qv_prediction_matches_quadrature(small_trace):
    cfg, tr = small_trace
    frame = fl.make_frame(cfg.n, cfg.etas, tr.meta["sigma2"], cfg.T)
    for i, eta in enumerate(cfg.etas):
        assert tr.qv_pred[-1, i] == pytest.approx(fl.qv_quadrature(eta, frame, tr.times[-1]), rel=1e-3)


def test_replica_split_reproduces_full_run(small_trace):
    cfg, tr = small_trace
    parts = [fl.run_scaling(fl.ScalingConfig(**{**cfg.__dict__, "replicas": 8}), replica_offset=o)
             for o in (0, 8)]
    merged = fl.FluctuationTrace.merge(parts)
    np.testing.assert_array_equal(merged.v, tr.v)
    np.testing.assert_array_equal(merged.A, tr.A)


def test_energy_residual_sign(small_trace):
    _, tr = small_trace
    er = fl.energy_residual(tr)
    assert er.coefficient == pytest.approx(0.5 * tr.meta["d2phi"])
    np.testing.assert_allclose(er.R - er.R_opposite, 2 * er.coefficient * tr.nl)
    ms, se = er.mean_square()
    assert ms.shape == (len(tr.times), 2) and np.all(se >= 0)
    assert er.sup_mean_square().shape == (2,)


def test_nonlinearity_tolerance_violation(small_trace):
    _, tr = small_trace
    bad = fl.FluctuationTrace(**{**tr.__dict__, "nl_moll": tr.nl_moll * 1.01})
    with pytest.raises(NumericalError):
        fl.nonlinearity_estimate(bad)


def test_bg_quadratic_is_zero():
    pot = Potential.quadratic()
    r1 = fl.bg1_residual(pot, 8, 0.02, GAUSS, 4, seed=2)
    r2 = fl.bg2_residual(pot, 8, 0.5, 0.02, GAUSS, 4, seed=2)
    assert np.all(r1.estimate == 0) and np.all(r2.estimate == 0)
    assert r1.ell == math.floor(8 * math.sqrt(r1.T)) and r2.ell == 4


def test_bg_bound_dominates(small_trace):
    _, tr = small_trace
    pot = Potential.perturbed()
    for res in (fl.bg1_from_trace(tr, pot), fl.bg2_from_trace(tr, pot)):
        assert np.all(res.bound > 0)
        assert np.all(res.ratio < 1)


def test_sup_variance():
    assert fl.sup_variance(Potential.quadratic(), lambda u: u) == pytest.approx(1.0, abs=1e-10)
    pert = Potential.perturbed()
    assert fl.sup_variance(pert, pert.dV) > 1.0


def test_white_noise_stats():
    rng = np.random.default_rng(0)
    etas = (GAUSS, GAUSS.shifted(0.1))
    cov = np.array([[1.0, 0.5], [0.5, 1.0]]) * 2 * GAUSS.l2_sq
    x = rng.multivariate_normal([0, 0], cov, size=4000)
    rep = fl.white_noise_stats(x, etas, 2.0, pairs=[(0, 1)])
    assert abs(rep.per_eta[0].ratio_z) < 4
    assert rep.per_eta[0].var_ratio_se == pytest.approx(math.sqrt(2 / 4000), rel=0.15)
    assert rep.pairs[0].target == pytest.approx(2 * fl.inner(*etas), rel=1e-9)
    with pytest.raises(UsageError):
        fl.white_noise_stats(x[:10], etas, 2.0)


def test_russo_vallois_brownian_and_smooth():
    rng = np.random.default_rng(3)
    t = np.linspace(0, 1, 4097)
    w = np.concatenate([[0.0], np.cumsum(rng.standard_normal(4096) * math.sqrt(t[1]))])
    h = t[1]
    rv = fl.russo_vallois_qv(w, t, [h, 2 * h, 4 * h])
    assert rv.horizon == pytest.approx(1 - 4 * h)
    np.testing.assert_allclose(rv.values, rv.horizon, rtol=0.1)
    smooth = fl.russo_vallois_qv(np.sin(t), t, [8 * h, 16 * h, 32 * h, 64 * h])
    assert smooth.slope() == pytest.approx(1.0, abs=0.05)


def test_russo_vallois_rejects_bad_grids():
    t = np.linspace(0, 1, 11)
    with pytest.raises(UsageError):
        fl.russo_vallois_qv(t, t, [0.05])
    with pytest.raises(UsageError):
        fl.russo_vallois_qv(t, t, [0.15])
    with pytest.raises(UsageError):
        fl.russo_vallois_qv(t, t ** 2, [0.1])
    with pytest.raises(UsageError):
        fl.russo_vallois_qv(t, t, [1.0])


def test_martingale_increments_centered(small_trace):
    _, tr = small_trace
    z = fl.martingale_increment_z(tr)
    assert z.shape == (len(tr.times) - 1, 2)
    assert np.mean(np.abs(z) < 3.5) > 0.95


def test_trace_rows(small_trace):
    _, tr = small_trace
    rows = fl.trace_rows(tr)
    assert len(rows) == 2 * len(tr.times)
    assert list(rows[0]) == ["n", "t", "eta_id", "v", "S", "A", "M", "qv_M", "nonlin", "energy_residual"]


def test_delta_must_fit_lattice():
    with pytest.raises(UsageError):
        fl.run_scaling(fl.ScalingConfig(Potential.quadratic(), n=8, T=0.01, delta=0.3, replicas=1))
