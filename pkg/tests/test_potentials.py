import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kpzlab.errors import UsageError
from kpzlab.potentials import Potential, eval as veval, validate_assumption_v


def test_quadratic_values(quad):
    assert veval(quad, 2.0, 0) == 2.0
    assert veval(quad, 2.0, 1) == 2.0
    assert veval(quad, 2.0, 2) == 1.0


def test_perturbed_derivative_at_zero(pert):
    assert veval(pert, 0.0, 1) == pytest.approx(0.3, abs=1e-15)


@given(st.floats(-50, 50))
def test_quadratic_force_is_odd(u):
    q = Potential.quadratic()
    assert veval(q, -u, 1) == -veval(q, u, 1)


def test_eval_rejects_bad_order(quad):
    with pytest.raises(UsageError):
        veval(quad, 1.0, 3)


@pytest.mark.parametrize("pot", [Potential.quadratic(), Potential.perturbed(), Potential.perturbed(shape="tanh")])
def test_finite_difference_consistency(pot):
    u = np.linspace(-10, 10, 401)
    h = 1e-5
    for order in (0, 1):
        fd = (veval(pot, u + h, order) - veval(pot, u - h, order)) / (2 * h)
        exact = veval(pot, u, order + 1)
        assert np.all(np.abs(fd - exact) <= 1e-6 * np.maximum(1.0, np.abs(exact)))


def test_validation_quadratic(quad):
    rep = validate_assumption_v(quad)
    assert rep.passed
    assert rep.C == pytest.approx(1.0)
    assert rep.lipschitz == pytest.approx(1.0)


def test_validation_perturbed(pert):
    rep = validate_assumption_v(pert)
    assert rep.passed
    assert rep.C == pytest.approx(1.0)
    assert rep.sup_d2psi == pytest.approx(0.3, rel=1e-6)
    assert rep.lipschitz == pytest.approx(1.3, rel=1e-6)


def test_validation_quartic_fails():
    quartic = Potential.user(lambda u: u ** 4, lambda u: 4 * u ** 3, lambda u: 12 * u ** 2)
    rep = validate_assumption_v(quartic)
    assert not rep.passed
    assert rep.reasons


def test_validation_deterministic(pert):
    grid = np.linspace(-22, 22, 4001)
    assert validate_assumption_v(pert, grid).as_dict() == validate_assumption_v(pert, grid).as_dict()


def test_spec_round_trip(pert):
    assert Potential.from_spec(pert.to_spec()) == pert
    with pytest.raises(UsageError):
        Potential.from_spec({"family": "bogus"})
