import math

import numpy as np
import pytest

from kpzlab import thermo
from kpzlab.errors import UsageError

# 30-digit mpmath quadrature of exp(lam u - u^2/2 - 0.3 sin u), computed once and frozen:
# lam -> (log Z, mean, variance, third, fourth central moment)
PERTURBED_ORACLE = {
    0.0: (0.93830866261264191, -0.18044687453882325, 0.97947506785240597, 0.17491559223621013, 2.9579100619231476),
    0.5: (0.97433206031210392, 0.33240974223119076, 1.0734815758203165, 0.1926135190451513, 3.4349109530832198),
    -1.0: (1.5833881635585469, -1.0891116764588152, 0.85637815629577317, 0.065877936386142781, 2.3170988741634367),
    2.0: (2.7649773709166294, 2.0839482751330984, 1.1788067286528364, -0.11365855172800838, 3.9453157627065818),
}
TILT_FOR_QUARTER = 0.42269398015154428      # mpmath root of mean(lam) = 0.25
EDGEWORTH_N16_U05 = 0.3484983962962476      # direct formula with the oracle moments above


def test_gaussian_closed_forms(quad):
    pr = thermo.moments(quad, 0.0)
    assert pr.Z == pytest.approx(math.sqrt(2 * math.pi), rel=1e-14)
    assert pr.rho == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-14)
    for lam in (-1.3, 0.0, 0.7, 2.0):
        pr = thermo.moments(quad, lam)
        assert pr.rho == pytest.approx(lam ** 2 / 2 + 0.5 * math.log(2 * math.pi), abs=1e-13)
        assert (pr.rho_prime, pr.sigma2, pr.m3, pr.m4) == (lam, 1.0, 0.0, 3.0)


def test_gaussian_quadrature_matches_closed_form(quad):
    a = thermo.moments(quad, 0.8)
    b = thermo.moments(quad, 0.8, force_quadrature=True)
    assert b.rho == pytest.approx(a.rho, abs=1e-12)
    assert b.sigma2 == pytest.approx(1.0, abs=1e-12)
    assert b.m4 == pytest.approx(3.0, abs=1e-11)


@pytest.mark.parametrize("lam", sorted(PERTURBED_ORACLE))
def test_perturbed_against_oracle(pert, lam):
    logz, mean, s2, m3, m4 = PERTURBED_ORACLE[lam]
    pr = thermo.moments(pert, lam)
    assert pr.rho == pytest.approx(logz, abs=1e-12)
    assert pr.rho_prime == pytest.approx(mean, abs=1e-12)
    assert pr.sigma2 == pytest.approx(s2, abs=1e-12)
    assert pr.m3 == pytest.approx(m3, abs=1e-12)
    assert pr.m4 == pytest.approx(m4, abs=1e-11)


@pytest.mark.parametrize("lam", [-1.0, 0.0, 0.5, 2.0])
def test_integration_by_parts_identities(pert, lam):
    pr = thermo.moments(pert, lam)
    assert abs(pr.e_dv - lam) <= 1e-8
    assert abs(pr.var_dv - pr.e_d2v) <= 1e-8


def test_density_normalized(pert):
    tm = thermo.tilted_measure(pert, 0.5)
    assert tm.mass() == pytest.approx(1.0, abs=1e-12)
    assert np.all(tm.density(np.linspace(-30, 30, 101)) >= 0)


def test_tilt_for_mean(pert, quad):
    assert thermo.tilt_for_mean(pert, 0.25) == pytest.approx(TILT_FOR_QUARTER, abs=1e-10)
    assert thermo.tilt_for_mean(quad, 1.7) == 1.7
    for lam in (-1.0, 0.0, 2.0):
        assert abs(thermo.tilt_for_mean(pert, thermo.moments(pert, lam).rho_prime) - lam) <= 1e-9


def test_mean_map_monotone(pert):
    means = [thermo.moments(pert, lam, 2).rho_prime for lam in np.linspace(-4, 4, 33)]
    assert np.all(np.diff(means) > 0)


def test_burgers_coefficients(pert, quad):
    nu, b, c_n = thermo.burgers_coefficients(quad, 0.3)
    assert (nu, b, c_n(100)) == (0.5, 0.0, 10.0)
    bc = thermo.burgers_coefficients(pert, 0.0)
    _, _, s2, m3, _ = PERTURBED_ORACLE[0.0]
    assert bc.nu == pytest.approx(1 / (2 * s2), rel=1e-12)
    assert bc.b == pytest.approx(m3 / (2 * s2 ** 3), rel=1e-10)


@pytest.mark.parametrize("lam0", [0.0, 0.5])
def test_chemical_potential_derivatives(pert, lam0):
    d1, d2 = thermo.chemical_potential_fd(pert, lam0)
    bc = thermo.burgers_coefficients(pert, lam0)
    assert abs(d1 - 1 / bc.sigma2) <= 1e-5
    assert abs(d2 - bc.d2phi) <= 1e-4


def test_hermite_values():
    assert thermo.hermite(3, 2.0) == 2.0
    assert thermo.hermite(4, 0.0) == 3.0
    assert thermo.hermite(6, 1.0) == 16.0
    with pytest.raises(UsageError):
        thermo.hermite(7, 0.0)


def test_edgeworth(pert, quad):
    for N in (1, 4, 64):
        assert thermo.edgeworth_density(quad, 0.4, N, 0.0) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-14)
    assert thermo.edgeworth_density(pert, 0.0, 16, 0.5) == pytest.approx(EDGEWORTH_N16_U05, rel=1e-10)
    ex = thermo.EdgeworthExpansion.from_profile(thermo.moments(pert, 0.0), 9)
    assert ex.density(0.0) == pytest.approx(ex.r0(0.0) + ex.r2(0.0) / 9, abs=1e-16)
    u = np.linspace(-14, 14, 28001)
    h = u[1] - u[0]
    assert np.sum(ex.r0(u)) * h == pytest.approx(1.0, abs=1e-8)
    assert abs(np.sum(ex.r1(u)) * h) < 1e-8
    assert abs(np.sum(ex.r2(u)) * h) < 1e-8


def test_cumulant_second_difference(pert):
    assert abs(thermo.cumulant_second_difference(pert, 0.3) - thermo.moments(pert, 0.3).sigma2) < 1e-6


def test_uniform_bound_probe(pert):
    out = thermo.uniform_bound_probe(pert, np.linspace(-5, 5, 21))
    assert out["finite"]
    assert all(np.isfinite(v) for k, v in out.items() if k != "finite")


def test_cumulants_consistent(pert):
    k1, k2, k3, k4 = thermo.moments(pert, 0.5).cumulants
    _, mean, s2, m3, m4 = PERTURBED_ORACLE[0.5]
    assert k4 == pytest.approx(m4 - 3 * s2 ** 2, abs=1e-11)


def test_thermo_table_columns(quad):
    rows = thermo.thermo_table(quad, [-1.0, 0.5])
    assert list(rows[0]) == ["lambda", "Z", "rho", "rho_prime", "sigma2", "m3", "m4", "h_prime_roundtrip_err"]
    assert all(abs(r["rho_prime"] - r["lambda"]) <= 1e-10 for r in rows)
