import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from bath_fit import (QUAD_EPSREL, BathSpec, CorrelationFit, FitNotConverged, correlation_function, fit_samples,
                      grid_weights, offgrid_residual, ohmic_correlation_imag, ohmic_correlation_real_at_zero,
                      sample_correlation, spectral_density)
from conftest import REFERENCE_BATH
from run_utils import ConfigError


def test_bath_spec_validation():
    with pytest.raises(ValueError, match="xi"):
        BathSpec(xi=-0.1)
    with pytest.raises(ValueError, match="omega_c"):
        BathSpec(omega_c=0.0)
    with pytest.raises(ValueError, match="beta"):
        BathSpec(beta=-1.0)


def test_spectral_density():
    spec = BathSpec(xi=0.2, omega_c=5.0, beta=1.0)
    assert spectral_density(spec, 0.0) == 0.0
    assert spectral_density(spec, 5.0) == pytest.approx(0.5 * 0.2 * 5.0 * np.exp(-1.0))
    with pytest.raises(ValueError):
        spectral_density(spec, -1.0)


@pytest.mark.parametrize("t", [0.05, 0.3, 1.0, 4.0])
def test_imaginary_part_matches_closed_form(t):
    c = correlation_function(REFERENCE_BATH, t)
    assert c.imag == pytest.approx(float(ohmic_correlation_imag(REFERENCE_BATH, t)), rel=1e-8, abs=1e-12)


def test_real_part_at_zero_matches_trigamma():
    c0 = correlation_function(REFERENCE_BATH, 0.0)
    assert c0.imag == 0.0
    assert c0.real == pytest.approx(ohmic_correlation_real_at_zero(REFERENCE_BATH), rel=1e-8)


def test_negative_time_is_conjugate():
    c = correlation_function(REFERENCE_BATH, 0.7)
    assert correlation_function(REFERENCE_BATH, -0.7) == pytest.approx(np.conj(c), abs=1e-14)


def test_zero_coupling_kernel_vanishes():
    spec = REFERENCE_BATH.with_xi(0.0)
    assert_allclose(sample_correlation(spec, [0.0, 1.0, 2.0]), 0.0)


def test_custom_density_reproduces_ohmic():
    ohmic = lambda w: 0.5 * REFERENCE_BATH.xi * w * np.exp(-w / REFERENCE_BATH.omega_c)
    for t in (0.0, 0.5):
        assert correlation_function(REFERENCE_BATH, t, density=ohmic) == pytest.approx(
            correlation_function(REFERENCE_BATH, t), rel=1e-8, abs=1e-11)


def test_fit_recovers_exact_exponentials():
    t = np.linspace(0.0, 10.0, 400)
    alphas = np.array([1.0 + 0.5j, 0.3 - 0.2j])
    gammas = np.array([-0.5 + 2.0j, -2.0 + 0.0j])
    c = np.exp(np.outer(t, gammas)) @ alphas
    fit = fit_samples(t, c, tol=1e-12, max_terms=4)
    assert fit.n_terms == 2
    assert fit.residual <= 1e-12
    assert_allclose(fit.evaluate(t), c, atol=1e-7)
    order = np.argsort(fit.gammas.real)
    assert_allclose(fit.gammas[order], gammas[np.argsort(gammas.real)], atol=1e-6)


def test_zero_samples_give_trivial_fit():
    t = np.linspace(0.0, 5.0, 50)
    fit = fit_samples(t, np.zeros(50, dtype=complex), tol=1e-9, max_terms=3)
    assert fit.n_terms == 1 and fit.residual == 0.0
    assert_allclose(fit.evaluate(t), 0.0)


def test_unreachable_tolerance_raises_with_best_attempt():
    t = np.linspace(0.0, 10.0, 300)
    c = 1.0 / (1.0 + t ** 2) + 0j
    with pytest.raises(FitNotConverged) as err:
        fit_samples(t, c, tol=1e-30, max_terms=2)
    best = err.value.best
    assert 1 <= best.n_terms <= 2
    assert np.all(best.gammas.real <= 0)
    assert best.residual < np.sum(grid_weights(t) * np.abs(c) ** 2)


def test_fit_rejects_growing_terms():
    with pytest.raises(ValueError, match="Re"):
        CorrelationFit(np.ones(1), np.array([0.1 + 0j]), 0.0, 30.0)


def test_scaled_fit(toy_fit):
    t = np.linspace(0.0, 3.0, 7)
    half = toy_fit.scaled(0.5)
    assert_allclose(half.evaluate(t), 0.5 * toy_fit.evaluate(t))
    assert_allclose(half.gammas, toy_fit.gammas)
    assert half.bath.xi == pytest.approx(0.05)
    assert half.fingerprint() != toy_fit.fingerprint()


def test_save_and_load(tmp_path, toy_fit):
    path = tmp_path / "fit.json"
    toy_fit.save(path)
    loaded = CorrelationFit.load(path)
    assert loaded.fingerprint() == toy_fit.fingerprint()
    assert loaded.bath == toy_fit.bath
    assert_allclose(loaded.evaluate([0.0, 1.0]), toy_fit.evaluate([0.0, 1.0]))


def test_tampered_fit_file_rejected(tmp_path, toy_fit):
    doc = toy_fit.to_dict()
    doc["terms"][0][0] += 1e-3
    path = tmp_path / "fit.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ConfigError, match="fingerprint"):
        CorrelationFit.load(path)


def test_grid_weights_integrate_the_window():
    t = np.linspace(0.0, 3.0, 31)
    w = grid_weights(t)
    assert w.sum() == pytest.approx(3.0)
    assert w[0] == w[-1] == pytest.approx(0.05)


def test_residual_does_not_grow_with_sample_count():
    residuals = []
    for n in (300, 600):
        t = np.linspace(0.0, 10.0, n)
        with pytest.raises(FitNotConverged) as err:
            fit_samples(t, 1.0 / (1.0 + t ** 2) + 0j, tol=1e-30, max_terms=1)
        residuals.append(err.value.best.residual)
    assert residuals[1] == pytest.approx(residuals[0], rel=0.05)


@pytest.mark.parametrize("t", [0.0, 0.02, 0.4, 3.0, 25.0])
def test_quadrature_converged(t):
    c = correlation_function(REFERENCE_BATH, t)
    finer = correlation_function(REFERENCE_BATH, t, epsrel=QUAD_EPSREL / 2)
    assert finer.real == pytest.approx(c.real, rel=1e-8, abs=1e-12)
    assert finer.imag == pytest.approx(c.imag, rel=1e-8, abs=1e-12)


@pytest.mark.slow
def test_reference_bath_fit(reference_fit):
    assert 3 <= reference_fit.n_terms <= 6
    assert reference_fit.residual <= 1e-7
    assert np.all(reference_fit.gammas.real <= 0)
    # generalizes off the sample grid
    assert offgrid_residual(reference_fit, REFERENCE_BATH, n=1000) <= 10 * 1e-7
    h = reference_fit.horizon
    c_h = correlation_function(REFERENCE_BATH, h)
    assert abs(c_h) / abs(correlation_function(REFERENCE_BATH, 0.0)) <= 1e-7
    assert abs(reference_fit.evaluate(h)) == pytest.approx(abs(c_h), abs=1e-6)
