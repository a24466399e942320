"""
Tests for the explicit mean function and its least-squares fit.
"""

import numpy as np
import pytest
from scipy.optimize import least_squares

from emf import (EmfOverflowError, EmfParams, default_init, emf_curve, emf_eval, fit_emf, fit_linear_trend)

THETA = EmfParams(2.0, -0.15, 0.012)


def create_series(params, n=125, noise_std=0.0, seed=0):
    """Capacities i = 1..n generated from the exponential trend."""
    indices = np.arange(1, n + 1, dtype=np.float64)
    capacities = emf_curve(params, indices)
    if noise_std > 0:
        capacities = capacities + np.random.default_rng(seed).normal(0.0, noise_std, size=n)
    return indices, capacities


def test_emf_eval_examples():
    assert emf_eval(EmfParams(2.0, 0.0, 0.3), 50) == 2.0
    assert emf_eval(EmfParams(0.0, 1.0, 0.0), 7) == 1.0
    assert emf_eval(EmfParams(2.0, -0.1, 0.01), 100) == pytest.approx(1.72817, abs=1e-5)
    np.testing.assert_allclose(emf_curve(THETA, [1, 2, 3]), [emf_eval(THETA, i) for i in (1, 2, 3)], rtol=1e-15)
    print("✓ emf_eval examples")


def test_overflow_is_reported():
    with pytest.raises(EmfOverflowError):
        emf_eval(EmfParams(2.0, -0.1, 10.0), 1000)
    with pytest.raises(EmfOverflowError):
        emf_curve(EmfParams(2.0, -0.1, 10.0), [1, 1000])


def test_params_must_be_finite():
    with pytest.raises(ValueError):
        EmfParams(np.nan, 0.0, 0.0)


def test_recovers_generating_parameters():
    """Noiseless data from (2.0, -0.15, 0.012) over 125 cycles."""
    indices, capacities = create_series(THETA)
    fit = fit_emf(indices, capacities)
    np.testing.assert_allclose(fit.params.as_array(), THETA.as_array(), rtol=0, atol=1e-6)
    assert fit.rms_residual < 1e-8
    assert len(fit.residuals) == 125
    assert fit.converged
    print(f"✓ Parameter recovery: {fit.params}")


def test_recovers_random_parameters():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        params = EmfParams(rng.uniform(1.0, 2.5), rng.uniform(-0.8, -0.05), rng.uniform(0.002, 0.02))
        indices, capacities = create_series(params)
        fit = fit_emf(indices, capacities)
        np.testing.assert_allclose(fit.params.as_array(), params.as_array(), rtol=0, atol=1e-6)
        assert abs(np.mean(fit.residuals)) < 1e-8
    print("✓ Recovery over 20 random parameter draws")


def test_constant_series():
    indices = np.arange(1, 41, dtype=np.float64)
    fit = fit_emf(indices, np.full(40, 1.7))
    assert fit.rms_residual < 1e-10
    assert abs(fit.params.theta2) < 1e-8
    np.testing.assert_allclose(emf_curve(fit.params, indices), 1.7, atol=1e-10)


def test_noisy_decline_stays_monotone():
    indices, capacities = create_series(THETA, noise_std=0.01, seed=4)
    fit = fit_emf(indices, capacities)
    assert np.all(np.diff(emf_curve(fit.params, indices)) < 0)
    assert fit.rms_residual < 0.02


def test_matches_scipy_least_squares():
    """Same minimum as scipy's Levenberg-Marquardt on noisy data."""
    indices, capacities = create_series(THETA, noise_std=0.01, seed=9)
    fit = fit_emf(indices, capacities)

    reference = least_squares(lambda t: capacities - (t[0] + t[1] * np.exp(t[2] * indices)),
                              THETA.as_array(), method='lm', xtol=1e-15, ftol=1e-15, gtol=1e-15)
    ours = float(fit.residuals @ fit.residuals)
    theirs = float(reference.fun @ reference.fun)
    assert ours <= theirs * (1.0 + 1e-8)
    np.testing.assert_allclose(fit.params.as_array(), reference.x, rtol=1e-4, atol=1e-6)
    print("✓ Fit agrees with scipy.optimize.least_squares")


def test_objective_trace_non_increasing():
    indices, capacities = create_series(THETA, noise_std=0.01, seed=1)
    fit = fit_emf(indices, capacities, init=EmfParams(1.5, -0.5, 0.001))
    assert len(fit.objective_trace) >= 2
    assert np.all(np.diff(fit.objective_trace) <= 0)


def test_default_init():
    capacities = np.linspace(1.85, 1.30, 125)
    init = default_init(np.arange(1, 126), capacities)
    assert init.theta1 == pytest.approx(1.30)
    assert init.theta2 == pytest.approx(0.55)
    assert init.theta3 == pytest.approx(-0.008)

    flat = default_init(np.arange(1, 11), np.full(10, 1.5))
    assert (flat.theta1, flat.theta2, flat.theta3) == (1.5, 0.0, -0.1)
    rising = default_init(np.arange(1, 11), np.linspace(1.0, 1.2, 10))
    assert rising.theta3 == pytest.approx(0.1)


def test_fit_input_validation():
    with pytest.raises(ValueError):
        fit_emf([1, 2, 3], [1.0, 0.9, 0.8])
    with pytest.raises(ValueError):
        fit_emf([1, 2, 2, 3], [1.0, 0.9, 0.8, 0.7])
    with pytest.raises(ValueError):
        default_init([1, 2], [1.0, 0.9])


def test_linear_trend():
    indices = np.arange(1, 31, dtype=np.float64)
    trend = fit_linear_trend(indices, 1.9 - 0.004 * indices)
    assert trend.intercept == pytest.approx(1.9)
    assert trend.slope == pytest.approx(-0.004)
    assert trend(50) == pytest.approx(1.7)
    np.testing.assert_allclose(trend.curve([10, 20]), [1.86, 1.82])


if __name__ == "__main__":
    test_emf_eval_examples()
    test_overflow_is_reported()
    test_params_must_be_finite()
    test_recovers_generating_parameters()
    test_recovers_random_parameters()
    test_constant_series()
    test_noisy_decline_stays_monotone()
    test_matches_scipy_least_squares()
    test_objective_trace_non_increasing()
    test_default_init()
    test_fit_input_validation()
    test_linear_trend()
    print("\n✓ All emf tests passed")
