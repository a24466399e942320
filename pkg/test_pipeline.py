"""
Tests for metrics, SDG-L training and prediction, and the baselines.
Training runs use small networks and few epochs to keep the suite fast.
"""

import os
import tempfile

import numpy as np
import pytest
from scipy.stats import spearmanr

from config import TrainConfig
from dataio import CellDataset, CycleProfile, generate_synthetic_cell
from emf import emf_eval, fit_emf
from gp import PredictionResult, dgp_predict, save_dgp
from lstm import extract_features, save_lstm
from pipeline import (BASELINES, EvalReport, MetricError, coverage2sigma, mse, predict_sdgl, r2,
                      relative_improvement, run_baseline, run_method, train_sdgl)

THETA = (2.0, -0.15, 0.012)


def create_config(**overrides):
    """Small training settings."""
    values = dict(epochs=15, lstm_hidden=8, mc_samples=20, gp_steps=100, log_every=0)
    values.update(overrides)
    return TrainConfig(**values)


def create_cell(seed=0, cycles=80, residual_amplitude=0.02, noise_std=0.01):
    return generate_synthetic_cell(seed, cycles, THETA, residual_amplitude, noise_std)


def create_report(method, mse_value, seed=0, cell_id='SYN0000'):
    return EvalReport(cell_id=cell_id, method=method, seed=seed, cycle_indices=np.array([1]),
                      truths=np.array([1.0]), predictions=[PredictionResult.from_moments(1.0, 0.0)],
                      mse=mse_value, r2=0.0, coverage2sigma=1.0)


def checkpoint_bytes(model, directory, tag):
    lstm_path = os.path.join(directory, f'{tag}_lstm.ckpt')
    dgp_path = os.path.join(directory, f'{tag}_dgp.ckpt')
    save_lstm(model.extractor, lstm_path)
    save_dgp(model.dgp, dgp_path)
    with open(lstm_path, 'rb') as a, open(dgp_path, 'rb') as b:
        return a.read(), b.read()


def test_mse_examples():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse([1.0, 2.0], [0.0, 0.0]) == 2.5
    with pytest.raises(MetricError):
        mse([1.0], [1.0, 2.0])
    print("✓ MSE examples")


def test_r2_examples():
    actual = np.array([1.9, 1.8, 1.75, 1.6])
    assert r2(actual, actual) == 1.0
    assert r2(np.full(4, actual.mean()), actual) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(MetricError):
        r2([1.0, 1.0], [2.0, 2.0])
    with pytest.raises(MetricError):
        r2([1.0], [2.0])


def test_metrics_match_two_pass_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 60))
        actual, predicted = rng.normal(1.5, 0.2, size=n), rng.normal(1.5, 0.2, size=n)
        squared = [(p - a) ** 2 for p, a in zip(predicted, actual)]
        average = sum(actual) / n
        total = sum((a - average) ** 2 for a in actual)
        assert mse(predicted, actual) == pytest.approx(sum(squared) / n, rel=1e-12)
        assert r2(predicted, actual) == pytest.approx(1.0 - sum(squared) / total, rel=1e-12, abs=1e-12)


def test_coverage():
    actual = [1.0, 2.0, 3.0]
    assert coverage2sigma([PredictionResult.from_moments(y, 0.01) for y in actual], actual) == 1.0
    exact = [PredictionResult.from_moments(1.0, 0.0), PredictionResult.from_moments(2.1, 0.0),
             PredictionResult.from_moments(3.0, 0.25)]
    assert coverage2sigma(exact, actual) == pytest.approx(2.0 / 3.0)
    with pytest.raises(MetricError):
        coverage2sigma([], [])


def test_report_validates_metrics():
    with pytest.raises(MetricError):
        create_report('sdgl', -1.0)


def test_relative_improvement():
    reports = [create_report('sdgl', 0.001), create_report('sdgl', 0.003, seed=1),
               create_report('gpr_white', 0.004), create_report('sdgl_no_emf', 0.002)]
    gains = relative_improvement(reports)
    assert gains['gpr_white'] == pytest.approx(0.5)
    assert gains['sdgl_no_emf'] == pytest.approx(0.0)
    assert 'sdgl' not in gains
    with pytest.raises(MetricError):
        relative_improvement([create_report('gpr_white', 0.004)])


def test_composition_identity():
    """The prediction is the curve value plus the deep GP prediction, added last."""
    dataset = create_cell()
    model = train_sdgl(dataset, create_config(epochs=2))
    assert model.mean_kind == 'emf'
    for k in (dataset.n_train, dataset.n_total - 1):
        i, profile = int(dataset.cycle_indices[k]), dataset.profiles[k]
        result = predict_sdgl(model, i, profile)
        feature = extract_features(model.extractor, [model.normalization.normalize(profile)])[0]
        residual = dgp_predict(model.dgp, feature)
        assert result.mean == emf_eval(model.emf.params, i) + residual.mean
        assert result.variance == residual.variance
    print("✓ Prediction = curve value + deep GP mean")


def test_predict_requires_profile():
    dataset = create_cell(cycles=40)
    model = train_sdgl(dataset, create_config(epochs=1))
    with pytest.raises(TypeError):
        predict_sdgl(model, 35, None)
    with pytest.raises(ValueError):
        predict_sdgl(model, 0, dataset.profiles[0])


def test_training_ignores_test_cycles():
    """Mutating test labels and profiles leaves the trained model byte-identical."""
    dataset = create_cell(cycles=50)
    n = dataset.n_train
    rng = np.random.default_rng(1)
    mutated = CellDataset(
        cell_id=dataset.cell_id,
        cycle_indices=dataset.cycle_indices,
        profiles=dataset.profiles[:n] + [CycleProfile(p.matrix + rng.normal(size=(20, 3)))
                                         for p in dataset.profiles[n:]],
        capacities=np.concatenate([dataset.capacities[:n], dataset.capacities[n:] + 0.3]),
        n_train=n,
    )
    config = create_config(epochs=5)
    original, changed = train_sdgl(dataset, config), train_sdgl(mutated, config)
    assert original.emf.params == changed.emf.params
    np.testing.assert_array_equal(original.normalization.mean, changed.normalization.mean)
    with tempfile.TemporaryDirectory() as tmpdir:
        assert checkpoint_bytes(original, tmpdir, 'a') == checkpoint_bytes(changed, tmpdir, 'b')
    print("✓ No test leakage into the trained model")


def test_seeded_runs_are_identical():
    dataset = create_cell(cycles=50)
    first = run_method('sdgl', dataset, create_config(epochs=5))
    second = run_method('sdgl', dataset, create_config(epochs=5))
    assert first.mse == second.mse and first.r2 == second.r2
    assert [p.mean for p in first.predictions] == [p.mean for p in second.predictions]


def test_noiseless_trend_is_predicted_accurately():
    dataset = create_cell(cycles=60, residual_amplitude=0.0, noise_std=0.0)
    report = run_method('sdgl', dataset, create_config(epochs=5))
    assert report.converged
    assert report.mse < 1e-4
    print(f"✓ Noiseless trend: test MSE {report.mse:.2e}")


def test_sdgl_beats_index_gpr_and_zero_mean():
    dataset = create_cell(seed=3, cycles=100)
    config = create_config(epochs=20)
    sdgl = run_method('sdgl', dataset, config)
    gpr = run_method('gpr_white', dataset, config)
    no_emf = run_method('sdgl_no_emf', dataset, config)
    assert sdgl.mse < gpr.mse
    assert sdgl.mse < no_emf.mse
    assert sdgl.mse < 1e-3
    assert len(sdgl.predictions) == dataset.n_test

    n = dataset.n_train
    curve = fit_emf(dataset.cycle_indices[:n], dataset.capacities[:n]).params
    curve_only = mse([emf_eval(curve, i) for i in dataset.cycle_indices[n:]], dataset.capacities[n:])
    assert sdgl.mse <= curve_only + 1e-4
    print(f"✓ MSE sdgl {sdgl.mse:.5f} < gpr_white {gpr.mse:.5f}, sdgl_no_emf {no_emf.mse:.5f}; "
          f"curve alone {curve_only:.5f}")


def test_sdgl_intervals_cover_the_truth():
    coverages, widths = [], []
    for seed in range(3):
        report = run_method('sdgl', create_cell(seed=seed, cycles=100), create_config(epochs=20))
        coverages.append(report.coverage2sigma)
        widths += [p.upper2s - p.lower2s for p in report.predictions]
    assert np.mean(coverages) >= 0.8
    assert np.median(widths) < 0.2
    print(f"✓ 2-sigma coverage {np.mean(coverages):.3f}, median width {np.median(widths):.4f}")


def test_zero_residual_cell_learns_zero_correction():
    dataset = create_cell(seed=4, cycles=80, residual_amplitude=0.0)
    model = train_sdgl(dataset, create_config(epochs=15))
    n = dataset.n_train
    profiles = [model.normalization.normalize(p) for p in dataset.profiles[n:]]
    within = [abs(r.mean) < 3.0 * r.std
              for r in (dgp_predict(model.dgp, x) for x in extract_features(model.extractor, profiles))]
    assert np.mean(within) >= 0.9


def test_trained_features_follow_the_cycle_index():
    dataset = create_cell(seed=2, cycles=80)
    model = train_sdgl(dataset, create_config(epochs=10))
    features = extract_features(model.extractor, [model.normalization.normalize(p) for p in dataset.profiles])
    correlations = [abs(spearmanr(features[:, k], dataset.cycle_indices)[0]) for k in range(features.shape[1])]
    assert max(correlations) > 0.8


def test_every_baseline_reports_finite_metrics():
    dataset = create_cell(seed=1, cycles=48)
    config = create_config(epochs=5)
    for kind in BASELINES:
        report = run_baseline(kind, dataset, config)
        assert report.method == kind
        assert len(report.predictions) == dataset.n_test
        assert np.isfinite(report.mse) and np.isfinite(report.r2)
        assert 0.0 <= report.coverage2sigma <= 1.0
        assert all(p.variance >= 0.0 for p in report.predictions)
    with pytest.raises(ValueError):
        run_baseline('random_forest', dataset, config)
    print("✓ Every baseline produces a complete report")


def test_linear_mean_variant():
    dataset = create_cell(cycles=40)
    model = train_sdgl(dataset, create_config(epochs=1), mean_kind='linear')
    assert model.mean_kind == 'linear' and model.emf is None
    assert model.mean_at(10) == pytest.approx(model.trend.intercept + 10 * model.trend.slope)
    zero = train_sdgl(dataset, create_config(epochs=1), mean_kind='zero')
    assert zero.mean_kind == 'zero' and zero.mean_at(10) == 0.0
    with pytest.raises(ValueError):
        train_sdgl(dataset, create_config(epochs=1), mean_kind='quadratic')


if __name__ == "__main__":
    test_mse_examples()
    test_r2_examples()
    test_metrics_match_two_pass_oracle()
    test_coverage()
    test_report_validates_metrics()
    test_relative_improvement()
    test_composition_identity()
    test_predict_requires_profile()
    test_training_ignores_test_cycles()
    test_seeded_runs_are_identical()
    test_noiseless_trend_is_predicted_accurately()
    test_sdgl_beats_index_gpr_and_zero_mean()
    test_sdgl_intervals_cover_the_truth()
    test_zero_residual_cell_learns_zero_correction()
    test_trained_features_follow_the_cycle_index()
    test_every_baseline_reports_finite_metrics()
    test_linear_mean_variant()
    print("\n✓ All pipeline tests passed")
