"""
End-to-end capacity prediction.

The proposed model (SDG-L) fits the explicit mean function to the training
capacities, then trains the LSTM extractor and the deep GP jointly on the
residuals. A test prediction is the curve value at the cycle index plus the
deep GP prediction at the cycle's features.

Baselines share the train/test split and the metrics:

    gpr_white         exact GP on the scaled cycle index, RBF + white noise
    dgpr_index        two-layer deep GP on the scaled cycle index
    lstm_only         LSTM features + linear head, squared-error training
    sdgl_no_emf       SDG-L with a zero mean function
    sdgl_linear_mean  SDG-L with a least-squares line as mean function
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from autodiff import apply, constant
from config import TrainConfig
from dataio import fit_normalization, make_split
from emf import emf_curve, emf_eval, fit_emf, fit_linear_trend
from gp import (PredictionResult, dgp_init, dgp_predict, dgp_train, dgp_train_inputs, gpr_fit, gpr_predict,
                gradient_ascent)
from lstm import LstmWeights, extract_features, lstm_forward_batch, lstm_init

logger = logging.getLogger(__name__)

BASELINES = ('gpr_white', 'dgpr_index', 'lstm_only', 'sdgl_no_emf', 'sdgl_linear_mean')
MEAN_KINDS = ('emf', 'linear', 'zero')


class MetricError(ValueError):
    """Raised for mismatched or degenerate metric inputs."""


@dataclass
class SdglModel:
    """
    Trained model: mean function, extractor, deep GP and the normalization
    fitted on the training cycles.

    emf is None for the zero and linear mean variants; trend holds the
    fitted line of the linear variant.
    """
    emf: object
    extractor: LstmWeights
    dgp: object
    normalization: object
    config: TrainConfig
    trend: object = None
    loss_trace: list = field(default_factory=list, repr=False)

    @property
    def mean_kind(self):
        if self.emf is not None:
            return 'emf'
        return 'linear' if self.trend is not None else 'zero'

    def mean_at(self, cycle_index):
        """Mean function value in scaled capacity units."""
        if self.emf is not None:
            return emf_eval(self.emf.params, cycle_index)
        if self.trend is not None:
            return self.trend(cycle_index)
        return 0.0


@dataclass
class EvalReport:
    cell_id: str
    method: str
    seed: int
    cycle_indices: np.ndarray
    truths: np.ndarray
    predictions: list
    mse: float
    r2: float
    coverage2sigma: float
    converged: bool = True
    model: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.mse < 0 or not 0.0 <= self.coverage2sigma <= 1.0:
            raise MetricError(f"invalid metrics mse={self.mse}, coverage={self.coverage2sigma}")

    @property
    def pred_means(self):
        return np.array([p.mean for p in self.predictions])


# Metrics

def _paired(predicted, actual, minimum):
    predicted = np.asarray(predicted, dtype=np.float64).ravel()
    actual = np.asarray(actual, dtype=np.float64).ravel()
    if len(predicted) != len(actual):
        raise MetricError(f"{len(predicted)} predictions but {len(actual)} actual values")
    if len(actual) < minimum:
        raise MetricError(f"at least {minimum} values are required, got {len(actual)}")
    return predicted, actual


def mse(predicted, actual):
    """Mean squared error in Ah^2."""
    predicted, actual = _paired(predicted, actual, 1)
    return float(np.mean((predicted - actual) ** 2))


def r2(predicted, actual):
    """
    Coefficient of determination over the evaluation window.

    The mean of the actual values is taken over the same window, not over
    the whole series.
    """
    predicted, actual = _paired(predicted, actual, 2)
    total = float(np.sum((actual - actual.mean()) ** 2))
    if total == 0.0:
        raise MetricError("r2 is undefined for constant actual values")
    return 1.0 - float(np.sum((predicted - actual) ** 2)) / total


def coverage2sigma(predictions, actual):
    """Fraction of actual values inside [lower2s, upper2s]."""
    actual = np.asarray(actual, dtype=np.float64).ravel()
    if len(predictions) != len(actual):
        raise MetricError(f"{len(predictions)} predictions but {len(actual)} actual values")
    if len(actual) == 0:
        raise MetricError("coverage needs at least one prediction")
    inside = [p.lower2s <= y <= p.upper2s for p, y in zip(predictions, actual)]
    return float(np.mean(inside))


def evaluate(method, test, predictions, seed, converged=True, model=None):
    """Build the EvalReport of one method on the test view."""
    means = [p.mean for p in predictions]
    report = EvalReport(
        cell_id=test.cell_id,
        method=method,
        seed=seed,
        cycle_indices=np.asarray(test.cycle_indices),
        truths=np.asarray(test.capacities, dtype=np.float64),
        predictions=list(predictions),
        mse=mse(means, test.capacities),
        r2=r2(means, test.capacities),
        coverage2sigma=coverage2sigma(predictions, test.capacities),
        converged=converged,
        model=model,
    )
    logger.info("%s on %s (seed %d): MSE %.5f, R2 %.5f, 2-sigma coverage %.3f",
                method, test.cell_id, seed, report.mse, report.r2, report.coverage2sigma)
    return report


# SDG-L

def train_sdgl(dataset, config, mean_kind='emf'):
    """
    Train the model on the training cycles of a dataset.

    Args:
        dataset (CellDataset): Cell with its train/test boundary.
        config (TrainConfig): Training settings.
        mean_kind (str): 'emf' for the curve fit, 'linear' or 'zero' for the ablations.

    Returns:
        SdglModel
    """
    if mean_kind not in MEAN_KINDS:
        raise ValueError(f"mean_kind must be one of {MEAN_KINDS}, got '{mean_kind}'")
    train, _ = make_split(dataset, dataset.n_train)
    stats = fit_normalization(train.profiles, train.capacities, config.scale_capacity)
    targets = train.capacities / stats.capacity_scale

    emf_fit, trend = None, None
    if mean_kind == 'emf':
        emf_fit = fit_emf(train.cycle_indices, targets)
        if not emf_fit.converged:
            logger.warning("Mean function fit on %s did not converge; continuing with the last iterate",
                           dataset.cell_id)
        trend_values = emf_curve(emf_fit.params, train.cycle_indices)
    elif mean_kind == 'linear':
        trend = fit_linear_trend(train.cycle_indices, targets)
        trend_values = trend.curve(train.cycle_indices)
    else:
        trend_values = np.zeros(len(targets))
    residuals = targets - trend_values

    profiles = [stats.normalize(profile) for profile in train.profiles]
    extractor = lstm_init(config.seed, hidden=config.lstm_hidden, feature_dim=config.feature_dim,
                          readout=config.readout)
    features = extract_features(extractor, profiles)
    dgp = dgp_init(features, residuals, hidden_width=config.hidden_width,
                   sample_count=config.mc_samples, seed=config.seed)
    dgp, extractor, trace = dgp_train(dgp, extractor, profiles, residuals, epochs=config.epochs,
                                      lr=config.learning_rate, seed=config.seed,
                                      train_samples=config.train_samples, log_every=config.log_every)
    return SdglModel(emf=emf_fit, extractor=extractor, dgp=dgp, normalization=stats,
                     config=config, trend=trend, loss_trace=trace)


def _compose(model, cycle_index, dgp_result):
    scale = model.normalization.capacity_scale
    trend = scale * model.mean_at(cycle_index)
    # the addition comes last so the trend part is recoverable exactly
    return PredictionResult.from_moments(trend + scale * dgp_result.mean,
                                         scale * scale * dgp_result.variance,
                                         scale * scale * dgp_result.latent_variance)


def predict_sdgl(model, cycle_index, profile):
    """
    Capacity prediction for one test cycle.

    Args:
        model (SdglModel): Trained model.
        cycle_index (int): Cycle index i* >= 1.
        profile (CycleProfile): Un-normalized profile of the same cycle.

    Returns:
        PredictionResult: Mean in Ah, variance of the deep GP part in Ah^2.
    """
    if profile is None:
        raise TypeError("predict_sdgl needs the profile of the predicted cycle")
    if cycle_index < 1:
        raise ValueError(f"cycle index must be >= 1, got {cycle_index}")
    feature = extract_features(model.extractor, [model.normalization.normalize(profile)])[0]
    return _compose(model, cycle_index, dgp_predict(model.dgp, feature))


def predict_sdgl_batch(model, cycle_indices, profiles):
    """predict_sdgl over many cycles with one batched feature pass."""
    if len(cycle_indices) != len(profiles):
        raise ValueError(f"{len(cycle_indices)} cycle indices but {len(profiles)} profiles")
    features = extract_features(model.extractor, [model.normalization.normalize(p) for p in profiles])
    results = [_compose(model, int(i), dgp_predict(model.dgp, feature))
               for i, feature in zip(cycle_indices, features)]
    if model.dgp.clamp_count:
        logger.warning("Clamped %d negative posterior variances while predicting", model.dgp.clamp_count)
    return results


def _run_sdgl(method, dataset, config, mean_kind):
    _, test = make_split(dataset, dataset.n_train)
    model = train_sdgl(dataset, config, mean_kind=mean_kind)
    predictions = predict_sdgl_batch(model, test.cycle_indices, test.profiles)
    converged = model.emf.converged if model.emf is not None else True
    return evaluate(method, test, predictions, config.seed, converged=converged, model=model)


# Baselines

def _scaled_index(view, n_train):
    return (np.asarray(view.cycle_indices, dtype=np.float64) / n_train).reshape(-1, 1)


def _run_gpr_white(dataset, config):
    train, test = make_split(dataset, dataset.n_train)
    layer = gpr_fit(_scaled_index(train, dataset.n_train), train.capacities,
                    steps=config.gp_steps, lr=config.learning_rate)
    predictions = [gpr_predict(layer, x, include_noise=True) for x in _scaled_index(test, dataset.n_train)]
    return evaluate('gpr_white', test, predictions, config.seed)


def _run_dgpr_index(dataset, config):
    train, test = make_split(dataset, dataset.n_train)
    inputs = _scaled_index(train, dataset.n_train)
    model = dgp_init(inputs, train.capacities, hidden_width=config.hidden_width,
                     sample_count=config.mc_samples, seed=config.seed)
    model, _ = dgp_train_inputs(model, inputs, train.capacities, epochs=config.epochs,
                                lr=config.learning_rate, seed=config.seed,
                                train_samples=config.train_samples, log_every=config.log_every)
    predictions = [dgp_predict(model, x) for x in _scaled_index(test, dataset.n_train)]
    return evaluate('dgpr_index', test, predictions, config.seed)


def _run_lstm_only(dataset, config):
    train, test = make_split(dataset, dataset.n_train)
    stats = fit_normalization(train.profiles, train.capacities, config.scale_capacity)
    profiles = [stats.normalize(profile) for profile in train.profiles]
    center = float(np.mean(train.capacities))
    spread = float(np.std(train.capacities)) or 1.0
    targets = ((train.capacities - center) / spread).reshape(1, -1)

    extractor = lstm_init(config.seed, hidden=config.lstm_hidden, feature_dim=config.feature_dim,
                          readout=config.readout)
    shapes = {name: value.shape for name, value in extractor.tensors.items()}
    params = {f'lstm.{name}': (value.reshape(-1, 1) if value.ndim == 1 else value.copy())
              for name, value in extractor.tensors.items()}
    params['head.weight'] = np.zeros((1, config.feature_dim))
    params['head.bias'] = np.zeros((1, 1))
    n = len(profiles)

    def objective(leaves, _epoch):
        weights = {name[len('lstm.'):]: leaf for name, leaf in leaves.items() if name.startswith('lstm.')}
        features = lstm_forward_batch(weights, profiles, extractor.readout)
        fitted = apply('add', apply('matmul', leaves['head.weight'], features), leaves['head.bias'])
        error = apply('sub', fitted, constant(targets))
        return apply('scale', apply('sum', apply('elementwise_mul', error, error)), factor=-1.0 / n)

    params, trace = gradient_ascent(params, objective, config.epochs, config.learning_rate,
                                    label='lstm-head', log_every=config.log_every)
    extractor = LstmWeights({name: params[f'lstm.{name}'].reshape(shape) for name, shape in shapes.items()},
                            extractor.readout)
    weight, bias = params['head.weight'], params['head.bias'][0, 0]

    def head(view):
        features = extract_features(extractor, [stats.normalize(p) for p in view.profiles])
        return center + spread * (features @ weight.ravel() + bias)

    # no predictive distribution; the training error stands in for the variance
    variance = float(np.mean((head(train) - train.capacities) ** 2))
    predictions = [PredictionResult.from_moments(mean, variance) for mean in head(test)]
    return evaluate('lstm_only', test, predictions, config.seed)


def run_baseline(kind, dataset, config):
    """
    Train and evaluate one baseline or ablation on a dataset.

    Args:
        kind (str): One of BASELINES.
        dataset (CellDataset): Cell with its train/test boundary.
        config (TrainConfig): Training settings.

    Returns:
        EvalReport
    """
    if kind == 'gpr_white':
        return _run_gpr_white(dataset, config)
    if kind == 'dgpr_index':
        return _run_dgpr_index(dataset, config)
    if kind == 'lstm_only':
        return _run_lstm_only(dataset, config)
    if kind == 'sdgl_no_emf':
        return _run_sdgl(kind, dataset, config, 'zero')
    if kind == 'sdgl_linear_mean':
        return _run_sdgl(kind, dataset, config, 'linear')
    raise ValueError(f"unknown baseline '{kind}'; choose from {', '.join(BASELINES)}")


def run_method(method, dataset, config):
    """Evaluate SDG-L ('sdgl') or any baseline on a dataset."""
    if method == 'sdgl':
        return _run_sdgl(method, dataset, config, 'emf')
    return run_baseline(method, dataset, config)


def relative_improvement(reports, reference='sdgl'):
    """
    How much lower the reference method's average MSE is than each other method's.

    Returns:
        dict: Method -> 1 - mean MSE(reference) / mean MSE(method), averaged
        over every report of the method (cells and seeds).
    """
    by_method = {}
    for report in reports:
        by_method.setdefault(report.method, []).append(report.mse)
    if reference not in by_method:
        raise MetricError(f"no reports for the reference method '{reference}'")
    reference_mse = float(np.mean(by_method[reference]))
    improvement = {}
    for method, values in sorted(by_method.items()):
        if method == reference:
            continue
        average = float(np.mean(values))
        improvement[method] = 1.0 - reference_mse / average if average > 0 else 0.0
    return improvement
