"""
RBF kernels, exact Gaussian process regression and the two-layer deep GP.

A GpLayer holds hyperparameters in the log domain and, once conditioned on
training inputs and targets, a cached Cholesky factor of K + noise * I shared by
every output dimension. Hyperparameters are fitted by gradient ascent on the
exact log marginal likelihood computed through the autodiff module.

The deep GP stacks two layers. Layer 1 maps the 2-dim features to H hidden
outputs, layer 2 maps hidden outputs to the capacity residual. A forward
sample at x is

    f1 = mu1(x) + eps1 * sqrt(var1(x))
    f2 = mu2(f1) + eps2 * sqrt(var2(f1))

where mu and var are the posterior mean and latent posterior variance of the
layer. Predictions average S such samples.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

import util
from autodiff import (SQRT_FLOOR, DimensionError, Tape, ValidationError, apply, backward, constant,
                      gaussian_log_likelihood, make_leaf)
from lstm import LstmWeights, extract_features, lstm_forward_batch

logger = logging.getLogger(__name__)

JITTER_LEVELS = tuple(1e-10 * 10.0 ** k for k in range(7))
MAX_HALVINGS = 30
MAX_CONSECUTIVE_FAILURES = 20
DEFAULT_SAMPLE_COUNT = 100
CHECKPOINT_KIND = 'dgp'


class CholeskyError(RuntimeError):
    """Raised when a covariance matrix cannot be factorized at maximum jitter."""


class NotFittedError(RuntimeError):
    """Raised when a layer is used for prediction before it is conditioned."""


class TrainingAbortedError(RuntimeError):
    """Raised after too many consecutive non-finite training objectives."""

    def __init__(self, message, epoch=None, trace=None):
        super().__init__(message)
        self.epoch = epoch
        self.trace = list(trace or [])


@dataclass
class RbfKernel:
    log_signal_variance: float
    log_lengthscales: np.ndarray

    def __post_init__(self):
        self.log_signal_variance = float(self.log_signal_variance)
        self.log_lengthscales = np.atleast_1d(np.asarray(self.log_lengthscales, dtype=np.float64)).copy()

    @property
    def signal_variance(self):
        return math.exp(self.log_signal_variance)

    @property
    def lengthscales(self):
        return np.exp(self.log_lengthscales)

    @property
    def input_dim(self):
        return len(self.log_lengthscales)


@dataclass(frozen=True)
class PredictionResult:
    mean: float
    variance: float
    lower2s: float
    upper2s: float
    latent_variance: float = None

    @classmethod
    def from_moments(cls, mean, variance, latent_variance=None):
        mean = float(mean)
        variance = max(float(variance), 0.0)
        spread = 2.0 * math.sqrt(variance)
        return cls(mean, variance, mean - spread, mean + spread,
                   None if latent_variance is None else max(float(latent_variance), 0.0))

    @property
    def std(self):
        return math.sqrt(self.variance)


def rbf_eval(kernel, a, b):
    """sigma_s^2 * exp(-1/2 * sum_d ((a_d - b_d) / l_d)^2)"""
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape or len(a) != kernel.input_dim:
        raise DimensionError(f"rbf_eval: expected {kernel.input_dim}-dim inputs, got {a.shape} and {b.shape}")
    scaled = (a - b) / kernel.lengthscales
    return kernel.signal_variance * math.exp(-0.5 * float(scaled @ scaled))


def _as_inputs(values, input_dim=None):
    matrix = np.asarray(values, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(-1, 1) if input_dim in (None, 1) else matrix.reshape(1, -1)
    if matrix.ndim != 2:
        raise DimensionError(f"inputs must be a matrix, got shape {matrix.shape}")
    if input_dim is not None and matrix.shape[1] != input_dim:
        raise DimensionError(f"inputs must have {input_dim} columns, got {matrix.shape[1]}")
    return matrix


def gram(kernel, a, b):
    """Kernel matrix K(A, B) for row-wise inputs."""
    a = _as_inputs(a, kernel.input_dim) / kernel.lengthscales
    b = _as_inputs(b, kernel.input_dim) / kernel.lengthscales
    diff = a[:, None, :] - b[None, :, :]
    return kernel.signal_variance * np.exp(-0.5 * np.sum(diff * diff, axis=2))


def _gram_node(log_signal_variance, log_lengthscales, a, b):
    # log_lengthscales is a 1 x d row node
    lengthscales = apply('exp', log_lengthscales)
    distance = apply('sqdist', apply('div', a, lengthscales), apply('div', b, lengthscales))
    return apply('elementwise_mul', apply('exp', apply('scale', distance, factor=-0.5)),
                 apply('exp', log_signal_variance))


def cholesky_with_jitter(matrix):
    """
    Lower Cholesky factor of matrix + jitter * I.

    Jitter starts at 1e-10 and grows tenfold on failure up to 1e-4.

    Returns:
        tuple: (lower factor, jitter used)
    """
    identity = np.eye(matrix.shape[0])
    for level, jitter in enumerate(JITTER_LEVELS):
        try:
            factor = linalg.cholesky(matrix + jitter * identity, lower=True)
        except (linalg.LinAlgError, ValueError):
            continue
        if level > 0:
            logger.warning("Cholesky needed jitter %.0e on a %dx%d matrix", jitter, *matrix.shape)
        return factor, jitter
    raise CholeskyError(f"covariance of size {matrix.shape[0]} is not positive definite "
                        f"even with jitter {JITTER_LEVELS[-1]:.0e}")


@dataclass
class GpLayer:
    """
    One exact GP layer with constant mean and RBF kernel.

    Args:
        kernel (RbfKernel): Signal variance and per-dimension lengthscales.
        constant_mean (float): Prior mean shared by all output dimensions.
        log_noise_variance (float): log of the white-noise variance.
        inputs (np.ndarray): n x d_in training inputs.
        targets (np.ndarray): n x d_out training targets.
    """
    kernel: RbfKernel
    constant_mean: float = 0.0
    log_noise_variance: float = math.log(1e-2)
    inputs: np.ndarray = None
    targets: np.ndarray = None
    jitter: float = 0.0
    objective_trace: list = field(default_factory=list, repr=False)
    _factor: np.ndarray = field(default=None, init=False, repr=False)
    _alpha: np.ndarray = field(default=None, init=False, repr=False)

    @property
    def noise_variance(self):
        return math.exp(self.log_noise_variance)

    @property
    def fitted(self):
        return self._factor is not None

    @property
    def output_dim(self):
        return None if self.targets is None else self.targets.shape[1]

    def condition(self, inputs=None, targets=None):
        """
        Factorize K(Z, Z) + noise * I for the given (or stored) training data.

        Rows are sorted canonically first so the result does not depend on
        the order of the training points.
        """
        inputs = self.inputs if inputs is None else inputs
        targets = self.targets if targets is None else targets
        if inputs is None or targets is None:
            raise NotFittedError("layer has no training data to condition on")
        inputs = _as_inputs(inputs, self.kernel.input_dim)
        targets = np.asarray(targets, dtype=np.float64)
        if targets.ndim == 1:
            targets = targets.reshape(-1, 1)
        if len(targets) != len(inputs):
            raise DimensionError(f"condition: {len(inputs)} inputs but {len(targets)} targets")
        if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(targets))):
            raise ValidationError("training inputs and targets must be finite")

        keys = np.vstack([targets.T[::-1], inputs.T[::-1]])
        order = np.lexsort(keys)
        self.inputs, self.targets = inputs[order], targets[order]

        covariance = gram(self.kernel, self.inputs, self.inputs)
        covariance[np.diag_indices_from(covariance)] += self.noise_variance
        self._factor, self.jitter = cholesky_with_jitter(covariance)
        self._alpha = linalg.cho_solve((self._factor, True), self.targets - self.constant_mean)
        return self

    def posterior(self, x):
        """
        Posterior mean (m x d_out) and latent variance (m,) at the rows of x.

        The variance is returned as computed and may be slightly negative.
        """
        if not self.fitted:
            raise NotFittedError("layer is not conditioned on training data")
        x = _as_inputs(x, self.kernel.input_dim)
        cross = gram(self.kernel, x, self.inputs)
        mean = self.constant_mean + cross @ self._alpha
        v = linalg.solve_triangular(self._factor, cross.T, lower=True)
        variance = self.kernel.signal_variance - np.sum(v * v, axis=0)
        return mean, variance

    def copy(self):
        return GpLayer(
            kernel=RbfKernel(self.kernel.log_signal_variance, self.kernel.log_lengthscales.copy()),
            constant_mean=self.constant_mean,
            log_noise_variance=self.log_noise_variance,
            inputs=None if self.inputs is None else self.inputs.copy(),
            targets=None if self.targets is None else self.targets.copy(),
        )


def layer_sample(layer, x, eps):
    """mu(x) + eps * sqrt(var(x)) for standard-normal draws eps (m x d_out)."""
    mean, variance = layer.posterior(x)
    return mean + np.asarray(eps, dtype=np.float64) * np.sqrt(np.maximum(variance, 0.0))[:, None]


def log_marginal_likelihood(layer, inputs, targets):
    """log N(targets | constant_mean, K + noise * I), summed over output columns."""
    inputs = _as_inputs(inputs, layer.kernel.input_dim)
    targets = np.asarray(targets, dtype=np.float64).reshape(len(inputs), -1)
    covariance = gram(layer.kernel, inputs, inputs)
    covariance[np.diag_indices_from(covariance)] += layer.noise_variance
    factor, _ = cholesky_with_jitter(covariance)
    centered = targets - layer.constant_mean
    alpha = linalg.cho_solve((factor, True), centered)
    n, m = centered.shape
    return float(-0.5 * np.sum(centered * alpha) - m * np.sum(np.log(np.diag(factor)))
                 - 0.5 * n * m * math.log(2.0 * math.pi))


# Parameter packing for the optimizer: every parameter is a 2-D array.

def _layer_params(layer, prefix):
    return {
        f'{prefix}log_signal_variance': np.array([[layer.kernel.log_signal_variance]]),
        f'{prefix}log_lengthscales': layer.kernel.log_lengthscales.reshape(1, -1).copy(),
        f'{prefix}log_noise_variance': np.array([[layer.log_noise_variance]]),
        f'{prefix}constant_mean': np.array([[layer.constant_mean]]),
    }


def _model_params(model):
    params = _layer_params(model.layer1, 'l1.')
    params.update(_layer_params(model.layer2, 'l2.'))
    return params


def _layer_from_params(params, prefix, inputs=None, targets=None):
    return GpLayer(
        kernel=RbfKernel(params[f'{prefix}log_signal_variance'][0, 0],
                         params[f'{prefix}log_lengthscales'].ravel()),
        constant_mean=float(params[f'{prefix}constant_mean'][0, 0]),
        log_noise_variance=float(params[f'{prefix}log_noise_variance'][0, 0]),
        inputs=inputs,
        targets=targets,
    )


def _noisy_covariance(leaves, prefix, inputs, noise_floor=0.0):
    gram_node = _gram_node(leaves[f'{prefix}log_signal_variance'], leaves[f'{prefix}log_lengthscales'],
                           inputs, inputs)
    n = inputs.shape[0]
    identity = constant(np.eye(n))
    noise = apply('exp', leaves[f'{prefix}log_noise_variance'])
    if noise_floor > 0.0:
        noise = apply('add', noise, constant(noise_floor))
    covariance = apply('add', gram_node, apply('elementwise_mul', identity, noise))
    # jitter is chosen on the current values and enters as a constant; the
    # factor found on the way is the one every later solve uses
    factor, jitter = cholesky_with_jitter(covariance.value)
    jittered = apply('add', covariance, constant(jitter * np.eye(n)))
    jittered.cholesky = (factor, True)
    return gram_node, jittered


def _evaluate(objective, params, epoch, with_grad):
    with Tape():
        try:
            leaves = {name: make_leaf(value, requires_grad=with_grad) for name, value in params.items()}
            with np.errstate(all='ignore'):
                node = objective(leaves, epoch)
                value = node.item()
                if not math.isfinite(value):
                    return value, None
                if not with_grad:
                    return value, None
                backward(node)
        except (CholeskyError, ValidationError, linalg.LinAlgError):
            return math.nan, None
        grads = {name: leaf.grad.copy() for name, leaf in leaves.items()}
    if not all(np.all(np.isfinite(grad)) for grad in grads.values()):
        return math.nan, None
    return value, grads


def gradient_ascent(params, objective, steps, lr, label='gp', log_every=20, stop_when_stuck=False):
    """
    Fixed-step gradient ascent with per-step halving.

    Every step starts at lr and is halved while the candidate objective is
    lower than the current one or not finite. An epoch with no acceptable
    step keeps the parameters.

    Args:
        params (dict): Name -> 2-D array.
        objective (callable): objective(leaves, epoch) -> 1 x 1 Node.
        steps (int): Number of epochs.
        lr (float): Initial step size of every epoch.
        stop_when_stuck (bool): Return early once no step is accepted.

    Returns:
        tuple: (params, trace) where trace holds the objective after each epoch.
    """
    trace = []
    failures = 0

    def register_failure(epoch):
        nonlocal failures
        failures += 1
        if failures >= MAX_CONSECUTIVE_FAILURES:
            raise TrainingAbortedError(
                f"{label}: {failures} consecutive non-finite objectives at epoch {epoch}",
                epoch=epoch, trace=trace)

    for epoch in range(steps):
        value, grads = _evaluate(objective, params, epoch, with_grad=True)
        if grads is None:
            logger.warning("%s: non-finite objective at epoch %d, step rejected", label, epoch)
            register_failure(epoch)
            continue
        failures = 0

        step = lr
        accepted = None
        for _ in range(MAX_HALVINGS):
            candidate = {name: params[name] + step * grads[name] for name in params}
            candidate_value, _ = _evaluate(objective, candidate, epoch, with_grad=False)
            if not math.isfinite(candidate_value):
                register_failure(epoch)
                step *= 0.5
                continue
            failures = 0
            if candidate_value >= value:
                accepted = (candidate, candidate_value)
                break
            step *= 0.5

        if accepted is None:
            trace.append(value)
            if stop_when_stuck:
                logger.debug("%s: no ascent step at epoch %d, stopping", label, epoch)
                break
            logger.debug("%s: step rejected at epoch %d", label, epoch)
        else:
            params, value = accepted
            trace.append(value)
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("%s epoch %d/%d: objective %.6g (step %.3g)", label, epoch + 1, steps, value, step)
    return params, trace


def default_layer(inputs, targets, noise_fraction=0.1):
    """Data-driven starting hyperparameters for a layer on (inputs, targets)."""
    inputs = _as_inputs(inputs)
    targets = np.asarray(targets, dtype=np.float64).reshape(len(inputs), -1)
    target_variance = max(float(np.var(targets)), 1e-6)
    spread = np.maximum(inputs.std(axis=0), 1e-6)
    return GpLayer(
        kernel=RbfKernel(math.log(target_variance), np.log(spread)),
        constant_mean=float(np.mean(targets)),
        log_noise_variance=math.log(max(noise_fraction * target_variance, 1e-8)),
    )


def gpr_fit(inputs, targets, init=None, steps=200, lr=0.1, log_every=0):
    """
    Fit an exact GP by gradient ascent on the log marginal likelihood.

    The optimized quantity is the log marginal likelihood divided by n; the
    layer's objective_trace holds it for every accepted step, so the trace is
    non-decreasing.

    Args:
        inputs (array): n x d inputs (a vector is one column).
        targets (array): n targets.
        init (GpLayer): Starting hyperparameters; default_layer when omitted.
        steps (int): Maximum number of ascent steps.
        lr (float): Step size.

    Returns:
        GpLayer: Conditioned layer.
    """
    inputs = _as_inputs(inputs)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    if len(inputs) < 2:
        raise ValueError(f"at least 2 training points are required, got {len(inputs)}")
    if len(targets) != len(inputs):
        raise DimensionError(f"gpr_fit: {len(inputs)} inputs but {len(targets)} targets")
    if not np.all(np.isfinite(targets)):
        raise ValidationError("targets must be finite")

    layer = init.copy() if init is not None else default_layer(inputs, targets)
    n = len(inputs)

    def objective(leaves, _epoch):
        x = constant(inputs)
        _, covariance = _noisy_covariance(leaves, '', x)
        centered = apply('sub', constant(targets), leaves['constant_mean'])
        return apply('scale', gaussian_log_likelihood(centered, covariance), factor=1.0 / n)

    params = _layer_params(layer, '')
    initial, _ = _evaluate(objective, params, 0, with_grad=False)
    if not math.isfinite(initial):
        raise CholeskyError("log marginal likelihood is not finite at the initial hyperparameters")
    params, trace = gradient_ascent(params, objective, steps, lr, label='gpr',
                                    log_every=log_every, stop_when_stuck=True)
    fitted = _layer_from_params(params, '', inputs, targets)
    fitted.objective_trace = [initial] + trace
    fitted.condition()
    logger.debug("GPR fit: signal %.4g, lengthscales %s, noise %.4g", fitted.kernel.signal_variance,
                 np.array2string(fitted.kernel.lengthscales, precision=4), fitted.noise_variance)
    return fitted


def gpr_predict(layer, x, include_noise=False):
    """
    Posterior prediction at one input.

    Returns:
        PredictionResult: variance is the latent variance, or the observation
        variance when include_noise is set; latent_variance always holds the
        latent one.
    """
    mean, latent = layer.posterior(np.atleast_1d(np.asarray(x, dtype=np.float64)).reshape(1, -1))
    latent = max(float(latent[0]), 0.0)
    variance = latent + layer.noise_variance if include_noise else latent
    return PredictionResult.from_moments(mean[0, 0], variance, latent)


@dataclass
class DgpModel:
    """Two GP layers composed by sampling, with S Monte Carlo draws per prediction."""
    layer1: GpLayer
    layer2: GpLayer
    sample_count: int = DEFAULT_SAMPLE_COUNT
    seed: int = 0
    clamp_count: int = 0
    _draws: tuple = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError(f"sample_count must be at least 1, got {self.sample_count}")

    @property
    def hidden_width(self):
        return self.layer1.targets.shape[1]

    @property
    def input_dim(self):
        return self.layer1.kernel.input_dim

    def noise_draws(self):
        """
        Standard-normal draws (S x H for layer 1, S for layer 2).

        Draw s comes from its own stream seeded by (seed, s), so the set does
        not depend on evaluation order.
        """
        if self._draws is None or len(self._draws[1]) != self.sample_count:
            first = np.empty((self.sample_count, self.hidden_width))
            second = np.empty(self.sample_count)
            for s in range(self.sample_count):
                rng = np.random.default_rng(np.random.SeedSequence([self.seed, s]))
                draw = rng.standard_normal(self.hidden_width + 1)
                first[s], second[s] = draw[:-1], draw[-1]
            self._draws = (first, second)
        return self._draws


def hidden_targets(features, hidden_width):
    """
    Layer-1 targets: the features standardized per column, columns repeated
    cyclically up to the hidden width.
    """
    features = _as_inputs(features)
    centered = features - features.mean(axis=0)
    spread = np.sqrt(np.maximum(np.mean(centered * centered, axis=0), SQRT_FLOOR))
    return (centered / spread)[:, [k % features.shape[1] for k in range(hidden_width)]]


def _hidden_targets_node(inputs, hidden_width):
    # same as hidden_targets, built in the graph so gradients reach the inputs
    n, d = inputs.shape
    centered = apply('sub', inputs, apply('scale', apply('sum', inputs, axis=0), factor=1.0 / n))
    variance = apply('scale', apply('sum', apply('elementwise_mul', centered, centered), axis=0), factor=1.0 / n)
    standardized = apply('div', centered, apply('sqrt', variance))
    if hidden_width == d:
        return standardized
    columns = apply('transpose', standardized)
    picked = [apply('slice', columns, rows=slice(k % d, k % d + 1)) for k in range(hidden_width)]
    return apply('transpose', apply('concat_rows', *picked))


def difference_noise_variance(values):
    """
    White-noise variance of an ordered series from successive differences:
    sum((y[k+1] - y[k])^2) / (2 (n - 1)).
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if len(values) < 2:
        return 0.0
    return float(np.sum(np.diff(values) ** 2) / (2.0 * (len(values) - 1)))


def dgp_init(features, residuals, hidden_width=2, sample_count=DEFAULT_SAMPLE_COUNT, seed=0):
    """
    Starting model for training.

    Layer-1 targets (the hidden outputs at the training features) are the
    standardized features, see hidden_targets. They follow the features
    during training and are not free parameters.

    Returns:
        DgpModel: Unconditioned layers carrying their training data.
    """
    features = _as_inputs(features)
    residuals = np.asarray(residuals, dtype=np.float64).reshape(-1, 1)
    if len(residuals) != len(features):
        raise DimensionError(f"dgp_init: {len(features)} feature rows but {len(residuals)} residuals")
    if hidden_width < 1:
        raise ValueError(f"hidden_width must be at least 1, got {hidden_width}")

    spread = np.maximum(features.std(axis=0), 1e-6)
    hidden = hidden_targets(features, hidden_width)

    layer1 = GpLayer(
        kernel=RbfKernel(0.0, np.log(spread)),
        constant_mean=0.0,
        log_noise_variance=math.log(1e-3),
        inputs=features,
        targets=hidden,
    )
    layer2 = default_layer(hidden, residuals)
    layer2.kernel.log_lengthscales = np.zeros(hidden_width)
    layer2.inputs, layer2.targets = hidden, residuals
    return DgpModel(layer1, layer2, sample_count=sample_count, seed=seed)


def _fit_dgp(model, residuals, inputs_fn, extra_params, epochs, lr, seed, train_samples, log_every, label,
             noise_floor=0.0):
    residuals = np.asarray(residuals, dtype=np.float64).reshape(-1, 1)
    n = len(residuals)
    hidden_width = model.hidden_width
    rng = np.random.default_rng(seed)
    epoch_draws = {}

    def draws(epoch):
        if epoch not in epoch_draws:
            epoch_draws.clear()
            epoch_draws[epoch] = rng.standard_normal((train_samples, n, hidden_width))
        return epoch_draws[epoch]

    def objective(leaves, epoch):
        x = inputs_fn(leaves)
        gram1, covariance1 = _noisy_covariance(leaves, 'l1.', x)
        mean1 = leaves['l1.constant_mean']
        alpha = apply('solve_spd', covariance1, apply('sub', _hidden_targets_node(x, hidden_width), mean1))
        posterior_mean = apply('add', apply('matmul', gram1, alpha), mean1)
        explained = apply('sum', apply('elementwise_mul', gram1, apply('solve_spd', covariance1, gram1)), axis=0)
        posterior_var = apply('transpose', apply('sub', apply('exp', leaves['l1.log_signal_variance']), explained))
        posterior_std = apply('sqrt', posterior_var)

        # layer-1 term averaged over the hidden draw in closed form:
        # E log N(mu + eps * std) = log N(mu) - H/2 * sum_i [C^-1]_ii var_i
        identity = constant(np.eye(n))
        inverse_diag = apply('sum', apply('elementwise_mul', apply('solve_spd', covariance1, identity), identity), axis=1)
        spread_penalty = apply('sum', apply('elementwise_mul', inverse_diag, posterior_var))
        first = apply('add', gaussian_log_likelihood(apply('sub', posterior_mean, mean1), covariance1),
                      apply('scale', spread_penalty, factor=-0.5 * hidden_width))

        total = apply('scale', first, factor=float(train_samples))
        for eps in draws(epoch):
            hidden = apply('add', posterior_mean, apply('elementwise_mul', constant(eps), posterior_std))
            _, covariance2 = _noisy_covariance(leaves, 'l2.', hidden, noise_floor)
            second = gaussian_log_likelihood(apply('sub', constant(residuals), leaves['l2.constant_mean']),
                                             covariance2)
            total = apply('add', total, second)
        return apply('scale', total, factor=1.0 / (n * train_samples))

    params = dict(extra_params)
    params.update(_model_params(model))
    params, trace = gradient_ascent(params, objective, epochs, lr, label=label, log_every=log_every)
    return params, trace


def _assemble(params, features, residuals, template, noise_floor=0.0):
    features = _as_inputs(features)
    layer1 = _layer_from_params(params, 'l1.', features, hidden_targets(features, template.hidden_width))
    layer1.condition()
    # layer 2 is conditioned at the mean of the training-time hidden samples
    hidden_mean, _ = layer1.posterior(features)
    layer2 = _layer_from_params(params, 'l2.', hidden_mean, np.asarray(residuals, dtype=np.float64).reshape(-1, 1))
    if noise_floor > 0.0:
        layer2.log_noise_variance = math.log(noise_floor + layer2.noise_variance)
    layer2.condition()
    return DgpModel(layer1, layer2, sample_count=template.sample_count, seed=template.seed)


def dgp_train(model, lstm, profiles, residuals, epochs=200, lr=0.1, seed=0, train_samples=1, log_every=20,
              noise_floor=None):
    """
    Train the deep GP and the LSTM extractor together.

    Each epoch draws fresh noise for the hidden layer, so the objective is
    the log likelihood of the residuals under layer 2 at sampled hidden
    inputs plus that of the hidden samples under layer 1 at the features,
    divided by the number of points. The layer-1 part is averaged over the
    hidden draw in closed form. Layer-1 targets are the standardized
    features, so the likelihood reaches the extractor through both the
    inputs and the targets of layer 1. The layer-2 noise variance is the
    trained value plus noise_floor.

    Args:
        model (DgpModel): Output of dgp_init.
        lstm (LstmWeights): Extractor weights.
        profiles (list): Normalized training CycleProfile objects.
        residuals (array): Training residuals, one per profile.
        epochs (int): Number of epochs.
        lr (float): Step size.
        seed (int): Seed of the training noise.
        train_samples (int): Noise sets averaged per epoch.
        noise_floor (float): Lower bound of the layer-2 noise variance; by
            default difference_noise_variance of the residuals in cycle order.

    Returns:
        tuple: (DgpModel, LstmWeights, loss trace)
    """
    residuals = np.asarray(residuals, dtype=np.float64)
    if len(profiles) != len(residuals):
        raise DimensionError(f"dgp_train: {len(profiles)} profiles but {len(residuals)} residuals")
    if len(profiles) < 10:
        raise ValueError(f"at least 10 training cycles are required, got {len(profiles)}")
    if train_samples < 1:
        raise ValueError(f"train_samples must be at least 1, got {train_samples}")
    if noise_floor is None:
        noise_floor = difference_noise_variance(residuals)

    shapes = {name: value.shape for name, value in lstm.tensors.items()}
    lstm_params = {f'lstm.{name}': (value.reshape(-1, 1) if value.ndim == 1 else value.copy())
                   for name, value in lstm.tensors.items()}

    def inputs_fn(leaves):
        weights = {name[len('lstm.'):]: leaf for name, leaf in leaves.items() if name.startswith('lstm.')}
        return apply('transpose', lstm_forward_batch(weights, profiles, lstm.readout))

    if epochs > 0:
        params, trace = _fit_dgp(model, residuals, inputs_fn, lstm_params, epochs, lr, seed,
                                 train_samples, log_every, label='dgp', noise_floor=noise_floor)
        tensors = {name: params[f'lstm.{name}'].reshape(shape) for name, shape in shapes.items()}
        lstm = LstmWeights(tensors, lstm.readout)
    else:
        params, trace, noise_floor = _model_params(model), [], 0.0

    features = extract_features(lstm, profiles)
    trained = _assemble(params, features, residuals, model, noise_floor)
    logger.debug("DGP layer-2 noise %.4g (floor %.4g)", trained.layer2.noise_variance, noise_floor)
    if trace:
        logger.info("DGP trained for %d epochs: objective %.6g -> %.6g", epochs, trace[0], trace[-1])
    return trained, lstm, trace


def dgp_train_inputs(model, inputs, targets, epochs=200, lr=0.1, seed=0, train_samples=1, log_every=20,
                     noise_floor=0.0):
    """Train a deep GP on fixed inputs (no extractor)."""
    inputs = _as_inputs(inputs)
    targets = np.asarray(targets, dtype=np.float64)
    if epochs > 0:
        params, trace = _fit_dgp(model, targets, lambda _leaves: constant(inputs), {}, epochs, lr, seed,
                                 train_samples, log_every, label='dgp-inputs', noise_floor=noise_floor)
    else:
        params, trace, noise_floor = _model_params(model), [], 0.0
    return _assemble(params, inputs, targets, model, noise_floor), trace


def _forward_samples(model, x, first_eps, second_eps):
    x = _as_inputs(np.atleast_1d(np.asarray(x, dtype=np.float64)).reshape(1, -1), model.input_dim)
    mean1, var1 = model.layer1.posterior(x)
    clamped = int(np.sum(var1 < 0))
    hidden = mean1 + np.asarray(first_eps, dtype=np.float64) * math.sqrt(max(float(var1[0]), 0.0))
    mean2, var2 = model.layer2.posterior(hidden)
    clamped += int(np.sum(var2 < 0))
    if clamped:
        model.clamp_count += clamped
        logger.debug("Clamped %d negative posterior variances", clamped)
    return mean2[:, 0] + np.asarray(second_eps, dtype=np.float64) * np.sqrt(np.maximum(var2, 0.0))


def dgp_forward_sample(model, x, noise_draws):
    """
    One sample of the composed layers at x.

    Args:
        model (DgpModel): Conditioned model.
        x (array): Input vector.
        noise_draws (tuple): (eps1 with one value per hidden dimension, eps2).

    Returns:
        float: Layer-2 output sample.
    """
    first_eps, second_eps = noise_draws
    first_eps = np.asarray(first_eps, dtype=np.float64).reshape(1, model.hidden_width)
    return float(_forward_samples(model, x, first_eps, np.array([float(second_eps)]))[0])


def dgp_predict(model, x, noise_draws=None):
    """
    Monte Carlo prediction at x.

    Mean and variance are the sample moments of S forward samples; the
    variance adds the layer-2 noise variance.

    Args:
        noise_draws (tuple): Optional (S x H, S) draws replacing the model's own.
    """
    first_eps, second_eps = noise_draws if noise_draws is not None else model.noise_draws()
    samples = _forward_samples(model, x, np.atleast_2d(first_eps), np.atleast_1d(second_eps))
    spread = float(np.var(samples))
    return PredictionResult.from_moments(float(np.mean(samples)), spread + model.layer2.noise_variance, spread)


def save_dgp(model, path):
    tensors = {}
    for prefix, layer in (('l1.', model.layer1), ('l2.', model.layer2)):
        for name, value in _layer_params(layer, prefix).items():
            tensors[name] = value
        tensors[f'{prefix}inputs'] = layer.inputs
        tensors[f'{prefix}targets'] = layer.targets
    util.save_tensors(path, CHECKPOINT_KIND, tensors,
                      {'sample_count': model.sample_count, 'seed': model.seed})


def load_dgp(path):
    tensors, meta = util.load_tensors(path, CHECKPOINT_KIND)
    layers = []
    for prefix in ('l1.', 'l2.'):
        layer = _layer_from_params(tensors, prefix, tensors[f'{prefix}inputs'], tensors[f'{prefix}targets'])
        layers.append(layer.condition())
    return DgpModel(layers[0], layers[1], sample_count=int(meta['sample_count']), seed=int(meta['seed']))
