"""
Explicit mean function m(i; theta) = theta1 + theta2 * exp(theta3 * i)
fitted to training capacities by Levenberg-Marquardt least squares.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 500
TOLERANCE = 1e-10
INITIAL_DAMPING = 1e-3
DAMPING_FACTOR = 10.0
MAX_DAMPING = 1e16


class EmfOverflowError(OverflowError):
    """Raised when exp(theta3 * i) overflows."""


@dataclass(frozen=True)
class EmfParams:
    theta1: float
    theta2: float
    theta3: float

    def __post_init__(self):
        if not all(math.isfinite(value) for value in self.as_array()):
            raise ValueError(f"EMF parameters must be finite, got {self.as_array()}")

    def as_array(self):
        return np.array([self.theta1, self.theta2, self.theta3], dtype=np.float64)

    @classmethod
    def from_array(cls, values):
        return cls(float(values[0]), float(values[1]), float(values[2]))


@dataclass
class EmfFit:
    params: EmfParams
    residuals: np.ndarray
    rms_residual: float
    converged: bool
    iterations: int
    objective_trace: list = field(default_factory=list, repr=False)


def emf_eval(params, i):
    """Evaluate theta1 + theta2 * e^(theta3 * i) at one cycle index."""
    try:
        growth = math.exp(params.theta3 * float(i))
    except OverflowError:
        raise EmfOverflowError(f"exp({params.theta3} * {i}) overflows") from None
    return params.theta1 + params.theta2 * growth


def emf_curve(params, indices):
    """Vectorized emf_eval over an array of cycle indices."""
    indices = np.asarray(indices, dtype=np.float64)
    with np.errstate(over='raise'):
        try:
            growth = np.exp(params.theta3 * indices)
        except FloatingPointError:
            raise EmfOverflowError(f"exp({params.theta3} * i) overflows on the given range") from None
    return params.theta1 + params.theta2 * growth


def default_init(cycle_indices, capacities):
    """
    Starting point for the fit.

    theta1 is the last capacity, theta2 the drop from first to last, and the
    rate sign makes the exponential term shrink toward the end of the data.
    """
    capacities = np.asarray(capacities, dtype=np.float64)
    if len(capacities) < 4:
        raise ValueError(f"at least 4 points are required, got {len(capacities)}")
    n_train = len(capacities)
    first, last = float(capacities[0]), float(capacities[-1])
    rate = 1.0 / n_train if last > first else -1.0 / n_train
    return EmfParams(last, first - last, rate)


def _three_block_init(indices, capacities):
    # ratio of consecutive block-mean differences is exp(theta3 * block length)
    block = len(indices) // 3
    if block < 1:
        return None
    x, y = indices[-3 * block:], capacities[-3 * block:]
    s1, s2, s3 = (y[k * block:(k + 1) * block].mean() for k in range(3))
    if s2 == s1 or s3 == s2:
        return None
    ratio = (s3 - s2) / (s2 - s1)
    if not ratio > 0 or ratio == 1.0:
        return None
    span = float(x[block] - x[0])
    if span <= 0:
        return None
    theta3 = math.log(ratio) / span
    with np.errstate(over="ignore"):
        basis = np.column_stack([np.ones_like(indices), np.exp(theta3 * indices)])
    if not np.all(np.isfinite(basis)):
        return None
    (theta1, theta2), *_ = np.linalg.lstsq(basis, capacities, rcond=None)
    if not (math.isfinite(theta1) and math.isfinite(theta2)):
        return None
    return EmfParams(float(theta1), float(theta2), float(theta3))


def _residuals(theta, indices, capacities):
    with np.errstate(over='ignore', invalid='ignore'):
        return capacities - (theta[0] + theta[1] * np.exp(theta[2] * indices))


def _jacobian(theta, indices):
    # d m / d theta = [1, e^(theta3 i), theta2 i e^(theta3 i)]
    growth = np.exp(theta[2] * indices)
    return np.column_stack([np.ones_like(indices), growth, theta[1] * indices * growth])


def _levenberg_marquardt(theta, indices, capacities):
    residuals = _residuals(theta, indices, capacities)
    objective = float(residuals @ residuals)
    trace = [objective]
    damping = INITIAL_DAMPING
    converged = False
    iteration = 0

    while iteration < MAX_ITERATIONS:
        iteration += 1
        jac = _jacobian(theta, indices)
        gradient = jac.T @ residuals
        if objective == 0.0 or np.linalg.norm(gradient) < TOLERANCE:
            converged = True
            break
        normal = jac.T @ jac
        scaling = np.maximum(np.diag(normal), 1e-12 * max(np.max(np.diag(normal)), 1.0))

        accepted = False
        while damping < MAX_DAMPING:
            try:
                step = np.linalg.solve(normal + damping * np.diag(scaling), gradient)
            except np.linalg.LinAlgError:
                damping *= DAMPING_FACTOR
                continue
            candidate = theta + step
            candidate_residuals = _residuals(candidate, indices, capacities)
            candidate_objective = float(candidate_residuals @ candidate_residuals)
            if np.isfinite(candidate_objective) and candidate_objective <= objective:
                accepted = True
                break
            damping *= DAMPING_FACTOR

        if not accepted:
            # no descent direction left at machine precision
            converged = True
            break

        decrease = (objective - candidate_objective) / objective
        theta, residuals, objective = candidate, candidate_residuals, candidate_objective
        trace.append(objective)
        damping = max(damping / DAMPING_FACTOR, 1e-15)
        if decrease < TOLERANCE:
            converged = True
            break

    return theta, objective, converged, iteration, trace


def fit_emf(cycle_indices, capacities, init=None):
    """
    Least-squares fit of the explicit mean function.

    Args:
        cycle_indices (array): Strictly increasing training cycle indices.
        capacities (array): Training capacities in Ah.
        init (EmfParams): Optional starting point. Without one the fit starts
            from default_init and from a three-block estimate of the rate and
            keeps the better result.

    Returns:
        EmfFit: Fitted parameters, training residuals and convergence flags.
    """
    indices = np.asarray(cycle_indices, dtype=np.float64)
    capacities = np.asarray(capacities, dtype=np.float64)
    if len(indices) != len(capacities):
        raise ValueError("cycle indices and capacities differ in length")
    if len(indices) < 4:
        raise ValueError(f"at least 4 points are required, got {len(indices)}")
    if np.any(np.diff(indices) <= 0):
        raise ValueError("cycle indices must be strictly increasing")

    starts = [init] if init is not None else [default_init(indices, capacities),
                                              _three_block_init(indices, capacities)]
    best = None
    for start in starts:
        if start is None:
            continue
        result = _levenberg_marquardt(start.as_array(), indices, capacities)
        if not np.isfinite(result[1]):
            continue
        if best is None or result[1] < best[1]:
            best = result

    theta, objective, converged, iterations, trace = best
    params = EmfParams.from_array(theta)
    residuals = capacities - emf_curve(params, indices)
    rms = float(np.sqrt(np.mean(residuals ** 2)))
    if converged:
        logger.info("EMF fit converged in %d iterations: theta=(%.6g, %.6g, %.6g), rms=%.3g",
                    iterations, params.theta1, params.theta2, params.theta3, rms)
    else:
        logger.warning("EMF fit did not converge within %d iterations (rms=%.3g)", MAX_ITERATIONS, rms)
    return EmfFit(params=params, residuals=residuals, rms_residual=rms,
                  converged=converged, iterations=iterations, objective_trace=trace)


def fit_linear_trend(cycle_indices, capacities):
    """
    Least-squares line a + b * i, the linear-mean ablation of the curve fit.

    Returns:
        LinearTrend: Callable trend with the fitted intercept and slope.
    """
    indices = np.asarray(cycle_indices, dtype=np.float64)
    capacities = np.asarray(capacities, dtype=np.float64)
    basis = np.column_stack([np.ones_like(indices), indices])
    (intercept, slope), *_ = np.linalg.lstsq(basis, capacities, rcond=None)
    return LinearTrend(float(intercept), float(slope))


@dataclass(frozen=True)
class LinearTrend:
    intercept: float
    slope: float

    def __call__(self, i):
        return self.intercept + self.slope * float(i)

    def curve(self, indices):
        return self.intercept + self.slope * np.asarray(indices, dtype=np.float64)
