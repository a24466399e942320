"""
Two-layer LSTM feature extractor: each 20 x 3 cycle profile becomes a
2-dimensional feature vector.

Gate rows are stacked in the order input, forget, cell, output, so for a
hidden size H the forget gate occupies rows H:2H of every weight matrix and
bias. Cycles are independent sequences; several cycles are run side by side
as the columns of one matrix.
"""

import logging
from dataclasses import dataclass

import numpy as np

import util
from autodiff import DimensionError, Tape, apply, constant, make_leaf

logger = logging.getLogger(__name__)

HIDDEN_SIZE = 64
INPUT_SIZE = 3
FEATURE_DIM = 2
GATES = 4
LAYERS = 2
READOUTS = ('last', 'mean')
CHECKPOINT_KIND = 'lstm'


@dataclass
class LstmWeights:
    """
    Named weight tensors:

        W1 (4H x 3), U1 (4H x H), b1 (4H)   layer 1
        W2 (4H x H), U2 (4H x H), b2 (4H)   layer 2
        P (2 x H), p_bias (2)               linear projection of the readout
    """
    tensors: dict
    readout: str = 'last'

    @property
    def hidden(self):
        return self.tensors['U1'].shape[1]

    @property
    def feature_dim(self):
        return self.tensors['P'].shape[0]

    def leaves(self, requires_grad=True):
        """Autodiff leaves for every tensor; vectors become column nodes."""
        return {name: make_leaf(value, requires_grad=requires_grad) for name, value in self.tensors.items()}


def lstm_init(seed, hidden=HIDDEN_SIZE, input_size=INPUT_SIZE, feature_dim=FEATURE_DIM, readout='last'):
    """
    Seeded initialization.

    Weights are uniform in [-1/sqrt(H), 1/sqrt(H)]; biases are zero except the
    forget-gate slice, which starts at 1.0.
    """
    if readout not in READOUTS:
        raise ValueError(f"readout must be one of {READOUTS}, got '{readout}'")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(hidden)

    def uniform(rows, cols):
        return rng.uniform(-bound, bound, size=(rows, cols))

    def gate_bias():
        bias = np.zeros(GATES * hidden)
        bias[hidden:2 * hidden] = 1.0
        return bias

    tensors = {
        'W1': uniform(GATES * hidden, input_size),
        'U1': uniform(GATES * hidden, hidden),
        'b1': gate_bias(),
        'W2': uniform(GATES * hidden, hidden),
        'U2': uniform(GATES * hidden, hidden),
        'b2': gate_bias(),
        'P': uniform(feature_dim, hidden),
        'p_bias': np.zeros(feature_dim),
    }
    return LstmWeights(tensors, readout)


def _layer(weights_in, weights_rec, bias, inputs, hidden):
    batch = inputs[0].shape[1]
    h = constant(np.zeros((hidden, batch)))
    c = constant(np.zeros((hidden, batch)))
    outputs = []
    for x in inputs:
        z = apply('add', apply('add', apply('matmul', weights_in, x), apply('matmul', weights_rec, h)), bias)
        i = apply('sigmoid', apply('slice', z, rows=slice(0, hidden)))
        f = apply('sigmoid', apply('slice', z, rows=slice(hidden, 2 * hidden)))
        g = apply('tanh', apply('slice', z, rows=slice(2 * hidden, 3 * hidden)))
        o = apply('sigmoid', apply('slice', z, rows=slice(3 * hidden, 4 * hidden)))
        c = apply('add', apply('elementwise_mul', f, c), apply('elementwise_mul', i, g))
        h = apply('elementwise_mul', o, apply('tanh', c))
        outputs.append(h)
    return outputs


def _profile_batch(profiles):
    batch = np.stack([getattr(profile, 'matrix', profile) for profile in profiles]).astype(np.float64)
    if batch.ndim != 3 or batch.shape[1:] != (20, INPUT_SIZE):
        raise DimensionError(f"lstm_forward: profiles must be 20x{INPUT_SIZE}, got {batch.shape[1:]}")
    return batch


def lstm_forward_batch(leaves, profiles, readout='last'):
    """
    Run the recurrence over several profiles at once.

    Args:
        leaves (dict): Nodes named as in LstmWeights.
        profiles (list): CycleProfile objects or 20 x 3 arrays.
        readout (str): 'last' takes h_20 of layer 2, 'mean' averages over steps.

    Returns:
        Node: feature_dim x batch matrix, one column per profile.
    """
    batch = _profile_batch(profiles)
    hidden = leaves['U1'].shape[1]
    steps = [constant(batch[:, t, :].T) for t in range(batch.shape[1])]

    first = _layer(leaves['W1'], leaves['U1'], leaves['b1'], steps, hidden)
    second = _layer(leaves['W2'], leaves['U2'], leaves['b2'], first, hidden)

    if readout == 'last':
        state = second[-1]
    elif readout == 'mean':
        state = second[0]
        for h in second[1:]:
            state = apply('add', state, h)
        state = apply('scale', state, factor=1.0 / len(second))
    else:
        raise ValueError(f"readout must be one of {READOUTS}, got '{readout}'")
    return apply('add', apply('matmul', leaves['P'], state), leaves['p_bias'])


def lstm_forward(weights, profile, leaves=None):
    """
    Feature vector of one profile as a feature_dim x 1 Node.

    Pass leaves to differentiate with respect to the weights.
    """
    matrix = np.asarray(getattr(profile, 'matrix', profile))
    if matrix.shape != (20, INPUT_SIZE):
        raise DimensionError(f"lstm_forward: profile must be 20x{INPUT_SIZE}, got {matrix.shape}")
    if leaves is None:
        leaves = weights.leaves(requires_grad=False)
    return lstm_forward_batch(leaves, [matrix], weights.readout)


def extract_features(weights, cycles):
    """
    Apply the extractor to every cycle independently.

    Returns:
        np.ndarray: N x feature_dim features in input order.
    """
    if len(cycles) == 0:
        return np.zeros((0, weights.feature_dim))
    with Tape():
        features = lstm_forward_batch(weights.leaves(requires_grad=False), cycles, weights.readout)
        return features.value.T.copy()


def save_lstm(weights, path):
    util.save_tensors(path, CHECKPOINT_KIND, weights.tensors, {'readout': weights.readout})


def load_lstm(path):
    tensors, meta = util.load_tensors(path, CHECKPOINT_KIND)
    return LstmWeights(tensors, meta.get('readout', 'last'))

