"""
Reverse-mode automatic differentiation over dense float64 matrices.

Every value is a 2-D numpy array. Nodes remember their parents together with
a vector-Jacobian closure, and are recorded on the active Tape in creation
order, so the tape is always topologically sorted. Outside a `with Tape()`
scope nodes are not retained by any tape.

A typical workflow is:

    with Tape():
        W = make_leaf(w, requires_grad=True)
        loss = apply('sum', apply('tanh', apply('matmul', W, v)))
        backward(loss)
    W.grad  # d loss / d W

Broadcasting is limited to a row vector (1 x m), a column vector (n x 1) or a
scalar (1 x 1) against an n x m matrix.
"""

import itertools
import logging

import numpy as np
from scipy import linalg
from scipy.special import expit

logger = logging.getLogger(__name__)

SQRT_FLOOR = 1e-12
LOG_2PI = float(np.log(2.0 * np.pi))


class ValidationError(ValueError):
    """Raised when a leaf is created from non-finite values."""


class DimensionError(ValueError):
    """Raised when operand shapes do not conform to an operation."""


class Tape:
    """
    Ordered record of the nodes created while the tape is active.

    Use as a context manager to scope a computation; the previous tape is
    restored on exit and the recorded nodes can be released with reset().
    """

    def __init__(self):
        self.nodes = []
        self._previous = None

    def record(self, node):
        self.nodes.append(node)

    def reset(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        global _ACTIVE_TAPE
        self._previous = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._previous
        self._previous = None
        self.reset()
        return False


class _DetachedTape(Tape):
    """Ambient tape used outside any scope; it keeps no nodes."""

    def record(self, node):
        pass


_ACTIVE_TAPE = _DetachedTape()
_NODE_COUNTER = itertools.count()


def current_tape():
    """Return the tape new nodes are recorded on."""
    return _ACTIVE_TAPE


class Node:
    """
    A matrix value in the computation graph.

    `cholesky` may hold a (lower factor, True) pair of the value; solve_spd and
    logdet_spd factorize on first use and reuse it afterwards.
    """

    __slots__ = ('value', 'grad', 'parents', 'requires_grad', 'op', 'index', 'cholesky')

    def __init__(self, value, parents=(), op='leaf', requires_grad=False):
        self.value = value
        self.grad = np.zeros_like(value)
        self.parents = tuple(parents)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p, _ in self.parents)
        self.op = op
        self.cholesky = None
        self.index = next(_NODE_COUNTER)
        _ACTIVE_TAPE.record(self)

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value[0, 0])

    def backward(self):
        backward(self)

    def __add__(self, other):
        return apply('add', self, _as_node(other))

    def __radd__(self, other):
        return apply('add', _as_node(other), self)

    def __sub__(self, other):
        return apply('sub', self, _as_node(other))

    def __rsub__(self, other):
        return apply('sub', _as_node(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply('scale', self, factor=float(other))
        return apply('elementwise_mul', self, _as_node(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return apply('matmul', self, other)

    def __neg__(self):
        return apply('scale', self, factor=-1.0)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"


def _as_matrix(values):
    matrix = np.array(values, dtype=np.float64)
    if matrix.ndim == 0:
        matrix = matrix.reshape(1, 1)
    elif matrix.ndim == 1:
        matrix = matrix.reshape(-1, 1)
    elif matrix.ndim > 2:
        raise DimensionError(f"leaf: expected at most 2 dimensions, got shape {matrix.shape}")
    return matrix


def _as_node(value):
    if isinstance(value, Node):
        return value
    return make_leaf(value, requires_grad=False)


def make_leaf(values, requires_grad=False):
    """
    Create an input node.

    Args:
        values: Scalar, vector (stored as a column) or matrix.
        requires_grad (bool): Whether backward() accumulates a gradient here.

    Returns:
        Node: Leaf node with an empty parent set.
    """
    matrix = _as_matrix(values)
    if not np.all(np.isfinite(matrix)):
        raise ValidationError("leaf values must be finite")
    return Node(matrix, op='leaf', requires_grad=requires_grad)


def constant(values):
    return make_leaf(values, requires_grad=False)


def zero_gradients(nodes):
    """Reset accumulated gradients of the given nodes to zero."""
    for node in nodes:
        node.grad = np.zeros_like(node.value)


# Broadcasting rules

def _broadcast_shape(op, a, b):
    (n, m), (p, q) = a.shape, b.shape
    rows = n if n == p or p == 1 else (p if n == 1 else None)
    cols = m if m == q or q == 1 else (q if m == 1 else None)
    if rows is None or cols is None:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return rows, cols


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _cholesky(node, op):
    if node.shape[0] != node.shape[1]:
        raise DimensionError(f"{op}: expected a square matrix, got shape {node.shape}")
    if node.cholesky is None:
        node.cholesky = linalg.cho_factor(node.value, lower=True, check_finite=False)
    return node.cholesky


# Primitives. Each returns a new Node whose parents carry vector-Jacobian closures.

def _add(a, b):
    _broadcast_shape('add', a, b)
    return Node(a.value + b.value,
                ((a, lambda g: _unbroadcast(g, a.shape)),
                 (b, lambda g: _unbroadcast(g, b.shape))), 'add')


def _sub(a, b):
    _broadcast_shape('sub', a, b)
    return Node(a.value - b.value,
                ((a, lambda g: _unbroadcast(g, a.shape)),
                 (b, lambda g: _unbroadcast(-g, b.shape))), 'sub')


def _elementwise_mul(a, b):
    _broadcast_shape('elementwise_mul', a, b)
    return Node(a.value * b.value,
                ((a, lambda g: _unbroadcast(g * b.value, a.shape)),
                 (b, lambda g: _unbroadcast(g * a.value, b.shape))), 'elementwise_mul')


def _div(a, b):
    _broadcast_shape('div', a, b)
    out = a.value / b.value
    return Node(out,
                ((a, lambda g: _unbroadcast(g / b.value, a.shape)),
                 (b, lambda g: _unbroadcast(-g * out / b.value, b.shape))), 'div')


def _matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return Node(a.value @ b.value,
                ((a, lambda g: g @ b.value.T),
                 (b, lambda g: a.value.T @ g)), 'matmul')


def _tanh(a):
    out = np.tanh(a.value)
    return Node(out, ((a, lambda g: g * (1.0 - out * out)),), 'tanh')


def _sigmoid(a):
    out = expit(a.value)
    return Node(out, ((a, lambda g: g * out * (1.0 - out)),), 'sigmoid')


def _exp(a):
    out = np.exp(a.value)
    return Node(out, ((a, lambda g: g * out),), 'exp')


def _log(a):
    with np.errstate(divide='ignore', invalid='ignore'):
        out = np.log(a.value)
    return Node(out, ((a, lambda g: g / a.value),), 'log')


def _sqrt(a, floor=SQRT_FLOOR):
    clipped = np.maximum(a.value, floor)
    out = np.sqrt(clipped)
    active = a.value > floor
    return Node(out, ((a, lambda g: np.where(active, 0.5 * g / out, 0.0)),), 'sqrt')


def _sum(a, axis=None):
    if axis is None:
        out = np.array([[a.value.sum()]])
    elif axis in (0, 1):
        out = a.value.sum(axis=axis, keepdims=True)
    else:
        raise DimensionError(f"sum: axis must be None, 0 or 1, got {axis}")
    return Node(out, ((a, lambda g: np.broadcast_to(g, a.shape).copy()),), 'sum')


def _scale(a, factor=1.0):
    factor = float(factor)
    return Node(factor * a.value, ((a, lambda g: factor * g),), 'scale')


def _concat_rows(*nodes):
    if not nodes:
        raise DimensionError("concat_rows: at least one input is required")
    cols = {node.shape[1] for node in nodes}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ {[node.shape for node in nodes]}")
    bounds = np.cumsum([0] + [node.shape[0] for node in nodes])
    parents = tuple(
        (node, (lambda lo, hi: (lambda g: g[lo:hi]))(bounds[k], bounds[k + 1]))
        for k, node in enumerate(nodes)
    )
    return Node(np.vstack([node.value for node in nodes]), parents, 'concat_rows')


def _slice(a, rows=slice(None), cols=slice(None)):
    if not isinstance(rows, slice) or not isinstance(cols, slice):
        raise DimensionError("slice: rows and cols must be slice objects")
    out = a.value[rows, cols]
    if out.size == 0:
        raise DimensionError(f"slice: empty selection {rows}, {cols} of shape {a.shape}")

    def vjp(g):
        full = np.zeros_like(a.value)
        full[rows, cols] = g
        return full

    return Node(out.copy(), ((a, vjp),), 'slice')


def _transpose(a):
    return Node(a.value.T.copy(), ((a, lambda g: g.T),), 'transpose')


def _sqdist(a, b):
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"sqdist: incompatible shapes {a.shape} and {b.shape}")
    diff = a.value[:, None, :] - b.value[None, :, :]
    out = np.sum(diff * diff, axis=2)
    return Node(out,
                ((a, lambda g: 2.0 * (g.sum(axis=1, keepdims=True) * a.value - g @ b.value)),
                 (b, lambda g: 2.0 * (g.sum(axis=0)[:, None] * b.value - g.T @ a.value))), 'sqdist')


def _solve_spd(k, b):
    if k.shape[0] != b.shape[0]:
        raise DimensionError(f"solve_spd: incompatible shapes {k.shape} and {b.shape}")
    factor = _cholesky(k, 'solve_spd')
    out = linalg.cho_solve(factor, b.value, check_finite=False)

    def vjp_k(g):
        adj = linalg.cho_solve(factor, g, check_finite=False)
        return -0.5 * (adj @ out.T + out @ adj.T)

    return Node(out,
                ((k, vjp_k),
                 (b, lambda g: linalg.cho_solve(factor, g, check_finite=False))), 'solve_spd')


def _logdet_spd(k):
    factor = _cholesky(k, 'logdet_spd')
    out = np.array([[2.0 * np.sum(np.log(np.diag(factor[0])))]])

    def vjp(g):
        inverse = linalg.cho_solve(factor, np.eye(k.shape[0]), check_finite=False)
        return g[0, 0] * 0.5 * (inverse + inverse.T)

    return Node(out, ((k, vjp),), 'logdet_spd')


_PRIMITIVES = {
    'add': _add,
    'sub': _sub,
    'elementwise_mul': _elementwise_mul,
    'div': _div,
    'matmul': _matmul,
    'tanh': _tanh,
    'sigmoid': _sigmoid,
    'exp': _exp,
    'log': _log,
    'sqrt': _sqrt,
    'sum': _sum,
    'scale': _scale,
    'concat_rows': _concat_rows,
    'slice': _slice,
    'transpose': _transpose,
    'sqdist': _sqdist,
    'solve_spd': _solve_spd,
    'logdet_spd': _logdet_spd,
}

PRIMITIVES = tuple(_PRIMITIVES)


def apply(op_kind, *inputs, **params):
    """
    Apply a primitive and record the result on the active tape.

    Args:
        op_kind (str): One of PRIMITIVES.
        *inputs (Node): Operands.
        **params: Static arguments (axis for sum, factor for scale,
            rows/cols for slice, floor for sqrt).

    Returns:
        Node: Output node.
    """
    try:
        primitive = _PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown operation '{op_kind}'") from None
    for node in inputs:
        if not isinstance(node, Node):
            raise TypeError(f"{op_kind}: inputs must be Nodes, got {type(node).__name__}")
    return primitive(*inputs, **params)


def backward(root):
    """
    Accumulate d root / d leaf into every reachable leaf with requires_grad.

    Leaf gradients add up across calls until zero_gradients() is used;
    intermediate gradients are recomputed on every call.
    """
    if root.shape != (1, 1):
        raise DimensionError(f"backward: root must be 1x1, got shape {root.shape}")

    reachable = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.index in reachable or not node.requires_grad:
            continue
        reachable[node.index] = node
        stack.extend(parent for parent, _ in node.parents)

    order = sorted(reachable.values(), key=lambda node: node.index, reverse=True)
    for node in order:
        if node.parents:
            node.grad = np.zeros_like(node.value)
    root.grad = root.grad + 1.0

    for node in order:
        for parent, vjp in node.parents:
            if parent.requires_grad:
                parent.grad = parent.grad + vjp(node.grad)


# Composed helpers

def softplus(node):
    """log(1 + e^x), used for positivity constraints."""
    return apply('log', apply('add', constant(1.0), apply('exp', node)))


def gaussian_log_likelihood(centered, covariance):
    """
    Sum over columns of log N(column | 0, covariance).

    Args:
        centered (Node): n x m targets with the mean already subtracted.
        covariance (Node): n x n symmetric positive definite matrix.

    Returns:
        Node: 1 x 1 log density.
    """
    n, m = centered.shape
    alpha = apply('solve_spd', covariance, centered)
    quad = apply('sum', apply('elementwise_mul', centered, alpha))
    logdet = apply('logdet_spd', covariance)
    total = apply('add', apply('scale', quad, factor=-0.5), apply('scale', logdet, factor=-0.5 * m))
    return apply('add', total, constant(-0.5 * n * m * LOG_2PI))
