"""Dense linear algebra and a small reverse-mode differentiation engine.

Arrays are plain float64 ``numpy.ndarray`` objects.  An :class:`ExprGraph`
records operations eagerly (values are computed as nodes are created) so
that :func:`evaluate_with_gradients` only has to run the reverse sweep.

Only the operations needed by the energy functions are provided; this is
not a general-purpose autodiff library.
"""

import math

import numpy as np
from scipy import linalg as sla

from .errors import (
    NonScalarRoot,
    NotPositiveDefinite,
    ShapeMismatch,
    SingularMatrix,
)

LOG_2PI = math.log(2.0 * math.pi)

# Initial relative jitter and number of doublings tried before giving up.
JITTER = 1e-6
JITTER_RETRIES = 3


def as_tensor(value, name="tensor"):
    """Convert to a float64 array, rejecting NaN/Inf."""
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


# ---------------------------------------------------------------------------
# plain linear algebra


def cholesky_decompose(A):
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Raises NotPositiveDefinite when a pivot is not strictly positive; the
    caller is expected to retry with more jitter.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeMismatch(f"cholesky needs a square matrix, got {A.shape}")
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if not np.all(np.isfinite(L)):
        raise NotPositiveDefinite("non-finite Cholesky factor")
    return L


def triangular_solve(L, B, trans=False):
    """Solve ``L X = B`` (or ``L^T X = B`` when ``trans``) for lower ``L``."""
    L = np.asarray(L, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ShapeMismatch(f"triangular_solve needs a square matrix, got {L.shape}")
    if B.shape[0] != L.shape[0]:
        raise ShapeMismatch(f"cannot solve {L.shape} against {B.shape}")
    if np.any(np.diag(L) == 0.0):
        raise SingularMatrix("zero on the diagonal of a triangular factor")
    if B.size == 0:
        return np.zeros(B.shape)
    return sla.solve_triangular(L, B, lower=True, trans=1 if trans else 0,
                                check_finite=False)


def jitter_for(K, scale=JITTER):
    n = K.shape[0]
    return scale * float(np.trace(K)) / max(n, 1)


def jittered_cholesky(K):
    """Cholesky of ``K + jitter I`` with the doubling policy."""
    scale = JITTER
    for attempt in range(JITTER_RETRIES + 1):
        try:
            return cholesky_decompose(K + jitter_for(K, scale) * np.eye(K.shape[0]))
        except NotPositiveDefinite:
            if attempt == JITTER_RETRIES:
                raise
            scale *= 2.0


# ---------------------------------------------------------------------------
# expression graph


class Node:
    """One value in an :class:`ExprGraph`."""

    __slots__ = ("graph", "op", "parents", "value", "backward", "requires_grad",
                 "index", "name")

    __array_priority__ = 100.0

    def __init__(self, graph, op, parents, value, backward, requires_grad,
                 name=None):
        self.graph = graph
        self.op = op
        self.parents = parents
        self.value = value
        self.backward = backward
        self.requires_grad = requires_grad
        self.name = name
        self.index = len(graph.nodes)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Node {self.index} {self.op}{label} shape={self.shape}>"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    @property
    def T(self):
        return transpose(self)


class ExprGraph:
    """Topologically ordered record of operations.

    A graph is single-owner: build it, evaluate it, throw it away.
    """

    def __init__(self):
        self.nodes = []
        self.parameters = []

    def _push(self, node):
        self.nodes.append(node)
        return node

    def param(self, value, name=None):
        value = np.array(value, dtype=np.float64)
        node = self._push(Node(self, "param", (), value, None, True, name))
        self.parameters.append(node)
        return node

    def const(self, value, name=None):
        value = np.asarray(value, dtype=np.float64)
        return self._push(Node(self, "const", (), value, None, False, name))

    def lift(self, x):
        if isinstance(x, Node):
            if x.graph is not self:
                raise ValueError("node belongs to a different graph")
            return x
        return self.const(x)

    def op(self, kind, parents, value, backward):
        req = any(p.requires_grad for p in parents)
        return self._push(Node(self, kind, tuple(parents), value,
                               backward if req else None, req))


def _graph_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    raise TypeError("at least one operand must be a Node")


def _lift(*xs):
    g = _graph_of(*xs)
    return g, [g.lift(x) for x in xs]


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast shapes {shapes}") from None


# -- elementwise binary ops -------------------------------------------------


def add(a, b):
    g, (a, b) = _lift(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return g.op("add", (a, b), a.value + b.value,
                lambda go: (_unbroadcast(go, sa), _unbroadcast(go, sb)))


def sub(a, b):
    g, (a, b) = _lift(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return g.op("sub", (a, b), a.value - b.value,
                lambda go: (_unbroadcast(go, sa), _unbroadcast(-go, sb)))


def mul(a, b):
    g, (a, b) = _lift(a, b)
    _broadcast_shape(a.shape, b.shape)
    av, bv = a.value, b.value
    return g.op("mul", (a, b), av * bv,
                lambda go: (_unbroadcast(go * bv, av.shape),
                            _unbroadcast(go * av, bv.shape)))


def div(a, b):
    g, (a, b) = _lift(a, b)
    _broadcast_shape(a.shape, b.shape)
    av, bv = a.value, b.value
    out = av / bv
    return g.op("div", (a, b), out,
                lambda go: (_unbroadcast(go / bv, av.shape),
                            _unbroadcast(-go * out / bv, bv.shape)))


def broadcast(a, shape):
    g, (a,) = _lift(a)
    shape = tuple(shape)
    try:
        value = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} to {shape}") from None
    sa = a.shape
    return g.op("broadcast", (a,), value, lambda go: (_unbroadcast(go, sa),))


# -- linear algebra ops -------------------------------------------------------


def matmul(a, b):
    g, (a, b) = _lift(a, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul of {av.shape} and {bv.shape}")

    def back(go):
        ga = go @ bv.T if a.requires_grad else None
        gb = av.T @ go if b.requires_grad else None
        return ga, gb

    return g.op("matmul", (a, b), av @ bv, back)


def transpose(a):
    g, (a,) = _lift(a)
    return g.op("transpose", (a,), a.value.T.copy(), lambda go: (go.T,))


def reshape(a, shape):
    g, (a,) = _lift(a)
    sa = a.shape
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {sa} to {shape}") from None
    return g.op("reshape", (a,), value, lambda go: (go.reshape(sa),))


def diag(a):
    """Diagonal of a square matrix as a vector."""
    g, (a,) = _lift(a)
    n = a.shape[0]
    return g.op("diag", (a,), np.diag(a.value).copy(),
                lambda go: (np.diag(go) if n else np.zeros((0, 0)),))


def _phi(X):
    out = np.tril(X)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def cholesky(a):
    """Differentiable lower Cholesky factor.

    The reverse rule treats the input as symmetric and returns a symmetric
    adjoint: ``L^-T sym(Phi(L^T Lbar)) L^-1``.
    """
    g, (a,) = _lift(a)
    L = cholesky_decompose(a.value)

    def back(go):
        P = _phi(L.T @ go)
        P = 0.5 * (P + P.T)
        tmp = triangular_solve(L, P, trans=True)
        S = triangular_solve(L, tmp.T, trans=True)
        return (0.5 * (S + S.T),)

    return g.op("cholesky", (a,), L, back)


def solve_triangular(L, B, trans=False):
    """Differentiable ``L^-1 B`` (or ``L^-T B``)."""
    g, (L, B) = _lift(L, B)
    Lv = L.value
    X = triangular_solve(Lv, B.value, trans=trans)

    def back(go):
        gB = triangular_solve(Lv, go, trans=not trans)
        gL = None
        if L.requires_grad:
            gL = np.tril(-(X @ gB.T) if trans else -(gB @ X.T))
        return gL, gB

    return g.op("triangular-solve", (L, B), X, back)


def jittered_cholesky_node(K):
    """Cholesky node of ``K + jitter * mean(diag K) * I`` with retries.

    The jitter is part of the graph, so gradients stay exact.
    """
    g = K.graph
    n = K.shape[0]
    eye = np.eye(n)
    scale = JITTER
    for attempt in range(JITTER_RETRIES + 1):
        level = sum_(diag(K)) * (scale / max(n, 1))
        try:
            return cholesky(K + level * eye)
        except NotPositiveDefinite:
            if attempt == JITTER_RETRIES:
                raise
            scale *= 2.0
    raise AssertionError("unreachable")


# -- elementwise unary ops ----------------------------------------------------


def exp(a):
    g, (a,) = _lift(a)
    out = np.exp(a.value)
    return g.op("exp", (a,), out, lambda go: (go * out,))


def log(a):
    g, (a,) = _lift(a)
    av = a.value
    with np.errstate(divide="ignore"):
        out = np.log(av)
    return g.op("log", (a,), out, lambda go: (go / av,))


def tanh(a):
    g, (a,) = _lift(a)
    out = np.tanh(a.value)
    return g.op("tanh", (a,), out, lambda go: (go * (1.0 - out * out),))


def relu(a):
    g, (a,) = _lift(a)
    av = a.value
    return g.op("relu", (a,), np.maximum(av, 0.0), lambda go: (go * (av > 0),))


def elu(a):
    """ELU with alpha = 1."""
    g, (a,) = _lift(a)
    av = a.value
    out = np.where(av > 0, av, np.expm1(np.minimum(av, 0.0)))
    return g.op("elu", (a,), out,
                lambda go: (go * np.where(av > 0, 1.0, out + 1.0),))


def square(a):
    g, (a,) = _lift(a)
    av = a.value
    return g.op("square", (a,), av * av, lambda go: (2.0 * av * go,))


def sqrt(a):
    g, (a,) = _lift(a)
    out = np.sqrt(a.value)
    # zero-variance entries get a zero subgradient instead of inf
    safe = np.where(out > 0, out, 1.0)
    return g.op("sqrt", (a,), out,
                lambda go: (np.where(out > 0, 0.5 * go / safe, 0.0),))


def sin(a):
    g, (a,) = _lift(a)
    av = a.value
    return g.op("sin", (a,), np.sin(av), lambda go: (go * np.cos(av),))


def sum_(a, axis=None, keepdims=False):
    g, (a,) = _lift(a)
    sa = a.shape
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def back(go):
        if axis is not None and not keepdims:
            go = np.expand_dims(go, axis)
        return (np.broadcast_to(go, sa).copy(),)

    return g.op("sum", (a,), np.asarray(out, dtype=np.float64), back)


def gaussian_logpdf(x, mean, var):
    """Sum over all (broadcast) entries of ``log N(x; mean, var)``."""
    g, (x, mean, var) = _lift(x, mean, var)
    _broadcast_shape(x.shape, mean.shape, var.shape)
    xv, mv, vv = x.value, mean.value, var.value
    r = xv - mv
    val = -0.5 * np.sum(LOG_2PI + np.log(vv) + r * r / vv
                        + np.zeros(np.broadcast_shapes(xv.shape, mv.shape, vv.shape)))

    def back(go):
        dx = -go * r / vv
        dv = go * (0.5 * r * r / (vv * vv) - 0.5 / vv)
        full = np.broadcast_shapes(xv.shape, mv.shape, vv.shape)
        dx = np.broadcast_to(dx, full)
        dv = np.broadcast_to(dv, full)
        return (_unbroadcast(dx, xv.shape), _unbroadcast(-dx, mv.shape),
                _unbroadcast(dv, vv.shape))

    return g.op("gaussian-logpdf", (x, mean, var), np.asarray(val), back)


# ---------------------------------------------------------------------------
# reverse sweep


def evaluate_with_gradients(graph, root, wrt=None):
    """Value of a scalar ``root`` and its gradient for every parameter leaf.

    Returns ``(value, grads)`` where ``grads`` maps each parameter node (or
    each node in ``wrt``) to an array of the node's shape.
    """
    if root.graph is not graph:
        raise ValueError("root does not belong to this graph")
    if root.value.size != 1:
        raise NonScalarRoot(f"root has shape {root.shape}")
    targets = graph.parameters if wrt is None else list(wrt)
    adj = {root.index: np.ones_like(root.value)}
    for node in reversed(graph.nodes[: root.index + 1]):
        go = adj.pop(node.index, None) if node.backward is not None else adj.get(node.index)
        if go is None or node.backward is None:
            continue
        for parent, gp in zip(node.parents, node.backward(go)):
            if gp is None or not parent.requires_grad:
                continue
            prev = adj.get(parent.index)
            adj[parent.index] = gp if prev is None else prev + gp
    grads = {}
    for p in targets:
        gp = adj.get(p.index)
        grads[p] = np.zeros_like(p.value) if gp is None else np.asarray(gp).reshape(p.shape)
    return float(root.value), grads
