"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape: forward ops build a DAG of Node objects, backward() walks it
once in reverse topological order. Plain numpy arrays passed into ops are
treated as constants and never receive gradients. The op set is exactly what
the property-token pipeline needs; there is no broadcasting beyond numpy's
own rules, and gradients of broadcast inputs are summed back to their shape.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import DegenerateVector, NonScalarLoss, ShapeMismatch

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Node:
    """One value in the computation graph.

    parents holds (input node, pullback) pairs; a pullback maps the gradient
    at this node to that input's gradient contribution. Leaf nodes have no
    parents. grad is lazily allocated and accumulates across backward calls
    until zero_grad().
    """

    __slots__ = ("value", "grad", "parents")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, leaf={not self.parents})"


def leaf(value) -> Node:
    """Wrap an array as a trainable leaf."""
    return Node(value)


def _val(x) -> np.ndarray:
    if isinstance(x, Node):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Node:
    av, bv = _val(a), _val(b)
    out = av + bv
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g: _unbroadcast(g, av.shape)))
    if isinstance(b, Node):
        parents.append((b, lambda g: _unbroadcast(g, bv.shape)))
    return Node(out, parents)


def sub(a, b) -> Node:
    av, bv = _val(a), _val(b)
    out = av - bv
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g: _unbroadcast(g, av.shape)))
    if isinstance(b, Node):
        parents.append((b, lambda g: _unbroadcast(-g, bv.shape)))
    return Node(out, parents)


def mul(a, b) -> Node:
    av, bv = _val(a), _val(b)
    out = av * bv
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g: _unbroadcast(g * bv, av.shape)))
    if isinstance(b, Node):
        parents.append((b, lambda g: _unbroadcast(g * av, bv.shape)))
    return Node(out, parents)


def div(a, b) -> Node:
    av, bv = _val(a), _val(b)
    out = av / bv
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g: _unbroadcast(g / bv, av.shape)))
    if isinstance(b, Node):
        parents.append((b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)))
    return Node(out, parents)


def matmul(a, b) -> Node:
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeMismatch(f"matmul needs 2-D operands, got {av.shape} and {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul inner dims disagree: {av.shape} x {bv.shape}")
    out = av @ bv
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g: g @ bv.T))
    if isinstance(b, Node):
        parents.append((b, lambda g: av.T @ g))
    return Node(out, parents)


def transpose(a) -> Node:
    av = _val(a)
    if av.ndim != 2:
        raise ShapeMismatch(f"transpose needs a 2-D operand, got {av.shape}")
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g: g.T))
    return Node(av.T, parents)


def reduce_sum(a, axis=None, keepdims=False) -> Node:
    av = _val(a)
    out = av.sum(axis=axis, keepdims=keepdims)
    parents = []
    if isinstance(a, Node):
        def pullback(g, shape=av.shape, axis=axis, keepdims=keepdims):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()
        parents.append((a, pullback))
    return Node(out, parents)


def reduce_mean(a, axis=None, keepdims=False) -> Node:
    av = _val(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a) -> Node:
    av = _val(a)
    out = np.exp(av)
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g: g * out))
    return Node(out, parents)


def log(a) -> Node:
    av = _val(a)
    out = np.log(av)
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g: g / av))
    return Node(out, parents)


def sqrt(a) -> Node:
    av = _val(a)
    out = np.sqrt(av)
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g: g * 0.5 / out))
    return Node(out, parents)


def gelu(a) -> Node:
    """Exact (erf-based) GELU."""
    av = _val(a)
    cdf = 0.5 * (1.0 + erf(av * _INV_SQRT2))
    out = av * cdf
    parents = []
    if isinstance(a, Node):
        def pullback(g, av=av, cdf=cdf):
            pdf = np.exp(-0.5 * av * av) * _INV_SQRT2PI
            return g * (cdf + av * pdf)
        parents.append((a, pullback))
    return Node(out, parents)


def softmax(a, axis=-1) -> Node:
    """Row-stochastic softmax with max-subtraction for overflow safety."""
    av = _val(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    parents = []
    if isinstance(a, Node):
        def pullback(g, out=out, axis=axis):
            inner = (g * out).sum(axis=axis, keepdims=True)
            return out * (g - inner)
        parents.append((a, pullback))
    return Node(out, parents)


def logsumexp(a, axis=-1) -> Node:
    av = _val(a)
    m = av.max(axis=axis, keepdims=True)
    e = np.exp(av - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis=axis)
    parents = []
    if isinstance(a, Node):
        def pullback(g, soft=e / s, axis=axis):
            return np.expand_dims(np.asarray(g), axis) * soft
        parents.append((a, pullback))
    return Node(out, parents)


def concat(parts, axis=0) -> Node:
    values = [_val(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    parents = []
    offset = 0
    for part, v in zip(parts, values):
        size = v.shape[axis]
        if isinstance(part, Node):
            def pullback(g, start=offset, size=size, axis=axis):
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, start + size)
                return g[tuple(index)]
            parents.append((part, pullback))
        offset += size
    return Node(out, parents)


def narrow(a, axis, start, size) -> Node:
    """Contiguous slice along one axis."""
    av = _val(a)
    index = [slice(None)] * av.ndim
    index[axis] = slice(start, start + size)
    out = av[tuple(index)]
    parents = []
    if isinstance(a, Node):
        def pullback(g, shape=av.shape, index=tuple(index)):
            full = np.zeros(shape)
            full[index] = g
            return full
        parents.append((a, pullback))
    return Node(out, parents)


def l2_normalize(a, min_norm=1e-8) -> Node:
    """Normalize each row (last axis) to unit Euclidean norm."""
    av = _val(a)
    norms = np.sqrt((av * av).sum(axis=-1))
    if np.min(norms) < min_norm:
        raise DegenerateVector(f"row norm {np.min(norms):.3e} below {min_norm:.0e}")
    sq = reduce_sum(mul(a, a), axis=-1, keepdims=True)
    return div(a, sqrt(sq))


def layer_norm(x, gain, bias, eps=1e-5) -> Node:
    """Per-row standardization over the last axis followed by an affine map."""
    mu = reduce_mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = reduce_mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    return add(mul(mul(centered, inv), gain), bias)


def _topological_order(root: Node) -> list[Node]:
    """Children-before-parents order, iterative to keep deep chains safe."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()  # root first
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into .grad for every node under `loss`.

    Within one call each node is visited exactly once; across calls the
    gradients add up until zero_grad(). Requires a scalar loss.
    """
    if not isinstance(loss, Node):
        raise NonScalarLoss("loss is not part of a computation graph")
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.value.shape}")
    order = _topological_order(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in order:
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.zeros_like(node.value)
        node.grad += g
        for parent, pullback in node.parents:
            contribution = pullback(g)
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + contribution
            else:
                flowing[key] = contribution


def zero_grads(params) -> None:
    for node in params.values() if isinstance(params, dict) else params:
        node.zero_grad()


class AdamWState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0


def adamw_step(params, grads, state, lr, beta1=0.9, beta2=0.999,
               eps=1e-8, weight_decay=0.01):
    """One decoupled-weight-decay adaptive-moment update.

    params/grads are {name: array} with matching shapes; returns the updated
    {name: array} and mutates `state` in place. Deterministic given inputs.
    """
    state.step += 1
    t = state.step
    updated = {}
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ShapeMismatch(f"param {name!r}: grad shape {np.shape(g)} vs {np.shape(p)}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        updated[name] = p - lr * weight_decay * p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return updated


def finite_difference(f, arrays, step=1e-5):
    """Central-difference gradients of scalar f(list_of_arrays).

    The independent oracle for every analytic gradient in the test suite; it
    never touches the tape.
    """
    arrays = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat_a = a.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_a.size):
            original = flat_a[i]
            flat_a[i] = original + step
            up = f(arrays)
            flat_a[i] = original - step
            down = f(arrays)
            flat_a[i] = original
            flat_g[i] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric) -> float:
    """max |a-n| / max(1, |a|, |n|), elementwise over matching arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / scale)))
    return worst


def check_gradients(build_loss, params: dict, step=1e-5) -> float:
    """Compare tape gradients of build_loss(leaves) against finite differences.

    build_loss receives {name: Node} leaves and must return a scalar Node.
    Returns the worst relative error across all parameters.
    """
    names = list(params)
    leaves = {name: leaf(params[name]) for name in names}
    loss = build_loss(leaves)
    backward(loss)
    analytic = [leaves[name].grad for name in names]

    def rebuilt(arrays):
        nodes = {name: leaf(arr) for name, arr in zip(names, arrays)}
        return float(build_loss(nodes).value)

    numeric = finite_difference(rebuilt, [params[name] for name in names], step=step)
    return max_relative_error(analytic, numeric)
