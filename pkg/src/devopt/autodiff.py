"""Reverse-mode automatic differentiation on numpy arrays.

A small tape: each :class:`Var` stores its value and, for every input it was
computed from, a vector-Jacobian closure.  :func:`grad` walks the tape once in
reverse topological order.  The primitive set is exactly what the selection
rule networks and their unrolled training losses need (elementwise
arithmetic with broadcasting, reductions, 3x3 convolution, linear-operator
application, and the nonsmooth pieces of the objectives); this is not a
general AD system.

Subgradient conventions at kinks are fixed once here so training is
reproducible:

* ``soft_threshold``: derivative 0 at ``|x| == threshold`` (inactive branch),
* ``leaky_relu``: the negative-slope branch at exactly 0,
* ``huber``: the two branches agree at ``|t| == delta`` (derivative is
  continuous there), second derivative taken as 0,
* ``sqrt``: derivative 0 at 0 (keeps reference norms of identical iterates
  from poisoning the whole gradient with infinities),
* ``vabs``: derivative 0 at 0.
"""

from __future__ import annotations

import numpy as np

from .tensors import LinearMap

__all__ = [
    "Var",
    "as_var",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "vsum",
    "mean",
    "sqrt",
    "vabs",
    "leaky_relu",
    "soft_threshold",
    "huber",
    "huber_prime",
    "apply_map",
    "apply_adjoint",
    "conv2d",
    "stack",
    "reshape",
    "instance_norm",
    "grad",
]


class Var:
    """Node of the tape: a float64 array plus vector-Jacobian closures.

    ``parents`` is a tuple of ``(input_var, vjp)`` pairs where ``vjp`` maps the
    gradient at this node to the gradient contribution at that input.  Leaves
    have an empty tuple.
    """

    __slots__ = ("value", "parents")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, as_var(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_var(other))

    def __rsub__(self, other):
        return sub(as_var(other), self)

    def __mul__(self, other):
        return mul(self, as_var(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_var(other))

    def __rtruediv__(self, other):
        return div(as_var(other), self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, leaves={len(self.parents)} parents)"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value + b.value,
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ),
    )


def sub(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value - b.value,
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(-g, b.value.shape)),
        ),
    )


def mul(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value * b.value,
        (
            (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
        ),
    )


def div(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value / b.value,
        (
            (a, lambda g: _unbroadcast(g / b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape)),
        ),
    )


def neg(a: Var) -> Var:
    a = as_var(a)
    return Var(-a.value, ((a, lambda g: -g),))


def vsum(a: Var) -> Var:
    """Full reduction to a 0-d scalar."""
    a = as_var(a)
    shape = a.value.shape
    return Var(np.sum(a.value), ((a, lambda g: np.broadcast_to(g, shape)),))


def mean(a: Var, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    shape = a.value.shape
    if axis is None:
        count = a.value.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for i in ax:
            count *= shape[i]

    def vjp(g):
        if axis is not None and not keepdims:
            ax = (axis,) if isinstance(axis, int) else tuple(axis)
            g = np.expand_dims(g, ax)
        return np.broadcast_to(g, shape) / count

    return Var(np.mean(a.value, axis=axis, keepdims=keepdims), ((a, vjp),))


def sqrt(a: Var) -> Var:
    a = as_var(a)
    root = np.sqrt(a.value)

    def vjp(g):
        safe = np.where(a.value > 0.0, root, 1.0)
        return np.where(a.value > 0.0, 0.5 * g / safe, 0.0)

    return Var(root, ((a, vjp),))


def vabs(a: Var) -> Var:
    a = as_var(a)
    return Var(np.abs(a.value), ((a, lambda g: g * np.sign(a.value)),))


def leaky_relu(a: Var, slope: float = 0.2) -> Var:
    a = as_var(a)
    pos = a.value > 0.0
    return Var(
        np.where(pos, a.value, slope * a.value),
        ((a, lambda g: g * np.where(pos, 1.0, slope)),),
    )


def soft_threshold(a: Var, threshold: float) -> Var:
    a = as_var(a)
    if threshold < 0:
        raise ValueError("soft_threshold: threshold must be nonnegative")
    active = np.abs(a.value) > threshold
    value = np.sign(a.value) * np.maximum(np.abs(a.value) - threshold, 0.0)
    return Var(value, ((a, lambda g: g * active),))


def huber(a: Var, delta: float) -> Var:
    """Elementwise Huber value; derivative is clip(t/delta, -1, 1).

    The branch test is strict (quadratic on ``|t| < delta``) to match the
    plain-array implementation in :mod:`devopt.objectives` bit for bit.
    """
    a = as_var(a)
    if delta <= 0:
        raise ValueError("huber: delta must be positive")
    mag = np.abs(a.value)
    value = np.where(mag < delta, a.value * a.value / (2.0 * delta), mag - delta / 2.0)
    return Var(value, ((a, lambda g: g * np.clip(a.value / delta, -1.0, 1.0)),))


def huber_prime(a: Var, delta: float) -> Var:
    """Elementwise Huber derivative as a graph value (used inside gradient
    expressions); its own derivative is 1/delta strictly inside the seam and
    0 outside, with the seam itself assigned to the flat branch."""
    a = as_var(a)
    if delta <= 0:
        raise ValueError("huber_prime: delta must be positive")
    inside = np.abs(a.value) < delta
    return Var(
        np.clip(a.value / delta, -1.0, 1.0),
        ((a, lambda g: g * inside / delta),),
    )


def apply_map(a: Var, op: LinearMap) -> Var:
    """Apply a linear operator; the vector-Jacobian product is its adjoint."""
    a = as_var(a)
    return Var(op.apply(a.value), ((a, lambda g: op.adjoint(g)),))


def apply_adjoint(a: Var, op: LinearMap) -> Var:
    a = as_var(a)
    return Var(op.adjoint(a.value), ((a, lambda g: op.apply(g)),))


def _patches(x: np.ndarray) -> np.ndarray:
    """All 3x3 neighborhoods of a zero-padded (C, H, W) image.

    Returns shape (C, 3, 3, H, W); flattening the first three axes gives the
    column matrix of the convolution, with row index c*9 + ky*3 + kx matching
    a C-order reshape of (out, C, 3, 3) weights.
    """
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.empty((c, 3, 3, h, w))
    for ky in range(3):
        for kx in range(3):
            out[:, ky, kx] = xp[:, ky : ky + h, kx : kx + w]
    return out


def conv2d(x: Var, w: Var, b: Var) -> Var:
    """3x3 convolution, stride 1, zero padding, on a (C_in, H, W) image.

    ``w`` has shape (C_out, C_in, 3, 3) and ``b`` shape (C_out,).  Patches are
    recomputed in the backward pass rather than stored; x is retained by the
    tape anyway and the slicing is cheap next to the matmuls.
    """
    x, w, b = as_var(x), as_var(w), as_var(b)
    cin, h, wd = x.value.shape
    cout = w.value.shape[0]
    if w.value.shape != (cout, cin, 3, 3):
        raise ValueError(f"conv2d: weight shape {w.value.shape} does not match input {x.value.shape}")
    wmat = w.value.reshape(cout, cin * 9)
    cols = _patches(x.value).reshape(cin * 9, h * wd)
    out = (wmat @ cols + b.value[:, None]).reshape(cout, h, wd)

    def vjp_x(g):
        gcols = wmat.T @ g.reshape(cout, h * wd)
        gp = gcols.reshape(cin, 3, 3, h, wd)
        gxp = np.zeros((cin, h + 2, wd + 2))
        for ky in range(3):
            for kx in range(3):
                gxp[:, ky : ky + h, kx : kx + wd] += gp[:, ky, kx]
        return gxp[:, 1:-1, 1:-1]

    def vjp_w(g):
        cols_again = _patches(x.value).reshape(cin * 9, h * wd)
        return (g.reshape(cout, h * wd) @ cols_again.T).reshape(w.value.shape)

    def vjp_b(g):
        return g.sum(axis=(1, 2))

    return Var(out, ((x, vjp_x), (w, vjp_w), (b, vjp_b)))


def stack(items) -> Var:
    """Stack same-shape Vars along a new leading axis."""
    items = [as_var(v) for v in items]
    value = np.stack([v.value for v in items])

    def make_vjp(i):
        return lambda g: g[i]

    return Var(value, tuple((v, make_vjp(i)) for i, v in enumerate(items)))


def reshape(a: Var, shape) -> Var:
    a = as_var(a)
    old = a.value.shape
    return Var(a.value.reshape(shape), ((a, lambda g: g.reshape(old)),))


def instance_norm(a: Var, eps: float = 1e-5) -> Var:
    """Per-channel normalization of a (C, H, W) tensor, no affine part.

    Composed from primitives so its gradient needs no separate derivation:
    (a - mean) / sqrt(var + eps) with mean and variance over the spatial axes.
    """
    a = as_var(a)
    if a.value.ndim != 3:
        raise ValueError(f"instance_norm: expected (C, H, W), got {a.value.shape}")
    mu = mean(a, axis=(1, 2), keepdims=True)
    centered = sub(a, mu)
    variance = mean(mul(centered, centered), axis=(1, 2), keepdims=True)
    return div(centered, sqrt(add(variance, Var(eps))))


def _topo_order(root: Var) -> list:
    """Nodes reachable from ``root``, root first, every parent after its child."""
    order: list = []
    seen: set = set()
    stack = [(root, False)]
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
    order.reverse()
    return order


def grad(out: Var, leaves) -> list:
    """Gradients of a scalar ``out`` with respect to each leaf.

    Leaves not reachable from ``out`` get zero gradients of their own shape.
    """
    if out.value.size != 1:
        raise ValueError(f"grad: output must be scalar, got shape {out.value.shape}")
    grads: dict = {id(out): np.ones_like(out.value)}
    for node in _topo_order(out):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contribution = vjp(g)
            key = id(parent)
            held = grads.get(key)
            # out-of-place: some vjps hand back read-only broadcast views
            grads[key] = contribution if held is None else held + contribution
    return [grads.get(id(leaf), np.zeros_like(leaf.value)) for leaf in leaves]
