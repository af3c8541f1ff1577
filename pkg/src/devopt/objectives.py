"""Objective building blocks: smooth terms, prox-friendly terms, composites.

A smooth term carries its value, gradient, and ``beta`` = the *reciprocal* of
the gradient's Lipschitz constant (the natural step-size unit downstream:
plain gradient descent steps ``x - beta * grad``).  A prox term carries its
value and an exact proximal map ``prox(x, gamma) = argmin_z g(z) +
||z - x||^2 / (2 gamma)``.

Each constructor also tags the returned object with a ``kind`` string and the
ingredients it was built from, so the training code can rebuild the same
computation on autodiff variables without reverse-engineering closures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from devopt.tensors import Array, LinearMap, inner

__all__ = [
    "SmoothFn",
    "ProxFn",
    "CompositeProblem",
    "least_squares",
    "huber",
    "huber_prime",
    "huber_tv",
    "sum_smooth",
    "zero_smooth",
    "soft_threshold",
    "l1_of_orthogonal",
    "zero_prox",
]


@dataclass(frozen=True, eq=False)
class SmoothFn:
    """A convex differentiable term with a Lipschitz-gradient certificate.

    ``beta > 0`` promises ``||grad(x) - grad(y)|| <= (1/beta) ||x - y||``.
    ``beta = inf`` is legal and means the gradient is constant (zero term).
    """

    value: Callable[[Array], float]
    gradient: Callable[[Array], Array]
    beta: float
    kind: str = "opaque"
    parts: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class ProxFn:
    """A convex (possibly non-smooth) term with an exact proximal map."""

    value: Callable[[Array], float]
    prox: Callable[[Array, float], Array]
    kind: str = "opaque"
    parts: dict = field(default_factory=dict)


def least_squares(op: LinearMap, y: Array) -> SmoothFn:
    """Data fit ``f(x) = ||A x - y||^2`` with ``beta = 1 / (2 norm_bound^2)``.

    The gradient is ``2 A*(A x - y)``; its Lipschitz constant is ``2 ||A||^2``
    and the certified ``norm_bound`` upper-bounds ``||A||``, so the returned
    ``beta`` is a safe step unit.
    """
    if y.shape != op.out_shape:
        raise ValueError(f"data shape {y.shape} != operator range {op.out_shape}")

    def value(x: Array) -> float:
        r = op.apply(x) - y
        return float(np.sum(r * r))

    def gradient(x: Array) -> Array:
        return 2.0 * op.adjoint(op.apply(x) - y)

    beta = 1.0 / (2.0 * op.norm_bound**2)
    return SmoothFn(value, gradient, beta, kind="least_squares", parts={"op": op, "y": y})


def huber(t, delta: float):
    """Huber branch function: ``t^2 / (2 delta)`` inside ``|t| < delta``,
    ``|t| - delta/2`` outside.  Scalar in, scalar out; array in, array out.

    C^1 everywhere: value and first derivative agree at the seam ``|t| = delta``.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    t = np.asarray(t, dtype=np.float64)
    quad = np.abs(t) < delta
    out = np.where(quad, t * t / (2.0 * delta), np.abs(t) - delta / 2.0)
    if out.ndim == 0:
        return float(out)
    return out


def huber_prime(t, delta: float):
    """Derivative of :func:`huber`: ``t / delta`` clipped to ``[-1, 1]``."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    t = np.asarray(t, dtype=np.float64)
    out = np.clip(t / delta, -1.0, 1.0)
    if out.ndim == 0:
        return float(out)
    return out


def huber_tv(grad_op: LinearMap, lam: float, delta: float) -> SmoothFn:
    """Smoothed total variation ``g(x) = lam * sum_i huber((D x)_i, delta)``.

    ``grad_op`` is the discrete gradient image ``D``.  The gradient is
    ``lam * D^T huber'(D x)`` and the Lipschitz certificate is
    ``lam ||D||^2 / delta``, so ``beta = delta / (lam * norm_bound^2)``.
    """
    if lam <= 0 or delta <= 0:
        raise ValueError("lam and delta must be positive")

    def value(x: Array) -> float:
        return lam * float(np.sum(huber(grad_op.apply(x), delta)))

    def gradient(x: Array) -> Array:
        return lam * grad_op.adjoint(huber_prime(grad_op.apply(x), delta))

    beta = delta / (lam * grad_op.norm_bound**2)
    return SmoothFn(
        value,
        gradient,
        beta,
        kind="huber_tv",
        parts={"op": grad_op, "lam": lam, "delta": delta},
    )


def sum_smooth(f1: SmoothFn, f2: SmoothFn) -> SmoothFn:
    """Sum of two smooth terms; reciprocal betas add (Lipschitz constants add)."""
    inv = (0.0 if math.isinf(f1.beta) else 1.0 / f1.beta) + (
        0.0 if math.isinf(f2.beta) else 1.0 / f2.beta
    )
    beta = math.inf if inv == 0.0 else 1.0 / inv
    return SmoothFn(
        value=lambda x: f1.value(x) + f2.value(x),
        gradient=lambda x: f1.gradient(x) + f2.gradient(x),
        beta=beta,
        kind="sum",
        parts={"terms": (f1, f2)},
    )


def zero_smooth() -> SmoothFn:
    """The zero function (constant gradient, ``beta = inf``)."""
    return SmoothFn(
        value=lambda x: 0.0,
        gradient=lambda x: np.zeros_like(x),
        beta=math.inf,
        kind="zero",
    )


def soft_threshold(x, t: float):
    """Shrink toward zero: ``sign(x) * max(|x| - t, 0)``, the prox of ``t |.|``."""
    if t < 0:
        raise ValueError("threshold must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * np.maximum(np.abs(x) - t, 0.0)
    if out.ndim == 0:
        return float(out)
    return out


def l1_of_orthogonal(
    w_op: LinearMap, lam: float, mu: float = 1.0, validate: bool = True
) -> ProxFn:
    """Sparsity term ``g(x) = lam ||W x||_1`` for a tight frame ``W W* = mu I``.

    The prox is exact under the tight-frame identity:
    ``prox(x, gamma) = x + W*(soft(W x, lam * gamma * mu) - W x) / mu``.
    With ``validate=True`` the identity is spot-checked on random probes at
    construction so a non-tight ``W`` fails fast instead of corrupting runs.
    """
    if lam <= 0 or mu <= 0:
        raise ValueError("lam and mu must be positive")
    if validate:
        rng = np.random.default_rng(0)
        for _ in range(3):
            probe = rng.standard_normal(w_op.out_shape)
            back = w_op.apply(w_op.adjoint(probe))
            err = np.linalg.norm((back - mu * probe).ravel())
            if err > 1e-8 * np.linalg.norm(probe.ravel()):
                raise ValueError("l1_of_orthogonal: W W* != mu * I on a probe")

    def value(x: Array) -> float:
        return lam * float(np.sum(np.abs(w_op.apply(x))))

    def prox(x: Array, gamma: float) -> Array:
        wx = w_op.apply(x)
        shrunk = soft_threshold(wx, lam * gamma * mu)
        return x + w_op.adjoint(shrunk - wx) / mu

    return ProxFn(value, prox, kind="l1_orthogonal", parts={"op": w_op, "lam": lam, "mu": mu})


def zero_prox() -> ProxFn:
    """The zero term; its prox is the identity for every step size."""
    return ProxFn(value=lambda x: 0.0, prox=lambda x, gamma: x, kind="zero")


@dataclass(frozen=True, eq=False)
class CompositeProblem:
    """Objective ``F(x) = f(x) + g(x)`` with exactly one flavor of ``g``.

    ``prox_g`` set: the forward-backward scheme applies; ``smooth_g`` set:
    the fully smooth scheme applies with the combined ``beta``; both unset:
    plain smooth minimization of ``f``.

    ``y`` is the data tensor the problem was built around (kept for
    reporting; the terms already close over it).
    """

    f: SmoothFn
    y: Array
    prox_g: ProxFn | None = None
    smooth_g: SmoothFn | None = None

    def __post_init__(self):
        if self.prox_g is not None and self.smooth_g is not None:
            raise ValueError("CompositeProblem: prox_g and smooth_g are exclusive")
        if not (self.f.beta > 0):
            raise ValueError("CompositeProblem: f.beta must be positive")

    @property
    def beta(self) -> float:
        """Reciprocal Lipschitz constant of the full smooth part."""
        if self.smooth_g is None:
            return self.f.beta
        return sum_smooth(self.f, self.smooth_g).beta

    @property
    def x_shape(self) -> tuple:
        """Shape of the primal variable, read off the data-fit operator.

        Falls back to the data shape for opaque smooth parts (square systems).
        """
        fn = self.f
        while fn.kind == "sum":
            fn = fn.parts["terms"][0]
        op = fn.parts.get("op")
        if op is not None:
            return op.in_shape
        return np.asarray(self.y).shape

    def objective(self, x: Array) -> float:
        val = self.f.value(x)
        if self.smooth_g is not None:
            val += self.smooth_g.value(x)
        if self.prox_g is not None:
            val += self.prox_g.value(x)
        return val

    def gradient(self, x: Array) -> Array:
        """Gradient of the smooth part ``f + smooth_g`` (excludes ``prox_g``)."""
        grad = self.f.gradient(x)
        if self.smooth_g is not None:
            grad = grad + self.smooth_g.gradient(x)
        return grad

    def gradient_parts(self, x: Array) -> tuple[Array, Array]:
        """``(grad f, grad smooth_g)`` separately; the second is zero if unset.

        Selection-rule networks consume the two fields as separate channels.
        """
        gf = self.f.gradient(x)
        gg = self.smooth_g.gradient(x) if self.smooth_g is not None else np.zeros_like(x)
        return gf, gg


def directional_derivative_check(
    fn: SmoothFn, x: Array, d: Array, h: float = 1e-6
) -> tuple[float, float]:
    """Return (analytic, central-difference) directional derivatives at ``x``.

    Test helper shared by the suites; central differences of the value are
    compared against ``<grad, d>``.
    """
    analytic = inner(fn.gradient(x), d)
    fd = (fn.value(x + h * d) - fn.value(x - h * d)) / (2.0 * h)
    return analytic, fd
