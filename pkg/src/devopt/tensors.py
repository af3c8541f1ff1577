"""Array and linear-operator primitives shared by all solver modules.

Everything downstream works on float64 numpy arrays of rank 1 or 2 ("tensors"
here; vectors and images).  Reshape, transpose and slicing are plain numpy.
Linear operators are bundled as :class:`LinearMap`: a forward callable, its
adjoint, the shapes it connects, and a certified upper bound on the operator
norm.  The bound is what the solvers' step sizes and certificates lean on, so
it must be a true upper bound, not an estimate; see :func:`power_method_norm`
for how the ray transform earns its bound at construction time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

Array = np.ndarray


class DivergenceError(RuntimeError):
    """A solver or trainer produced a non-finite iterate."""


def tensor(data, shape: tuple[int, ...] | None = None) -> Array:
    """Coerce ``data`` to a validated float64 array of rank 1 or 2.

    ``shape`` reinterprets a flat buffer, e.g. ``tensor(range(6), (2, 3))``.
    Raises ``ValueError`` on empty input, rank > 2, or non-finite entries.
    """
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if arr.ndim not in (1, 2):
        raise ValueError(f"tensors must have rank 1 or 2, got rank {arr.ndim}")
    if arr.size == 0:
        raise ValueError("tensors must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf entries")
    return arr


def _check_same_shape(a: Array, b: Array, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Array, b: Array) -> Array:
    """Elementwise sum with a strict shape check (no broadcasting)."""
    _check_same_shape(a, b, "add")
    return a + b


def sub(a: Array, b: Array) -> Array:
    """Elementwise difference with a strict shape check."""
    _check_same_shape(a, b, "sub")
    return a - b


def scale(a: Array, c: float) -> Array:
    """Scalar multiple ``c * a``."""
    return float(c) * a


def inner(a: Array, b: Array) -> float:
    """Euclidean / Frobenius inner product ``<a, b>`` as a Python float."""
    _check_same_shape(a, b, "inner")
    return float(np.dot(a.ravel(), b.ravel()))


def norm(a: Array) -> float:
    """Euclidean / Frobenius norm ``||a|| = sqrt(<a, a>)``."""
    return float(np.linalg.norm(a.ravel()))


def check_finite(x: Array, context: str = "tensor") -> Array:
    """Pass ``x`` through, raising :class:`DivergenceError` if non-finite.

    Solvers call this on every new iterate so a blow-up aborts with a
    diagnostic naming the producing step instead of silently propagating NaNs.
    """
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.sum(np.isfinite(x)))
        raise DivergenceError(f"{context}: {bad} non-finite entries detected")
    return x


@dataclass(frozen=True)
class LinearMap:
    """A linear operator with its adjoint and a certified norm bound.

    Attributes
    ----------
    apply, adjoint : callables mapping arrays to arrays.
    in_shape, out_shape : shapes the forward map connects.
    norm_bound : float
        Upper bound on the operator norm, ``||A x|| <= norm_bound * ||x||``
        for every input.  Solvers derive step sizes from it, so constructors
        must guarantee the inequality (inflate estimates, never deflate).
    """

    apply: Callable[[Array], Array]
    adjoint: Callable[[Array], Array]
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    norm_bound: float

    def __call__(self, x: Array) -> Array:
        return self.apply(x)


def identity_map(shape: tuple[int, ...]) -> LinearMap:
    """The identity on tensors of the given shape (norm bound exactly 1)."""
    return LinearMap(lambda x: x, lambda y: y, tuple(shape), tuple(shape), 1.0)


def matrix_map(mat: Array, norm_bound: float | None = None) -> LinearMap:
    """Wrap a dense matrix ``(m, k)`` as a map from rank-1 ``(k,)`` to ``(m,)``.

    The default bound is the spectral norm inflated by a relative 1e-12 so
    floating-point rounding in the matvec cannot push ``||A x||`` past it.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("matrix_map expects a 2-D array")
    if norm_bound is None:
        norm_bound = float(np.linalg.norm(mat, 2)) * (1.0 + 1e-12)
    m, k = mat.shape
    return LinearMap(
        apply=lambda x, _m=mat: _m @ x,
        adjoint=lambda y, _m=mat: _m.T @ y,
        in_shape=(k,),
        out_shape=(m,),
        norm_bound=float(norm_bound),
    )


def operator_from_matrix(
    mat, in_shape: tuple[int, ...], out_shape: tuple[int, ...], norm_bound: float
) -> LinearMap:
    """Wrap a dense or scipy.sparse matrix acting on raveled tensors.

    ``mat`` has shape ``(prod(out_shape), prod(in_shape))``; the returned map
    reshapes inputs/outputs so callers see the declared tensor shapes.
    """
    in_shape = tuple(in_shape)
    out_shape = tuple(out_shape)

    def _apply(x: Array) -> Array:
        return np.asarray(mat @ x.ravel()).reshape(out_shape)

    def _adjoint(y: Array) -> Array:
        return np.asarray(mat.T @ y.ravel()).reshape(in_shape)

    return LinearMap(_apply, _adjoint, in_shape, out_shape, float(norm_bound))


def adjoint_test(op: LinearMap, trials: int = 20, seed: int = 0) -> float:
    """Max discrepancy ``|<A x, y> - <x, A* y>|`` over random unit probes.

    Zero (to rounding) certifies that ``op.adjoint`` really is the adjoint of
    ``op.apply``; a broken adjoint shows up at O(1).
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(op.in_shape)
        y = rng.standard_normal(op.out_shape)
        x /= np.linalg.norm(x.ravel())
        y /= np.linalg.norm(y.ravel())
        lhs = inner(op.apply(x), y)
        rhs = inner(x, op.adjoint(y))
        worst = max(worst, abs(lhs - rhs))
    return worst


def power_method_norm(op: LinearMap, iters: int = 30, seed: int = 0) -> float:
    """Estimate ``||A||`` by power iteration on ``A* A``.

    Deterministic for a fixed seed.  The estimate converges from below, which
    is why constructors that *certify* a bound must inflate it by a margin
    (see the ray transform) rather than use the raw value.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.in_shape)
    v /= np.linalg.norm(v.ravel())
    lam = 0.0
    for _ in range(iters):
        w = op.adjoint(op.apply(v))
        lam = float(np.linalg.norm(w.ravel()))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return float(np.sqrt(lam))
