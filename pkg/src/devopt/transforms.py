"""Imaging operators: discrete gradient, Haar wavelets, blur, ray transform.

All four are exposed as :class:`~devopt.tensors.LinearMap` with *certified*
norm bounds:

- discrete gradient: forward differences, bound ``sqrt(8)``;
- Haar wavelet: orthonormal, bound exactly 1;
- Gaussian blur: kernel is non-negative with unit sum and the padding is
  zero, so the bound 1 follows from Young's inequality;
- ray transform: a sparse parallel-beam matrix rescaled at construction by a
  slightly inflated power-method estimate, making 1 a true upper bound.

Tensors are rank <= 2 throughout, so the gradient image stacks its two
components vertically: output ``(2n, n)`` holds horizontal differences in
rows ``0..n-1`` and vertical differences in rows ``n..2n-1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse

from devopt.tensors import Array, LinearMap, operator_from_matrix, power_method_norm

__all__ = [
    "GridGeometry",
    "discrete_gradient",
    "haar_wavelet",
    "gaussian_blur",
    "ray_transform",
    "ray_matrix",
]


@dataclass(frozen=True)
class GridGeometry:
    """Acquisition layout for the ray transform on an ``n x n`` image.

    ``angles`` view directions equidistributed over ``[0, pi)``; ``detectors``
    parallel detector bins spanning the image diagonal.
    """

    n: int
    angles: int
    detectors: int

    def __post_init__(self):
        if self.n < 4:
            raise ValueError("grid must be at least 4 x 4")
        if self.angles < 1 or self.detectors < 1:
            raise ValueError("angles and detectors must be positive")


def discrete_gradient(n: int) -> LinearMap:
    """Forward-difference gradient ``(n, n) -> (2n, n)``, zero at the far edge.

    Row block 0: differences along axis 1 (horizontal); row block 1: along
    axis 0 (vertical).  Each 1-D difference operator has norm < 2, so
    ``||D||^2 <= 8`` and the certified bound is ``sqrt(8)``.
    """
    if n < 2:
        raise ValueError("gradient image needs n >= 2")

    def apply(x: Array) -> Array:
        out = np.zeros((2 * n, n))
        out[:n, :-1] = x[:, 1:] - x[:, :-1]
        out[n : 2 * n - 1, :] = x[1:, :] - x[:-1, :]
        return out

    def adjoint(y: Array) -> Array:
        yh, yv = y[:n], y[n:]
        out = np.zeros((n, n))
        # transpose of horizontal differences
        out[:, 1:] += yh[:, :-1]
        out[:, :-1] -= yh[:, :-1]
        # transpose of vertical differences
        out[1:, :] += yv[:-1, :]
        out[:-1, :] -= yv[:-1, :]
        return out

    return LinearMap(apply, adjoint, (n, n), (2 * n, n), math.sqrt(8.0))


def _haar_split(block: Array, axis: int) -> Array:
    """One 1-D Haar analysis sweep along ``axis``: averages then details."""
    a = np.moveaxis(block, axis, -1)
    even, odd = a[..., 0::2], a[..., 1::2]
    s = (even + odd) / math.sqrt(2.0)
    d = (even - odd) / math.sqrt(2.0)
    return np.moveaxis(np.concatenate([s, d], axis=-1), -1, axis)


def _haar_merge(block: Array, axis: int) -> Array:
    """Inverse of :func:`_haar_split` (exact, orthonormal)."""
    a = np.moveaxis(block, axis, -1)
    m = a.shape[-1] // 2
    s, d = a[..., :m], a[..., m:]
    out = np.empty_like(a)
    out[..., 0::2] = (s + d) / math.sqrt(2.0)
    out[..., 1::2] = (s - d) / math.sqrt(2.0)
    return np.moveaxis(out, -1, axis)


def haar_wavelet(n: int, levels: int = 3) -> LinearMap:
    """Orthonormal 2-D multi-level Haar transform ``(n, n) -> (n, n)``.

    ``n`` must be a power of two with ``2**levels <= n``.  The adjoint is the
    exact inverse (the transform is orthogonal), so the tight-frame constant
    is ``mu = 1`` and the norm bound is exactly 1.
    """
    if n < 2 or (n & (n - 1)) != 0:
        raise ValueError("haar_wavelet needs n a power of two")
    if levels < 1 or 2**levels > n:
        raise ValueError(f"levels must satisfy 1 <= levels <= log2(n)={int(math.log2(n))}")

    def apply(x: Array) -> Array:
        out = x.copy()
        size = n
        for _ in range(levels):
            block = out[:size, :size]
            block = _haar_split(block, axis=1)
            block = _haar_split(block, axis=0)
            out[:size, :size] = block
            size //= 2
        return out

    def adjoint(c: Array) -> Array:
        out = c.copy()
        size = n >> (levels - 1)
        while size <= n:
            block = out[:size, :size]
            block = _haar_merge(block, axis=0)
            block = _haar_merge(block, axis=1)
            out[:size, :size] = block
            size *= 2
        return out

    return LinearMap(apply, adjoint, (n, n), (n, n), 1.0)


def gaussian_blur(n: int, sigma: float = 1.5) -> LinearMap:
    """Separable Gaussian blur with zero padding, ``(n, n) -> (n, n)``.

    The kernel is truncated at radius ``ceil(3 sigma)`` and normalized to unit
    sum, so the operator norm is at most 1; the symmetric kernel plus zero
    padding make the map self-adjoint.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = max(1, int(math.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(t * t) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()

    def apply(x: Array) -> Array:
        out = ndimage.convolve1d(x, kernel, axis=0, mode="constant", cval=0.0)
        return ndimage.convolve1d(out, kernel, axis=1, mode="constant", cval=0.0)

    return LinearMap(apply, apply, (n, n), (n, n), 1.0)


def _siddon_row(n: int, theta: float, offset: float) -> tuple[np.ndarray, np.ndarray]:
    """Intersection lengths of one ray with the pixel grid on ``[-1, 1]^2``.

    The ray is ``p(a) = offset * (cos t, sin t) + a * (-sin t, cos t)``.
    Returns (flat pixel indices, lengths); empty arrays if the ray misses.
    Pixel ``(i, j)`` covers ``x in [-1 + j h, -1 + (j+1) h]`` and
    ``y in [-1 + i h, -1 + (i+1) h]`` with ``h = 2 / n``.
    """
    h = 2.0 / n
    ct, st = math.cos(theta), math.sin(theta)
    px, py = offset * ct, offset * st
    dx, dy = -st, ct

    a_min, a_max = -np.inf, np.inf
    for p0, d in ((px, dx), (py, dy)):
        if abs(d) < 1e-14:
            if not (-1.0 <= p0 <= 1.0):
                return np.empty(0, dtype=np.int64), np.empty(0)
        else:
            a0, a1 = (-1.0 - p0) / d, (1.0 - p0) / d
            a_min = max(a_min, min(a0, a1))
            a_max = min(a_max, max(a0, a1))
    if not a_min < a_max:
        return np.empty(0, dtype=np.int64), np.empty(0)

    lines = -1.0 + h * np.arange(n + 1)
    crossings = [np.array([a_min, a_max])]
    if abs(dx) >= 1e-14:
        crossings.append((lines - px) / dx)
    if abs(dy) >= 1e-14:
        crossings.append((lines - py) / dy)
    alphas = np.concatenate(crossings)
    alphas = np.unique(alphas[(alphas >= a_min - 1e-12) & (alphas <= a_max + 1e-12)])
    if alphas.size < 2:
        return np.empty(0, dtype=np.int64), np.empty(0)

    mids = 0.5 * (alphas[:-1] + alphas[1:])
    lengths = np.diff(alphas)
    keep = lengths > 1e-12
    mids, lengths = mids[keep], lengths[keep]
    xs, ys = px + mids * dx, py + mids * dy
    jj = np.clip(np.floor((xs + 1.0) / h).astype(np.int64), 0, n - 1)
    ii = np.clip(np.floor((ys + 1.0) / h).astype(np.int64), 0, n - 1)
    return ii * n + jj, lengths


def ray_matrix(geom: GridGeometry) -> sparse.csr_matrix:
    """Raw (unnormalized) parallel-beam matrix, entries in physical lengths.

    Row ``t * detectors + d`` is the ray at angle ``t * pi / angles`` and
    detector offset ``(d - (detectors - 1)/2) * 2 sqrt(2) / detectors``.
    """
    spacing = 2.0 * math.sqrt(2.0) / geom.detectors
    center = (geom.detectors - 1) / 2.0
    rows, cols, vals = [], [], []
    for t in range(geom.angles):
        theta = t * math.pi / geom.angles
        for d in range(geom.detectors):
            idx, lengths = _siddon_row(geom.n, theta, (d - center) * spacing)
            rows.extend([t * geom.detectors + d] * idx.size)
            cols.extend(idx.tolist())
            vals.extend(lengths.tolist())
    shape = (geom.angles * geom.detectors, geom.n * geom.n)
    return sparse.csr_matrix((vals, (rows, cols)), shape=shape)


def ray_transform(geom: GridGeometry) -> LinearMap:
    """Normalized ray transform ``(n, n) -> (angles, detectors)``.

    The sparse matrix is divided by ``(1 + 1e-6)`` times its power-method
    norm estimate, so ``norm_bound = 1`` is a genuine upper bound (the power
    method converges from below) while a same-seed re-estimate still lands in
    ``[0.999, 1.0]``.
    """
    mat = ray_matrix(geom)
    raw = operator_from_matrix(
        mat, (geom.n, geom.n), (geom.angles, geom.detectors), norm_bound=np.inf
    )
    est = power_method_norm(raw, iters=30, seed=0)
    if est <= 0:
        raise ValueError("ray transform is identically zero for this geometry")
    mat = mat * (1.0 / (est * (1.0 + 1e-6)))
    return operator_from_matrix(
        mat, (geom.n, geom.n), (geom.angles, geom.detectors), norm_bound=1.0
    )
