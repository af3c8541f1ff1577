"""Problem factories shared by the test modules."""

import numpy as np

from devopt.objectives import (
    CompositeProblem,
    huber_tv,
    l1_of_orthogonal,
    least_squares,
)
from devopt.tensors import matrix_map
from devopt.transforms import discrete_gradient, gaussian_blur, haar_wavelet


def make_lsq_problem(m, k, seed, cond=None):
    """Random dense least-squares problem; returns (problem, exact minimizer).

    With ``cond`` set, singular values are rescaled geometrically so that
    cond(A^T A) = cond**2.
    """
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((m, k))
    if cond is not None:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        s = np.geomspace(1.0, 1.0 / cond, num=s.size)
        a = u @ np.diag(s) @ vt
    y = rng.standard_normal(m)
    prob = CompositeProblem(least_squares(matrix_map(a), y), y)
    xbar, *_ = np.linalg.lstsq(a, y, rcond=None)
    return prob, xbar


def random_scene(rng, n, count=3):
    """Piecewise-constant image made of overlapping random rectangles."""
    img = np.zeros((n, n))
    for _ in range(count):
        h = int(rng.integers(n // 4, n // 2 + 1))
        w = int(rng.integers(n // 4, n // 2 + 1))
        r = int(rng.integers(0, n - h + 1))
        c = int(rng.integers(0, n - w + 1))
        img[r : r + h, c : c + w] += float(rng.uniform(0.3, 1.0))
    return img


def make_huber_tv_problem(n, seed, lam=0.0015, delta=0.01, sigma=1.0, noise=0.05):
    """Blurred piecewise-constant scene with the smoothed-TV penalty."""
    rng = np.random.default_rng(seed)
    op = gaussian_blur(n, sigma=sigma)
    truth = random_scene(rng, n)
    clean = op.apply(truth)
    g = rng.standard_normal(clean.shape)
    y = clean + noise * np.linalg.norm(clean) * g / np.linalg.norm(g)
    f = least_squares(op, y)
    tv = huber_tv(discrete_gradient(n), lam, delta)
    return CompositeProblem(f, y, smooth_g=tv)


def make_wavelet_problem(n, seed, lam=0.0005, sigma=1.0, noise=0.05, levels=3):
    """Blurred scene with an l1 penalty on orthonormal wavelet coefficients."""
    rng = np.random.default_rng(seed)
    op = gaussian_blur(n, sigma=sigma)
    truth = random_scene(rng, n)
    clean = op.apply(truth)
    g = rng.standard_normal(clean.shape)
    y = clean + noise * np.linalg.norm(clean) * g / np.linalg.norm(g)
    f = least_squares(op, y)
    g_term = l1_of_orthogonal(haar_wavelet(n, levels), lam)
    return CompositeProblem(f, y, prox_g=g_term)


def make_dense_l1_problem(m, k, seed, lam=0.05):
    """Dense least squares plus plain l1 (identity frame); rank-1 tensors."""
    from devopt.tensors import identity_map

    rng = np.random.default_rng(seed)
    a = rng.standard_normal((m, k)) / np.sqrt(m)
    y = rng.standard_normal(m)
    f = least_squares(matrix_map(a), y)
    g = l1_of_orthogonal(identity_map((k,)), lam)
    return CompositeProblem(f, y, prox_g=g)
