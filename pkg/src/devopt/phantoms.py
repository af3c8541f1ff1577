"""Test images: synthetic piecewise-constant phantoms and graymap ingestion.

Synthetic phantoms live in [0, 1] and are piecewise constant, which is the
regime both regularizers are designed for (sharp edges, flat plateaus).
``ingest`` reads portable graymaps (P2/P5, 8 or 16 bit) so external images
can be dropped in without extra dependencies.
"""

from __future__ import annotations

import re

import numpy as np

from .tensors import Array

__all__ = ["shepp_like", "blobs", "ingest", "phantom"]


def _ellipse_mask(n: int, cx: float, cy: float, a: float, b: float, angle: float) -> np.ndarray:
    """Boolean mask of an ellipse in [-1, 1]^2 coordinates."""
    ys, xs = np.meshgrid(np.linspace(-1.0, 1.0, n), np.linspace(-1.0, 1.0, n), indexing="ij")
    c, s = np.cos(angle), np.sin(angle)
    u = (xs - cx) * c + (ys - cy) * s
    v = -(xs - cx) * s + (ys - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


# (cx, cy, a, b, angle, additive value); a coarse homage to the classic
# head phantom: skull ring, brain, two ventricles, three small lesions
_SHEPP_PARTS = (
    (0.0, 0.0, 0.85, 0.95, 0.0, 0.8),
    (0.0, 0.0, 0.78, 0.88, 0.0, -0.6),
    (0.0, 0.12, 0.62, 0.74, 0.0, 0.25),
    (-0.22, 0.0, 0.14, 0.32, 0.25, -0.18),
    (0.22, 0.0, 0.14, 0.32, -0.25, -0.18),
    (0.0, -0.35, 0.09, 0.09, 0.0, 0.22),
    (-0.08, 0.45, 0.05, 0.06, 0.0, 0.2),
    (0.1, 0.45, 0.045, 0.045, 0.0, 0.2),
)


def shepp_like(n: int) -> Array:
    """Deterministic head-phantom lookalike on an ``n x n`` grid, values in [0, 1]."""
    if n < 4:
        raise ValueError("phantom needs n >= 4")
    img = np.zeros((n, n))
    for cx, cy, a, b, angle, val in _SHEPP_PARTS:
        img[_ellipse_mask(n, cx, cy, a, b, angle)] += val
    return np.clip(img, 0.0, 1.0)


def blobs(n: int, seed: int, count: int = 6) -> Array:
    """Random piecewise-constant phantom: ``count`` overlapping ellipses.

    Same ``(n, seed, count)`` gives the same image.  Intensities are summed
    and clipped, so overlaps create plateaus at different levels.
    """
    if n < 4:
        raise ValueError("phantom needs n >= 4")
    rng = np.random.default_rng(seed)
    img = np.zeros((n, n))
    for _ in range(count):
        cx, cy = rng.uniform(-0.6, 0.6, size=2)
        a, b = rng.uniform(0.1, 0.45, size=2)
        angle = rng.uniform(0.0, np.pi)
        val = rng.uniform(0.15, 0.5)
        img[_ellipse_mask(n, cx, cy, a, b, angle)] += val
    return np.clip(img, 0.0, 1.0)


def _read_pgm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """First ``count`` whitespace/comment-separated integer tokens and the
    offset one past the single whitespace byte that ends the last one."""
    tokens: list[int] = []
    pos = 0
    while len(tokens) < count:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\d+)").match(data, pos)
        if m is None:
            raise ValueError("graymap header is truncated or malformed")
        tokens.append(int(m.group(2)))
        pos = m.end()
    if pos >= len(data) or data[pos : pos + 1] not in b" \t\r\n":
        raise ValueError("graymap header not terminated by whitespace")
    return tokens, pos + 1


def ingest(path) -> Array:
    """Read a portable graymap (P2 ascii or P5 binary, 8/16-bit) as floats in [0, 1].

    Sample values are divided by the header's stated maximum, so a uniform
    image at any bit depth becomes a constant tensor.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"P2":
        fields = re.sub(rb"#[^\n]*", b"", data[2:]).split()
        if len(fields) < 3:
            raise ValueError("graymap header is truncated or malformed")
        width, height, maxval = (int(f) for f in fields[:3])
        samples = np.array([int(f) for f in fields[3:]], dtype=np.float64)
    elif data[:2] == b"P5":
        (width, height, maxval), offset = _read_pgm_tokens(data[2:], 3)
        raw = data[2 + offset :]
        itemsize = 2 if maxval > 255 else 1
        if len(raw) < width * height * itemsize:
            raise ValueError(
                f"graymap holds {len(raw) // itemsize} samples, "
                f"header promises {width * height}"
            )
        dtype = ">u2" if maxval > 255 else np.uint8
        samples = np.frombuffer(raw, dtype=dtype, count=width * height).astype(np.float64)
    else:
        raise ValueError("not a portable graymap (expected P2 or P5 magic)")
    if not 0 < maxval < 65536:
        raise ValueError(f"graymap maxval {maxval} outside (0, 65535]")
    if samples.size != width * height:
        raise ValueError(
            f"graymap holds {samples.size} samples, header promises {width * height}"
        )
    if samples.min() < 0 or samples.max() > maxval:
        raise ValueError("graymap sample outside [0, maxval]")
    return samples.reshape(height, width) / float(maxval)


def phantom(n: int, kind: str, seed: int = 0, path=None) -> Array:
    """Dispatch on ``kind``: ``shepp_like``, ``blobs``, or ``ingest``.

    ``ingest`` requires ``path`` and checks the image matches the requested
    extent (no resampling here; prepare images at the right size).
    """
    if kind == "shepp_like":
        return shepp_like(n)
    if kind == "blobs":
        return blobs(n, seed)
    if kind == "ingest":
        if path is None:
            raise ValueError("kind 'ingest' needs a path")
        img = ingest(path)
        if img.shape != (n, n):
            raise ValueError(f"ingested image is {img.shape}, config wants ({n}, {n})")
        return img
    raise ValueError(f"unknown phantom kind {kind!r}")
