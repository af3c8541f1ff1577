"""Small convolutional networks that propose deviation directions.

Three 3x3 convolution layers (two hidden, one output), hidden width 32,
instance normalization on the stacked input and after each hidden layer,
leaky-ReLU activations.  The output layer starts at exactly zero so an
untrained rule reproduces its classical baseline step for step.

The forward pass is written once, over the autodiff primitives; the plain
:meth:`ConvNet.forward` simply evaluates that graph and drops the tape, so
the solver path and the training path cannot drift apart.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import autodiff as ad

__all__ = ["ConvNet", "write_checkpoint", "read_checkpoint"]


class ConvNet:
    """Maps a list of (H, W) feature channels to one (H, W) proposal.

    Parameters live in ``params`` as a flat list
    ``[w1, b1, w2, b2, w3, b3]``; weights are drawn from a centered uniform
    distribution scaled by fan-in, hidden biases start at zero, and the whole
    output layer starts at zero.
    """

    def __init__(self, in_channels: int, hidden: int = 32, slope: float = 0.2, seed: int = 0):
        if in_channels < 1 or hidden < 1:
            raise ValueError("ConvNet: channel counts must be positive")
        self.in_channels = in_channels
        self.hidden = hidden
        self.slope = slope
        rng = np.random.default_rng(seed)

        def uniform_weight(cout, cin):
            bound = 1.0 / math.sqrt(cin * 9)
            return rng.uniform(-bound, bound, size=(cout, cin, 3, 3))

        self.params = [
            uniform_weight(hidden, in_channels),
            np.zeros(hidden),
            uniform_weight(hidden, hidden),
            np.zeros(hidden),
            np.zeros((1, hidden, 3, 3)),
            np.zeros(1),
        ]

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params)

    def flatten(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.param_count,):
            raise ValueError(
                f"ConvNet.set_flat: expected {self.param_count} values, got shape {theta.shape}"
            )
        offset = 0
        for i, p in enumerate(self.params):
            self.params[i] = theta[offset : offset + p.size].reshape(p.shape).copy()
            offset += p.size

    def layer_shapes(self) -> list:
        return [list(p.shape) for p in self.params]

    def forward_var(self, channels, params=None) -> ad.Var:
        """Tape forward pass.  ``params`` lets a trainer substitute leaf Vars."""
        if len(channels) != self.in_channels:
            raise ValueError(
                f"ConvNet: expected {self.in_channels} input channels, got {len(channels)}"
            )
        if params is None:
            params = [ad.Var(p) for p in self.params]
        w1, b1, w2, b2, w3, b3 = params
        h = ad.instance_norm(ad.stack([ad.as_var(c) for c in channels]))
        h = ad.leaky_relu(ad.instance_norm(ad.conv2d(h, w1, b1)), self.slope)
        h = ad.leaky_relu(ad.instance_norm(ad.conv2d(h, w2, b2)), self.slope)
        h = ad.conv2d(h, w3, b3)
        return ad.reshape(h, h.value.shape[1:])

    def forward(self, channels) -> np.ndarray:
        return self.forward_var([np.asarray(c, dtype=np.float64) for c in channels]).value


def write_checkpoint(path, header: dict, theta: np.ndarray) -> None:
    """One JSON manifest line, then the flat parameter vector as little-endian
    64-bit floats."""
    body = np.ascontiguousarray(np.asarray(theta, dtype="<f8"))
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + body.tobytes()
    Path(path).write_bytes(blob)


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    split = raw.index(b"\n")
    header = json.loads(raw[:split].decode("utf-8"))
    theta = np.frombuffer(raw[split + 1 :], dtype="<f8").astype(np.float64)
    return header, theta
