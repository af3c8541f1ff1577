"""Trainable selection rules.

A convolutional network proposes a raw direction; a normalization layer
rescales it so the emitted deviation satisfies the relevant certificate
budget for every parameter vector, trained or not.  Training differentiates
the end objective F(x_N) through the unrolled solver with the tape in
:mod:`devopt.autodiff` and follows Adam.

The unrolled graphs mirror the runtime schemes operation for operation
(same expressions, same grouping), so a rule with a zero output layer
reproduces the classical baseline bit for bit, and the certificate checks in
the runners apply unchanged to learned runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .forward_backward import FBRule, reference_norm_a, reference_norm_b
from .networks import ConvNet, read_checkpoint, write_checkpoint
from .objectives import CompositeProblem, ProxFn, SmoothFn
from .smooth import SmoothRule
from .tensors import DivergenceError

__all__ = [
    "smooth_value_var",
    "smooth_grad_var",
    "prox_value_var",
    "prox_apply_var",
    "objective_var",
    "normalize_smooth",
    "normalize_fb_dev1",
    "normalize_fb_dev2",
    "normalize_fb",
    "LearnedSmoothRule",
    "LearnedFBRule",
    "TrainConfig",
    "Adam",
    "unrolled_smooth_loss",
    "unrolled_fb_loss",
    "train_smooth_rule",
    "train_fb_rule",
    "save_smooth_rule",
    "save_fb_rule",
    "load_rule",
]


# ---------------------------------------------------------------------------
# differentiable objective graphs


def smooth_value_var(fn: SmoothFn, x: Var) -> Var:
    if fn.kind == "least_squares":
        r = ad.sub(ad.apply_map(x, fn.parts["op"]), Var(fn.parts["y"]))
        return ad.vsum(ad.mul(r, r))
    if fn.kind == "huber_tv":
        edges = ad.apply_map(x, fn.parts["op"])
        return ad.mul(Var(fn.parts["lam"]), ad.vsum(ad.huber(edges, fn.parts["delta"])))
    if fn.kind == "sum":
        f1, f2 = fn.parts["terms"]
        return ad.add(smooth_value_var(f1, x), smooth_value_var(f2, x))
    if fn.kind == "zero":
        return Var(0.0)
    raise ValueError(f"no differentiable graph for smooth kind {fn.kind!r}")


def smooth_grad_var(fn: SmoothFn, x: Var) -> Var:
    if fn.kind == "least_squares":
        op = fn.parts["op"]
        r = ad.sub(ad.apply_map(x, op), Var(fn.parts["y"]))
        return ad.mul(Var(2.0), ad.apply_adjoint(r, op))
    if fn.kind == "huber_tv":
        op = fn.parts["op"]
        slopes = ad.huber_prime(ad.apply_map(x, op), fn.parts["delta"])
        return ad.mul(Var(fn.parts["lam"]), ad.apply_adjoint(slopes, op))
    if fn.kind == "sum":
        f1, f2 = fn.parts["terms"]
        return ad.add(smooth_grad_var(f1, x), smooth_grad_var(f2, x))
    if fn.kind == "zero":
        return Var(np.zeros(x.value.shape))
    raise ValueError(f"no differentiable graph for smooth kind {fn.kind!r}")


def prox_value_var(fn: ProxFn, x: Var) -> Var:
    if fn.kind == "l1_orthogonal":
        return ad.mul(Var(fn.parts["lam"]), ad.vsum(ad.vabs(ad.apply_map(x, fn.parts["op"]))))
    if fn.kind == "zero":
        return Var(0.0)
    raise ValueError(f"no differentiable graph for prox kind {fn.kind!r}")


def prox_apply_var(fn: ProxFn, x: Var, gamma: float) -> Var:
    if fn.kind == "l1_orthogonal":
        op, lam, mu = fn.parts["op"], fn.parts["lam"], fn.parts["mu"]
        wx = ad.apply_map(x, op)
        shrunk = ad.soft_threshold(wx, lam * gamma * mu)
        return ad.add(x, ad.div(ad.apply_adjoint(ad.sub(shrunk, wx), op), Var(mu)))
    if fn.kind == "zero":
        return x
    raise ValueError(f"no differentiable graph for prox kind {fn.kind!r}")


def objective_var(problem: CompositeProblem, x: Var) -> Var:
    total = smooth_value_var(problem.f, x)
    if problem.smooth_g is not None:
        total = ad.add(total, smooth_value_var(problem.smooth_g, x))
    if problem.prox_g is not None:
        total = ad.add(total, prox_value_var(problem.prox_g, x))
    return total


def gradient_parts_var(problem: CompositeProblem, x: Var) -> tuple:
    gf = smooth_grad_var(problem.f, x)
    if problem.smooth_g is not None:
        gg = smooth_grad_var(problem.smooth_g, x)
    else:
        gg = Var(np.zeros(x.value.shape))
    return gf, gg


# ---------------------------------------------------------------------------
# normalization layers


def _direction(h: Var) -> Var:
    """h / sqrt(||h||^2 + 1); always strictly inside the unit ball."""
    return ad.div(h, ad.sqrt(ad.add(ad.vsum(ad.mul(h, h)), Var(1.0))))


def _norm_var(r: Var) -> Var:
    return ad.sqrt(ad.vsum(ad.mul(r, r)))


def _normalize_smooth_graph(h: Var, grad_total: Var, eps: float) -> Var:
    return ad.mul(ad.mul(_direction(h), Var(eps)), _norm_var(grad_total))


def normalize_smooth(h, grad, eps: float) -> np.ndarray:
    """Scale a raw direction into the smooth feasible ball:
    eps * (h / sqrt(||h||^2 + 1)) * ||grad||, so ||out|| < eps ||grad||
    whenever h is nonzero."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"eps={eps} outside [0, 1)")
    h = np.asarray(h, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if h.shape != grad.shape:
        raise ValueError(f"shape mismatch: {h.shape} vs {grad.shape}")
    return _normalize_smooth_graph(Var(h), Var(grad), eps).value


def _fb1_scale(beta: float, gamma_prev: float, kappa_a: float) -> float:
    if not 0.0 <= kappa_a < 1.0:
        raise ValueError(f"kappa_a={kappa_a} outside [0, 1)")
    if not 0.0 < gamma_prev < 2.0 * beta:
        raise ValueError(f"gamma={gamma_prev} outside (0, 2 beta)")
    return math.sqrt(kappa_a * (2.0 * beta - gamma_prev) / gamma_prev)


def _fb2_scale(beta: float, gamma: float, kappa_b: float) -> float:
    if not 0.0 <= kappa_b < 1.0:
        raise ValueError(f"kappa_b={kappa_b} outside [0, 1)")
    if not 0.0 < gamma < 2.0 * beta:
        raise ValueError(f"gamma={gamma} outside (0, 2 beta)")
    return math.sqrt(gamma * (2.0 * beta - gamma) * kappa_b)


def normalize_fb_dev1(h1, reference: float, beta: float, gamma_prev: float, kappa_a: float):
    """First deviation: sqrt(kappa_a (2b - g')/g') * direction(h1) * reference.

    ``gamma_prev`` is the step size of the previous iteration because that is
    the step size appearing in the matching budget term; with a constant
    schedule this is the usual form.
    """
    h1 = np.asarray(h1, dtype=np.float64)
    scale = _fb1_scale(beta, gamma_prev, kappa_a)
    return ad.mul(ad.mul(_direction(Var(h1)), Var(scale)), Var(float(reference))).value


def normalize_fb_dev2(h2, reference: float, beta: float, gamma: float, kappa_b: float):
    """Second deviation: sqrt(g (2b - g) kappa_b) * direction(h2) * reference."""
    h2 = np.asarray(h2, dtype=np.float64)
    scale = _fb2_scale(beta, gamma, kappa_b)
    return ad.mul(ad.mul(_direction(Var(h2)), Var(scale)), Var(float(reference))).value


def normalize_fb(h1, h2, state, problem: CompositeProblem, kappa_a: float, kappa_b: float):
    """Normalize a raw pair in scheme order.

    dev1 is scaled first, w = x + dev1 is formed, grad f(w) is evaluated, and
    only then can dev2's reference norm exist; the fresh (w, grad_w) pair is
    returned along with the deviations so callers do not recompute it.
    """
    beta = problem.beta
    dev1 = normalize_fb_dev1(
        h1, reference_norm_a(state, beta), beta, state.gamma_prev, kappa_a
    )
    w = state.x + dev1
    grad_w = problem.gradient(w)
    dev2 = normalize_fb_dev2(
        h2, reference_norm_b(state, grad_w, beta), beta, state.gamma, kappa_b
    )
    return dev1, dev2, w, grad_w


# ---------------------------------------------------------------------------
# rules


class LearnedSmoothRule(SmoothRule):
    """Network-proposed deviations inside the eps ball around zero."""

    def __init__(self, net: ConvNet, eps: float):
        if not 0.0 <= eps < 1.0:
            raise ValueError(f"eps={eps} outside [0, 1)")
        if net.in_channels != 4:
            raise ValueError("smooth rule network takes 4 channels: x, grad f, grad g, previous deviation")
        self.net = net
        self.eps = eps

    def epsilon(self, n: int) -> float:
        return self.eps

    def propose(self, n, x, grad_f, grad_g, dev_prev):
        h = self.net.forward([x, grad_f, grad_g, dev_prev])
        return normalize_smooth(h, grad_f + grad_g, self.eps)


class LearnedFBRule(FBRule):
    """Two networks, one per deviation, normalized into the joint budget."""

    def __init__(self, net1: ConvNet, net2: ConvNet, kappa_a: float, kappa_b: float):
        if not 0.0 <= kappa_a < 1.0 or not 0.0 <= kappa_b < 1.0:
            raise ValueError("kappa_a and kappa_b must lie in [0, 1)")
        if net1.in_channels != 3:
            raise ValueError("first network takes 3 channels: x, grad f(w_prev), previous dev1")
        if net2.in_channels != 4:
            raise ValueError("second network takes 4 channels: x, grad f(w_prev), previous dev2, dev1")
        self.net1 = net1
        self.net2 = net2
        self.kappa_a = kappa_a
        self.kappa_b = kappa_b

    def propose1(self, state, problem):
        h1 = self.net1.forward([state.x, state.grad_w_prev, state.dev1_prev])
        ref = reference_norm_a(state, problem.beta)
        return normalize_fb_dev1(h1, ref, problem.beta, state.gamma_prev, self.kappa_a)

    def propose2(self, state, problem, dev1, w, grad_w):
        h2 = self.net2.forward([state.x, state.grad_w_prev, state.dev2_prev, dev1])
        ref = reference_norm_b(state, grad_w, problem.beta)
        return normalize_fb_dev2(h2, ref, problem.beta, state.gamma, self.kappa_b)


class UnsafeSmoothRule(SmoothRule):
    """Raw network output as the deviation, skipping the safeguard layer.

    Exists to demonstrate what the normalization buys: without it nothing
    bounds the proposals, so runs may climb or blow up.  Pair it with
    ``enforce=False``, otherwise the runner projects the proposals back onto
    the feasible ball and the comparison is moot.
    """

    def __init__(self, net: ConvNet):
        if net.in_channels != 4:
            raise ValueError("smooth rule network takes 4 channels: x, grad f, grad g, previous deviation")
        self.net = net

    def epsilon(self, n: int) -> float:
        return 1.0

    def propose(self, n, x, grad_f, grad_g, dev_prev):
        return self.net.forward([x, grad_f, grad_g, dev_prev])


class UnsafeFBRule(FBRule):
    """Both deviations taken verbatim from the networks, no normalization."""

    def __init__(self, net1: ConvNet, net2: ConvNet):
        if net1.in_channels != 3 or net2.in_channels != 4:
            raise ValueError("networks take 3 (first) and 4 (second) channels")
        self.net1 = net1
        self.net2 = net2

    def propose1(self, state, problem):
        return self.net1.forward([state.x, state.grad_w_prev, state.dev1_prev])

    def propose2(self, state, problem, dev1, w, grad_w):
        return self.net2.forward([state.x, state.grad_w_prev, state.dev2_prev, dev1])


# ---------------------------------------------------------------------------
# unrolled losses


def unrolled_smooth_loss(problem, net, params, x0, n_steps, eps) -> Var:
    """F(x_N) as a tape value, unrolling the smooth scheme with the learned
    rule; mirrors :func:`devopt.smooth.run_smooth` exactly."""
    if problem.prox_g is not None:
        raise ValueError("smooth unroll needs a smooth problem")
    beta = problem.beta
    if not math.isfinite(beta):
        raise ValueError("problem has no finite curvature bound")
    x = ad.as_var(np.asarray(x0, dtype=np.float64))
    dev_prev = Var(np.zeros(x.value.shape))
    for _ in range(n_steps):
        gf, gg = gradient_parts_var(problem, x)
        total = ad.add(gf, gg)
        h = net.forward_var([x, gf, gg, dev_prev], params)
        dev = _normalize_smooth_graph(h, total, eps)
        x = ad.sub(x, ad.mul(Var(beta), ad.add(total, dev)))
        dev_prev = dev
    return objective_var(problem, x)


def unrolled_fb_loss(
    problem, net1, net2, params1, params2, x0, n_steps, gamma, kappa_a, kappa_b
) -> Var:
    """F(x_N) through the forward-backward scheme with learned deviations;
    iteration 0 takes the plain proximal-gradient step, as the runner does."""
    if problem.smooth_g is not None:
        raise ValueError("forward-backward unroll needs a prox-form problem")
    beta = problem.beta
    if not 0.0 < gamma < 2.0 * beta:
        raise ValueError(f"gamma={gamma} outside (0, 2 beta)")
    prox = problem.prox_g
    x = ad.as_var(np.asarray(x0, dtype=np.float64))
    x_prev = x
    w_prev = x
    grad_w_prev = None
    dev1_prev = Var(np.zeros(x.value.shape))
    dev2_prev = Var(np.zeros(x.value.shape))
    for n in range(n_steps):
        if n == 0:
            dev1, dev2 = dev1_prev, dev2_prev
            w = x
            grad_w = smooth_grad_var(problem.f, w)
        else:
            h1 = net1.forward_var([x, grad_w_prev, dev1_prev], params1)
            ref_a = _norm_var(
                ad.sub(ad.sub(x, x_prev), ad.mul(Var(beta / (2.0 * beta - gamma)), dev2_prev))
            )
            dev1 = ad.mul(
                ad.mul(_direction(h1), Var(_fb1_scale(beta, gamma, kappa_a))), ref_a
            )
            w = ad.add(x, dev1)
            grad_w = smooth_grad_var(problem.f, w)
            h2 = net2.forward_var([x, grad_w_prev, dev2_prev, dev1], params2)
            ref_b = _norm_var(
                ad.sub(ad.sub(grad_w, grad_w_prev), ad.div(ad.sub(x, w_prev), Var(beta)))
            )
            dev2 = ad.mul(
                ad.mul(_direction(h2), Var(_fb2_scale(beta, gamma, kappa_b))), ref_b
            )
        arg = ad.add(
            ad.add(ad.sub(x, ad.mul(Var(gamma), grad_w)), ad.mul(Var(gamma / beta), dev1)),
            dev2,
        )
        x_next = prox_apply_var(prox, arg, gamma) if prox is not None else arg
        x_prev, w_prev, grad_w_prev = x, w, grad_w
        dev1_prev, dev2_prev = dev1, dev2
        x = x_next
    return objective_var(problem, x)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    """Unsupervised training setup: fresh problem per step, unroll depth drawn
    uniformly from {n_min, ..., n_max}, Adam with batch size 1."""

    steps: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_min: int = 10
    n_max: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError("need 1 <= n_min <= n_max")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


class Adam:
    """Standard bias-corrected Adam over a flat parameter vector."""

    def __init__(self, size: int, config: TrainConfig):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.config = config

    def step(self, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        c = self.config
        self.t += 1
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * g
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g
        m_hat = self.m / (1.0 - c.beta1**self.t)
        v_hat = self.v / (1.0 - c.beta2**self.t)
        return theta - c.lr * m_hat / (np.sqrt(v_hat) + c.adam_eps)


def _flat_grad(gs) -> np.ndarray:
    return np.concatenate([g.ravel() for g in gs])


def _report(progress, step: int, losses: np.ndarray) -> None:
    if progress is not None and (step + 1) % 100 == 0:
        window = losses[max(0, step - 99) : step + 1]
        progress(step + 1, float(window.mean()))


def train_smooth_rule(sampler, net: ConvNet, eps: float, config: TrainConfig, progress=None):
    """Train a smooth rule; returns (rule, per-step loss curve).

    ``sampler(rng)`` must yield a fresh smooth CompositeProblem.  Runs start
    from x0 = 0.  The rng draw order per step is: problem, then unroll depth.
    ``progress(step, mean_loss)`` is called every 100 steps when given.
    """
    rng = np.random.default_rng(config.seed)
    theta = net.flatten()
    opt = Adam(theta.size, config)
    losses = np.empty(config.steps)
    for step in range(config.steps):
        problem = sampler(rng)
        depth = int(rng.integers(config.n_min, config.n_max + 1))
        net.set_flat(theta)
        pvars = [Var(p) for p in net.params]
        loss = unrolled_smooth_loss(
            problem, net, pvars, np.zeros(problem.x_shape), depth, eps
        )
        value = float(loss.value)
        if not math.isfinite(value):
            raise DivergenceError(
                f"training loss non-finite at step {step} (seed {config.seed})"
            )
        theta = opt.step(theta, _flat_grad(ad.grad(loss, pvars)))
        losses[step] = value
        _report(progress, step, losses)
    net.set_flat(theta)
    return LearnedSmoothRule(net, eps), losses


def train_fb_rule(
    sampler,
    net1: ConvNet,
    net2: ConvNet,
    kappa_a: float,
    kappa_b: float,
    config: TrainConfig,
    gamma: float | None = None,
    progress=None,
):
    """Train the two forward-backward rule networks jointly.

    ``gamma=None`` uses each sampled problem's beta (the usual gamma = beta
    choice); a float fixes the step size across problems.
    """
    rng = np.random.default_rng(config.seed)
    sizes = (net1.param_count, net2.param_count)
    theta = np.concatenate([net1.flatten(), net2.flatten()])
    opt = Adam(theta.size, config)
    losses = np.empty(config.steps)
    for step in range(config.steps):
        problem = sampler(rng)
        depth = int(rng.integers(config.n_min, config.n_max + 1))
        net1.set_flat(theta[: sizes[0]])
        net2.set_flat(theta[sizes[0] :])
        p1 = [Var(p) for p in net1.params]
        p2 = [Var(p) for p in net2.params]
        g = problem.beta if gamma is None else gamma
        loss = unrolled_fb_loss(
            problem, net1, net2, p1, p2, np.zeros(problem.x_shape), depth, g, kappa_a, kappa_b
        )
        value = float(loss.value)
        if not math.isfinite(value):
            raise DivergenceError(
                f"training loss non-finite at step {step} (seed {config.seed})"
            )
        theta = opt.step(theta, _flat_grad(ad.grad(loss, p1 + p2)))
        losses[step] = value
        _report(progress, step, losses)
    net1.set_flat(theta[: sizes[0]])
    net2.set_flat(theta[sizes[0] :])
    return LearnedFBRule(net1, net2, kappa_a, kappa_b), losses


# ---------------------------------------------------------------------------
# checkpoints


def save_smooth_rule(path, rule: LearnedSmoothRule, seed=None) -> None:
    header = {
        "kind": "smooth",
        "in_channels": rule.net.in_channels,
        "hidden": rule.net.hidden,
        "slope": rule.net.slope,
        "eps": rule.eps,
        "layers": rule.net.layer_shapes(),
        "seed": seed,
    }
    write_checkpoint(path, header, rule.net.flatten())


def save_fb_rule(path, rule: LearnedFBRule, seed=None) -> None:
    header = {
        "kind": "fb",
        "in_channels": [rule.net1.in_channels, rule.net2.in_channels],
        "hidden": rule.net1.hidden,
        "slope": rule.net1.slope,
        "kappa_a": rule.kappa_a,
        "kappa_b": rule.kappa_b,
        "layers_psi1": rule.net1.layer_shapes(),
        "layers_psi2": rule.net2.layer_shapes(),
        "param_counts": [rule.net1.param_count, rule.net2.param_count],
        "seed": seed,
    }
    write_checkpoint(path, header, np.concatenate([rule.net1.flatten(), rule.net2.flatten()]))


def load_rule(path):
    """Rebuild a learned rule from a checkpoint, dispatching on its kind."""
    header, theta = read_checkpoint(path)
    kind = header.get("kind")
    if kind == "smooth":
        net = ConvNet(header["in_channels"], hidden=header["hidden"], slope=header["slope"])
        net.set_flat(theta)
        return LearnedSmoothRule(net, header["eps"])
    if kind == "fb":
        cin1, cin2 = header["in_channels"]
        net1 = ConvNet(cin1, hidden=header["hidden"], slope=header["slope"])
        net2 = ConvNet(cin2, hidden=header["hidden"], slope=header["slope"])
        n1, n2 = header["param_counts"]
        if theta.size != n1 + n2:
            raise ValueError(
                f"checkpoint holds {theta.size} values, manifest says {n1 + n2}"
            )
        net1.set_flat(theta[:n1])
        net2.set_flat(theta[n1:])
        return LearnedFBRule(net1, net2, header["kappa_a"], header["kappa_b"])
    raise ValueError(f"unknown checkpoint kind {kind!r}")
