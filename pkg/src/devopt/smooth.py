"""Gradient descent with bounded deviations and per-iteration certificates.

The scheme iterates

    x_{n+1} = x_n - beta * (grad F(x_n) + dev_n),

where ``dev_n`` is *any* vector satisfying the feasibility certificate

    ||dev_n|| <= eps_n * ||grad F(x_n)||,        0 <= eps_n <= 1.

Feasibility buys three guarantees: F(x_n) is non-increasing, the gap
F(x_n) - F(xbar) obeys the product rate bound implemented by
:func:`rate_factor_product`, and the iterates converge to a minimizer when
``sum_n (1 - eps_n) / (n + 2)`` diverges.  How ``dev_n`` is chosen inside the
ball is a free design parameter (the "selection rule"); this module ships the
zero rule (plain gradient descent), a random-in-ball rule, and an
overstep rule, while :mod:`devopt.learned` adds a trained network rule.

Every run records, per iteration, whether the *raw* proposal was feasible;
with ``enforce=True`` infeasible proposals are radially projected onto the
ball, so accepted deviations always satisfy the certificate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from devopt.objectives import CompositeProblem
from devopt.tensors import Array, DivergenceError, check_finite, norm

__all__ = [
    "SmoothRule",
    "ZeroSmoothRule",
    "RandomBallRule",
    "OverstepRule",
    "SmoothTrace",
    "smooth_step",
    "run_smooth",
    "rate_factor_product",
    "rate_bound",
    "fixed_eps_factor",
    "fixed_eps_factor_gamma",
    "baseline_gd",
    "baseline_nesterov",
]

# rounding slack for the feasibility flag: proposals constructed on the
# boundary of the ball may overshoot by a few ulps
_FEAS_SLACK = 1e-12


class SmoothRule:
    """Base selection rule: the zero deviation with eps = 0.

    Subclasses override :meth:`epsilon` (the per-iteration ball radius as a
    fraction of the gradient norm, in [0, 1]) and :meth:`propose`.
    ``reset`` is called once per run before iteration 0.
    """

    def reset(self, x0: Array, problem: CompositeProblem) -> None:
        pass

    def epsilon(self, n: int) -> float:
        return 0.0

    def propose(
        self, n: int, x: Array, grad_f: Array, grad_g: Array, dev_prev: Array
    ) -> Array:
        return np.zeros_like(x)


class ZeroSmoothRule(SmoothRule):
    """Always proposes zero; the scheme reduces to plain gradient descent."""


class RandomBallRule(SmoothRule):
    """Uniform-radius random direction inside the feasible ball.

    Draws a standard-normal direction, normalizes it, and scales by
    ``u * eps * ||grad F||`` with ``u ~ U[0, 1]``.  Feasible by construction;
    deterministic per (seed, run).
    """

    def __init__(self, eps: float, seed: int = 0):
        if not 0.0 <= eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        self.eps = float(eps)
        self.seed = int(seed)
        self._rng = np.random.default_rng(seed)

    def reset(self, x0: Array, problem: CompositeProblem) -> None:
        self._rng = np.random.default_rng(self.seed)

    def epsilon(self, n: int) -> float:
        return self.eps

    def propose(self, n, x, grad_f, grad_g, dev_prev):
        gn = norm(grad_f + grad_g)
        d = self._rng.standard_normal(x.shape)
        dn = norm(d)
        if dn == 0.0 or gn == 0.0:
            return np.zeros_like(x)
        u = self._rng.uniform(0.0, 1.0)
        return (u * self.eps * gn / dn) * d

    def __repr__(self):
        return f"RandomBallRule(eps={self.eps}, seed={self.seed})"


class OverstepRule(SmoothRule):
    """Deviation collinear with the gradient: ``dev = t * grad F``.

    The update becomes ``x - beta (1 + t) grad F``, i.e. a rescaled gradient
    step; ``|t| <= 1`` keeps it feasible with ``eps = |t|``, sweeping step
    sizes in ``(0, 2 beta]`` while every certificate still holds.
    """

    def __init__(self, t: float):
        if abs(t) > 1.0:
            raise ValueError("|t| must be at most 1 for feasibility")
        self.t = float(t)

    def epsilon(self, n: int) -> float:
        return abs(self.t)

    def propose(self, n, x, grad_f, grad_g, dev_prev):
        return self.t * (grad_f + grad_g)


@dataclass
class SmoothTrace:
    """Everything a run certifies, one entry per iteration.

    ``objectives``/``grad_norms`` have length ``steps + 1`` (they include the
    initial point); the per-step arrays have length ``steps``.  ``feasible``
    flags the *raw* proposals; accepted deviations are always feasible when
    the run enforced.  ``bound_factors[n]`` is the rate-certificate product
    ``prod_{k<n} (1 - (1 - eps_k^2)/(k + 2))``.  For baselines that are not
    deviation schemes (Nesterov) the certificate fields are ``None``.
    """

    objectives: np.ndarray
    grad_norms: np.ndarray
    beta: float
    status: str
    x: Array
    dev_norms: np.ndarray | None = None
    eps: np.ndarray | None = None
    feasible: np.ndarray | None = None
    bound_factors: np.ndarray | None = None
    rate_bounds: np.ndarray | None = None
    iterates: list | None = None
    enforced: bool = False

    @property
    def steps(self) -> int:
        return len(self.objectives) - 1

    def rate_bound(self, dist0: float) -> np.ndarray:
        """Certified gap bound ``dist0^2 * bound_factors / (2 beta)``."""
        if self.bound_factors is None:
            raise ValueError("this trace has no rate certificate")
        return self.bound_factors * (dist0**2) / (2.0 * self.beta)


def smooth_step(x: Array, grad: Array, dev: Array, beta: float) -> Array:
    """One update ``x - beta * (grad + dev)`` (no validation; hot path)."""
    return x - beta * (grad + dev)


def run_smooth(
    problem: CompositeProblem,
    rule: SmoothRule,
    x0: Array,
    iters: int,
    enforce: bool = True,
    keep_iterates: bool = False,
    minimizer: Array | None = None,
) -> SmoothTrace:
    """Run the deviation scheme for ``iters`` steps from ``x0``.

    With ``enforce=True`` every infeasible raw proposal is radially rescaled
    onto the feasibility ball (direction preserved), so the returned trace's
    certificates are valid unconditionally; the ``feasible`` flags still
    report the raw proposals.  A zero gradient makes the feasible set {0};
    the run then stops with status ``"stationary"``.

    ``minimizer`` (if supplied) fills ``trace.rate_bounds`` with the certified
    gap bounds relative to ``||x0 - minimizer||``.
    """
    if problem.prox_g is not None:
        raise ValueError("problem has a non-smooth term; use the forward-backward scheme")
    beta = problem.beta
    if not (0.0 < beta < math.inf):
        raise ValueError(f"smooth scheme needs a finite positive beta, got {beta}")
    x = np.array(x0, dtype=np.float64)
    if x.shape != np.shape(x0):
        raise ValueError("x0 shape mismatch")

    objectives = [problem.objective(x)]
    grad_norms: list[float] = []
    dev_norms: list[float] = []
    eps_used: list[float] = []
    feasible: list[bool] = []
    factors = [1.0]
    iterates = [x.copy()] if keep_iterates else None
    dev_prev = np.zeros_like(x)
    status = "completed"
    rule.reset(x, problem)

    for n in range(iters):
        gf, gg = problem.gradient_parts(x)
        grad = gf + gg
        gn = norm(grad)
        grad_norms.append(gn)

        eps_n = float(rule.epsilon(n))
        if not 0.0 <= eps_n <= 1.0:
            raise ValueError(f"rule returned eps={eps_n} outside [0, 1] at n={n}")

        if gn == 0.0 and enforce:
            # feasible set is {0}; the step is a no-op, stop early
            status = "stationary"
            break

        raw = rule.propose(n, x, gf, gg, dev_prev)
        raw_n = norm(raw)
        cap = eps_n * gn
        is_feasible = raw_n <= cap + _FEAS_SLACK * (1.0 + gn)
        dev = raw
        if enforce and not is_feasible:
            dev = raw * (cap / raw_n) if raw_n > 0.0 else np.zeros_like(raw)

        x = smooth_step(x, grad, dev, beta)
        check_finite(x, f"smooth scheme: iterate at n={n + 1}")
        val = problem.objective(x)
        if not math.isfinite(val):
            raise DivergenceError(f"smooth scheme: non-finite objective at n={n + 1}")
        objectives.append(val)
        dev_norms.append(norm(dev))
        eps_used.append(eps_n)
        feasible.append(bool(is_feasible))
        factors.append(factors[-1] * (1.0 - (1.0 - eps_n**2) / (n + 2.0)))
        dev_prev = dev
        if keep_iterates:
            iterates.append(x.copy())

    grad_norms.append(norm(problem.gradient(x)))
    trace = SmoothTrace(
        objectives=np.array(objectives),
        grad_norms=np.array(grad_norms[: len(objectives)]),
        beta=beta,
        status=status,
        x=x,
        dev_norms=np.array(dev_norms),
        eps=np.array(eps_used),
        feasible=np.array(feasible, dtype=bool),
        bound_factors=np.array(factors),
        iterates=iterates,
        enforced=enforce,
    )
    if minimizer is not None:
        dist0 = norm(np.asarray(x0, dtype=np.float64) - minimizer)
        trace.rate_bounds = trace.rate_bound(dist0)
    return trace


def rate_factor_product(eps_schedule) -> np.ndarray:
    """Cumulative certificate factors ``prod_{k<n} (1 - (1 - eps_k^2)/(k+2))``.

    Entry 0 is 1 (empty product); entry n bounds the gap after n steps as
    ``F(x_n) - F(xbar) <= factor_n * ||x_0 - xbar||^2 / (2 beta)``.
    """
    eps = np.asarray(eps_schedule, dtype=np.float64)
    if eps.size and (eps.min() < 0.0 or eps.max() > 1.0):
        raise ValueError("eps schedule must lie in [0, 1]")
    k = np.arange(eps.size)
    terms = 1.0 - (1.0 - eps**2) / (k + 2.0)
    return np.concatenate([[1.0], np.cumprod(terms)])


def rate_bound(eps_schedule, beta: float, dist0: float) -> np.ndarray:
    """Certified gap bounds for a whole schedule (see rate_factor_product)."""
    return rate_factor_product(eps_schedule) * dist0**2 / (2.0 * beta)


def fixed_eps_factor(eps: float, n: int) -> float:
    """Constant-eps simplified factor ``prod_{k<n} (k + 1 + eps)/(k + 2)``.

    This is the closed-form-friendly upper bound of the exact product (which
    has ``eps^2`` where this has ``eps``; since ``eps^2 <= eps`` on [0, 1]
    each factor only grows).  At ``eps = 0`` it collapses to ``1/(n + 1)``,
    the classical gradient-descent rate.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    out = 1.0
    for k in range(n):
        out *= (k + 1.0 + eps) / (k + 2.0)
    return out


def fixed_eps_factor_gamma(eps: float, n: int) -> float:
    """Gamma-function closed form of :func:`fixed_eps_factor`:

    ``Gamma(n + 1 + eps) / (Gamma(n + 2) Gamma(1 + eps))``, evaluated in log
    space so large ``n`` cannot overflow.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    return math.exp(
        math.lgamma(n + 1.0 + eps) - math.lgamma(n + 2.0) - math.lgamma(1.0 + eps)
    )


def baseline_gd(
    problem: CompositeProblem, x0: Array, iters: int, keep_iterates: bool = False
) -> SmoothTrace:
    """Plain gradient descent: the deviation scheme with the zero rule.

    Shares the exact code path with :func:`run_smooth`, so traces agree
    bit-for-bit with a zero-rule run by construction.
    """
    return run_smooth(problem, ZeroSmoothRule(), x0, iters, keep_iterates=keep_iterates)


def baseline_nesterov(
    problem: CompositeProblem, x0: Array, iters: int, keep_iterates: bool = False
) -> SmoothTrace:
    """Momentum baseline:

        x_n     = w_n - beta grad F(w_n)
        t_{n+1} = (1 + sqrt(1 + 4 t_n^2)) / 2,   t_0 = 1
        w_{n+1} = x_n + ((t_n - 1)/t_{n+1}) (x_n - x_{n-1})

    The first step has momentum coefficient 0 and equals a gradient step.
    Not a deviation scheme: the trace carries no feasibility certificates.
    """
    if problem.prox_g is not None:
        raise ValueError("problem has a non-smooth term; use baseline_fista")
    beta = problem.beta
    if not (0.0 < beta < math.inf):
        raise ValueError("nesterov needs a finite positive beta")
    x_prev = np.array(x0, dtype=np.float64)
    w = x_prev.copy()
    t = 1.0
    objectives = [problem.objective(x_prev)]
    grad_norms = [norm(problem.gradient(x_prev))]
    iterates = [x_prev.copy()] if keep_iterates else None

    for n in range(iters):
        x = w - beta * problem.gradient(w)
        check_finite(x, f"nesterov: iterate at n={n + 1}")
        t_next = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
        w = x + ((t - 1.0) / t_next) * (x - x_prev)
        x_prev = x
        t = t_next
        objectives.append(problem.objective(x))
        grad_norms.append(norm(problem.gradient(x)))
        if keep_iterates:
            iterates.append(x.copy())

    return SmoothTrace(
        objectives=np.array(objectives),
        grad_norms=np.array(grad_norms),
        beta=beta,
        status="completed",
        x=x_prev,
        iterates=iterates,
    )
