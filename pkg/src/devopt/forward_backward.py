"""Proximal-gradient iteration with two bounded deviations and certificates.

The scheme minimizes ``F = f + g`` (``f`` smooth with reciprocal Lipschitz
constant ``beta``, ``g`` prox-friendly) by

    w_n     = x_n + dev1_n
    x_{n+1} = prox_{gamma_n g}( x_n - gamma_n grad f(w_n)
                                + (gamma_n / beta) dev1_n + dev2_n ),

with steps ``0 < gamma_n < 2 beta``.  The pair ``(dev1_n, dev2_n)`` is free
as long as, for every ``n >= 1``, the weighted energy
:func:`feasibility_lhs` stays below the history-dependent budget
:func:`feasibility_rhs` (parameters ``kappa_a, kappa_b``).  Feasible runs
admit a Lyapunov certificate: ``V_n`` of :func:`lyapunov_value` upper-bounds
``F(x_{n+1})`` and the combined sequence ``V_n + q_n`` is non-increasing when
``kappa_a, kappa_b <= 1``; with both strictly below 1 the deviations and the
steps are square-summable and cluster points minimize ``F``.

Iteration 0 always uses zero deviations so the certificate starts cleanly at
``n = 1`` (the momentum adapter's first deviation is zero anyway).

Classical methods are special cases: the zero rule is the plain
forward-backward method (ISTA when ``g`` is an l1 term), and
:class:`FistaRule` reproduces the accelerated method exactly through the
deviation interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from devopt.objectives import CompositeProblem
from devopt.tensors import Array, DivergenceError, check_finite, inner, norm

__all__ = [
    "FBState",
    "FBRule",
    "ZeroFBRule",
    "RandomFBRule",
    "FistaRule",
    "FBTrace",
    "fb_step",
    "run_fb",
    "feasibility_lhs",
    "feasibility_rhs",
    "lyapunov_value",
    "baseline_ista",
    "baseline_fista",
]

_FEAS_SLACK = 1e-12


def _prox_of(problem: CompositeProblem):
    if problem.prox_g is not None:
        return problem.prox_g.prox
    return lambda x, gamma: x


def _smooth_value(problem: CompositeProblem, x: Array) -> float:
    val = problem.f.value(x)
    if problem.smooth_g is not None:
        val += problem.smooth_g.value(x)
    return val


def _prox_value(problem: CompositeProblem, x: Array) -> float:
    return problem.prox_g.value(x) if problem.prox_g is not None else 0.0


@dataclass
class FBState:
    """Mid-run snapshot at the start of iteration ``n``.

    History fields refer to iteration ``n - 1``; ``w``/``grad_w`` are filled
    in once the current first deviation is fixed (they stay ``None`` during
    the proposal of ``dev1``).  ``gamma`` is the step about to be taken,
    ``gamma_prev`` the one already taken.
    """

    n: int
    x: Array
    x_prev: Array
    w_prev: Array
    dev1_prev: Array
    dev2_prev: Array
    gamma: float
    gamma_prev: float
    grad_w_prev: Array | None = None
    w: Array | None = None
    grad_w: Array | None = None


class FBRule:
    """Base selection rule: zero deviations (classical forward-backward).

    ``propose1`` runs before ``w_n`` exists; ``propose2`` runs after, with
    the freshly evaluated gradient at ``w_n`` supplied.  The runner never
    consults rules at iteration 0.
    """

    def reset(self, x0: Array, problem: CompositeProblem) -> None:
        pass

    def propose1(self, state: FBState, problem: CompositeProblem) -> Array:
        return np.zeros_like(state.x)

    def propose2(
        self, state: FBState, problem: CompositeProblem, dev1: Array, w: Array, grad_w: Array
    ) -> Array:
        return np.zeros_like(state.x)


class ZeroFBRule(FBRule):
    """Always zero; run_fb with this rule *is* ISTA / proximal gradient."""


def reference_norm_a(state: FBState, beta: float) -> float:
    """History budget length ``||x_n - x_{n-1} - beta/(2 beta - gamma') dev2'||``.

    Primes denote the previous iteration.  Zero at ``n = 0`` (no history).
    """
    if state.n < 1:
        return 0.0
    c = beta / (2.0 * beta - state.gamma_prev)
    return norm(state.x - state.x_prev - c * state.dev2_prev)


def reference_norm_b(state: FBState, grad_w: Array, beta: float) -> float:
    """Gradient budget length ``||grad f(w_n) - grad f(w') - (x_n - w')/beta||``."""
    if state.n < 1:
        return 0.0
    return norm(grad_w - state.grad_w_prev - (state.x - state.w_prev) / beta)


class RandomFBRule(FBRule):
    """Random directions scaled strictly inside the per-term budgets.

    Each deviation independently uses at most a ``u ~ U[0,1]`` fraction of
    the radius that makes its own lhs term equal its rhs term, so the summed
    certificate holds by construction for the given ``kappa_a, kappa_b``.
    """

    def __init__(self, kappa_a: float, kappa_b: float, seed: int = 0):
        if not (0.0 <= kappa_a <= 1.0 and 0.0 <= kappa_b <= 1.0):
            raise ValueError("kappas must lie in [0, 1]")
        self.kappa_a = float(kappa_a)
        self.kappa_b = float(kappa_b)
        self.seed = int(seed)
        self._rng = np.random.default_rng(seed)

    def reset(self, x0, problem):
        self._rng = np.random.default_rng(self.seed)

    def _direction(self, shape) -> Array:
        d = self._rng.standard_normal(shape)
        dn = norm(d)
        return d / dn if dn > 0 else d

    def propose1(self, state, problem):
        beta = problem.beta
        r_a = reference_norm_a(state, beta)
        # (1/2b)||dev1||^2 <= kappa_a (2b - g')/(2b g') r_a^2
        radius = math.sqrt(self.kappa_a * (2.0 * beta - state.gamma_prev) / state.gamma_prev) * r_a
        return (self._rng.uniform(0.0, 1.0) * radius) * self._direction(state.x.shape)

    def propose2(self, state, problem, dev1, w, grad_w):
        beta = problem.beta
        r_b = reference_norm_b(state, grad_w, beta)
        # b/(2g(2b-g))||dev2||^2 <= (b kappa_b / 2) r_b^2
        radius = math.sqrt(state.gamma * (2.0 * beta - state.gamma) * self.kappa_b) * r_b
        return (self._rng.uniform(0.0, 1.0) * radius) * self._direction(state.x.shape)


class FistaRule(FBRule):
    """Momentum expressed as deviations:

        dev1_n = ((t_n - 1)/t_{n+1}) (x_n - x_{n-1}),
        dev2_n = ((beta - gamma_n)/beta) dev1_n,

    with ``t_0 = t_1 = 1`` and ``t_{n+1} = (1 + sqrt(1 + 4 t_n^2))/2`` from
    ``n = 1`` on.  The repeated leading 1 matters: the classical accelerated
    method takes its first two proximal steps without extrapolation, so the
    coefficient (t_n - 1)/t_{n+1} must vanish at n = 0 and n = 1.  Substituted
    into the scheme, the prox argument collapses to
    ``w_n - gamma_n grad f(w_n)``: the accelerated method exactly.  The
    deviations violate the feasibility budget in general, so runs use
    ``enforce=False``; guarantees then come from the classical analysis, not
    from the certificate.
    """

    def __init__(self):
        self._t = [1.0, 1.0]

    def reset(self, x0, problem):
        self._t = [1.0, 1.0]

    def _t_at(self, n: int) -> float:
        while len(self._t) <= n:
            t = self._t[-1]
            self._t.append((1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0)
        return self._t[n]

    def momentum_coefficient(self, n: int) -> float:
        return (self._t_at(n) - 1.0) / self._t_at(n + 1)

    def propose1(self, state, problem):
        return self.momentum_coefficient(state.n) * (state.x - state.x_prev)

    def propose2(self, state, problem, dev1, w, grad_w):
        return ((problem.beta - state.gamma) / problem.beta) * dev1


def feasibility_lhs(dev1: Array, dev2: Array, beta: float, gamma: float) -> float:
    """Deviation energy ``||dev1||^2/(2 beta) + beta ||dev2||^2/(2 gamma (2 beta - gamma))``."""
    if not 0.0 < gamma < 2.0 * beta:
        raise ValueError(f"gamma={gamma} outside (0, 2 beta)")
    a = float(np.sum(dev1 * dev1)) / (2.0 * beta)
    b = beta * float(np.sum(dev2 * dev2)) / (2.0 * gamma * (2.0 * beta - gamma))
    return a + b


def feasibility_rhs(
    state: FBState, problem: CompositeProblem, kappa_a: float, kappa_b: float
) -> float:
    """History-dependent budget the deviation energy must not exceed.

    Needs ``state.w`` (hence the current ``dev1``) to be fixed; the gradient
    at ``w`` is taken from ``state.grad_w`` when cached, else evaluated.
    Only defined for ``n >= 1``.
    """
    if state.n < 1:
        raise ValueError("the feasibility budget is defined for n >= 1")
    if state.w is None:
        raise ValueError("state.w not set; fix dev1 before evaluating the budget")
    beta = problem.beta
    grad_w = state.grad_w if state.grad_w is not None else problem.gradient(state.w)
    r_a = reference_norm_a(state, beta)
    r_b = reference_norm_b(state, grad_w, beta)
    term_a = kappa_a * (2.0 * beta - state.gamma_prev) / (2.0 * beta * state.gamma_prev) * r_a**2
    term_b = beta * kappa_b / 2.0 * r_b**2
    return term_a + term_b


def fb_step(
    state: FBState,
    dev1: Array,
    dev2: Array,
    problem: CompositeProblem,
    w: Array | None = None,
    grad_w: Array | None = None,
    gamma_next: float | None = None,
) -> FBState:
    """Apply one iteration with the given deviations and advance the state.

    ``w``/``grad_w`` may be passed in when the caller already evaluated them
    (the runner does, to avoid a second gradient call); otherwise they are
    computed here.
    """
    beta = problem.beta
    gamma = state.gamma
    if not 0.0 < gamma < 2.0 * beta:
        raise ValueError(f"gamma={gamma} outside (0, 2 beta)")
    if w is None:
        w = state.x + dev1
    if grad_w is None:
        grad_w = problem.gradient(w)
    arg = state.x - gamma * grad_w + (gamma / beta) * dev1 + dev2
    x_next = _prox_of(problem)(arg, gamma)
    return FBState(
        n=state.n + 1,
        x=x_next,
        x_prev=state.x,
        w_prev=w,
        dev1_prev=dev1,
        dev2_prev=dev2,
        gamma=gamma if gamma_next is None else gamma_next,
        gamma_prev=gamma,
        grad_w_prev=grad_w,
    )


def lyapunov_value(state: FBState, problem: CompositeProblem) -> tuple[float, float]:
    """Certificate pair ``(V, V + q)`` for the step that *produced* ``state``.

    With ``w = w_{n-1}``-of-the-new-state (i.e. the w just used) and
    ``x+ = state.x``:

        V = f(w) + g(x+) + <grad f(w), x+ - w> + ||x+ - w||^2 / (2 beta)

    upper-bounds ``F(x+)`` by the descent lemma, and the combined value
    ``V + (2b - g)/(2 b g) ||x+ - x - b/(2b - g) dev2||^2`` is the
    non-increasing Lyapunov sequence for feasible runs.
    """
    if state.n < 1:
        raise ValueError("lyapunov_value needs a post-step state (n >= 1)")
    beta = problem.beta
    w, gw, x_next = state.w_prev, state.grad_w_prev, state.x
    diff = x_next - w
    v = (
        _smooth_value(problem, w)
        + _prox_value(problem, x_next)
        + inner(gw, diff)
        + float(np.sum(diff * diff)) / (2.0 * beta)
    )
    gamma = state.gamma_prev
    resid = x_next - state.x_prev - (beta / (2.0 * beta - gamma)) * state.dev2_prev
    q = (2.0 * beta - gamma) / (2.0 * beta * gamma) * float(np.sum(resid * resid))
    return v, v + q


@dataclass
class FBTrace:
    """Per-iteration record of a forward-backward run.

    ``objectives`` has length ``steps + 1``; all other arrays have length
    ``steps`` and entry ``n`` describes iteration ``n`` (``lhs``/``rhs``/
    ``feasible`` are vacuous at ``n = 0`` where deviations are forced to 0).
    ``lyapunov``/``combined`` hold ``V_n`` and ``V_n + q_n``.  Baselines that
    bypass the deviation interface (the accelerated method) carry ``None``
    certificate fields.
    """

    objectives: np.ndarray
    beta: float
    status: str
    x: Array
    gammas: np.ndarray | None = None
    lyapunov: np.ndarray | None = None
    combined: np.ndarray | None = None
    lhs: np.ndarray | None = None
    rhs: np.ndarray | None = None
    feasible: np.ndarray | None = None
    dev1_norms: np.ndarray | None = None
    dev2_norms: np.ndarray | None = None
    step_norms: np.ndarray | None = None
    iterates: list | None = None
    enforced: bool = False
    kappa_a: float | None = None
    kappa_b: float | None = None

    @property
    def steps(self) -> int:
        return len(self.objectives) - 1


def _normalize_gammas(gammas, iters: int, beta: float) -> np.ndarray:
    if np.isscalar(gammas):
        out = np.full(iters, float(gammas))
    elif callable(gammas):
        out = np.array([float(gammas(n)) for n in range(iters)])
    else:
        out = np.asarray(gammas, dtype=np.float64)
        if out.size < iters:
            raise ValueError("gamma schedule shorter than the iteration budget")
        out = out[:iters]
    if iters and not (0.0 < out.min() and out.max() < 2.0 * beta):
        raise ValueError("every gamma must lie in (0, 2 beta)")
    return out


def _enforce_pair(state, problem, dev1, dev2, beta, gamma, kappa_a, kappa_b):
    """Shrink an infeasible pair onto the certificate region.

    A single rescale cannot settle the budget because the rhs depends on
    ``dev1`` through ``w``; we re-check after each rescale and damp, with the
    always-feasible zero pair as the terminal fallback.
    """
    scale = 1.0
    for attempt in range(60):
        d1, d2 = scale * dev1, scale * dev2
        w = state.x + d1
        grad_w = problem.gradient(w)
        state.w, state.grad_w = w, grad_w
        lhs = feasibility_lhs(d1, d2, beta, gamma)
        rhs = feasibility_rhs(state, problem, kappa_a, kappa_b)
        if lhs <= rhs + _FEAS_SLACK * (1.0 + abs(rhs)):
            return d1, d2, w, grad_w
        shrink = math.sqrt(max(rhs, 0.0) / lhs) if lhs > 0 else 0.0
        scale *= min(shrink, 0.99) if attempt >= 5 else shrink
        if scale < 1e-14:
            break
    z = np.zeros_like(state.x)
    w = state.x
    gw = problem.gradient(w)
    state.w, state.grad_w = w, gw
    return z, z, w, gw


def run_fb(
    problem: CompositeProblem,
    rule: FBRule,
    x0: Array,
    gammas,
    iters: int,
    kappa_a: float = 1.0,
    kappa_b: float = 1.0,
    enforce: bool = True,
    keep_iterates: bool = False,
) -> FBTrace:
    """Run the deviation forward-backward scheme for ``iters`` steps.

    ``gammas`` may be a scalar, a sequence, or a callable of ``n``; every
    value must lie in ``(0, 2 beta)``.  Feasibility of the *raw* proposals is
    recorded against the ``(kappa_a, kappa_b)`` budget; with ``enforce=True``
    infeasible pairs are jointly shrunk (see the module docstring) so the
    accepted pair always satisfies the certificate it is recorded with.
    """
    beta = problem.beta
    if not (0.0 < beta < math.inf):
        raise ValueError("forward-backward needs a finite positive beta")
    gammas = _normalize_gammas(gammas, iters, beta)
    x = np.array(x0, dtype=np.float64)
    zero = np.zeros_like(x)
    state = FBState(
        n=0,
        x=x,
        x_prev=x.copy(),
        w_prev=x.copy(),
        dev1_prev=zero,
        dev2_prev=zero,
        gamma=gammas[0] if iters else beta,
        gamma_prev=gammas[0] if iters else beta,
    )
    rule.reset(x, problem)

    objectives = [problem.objective(x)]
    lyap, comb, lhs_l, rhs_l, feas_l = [], [], [], [], []
    d1n, d2n, stepn = [], [], []
    iterates = [x.copy()] if keep_iterates else None

    for n in range(iters):
        state.gamma = gammas[n]
        if n == 0:
            dev1, dev2 = zero, zero
            w = state.x
            grad_w = problem.gradient(w)
            lhs, rhs, feasible = 0.0, 0.0, True
        else:
            dev1 = rule.propose1(state, problem)
            w = state.x + dev1
            grad_w = problem.gradient(w)
            dev2 = rule.propose2(state, problem, dev1, w, grad_w)
            state.w, state.grad_w = w, grad_w
            lhs = feasibility_lhs(dev1, dev2, beta, state.gamma)
            rhs = feasibility_rhs(state, problem, kappa_a, kappa_b)
            feasible = lhs <= rhs + _FEAS_SLACK * (1.0 + abs(rhs))
            if enforce and not feasible:
                dev1, dev2, w, grad_w = _enforce_pair(
                    state, problem, dev1, dev2, beta, state.gamma, kappa_a, kappa_b
                )
        next_gamma = gammas[n + 1] if n + 1 < iters else gammas[n]
        state = fb_step(state, dev1, dev2, problem, w=w, grad_w=grad_w, gamma_next=next_gamma)
        check_finite(state.x, f"forward-backward: iterate at n={n + 1}")
        val = problem.objective(state.x)
        if not math.isfinite(val):
            raise DivergenceError(f"forward-backward: non-finite objective at n={n + 1}")
        objectives.append(val)
        v, vq = lyapunov_value(state, problem)
        lyap.append(v)
        comb.append(vq)
        lhs_l.append(lhs)
        rhs_l.append(rhs)
        feas_l.append(bool(feasible))
        d1n.append(norm(dev1))
        d2n.append(norm(dev2))
        stepn.append(norm(state.x - state.x_prev))
        if keep_iterates:
            iterates.append(state.x.copy())

    return FBTrace(
        objectives=np.array(objectives),
        beta=beta,
        status="completed",
        x=state.x,
        gammas=gammas,
        lyapunov=np.array(lyap),
        combined=np.array(comb),
        lhs=np.array(lhs_l),
        rhs=np.array(rhs_l),
        feasible=np.array(feas_l, dtype=bool),
        dev1_norms=np.array(d1n),
        dev2_norms=np.array(d2n),
        step_norms=np.array(stepn),
        iterates=iterates,
        enforced=enforce,
        kappa_a=kappa_a,
        kappa_b=kappa_b,
    )


def baseline_ista(
    problem: CompositeProblem, x0: Array, gammas, iters: int, keep_iterates: bool = False
) -> FBTrace:
    """Classical proximal gradient: the deviation scheme with the zero rule.

    Shares the exact code path with :func:`run_fb`, so traces agree
    bit-for-bit with a zero-rule run by construction.
    """
    return run_fb(problem, ZeroFBRule(), x0, gammas, iters, keep_iterates=keep_iterates)


def baseline_fista(
    problem: CompositeProblem, x0: Array, gammas, iters: int, keep_iterates: bool = False
) -> FBTrace:
    """Accelerated proximal gradient in its native form:

        x_n     = prox_{gamma_n g}(w_n - gamma_n grad f(w_n))
        t_{n+1} = (1 + sqrt(1 + 4 t_n^2)) / 2,   t_0 = 1
        w_{n+1} = x_n + ((t_n - 1)/t_{n+1}) (x_n - x_{n-1})

    Kept as an independent implementation; the adapter route through
    :class:`FistaRule` is tested against it.
    """
    beta = problem.beta
    gammas = _normalize_gammas(gammas, iters, beta)
    prox = _prox_of(problem)
    x_prev = np.array(x0, dtype=np.float64)
    w = x_prev.copy()
    t = 1.0
    objectives = [problem.objective(x_prev)]
    iterates = [x_prev.copy()] if keep_iterates else None
    for n in range(iters):
        g = gammas[n]
        x = prox(w - g * problem.gradient(w), g)
        check_finite(x, f"accelerated baseline: iterate at n={n + 1}")
        t_next = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
        w = x + ((t - 1.0) / t_next) * (x - x_prev)
        x_prev, t = x, t_next
        objectives.append(problem.objective(x))
        if keep_iterates:
            iterates.append(x.copy())
    return FBTrace(
        objectives=np.array(objectives),
        beta=beta,
        status="completed",
        x=x_prev,
        gammas=gammas,
        iterates=iterates,
    )
