import math

import numpy as np
import pytest
from helpers import make_dense_l1_problem, make_wavelet_problem

from devopt.forward_backward import (
    FBState,
    FBRule,
    FistaRule,
    RandomFBRule,
    ZeroFBRule,
    baseline_fista,
    baseline_ista,
    fb_step,
    feasibility_lhs,
    feasibility_rhs,
    lyapunov_value,
    run_fb,
)
from devopt.objectives import CompositeProblem, SmoothFn, l1_of_orthogonal
from devopt.tensors import DivergenceError, identity_map


def scalar_l1_problem():
    # f(x) = x^2 / 2 (beta = 1), g = |x|
    f = SmoothFn(value=lambda x: 0.5 * float(x @ x), gradient=lambda x: x, beta=1.0)
    g = l1_of_orthogonal(identity_map((1,)), lam=1.0)
    return CompositeProblem(f, np.zeros(1), prox_g=g)


class TestFbStep:
    def test_scalar_hand_example(self):
        prob = scalar_l1_problem()
        state = FBState(
            n=0,
            x=np.array([3.0]),
            x_prev=np.array([3.0]),
            w_prev=np.array([3.0]),
            dev1_prev=np.zeros(1),
            dev2_prev=np.zeros(1),
            gamma=1.0,
            gamma_prev=1.0,
        )
        out = fb_step(state, np.zeros(1), np.zeros(1), prob)
        # gradient at 3 is 3, prox_{|.|}(3 - 3) = 0
        np.testing.assert_array_equal(out.x, [0.0])
        assert out.n == 1
        np.testing.assert_array_equal(out.x_prev, [3.0])

    def test_gamma_bounds_enforced(self):
        prob = scalar_l1_problem()
        state = FBState(
            n=0, x=np.ones(1), x_prev=np.ones(1), w_prev=np.ones(1),
            dev1_prev=np.zeros(1), dev2_prev=np.zeros(1), gamma=2.5, gamma_prev=1.0,
        )
        with pytest.raises(ValueError, match="gamma"):
            fb_step(state, np.zeros(1), np.zeros(1), prob)


class TestFeasibilityBudget:
    def test_lhs_hand_values(self):
        beta, gamma = 0.5, 0.5
        one = np.array([1.0])
        zero = np.zeros(1)
        assert feasibility_lhs(one, zero, beta, gamma) == pytest.approx(1.0)
        assert feasibility_lhs(zero, one, beta, gamma) == pytest.approx(1.0)

    def test_rhs_matches_direct_formula(self):
        rng = np.random.default_rng(0)
        beta, gamma, gamma_prev = 0.4, 0.5, 0.3
        ka, kb = 0.6, 0.8
        x, x_prev, w_prev = (rng.standard_normal(7) for _ in range(3))
        d2p = rng.standard_normal(7)
        gw, gwp = rng.standard_normal(7), rng.standard_normal(7)
        state = FBState(
            n=3, x=x, x_prev=x_prev, w_prev=w_prev,
            dev1_prev=rng.standard_normal(7), dev2_prev=d2p,
            gamma=gamma, gamma_prev=gamma_prev, grad_w_prev=gwp,
            w=x.copy(), grad_w=gw,
        )
        prob = CompositeProblem(
            SmoothFn(value=lambda z: 0.0, gradient=lambda z: gw, beta=beta),
            np.zeros(7),
        )
        got = feasibility_rhs(state, prob, ka, kb)
        ra = x - x_prev - beta / (2 * beta - gamma_prev) * d2p
        rb = gw - gwp - (x - w_prev) / beta
        want = ka * (2 * beta - gamma_prev) / (2 * beta * gamma_prev) * np.sum(ra * ra)
        want += beta * kb / 2 * np.sum(rb * rb)
        assert got == pytest.approx(want, rel=1e-12)

    def test_rhs_requires_history(self):
        prob = scalar_l1_problem()
        state = FBState(
            n=0, x=np.ones(1), x_prev=np.ones(1), w_prev=np.ones(1),
            dev1_prev=np.zeros(1), dev2_prev=np.zeros(1), gamma=1.0, gamma_prev=1.0,
        )
        with pytest.raises(ValueError, match="n >= 1"):
            feasibility_rhs(state, prob, 1.0, 1.0)


class TestRunFb:
    def test_zero_rule_is_ista_bitwise(self):
        prob = make_wavelet_problem(16, seed=0)
        x0 = np.zeros((16, 16))
        a = run_fb(prob, ZeroFBRule(), x0, prob.beta, 30, keep_iterates=True)
        b = baseline_ista(prob, x0, prob.beta, 30, keep_iterates=True)
        assert all(np.array_equal(u, v) for u, v in zip(a.iterates, b.iterates))
        assert np.array_equal(a.objectives, b.objectives)

    def test_random_rule_certificates(self):
        prob = make_dense_l1_problem(20, 12, seed=1)
        gamma = prob.beta  # = 0.5 * 2 beta
        trace = run_fb(
            prob, RandomFBRule(0.5, 0.5, seed=2), np.zeros(12), gamma, 400,
            kappa_a=0.5, kappa_b=0.5,
        )
        assert np.all(trace.feasible)
        assert np.all(trace.lhs <= trace.rhs + 1e-12)
        # V_n upper-bounds F(x_{n+1})
        assert np.all(trace.lyapunov >= trace.objectives[1:] - 1e-10)
        # combined Lyapunov sequence is non-increasing
        diffs = np.diff(trace.combined)
        slack = 1e-9 * np.maximum(1.0, np.abs(trace.combined[:-1]))
        assert np.all(diffs <= slack)

    def test_lyapunov_on_wavelet_problem(self):
        prob = make_wavelet_problem(16, seed=3)
        trace = run_fb(
            prob, RandomFBRule(0.5, 0.5, seed=4), np.zeros((16, 16)), prob.beta, 200,
            kappa_a=0.5, kappa_b=0.5,
        )
        assert np.all(np.diff(trace.combined) <= 1e-9 * np.maximum(1.0, np.abs(trace.combined[:-1])))
        assert np.all(trace.lyapunov >= trace.objectives[1:] - 1e-10)

    def test_varying_gamma_schedule(self):
        prob = make_dense_l1_problem(15, 10, seed=5)
        beta = prob.beta
        sched = [beta * (1.0 + 0.5 * math.sin(n / 3.0)) for n in range(100)]
        trace = run_fb(
            prob, RandomFBRule(0.4, 0.4, seed=6), np.zeros(10), sched, 100,
            kappa_a=0.4, kappa_b=0.4,
        )
        assert np.all(trace.feasible)
        np.testing.assert_allclose(trace.gammas, sched[:100])
        assert np.all(np.diff(trace.combined) <= 1e-9 * np.maximum(1.0, np.abs(trace.combined[:-1])))

    def test_gamma_validation(self):
        prob = make_dense_l1_problem(8, 6, seed=7)
        with pytest.raises(ValueError, match="gamma"):
            run_fb(prob, ZeroFBRule(), np.zeros(6), 2.0 * prob.beta, 5)

    def test_enforcement_produces_certified_pairs(self):
        class Oversized(FBRule):
            def propose1(self, state, problem):
                return 5.0 * (state.x - state.x_prev) + 0.1

            def propose2(self, state, problem, dev1, w, grad_w):
                return -3.0 * grad_w

        prob = make_dense_l1_problem(18, 10, seed=8)
        trace = run_fb(
            prob, Oversized(), np.zeros(10), prob.beta, 150,
            kappa_a=0.8, kappa_b=0.8,
        )
        # raw proposals are infeasible almost everywhere, yet the accepted
        # pairs keep the Lyapunov certificate intact
        assert not np.all(trace.feasible)
        assert np.all(np.diff(trace.combined) <= 1e-9 * np.maximum(1.0, np.abs(trace.combined[:-1])))
        assert np.all(trace.lyapunov >= trace.objectives[1:] - 1e-10)

    def test_unenforced_explosion_aborts_with_diagnostic(self):
        class Bomb(FBRule):
            def propose2(self, state, problem, dev1, w, grad_w):
                return 1e180 * np.ones_like(state.x)

        prob = make_dense_l1_problem(8, 6, seed=9)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergenceError):
                run_fb(prob, Bomb(), np.zeros(6), prob.beta, 10, enforce=False)

    def test_iteration_zero_has_zero_deviations(self):
        prob = make_dense_l1_problem(10, 8, seed=10)
        trace = run_fb(prob, RandomFBRule(1.0, 1.0, seed=0), np.zeros(8), prob.beta, 5)
        assert trace.dev1_norms[0] == 0.0
        assert trace.dev2_norms[0] == 0.0
        assert trace.lhs[0] == 0.0 and trace.rhs[0] == 0.0
        assert bool(trace.feasible[0])


class TestFistaAdapter:
    @pytest.mark.parametrize("gamma_over_beta", [1.0, 0.8, 1.6])
    def test_adapter_matches_native_accelerated_method(self, gamma_over_beta):
        prob = make_dense_l1_problem(25, 15, seed=11)
        gamma = gamma_over_beta * prob.beta
        x0 = np.zeros(15)
        a = run_fb(prob, FistaRule(), x0, gamma, 50, enforce=False, keep_iterates=True)
        b = baseline_fista(prob, x0, gamma, 50, keep_iterates=True)
        for u, v in zip(a.iterates, b.iterates):
            assert np.linalg.norm(u - v) <= 1e-12 * (1.0 + np.linalg.norm(v))

    def test_adapter_matches_on_images(self):
        prob = make_wavelet_problem(16, seed=12)
        x0 = np.zeros((16, 16))
        a = run_fb(prob, FistaRule(), x0, prob.beta, 50, enforce=False, keep_iterates=True)
        b = baseline_fista(prob, x0, prob.beta, 50, keep_iterates=True)
        for u, v in zip(a.iterates, b.iterates):
            assert np.linalg.norm(u - v) <= 1e-12 * (1.0 + np.linalg.norm(v))

    def test_first_step_equals_ista(self):
        prob = make_dense_l1_problem(12, 9, seed=13)
        x0 = np.zeros(9)
        f = baseline_fista(prob, x0, prob.beta, 1, keep_iterates=True)
        i = baseline_ista(prob, x0, prob.beta, 1, keep_iterates=True)
        assert np.array_equal(f.iterates[1], i.iterates[1])

    def test_momentum_coefficients(self):
        rule = FistaRule()
        # the first two proximal steps of the accelerated method carry no
        # extrapolation, so both leading coefficients vanish
        assert rule.momentum_coefficient(0) == 0.0
        assert rule.momentum_coefficient(1) == 0.0
        t2 = (1.0 + math.sqrt(5.0)) / 2.0
        t3 = (1.0 + math.sqrt(1.0 + 4.0 * t2 * t2)) / 2.0
        assert rule.momentum_coefficient(2) == pytest.approx((t2 - 1.0) / t3, rel=1e-15)

    def test_accelerated_beats_plain_on_wavelet_problem(self):
        prob = make_wavelet_problem(16, seed=14)
        x0 = np.zeros((16, 16))
        ista = baseline_ista(prob, x0, prob.beta, 300)
        fista = baseline_fista(prob, x0, prob.beta, 300)
        fstar = min(ista.objectives.min(), fista.objectives.min())
        assert fista.objectives[150] - fstar < ista.objectives[150] - fstar


class TestZeroProxReduction:
    def test_budget_reduces_to_gradient_form_when_g_is_zero_and_gamma_is_beta(self):
        # with g = 0 and gamma = beta the budget, scaled by 2 beta, becomes
        #   ||d1||^2 + ||d2||^2 <= ka ||b grad f(w') - d1'||^2
        #                        + kb ||b grad f(w) - d2'||^2
        rng = np.random.default_rng(15)
        a = rng.standard_normal((10, 10)) / 3.0
        y = rng.standard_normal(10)
        from devopt.objectives import least_squares
        from devopt.tensors import matrix_map

        prob = CompositeProblem(least_squares(matrix_map(a), y), y)
        beta = prob.beta
        ka, kb = 0.7, 0.6
        snaps = []

        class Recorder(RandomFBRule):
            def propose2(self, state, problem, dev1, w, grad_w):
                snaps.append(
                    dict(
                        n=state.n,
                        dev1=dev1.copy(),
                        grad_w=grad_w.copy(),
                        grad_w_prev=state.grad_w_prev.copy(),
                        dev1_prev=state.dev1_prev.copy(),
                        dev2_prev=state.dev2_prev.copy(),
                        state=FBState(**{**state.__dict__, "w": w.copy(), "grad_w": grad_w.copy()}),
                    )
                )
                return super().propose2(state, problem, dev1, w, grad_w)

        run_fb(
            prob, Recorder(ka, kb, seed=16), np.zeros(10), beta, 25,
            kappa_a=ka, kappa_b=kb,
        )
        assert len(snaps) == 24
        for s in snaps:
            rhs = feasibility_rhs(s["state"], prob, ka, kb)
            reduced = (
                ka * np.sum((beta * s["grad_w_prev"] - s["dev1_prev"]) ** 2)
                + kb * np.sum((beta * s["grad_w"] - s["dev2_prev"]) ** 2)
            ) / (2.0 * beta)
            assert rhs == pytest.approx(reduced, rel=1e-9, abs=1e-12)
