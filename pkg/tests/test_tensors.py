import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from devopt.tensors import (
    DivergenceError,
    add,
    adjoint_test,
    check_finite,
    identity_map,
    inner,
    matrix_map,
    norm,
    operator_from_matrix,
    power_method_norm,
    scale,
    sub,
    tensor,
)

finite_floats = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


class TestConstruction:
    def test_from_nested_lists_is_float64(self):
        t = tensor([[1, 2], [3, 4]])
        assert t.dtype == np.float64
        assert t.shape == (2, 2)

    def test_flat_buffer_with_shape(self):
        t = tensor(range(6), shape=(2, 3))
        np.testing.assert_array_equal(t, [[0, 1, 2], [3, 4, 5]])

    def test_rank_three_rejected(self):
        with pytest.raises(ValueError, match="rank"):
            tensor(np.zeros((2, 2, 2)))

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            tensor([])

    def test_nan_rejected(self):
        with pytest.raises(ValueError, match="NaN or Inf"):
            tensor([1.0, np.nan])


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(add(tensor([1, 2]), tensor([3, 4])), [4, 6])

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="mismatch"):
            add(tensor([1, 2]), tensor([1, 2, 3]))
        with pytest.raises(ValueError, match="mismatch"):
            sub(tensor([[1.0]]), tensor([1.0]))

    def test_scale(self):
        np.testing.assert_array_equal(scale(tensor([1, -2]), 3.0), [3, -6])


class TestInnerAndNorm:
    def test_inner_example(self):
        assert inner(tensor([1, 2]), tensor([3, 4])) == 11.0

    def test_inner_shape_mismatch(self):
        with pytest.raises(ValueError):
            inner(tensor([1, 2]), tensor([[1, 2]]))

    def test_norm_three_four_five(self):
        assert norm(tensor([3, 4])) == 5.0

    def test_frobenius_matches_flattened(self):
        m = tensor([[1, 2], [3, 4]])
        assert norm(m) == pytest.approx(np.sqrt(30.0), rel=1e-15)

    @settings(deadline=None, max_examples=50)
    @given(st.lists(finite_floats, min_size=1, max_size=20), finite_floats)
    def test_norm_absolute_homogeneity(self, xs, c):
        x = np.array(xs)
        assert norm(c * x) == pytest.approx(abs(c) * norm(x), rel=1e-9, abs=1e-9)

    @settings(deadline=None, max_examples=50)
    @given(st.lists(st.tuples(finite_floats, finite_floats), min_size=1, max_size=20))
    def test_triangle_inequality(self, pairs):
        a = np.array([p[0] for p in pairs])
        b = np.array([p[1] for p in pairs])
        assert norm(a + b) <= norm(a) + norm(b) + 1e-6


class TestCheckFinite:
    def test_passthrough(self):
        x = np.ones(3)
        assert check_finite(x, "here") is x

    def test_diagnostic_names_context(self):
        with pytest.raises(DivergenceError, match="iteration 7"):
            check_finite(np.array([1.0, np.inf]), "iteration 7")


class TestLinearMap:
    def test_identity_adjoint_discrepancy_is_exactly_zero(self):
        assert adjoint_test(identity_map((5,))) == 0.0

    def test_matrix_map_adjoint(self):
        rng = np.random.default_rng(3)
        op = matrix_map(rng.standard_normal((4, 6)))
        assert adjoint_test(op) <= 1e-12

    def test_broken_adjoint_detected(self):
        mat = np.array([[1.0, 2.0], [3.0, 4.0]])
        bad = matrix_map(mat)
        bad = type(bad)(
            apply=bad.apply,
            adjoint=lambda y: mat.T @ y + np.array([y[0], 0.0]),
            in_shape=bad.in_shape,
            out_shape=bad.out_shape,
            norm_bound=bad.norm_bound,
        )
        assert adjoint_test(bad) > 0.1

    def test_norm_bound_respected_on_random_inputs(self):
        rng = np.random.default_rng(7)
        op = matrix_map(rng.standard_normal((8, 8)))
        for _ in range(100):
            x = rng.standard_normal(8)
            assert np.linalg.norm(op.apply(x)) <= op.norm_bound * np.linalg.norm(x)

    def test_operator_from_matrix_reshapes(self):
        mat = np.arange(12.0).reshape(6, 2)
        op = operator_from_matrix(mat, (2,), (3, 2), norm_bound=np.linalg.norm(mat, 2))
        out = op.apply(np.array([1.0, 1.0]))
        assert out.shape == (3, 2)
        assert adjoint_test(op) <= 1e-12

    @settings(deadline=None, max_examples=30)
    @given(st.integers(min_value=1, max_value=6), st.integers(min_value=1, max_value=6), st.integers(0, 2**31 - 1))
    def test_adjoint_identity_holds_for_random_matrices(self, m, k, seed):
        rng = np.random.default_rng(seed)
        op = matrix_map(rng.standard_normal((m, k)))
        assert adjoint_test(op, trials=5, seed=seed) <= 1e-10


class TestPowerMethod:
    def test_matches_svd_to_1e3_relative(self):
        rng = np.random.default_rng(11)
        mat = rng.standard_normal((20, 20))
        op = matrix_map(mat, norm_bound=np.inf)
        est = power_method_norm(op, iters=30, seed=0)
        top = np.linalg.svd(mat, compute_uv=False)[0]
        assert est == pytest.approx(top, rel=1e-3)

    def test_estimate_never_exceeds_true_norm(self):
        rng = np.random.default_rng(2)
        for seed in range(5):
            mat = rng.standard_normal((12, 9))
            op = matrix_map(mat, norm_bound=np.inf)
            top = np.linalg.svd(mat, compute_uv=False)[0]
            assert power_method_norm(op, iters=30, seed=seed) <= top * (1 + 1e-12)
