# Unit Tests for the differentiation tape
# Forward values, backward gradients and the finite-difference checker

import math

import numpy as np
import pytest

from ugt_rec import tensor as T
from ugt_rec.errors import ContractError, ShapeError
from ugt_rec.tensor import Tensor

pytestmark = pytest.mark.unit


# =============================================================================
# FORWARD VALUES
# =============================================================================

class TestForward:
    """
    Forward values of the primitive ops

    Each op must compute exactly what numpy computes on the same arrays
    """

    def test_add_broadcasts_row(self):
        out = T.add(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([10.0, 20.0]))
        np.testing.assert_array_equal(out.data, [[11.0, 22.0], [13.0, 24.0]])

    def test_mismatched_shapes_raise_shape_error(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_matmul_inner_dimension_checked(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_softmax_rows_sum_to_one(self, rng):
        out = T.softmax(Tensor(rng.standard_normal((4, 5)) * 50), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(4))
        assert np.all(out.data >= 0)

    def test_softmax_bad_axis(self):
        with pytest.raises(ContractError):
            T.softmax(Tensor(np.ones((2, 2))), axis=3)

    def test_softmax_large_logit_stays_finite(self):
        out = T.softmax(Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_softmax_known_values(self):
        out = T.softmax(Tensor([0.0, math.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], rtol=0, atol=1e-15)

    def test_softmax_row_sums_within_tolerance(self, rng):
        out = T.softmax(Tensor(rng.standard_normal((16, 8)) * 10), axis=-1)
        assert np.max(np.abs(out.data.sum(axis=-1) - 1.0)) <= 1e-12

    def test_matmul_with_identity(self, rng):
        a = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(np.eye(4))).data, a)
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)

    def test_matmul_with_zero_matrix(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 4)))
        out = T.matmul(a, Tensor(np.zeros((4, 5))))
        assert out.shape == (2, 3, 5)
        assert not np.any(out.data)

    def test_sigmoid_extremes_stay_finite(self):
        out = T.sigmoid(Tensor([-1000.0, 0.0, 1000.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.5, 1.0])

    def test_log_sigmoid_matches_closed_form(self):
        out = T.log_sigmoid(Tensor([1.0, -800.0]))
        assert out.data[0] == pytest.approx(math.log(1.0 / (1.0 + math.exp(-1.0))))
        assert out.data[1] == pytest.approx(-800.0)

    def test_layer_norm_normalises_last_axis(self, rng):
        x = Tensor(rng.standard_normal((3, 6)) * 4 + 2)
        out = T.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)), eps=1e-12)
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-9)

    def test_l2_normalize_keeps_zero_rows(self):
        out = T.l2_normalize(Tensor([[3.0, 4.0], [0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8], [0.0, 0.0]])

    def test_gather_out_of_range(self):
        with pytest.raises(ContractError):
            T.gather(Tensor(np.ones((3, 2))), [0, 3])

    def test_split_then_concat_restores(self, rng):
        x = Tensor(rng.standard_normal((4, 5)))
        pieces = T.split(x, [2, 3], axis=-1)
        assert [p.shape for p in pieces] == [(4, 2), (4, 3)]
        np.testing.assert_array_equal(T.concat(pieces, axis=-1).data, x.data)

    def test_split_sizes_must_cover_axis(self):
        with pytest.raises(ShapeError):
            T.split(Tensor(np.ones((2, 4))), [1, 2])


# =============================================================================
# BACKWARD
# =============================================================================

class TestBackward:
    """
    Gradients recorded on the tape

    Covers accumulation over repeated uses, the no_grad switch and the
    scalar-loss precondition
    """

    def test_simple_product_rule(self):
        x = T.parameter([2.0, 3.0])
        y = T.parameter([5.0, 7.0])
        T.backward(T.sum_(x * y))
        np.testing.assert_array_equal(x.grad, [5.0, 7.0])
        np.testing.assert_array_equal(y.grad, [2.0, 3.0])

    def test_sigmoid_slope_at_zero(self):
        x = T.parameter(0.0)
        T.backward(T.sigmoid(x))
        assert x.grad == 0.25

    def test_quadratic_form_gradient(self):
        x = T.parameter([[1.0], [2.0]])
        T.backward(T.matmul(T.transpose(x), x))
        np.testing.assert_array_equal(x.grad, [[2.0], [4.0]])

    def test_reused_tensor_accumulates(self):
        x = T.parameter([1.5])
        T.backward(T.sum_(x * x + x))
        np.testing.assert_allclose(x.grad, [4.0])

    def test_repeated_backward_adds_up(self):
        x = T.parameter([1.0, 1.0])
        T.backward(T.sum_(x))
        T.backward(T.sum_(x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])
        x.zero_grad()
        assert x.grad is None

    def test_no_grad_records_nothing(self):
        x = T.parameter([1.0])
        with T.no_grad():
            y = x * 3.0
        assert y.node is None
        assert not y.requires_grad

    def test_backward_needs_scalar(self):
        with pytest.raises(ContractError):
            T.backward(T.parameter([1.0, 2.0]) * 2.0)

    def test_gather_scatters_back_repeated_rows(self):
        table = T.parameter(np.zeros((3, 2)))
        T.backward(T.sum_(T.gather(table, [0, 0, 2])))
        np.testing.assert_array_equal(table.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_shared_matrix_gradient_sums_over_batch(self, rng):
        a = T.parameter(rng.standard_normal((3, 2, 4)))
        w = T.parameter(rng.standard_normal((4, 5)))
        T.backward(T.sum_(a @ w))
        np.testing.assert_allclose(w.grad, a.data.reshape(-1, 4).sum(axis=0)[:, None] * np.ones((1, 5)))

    def test_debug_guard_catches_nan(self):
        T.set_debug(True)
        with pytest.raises(AssertionError):
            T.log(Tensor([-1.0]))


# =============================================================================
# FINITE-DIFFERENCE CHECKS
# =============================================================================

class TestGradCheck:
    """
    Central-difference gradient check of every differentiable op

    Relative error per coordinate is |a − n| / max(|a|, |n|, 1e-6)
    """

    @pytest.mark.parametrize("op", [
        lambda x: T.sum_(T.gelu(x)),
        lambda x: T.sum_(T.relu(x) * x),
        lambda x: T.sum_(T.sigmoid(x)),
        lambda x: T.sum_(T.log_sigmoid(x)),
        lambda x: T.sum_(T.exp(x * 0.5)),
        lambda x: T.sum_(T.softmax(x, axis=0) * Tensor(np.arange(12.0).reshape(3, 4))),
        lambda x: T.sum_(T.l2_normalize(x) * Tensor(np.arange(12.0).reshape(3, 4))),
        lambda x: T.sum_(T.l2_norm(x)),
        lambda x: T.mean(T.reshape(T.transpose(x), (2, 6)) * Tensor(np.arange(12.0).reshape(2, 6))),
        lambda x: T.sum_(T.gather(x, [2, 0, 2]) * Tensor(np.arange(12.0).reshape(3, 4))),
    ])
    def test_unary_ops(self, op, rng):
        x = T.parameter(rng.standard_normal((3, 4)) + 0.1)
        report = T.grad_check(op, x)
        assert report.passed, report.max_rel_error

    def test_layer_norm_all_inputs(self, rng):
        x = T.parameter(rng.standard_normal((2, 5)))
        gamma = T.parameter(rng.standard_normal(5))
        beta = T.parameter(rng.standard_normal(5))
        weights = Tensor(rng.standard_normal((2, 5)))

        def f(x, gamma, beta):
            return T.sum_(T.layer_norm(x, gamma, beta) * weights)

        report = T.grad_check(f, [x, gamma, beta])
        assert report.passed, report.max_rel_error

    def test_batched_matmul(self, rng):
        a = T.parameter(rng.standard_normal((2, 3, 4)))
        b = T.parameter(rng.standard_normal((2, 4, 2)))
        report = T.grad_check(lambda a, b: T.sum_(T.matmul(a, b) * T.matmul(a, b)), [a, b])
        assert report.passed, report.max_rel_error

    def test_step_outside_range_rejected(self):
        with pytest.raises(ContractError):
            T.grad_check(lambda x: T.sum_(x), T.parameter([1.0]), h=1e-2)

    def test_wrong_gradient_is_reported(self):
        x = T.parameter([1.0, 2.0])

        def wrong(x):
            # the tape sees x·c with c a constant copy, so d/dx misses a term
            return T.sum_(x * Tensor(x.data.copy()))

        report = T.grad_check(wrong, x)
        assert not report.passed
        assert report.max_rel_error == pytest.approx(0.5, rel=1e-6)

    def test_constant_function_passes(self):
        report = T.grad_check(lambda x: T.sum_(Tensor([1.0, 2.0])), T.parameter([0.5, -0.5]))
        assert report.passed
        np.testing.assert_array_equal(report.analytic, [0.0, 0.0])
        np.testing.assert_array_equal(report.numeric, [0.0, 0.0])

    def test_non_scalar_function_rejected(self):
        with pytest.raises(ContractError, match="scalar"):
            T.grad_check(lambda x: x * 2.0, T.parameter([1.0, 2.0]))

    @pytest.mark.parametrize("seed", range(6))
    def test_random_composites(self, seed):
        rng = np.random.default_rng(seed)
        m, k, n = (int(s) for s in rng.integers(1, 9, size=3))
        a = T.parameter(rng.standard_normal((m, k)) * 0.5)
        b = T.parameter(rng.standard_normal((k, n)) * 0.5)
        bias = T.parameter(rng.standard_normal(n) * 0.5)
        weights = Tensor(rng.standard_normal((m, n)))

        def f(a, b, bias):
            hidden = T.sigmoid(T.matmul(a, b) + bias)
            return T.sum_(T.softmax(hidden * 2.0, axis=-1) * weights) + T.mean(hidden * hidden)

        report = T.grad_check(f, [a, b, bias])
        np.testing.assert_allclose(report.analytic, report.numeric, rtol=1e-4, atol=1e-7)


# =============================================================================
# DETERMINISM
# =============================================================================

class TestDeterminism:
    def test_identical_runs_are_bit_identical(self):
        def run():
            rng = np.random.default_rng(11)
            x = T.parameter(rng.standard_normal((4, 6)))
            w = T.parameter(rng.standard_normal((6, 3)))
            gamma, beta = T.parameter(np.ones(3)), T.parameter(np.zeros(3))
            out = T.softmax(T.layer_norm(T.gelu(x @ w), gamma, beta), axis=-1)
            loss = T.sum_(T.log(out + 1e-3))
            T.backward(loss)
            return [loss.data, x.grad, w.grad, gamma.grad, beta.grad]

        for first, second in zip(run(), run()):
            assert first.tobytes() == second.tobytes()
