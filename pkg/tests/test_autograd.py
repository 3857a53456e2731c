import math

import numpy as np
import pytest

from crossdet import autograd as ag
from crossdet.autograd import Tensor, finite_difference_grad


def rel_err(a, b):
    denom = max(np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


def grad_check(build_loss, x, tol=1e-6, step=1e-5):
    """Central finite differences against the tape gradient."""
    t = Tensor(x, requires_grad=True)
    build_loss(t).backward()
    fd = finite_difference_grad(lambda a: build_loss(Tensor(a)).item(), x, step)
    assert rel_err(t.grad, fd) < tol, rel_err(t.grad, fd)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = ag.matmul(Tensor(np.eye(2)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_projector(self):
        p = np.array([[1.0, 0.0], [0.0, 0.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        out = ag.matmul(Tensor(p), Tensor(b))
        np.testing.assert_array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        b = rng.normal(size=(4, 2))
        grad_check(lambda t: ag.sum_all(ag.matmul(t, Tensor(b))),
                   rng.normal(size=(3, 4)))

    def test_associativity(self):
        rng = np.random.default_rng(1)
        a, b, c = (rng.normal(size=(3, 3)) for _ in range(3))
        left = (Tensor(a) @ Tensor(b)) @ Tensor(c)
        right = Tensor(a) @ (Tensor(b) @ Tensor(c))
        assert np.abs(left.data - right.data).max() < 1e-9


class TestSoftmaxRows:
    def test_uniform(self):
        out = ag.softmax_rows(Tensor(np.zeros((1, 3))))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]])

    def test_shift_invariance_analytic(self):
        for c in (-100.0, 0.0, 57.0):
            out = ag.softmax_rows(Tensor([[c, c + math.log(2), c]]))
            np.testing.assert_allclose(out.data, [[0.25, 0.5, 0.25]], atol=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 5))
        expected = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
        out = ag.softmax_rows(Tensor(x))
        assert np.abs(out.data - expected).max() < 1e-12

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        out = ag.softmax_rows(Tensor(rng.normal(scale=10, size=(6, 7))))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(3, 4))
        grad_check(lambda t: ag.sum_all(ag.hadamard(ag.softmax_rows(t), Tensor(w))),
                   rng.normal(size=(3, 4)))


class TestSigmoid:
    def test_zero(self):
        assert ag.sigmoid(Tensor([[0.0]])).data[0, 0] == 0.5

    def test_saturation_no_overflow(self):
        out = ag.sigmoid(Tensor([[40.0, -40.0]]))
        assert abs(out.data[0, 0] - 1.0) < 1e-12
        assert abs(out.data[0, 1]) < 1e-12

    @pytest.mark.parametrize("x", [-2.0, 0.0, 3.0])
    def test_gradient_at_points(self, x):
        grad_check(lambda t: ag.sum_all(ag.sigmoid(t)), np.array([[x]]))
        t = Tensor([[x]], requires_grad=True)
        ag.sum_all(ag.sigmoid(t)).backward()
        s = 1 / (1 + math.exp(-x))
        assert abs(t.grad[0, 0] - s * (1 - s)) < 1e-10


class TestHadamard:
    def test_ones_identity(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(2, 3))
        out = ag.hadamard(Tensor(a), Tensor(np.ones((2, 3))))
        np.testing.assert_array_equal(out.data, a)

    def test_zeros(self):
        out = ag.hadamard(Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 3))))
        assert not out.data.any()

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        out = ag.hadamard(Tensor(a), Tensor(b))
        for i in range(2):
            for j in range(3):
                assert out.data[i, j] == a[i, j] * b[i, j]

    def test_row_broadcast(self):
        a = np.ones((3, 2))
        out = ag.hadamard(Tensor(a), Tensor([2.0, 3.0]))
        np.testing.assert_array_equal(out.data, np.tile([2.0, 3.0], (3, 1)))

    def test_incompatible_shapes(self):
        with pytest.raises(ValueError):
            ag.hadamard(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_gradient_both_operands(self):
        rng = np.random.default_rng(7)
        b = rng.normal(size=(2, 3))
        grad_check(lambda t: ag.sum_all(ag.hadamard(t, Tensor(b))),
                   rng.normal(size=(2, 3)))
        a = rng.normal(size=(2, 3))
        grad_check(lambda t: ag.sum_all(ag.hadamard(Tensor(a), t)),
                   rng.normal(size=(2, 3)))


class TestMeanPool:
    def test_identical_rows(self):
        row = np.array([1.0, 2.0, 3.0])
        out = ag.mean_pool(Tensor(np.tile(row, (4, 1))), axis=0)
        np.testing.assert_allclose(out.data, row)

    def test_analytic(self):
        out = ag.mean_pool(Tensor([[1.0, 3.0], [5.0, 7.0]]), axis=0)
        np.testing.assert_array_equal(out.data, [3.0, 5.0])

    def test_bad_axis(self):
        with pytest.raises(ValueError):
            ag.mean_pool(Tensor(np.ones((2, 2))), axis=2)

    def test_gradient_is_uniform(self):
        rng = np.random.default_rng(8)
        grad_check(lambda t: ag.sum_all(ag.mean_pool(t, axis=0)),
                   rng.normal(size=(4, 3)))


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ag.sum_all(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_grad(self):
        data = np.arange(6.0).reshape(2, 3)
        x = Tensor(data, requires_grad=True)
        ag.sum_all(ag.hadamard(x, x)).backward()
        np.testing.assert_allclose(x.grad, 2 * data)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ValueError):
            Tensor(np.ones((2, 2)), requires_grad=True).backward()

    def test_accumulation_without_reset(self):
        x = Tensor(np.ones(3), requires_grad=True)
        ag.sum_all(x).backward()
        ag.sum_all(x).backward()
        np.testing.assert_array_equal(x.grad, 2 * np.ones(3))

    def test_composite_chain(self):
        rng = np.random.default_rng(9)
        b = rng.normal(size=(4, 2))

        def loss(t):
            return ag.mean_all(ag.matmul(ag.softmax_rows(t), Tensor(b)))

        grad_check(loss, rng.normal(size=(3, 4)), tol=1e-4)

    def test_fanout_accumulates(self):
        x = Tensor(np.array([[2.0]]), requires_grad=True)
        y = ag.add(x, x)
        ag.sum_all(y).backward()
        assert x.grad[0, 0] == 2.0


class TestCrossEntropy:
    def test_saturated_correct(self):
        logits = np.full((2, 3), 0.0)
        logits[0, 1] = 40.0
        logits[1, 2] = 40.0
        out = ag.cross_entropy_logits(Tensor(logits), [1, 2])
        assert out.item() < 1e-12

    def test_uniform_logits(self):
        for v in (2, 4, 7):
            out = ag.cross_entropy_logits(Tensor(np.zeros((3, v))), [0, 1, v - 1])
            assert abs(out.item() - math.log(v)) < 1e-12

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(10)
        logits = rng.normal(size=(3, 4))
        targets = [2, 0, 3]
        expected = 0.0
        for i, t in enumerate(targets):
            p = np.exp(logits[i]) / np.exp(logits[i]).sum()
            expected -= math.log(p[t])
        expected /= 3
        out = ag.cross_entropy_logits(Tensor(logits), targets)
        assert abs(out.item() - expected) < 1e-12

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            ag.cross_entropy_logits(Tensor(np.zeros((2, 3))), [0, 3])

    def test_weighted_gradient(self):
        rng = np.random.default_rng(11)
        grad_check(lambda t: ag.cross_entropy_logits(t, [1, 0], [1.0, 0.1]),
                   rng.normal(size=(2, 3)))


class TestProperties:
    @pytest.mark.parametrize("seed", range(10))
    def test_finite_difference_suite(self, seed):
        """Every differentiable op agrees with central finite differences."""
        rng = np.random.default_rng(seed)
        w = Tensor(rng.normal(size=(3, 4)))
        right = Tensor(rng.normal(size=(4, 2)))
        other = Tensor(rng.normal(size=(2, 3)))
        gain = Tensor(rng.normal(size=4))
        bias = Tensor(rng.normal(size=4))
        cases = [
            (lambda t: ag.sum_all(ag.matmul(t, right)), rng.normal(size=(3, 4))),
            (lambda t: ag.sum_all(ag.hadamard(ag.softmax_rows(t), w)),
             rng.normal(size=(3, 4))),
            (lambda t: ag.sum_all(ag.sigmoid(t)), rng.normal(size=(2, 3))),
            (lambda t: ag.sum_all(ag.hadamard(t, other)), rng.normal(size=(2, 3))),
            (lambda t: ag.sum_all(ag.mean_pool(t, axis=1)), rng.normal(size=(3, 5))),
            (lambda t: ag.cross_entropy_logits(t, [1, 2]), rng.normal(size=(2, 4))),
            (lambda t: ag.sum_all(ag.absolute(t)), rng.normal(size=(2, 3)) + 0.5),
            (lambda t: ag.sum_all(ag.layer_norm_rows(t, gain, bias)),
             rng.normal(size=(3, 4))),
        ]
        for build, x in cases:
            grad_check(build, x, tol=1e-4)

    def test_no_nan_from_large_finite_inputs(self):
        x = Tensor(np.array([[1e3, -1e3], [500.0, -500.0]]))
        for op in (ag.sigmoid, ag.softmax_rows, ag.absolute):
            assert np.all(np.isfinite(op(x).data))

    def test_nan_guard_trips(self):
        with np.errstate(over="ignore"):
            with pytest.raises(ag.NumericError):
                ag.scale(Tensor([[1e308]]), 1e308)


class TestPrecisionModes:
    def test_float32_mode(self):
        ag.set_dtype(np.float32)
        try:
            t = Tensor([[1.0, 2.0]])
            assert t.data.dtype == np.float32
        finally:
            ag.set_dtype(np.float64)

    def test_rejects_other_dtypes(self):
        with pytest.raises(ValueError):
            ag.set_dtype(np.int32)
