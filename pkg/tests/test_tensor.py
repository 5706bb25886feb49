import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actforecast import tensor as tn
from actforecast.tensor import Tensor

SEEDS = range(5)


def leaf(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def weighted_sum(out, w):
    """Scalar probe with distinct weights per element, so every gradient entry is exercised."""
    return tn.sum(out * Tensor(w))


def check(f, tensors, tol=1e-4):
    errs = tn.gradcheck(f, tensors)
    assert max(errs.values()) < tol, errs


class TestMatmul:
    def test_identity(self):
        out = tn.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_dot(self):
        assert tn.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_shape_error_names_both(self):
        with pytest.raises(tn.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_sum_gradient_is_column_sums(self):
        rng = np.random.default_rng(0)
        A, B = leaf(rng, 3, 4), Tensor(rng.standard_normal((4, 2)))
        tn.backward(tn.sum(A @ B))
        np.testing.assert_allclose(A.grad, np.broadcast_to(B.data.sum(axis=1), (3, 4)), rtol=1e-12)
        num = tn.numerical_grad(lambda: tn.sum(A @ B), A)
        assert tn.max_relative_error(A.grad, num) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck_batched(self, seed):
        rng = np.random.default_rng(seed)
        A, B = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
        w = rng.standard_normal((2, 3, 5))
        check(lambda: weighted_sum(A @ B, w), [A, B])

    def test_vector_times_matrix(self):
        rng = np.random.default_rng(1)
        a, B = leaf(rng, 4), leaf(rng, 4, 3)
        w = rng.standard_normal(3)
        check(lambda: weighted_sum(a @ B, w), [a, B])


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(tn.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])

    def test_stable_large(self):
        out = tn.softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        assert out[0, 0] == 1.0 and out[0, 1] == 0.0

    def test_values(self):
        e = np.exp([1.0, 2.0, 3.0])
        expected = e / e.sum()
        out = tn.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0]
        np.testing.assert_allclose(out, expected, rtol=1e-12)
        np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-5)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-50, 50))
    def test_rows_sum_to_one_and_shift_invariant(self, seed, shift):
        M = np.random.default_rng(seed).standard_normal((4, 6)) * 5
        a = tn.softmax_rows(Tensor(M)).data
        b = tn.softmax_rows(Tensor(M + shift)).data
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(a, b, atol=1e-12)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        M = leaf(rng, 3, 5)
        w = rng.standard_normal((3, 5))
        check(lambda: weighted_sum(tn.softmax_rows(M), w), [M])


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = tn.layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.0])

    def test_two_point(self):
        out = tn.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-9)

    def test_unit_moments(self):
        v = np.random.default_rng(3).standard_normal((5, 16)) * 4 + 2
        out = tn.layer_norm(Tensor(v), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 100), st.floats(-100, 100))
    def test_affine_invariance(self, seed, a, b):
        v = np.random.default_rng(seed).standard_normal(8)
        g, z = Tensor(np.ones(8)), Tensor(np.zeros(8))
        exact = tn.layer_norm(Tensor(v), g, z, eps=1e-12).data
        np.testing.assert_allclose(tn.layer_norm(Tensor(a * v + b), g, z, eps=1e-12).data, exact, atol=1e-6)
        # with the default eps the only deviation is the eps/var shrinkage
        var = (a * v).var()
        bound = 1e-5 / var * np.abs(exact).max()
        assert np.abs(tn.layer_norm(Tensor(a * v + b), g, z).data - exact).max() <= bound + 1e-12

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        v, g, b = leaf(rng, 8), leaf(rng, 8), leaf(rng, 8)
        w = rng.standard_normal(8)
        errs = tn.gradcheck(lambda: weighted_sum(tn.layer_norm(v, g, b), w), [v, g, b])
        assert errs["0"] < 1e-6
        assert max(errs.values()) < 1e-4

    def test_gradcheck_batched(self):
        rng = np.random.default_rng(9)
        v, g, b = leaf(rng, 2, 3, 6), leaf(rng, 6), leaf(rng, 6)
        w = rng.standard_normal((2, 3, 6))
        check(lambda: weighted_sum(tn.layer_norm(v, g, b), w), [v, g, b])


class TestRelu:
    def test_values(self):
        assert tn.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
        assert not tn.relu(Tensor(-np.arange(1.0, 5.0))).data.any()

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient_mask(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(20)
        x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
        v = Tensor(x, requires_grad=True)
        tn.backward(tn.sum(tn.relu(v)))
        np.testing.assert_array_equal(v.grad, (x > 0).astype(float))
        assert tn.max_relative_error(v.grad, tn.numerical_grad(lambda: tn.sum(tn.relu(v)), v)) < 1e-4


class TestElementwise:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_sigmoid_tanh_mul_add_sub(self, seed):
        rng = np.random.default_rng(seed)
        a, b = leaf(rng, 3, 4), leaf(rng, 4)
        w = rng.standard_normal((3, 4))
        check(lambda: weighted_sum(tn.sigmoid(a) * tn.tanh(b) + (a - b), w), [a, b])

    def test_sigmoid_extremes_finite(self):
        out = tn.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
        assert out.tolist() == [0.0, 0.5, 1.0]


class TestConcat:
    def test_values(self):
        assert tn.concat([Tensor([1.0, 2.0]), Tensor([3.0])]).data.tolist() == [1.0, 2.0, 3.0]

    def test_empty_right(self):
        a = Tensor([[1.0, 2.0]])
        np.testing.assert_array_equal(tn.concat([a, Tensor(np.zeros((1, 0)))]).data, a.data)

    def test_leading_mismatch(self):
        with pytest.raises(tn.ShapeError):
            tn.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))])

    def test_gradient_routes_ones(self):
        a, b = Tensor(np.ones((2, 2)), requires_grad=True), Tensor(np.ones((2, 3)), requires_grad=True)
        tn.backward(tn.sum(tn.concat([a, b])))
        assert (a.grad == 1).all() and (b.grad == 1).all()
        num = tn.numerical_grad(lambda: tn.sum(tn.concat([a, b])), b)
        assert tn.max_relative_error(b.grad, num) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        a, b = leaf(rng, 2, 3), leaf(rng, 2, 2)
        w = rng.standard_normal((2, 5))
        check(lambda: weighted_sum(tn.concat([a, b]), w), [a, b])


class TestMaxOverTime:
    def test_values(self):
        assert tn.max_over_time(Tensor([[1.0, 5.0], [3.0, 2.0]])).data.tolist() == [3.0, 5.0]

    def test_single_row(self):
        assert tn.max_over_time(Tensor([[4.0, -1.0]])).data.tolist() == [4.0, -1.0]

    def test_empty(self):
        with pytest.raises(tn.EmptySequenceError):
            tn.max_over_time(Tensor(np.zeros((0, 3))))

    def test_tie_goes_to_first_row(self):
        c = Tensor([[2.0], [2.0]], requires_grad=True)
        tn.backward(tn.sum(tn.max_over_time(c)))
        assert c.grad.tolist() == [[1.0], [0.0]]
        # one-sided probes: raising row 0 raises the max, lowering row 1 leaves it unchanged
        eps = 1e-5
        base = tn.max_over_time(Tensor([[2.0], [2.0]])).data[0]
        up0 = tn.max_over_time(Tensor([[2.0 + eps], [2.0]])).data[0]
        down1 = tn.max_over_time(Tensor([[2.0], [2.0 - eps]])).data[0]
        assert math.isclose((up0 - base) / eps, 1.0, rel_tol=1e-6)
        assert (base - down1) / eps == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_row_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        C = rng.standard_normal((6, 4))
        perm = rng.permutation(6)
        np.testing.assert_array_equal(tn.max_over_time(Tensor(C)).data, tn.max_over_time(Tensor(C[perm])).data)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        C = leaf(rng, 2, 5, 3)
        w = rng.standard_normal((2, 3))
        check(lambda: weighted_sum(tn.max_over_time(C), w), [C])


class TestCrossEntropy:
    def test_uniform(self):
        assert math.isclose(float(tn.cross_entropy(Tensor(np.zeros(4)), 2).data), math.log(4), rel_tol=1e-12)

    def test_confident(self):
        vals = [float(tn.cross_entropy(Tensor([s, 0.0, 0.0]), 0).data) for s in (0.0, 5.0, 10.0, 20.0)]
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert vals[-1] < 1e-8

    def test_value(self):
        s = np.array([1.0, 2.0, 3.0])
        expected = -(s[2] - math.log(np.exp(s).sum()))
        out = float(tn.cross_entropy(Tensor(s), 2).data)
        assert math.isclose(out, expected, rel_tol=1e-12)
        assert abs(out - 0.40761) < 1e-5

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            tn.cross_entropy(Tensor(np.zeros(3)), 3)

    def test_gradient_closed_form(self):
        s = Tensor([0.5, -1.0, 2.0], requires_grad=True)
        tn.backward(tn.cross_entropy(s, 1))
        p = np.exp(s.data) / np.exp(s.data).sum()
        np.testing.assert_allclose(s.grad, p - np.eye(3)[1], rtol=1e-12)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradcheck_rows(self, seed):
        rng = np.random.default_rng(seed)
        S = leaf(rng, 2, 4, 5)
        labels = rng.integers(0, 5, size=(2, 4))
        weights = rng.random((2, 4))
        check(lambda: tn.cross_entropy(S, labels), [S])
        check(lambda: tn.cross_entropy(S, labels, weights=weights), [S])


class TestEmbedAndIndexing:
    def test_rows(self):
        table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        assert tn.embed(table, 0).data.tolist() == [0.0, 1.0, 2.0]
        assert tn.embed(table, 3).data.tolist() == [9.0, 10.0, 11.0]
        with pytest.raises(IndexError):
            tn.embed(table, 4)

    def test_repeated_indices_accumulate(self):
        table = Tensor(np.ones((3, 2)), requires_grad=True)
        tn.backward(tn.sum(tn.embed(table, [1, 1, 2])))
        assert table.grad.tolist() == [[0, 0], [2, 2], [1, 1]]

    @pytest.mark.parametrize("seed", SEEDS)
    def test_getitem_stack_transpose_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        X = leaf(rng, 2, 4, 3)
        w = rng.standard_normal((2, 3, 4))

        def f():
            rows = [X[..., t, :] for t in range(4)]
            return weighted_sum(tn.transpose(tn.stack(rows[::-1], axis=-2)), w)

        check(f, [X])


class TestBackward:
    def test_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        tn.backward(tn.sum(x))
        assert x.grad.tolist() == [1.0, 1.0, 1.0]

    def test_product_rule(self):
        x, y = Tensor(2.0, requires_grad=True), Tensor(3.0, requires_grad=True)
        tn.backward(x * y)
        assert (float(x.grad), float(y.grad)) == (3.0, 2.0)

    def test_accumulates_on_second_call(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = tn.sum(x * x)
        tn.backward(loss)
        tn.backward(loss)
        assert x.grad.tolist() == [4.0, 8.0]

    def test_nonscalar_rejected(self):
        with pytest.raises(tn.ShapeError):
            tn.backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)

    def test_off_tape_rejected(self):
        with pytest.raises(ValueError, match="tape"):
            tn.backward(tn.sum(Tensor([1.0, 2.0])))

    def test_long_chain_no_recursion_limit(self):
        x = Tensor(1.0, requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        tn.backward(y)
        assert float(x.grad) == 1.0

    def test_shared_subexpression_visited_once(self):
        x = Tensor(3.0, requires_grad=True)
        y = x * x
        tn.backward(y + y)  # d/dx 2x^2 = 4x
        assert float(x.grad) == 12.0

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(11)
            A, B = leaf(rng, 5, 6), leaf(rng, 6, 4)
            out = tn.layer_norm(tn.relu(A @ B), Tensor(np.ones(4)), Tensor(np.zeros(4)))
            tn.backward(tn.sum(tn.softmax_rows(out) * Tensor(rng.standard_normal((5, 4)))))
            return out.data.tobytes(), A.grad.tobytes(), B.grad.tobytes()

        assert run() == run()


class TestNoGrad:
    def test_records_nothing_and_restores(self):
        x = tn.Tensor(np.ones(3), requires_grad=True)
        with tn.no_grad():
            y = tn.sum(x * 2.0)
            assert not tn.grad_enabled()
        assert tn.grad_enabled()
        assert not y.requires_grad and y.is_leaf
        assert float(y.data) == 6.0
        assert tn.sum(x * 2.0).requires_grad
