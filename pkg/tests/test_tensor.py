"""Autodiff core: forward values, backward rules, tape semantics and gradient checking."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from acvi import gradsuite
from acvi import tensor as T
from acvi.tensor import ParamStore, Tape, Tensor

finite = st.floats(-5, 5, allow_nan=False, width=64)


def grad_of(fn, *inputs):
    """Gradients of scalar ``fn(*inputs)`` with respect to each input."""
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        out = fn(*inputs)
    T.backward(tape, out)
    return [t.grad for t in inputs]


class TestMatmul:
    def test_identity(self, rng, wide):
        M = rng.standard_normal((3, 3))
        out = T.matmul(Tensor(np.eye(3)), Tensor(M))
        np.testing.assert_array_equal(out.data, M)

    def test_one_by_one(self):
        assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_triple_loop_oracle(self, rng, wide):
        A, B = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        expected = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    expected[i, j] += A[i, k] * B[k, j]
        np.testing.assert_allclose(T.matmul(Tensor(A), Tensor(B)).data, expected, rtol=0, atol=1e-12)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_gradients(self, rng, wide):
        A, B = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((3, 4)))
        gA, gB = grad_of(lambda a, b: T.sum(T.matmul(a, b)), A, B)
        np.testing.assert_allclose(gA, np.ones((2, 4)) @ B.data.T)
        np.testing.assert_allclose(gB, A.data.T @ np.ones((2, 4)))


class TestElementwise:
    def test_relu_sign_cases(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_is_stable_at_extremes(self):
        out = T.sigmoid(Tensor([-800.0, 800.0], dtype=np.float64)).data
        assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0

    def test_tanh_gradient_matches_central_difference(self, wide):
        x = Tensor([0.3])
        (g,) = grad_of(lambda t: T.sum(T.tanh(t)), x)
        eps = 1e-6
        fd = (np.tanh(0.3 + eps) - np.tanh(0.3 - eps)) / (2 * eps)
        assert abs(g[0] - fd) / abs(fd) < 1e-6

    @pytest.mark.parametrize("kind", ["tanh", "sigmoid", "relu", "exp", "log"])
    def test_dispatch_matches_direct(self, kind):
        x = Tensor([0.5, 1.5])
        np.testing.assert_array_equal(T.elementwise(kind, x).data, getattr(T, kind)(x).data)

    def test_dispatch_unknown(self):
        with pytest.raises(ValueError, match="unknown elementwise op"):
            T.elementwise("cosh", Tensor([1.0]))

    def test_log_domain(self):
        with pytest.raises(T.DomainError):
            T.log(Tensor([1.0, 0.0]))

    def test_shape_mismatch_is_not_broadcast(self):
        with pytest.raises(T.DimensionError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_scalar_operand_broadcasts(self, wide):
        a = Tensor(np.arange(6.0).reshape(2, 3))
        out = a * 2.0
        np.testing.assert_array_equal(out.data, 2 * a.data)
        s = Tensor([3.0])
        ga, gs = grad_of(lambda x, y: T.sum(T.mul(x, y)), a, s)
        np.testing.assert_array_equal(ga, np.full((2, 3), 3.0))
        np.testing.assert_array_equal(gs, [a.data.sum()])

    def test_minimum_tie_sends_gradient_to_first(self):
        a, b = Tensor([1.0, 2.0]), Tensor([1.0, 3.0])
        ga, gb = grad_of(lambda x, y: T.sum(T.minimum(x, y)), a, b)
        np.testing.assert_array_equal(ga, [1.0, 1.0])
        np.testing.assert_array_equal(gb, [0.0, 0.0])


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_extended_precision_oracle(self, wide):
        x = np.array([1.0, 2.0, 3.0])
        e = np.exp(x.astype(np.longdouble))
        expected = (e / e.sum()).astype(np.float64)
        np.testing.assert_allclose(T.softmax(Tensor(x)).data, expected, rtol=0, atol=1e-12)

    @given(arrays(np.float64, st.integers(1, 8), elements=finite), st.floats(-50, 50))
    def test_shift_invariance(self, x, c):
        with T.wide():
            a = T.softmax(Tensor(x)).data
            b = T.softmax(Tensor(x + c)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    @given(arrays(np.float64, 6, elements=finite), arrays(np.bool_, 6))
    def test_masked_positions_are_exactly_zero(self, x, mask):
        mask[0] = True
        with T.wide():
            y = T.softmax(Tensor(x), mask).data
        assert np.all(y[~mask] == 0.0)
        assert abs(y.sum() - 1.0) < 1e-12

    def test_fully_masked_row_rejected(self):
        with pytest.raises(T.InvalidMaskError):
            T.softmax(Tensor([[1.0, 2.0]]), np.array([[False, False]]))


class TestBackward:
    def test_square_derivative(self, wide):
        x = Tensor([3.0])
        (g,) = grad_of(lambda t: T.sum(t * t), x)
        assert g[0] == 6.0

    def test_constant_has_zero_gradient(self, wide):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum(Tensor([2.0]) * Tensor([5.0])) + T.sum(x) * 0.0
        T.backward(tape, loss)
        assert x.grad[0] == 0.0

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(T.ShapeError):
            T.backward(tape, y)

    def test_cleared_tape_invalidates_ids(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            y = T.sum(x * x)
        tape.clear()
        with pytest.raises(ValueError, match="cleared"):
            T.backward(tape, y)

    def test_shared_subexpression_accumulates(self, wide):
        x = Tensor([2.0])
        (g,) = grad_of(lambda t: T.sum(T.tanh(t) * T.tanh(t) + t), x)
        th = np.tanh(2.0)
        assert g[0] == pytest.approx(2 * th * (1 - th ** 2) + 1, rel=1e-12)

    def test_two_layer_tanh_network(self, rng, wide):
        store = ParamStore()
        store.add("W1", rng.standard_normal((4, 3)))
        store.add("b1", rng.standard_normal(4))
        store.add("W2", rng.standard_normal((2, 4)))
        x = Tensor(rng.standard_normal((5, 3)))
        w = rng.standard_normal((5, 2))

        def fn():
            h = T.tanh(T.linear(x, store["W1"], store["b1"]))
            return T.sum(T.tanh(T.linear(h, store["W2"])) * Tensor(w))

        report = T.grad_check(fn, store, epsilon=1e-5, tolerance=1e-4)
        assert report.passed, str(report)

    def test_backward_accumulates_into_grad(self, wide):
        x = Tensor([1.0], requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                y = T.sum(x * 3.0)
            T.backward(tape, y)
        assert x.grad[0] == 6.0

    def test_padding_row_gets_no_gradient(self, wide):
        table = Tensor(np.ones((4, 2)))
        (g,) = grad_of(lambda t: T.sum(T.embedding(t, np.array([0, 2, 0, 3]))), table)
        np.testing.assert_array_equal(g[0], [0.0, 0.0])
        np.testing.assert_array_equal(g[2], [1.0, 1.0])


class TestGradCheck:
    def test_linear_function_exact(self, wide):
        store = ParamStore()
        store.add("w", np.array([1.0, -2.0, 0.5]))
        c = Tensor([3.0, 4.0, 5.0])
        report = T.grad_check(lambda: T.sum(store["w"] * c), store)
        assert report.max_error < 1e-9

    def test_sum_tanh(self, rng, wide):
        store = ParamStore()
        store.add("W", rng.standard_normal((3, 4)))
        x = Tensor(rng.standard_normal((4, 2)))
        report = T.grad_check(lambda: T.sum(T.tanh(T.matmul(store["W"], x))), store, tolerance=1e-4)
        assert report.passed

    def test_corrupted_backward_is_caught(self, wide):
        def bad_square(x):
            return T.record(x.data ** 2, (x,), lambda g: (1.1 * 2 * x.data * g,), "bad_square")

        store = ParamStore()
        store.add("x", np.array([0.7, -1.3]))
        report = T.grad_check(lambda: T.sum(bad_square(store["x"])), store)
        assert not report.passed
        assert report.failures() == ["x"]
        assert report.max_error == pytest.approx(0.1 / 1.1, rel=1e-4)

    def test_nondeterministic_function_rejected(self, wide):
        store = ParamStore()
        store.add("x", np.array([1.0]))
        counter = iter(range(100))
        with pytest.raises(T.DeterminismError):
            T.grad_check(lambda: T.sum(store["x"] * float(next(counter))), store)


@pytest.mark.parametrize("case", [c.name for c in gradsuite.cases(("ops", "layers"))])
@pytest.mark.parametrize("seed", [0, 1])
def test_registered_case(case, seed):
    result = gradsuite.run_case(gradsuite.REGISTRY[case], seed)
    assert result.passed, str(result.report)


def test_every_primitive_op_is_registered():
    ops = {"matmul", "bmm", "linear", "add_bias", "add", "sub", "mul", "scale", "neg", "tanh", "sigmoid",
           "relu", "softplus", "exp", "log", "log_floor", "square", "softmax", "minimum", "where", "mean",
           "reshape", "transpose", "concat", "stack", "broadcast_to", "embedding", "scatter_add",
           "gather_last", "lstm_cell", "elementwise"}
    names = set(gradsuite.REGISTRY)
    missing = {op for op in ops if not any(n == op or n.startswith(op + "_") for n in names)}
    assert not missing


class TestDebugMode:
    def test_nan_raises_in_debug(self):
        with T.debugging(), np.errstate(over="ignore"):
            with pytest.raises(T.NumericError):
                T.exp(Tensor([1e6], dtype=np.float32))

    def test_nan_passes_silently_otherwise(self):
        with np.errstate(over="ignore"):
            assert np.isinf(T.exp(Tensor([1e6], dtype=np.float32)).data[0])


class TestPrecision:
    def test_wide_context_uses_float64(self):
        with T.wide():
            assert Tensor([1]).dtype == np.float64
        assert Tensor([1]).dtype == np.float32

    def test_param_store_cast(self):
        store = ParamStore()
        store.add("a", np.ones(2, dtype=np.float32))
        assert store.astype(np.float64)["a"].dtype == np.float64
        assert store["a"].dtype == np.float32


class TestShapes:
    def test_broadcast_gradient_sums(self, wide):
        x = Tensor(np.ones((1, 3)))
        (g,) = grad_of(lambda t: T.sum(T.broadcast_to(t, (4, 3))), x)
        np.testing.assert_array_equal(g, np.full((1, 3), 4.0))

    def test_advanced_getitem_accumulates_repeats(self, wide):
        x = Tensor(np.arange(4.0))
        (g,) = grad_of(lambda t: T.sum(T.getitem(t, np.array([1, 1, 3]))), x)
        np.testing.assert_array_equal(g, [0, 2, 0, 1])

    def test_scatter_add_values(self):
        out = T.scatter_add(Tensor([[0.2, 0.5, 0.3]]), np.array([[4, 5, 4]]), 6).data
        np.testing.assert_allclose(out, [[0, 0, 0, 0, 0.5, 0.5]], atol=1e-7)

    def test_scatter_add_out_of_range(self):
        with pytest.raises(T.DimensionError):
            T.scatter_add(Tensor([[1.0]]), np.array([[3]]), 3)
