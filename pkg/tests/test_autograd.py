import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tadml.autograd import (DimensionError, NonFiniteError, Tape, TapeError, Tensor, add, avgpool2,
                            concat_rows, fc, grad_check, layer_norm, linear_upsample2, record,
                            relu, rows, scale, softplus, total)

from conftest import probe, rand_tensor


class TestFC:
    def test_identity(self):
        y = fc(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(y.data, [[1, 2]])

    def test_bias_shift(self):
        y = fc(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(y.data, [[4, 6]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            fc(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))), Tensor(np.ones(5)))
        with pytest.raises(DimensionError):
            fc(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 5))), Tensor(np.ones(4)))

    def test_gradients(self, rng):
        params = {"x": rand_tensor(rng, 3, 4), "W": rand_tensor(rng, 4, 5), "b": rand_tensor(rng, 5)}
        rep = grad_check(lambda p: total(fc(p["x"], p["W"], p["b"])), params, tol=1e-6)
        assert rep.ok, rep.lines()

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_random_projection(self, seed):
        rng = np.random.default_rng(seed)
        params = {"x": rand_tensor(rng, 3, 4), "W": rand_tensor(rng, 4, 5), "b": rand_tensor(rng, 5)}
        w = rng.standard_normal((3, 5))
        rep = grad_check(lambda p: probe(fc(p["x"], p["W"], p["b"]), w), params, tol=1e-6)
        assert rep.ok, rep.lines()


class TestLayerNorm:
    def test_constant_row_maps_to_beta(self):
        y = layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(y.data, [[0, 0, 0]])

    def test_unit_row_is_fixed_point(self):
        y = layer_norm(Tensor([[-1.0, 1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-300)
        np.testing.assert_allclose(y.data, [[-1, 1]], rtol=0, atol=1e-15)

    def test_gradients_sum(self, rng):
        params = {"x": rand_tensor(rng, 4, 8), "g": rand_tensor(rng, 8), "b": rand_tensor(rng, 8)}
        rep = grad_check(lambda p: total(layer_norm(p["x"], p["g"], p["b"])), params, tol=1e-6)
        assert rep.ok, rep.lines()

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_random_projection(self, seed):
        rng = np.random.default_rng(seed)
        params = {"x": rand_tensor(rng, 4, 8), "g": rand_tensor(rng, 8), "b": rand_tensor(rng, 8)}
        w = rng.standard_normal((4, 8))
        rep = grad_check(lambda p: probe(layer_norm(p["x"], p["g"], p["b"]), w), params, tol=1e-6)
        assert rep.ok, rep.lines()

    def test_normalised_moments(self, rng):
        x = Tensor(3.0 + 10.0 * rng.standard_normal((16, 32)))
        y = layer_norm(x, Tensor(np.ones(32)), Tensor(np.zeros(32))).data
        assert np.abs(y.mean(axis=1)).max() < 1e-6
        assert np.abs(y.var(axis=1) - 1).max() < 1e-4

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(relu(Tensor([[-1.0, 0.0, 2.0]])).data, [[0, 0, 2]])

    def test_positive_identity(self):
        x = np.array([[0.5, 1.5, 3.0]])
        np.testing.assert_array_equal(relu(Tensor(x)).data, x)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_mask(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 6))
        x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
        params = {"x": Tensor(x)}
        w = rng.standard_normal((3, 6))
        rep = grad_check(lambda p: probe(relu(p["x"]), w), params, tol=1e-6)
        assert rep.ok, rep.lines()
        np.testing.assert_array_equal(params["x"].grad, w * (x > 0))

    def test_subgradient_at_zero(self):
        x = Tensor([[0.0]], requires_grad=True)
        with Tape() as tape:
            y = total(relu(x))
        tape.backward(y)
        assert x.grad[0, 0] == 0.0


class TestPooling:
    def test_even(self):
        np.testing.assert_array_equal(avgpool2(Tensor([[1.0], [3.0], [5.0], [7.0]])).data, [[2], [6]])

    def test_odd_tail(self):
        np.testing.assert_array_equal(avgpool2(Tensor([[1.0], [3.0], [5.0]])).data, [[2], [5]])

    def test_single_frame(self):
        np.testing.assert_array_equal(avgpool2(Tensor([[4.0, -1.0]])).data, [[4, -1]])

    @pytest.mark.parametrize("T", [1, 2, 5, 8])
    def test_gradients(self, rng, T):
        w = rng.standard_normal(((T + 1) // 2, 3))
        rep = grad_check(lambda p: probe(avgpool2(p["x"]), w), {"x": rand_tensor(rng, T, 3)}, tol=1e-6)
        assert rep.ok, rep.lines()


class TestUpsample:
    def test_documented_example(self):
        np.testing.assert_allclose(linear_upsample2(Tensor([[2.0], [6.0]]), 4).data.ravel(),
                                   [2, 3, 5, 6], rtol=0, atol=1e-15)

    def test_same_length(self, rng):
        x = rng.standard_normal((5, 3))
        np.testing.assert_array_equal(linear_upsample2(Tensor(x), 5).data, x)

    @pytest.mark.parametrize("n", [1, 2, 3, 7, 10])
    def test_constants(self, n):
        y = linear_upsample2(Tensor(np.full((3, 2), 1.25)), n * 3).data
        assert np.all(y == 1.25)

    def test_shrinking_rejected(self):
        with pytest.raises(DimensionError):
            linear_upsample2(Tensor(np.ones((4, 1))), 3)

    @pytest.mark.parametrize("T,L", [(1, 3), (2, 4), (3, 6), (5, 9), (4, 4)])
    def test_gradients(self, rng, T, L):
        w = rng.standard_normal((L, 2))
        rep = grad_check(lambda p: probe(linear_upsample2(p["x"], L), w),
                         {"x": rand_tensor(rng, T, 2)}, tol=1e-6)
        assert rep.ok, rep.lines()

    @given(st.integers(1, 40).map(lambda n: 2 * n), st.floats(-1e3, 1e3, allow_nan=False))
    @settings(max_examples=50, deadline=None)
    def test_pool_then_upsample_keeps_constants(self, T, c):
        x = Tensor(np.full((T, 2), c))
        y = linear_upsample2(avgpool2(x), T).data
        assert np.all(y == c)


class TestTape:
    def test_reverse_order_and_single_use(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = total(relu(scale(x, 2.0)))
        assert len(tape) == 3
        tape.backward(y)
        with pytest.raises(TapeError):
            tape.backward(y)

    def test_accumulates_two_sources(self, rng):
        x = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        with Tape() as tape:
            y = add(total(scale(x, 2.0)), total(scale(x, 3.0)))
        tape.backward(y)
        np.testing.assert_array_equal(x.grad, np.full((3, 2), 5.0))

    def test_linearity(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        W = Tensor(rng.standard_normal((4, 2)))
        b = Tensor(np.zeros(2))
        w1, w2 = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
        grads = []
        for ws in ([w1], [w2], [w1, w2]):
            x.zero_grad()
            with Tape() as tape:
                h = fc(x, W, b)
                out = probe(h, ws[0])
                for w in ws[1:]:
                    out = add(out, probe(h, w))
            tape.backward(out)
            grads.append(x.grad.copy())
        np.testing.assert_allclose(grads[2], grads[0] + grads[1], rtol=1e-12, atol=1e-12)

    def test_no_tape_records_nothing(self):
        x = Tensor(np.ones((1, 1)), requires_grad=True)
        y = relu(x)
        assert y.requires_grad and x.grad is None

    def test_nonfinite_is_an_error(self):
        with pytest.raises(NonFiniteError):
            scale(Tensor([[1e308]]), 10.0)


class TestGradCheck:
    def test_wrong_backward_is_flagged(self, rng):
        def broken_square(x):
            return record("bad", x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2

        rep = grad_check(lambda p: total(broken_square(p["x"])), {"x": rand_tensor(rng, 2, 3)}, tol=1e-6)
        assert not rep.ok and rep.failed == ["x"]
        assert rep.max_error > 0.4

    def test_nonfinite_function(self):
        with pytest.raises(NonFiniteError):
            grad_check(lambda p: Tensor(np.array([np.nan])), {"x": Tensor(np.ones((1, 1)))})

    def test_subsampling(self, rng):
        params = {"x": rand_tensor(rng, 10, 10), "W": rand_tensor(rng, 10, 3), "b": rand_tensor(rng, 3)}
        rep = grad_check(lambda p: total(fc(p["x"], p["W"], p["b"])), params, tol=1e-6, max_elems=5)
        assert rep.ok


class TestMiscPrimitives:
    def test_concat_and_rows(self, rng):
        a, b = rand_tensor(rng, 2, 3), rand_tensor(rng, 4, 3)
        w = rng.standard_normal((3, 3))
        rep = grad_check(lambda p: probe(rows(concat_rows([p["a"], p["b"]]), 1, 4), w),
                         {"a": a, "b": b}, tol=1e-6)
        assert rep.ok, rep.lines()

    def test_softplus(self, rng):
        w = rng.standard_normal((3, 4))
        rep = grad_check(lambda p: probe(softplus(p["x"]), w), {"x": rand_tensor(rng, 3, 4, scale=3)}, tol=1e-6)
        assert rep.ok, rep.lines()
        assert np.all(softplus(Tensor(rng.standard_normal((50, 2)) * 20)).data >= 0)
