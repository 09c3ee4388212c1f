"""Tensor ops against naive loop oracles and central finite differences."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jnn import numerics as nx
from jnn.numerics import Parameter, Tensor


def naive_conv(x, w, b, stride, pad):
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def naive_pool(x, k, s):
    B, C, H, W = x.shape
    Ho, Wo = (H - k) // s + 1, (W - k) // s + 1
    out = np.empty((B, C, Ho, Wo))
    for n in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    out[n, c, i, j] = max(x[n, c, i * s + u, j * s + v] for u in range(k) for v in range(k))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 1, 5, 5))
        y = nx.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(y.data, x)

    def test_sum_of_ones(self):
        y = nx.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert y.shape == (1, 1, 1, 1)
        assert y.data.item() == 9.0

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (4, 2)])
    def test_naive_oracle(self, rng, stride, pad):
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        y = nx.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
        np.testing.assert_allclose(y.data, naive_conv(x, w, b, stride, pad), rtol=0, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(nx.DimensionError):
            nx.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(nx.DimensionError):
            nx.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    @pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 2, 2)])
    def test_gradients(self, rng, k, stride, pad):
        x = Tensor(rng.standard_normal((2, 2, 7, 7)), requires_grad=True)
        w = Parameter(rng.standard_normal((3, 2, k, k)))
        b = Parameter(rng.standard_normal(3))
        proj = rng.standard_normal(nx.conv2d(x, w, b, stride, pad).shape)
        fn = lambda: nx.total(nx.scale(nx.conv2d(x, w, b, stride, pad), proj))
        assert nx.grad_check(fn, [x, w, b]) < 1e-5

    def test_float32_forward_close_to_float64(self, rng):
        x = rng.standard_normal((1, 3, 9, 9))
        w = rng.standard_normal((2, 3, 3, 3))
        y64 = nx.conv2d(Tensor(x), Tensor(w), padding=1).data
        y32 = nx.conv2d(Tensor(x.astype(np.float32)), Tensor(w.astype(np.float32)), padding=1).data
        assert y32.dtype == np.float32
        np.testing.assert_allclose(y32, y64, rtol=1e-4, atol=1e-4)


class TestMaxPool:
    def test_constant(self):
        y = nx.maxpool2d(Tensor(np.full((1, 2, 4, 4), 3.5)), 2, 2)
        np.testing.assert_array_equal(y.data, np.full((1, 2, 2, 2), 3.5))

    def test_single_window(self):
        y = nx.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2, 2)
        assert y.data.item() == 4.0

    def test_naive_oracle(self, rng):
        x = rng.standard_normal((1, 2, 6, 6))
        np.testing.assert_array_equal(nx.maxpool2d(Tensor(x), 2, 2).data, naive_pool(x, 2, 2))

    def test_overlapping_windows(self, rng):
        x = rng.standard_normal((2, 3, 9, 9))
        np.testing.assert_array_equal(nx.maxpool2d(Tensor(x), 3, 2).data, naive_pool(x, 3, 2))

    def test_gradient_goes_to_first_max(self):
        x = Tensor(np.array([[[[5.0, 5.0], [1.0, 5.0]]]]), requires_grad=True)
        nx.total(nx.maxpool2d(x, 2, 2)).backward()
        np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_gradients(self, rng):
        # distinct values keep every window's argmax away from ties
        x = Tensor(rng.permutation(2 * 8 * 8).reshape(1, 2, 8, 8) * 0.1, requires_grad=True)
        proj = rng.standard_normal((1, 2, 4, 4))
        assert nx.grad_check(lambda: nx.total(nx.scale(nx.maxpool2d(x, 2, 2), proj)), [x]) < 1e-6


class TestLinear:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(nx.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)

    def test_zero_weight(self, rng):
        b = rng.standard_normal(5)
        y = nx.linear(Tensor(rng.standard_normal((3, 4))), Tensor(np.zeros((5, 4))), Tensor(b))
        np.testing.assert_array_equal(y.data, np.tile(b, (3, 1)))

    def test_naive_oracle(self, rng):
        x, w, b = rng.standard_normal((3, 6)), rng.standard_normal((4, 6)), rng.standard_normal(4)
        ref = np.array([[b[o] + sum(x[n, i] * w[o, i] for i in range(6)) for o in range(4)] for n in range(3)])
        np.testing.assert_allclose(nx.linear(Tensor(x), Tensor(w), Tensor(b)).data, ref, rtol=0, atol=1e-12)

    def test_gradients(self, rng):
        x = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
        w, b = Parameter(rng.standard_normal((4, 6))), Parameter(rng.standard_normal(4))
        proj = rng.standard_normal((3, 4))
        assert nx.grad_check(lambda: nx.total(nx.scale(nx.linear(x, w, b), proj)), [x, w, b]) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(nx.DimensionError):
            nx.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestActivations:
    def test_sigmoid_zero(self):
        assert nx.sigmoid(Tensor(np.array(0.0))).data == 0.5

    def test_leaky_relu_negative(self):
        assert nx.leaky_relu(Tensor(np.array(-1.0)), 0.1).data == pytest.approx(-0.1, abs=1e-15)

    def test_sigmoid_extremes_are_finite(self):
        y = nx.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
        np.testing.assert_array_equal(y, [0.0, 1.0])

    def test_sigmoid_gradient(self, rng):
        x = Tensor(rng.standard_normal(20) * 3, requires_grad=True)
        proj = rng.standard_normal(20)
        assert nx.grad_check(lambda: nx.total(nx.scale(nx.sigmoid(x), proj)), [x]) < 1e-6

    def test_leaky_relu_gradient(self, rng):
        # keep samples away from the kink at zero
        x = Tensor(rng.uniform(0.1, 2, 20) * rng.choice([-1, 1], 20), requires_grad=True)
        proj = rng.standard_normal(20)
        assert nx.grad_check(lambda: nx.total(nx.scale(nx.leaky_relu(x, 0.1), proj)), [x]) < 1e-6

    @given(st.floats(-50, 50))
    def test_sigmoid_in_unit_interval(self, z):
        s = nx.sigmoid(Tensor(np.array(z))).data
        assert 0.0 <= s <= 1.0
        assert nx.sigmoid(Tensor(np.array(-z))).data == pytest.approx(1 - s, abs=1e-12)


class TestConcat:
    def test_constants_in_order(self):
        a, b = Tensor(np.full((1, 1, 2, 2), 2.0)), Tensor(np.full((1, 1, 2, 2), 7.0))
        c = nx.concat_channels(a, b).data
        assert c.shape == (1, 2, 2, 2)
        np.testing.assert_array_equal(c[0, 0], 2.0)
        np.testing.assert_array_equal(c[0, 1], 7.0)

    def test_slice_roundtrip(self, rng):
        a, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 5, 4, 4))
        c = nx.concat_channels(Tensor(a), Tensor(b))
        np.testing.assert_array_equal(nx.slice_channels(c, 0, 3).data, a)
        np.testing.assert_array_equal(nx.slice_channels(c, 3, 8).data, b)

    def test_sum_gradient_is_ones(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
        nx.total(nx.concat_channels(a, b)).backward()
        np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
        assert nx.grad_check(lambda: nx.total(nx.concat_channels(a, b)), [a]) < 1e-9

    def test_spatial_mismatch(self):
        with pytest.raises(nx.DimensionError):
            nx.concat_channels(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 4))))


class TestSgd:
    def test_plain_step(self):
        p = Parameter(np.array([1.0, -2.0]))
        p.grad = np.array([0.25, 0.5])
        nx.sgd_step([p], lr=1.0, momentum=0.0)
        np.testing.assert_array_equal(p.data, [0.75, -2.5])
        np.testing.assert_array_equal(p.grad, 0.0)

    def test_momentum_recurrence(self):
        g = np.array([0.5, -1.0])
        p = Parameter(np.zeros(2))
        for _ in range(2):
            p.grad = g.copy()
            nx.sgd_step([p], lr=1.0, momentum=0.9)
        np.testing.assert_allclose(p.data, -(g + 1.9 * g), rtol=0, atol=1e-15)

    def test_zero_grad_leaves_value(self):
        p = Parameter(np.array([3.0]))
        nx.sgd_step([p], lr=0.5, momentum=0.9)
        assert p.data[0] == 3.0

    def test_non_finite_gradient_names_parameter(self):
        p = Parameter(np.zeros(2), name="conv3.w")
        p.grad = np.array([np.nan, 0.0])
        with pytest.raises(nx.NumericalError, match="conv3.w"):
            nx.sgd_step([p], lr=0.1)
        np.testing.assert_array_equal(p.data, 0.0)

    @settings(max_examples=30)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.floats(0, 0.99), st.floats(1e-4, 1))
    def test_single_step_from_rest(self, grads, momentum, lr):
        p = Parameter(np.zeros(len(grads)))
        p.grad = np.array(grads)
        nx.sgd_step([p], lr=lr, momentum=momentum)
        np.testing.assert_allclose(p.data, -lr * np.array(grads), rtol=1e-12, atol=0)


class TestGradCheck:
    def test_detects_wrong_gradient(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True)

        def wrong_square(t):
            return nx.record(t.data ** 2, (t,), lambda g: (g * t.data,), "bad")  # should be 2x

        assert nx.grad_check(lambda: nx.total(wrong_square(x)), [x]) > 0.1

    def test_refuses_float32(self):
        x = Tensor(np.zeros(3, dtype=np.float32))
        with pytest.raises(TypeError):
            nx.grad_check(lambda: nx.total(x), [x])


class TestRecord:
    def test_non_finite_forward_raises(self):
        with pytest.raises(nx.NumericalError), np.errstate(over="ignore"):
            nx.scale(Tensor(np.array([1e308])), 1e10)

    def test_shared_input_accumulates(self, rng):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        nx.total(nx.add(x, x)).backward()
        np.testing.assert_array_equal(x.grad, 2.0)

    def test_float64_head_keeps_float32_backward(self, rng):
        # a float64 loss on a float32 network must not promote the backward pass
        x = Tensor(rng.standard_normal((2, 3, 6, 6)).astype(np.float32))
        w = Parameter(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
        y = nx.conv2d(x, w)
        seen = []
        head = nx.record(np.float64(y.data.sum()), (y,),
                         lambda g: (np.full(y.shape, g, dtype=np.float64),), "f64_head")
        orig = y._backward
        y._backward = lambda g: (seen.append(g.dtype), orig(g))[1]
        head.backward()
        assert seen == [np.float32]
        assert w.grad.dtype == np.float32


class TestRepeatBatch:
    def test_forward_and_gradient(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        proj = rng.standard_normal((4, 2, 3, 3))
        y = nx.repeat_batch(x, 4)
        np.testing.assert_array_equal(y.data, np.repeat(x.data, 4, axis=0))
        nx.total(nx.scale(y, proj)).backward()
        np.testing.assert_allclose(x.grad, proj.sum(axis=0, keepdims=True), rtol=1e-12)
        assert nx.grad_check(lambda: nx.total(nx.scale(nx.repeat_batch(x, 4), proj)), [x]) < 1e-6

    def test_needs_batch_of_one(self, rng):
        with pytest.raises(nx.DimensionError):
            nx.repeat_batch(Tensor(rng.standard_normal((2, 3))), 3)
