import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdet.tensor import (
    ContractError,
    GradTape,
    ShapeError,
    Tensor,
    add,
    backward,
    concat_channels,
    conv2d,
    grad_check,
    leaky_relu,
    mul,
    read_tensor,
    sigmoid,
    slice_channels,
    slice_in_channels,
    tanh,
    tensor_sum,
    write_tensor,
)

from oracles import naive_conv2d


class TestConv2d:
    def test_identity_kernel(self):
        out = conv2d(Tensor([[[5.0]]]), Tensor([[[[1.0]]]]), 1, 0)
        np.testing.assert_allclose(out.data, [[[5.0]]])

    def test_summation_case(self):
        x = Tensor(np.ones((1, 3, 3)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        np.testing.assert_allclose(conv2d(x, k, 1, 0).data, [[[9.0]]])

    def test_strided_padded_vs_naive(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        out = conv2d(Tensor(x), Tensor(k), 2, 1)
        np.testing.assert_allclose(out.data, naive_conv2d(x, k, 2, 1), atol=1e-12)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), 1, 1)

    def test_kernel_larger_than_input_rejected(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), 1, 0)

    @settings(max_examples=60, deadline=None)
    @given(st.data())
    def test_matches_naive_oracle_on_small_dims(self, data):
        cin = data.draw(st.integers(1, 3))
        f = data.draw(st.integers(1, 3))
        kh = data.draw(st.sampled_from([1, 3]))
        kw = data.draw(st.sampled_from([1, 3]))
        stride = data.draw(st.integers(1, 2))
        padding = data.draw(st.integers(0, 2))
        h = data.draw(st.integers(max(1, kh - 2 * padding), 8))
        w = data.draw(st.integers(max(1, kw - 2 * padding), 8))
        seed = data.draw(st.integers(0, 2**31))
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(cin, h, w))
        k = rng.normal(size=(f, cin, kh, kw))
        out = conv2d(Tensor(x), Tensor(k), stride, padding)
        np.testing.assert_allclose(out.data, naive_conv2d(x, k, stride, padding),
                                   atol=1e-12)


class TestElementwise:
    def test_sigmoid_symmetry_point(self):
        assert sigmoid(Tensor(0.0)).data == pytest.approx(0.5)

    def test_tanh_odd(self):
        assert tanh(Tensor(0.0)).data == pytest.approx(0.0)

    def test_add(self):
        out = add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_mul(self):
        out = mul(Tensor([2.0, 3.0]), Tensor([4.0, 5.0]))
        np.testing.assert_array_equal(out.data, [8.0, 15.0])

    def test_leaky_relu_slope(self):
        out = leaky_relu(Tensor([-2.0, 3.0]))
        np.testing.assert_allclose(out.data, [-0.2, 3.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            add(Tensor([1.0]), Tensor([1.0, 2.0]))

    def test_sigmoid_extreme_inputs_stay_finite(self):
        out = sigmoid(Tensor([-1e6, 1e6]))
        assert np.all(np.isfinite(out.data))


class TestConcat:
    def test_shapes_and_order(self):
        a = Tensor(np.full((2, 4, 4), 1.0))
        b = Tensor(np.full((3, 4, 4), 2.0))
        out = concat_channels(a, b)
        assert out.shape == (5, 4, 4)
        np.testing.assert_array_equal(out.data[:2], a.data)

    def test_empty_first_operand(self):
        a = Tensor(np.zeros((0, 4, 4)))
        b = Tensor(np.ones((3, 4, 4)))
        np.testing.assert_array_equal(concat_channels(a, b).data, b.data)

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            concat_channels(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 3, 4))))

    @settings(max_examples=30, deadline=None)
    @given(c1=st.integers(0, 4), c2=st.integers(1, 4),
           h=st.integers(1, 5), w=st.integers(1, 5), seed=st.integers(0, 2**31))
    def test_round_trip_bit_exact(self, c1, c2, h, w, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.normal(size=(c1, h, w)))
        b = Tensor(rng.normal(size=(c2, h, w)))
        cat = concat_channels(a, b)
        assert slice_channels(cat, 0, c1).data.tobytes() == a.data.tobytes()
        assert slice_channels(cat, c1, c1 + c2).data.tobytes() == b.data.tobytes()


class TestBackward:
    def test_linear_sum(self):
        w = Tensor(np.arange(4.0).reshape(2, 2), trainable=True)
        tape = GradTape()
        loss = tensor_sum(w, tape)
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads[w].data, np.ones((2, 2)))

    def test_quadratic(self):
        w = Tensor([1.0, 2.0], trainable=True)
        tape = GradTape()
        loss = tensor_sum(mul(w, w, tape), tape)
        np.testing.assert_allclose(backward(tape, loss)[w].data, [2.0, 4.0])

    def test_frozen_tensor_gets_no_entry(self):
        w = Tensor([1.0, 2.0], trainable=True)
        frozen = Tensor([3.0, 4.0], trainable=False)
        tape = GradTape()
        loss = tensor_sum(mul(w, frozen, tape), tape)
        grads = backward(tape, loss)
        assert w in grads and frozen not in grads

    def test_non_scalar_loss_rejected(self):
        w = Tensor([1.0, 2.0], trainable=True)
        tape = GradTape()
        out = mul(w, w, tape)
        with pytest.raises(ContractError):
            backward(tape, out)

    def test_composite_graph_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x0 = rng.normal(size=(2, 5, 5))
        k = Tensor(rng.normal(size=(3, 2, 3, 3)))
        k2 = Tensor(rng.normal(size=(2, 3, 3, 3)))

        def f(x, tape):
            y = conv2d(x, k, 1, 1, tape)
            y = sigmoid(y, tape)
            y = conv2d(y, k2, 2, 1, tape)
            y = mul(tanh(y, tape), leaky_relu(y, 0.1, tape), tape)
            return tensor_sum(y, tape)

        assert grad_check(f, Tensor(x0), 1e-5) < 1e-6


class TestGradCheck:
    def test_exact_linear(self):
        err = grad_check(lambda x, tape: tensor_sum(x, tape),
                         Tensor(np.random.default_rng(1).normal(size=(3, 3))))
        assert err < 1e-10

    def test_sum_sigmoid_at_zero(self):
        err = grad_check(lambda x, tape: tensor_sum(sigmoid(x, tape), tape),
                         Tensor(np.zeros((2, 2))))
        assert err < 1e-6


class TestSliceInChannels:
    def test_forward_and_gradient(self):
        rng = np.random.default_rng(3)
        k = Tensor(rng.normal(size=(2, 4, 1, 1)), trainable=True)
        tape = GradTape()
        part = slice_in_channels(k, 1, 3, tape)
        loss = tensor_sum(part, tape)
        g = backward(tape, loss)[k].data
        assert part.shape == (2, 2, 1, 1)
        np.testing.assert_array_equal(g[:, 1:3], np.ones((2, 2, 1, 1)))
        np.testing.assert_array_equal(g[:, 0], np.zeros((2, 1, 1)))


class TestSerialization:
    @pytest.mark.parametrize("shape", [(), (3,), (2, 3), (2, 3, 4, 5)])
    def test_round_trip(self, shape):
        rng = np.random.default_rng(11)
        t = Tensor(rng.normal(size=shape))
        buf = io.BytesIO()
        write_tensor(buf, t)
        buf.seek(0)
        back = read_tensor(buf)
        assert back.shape == t.shape
        assert back.data.tobytes() == t.data.tobytes()

    def test_truncated_payload_rejected(self):
        buf = io.BytesIO()
        write_tensor(buf, Tensor(np.ones(4)))
        with pytest.raises(ContractError):
            read_tensor(io.BytesIO(buf.getvalue()[:-3]))
