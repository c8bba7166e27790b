import math

import numpy as np
import pytest

from landscape_probe.gradcore import (
    BatchNormNotReady,
    BatchNormState,
    NonFiniteError,
    Parameter,
    Tape,
    TapeError,
    Tensor,
    add,
    add_residual,
    backward,
    batchnorm2d,
    channel_affine,
    conv2d,
    global_avg_pool,
    grad_check,
    grad_check_params,
    layer_forward,
    linear,
    mul,
    relu,
    softmax_cross_entropy,
    square,
    tensor_sum,
)
from landscape_probe.model import build_model

from conftest import tiny_config


def naive_conv(x, w, b, stride, pad):
    """Loop-based cross-correlation used as an independent oracle."""
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    return out + (0 if b is None else b[None, :, None, None])


def weighted_sum(out, weights):
    return tensor_sum(mul(out, weights))


class TestConv2d:
    def test_all_ones_gives_nine(self):
        y = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert y.shape == (1, 1, 1, 1)
        assert y.data.item() == 9.0

    def test_stem_shape(self):
        y = conv2d(Tensor(np.zeros((1, 3, 32, 32))), Tensor(np.zeros((64, 3, 7, 7))), stride=2, padding=3)
        assert y.shape == (1, 64, 16, 16)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 3), (3, 1), (2, 0)])
    def test_forward_matches_loop_oracle(self, rng, stride, pad):
        x = rng.normal(size=(2, 3, 9, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        y = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
        np.testing.assert_allclose(y.data, naive_conv(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (3, 3)])
    def test_input_gradient_finite_differences(self, rng, stride, pad):
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(rng.normal(size=3))
        out_shape = conv2d(Tensor(np.zeros((1, 2, 5, 5))), w, b, stride=stride, padding=pad).shape
        weights = rng.normal(size=out_shape)
        err = grad_check(lambda x: weighted_sum(conv2d(x, w, b, stride=stride, padding=pad), weights),
                         rng.normal(size=(1, 2, 5, 5)))
        assert err < 1e-5

    @pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1)])
    def test_parameter_gradients_finite_differences(self, rng, stride, pad):
        x = Tensor(rng.normal(size=(2, 2, 5, 5)))
        w = Parameter(rng.normal(size=(3, 2, 3, 3)), "w")
        b = Parameter(rng.normal(size=3), "b")
        weights = rng.normal(size=conv2d(x, w, b, stride=stride, padding=pad).shape)
        err = grad_check_params(lambda: weighted_sum(conv2d(x, w, b, stride=stride, padding=pad), weights), [w, b])
        assert err < 1e-5

    def test_many_channels_strided_path(self, rng):
        # c >= 16 takes a different input-gradient route
        w = Tensor(rng.normal(size=(2, 16, 3, 3)))
        weights = rng.normal(size=(1, 2, 3, 3))
        err = grad_check(lambda x: weighted_sum(conv2d(x, w, stride=2, padding=1), weights),
                         rng.normal(size=(1, 16, 5, 5)))
        assert err < 1e-5

    def test_rejects_bad_arguments(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        with pytest.raises(ValueError):
            conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))
        with pytest.raises(ValueError):
            conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), stride=0)
        with pytest.raises(ValueError):
            conv2d(x, Tensor(np.zeros((1, 2, 7, 7))), padding=0)


class TestLayers:
    def test_relu(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_linear_identity(self):
        y = linear(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(y.data, [[1.0, 2.0]])

    def test_layer_forward_dispatch(self):
        np.testing.assert_array_equal(layer_forward("relu", Tensor([-3.0, 4.0])).data, [0.0, 4.0])
        with pytest.raises(ValueError):
            layer_forward("maxpool", Tensor([1.0]))

    def test_add_residual_without_shortcut_is_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 3)))
        np.testing.assert_array_equal(add_residual(x).data, x.data)

    def test_batchnorm_train_gradients(self, rng):
        state = BatchNormState(3)
        gamma = Parameter(rng.normal(size=3), "g")
        beta = Parameter(rng.normal(size=3), "b")
        weights = rng.normal(size=(2, 3, 4, 4))
        x0 = rng.normal(size=(2, 3, 4, 4))

        def f(x):
            return weighted_sum(batchnorm2d(x, gamma, beta, state, training=True), weights)

        assert grad_check(f, x0) < 1e-4
        x = Tensor(x0)
        assert grad_check_params(lambda: f(x), [gamma, beta]) < 1e-4

    def test_batchnorm_eval_gradients_and_stats(self, rng):
        state = BatchNormState(3)
        x = rng.normal(2.0, 3.0, size=(4, 3, 4, 4))
        batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), state, training=True)
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(state.running_mean, 0.1 * mean, rtol=1e-12)
        np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * var, rtol=1e-12)
        gamma = Tensor(rng.normal(size=3))
        beta = Tensor(rng.normal(size=3))
        weights = rng.normal(size=x.shape)
        err = grad_check(lambda t: weighted_sum(batchnorm2d(t, gamma, beta, state, training=False), weights), x)
        assert err < 1e-4

    def test_batchnorm_eval_before_training_raises(self):
        with pytest.raises(BatchNormNotReady):
            batchnorm2d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                        BatchNormState(2), training=False)

    def test_global_avg_pool_and_affine_gradients(self, rng):
        scale, shift = rng.uniform(0.5, 2, size=3), rng.normal(size=3)
        weights = rng.normal(size=(2, 3))
        err = grad_check(lambda x: weighted_sum(global_avg_pool(channel_affine(x, scale, shift)), weights),
                         rng.normal(size=(2, 3, 4, 5)))
        assert err < 1e-6


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0])
        assert loss.data == pytest.approx(math.log(2), abs=1e-12)

    def test_confident_logits(self):
        loss = softmax_cross_entropy(Tensor([[10.0, -10.0]]), [0])
        # log(1 + e^-20)
        assert loss.data == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
        assert loss.data == pytest.approx(2.06e-9, rel=1e-3)

    def test_gradient_is_softmax_minus_onehot(self):
        z = Tensor(np.array([[1.0, 2.0, 3.0]]), requires_grad=True)
        with Tape():
            loss = softmax_cross_entropy(z, [2])
        backward(loss, wrt_input=True)
        np.testing.assert_allclose(z.grad, [[0.0900, 0.2447, -0.3347]], atol=1e-4)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(Tensor([[0.0, 1.0]]), [2])
        with pytest.raises(ValueError):
            softmax_cross_entropy(Tensor([[0.0, 1.0]]), [-1])

    def test_sum_reduction_gradient_rows_are_per_sample(self, rng):
        z0 = rng.normal(size=(3, 4))
        y = [0, 3, 1]
        z = Tensor(z0, requires_grad=True)
        with Tape():
            loss = softmax_cross_entropy(z, y, reduction="sum")
        backward(loss, wrt_input=True)
        for i in range(3):
            zi = Tensor(z0[i:i + 1], requires_grad=True)
            with Tape():
                li = softmax_cross_entropy(zi, y[i:i + 1])
            backward(li, wrt_input=True)
            np.testing.assert_allclose(z.grad[i], zi.grad[0], rtol=1e-14)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with Tape():
            loss = tensor_sum(x)
        backward(loss, wrt_input=True)
        np.testing.assert_array_equal(x.grad, np.ones((2, 2)))

    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape():
            loss = tensor_sum(square(x))
        backward(loss, wrt_input=True)
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_second_backward_raises(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape():
            loss = tensor_sum(square(x))
        backward(loss, wrt_input=True)
        with pytest.raises(TapeError):
            backward(loss, wrt_input=True)

    def test_backward_without_tape_raises(self):
        with pytest.raises(TapeError):
            backward(tensor_sum(Tensor([1.0])))

    def test_non_scalar_loss_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            y = square(x)
        with pytest.raises(TapeError):
            backward(y)

    def test_input_grad_only_when_requested(self):
        x = Tensor([2.0], requires_grad=True)
        p = Parameter([3.0], "p")
        with Tape():
            loss = tensor_sum(mul(x, p))
        backward(loss)
        assert x.grad is None
        np.testing.assert_array_equal(p.grad, [2.0])

    def test_frozen_parameter_gets_no_grad(self):
        p = Parameter([3.0], "p", trainable=False)
        x = Tensor([2.0], requires_grad=True)
        with Tape():
            loss = tensor_sum(mul(x, p))
        backward(loss, wrt_input=True)
        assert p.grad is None
        np.testing.assert_array_equal(x.grad, [3.0])

    def test_non_finite_forward_raises(self):
        with pytest.raises(NonFiniteError):
            relu(Tensor([np.inf]))

    def test_accumulation_is_linear(self, rng):
        model = build_model(tiny_config(), seed=3, dtype=np.float64)
        x = rng.uniform(size=(4, 3, 8, 8))
        y = np.array([0, 1, 2, 0])
        a, b = 0.7, -1.3

        def grads(fn):
            model.zero_grad()
            model.train()
            with Tape():
                loss = fn()
            backward(loss)
            return {n: p.grad.copy() for n, p in model.params.items()}

        def l1():
            return softmax_cross_entropy(model(Tensor(x)), y)

        def l2():
            return tensor_sum(square(model(Tensor(x))))

        g1, g2 = grads(l1), grads(l2)
        g = grads(lambda: add(mul(l1(), a), mul(l2(), b)))
        for n in g:
            expect = a * g1[n] + b * g2[n]
            scale = max(np.abs(expect).max(), 1e-300)
            assert np.abs(g[n] - expect).max() / scale < 1e-12, n

    def test_deterministic(self, rng):
        x = rng.uniform(size=(4, 3, 8, 8))
        y = [0, 1, 2, 1]

        def run():
            model = build_model(tiny_config(stride=2), seed=5, dtype=np.float64)
            xt = Tensor(x, requires_grad=True)
            with Tape():
                loss = softmax_cross_entropy(model(xt), y)
            backward(loss, wrt_input=True)
            return loss.data.tobytes(), xt.grad.tobytes(), model.params["stem.conv.weight"].grad.tobytes()

        assert run() == run()


class TestGradCheck:
    def test_sum_is_exact(self, rng):
        assert grad_check(tensor_sum, rng.normal(size=(3, 4))) < 1e-9

    def test_square_sum(self):
        assert grad_check(lambda x: tensor_sum(square(x)), [1.0, 2.0, 3.0], h=1e-5) < 1e-8

    def test_two_layer_cross_entropy(self, rng):
        w1 = Tensor(rng.normal(size=(5, 4)))
        w2 = Tensor(rng.normal(size=(3, 5)))
        err = grad_check(lambda x: softmax_cross_entropy(linear(relu(linear(x, w1)), w2), [0, 2]),
                         rng.normal(size=(2, 4)))
        assert err < 1e-4

    def test_non_finite_output_raises(self):
        with pytest.raises(FloatingPointError):
            grad_check(lambda x: tensor_sum(mul(x, np.inf)), [1.0])

    def test_composed_model_parameters_and_input(self, tiny_model, rng):
        x = rng.uniform(size=(3, 3, 8, 8))
        y = [0, 1, 2]
        tiny_model.train()
        err_p = grad_check_params(lambda: softmax_cross_entropy(tiny_model(Tensor(x)), y),
                                  tiny_model.parameters(), max_coords=6, rng=rng)
        assert err_p < 1e-4
        tiny_model.eval()
        with tiny_model.frozen():
            err_x = grad_check(lambda t: softmax_cross_entropy(tiny_model(t), y), x)
        assert err_x < 1e-4
