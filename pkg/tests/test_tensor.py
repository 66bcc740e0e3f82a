import numpy as np
import pytest

from capsanom.errors import ConfigError, TrainingError, UsageError
from capsanom.optim import Adam, AdamHyperParams, AdamState, sgd_adam_step
from capsanom.rng import Rng
from capsanom.tensor import (
    Tensor,
    activation,
    backward,
    bce_with_logits,
    conv2d,
    conv2d_forward,
    dense,
    dense_forward,
    matmul,
    relu,
    sigmoid,
    softmax,
    tsum,
    vecnorm,
)

from oracles import central_difference, max_rel_error


class TestConv2dForward:
    def test_first_conv_geometry_28_to_20(self):
        rng = Rng(7)
        image = Tensor(rng.uniform(0, 1, (1, 28, 28)))
        kernels = Tensor(rng.normal(0, 0.1, (256, 1, 9, 9)))
        out = conv2d_forward(image, kernels, stride=1)
        assert out.shape == (256, 20, 20)

    def test_zero_input_gives_zero_output(self):
        kernels = Tensor(Rng(3).normal(0, 1, (4, 2, 3, 3)))
        out = conv2d_forward(Tensor(np.zeros((2, 8, 8))), kernels, stride=1)
        assert np.all(out.data == 0.0)

    def test_hand_convolution_all_ones(self):
        image = Tensor(np.ones((1, 3, 3)))
        kernels = Tensor(np.ones((1, 1, 2, 2)))
        out = conv2d_forward(image, kernels, stride=1)
        assert out.shape == (1, 2, 2)
        assert np.array_equal(out.data, np.full((1, 2, 2), 4.0))

    def test_per_channel_bias(self):
        image = Tensor(np.zeros((1, 3, 3)))
        kernels = Tensor(np.zeros((2, 1, 2, 2)))
        out = conv2d_forward(image, kernels, stride=1, bias=Tensor([1.5, -2.0]))
        assert np.array_equal(out.data[0], np.full((2, 2), 1.5))
        assert np.array_equal(out.data[1], np.full((2, 2), -2.0))

    def test_strided_window_drop(self):
        # 20x20 input, 9x9 kernel, stride 2: last row/col of windows dropped.
        image = Tensor(Rng(5).uniform(0, 1, (3, 20, 20)))
        kernels = Tensor(Rng(6).normal(0, 0.1, (8, 3, 9, 9)))
        out = conv2d_forward(image, kernels, stride=2)
        assert out.shape == (8, 6, 6)

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(ConfigError, match="channels"):
            conv2d_forward(Tensor(np.zeros((2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ConfigError, match="smaller than kernel"):
            conv2d_forward(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_linearity_in_input(self):
        rng = Rng(11)
        k = Tensor(rng.normal(0, 1, (3, 2, 3, 3)))
        a = rng.normal(0, 1, (2, 6, 6))
        b = rng.normal(0, 1, (2, 6, 6))
        out_sum = conv2d_forward(Tensor(a + b), k, stride=1).data
        out_a = conv2d_forward(Tensor(a), k, stride=1).data
        out_b = conv2d_forward(Tensor(b), k, stride=1).data
        np.testing.assert_allclose(out_sum, out_a + out_b, rtol=1e-12)
        out_scaled = conv2d_forward(Tensor(2.5 * a), k, stride=1).data
        np.testing.assert_allclose(out_scaled, 2.5 * out_a, rtol=1e-12)


class TestDenseForward:
    def test_identity(self):
        x = Tensor([3.0, -1.0, 2.0])
        out = dense_forward(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
        assert np.array_equal(out.data, x.data)

    def test_hand_product(self):
        out = dense_forward(
            Tensor([1.0, 2.0]), Tensor([[1.0, 1.0], [0.0, 1.0]]), Tensor([0.0, 0.0])
        )
        assert np.array_equal(out.data, np.array([3.0, 2.0]))

    def test_zero_weights_returns_bias(self):
        b = np.array([0.5, -0.25, 7.0])
        out = dense_forward(Tensor(np.ones(4)), Tensor(np.zeros((3, 4))), Tensor(b))
        assert np.array_equal(out.data, b)

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError, match="features"):
            dense_forward(Tensor(np.ones(3)), Tensor(np.zeros((2, 4))), Tensor(np.zeros(2)))

    def test_linearity(self):
        rng = Rng(13)
        w = Tensor(rng.normal(0, 1, (4, 6)))
        zero = Tensor(np.zeros(4))
        a = rng.normal(0, 1, 6)
        b = rng.normal(0, 1, 6)
        np.testing.assert_allclose(
            dense_forward(Tensor(a + b), w, zero).data,
            dense_forward(Tensor(a), w, zero).data + dense_forward(Tensor(b), w, zero).data,
            rtol=1e-12,
        )


class TestActivation:
    def test_relu_definition(self):
        out = activation(Tensor([-1.0, 0.0, 2.0]), "relu")
        assert np.array_equal(out.data, np.array([0.0, 0.0, 2.0]))

    def test_sigmoid_at_zero(self):
        assert activation(Tensor([0.0]), "sigmoid").data[0] == 0.5

    def test_sigmoid_closed_form(self):
        out = activation(Tensor([np.log(3.0)]), "sigmoid")
        assert abs(out.data[0] - 0.75) < 1e-12

    def test_sigmoid_extreme_inputs_finite(self):
        out = activation(Tensor([-1000.0, 1000.0]), "sigmoid")
        assert np.all(np.isfinite(out.data))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            activation(Tensor([1.0]), "tanh")


class TestBackward:
    def test_linear_gradient_is_input(self):
        x = np.array([1.0, -2.0, 3.0])
        w = Tensor([0.5, 0.5, 0.5], requires_grad=True, name="w")
        loss = tsum(w * Tensor(x))
        grads = backward(loss)
        assert np.array_equal(grads["w"], x)

    def test_unused_parameter_gradient_exactly_zero(self):
        w = Tensor([1.0, 2.0], requires_grad=True, name="w")
        p = Tensor([5.0], requires_grad=True, name="p")
        loss = tsum(w * Tensor([3.0, 4.0])) + tsum(p * 0.0)
        grads = backward(loss)
        assert np.array_equal(grads["p"], np.array([0.0]))

    def test_backward_before_forward_raises(self):
        with pytest.raises(UsageError):
            Tensor([1.0], requires_grad=True).backward()

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            (x * 2.0).backward()

    def test_two_layer_net_matches_finite_differences(self):
        for seed in range(10):
            rng = Rng(100 + seed)
            x = rng.normal(0, 1, 5)
            w1 = rng.normal(0, 0.7, (4, 5))
            b1 = rng.normal(0, 0.2, 4)
            w2 = rng.normal(0, 0.7, (1, 4))
            b2 = rng.normal(0, 0.2, 1)

            def run(w1d, b1d, w2d, b2d):
                h = relu(dense(Tensor(x), Tensor(w1d), Tensor(b1d)))
                out = sigmoid(dense(h, Tensor(w2d), Tensor(b2d)))
                return tsum(out * out)

            loss = None
            params = [
                Tensor(w1, requires_grad=True, name="w1"),
                Tensor(b1, requires_grad=True, name="b1"),
                Tensor(w2, requires_grad=True, name="w2"),
                Tensor(b2, requires_grad=True, name="b2"),
            ]
            h = relu(dense(Tensor(x), params[0], params[1]))
            loss = tsum(sigmoid(dense(h, params[2], params[3])) ** 2)
            grads = backward(loss)

            fd_w1 = central_difference(lambda a: run(a, b1, w2, b2).item(), w1.copy())
            fd_b1 = central_difference(lambda a: run(w1, a, w2, b2).item(), b1.copy())
            fd_w2 = central_difference(lambda a: run(w1, b1, a, b2).item(), w2.copy())
            fd_b2 = central_difference(lambda a: run(w1, b1, w2, a).item(), b2.copy())
            assert max_rel_error(grads["w1"], fd_w1) < 1e-4
            assert max_rel_error(grads["b1"], fd_b1) < 1e-4
            assert max_rel_error(grads["w2"], fd_w2) < 1e-4
            assert max_rel_error(grads["b2"], fd_b2) < 1e-4

    def test_gradients_finite_after_backward(self):
        rng = Rng(42)
        x = Tensor(rng.normal(0, 1, (3, 6)))
        w = Tensor(rng.normal(0, 1, (4, 6)), requires_grad=True, name="w")
        b = Tensor(np.zeros(4), requires_grad=True, name="b")
        loss = tsum(softmax(dense(x, w, b), axis=-1) ** 2)
        grads = backward(loss)
        assert all(np.all(np.isfinite(g)) for g in grads.values())


class TestLayerGradients:
    """Finite-difference checks for each layer primitive, 10 seeds each."""

    @pytest.mark.parametrize("seed", range(10))
    def test_conv2d(self, seed):
        rng = Rng(300 + seed)
        x = rng.normal(0, 1, (2, 2, 7, 7))
        k = rng.normal(0, 0.5, (3, 2, 3, 3))
        b = rng.normal(0, 0.2, 3)
        proj = rng.normal(0, 1, (2, 3, 3, 3))  # stride 2: 7 -> 3

        def run(xd, kd, bd):
            out = conv2d(Tensor(xd), Tensor(kd), bias=Tensor(bd), stride=2)
            return tsum(out * Tensor(proj)).item()

        xt = Tensor(x, requires_grad=True, name="x")
        kt = Tensor(k, requires_grad=True, name="k")
        bt = Tensor(b, requires_grad=True, name="b")
        grads = backward(tsum(conv2d(xt, kt, bias=bt, stride=2) * Tensor(proj)))
        assert max_rel_error(grads["x"], central_difference(lambda a: run(a, k, b), x.copy())) < 1e-4
        assert max_rel_error(grads["k"], central_difference(lambda a: run(x, a, b), k.copy())) < 1e-4
        assert max_rel_error(grads["b"], central_difference(lambda a: run(x, k, a), b.copy())) < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_dense(self, seed):
        rng = Rng(400 + seed)
        x = rng.normal(0, 1, (3, 5))
        w = rng.normal(0, 0.5, (4, 5))
        b = rng.normal(0, 0.2, 4)
        proj = rng.normal(0, 1, (3, 4))

        def run(xd, wd, bd):
            return tsum(dense(Tensor(xd), Tensor(wd), Tensor(bd)) * Tensor(proj)).item()

        xt = Tensor(x, requires_grad=True, name="x")
        wt = Tensor(w, requires_grad=True, name="w")
        bt = Tensor(b, requires_grad=True, name="b")
        grads = backward(tsum(dense(xt, wt, bt) * Tensor(proj)))
        assert max_rel_error(grads["x"], central_difference(lambda a: run(a, w, b), x.copy())) < 1e-4
        assert max_rel_error(grads["w"], central_difference(lambda a: run(x, a, b), w.copy())) < 1e-4
        assert max_rel_error(grads["b"], central_difference(lambda a: run(x, w, a), b.copy())) < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_softmax_vecnorm_matmul(self, seed):
        rng = Rng(500 + seed)
        x = rng.normal(0, 1, (2, 3, 4))
        w = rng.normal(0, 1, (4, 2))
        proj = rng.normal(0, 1, (2, 3, 2))
        proj2 = rng.normal(0, 1, (2, 3))

        def run(xd):
            t = Tensor(xd)
            y = matmul(softmax(t, axis=-1), Tensor(w))
            n = vecnorm(t, axis=-1)
            return (tsum(y * Tensor(proj)) + tsum(n * Tensor(proj2))).item()

        xt = Tensor(x, requires_grad=True, name="x")
        y = matmul(softmax(xt, axis=-1), Tensor(w))
        n = vecnorm(xt, axis=-1)
        grads = backward(tsum(y * Tensor(proj)) + tsum(n * Tensor(proj2)))
        assert max_rel_error(grads["x"], central_difference(run, x.copy())) < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_bce_with_logits(self, seed):
        rng = Rng(600 + seed)
        z = rng.normal(0, 2, 8)
        y = (rng.uniform(0, 1, 8) > 0.5).astype(np.float64)

        zt = Tensor(z, requires_grad=True, name="z")
        grads = backward(bce_with_logits(zt, y))
        fd = central_difference(lambda a: bce_with_logits(Tensor(a), y).item(), z.copy())
        assert max_rel_error(grads["z"], fd) < 1e-4

    def test_vecnorm_zero_slice_zero_gradient(self):
        x = Tensor(np.zeros((2, 3)), requires_grad=True, name="x")
        loss = tsum(vecnorm(x, axis=-1))
        grads = backward(loss)
        assert np.array_equal(grads["x"], np.zeros((2, 3)))


class TestShapeAlgebra:
    def test_full_width_composition(self):
        # 28x28 -> 20x20x256 -> 6x6x(8x32) -> flatten 1152x8 -> 2x16 -> 512 -> 1024 -> 784
        rng = Rng(1)
        x = Tensor(rng.uniform(0, 1, (1, 1, 28, 28)))
        conv1 = conv2d(x, Tensor(rng.normal(0, 0.01, (256, 1, 9, 9))), stride=1)
        assert conv1.shape == (1, 256, 20, 20)
        primary = conv2d(relu(conv1), Tensor(rng.normal(0, 0.01, (256, 256, 9, 9))), stride=2)
        assert primary.shape == (1, 256, 6, 6)
        caps = primary.reshape(1, 32, 8, 6, 6)
        u = transpose_to_capsules(caps)
        assert u.shape == (1, 1152, 8)
        flat = Tensor(rng.uniform(0, 1, (1, 32)))
        h1 = relu(dense(flat, Tensor(rng.normal(0, 0.1, (512, 32))), Tensor(np.zeros(512))))
        h2 = relu(dense(h1, Tensor(rng.normal(0, 0.1, (1024, 512))), Tensor(np.zeros(1024))))
        out = sigmoid(dense(h2, Tensor(rng.normal(0, 0.1, (784, 1024))), Tensor(np.zeros(784))))
        assert out.shape == (1, 784)


def transpose_to_capsules(caps):
    from capsanom.tensor import transpose

    # [B, types, dim, H, W] -> [B, H, W, types, dim] -> [B, H*W*types, dim]
    b, types, dim, h, w = caps.shape
    return transpose(caps, (0, 3, 4, 1, 2)).reshape(b, h * w * types, dim)


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        p = np.array([1.0, -2.0])
        new, state = sgd_adam_step([p], [np.zeros(2)], AdamState(), AdamHyperParams())
        assert np.array_equal(new[0], p)
        assert state.step == 1

    def test_single_step_hand_value(self):
        hp = AdamHyperParams()
        p = np.array([0.3])
        new, _ = sgd_adam_step([p], [np.array([1.0])], AdamState(), hp)
        # mhat = vhat = 1 after bias correction, so the step is lr / (1 + eps).
        expected = 0.3 - hp.lr * 1.0 / (np.sqrt(1.0) + hp.eps)
        assert new[0][0] == expected

    def test_identical_parameters_get_identical_updates(self):
        p = np.array([0.7, 0.7])
        g = np.array([0.3, 0.3])
        new, _ = sgd_adam_step([p], [g], AdamState(), AdamHyperParams())
        assert new[0][0] == new[0][1]

    def test_nonfinite_gradient_aborts(self):
        with pytest.raises(TrainingError, match="non-finite"):
            sgd_adam_step([np.ones(2)], [np.array([1.0, np.nan])], AdamState(), AdamHyperParams())

    def test_gradient_shape_must_match_parameter(self):
        with pytest.raises(TrainingError, match="shape"):
            sgd_adam_step([np.ones(2)], [np.ones(3)], AdamState(), AdamHyperParams())

    def test_adam_class_matches_functional_form(self):
        rng = Rng(9)
        data = rng.normal(0, 1, (3, 3))
        grad = rng.normal(0, 1, (3, 3))
        t = Tensor(data.copy(), requires_grad=True, name="p")
        opt = Adam([t])
        t.grad = grad.copy()
        opt.step()
        expected, _ = sgd_adam_step([data], [grad], AdamState(), AdamHyperParams())
        assert np.array_equal(t.data, expected[0])


class TestDeterminism:
    def test_forward_backward_step_bitwise_reproducible(self):
        def run():
            rng = Rng(77)
            x = Tensor(rng.normal(0, 1, (4, 6)))
            w = Tensor(rng.normal(0, 0.5, (3, 6)), requires_grad=True, name="w")
            b = Tensor(np.zeros(3), requires_grad=True, name="b")
            opt = Adam([w, b])
            loss = tsum(sigmoid(dense(x, w, b)) ** 2)
            loss.backward()
            opt.step()
            return w.data.tobytes(), b.data.tobytes(), loss.item()

        assert run() == run()
