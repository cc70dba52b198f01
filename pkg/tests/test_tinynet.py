"""Tests for the network core: layer math, shapes, gradients against
finite differences, Adam, training behavior, and snapshots."""

import math

import numpy as np
import pytest

from gradtools import max_gradient_error, random_inputs, randomize_biases
from crownclass.tinynet import (
    ARCHITECTURES,
    adam_step,
    conv3x3_depthwise,
    conv3x3_depthwise_backward,
    dense,
    init_adam,
    init_params,
    load_params,
    maxpool2x2,
    maxpool2x2_backward,
    network_forward,
    network_gradients,
    save_params,
    softmax_xent,
    train_network,
)


class TestConv:
    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 2, 6, 6))
        kernels = np.zeros((2, 3, 3))
        kernels[:, 1, 1] = 1.0
        out = conv3x3_depthwise(x, kernels, np.zeros(2))
        np.testing.assert_allclose(out, x)

    def test_all_ones_kernel_counts_neighbors(self):
        """On an all-ones 4x4 input, each output equals the number of
        in-bounds taps: 4 at corners, 6 on edges, 9 inside."""
        x = np.ones((1, 1, 4, 4))
        out = conv3x3_depthwise(x, np.ones((1, 3, 3)), np.zeros(1))
        expected = np.array(
            [
                [4.0, 6.0, 6.0, 4.0],
                [6.0, 9.0, 9.0, 6.0],
                [6.0, 9.0, 9.0, 6.0],
                [4.0, 6.0, 6.0, 4.0],
            ]
        )
        np.testing.assert_allclose(out[0, 0], expected)

    def test_bias_on_zero_input(self):
        out = conv3x3_depthwise(
            np.zeros((1, 2, 4, 4)), np.zeros((2, 3, 3)), np.array([1.5, -2.0])
        )
        np.testing.assert_allclose(out[0, 0], 1.5)
        np.testing.assert_allclose(out[0, 1], -2.0)

    def test_linearity(self):
        rng = np.random.default_rng(2)
        kernels = rng.normal(size=(3, 3, 3))
        x = rng.normal(size=(2, 3, 8, 8))
        y = rng.normal(size=(2, 3, 8, 8))
        a, b = 1.7, -0.4
        zero_bias = np.zeros(3)
        lhs = conv3x3_depthwise(a * x + b * y, kernels, zero_bias)
        rhs = a * conv3x3_depthwise(x, kernels, zero_bias) + b * conv3x3_depthwise(
            y, kernels, zero_bias
        )
        np.testing.assert_allclose(lhs, rhs, rtol=1e-9)

    def test_channels_are_independent(self):
        x = np.zeros((1, 2, 4, 4))
        x[0, 0] = 1.0
        kernels = np.zeros((2, 3, 3))
        kernels[1, 1, 1] = 1.0  # only channel 1 has a live kernel
        out = conv3x3_depthwise(x, kernels, np.zeros(2))
        np.testing.assert_allclose(out, 0.0)


class TestMaxPool:
    def test_single_window(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out, _ = maxpool2x2(x)
        assert out[0, 0, 0, 0] == 4.0

    def test_tie_routes_to_first_row_major(self):
        x = np.full((1, 1, 2, 2), 7.0)
        out, idx = maxpool2x2(x)
        assert out[0, 0, 0, 0] == 7.0
        back = maxpool2x2_backward(np.ones_like(out), idx, x.shape)
        expected = np.zeros_like(x)
        expected[0, 0, 0, 0] = 1.0
        np.testing.assert_array_equal(back, expected)

    def test_spatial_chain_128_to_2(self):
        x = np.random.default_rng(3).normal(size=(1, 4, 128, 128))
        for _ in range(6):
            x, _ = maxpool2x2(x)
        assert x.shape == (1, 4, 2, 2)

    def test_odd_dims_rejected(self):
        with pytest.raises(AssertionError, match="even"):
            maxpool2x2(np.zeros((1, 1, 3, 4)))


class TestDense:
    def test_identity(self):
        x = np.array([[1.0, -2.0, 3.0]])
        out = dense(x, np.eye(3), np.zeros(3), relu=False)
        np.testing.assert_allclose(out, x)

    def test_relu_clamps_negative(self):
        out = dense(np.array([[1.0]]), np.array([[-2.0]]), np.zeros(1), relu=True)
        assert out[0, 0] == 0.0

    def test_scalar_affine(self):
        out = dense(np.array([[3.0]]), np.array([[2.0]]), np.array([0.5]), relu=False)
        assert out[0, 0] == 6.5


class TestSoftmaxXent:
    def test_equal_logits(self):
        probs, loss = softmax_xent(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]))
        np.testing.assert_allclose(probs, [[0.5, 0.5]])
        np.testing.assert_allclose(loss, [math.log(2.0)])

    def test_confident_correct_has_near_zero_loss(self):
        _, loss = softmax_xent(np.array([[50.0, -50.0]]), np.array([[1.0, 0.0]]))
        assert loss[0] < 1e-12

    def test_probs_normalized(self):
        # Scale keeps logit gaps below ~25 so neither probability
        # saturates to exactly 0 or 1 in double precision.
        rng = np.random.default_rng(4)
        logits = rng.normal(scale=5.0, size=(100, 2))
        probs, _ = softmax_xent(logits, np.zeros((100, 2)))
        assert np.all(probs > 0)
        assert np.all(probs < 1)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_gradient_is_probs_minus_onehot(self):
        logits = np.array([[0.3, -0.8]])
        onehot = np.array([[0.0, 1.0]])
        probs, _ = softmax_xent(logits, onehot)
        h = 1e-6
        for j in range(2):
            up = logits.copy()
            up[0, j] += h
            down = logits.copy()
            down[0, j] -= h
            _, lu = softmax_xent(up, onehot)
            _, ld = softmax_xent(down, onehot)
            fd = (lu[0] - ld[0]) / (2 * h)
            np.testing.assert_allclose(probs[0, j] - onehot[0, j], fd, rtol=1e-6)


class TestForwardShapes:
    def expected_chain(self, tag):
        spec = ARCHITECTURES[tag]
        hw = spec.image_hw
        sizes = []
        for _ in range(spec.conv_pairs):
            sizes.append(hw)
            hw //= 2
            sizes.append(hw)
        return sizes

    @pytest.mark.parametrize("tag", ["dsm", "views", "views_reduced"])
    def test_trace_matches_tables(self, tag):
        spec = ARCHITECTURES[tag]
        params = init_params(tag, seed=5)
        rng = np.random.default_rng(6)
        images, scalars, _ = random_inputs(tag, rng, batch=2)
        trace = []
        probs = network_forward(params, images, scalars, trace=trace)
        shapes = dict(trace)
        if tag == "dsm":
            assert shapes["conv0"] == (2, 4, 128, 128)
            assert shapes["pool5"] == (2, 4, 2, 2)
        else:
            last = spec.conv_pairs - 1
            for branch in range(len(spec.branch_channels)):
                assert shapes[f"img{branch}.conv0"] == (2, 1, 64, 64)
                assert shapes[f"img{branch}.pool{last}"] == (2, 1, 2, 2)
        assert shapes["flatten"] == (2, spec.flatten_dim)
        assert shapes["concat"] == (2, spec.concat_dim)
        assert shapes["head0"] == (2, spec.head_dims[0])
        assert shapes["head1"] == (2, spec.head_dims[1])
        assert shapes["logits"] == (2, 2)
        assert probs.shape == (2, 2)

    def test_probs_sum_to_one(self):
        params = init_params("views", seed=7, dtype=np.float64)
        rng = np.random.default_rng(8)
        images, scalars, _ = random_inputs("views", rng, batch=5)
        probs = network_forward(params, images, scalars)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_wrong_input_shape_rejected(self):
        params = init_params("dsm", seed=9)
        with pytest.raises(AssertionError, match="images"):
            network_forward(params, np.zeros((1, 4, 64, 64)), np.zeros((1, 1)))


class TestGradients:
    @pytest.mark.parametrize("tag", ["dsm", "views", "views_reduced"])
    def test_matches_finite_differences(self, tag):
        params = init_params(tag, seed=11, dtype=np.float64)
        rng = np.random.default_rng(12)
        randomize_biases(params, rng)
        images, scalars, onehot = random_inputs(tag, rng)
        assert max_gradient_error(params, images, scalars, onehot) < 1e-4

    def test_zero_image_branch_kernel_gradient_is_zero(self):
        params = init_params("views", seed=13, dtype=np.float64)
        # Non-negative kernels and positive biases keep branch 0 alive all
        # the way down even though its image is blank, so gradient reaches
        # its first layer instead of dying at a relu.
        for i in range(5):
            kernel = params.tensors[f"img0.conv{i}.kernel"]
            kernel[...] = np.abs(kernel)
            params.tensors[f"img0.conv{i}.bias"][:] = 0.1
        rng = np.random.default_rng(14)
        images, scalars, onehot = random_inputs("views", rng)
        images[:, 0] = 0.0
        grads, _, _ = network_gradients(params, images, scalars, onehot)
        np.testing.assert_array_equal(grads["img0.conv0.kernel"], 0.0)
        assert np.abs(grads["img0.conv0.bias"]).max() > 0

    def test_confident_correct_prediction_has_vanishing_gradients(self):
        params = init_params("views_reduced", seed=15)
        params.tensors["out.weight"][:] = 0.0
        params.tensors["out.bias"][:] = [50.0, -50.0]
        rng = np.random.default_rng(16)
        images, scalars, _ = random_inputs("views_reduced", rng)
        onehot = np.array([[1.0, 0.0]])
        grads, probs, _ = network_gradients(params, images, scalars, onehot)
        assert probs[0, 0] >= 1.0 - 1e-12
        worst = max(np.abs(g).max() for g in grads.values())
        assert worst < 1e-30


class TestAdam:
    def make_scalar_params(self, theta=0.0):
        from crownclass.tinynet import NetworkParams

        return NetworkParams("dsm", {"w": np.array([theta], dtype=np.float64)})

    def test_zero_gradient_keeps_params(self):
        params = init_params("views_reduced", seed=17)
        state = init_adam(params)
        zero = {name: np.zeros_like(t) for name, t in params.tensors.items()}
        stepped, _ = adam_step(params, zero, state)
        for name in params.tensors:
            np.testing.assert_array_equal(stepped.tensors[name], params.tensors[name])

    def test_first_step_magnitude(self):
        params = self.make_scalar_params()
        state = init_adam(params)
        stepped, state = adam_step(params, {"w": np.array([3.0])}, state)
        # Bias correction makes the first step -lr * g/|g| up to epsilon.
        np.testing.assert_allclose(stepped.tensors["w"], [-0.01 / (1 + 1e-8)])

    def test_two_steps_match_hand_unrolled_recurrence(self):
        """Constant gradient 1: both bias-corrected ratios are exactly 1,
        so each step moves by lr / (1 + epsilon)."""
        params = self.make_scalar_params()
        state = init_adam(params)
        g = {"w": np.array([1.0])}
        params, state = adam_step(params, g, state)
        params, state = adam_step(params, g, state)
        np.testing.assert_allclose(
            params.tensors["w"], [-2 * 0.01 / (1 + 1e-8)], rtol=1e-12
        )
        assert state.t == 2
        np.testing.assert_allclose(state.m["w"], [0.19], rtol=1e-12)
        np.testing.assert_allclose(state.v["w"], [0.001999], rtol=1e-12)


def separable_toy_data(n=64, seed=18):
    """views_reduced-shaped toy set: class 0 carries a bright block in the
    top band, class 1 in the bottom band.

    Sparse blocks rather than solid half-images: block edges excite some
    kernel offsets whatever the kernel signs, so zero-bias nets keep a
    live path to the head the way they do on real sparse rasters.  A
    solid constant region instead rides on the kernel sum alone and goes
    dark whenever that sum is negative.
    """
    rng = np.random.default_rng(seed)
    images = np.zeros((n, 2, 64, 64), dtype=np.float32)
    labels = np.zeros((n, 2), dtype=np.float32)
    for i in range(n):
        cls = i % 2
        r0 = 6 if cls == 0 else 38
        c0 = int(rng.integers(6, 46))
        block = 0.8 + rng.uniform(-0.1, 0.1, size=(12, 12))
        images[i, :, r0 : r0 + 12, c0 : c0 + 12] = block
        labels[i, cls] = 1.0
    scalars = np.full((n, 2), 0.5, dtype=np.float32)
    return images, scalars, labels


class TestTrain:
    def test_zero_learning_rate_keeps_params(self):
        images, scalars, labels = separable_toy_data(n=8)
        params = init_params("views_reduced", seed=19)
        trained, _ = train_network(
            params.copy(), images, scalars, labels, epochs=1, batch_size=4, seed=1, lr=0.0
        )
        for name in params.tensors:
            np.testing.assert_array_equal(trained.tensors[name], params.tensors[name])

    def test_same_seed_is_bit_identical(self):
        images, scalars, labels = separable_toy_data(n=16)
        runs = []
        for _ in range(2):
            params = init_params("views_reduced", seed=20)
            trained, acc = train_network(
                params, images, scalars, labels, epochs=2, batch_size=4, seed=2
            )
            runs.append((trained, acc))
        assert runs[0][1] == runs[1][1]
        for name in runs[0][0].tensors:
            np.testing.assert_array_equal(
                runs[0][0].tensors[name], runs[1][0].tensors[name]
            )

    def test_separable_toy_reaches_95_percent(self):
        images, scalars, labels = separable_toy_data()
        params = init_params("views_reduced", seed=21)
        _, accuracy = train_network(
            params, images, scalars, labels, epochs=3, batch_size=8, seed=3
        )
        assert accuracy > 0.95


class TestSnapshot:
    def test_round_trip_bit_exact(self, tmp_path):
        params = init_params("views", seed=22)
        path = tmp_path / "net.tnet"
        save_params(path, params)
        back = load_params(path)
        assert back.tag == "views"
        assert list(back.tensors) == list(params.tensors)
        for name in params.tensors:
            np.testing.assert_array_equal(back.tensors[name], params.tensors[name])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.tnet"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="not a parameter snapshot"):
            load_params(path)
