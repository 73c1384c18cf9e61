"""Layer primitive semantics and gradient correctness."""

import numpy as np
import pytest

from snbench import nnops
from snbench.autodiff import ComputeGraph, RunningStats, Tensor
from snbench.errors import BadKernelSize, BadLabel, DegenerateBatch, ShapeMismatch


def finite_diff(loss_fn, param: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar-valued rebuildable forward pass."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(loss_fn().data)
        flat[i] = orig - eps
        down = float(loss_fn().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def analytic_grad(loss_fn, param: Tensor) -> np.ndarray:
    g = ComputeGraph("train")
    loss = loss_fn(g)
    param.zero_grad()
    g.backward(loss)
    return param.grad.copy()


def assert_grad_matches(loss_fn_graph, param, rtol=1e-4):
    an = analytic_grad(loss_fn_graph, param)
    num = finite_diff(lambda: loss_fn_graph(ComputeGraph("train")), param)
    denom = np.maximum(np.maximum(np.abs(an), np.abs(num)), 1e-3)
    assert (np.abs(an - num) / denom).max() < rtol


class TestConv2d:
    def test_identity_1x1_kernel(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        g = ComputeGraph()
        y = nnops.conv2d(g, x, w)
        np.testing.assert_allclose(y.data, x.data)

    def test_all_ones_3x3_center_is_nine(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        g = ComputeGraph()
        y = nnops.conv2d(g, x, w, padding=1)
        assert y.data[0, 0, 1, 1] == pytest.approx(9.0)
        # corners see a 2x2 valid region
        assert y.data[0, 0, 0, 0] == pytest.approx(4.0)

    def test_weight_gradient_matches_finite_differences(self, rng):
        x = Tensor(rng.standard_normal((2, 2, 4, 4)))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5)
        b = Tensor(rng.standard_normal(3) * 0.1)

        def loss_fn(g):
            y = nnops.conv2d(g, x, w, b, stride=1, padding=1)
            return nnops.softmax_cross_entropy(
                g, nnops.global_avg_pool(g, y), np.array([0, 2])
            )

        assert_grad_matches(loss_fn, w)
        assert_grad_matches(loss_fn, b)
        assert_grad_matches(loss_fn, x)

    def test_strided_gradient(self, rng):
        x = Tensor(rng.standard_normal((2, 2, 8, 8)))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5)

        def loss_fn(g):
            y = nnops.conv2d(g, x, w, stride=2, padding=1)
            return nnops.softmax_cross_entropy(g, nnops.global_avg_pool(g, y), np.array([1, 0]))

        assert_grad_matches(loss_fn, w)
        assert_grad_matches(loss_fn, x)

    def test_shape_errors(self, rng):
        g = ComputeGraph()
        with pytest.raises(ShapeMismatch):
            nnops.conv2d(g, Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))
        with pytest.raises(ShapeMismatch):
            nnops.conv2d(g, Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 3, 5, 5))))


class TestBatchNorm:
    def test_normalizes_batch(self, rng):
        x = Tensor(rng.standard_normal((8, 3, 4, 4)) * 3 + 1)
        g = ComputeGraph("train")
        y = nnops.batch_norm(g, x, None, None, None, track=False, affine=False)
        means = y.data.mean(axis=(0, 2, 3))
        stds = y.data.std(axis=(0, 2, 3))
        np.testing.assert_allclose(means, 0, atol=1e-10)
        np.testing.assert_allclose(stds, 1, atol=1e-3)

    def test_affine_identity(self, rng):
        x = Tensor(rng.standard_normal((8, 2, 4, 4)))
        gamma = Tensor(np.full(2, 2.0))
        beta = Tensor(np.ones(2))
        g = ComputeGraph("train")
        y = nnops.batch_norm(g, x, gamma, beta, None, track=False, affine=True)
        np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 1.0, atol=1e-10)
        np.testing.assert_allclose(y.data.std(axis=(0, 2, 3)), 2.0, rtol=1e-3)

    def test_running_mean_follows_scalar_recurrence(self, rng):
        running = RunningStats(2)
        momentum = 0.1
        expected_mean = np.zeros(2)
        g = ComputeGraph("train")
        for _ in range(5):
            x = Tensor(rng.standard_normal((4, 2, 2, 2)) + 3)
            nnops.batch_norm(g, x, None, None, running, track=True, affine=False,
                             momentum=momentum)
            batch_mean = x.data.mean(axis=(0, 2, 3))
            expected_mean = expected_mean + momentum * (batch_mean - expected_mean)
        np.testing.assert_allclose(running.mean, expected_mean, atol=1e-12)

    def test_eval_uses_running_stats_when_tracking(self, rng):
        running = RunningStats(2)
        running.mean[:] = 1.0
        running.var[:] = 4.0
        x = Tensor(np.full((2, 2, 2, 2), 3.0))
        g = ComputeGraph("eval")
        y = nnops.batch_norm(g, x, None, None, running, track=True, affine=False, eps=0.0)
        np.testing.assert_allclose(y.data, (3.0 - 1.0) / 2.0)

    def test_track_false_uses_batch_stats_in_eval(self, rng):
        x = Tensor(rng.standard_normal((8, 2, 4, 4)) * 5 + 2)
        g = ComputeGraph("eval")
        y = nnops.batch_norm(g, x, None, None, None, track=False, affine=False)
        np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0, atol=1e-10)

    def test_degenerate_batch(self):
        x = Tensor(np.ones((4, 1, 2, 2)))
        g = ComputeGraph("train")
        with pytest.raises(DegenerateBatch):
            nnops.batch_norm(g, x, None, None, None, track=False, affine=False, eps=0.0)

    def test_gradients(self, rng):
        x = Tensor(rng.standard_normal((4, 2, 3, 3)))
        gamma = Tensor(np.array([1.5, 0.7]))
        beta = Tensor(np.array([0.1, -0.2]))

        def loss_fn(g):
            y = nnops.batch_norm(g, x, gamma, beta, None, track=False, affine=True)
            return nnops.softmax_cross_entropy(
                g, nnops.global_avg_pool(g, y), np.array([0, 1, 0, 1])
            )

        assert_grad_matches(loss_fn, x)
        assert_grad_matches(loss_fn, gamma)
        assert_grad_matches(loss_fn, beta)


class TestSimpleOps:
    def test_relu(self):
        g = ComputeGraph()
        y = nnops.relu(g, Tensor(np.array([[-1.0, 2.0]])))
        np.testing.assert_allclose(y.data, [[0.0, 2.0]])

    def test_concat_shapes(self, rng):
        g = ComputeGraph()
        a = Tensor(rng.standard_normal((2, 2, 4, 4)))
        b = Tensor(rng.standard_normal((2, 2, 4, 4)))
        y = nnops.concat_channels(g, [a, b])
        assert y.shape == (2, 4, 4, 4)

    def test_zeroize_forward_and_backward(self, rng):
        x = Tensor(rng.standard_normal((2, 2, 4, 4)))
        g = ComputeGraph("train")
        y = nnops.zeroize(g, x)
        assert not y.data.any()
        loss = nnops.softmax_cross_entropy(g, nnops.global_avg_pool(g, y), np.array([0, 1]))
        g.backward(loss)
        assert x.grad is None or not x.grad.any()

    def test_skip_is_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        g = ComputeGraph()
        np.testing.assert_array_equal(nnops.skip(g, x).data, x.data)

    def test_avgpool_uniform_input(self):
        g = ComputeGraph()
        y = nnops.avgpool3x3(g, Tensor(np.ones((1, 1, 4, 4))))
        # center sees 9 ones / 9; corner sees 4 ones / 9
        assert y.data[0, 0, 1, 1] == pytest.approx(1.0)
        assert y.data[0, 0, 0, 0] == pytest.approx(4.0 / 9.0)

    def test_pad_channels(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 2, 2)))
        g = ComputeGraph()
        y = nnops.pad_channels(g, x, 5)
        assert y.shape == (2, 5, 2, 2)
        assert not y.data[:, 3:].any()

    def test_pool_and_elementwise_gradients(self, rng):
        x = Tensor(rng.standard_normal((2, 2, 4, 4)))

        def loss_fn(g):
            y = nnops.avgpool3x3(g, x)
            y = nnops.relu(g, y)
            z = nnops.add(g, y, nnops.scale(g, y, 0.5))
            return nnops.softmax_cross_entropy(g, nnops.global_avg_pool(g, z), np.array([0, 1]))

        assert_grad_matches(loss_fn, x)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_gives_log_c(self):
        g = ComputeGraph()
        loss = nnops.softmax_cross_entropy(g, Tensor(np.zeros((5, 4))), np.zeros(5, dtype=int))
        assert float(loss.data) == pytest.approx(np.log(4))

    def test_confident_correct_goes_to_zero(self):
        logits = np.full((2, 3), -50.0)
        logits[0, 1] = 50.0
        logits[1, 2] = 50.0
        g = ComputeGraph()
        loss = nnops.softmax_cross_entropy(g, Tensor(logits), np.array([1, 2]))
        assert float(loss.data) < 1e-12

    def test_bad_labels(self):
        g = ComputeGraph()
        with pytest.raises(BadLabel):
            nnops.softmax_cross_entropy(g, Tensor(np.zeros((2, 3))), np.array([0, 3]))
        with pytest.raises(BadLabel):
            nnops.softmax_cross_entropy(g, Tensor(np.zeros((2, 3))), np.array([0.5, 1.0]))

    def test_gradient(self, rng):
        logits = Tensor(rng.standard_normal((4, 3)))

        def loss_fn(g):
            return nnops.softmax_cross_entropy(g, nnops.skip(g, logits), np.array([0, 1, 2, 0]))

        assert_grad_matches(loss_fn, logits)


class TestWeightTransforms:
    def test_take_out_channels_values_and_gradient(self, rng):
        w = Tensor(rng.standard_normal((4, 2, 1, 1)))
        g = ComputeGraph("train")
        sub = nnops.take_out_channels(g, w, np.array([2, 0]))
        np.testing.assert_array_equal(sub.data, w.data[[2, 0]])
        out, bwd = g.tape[-1]
        bwd(np.ones_like(sub.data))
        assert w.grad[2].sum() == pytest.approx(2.0)
        assert w.grad[0].sum() == pytest.approx(2.0)
        assert not w.grad[[1, 3]].any()

    def test_mix_out_channels_is_linear_map(self, rng):
        w = Tensor(rng.standard_normal((4, 3)))
        m = np.array([[0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5]])
        g = ComputeGraph()
        y = nnops.mix_out_channels(g, w, m)
        np.testing.assert_allclose(y.data, m @ w.data)

    def test_slice_in_channels(self, rng):
        w = Tensor(rng.standard_normal((3, 5, 1, 1)))
        g = ComputeGraph()
        y = nnops.slice_in_channels(g, w, 2)
        np.testing.assert_array_equal(y.data, w.data[:, :2])

    def test_ofa_identity_projection_is_center_crop(self, rng):
        w3 = Tensor(rng.standard_normal((3, 2, 3, 3)))
        proj = Tensor(np.eye(3))
        g = ComputeGraph()
        y = nnops.ofa_project(g, w3, proj, 1)
        np.testing.assert_allclose(y.data, w3.data[:, :, 1:2, 1:2])

    def test_ofa_target3_is_identity(self, rng):
        w3 = Tensor(rng.standard_normal((3, 2, 3, 3)))
        proj = Tensor(np.eye(3))
        g = ComputeGraph()
        y = nnops.ofa_project(g, w3, proj, 3)
        np.testing.assert_array_equal(y.data, w3.data)

    def test_ofa_bad_target(self, rng):
        g = ComputeGraph()
        with pytest.raises(BadKernelSize):
            nnops.ofa_project(g, Tensor(np.zeros((2, 2, 3, 3))), Tensor(np.eye(2)), 2)

    def test_ofa_gradients_flow_to_both(self, rng):
        w3 = Tensor(rng.standard_normal((2, 2, 3, 3)))
        proj = Tensor(np.eye(2) + 0.1 * rng.standard_normal((2, 2)))
        x = Tensor(rng.standard_normal((2, 2, 4, 4)))

        def loss_fn(g):
            k1 = nnops.ofa_project(g, w3, proj, 1)
            y = nnops.conv2d(g, x, k1)
            return nnops.softmax_cross_entropy(g, nnops.global_avg_pool(g, y), np.array([0, 1]))

        assert_grad_matches(loss_fn, w3)
        assert_grad_matches(loss_fn, proj)
