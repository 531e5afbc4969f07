import math

import mpmath
import numpy as np
import pytest

from slimnas.layers import (
    Activation,
    ActivationKind,
    BatchNorm2d,
    Conv2d,
    GlobalAvgPool,
    Linear,
    SELU_ALPHA,
    SELU_SCALE,
    apply_activation,
)


def numeric_grad(fn, x, eps=1e-6):
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def assert_grads_close(analytic, numeric, tol=1e-5):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() < tol, f"worst relative error {rel.max():.2e}"


class TestConv2d:
    def test_forward_matches_direct_convolution(self, float64_layers):
        rng = np.random.default_rng(0)
        conv = Conv2d(2, 3, 3, stride=1, rng=rng)
        x = rng.standard_normal((1, 2, 4, 4))
        y, _ = conv.forward(x, need_grad=False)
        # direct sliding-window computation
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros_like(y)
        for o in range(3):
            for i in range(4):
                for j in range(4):
                    patch = xp[0, :, i : i + 3, j : j + 3]
                    expected[0, o, i, j] = (patch * conv.weight.value[o]).sum()
        np.testing.assert_allclose(y, expected, atol=1e-12)

    @pytest.mark.parametrize("stride,kernel", [(1, 3), (2, 3), (1, 1), (2, 1)])
    def test_gradients(self, float64_layers, stride, kernel):
        rng = np.random.default_rng(1)
        conv = Conv2d(4, 5, kernel, stride=stride, rng=rng)
        x = rng.standard_normal((2, 3, 6, 6))  # sliced input: 3 of 4 channels
        target = rng.standard_normal((5,))

        def loss_from(y):
            return float((y.mean(axis=(0, 2, 3)) * target).sum())

        y, cache = conv.forward(x, c_in=3, c_out=5)
        conv.weight.zero_grad()
        dy = np.zeros_like(y)
        dy += (target / (y.shape[0] * y.shape[2] * y.shape[3]))[None, :, None, None]
        dx = conv.backward(cache, dy)

        num_w = numeric_grad(
            lambda: loss_from(conv.forward(x, c_in=3, c_out=5, need_grad=False)[0]),
            conv.weight.value,
        )
        assert_grads_close(conv.weight.grad, num_w)
        num_x = numeric_grad(
            lambda: loss_from(conv.forward(x, c_in=3, c_out=5, need_grad=False)[0]), x
        )
        assert_grads_close(dx, num_x)
        # untouched slice accumulates nothing
        assert np.all(conv.weight.grad[:, 3:] == 0)

    def test_channel_mismatch_raises(self):
        conv = Conv2d(4, 4, 3, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            conv.forward(np.zeros((1, 3, 4, 4), dtype=np.float32), c_in=2)


class TestBatchNorm:
    def test_train_normalises_batch(self, float64_layers):
        rng = np.random.default_rng(2)
        bn = BatchNorm2d(4)
        x = rng.standard_normal((8, 4, 3, 3)) * 3 + 1
        y, _ = bn.forward(x, mode="train")
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-10)
        np.testing.assert_allclose(y.std(axis=(0, 2, 3)), 1, atol=1e-3)

    def test_running_stats_updated_only_on_active_slice(self, float64_layers):
        rng = np.random.default_rng(3)
        bn = BatchNorm2d(4)
        before = bn.running_mean.copy()
        x = rng.standard_normal((8, 2, 3, 3)) + 5
        bn.forward(x, c=2, mode="train")
        assert not np.allclose(bn.running_mean[:2], before[:2])
        np.testing.assert_array_equal(bn.running_mean[2:], before[2:])

    def test_eval_uses_running_stats(self, float64_layers):
        bn = BatchNorm2d(2)
        bn.running_mean[:] = [1.0, -1.0]
        bn.running_var[:] = [4.0, 0.25]
        x = np.ones((2, 2, 1, 1))
        y, _ = bn.forward(x, mode="eval")
        np.testing.assert_allclose(y[0, 0], (1 - 1) / np.sqrt(4 + bn.eps), atol=1e-7)
        np.testing.assert_allclose(y[0, 1], (1 + 1) / np.sqrt(0.25 + bn.eps), atol=1e-6)

    def test_calibration_averages_batch_stats(self, float64_layers):
        bn = BatchNorm2d(3)
        bn.begin_calibration()
        batches = [np.random.default_rng(i).standard_normal((6, 3, 2, 2)) + i for i in range(4)]
        for x in batches:
            bn.forward(x, mode="calibrate")
        bn.finish_calibration()
        means = np.stack([b.mean(axis=(0, 2, 3)) for b in batches]).mean(axis=0)
        variances = np.stack([b.var(axis=(0, 2, 3)) for b in batches]).mean(axis=0)
        np.testing.assert_allclose(bn.running_mean, means, atol=1e-6)
        np.testing.assert_allclose(bn.running_var, variances, atol=1e-6)

    def test_gradients_train_mode(self, float64_layers):
        rng = np.random.default_rng(4)
        bn = BatchNorm2d(3)
        bn.gamma.value[:] = rng.uniform(0.5, 1.5, 3)
        bn.beta.value[:] = rng.uniform(-0.5, 0.5, 3)
        x = rng.standard_normal((4, 3, 2, 2))
        target = rng.standard_normal((4, 3, 2, 2))

        def loss():
            y, _ = bn.forward(x, mode="train", need_grad=False)
            return float((y * target).sum())

        y, cache = bn.forward(x, mode="train")
        for p in (bn.gamma, bn.beta):
            p.zero_grad()
        dx = bn.backward(cache, target)
        assert_grads_close(dx, numeric_grad(loss, x))
        assert_grads_close(bn.gamma.grad, numeric_grad(loss, bn.gamma.value))
        assert_grads_close(bn.beta.grad, numeric_grad(loss, bn.beta.value))

    def test_var_sink_collects_batch_variance(self, float64_layers):
        bn = BatchNorm2d(2)
        x = np.random.default_rng(0).standard_normal((5, 2, 3, 3))
        sink = []
        bn.forward(x, mode="train", var_sink=sink)
        np.testing.assert_allclose(sink[0], x.var(axis=(0, 2, 3)), atol=1e-12)


class TestActivations:
    def test_relu_clips_negative(self):
        assert apply_activation(ActivationKind.RELU, np.array([-1.0]))[0] == 0.0

    def test_swish_and_mish_vanish_at_zero(self):
        assert apply_activation(ActivationKind.SWISH, np.array([0.0]))[0] == 0.0
        assert apply_activation(ActivationKind.MISH, np.array([0.0]))[0] == 0.0

    def test_mish_at_one_matches_high_precision(self, float64_layers):
        with mpmath.workdps(50):
            expected = float(mpmath.mpf(1) * mpmath.tanh(mpmath.log(1 + mpmath.e)))
        got = float(apply_activation(ActivationKind.MISH, np.array([1.0]))[0])
        assert math.isclose(got, expected, rel_tol=1e-12)
        assert f"{expected:.5f}" == "0.86510"

    def test_selu_matches_definition(self, float64_layers):
        x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        y = apply_activation(ActivationKind.SELU, x)
        expected = np.where(x > 0, SELU_SCALE * x, SELU_SCALE * SELU_ALPHA * np.expm1(x))
        np.testing.assert_allclose(y, expected, atol=1e-12)

    def test_prelu_uses_learned_slope(self, float64_layers):
        act = Activation(ActivationKind.PRELU)
        act.slope.value[:] = 0.1
        y, _ = act.forward(np.array([-2.0, 3.0]))
        np.testing.assert_allclose(y, [-0.2, 3.0], atol=1e-12)

    @pytest.mark.parametrize("kind", list(ActivationKind))
    def test_gradients(self, float64_layers, kind):
        rng = np.random.default_rng(5)
        act = Activation(kind)
        # keep away from the ReLU/PReLU kink where finite differences lie
        x = rng.standard_normal((40,))
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
        target = rng.standard_normal((40,))

        def loss():
            return float((act.forward(x, need_grad=False)[0] * target).sum())

        y, cache = act.forward(x)
        for p in act.parameters():
            p.zero_grad()
        dx = act.backward(cache, target)
        assert_grads_close(dx, numeric_grad(loss, x))
        if kind is ActivationKind.PRELU:
            assert_grads_close(act.slope.grad, numeric_grad(loss, act.slope.value))

    @pytest.mark.parametrize("kind", list(ActivationKind))
    def test_continuous(self, kind):
        xs = np.linspace(-6, 6, 2001)
        ys = apply_activation(kind, xs)
        assert np.abs(np.diff(ys)).max() < 0.05  # no jumps on a fine grid

    @pytest.mark.parametrize(
        "kind", [ActivationKind.RELU, ActivationKind.SELU, ActivationKind.PRELU]
    )
    def test_monotone(self, kind):
        xs = np.linspace(-6, 6, 2001)
        assert np.all(np.diff(apply_activation(kind, xs)) >= -1e-7)

    @pytest.mark.parametrize("kind", [ActivationKind.SWISH, ActivationKind.MISH])
    def test_self_gated_kinds_monotone_above_their_dip(self, kind):
        # Swish/Mish dip slightly below zero near -1.3 and are monotone to
        # the right of it; they stay bounded below (checked separately).
        xs = np.linspace(-1.0, 6, 1001)
        assert np.all(np.diff(apply_activation(kind, xs)) >= -1e-7)

    @pytest.mark.parametrize(
        "kind,lower",
        [
            (ActivationKind.RELU, 0.0),
            (ActivationKind.SELU, -SELU_SCALE * SELU_ALPHA),
            (ActivationKind.SWISH, -0.5),
            (ActivationKind.MISH, -0.5),
        ],
    )
    def test_bounded_below(self, kind, lower):
        xs = np.linspace(-100, 100, 4001)
        assert apply_activation(kind, xs).min() >= lower - 1e-6


class TestLinearAndPool:
    def test_linear_gradients(self, float64_layers):
        rng = np.random.default_rng(6)
        lin = Linear(5, 3, rng)
        x = rng.standard_normal((4, 5))
        target = rng.standard_normal((4, 3))

        def loss():
            return float((lin.forward(x, need_grad=False)[0] * target).sum())

        _, cache = lin.forward(x)
        for p in lin.parameters():
            p.zero_grad()
        dx = lin.backward(cache, target)
        assert_grads_close(dx, numeric_grad(loss, x))
        assert_grads_close(lin.weight.grad, numeric_grad(loss, lin.weight.value))
        assert_grads_close(lin.bias.grad, numeric_grad(loss, lin.bias.value))

    def test_pool_is_spatial_mean(self, float64_layers):
        pool = GlobalAvgPool()
        x = np.arange(24, dtype=np.float64).reshape(1, 2, 3, 4)
        y, cache = pool.forward(x)
        np.testing.assert_allclose(y, x.mean(axis=(2, 3)))
        dx = pool.backward(cache, np.ones((1, 2)))
        np.testing.assert_allclose(dx, np.full_like(x, 1 / 12))
