import numpy as np
import pytest

import util
from nnet import (
    AdamState,
    ContainerCorruptError,
    ConvSpec,
    InputTooSmallError,
    NnetError,
    NonFiniteGradientError,
    PoolSpec,
    SgdState,
    ShapeMismatchError,
    SppSpec,
    Tensor,
    adam_step,
    concat,
    conv2d,
    conv2d_forward,
    conv_output_size,
    euclidean_loss,
    flatten,
    grad_check,
    linear,
    load_tensors,
    maxpool2d,
    maxpool2d_forward,
    pool_output_size,
    relu,
    save_tensors,
    sgd_step,
    spp,
    spp_forward,
    spp_window,
)

SEEDS = range(20)


def leaf(data):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def distinct(rng, shape):
    # values at least 0.1 apart so finite differences never cross a pooling tie
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 - 0.05 * n).reshape(shape)


class TestShapes:
    def test_conv_chain(self):
        assert conv_output_size(227, 11, 4, 0) == 55
        assert pool_output_size(55, 3, 2) == 27
        assert pool_output_size(13, 3, 2) == 6

    def test_identity_kernel(self):
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        out, _ = conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1), ConvSpec(1, 1))
        np.testing.assert_array_equal(out, x)

    def test_padding_and_stride(self):
        x = np.ones((2, 3, 10, 10))
        out, _ = conv2d_forward(x, np.ones((4, 3, 3, 3)), np.zeros(4), ConvSpec(4, 3, 2, 1))
        assert out.shape == (2, 4, 5, 5)
        # the centre of a 3x3 window over 3 channels of ones sums to 27
        assert out[0, 0, 2, 2] == 27.0

    def test_conv_channel_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            conv2d_forward(np.ones((1, 2, 5, 5)), np.ones((1, 3, 3, 3)), np.zeros(1), ConvSpec(1, 3))

    def test_pool(self):
        out, _ = maxpool2d_forward(np.full((1, 2, 13, 13), 4.0), PoolSpec(3, 2))
        assert out.shape == (1, 2, 6, 6)
        assert (out == 4.0).all()

    def test_pool_too_small(self):
        with pytest.raises(ShapeMismatchError):
            maxpool2d_forward(np.ones((1, 1, 2, 2)), PoolSpec(3, 2))


class TestSpp:
    def test_window_example(self):
        w, s = spp_window(13, 6)
        assert (w, s) == (3, 2)
        assert 5 * s + w == 13

    @pytest.mark.parametrize("a", range(1, 65))
    def test_windows_in_bounds(self, a):
        for n in range(1, min(a, 8) + 1):
            w, s = spp_window(a, n)
            assert s >= 1
            assert (n - 1) * s + w <= a

    def test_window_too_small(self):
        with pytest.raises(InputTooSmallError):
            spp_window(3, 4)

    def test_fixed_length(self):
        spec = SppSpec((1, 2, 3, 6))
        assert spec.bins == 50
        a, _ = spp_forward(np.ones((2, 8, 13, 13)), spec)
        b, _ = spp_forward(np.ones((2, 8, 10, 10)), spec)
        c, _ = spp_forward(np.ones((2, 8, 10, 17)), spec)
        assert a.shape == b.shape == c.shape == (2, 400)

    def test_coarsest_level_is_global_max(self):
        rng = util.make_rng(0, "spp")
        x = rng.normal(size=(1, 3, 9, 9))
        out, _ = spp_forward(x, SppSpec((1, 2)))
        np.testing.assert_array_equal(out[0, :3], x.max(axis=(2, 3))[0])

    def test_input_too_small(self):
        with pytest.raises(InputTooSmallError):
            spp_forward(np.ones((1, 1, 4, 4)), SppSpec((1, 6)))

    @pytest.mark.parametrize("levels", [(0, 1), (2, 2), (3, 1), ()])
    def test_invalid_levels(self, levels):
        with pytest.raises(NnetError, match="SPP levels"):
            SppSpec(levels)


class TestElementwise:
    def test_relu(self):
        out = relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_linear_identity(self):
        x = Tensor(np.array([[1.0, -2.0, 3.0]]))
        out = linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_linear_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            linear(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 4))), Tensor(np.zeros(2)))

    def test_concat(self):
        out = concat([Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 2)))])
        assert out.shape == (2, 5)
        with pytest.raises(ShapeMismatchError):
            concat([Tensor(np.ones((2, 3))), Tensor(np.zeros((3, 2)))])


class TestEuclideanLoss:
    def test_examples(self):
        assert float(euclidean_loss(Tensor([1.0, 2.0]), [1.0, 2.0]).data) == 0.0
        assert float(euclidean_loss(Tensor([3.0, 4.0]), [0.0, 0.0]).data) == 5.0

    def test_rows(self):
        out = euclidean_loss(Tensor([[3.0, 4.0], [0.0, 1.0]]), np.zeros((2, 2)), axis=-1)
        np.testing.assert_array_equal(out.data, [5.0, 1.0])

    def test_zero_gradient_at_target(self):
        pred = leaf([1.0, 2.0])
        euclidean_loss(pred, [1.0, 2.0]).backward()
        np.testing.assert_array_equal(pred.grad, [0.0, 0.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            euclidean_loss(Tensor([1.0, 2.0]), [1.0, 2.0, 3.0])


class TestGradients:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv(self, seed):
        rng = util.make_rng(seed, "conv")
        spec = ConvSpec(3, 3, 2, 1)
        x, w, b = leaf(rng.normal(size=(2, 2, 7, 6))), leaf(rng.normal(size=(3, 2, 3, 3))), leaf(rng.normal(size=3))
        weights = rng.normal(size=(2, 3, 4, 3))
        report = grad_check(lambda: (conv2d(x, w, b, spec) * weights).sum(), {"x": x, "w": w, "b": b})
        assert report.passed, report.errors

    @pytest.mark.parametrize("seed", SEEDS)
    def test_maxpool(self, seed):
        rng = util.make_rng(seed, "pool")
        x = leaf(distinct(rng, (2, 2, 9, 9)))
        weights = rng.normal(size=(2, 2, 4, 4))
        report = grad_check(lambda: (maxpool2d(x, PoolSpec(3, 2)) * weights).sum(), {"x": x})
        assert report.passed, report.errors

    @pytest.mark.parametrize("seed", SEEDS)
    def test_spp(self, seed):
        rng = util.make_rng(seed, "spp")
        x = leaf(distinct(rng, (2, 2, 7, 9)))
        spec = SppSpec((1, 2, 3))
        weights = rng.normal(size=(2, 2 * spec.bins))
        report = grad_check(lambda: (spp(x, spec) * weights).sum(), {"x": x})
        assert report.passed, report.errors

    @pytest.mark.parametrize("seed", SEEDS)
    def test_relu_linear_concat(self, seed):
        rng = util.make_rng(seed, "dense")
        # inputs kept away from the relu kink
        x = leaf(rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(0.1, 1.0, size=(3, 4)))
        w, b = leaf(rng.normal(size=(5, 6))), leaf(rng.normal(size=5))
        extra = leaf(rng.normal(size=(3, 2)))

        def fn():
            h = concat([relu(x), extra])
            return (linear(h, w, b) * np.arange(1.0, 6.0)).sum()

        report = grad_check(fn, {"x": x, "w": w, "b": b, "extra": extra})
        assert report.passed, report.errors

    @pytest.mark.parametrize("seed", SEEDS)
    def test_euclidean_loss(self, seed):
        rng = util.make_rng(seed, "loss")
        target = rng.normal(size=(4, 3))
        pred = leaf(target + rng.choice([-1.0, 1.0], size=(4, 3)) * rng.uniform(0.1, 1.0, size=(4, 3)))
        assert grad_check(lambda: euclidean_loss(pred, target), {"pred": pred}).passed
        assert grad_check(lambda: euclidean_loss(pred, target, axis=-1).sum(), {"pred": pred}).passed

    def test_reshape_columns(self):
        rng = util.make_rng(0, "reshape")
        x = leaf(rng.normal(size=(2, 3, 2)))
        def fn():
            return (flatten(x).columns(1, 4) * np.array([1.0, -2.0, 3.0])).sum() - x.mean()

        assert grad_check(fn, {"x": x}).passed

    def test_corrupted_backward_is_reported(self):
        x = leaf([0.5, -1.5, 2.0])

        def bad_square(t):
            out = Tensor(t.data**2, True, (t,), "bad_square")
            # drops the factor 2
            out._backward = lambda g: t._accumulate(g * t.data)
            return out

        report = grad_check(lambda: bad_square(x).sum(), {"x": x})
        assert not report.passed
        assert report.max_error > 0.1

    def test_backward_needs_scalar(self):
        with pytest.raises(ShapeMismatchError):
            (leaf([1.0, 2.0]) * 2.0).backward()


class TestOptimizers:
    def test_zero_gradient_no_decay(self):
        p = [np.array([1.0, -2.0])]
        new, state = adam_step(p, [np.zeros(2)], AdamState.zeros(p), lr=0.1, wd=0.0)
        np.testing.assert_array_equal(new[0], p[0])
        assert state.step == 1
        new, _ = sgd_step(p, [np.zeros(2)], SgdState.zeros(p), lr=0.1, wd=0.0)
        np.testing.assert_array_equal(new[0], p[0])

    def test_adam_scalar_trace(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        p = [np.array(1.0)]
        state = AdamState.zeros(p)
        p, state = adam_step(p, [np.array(0.5)], state, lr=lr, wd=0.0)
        assert float(p[0]) == pytest.approx(1.0 - lr * 0.5 / (0.5 + eps), abs=1e-12)
        p, state = adam_step(p, [np.array(-0.2)], state, lr=lr, wd=0.0)
        m = b1 * (1 - b1) * 0.5 + (1 - b1) * -0.2
        v = b2 * (1 - b2) * 0.25 + (1 - b2) * 0.04
        expected = 1.0 - lr * 0.5 / (0.5 + eps) - lr * (m / (1 - b1**2)) / (np.sqrt(v / (1 - b2**2)) + eps)
        assert float(p[0]) == pytest.approx(expected, abs=1e-12)
        assert state.step == 2

    def test_weight_decay(self):
        p = [np.array(1.0)]
        new, _ = adam_step(p, [np.array(0.0)], AdamState.zeros(p), lr=0.1, wd=0.1)
        assert float(new[0]) == pytest.approx(0.99, abs=1e-15)

    def test_adam_converges(self):
        rng = util.make_rng(3, "converge")
        c = rng.normal(size=5)
        p = [rng.normal(size=5) * 2.0]
        state = AdamState.zeros(p)
        for step in range(5000):
            p, state = adam_step(p, [2.0 * (p[0] - c)], state, lr=0.05 * 0.998**step, wd=0.0)
        np.testing.assert_allclose(p[0], c, atol=1e-3)

    def test_sgd_momentum(self):
        p = [np.array(1.0)]
        state = SgdState.zeros(p)
        p, state = sgd_step(p, [np.array(1.0)], state, lr=0.1, wd=0.0, momentum=0.5)
        p, state = sgd_step(p, [np.array(1.0)], state, lr=0.1, wd=0.0, momentum=0.5)
        assert float(p[0]) == pytest.approx(1.0 - 0.1 - 0.15, abs=1e-15)

    def test_rejects_bad_gradients(self):
        p = [np.ones(2)]
        with pytest.raises(NonFiniteGradientError):
            adam_step(p, [np.array([np.nan, 0.0])], AdamState.zeros(p))
        with pytest.raises(ShapeMismatchError):
            sgd_step(p, [np.ones(3)], SgdState.zeros(p))


class TestContainer:
    @pytest.fixture
    def tensors(self):
        rng = util.make_rng(0, "container")
        return {"conv1.w": rng.normal(size=(2, 3, 3, 3)), "conv1.b": rng.normal(size=2), "scalar": np.array(4.0)}

    def test_round_trip(self, tmp_path, tensors):
        path = tmp_path / "w.rpw"
        save_tensors(path, tensors)
        loaded = load_tensors(path)
        assert list(loaded) == list(tensors)
        for name, array in tensors.items():
            np.testing.assert_array_equal(loaded[name], array)

    def test_bad_magic(self, tmp_path, tensors):
        path = tmp_path / "w.rpw"
        save_tensors(path, tensors)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(ContainerCorruptError, match="not an RPW1"):
            load_tensors(path)

    def test_truncated(self, tmp_path, tensors):
        path = tmp_path / "w.rpw"
        save_tensors(path, tensors)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(ContainerCorruptError, match="truncated"):
            load_tensors(path)

    def test_trailing_bytes(self, tmp_path, tensors):
        path = tmp_path / "w.rpw"
        save_tensors(path, tensors)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(ContainerCorruptError, match="trailing"):
            load_tensors(path)
