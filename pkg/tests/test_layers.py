import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import signal

from fdresnet.layers import (
    BatchNorm2d,
    Conv2d,
    Linear,
    Sequential,
    batchnorm2d,
    conv2d,
    cross_entropy,
    global_avg_pool,
    init_parameters,
    max_pool2d,
    pad2d,
    relu,
)
from fdresnet.tensor import ShapeError, Tensor, finite_diff_check, precision


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# -- convolution ------------------------------------------------------------------

def test_conv1x1_permutation_shuffles_channels(rng):
    x = rng.normal(size=(2, 4, 5, 5)).astype(np.float32)
    perm = [2, 0, 3, 1]
    w = np.eye(4, dtype=np.float32)[perm].reshape(4, 4, 1, 1)
    out = conv2d(Tensor(x), Tensor(w))
    np.testing.assert_array_equal(out.data, x[:, perm])


def test_conv_ones_kernel_on_constant_interior():
    x = Tensor(np.full((1, 1, 6, 6), 2.5))
    out = conv2d(x, Tensor(np.ones((1, 1, 3, 3))), padding=1)
    np.testing.assert_allclose(out.data[0, 0, 1:-1, 1:-1], 22.5)
    assert out.data[0, 0, 0, 0] == pytest.approx(4 * 2.5)


def test_conv_matches_scipy_correlate(rng):
    with precision("float64"):
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), padding=1).data
        ref = np.zeros_like(out)
        for n in range(2):
            for o in range(4):
                for c in range(3):
                    ref[n, o] += signal.correlate2d(x[n, c], w[o, c], mode="same")
        np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_stride_and_reflect_match_numpy_pad(rng):
    with precision("float64"):
        x = rng.normal(size=(1, 2, 7, 7))
        w = rng.normal(size=(3, 2, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), stride=2, padding=1, padding_mode="reflect").data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")
        ref = np.zeros((1, 3, 4, 4))
        for o in range(3):
            for i in range(4):
                for j in range(4):
                    ref[0, o, i, j] = (xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum()
        np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_errors():
    with pytest.raises(ShapeError, match="channel"):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeError, match="not positive"):
        conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


@pytest.mark.parametrize("k", [1, 3, 5, 7])
def test_same_padding_preserves_spatial_dims(k):
    conv = Conv2d(2, 3, k, padding=(k - 1) // 2)
    assert conv(Tensor(np.ones((1, 2, 9, 8)))).shape == (1, 3, 9, 8)


def test_conv_grad_random_2x3x8x8(rng):
    with precision("float64"):
        conv = Conv2d(3, 2, 3, padding=1, bias=True)
        init_parameters(conv, 0)
        conv.bias.data[...] = rng.normal(size=2)
        x = t64(rng.normal(size=(2, 3, 8, 8)))
        r = Tensor(rng.normal(size=(2, 2, 8, 8)))
        assert finite_diff_check(lambda: (conv(x) * r).sum(), [x, conv.weight, conv.bias]) < 1e-5


@given(
    seed=st.integers(0, 1000),
    k=st.sampled_from([1, 2, 3]),
    stride=st.sampled_from([1, 2]),
    pad=st.integers(0, 1),
    mode=st.sampled_from(["zeros", "reflect"]),
)
def test_conv_gradient_property(seed, k, stride, pad, mode):
    rng = np.random.default_rng(seed)
    with precision("float64"):
        x = t64(rng.normal(size=(2, 2, 5, 4)))
        w = t64(rng.normal(size=(3, 2, k, k)))
        shape = conv2d(x, w, stride=stride, padding=pad, padding_mode=mode).shape
        r = Tensor(rng.normal(size=shape))
        f = lambda: (conv2d(x, w, stride=stride, padding=pad, padding_mode=mode) * r).sum()  # noqa: E731
        assert finite_diff_check(f, [x, w]) < 1e-4


def test_reflect_pad_adjoint(rng):
    # <pad(x), y> == <x, pad^T(y)> for the reflect padding operator
    with precision("float64"):
        x = t64(rng.normal(size=(1, 2, 5, 6)))
        y = rng.normal(size=(1, 2, 9, 10))
        out = pad2d(x, 2, "reflect")
        (out * Tensor(y)).sum().backward()
        assert np.sum(out.data * y) == pytest.approx(np.sum(x.data * x.grad), rel=1e-12)


# -- batch norm --------------------------------------------------------------------

def test_bn_train_normalizes_per_channel(rng):
    with precision("float64"):
        bn = BatchNorm2d(3)
        x = Tensor(rng.normal(3.0, 5.0, size=(8, 3, 4, 4)))
        out = bn(x).data
        assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)


def test_bn_affine_shift_and_scale(rng):
    with precision("float64"):
        bn = BatchNorm2d(2)
        bn.gamma.data[...] = 2.0
        bn.beta.data[...] = 3.0
        x = rng.normal(size=(16, 2, 3, 3))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out = bn(Tensor(x)).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 3.0, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 2.0, atol=1e-4)


def test_bn_running_stats_update(rng):
    with precision("float64"):
        bn = BatchNorm2d(2)
        x = rng.normal(1.0, 2.0, size=(4, 2, 3, 3))
        bn(Tensor(x))
        m = x.mean(axis=(0, 2, 3))
        v = x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(bn.running_mean, 0.1 * m, rtol=1e-12)
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * v, rtol=1e-12)
        assert np.all(bn.running_var >= 0)


def test_bn_eval_uses_running_stats_and_has_no_batch_coupling(rng):
    with precision("float64"):
        bn = BatchNorm2d(2)
        bn.set_buffer("running_mean", np.array([1.0, -1.0]))
        bn.set_buffer("running_var", np.array([4.0, 0.25]))
        bn.eval()
        x = rng.normal(size=(5, 2, 3, 3))
        out = bn(Tensor(x)).data
        ref = (x - bn.running_mean[None, :, None, None]) / np.sqrt(bn.running_var[None, :, None, None] + 1e-5)
        np.testing.assert_allclose(out, ref, rtol=1e-12)
        perm = rng.permutation(5)
        np.testing.assert_array_equal(bn(Tensor(x[perm])).data, out[perm])


def test_bn_single_value_train_rejected():
    bn = BatchNorm2d(2)
    with pytest.raises(ShapeError, match="at least 2"):
        bn(Tensor(np.ones((1, 2, 1, 1))))


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_bn_gradcheck(rng, mode):
    with precision("float64"):
        bn = BatchNorm2d(3)
        bn.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
        bn.beta.data[...] = rng.normal(size=3)
        x = t64(rng.normal(size=(4, 3, 2, 3)))
        r = Tensor(rng.normal(size=(4, 3, 2, 3)))
        f = lambda: (batchnorm2d(x, bn, mode) * r).sum()  # noqa: E731
        assert finite_diff_check(f, [x, bn.gamma, bn.beta]) < 1e-4


# -- relu, pooling, cross entropy --------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_max_pool_and_routing():
    x = t64(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = max_pool2d(x, 2, 2)
    assert out.data.ravel().tolist() == [4.0]
    out.sum().backward()
    np.testing.assert_array_equal(x.grad.ravel(), [0, 0, 0, 1])


def test_max_pool_window_too_large():
    with pytest.raises(ShapeError, match="larger"):
        max_pool2d(Tensor(np.ones((1, 1, 2, 2))), 3)


def test_max_pool_gradcheck(rng):
    with precision("float64"):
        x = t64(rng.normal(size=(2, 3, 6, 6)))
        r = Tensor(rng.normal(size=(2, 3, 2, 2)))
        assert finite_diff_check(lambda: (max_pool2d(x, 3, 3) * r).sum(), [x]) < 1e-4


def test_global_avg_pool_constant():
    out = global_avg_pool(Tensor(np.full((2, 3, 4, 4), 1.75)))
    np.testing.assert_array_equal(out.data, np.full((2, 3), 1.75))


def test_cross_entropy_uniform_logits():
    loss = cross_entropy(Tensor(np.zeros((3, 10)), dtype=np.float64), [0, 4, 9])
    assert float(loss.data) == pytest.approx(np.log(10), abs=1e-12)


def test_cross_entropy_large_margin():
    logits = np.zeros((2, 5))
    logits[[0, 1], [1, 3]] = 50.0
    loss = cross_entropy(Tensor(logits, dtype=np.float64), [1, 3])
    assert 0.0 <= float(loss.data) < 1e-20


def test_cross_entropy_gradient(rng):
    with precision("float64"):
        logits = t64(rng.normal(size=(4, 6)))
        y = np.array([0, 5, 2, 2])
        cross_entropy(logits, y).backward()
        p = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(logits.grad, (p - np.eye(6)[y]) / 4, atol=1e-15)
        assert finite_diff_check(lambda: cross_entropy(logits, y), [logits]) < 1e-6


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


@given(seed=st.integers(0, 1000), n=st.integers(1, 4), k=st.integers(2, 5))
def test_linear_cross_entropy_gradient_property(seed, n, k):
    rng = np.random.default_rng(seed)
    with precision("float64"):
        lin = Linear(3, k)
        init_parameters(lin, seed)
        lin.bias.data[...] = rng.normal(size=k)
        x = t64(rng.normal(size=(n, 3)))
        y = rng.integers(0, k, size=n)
        assert finite_diff_check(lambda: cross_entropy(lin(x), y), [x, lin.weight, lin.bias]) < 1e-4


# -- initialization & modules ------------------------------------------------------

def test_init_bit_identical_for_same_seed():
    a, b = Conv2d(4, 8, 3), Conv2d(4, 8, 3)
    init_parameters(a, 7)
    init_parameters(b, 7)
    assert a.weight.data.tobytes() == b.weight.data.tobytes()


def test_he_normal_std():
    conv = Conv2d(64, 175, 3)  # 175*576 = 100800 draws
    init_parameters(conv, 0)
    std = conv.weight.data.std()
    assert abs(std / np.sqrt(2 / 576) - 1) < 0.05


def test_bn_gamma_exactly_one_after_init():
    bn = BatchNorm2d(5)
    bn.gamma.data[...] = 3.0
    init_parameters(Sequential(bn), 0)
    assert np.all(bn.gamma.data == 1.0) and np.all(bn.beta.data == 0.0)


def test_module_registers_parameters_and_buffers():
    seq = Sequential(Conv2d(1, 2, 3, bias=True), BatchNorm2d(2))
    names = [n for n, _ in seq.named_parameters()]
    assert names == ["0.weight", "0.bias", "1.gamma", "1.beta"]
    assert [n for n, _ in seq.named_buffers()] == ["1.running_mean", "1.running_var"]
    assert seq.num_parameters() == 18 + 2 + 2 + 2
