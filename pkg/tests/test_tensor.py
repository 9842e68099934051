import numpy as np
import pytest

from binsr import tensor as T
from binsr.errors import ConfigError
from oracles import conv_loop, fd_grad, pixel_shuffle_loop, rel_err


def t(arr, **kw):
    return T.Tensor(np.asarray(arr, dtype=np.float32), **kw)


def rand(shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32) * scale


# -- conv2d -----------------------------------------------------------------


def test_conv_scalar_product():
    out = T.conv2d(t([[[[2.0]]]]), t([[[[3.0]]]]))
    assert out.data.reshape(-1)[0] == 6.0


def test_conv_constant_window_sum():
    c = 1.7
    x = t(np.full((1, 1, 5, 5), c, dtype=np.float32))
    w = t(np.ones((1, 1, 3, 3), dtype=np.float32))
    out = T.conv2d(x, w, pad=1)
    # interior pixels see the full 3x3 window
    assert out.data[0, 0, 2, 2] == pytest.approx(9 * c, abs=1e-5)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 2)])
def test_conv_matches_loop_oracle(stride, pad):
    x = rand((1, 2, 5, 5), seed=1)
    w = rand((3, 2, 3, 3), seed=2)
    b = rand((3,), seed=3)
    out = T.conv2d(t(x), t(w), t(b.reshape(1, 3, 1, 1)), stride=stride, pad=pad)
    ref = conv_loop(x, w, b, stride=stride, pad=pad)
    assert np.max(np.abs(out.data - ref)) < 1e-5


def test_conv_linearity():
    x = rand((2, 3, 6, 6), seed=4)
    w = rand((4, 3, 3, 3), seed=5)
    a = 3.25
    y1 = T.conv2d(t(a * x), t(w), pad=1)
    y2 = T.conv2d(t(x), t(w), pad=1)
    assert np.max(np.abs(y1.data - a * y2.data)) < 1e-5


def test_conv_channel_mismatch_names_dims():
    with pytest.raises(ConfigError, match="2"):
        T.conv2d(t(rand((1, 2, 4, 4))), t(rand((1, 3, 3, 3))))


def smooth_l1_target(y0, seed):
    # offset the target by +-0.5 so |pred - target| never changes sign under
    # the FD perturbations: the loss is locally linear with grads +-1/n
    r = np.random.default_rng(seed).choice([-1.0, 1.0], size=y0.shape)
    return (y0 - 0.5 * r.astype(np.float32)).astype(np.float32)


def test_conv_backward_finite_differences():
    x0 = rand((1, 2, 5, 5), seed=6, scale=0.5)
    w0 = rand((2, 2, 3, 3), seed=7, scale=0.5)
    y0 = T.conv2d(t(x0), t(w0), pad=1).data
    tgt = smooth_l1_target(y0, seed=8)

    xt, wt = t(x0, requires_grad=True), t(w0, requires_grad=True)
    with T.Tape() as tape:
        loss = T.l1_loss(T.conv2d(xt, wt, pad=1), t(tgt))
        tape.backward(loss)

    def f_x(x):
        return T.l1_loss(T.conv2d(t(x), t(w0), pad=1), t(tgt)).item()

    def f_w(w):
        return T.l1_loss(T.conv2d(t(x0), t(w), pad=1), t(tgt)).item()

    assert rel_err(xt.grad, fd_grad(f_x, x0), floor=1e-2) < 1e-2
    assert rel_err(wt.grad, fd_grad(f_w, w0), floor=1e-2) < 1e-2


def test_conv_backward_strided_finite_differences():
    # stride > 1 takes the column-scatter branch of the backward, which the
    # unit-stride test above no longer reaches
    x0 = rand((1, 2, 7, 7), seed=16, scale=0.5)
    w0 = rand((3, 2, 3, 3), seed=17, scale=0.5)
    y0 = T.conv2d(t(x0), t(w0), stride=2, pad=1).data
    tgt = smooth_l1_target(y0, seed=18)

    xt, wt = t(x0, requires_grad=True), t(w0, requires_grad=True)
    with T.Tape() as tape:
        loss = T.l1_loss(T.conv2d(xt, wt, stride=2, pad=1), t(tgt))
        tape.backward(loss)

    def f_x(x):
        return T.l1_loss(T.conv2d(t(x), t(w0), stride=2, pad=1), t(tgt)).item()

    def f_w(w):
        return T.l1_loss(T.conv2d(t(x0), t(w), stride=2, pad=1), t(tgt)).item()

    assert rel_err(xt.grad, fd_grad(f_x, x0), floor=1e-2) < 1e-2
    assert rel_err(wt.grad, fd_grad(f_w, w0), floor=1e-2) < 1e-2


# -- batchnorm --------------------------------------------------------------


def test_batchnorm_normalizes_batch():
    x = rand((4, 3, 5, 5), seed=9, scale=3.0) + 2.0
    stats = T.RunningStats(3)
    g = t(np.ones((1, 3, 1, 1), dtype=np.float32))
    b = t(np.zeros((1, 3, 1, 1), dtype=np.float32))
    out = T.batchnorm(t(x), g, b, stats, mode="train").data
    assert np.max(np.abs(out.mean(axis=(0, 2, 3)))) < 1e-5
    assert np.max(np.abs(out.var(axis=(0, 2, 3)) - 1.0)) < 1e-4


def test_batchnorm_affine():
    x = rand((4, 2, 6, 6), seed=10)
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    stats = T.RunningStats(2)
    g = t(np.full((1, 2, 1, 1), 2.0, dtype=np.float32))
    b = t(np.full((1, 2, 1, 1), 3.0, dtype=np.float32))
    out = T.batchnorm(t(x), g, b, stats, mode="train").data
    assert np.allclose(out.mean(axis=(0, 2, 3)), 3.0, atol=1e-4)
    assert np.allclose(out.std(axis=(0, 2, 3)), 2.0, atol=1e-3)


def test_batchnorm_running_stats_update():
    stats = T.RunningStats(1)
    x = np.full((2, 1, 2, 2), 4.0, dtype=np.float32)
    g = t(np.ones((1, 1, 1, 1), dtype=np.float32))
    b = t(np.zeros((1, 1, 1, 1), dtype=np.float32))
    T.batchnorm(t(x), g, b, stats, mode="train")
    # running = 0.9 * old + 0.1 * batch
    assert stats.mean[0] == pytest.approx(0.9 * 0.0 + 0.1 * 4.0, abs=1e-6)
    assert stats.var[0] == pytest.approx(0.9 * 1.0 + 0.1 * 0.0, abs=1e-6)


def test_batchnorm_eval_uses_running_stats():
    stats = T.RunningStats(1)
    stats.mean[:] = 1.0
    stats.var[:] = 4.0
    stats.initialized = True
    g = t(np.ones((1, 1, 1, 1), dtype=np.float32))
    b = t(np.zeros((1, 1, 1, 1), dtype=np.float32))
    x = np.full((1, 1, 1, 1), 3.0, dtype=np.float32)
    out = T.batchnorm(t(x), g, b, stats, mode="eval").data
    assert out.reshape(-1)[0] == pytest.approx((3.0 - 1.0) / np.sqrt(4.0 + 1e-5), abs=1e-6)


def test_batchnorm_backward_finite_differences():
    x0 = rand((2, 4, 6, 6), seed=11)
    g0 = rand((4,), seed=12, scale=0.5) + 1.0
    b0 = rand((4,), seed=13, scale=0.5)

    def run(x, g, b, tgt):
        stats = T.RunningStats(4)
        y = T.batchnorm(t(x), t(g.reshape(1, 4, 1, 1)), t(b.reshape(1, 4, 1, 1)), stats)
        return T.l1_loss(y, t(tgt))

    y0 = T.batchnorm(t(x0), t(g0.reshape(1, 4, 1, 1)), t(b0.reshape(1, 4, 1, 1)),
                     T.RunningStats(4)).data
    tgt = smooth_l1_target(y0, seed=14)

    xt = t(x0, requires_grad=True)
    gt = t(g0.reshape(1, 4, 1, 1), requires_grad=True)
    bt = t(b0.reshape(1, 4, 1, 1), requires_grad=True)
    with T.Tape() as tape:
        stats = T.RunningStats(4)
        tape.backward(T.l1_loss(T.batchnorm(xt, gt, bt, stats), t(tgt)))

    assert rel_err(xt.grad, fd_grad(lambda x: run(x, g0, b0, tgt).item(), x0), floor=1e-2) < 1e-2
    assert rel_err(gt.grad.reshape(-1), fd_grad(lambda g: run(x0, g, b0, tgt).item(), g0), floor=1e-2) < 1e-2
    assert rel_err(bt.grad.reshape(-1), fd_grad(lambda b: run(x0, g0, b, tgt).item(), b0), floor=1e-2) < 1e-2


def test_batchnorm_channel_mismatch():
    stats = T.RunningStats(2)
    ones = t(np.ones((1, 2, 1, 1), dtype=np.float32))
    with pytest.raises(ConfigError):
        T.batchnorm(t(rand((1, 3, 4, 4))), ones, ones, stats)


# -- add / pixel_shuffle / repeat / l1 ---------------------------------------


def test_add_identity_and_values():
    a = rand((1, 2, 3, 3), seed=15)
    assert np.array_equal(T.add(t(a), t(np.zeros_like(a))).data, a)
    out = T.add(t([[[[1.0, 2.0]]]]), t([[[[3.0, 4.0]]]]))
    assert np.array_equal(out.data.reshape(-1), [4.0, 6.0])


def test_add_backward_passes_grad_to_both():
    a = t(rand((1, 1, 2, 2)), requires_grad=True)
    b = t(rand((1, 1, 2, 2), seed=1), requires_grad=True)
    with T.Tape() as tape:
        out = T.add(a, b)
        tape.backward(out)
    assert np.array_equal(a.grad, np.ones_like(a.data))
    assert np.array_equal(b.grad, np.ones_like(b.data))


def test_add_shape_mismatch():
    with pytest.raises(ConfigError):
        T.add(t(rand((1, 1, 2, 2))), t(rand((1, 1, 3, 3))))


def test_pixel_shuffle_shape_law():
    out = T.pixel_shuffle(t(rand((1, 12, 5, 5))), 2)
    assert out.shape == (1, 3, 10, 10)


def test_pixel_shuffle_r1_identity():
    x = rand((2, 3, 4, 4), seed=16)
    assert np.array_equal(T.pixel_shuffle(t(x), 1).data, x)


def test_pixel_shuffle_2x2_layout():
    x = t(np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32).reshape(1, 4, 1, 1))
    out = T.pixel_shuffle(x, 2).data
    assert np.array_equal(out[0, 0], [[1.0, 2.0], [3.0, 4.0]])


def test_pixel_shuffle_matches_loop():
    x = rand((2, 18, 3, 4), seed=17)
    assert np.array_equal(T.pixel_shuffle(t(x), 3).data, pixel_shuffle_loop(x, 3))


def test_pixel_shuffle_inverse_bit_exact():
    x = rand((2, 8, 3, 5), seed=18)
    back = T.pixel_unshuffle(T.pixel_shuffle(t(x), 2), 2)
    assert np.array_equal(back.data, x)


def test_pixel_shuffle_indivisible_channels():
    with pytest.raises(ConfigError):
        T.pixel_shuffle(t(rand((1, 5, 2, 2))), 2)


def test_repeat_channels_layout_and_backward():
    a = rand((1, 2, 2, 2), seed=19)
    out = T.repeat_channels(t(a), 2).data
    assert np.array_equal(out[:, :2], a)
    assert np.array_equal(out[:, 2:], a)
    assert np.array_equal(T.repeat_channels(t(a), 1).data, a)

    src = t(a, requires_grad=True)
    with T.Tape() as tape:
        rep = T.repeat_channels(src, 3)
        tape.backward(rep)
    assert np.array_equal(src.grad, np.full_like(a, 3.0))


def test_repeat_channels_k_validation():
    with pytest.raises(ConfigError):
        T.repeat_channels(t(rand((1, 1, 2, 2))), 0)


def test_l1_loss_values_and_grad():
    a = rand((1, 2, 3, 3), seed=20)
    assert T.l1_loss(t(a), t(a)).item() == 0.0
    assert T.l1_loss(t(a + 0.5), t(a)).item() == pytest.approx(0.5, abs=1e-6)

    pred = t(a + 2.0, requires_grad=True)
    with T.Tape() as tape:
        tape.backward(T.l1_loss(pred, t(a)))
    assert np.allclose(pred.grad, 1.0 / a.size)


def test_l1_backward_finite_differences():
    p0 = rand((1, 2, 4, 4), seed=21)
    tgt = rand((1, 2, 4, 4), seed=22)
    pt = t(p0, requires_grad=True)
    with T.Tape() as tape:
        tape.backward(T.l1_loss(pt, t(tgt)))
    assert rel_err(pt.grad, fd_grad(lambda p: T.l1_loss(t(p), t(tgt)).item(), p0),
                   floor=1e-2) < 1e-2


# -- tape semantics ----------------------------------------------------------


def test_backward_twice_doubles_grads_exactly():
    x = t(rand((1, 2, 5, 5), seed=23), requires_grad=True)
    w = t(rand((2, 2, 3, 3), seed=24), requires_grad=True)
    tgt = t(rand((1, 2, 5, 5), seed=25))
    with T.Tape() as tape:
        loss = T.l1_loss(T.conv2d(x, w, pad=1), tgt)
    tape.backward(loss)
    gx1, gw1 = x.grad.copy(), w.grad.copy()
    tape.backward(loss)
    assert np.array_equal(x.grad, 2.0 * gx1)
    assert np.array_equal(w.grad, 2.0 * gw1)


def test_forward_ops_finite_on_finite_inputs():
    x = rand((2, 4, 6, 6), seed=26, scale=10.0)
    w = rand((4, 4, 3, 3), seed=27, scale=10.0)
    stats = T.RunningStats(4)
    g = t(np.ones((1, 4, 1, 1), dtype=np.float32))
    b = t(np.zeros((1, 4, 1, 1), dtype=np.float32))
    y = T.batchnorm(T.conv2d(t(x), t(w), pad=1), g, b, stats)
    y = T.add(y, t(x))
    assert np.isfinite(y.data).all()


def test_tensor_requires_4d():
    with pytest.raises(ConfigError):
        T.Tensor(np.zeros((3, 3), dtype=np.float32))
