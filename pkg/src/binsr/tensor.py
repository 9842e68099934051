"""Dense NCHW tensors and a minimal reverse-mode tape.

Everything is float32. The tape is strictly sequential: ops append nodes in
creation order and backward walks them in reverse. Gradients accumulate into
``.grad`` of tensors marked ``requires_grad``; intermediate gradients live in
a per-backward scratch map so calling backward twice doubles leaf grads
exactly instead of compounding.

Convolution runs as NHWC im2col plus one BLAS matmul per pass. The naive
nested-loop formulation is kept in the test suite as the correctness oracle;
this layout is roughly three orders of magnitude faster on CPU, which is what
makes the desk-scale ablations affordable.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError

# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """4-D float32 array (N, C, H, W) with an optional gradient buffer.

    Args:
        data: array-like, coerced to float32. Must be 4-dimensional.
        requires_grad: if True, backward passes accumulate into ``self.grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 4:
            raise ConfigError(f"tensor must be 4-D NCHW, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        # accumulate, never overwrite
        if self.grad is None:
            self.grad = g.astype(np.float32, copy=True)
        else:
            self.grad += g

    def item(self) -> float:
        if self.data.size != 1:
            raise ConfigError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, grad={self.grad is not None}{tag})"


class TapeNode:
    """One recorded op: inputs, output, and a backward closure.

    ``backward(grad_out)`` returns one gradient array (or None) per input,
    in input order.
    """

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


class Tape:
    """Sequential gradient tape. Use as a context manager around forward."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self):
        _push(self)
        return self

    def __exit__(self, *exc):
        _pop(self)
        return False

    def record(self, op, inputs, output, backward):
        self.nodes.append(TapeNode(op, inputs, output, backward))

    def backward(self, loss: Tensor):
        """Reverse sweep from ``loss``, seeding with ones.

        Leaf tensors (requires_grad) receive accumulated grads in ``.grad``.
        """
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if loss.requires_grad:
            loss.accumulate_grad(grads[id(loss)])
        for node in reversed(self.nodes):
            g_out = grads.get(id(node.output))
            if g_out is None:
                continue
            for t, g in zip(node.inputs, node.backward(g_out)):
                if g is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] += g
                else:
                    grads[key] = g.astype(np.float32, copy=True)
                if t.requires_grad:
                    t.accumulate_grad(g)
        return grads


_TAPES: list[Tape] = []


def _push(t: Tape):
    _TAPES.append(t)


def _pop(t: Tape):
    assert _TAPES and _TAPES[-1] is t
    _TAPES.pop()


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def _record(op, inputs, output, backward):
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, output, backward)


# ---------------------------------------------------------------------------
# Convolution plumbing (shared with the binarized conv in quantize)
# ---------------------------------------------------------------------------


def conv_out_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError(
            f"conv output would be empty: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}"
        )
    return ho, wo


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """NCHW float32 -> (rows, patch) matrix with rows in (n, ho, wo) order.

    The patch axis is laid out (kh, kw, Cin), channels fastest, so a plain
    reshape of the NHWC-transposed weight lines up with it.
    """
    n, c, h, w = x.shape
    ho, wo = conv_out_hw(h, w, kh, kw, stride, pad)
    if pad:
        # write the NHWC transpose straight into a zeroed padded buffer,
        # one pass instead of transpose-copy followed by pad-copy
        xh = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=np.float32)
        xh[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    else:
        xh = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    win = sliding_window_view(xh, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * ho * wo, kh * kw * c), ho, wo


def _weight_mat(w: np.ndarray) -> np.ndarray:
    # (Cout, Cin, kh, kw) -> (kh*kw*Cin, Cout), matching _im2col's patch order
    cout, cin, kh, kw = w.shape
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(kh * kw * cin, cout)


def conv_forward_raw(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    """Plain conv forward. Returns (out NCHW, saved cols for backward)."""
    n = x.shape[0]
    cout, _, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    out = cols @ _weight_mat(w)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    return out, cols


def conv_backward_raw(grad_out: np.ndarray, x_shape, w: np.ndarray,
                      cols: np.ndarray, stride: int, pad: int,
                      need_input_grad: bool = True,
                      need_weight_grad: bool = True):
    """Gradients of conv_forward_raw. Returns (grad_x or None, grad_w or None)."""
    n, cin, h, w_in = x_shape
    cout, _, kh, kw = w.shape
    ho, wo = conv_out_hw(h, w_in, kh, kw, stride, pad)
    goh = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(-1, cout)

    grad_w = None
    if need_weight_grad:
        gw = cols.T @ goh
        grad_w = np.ascontiguousarray(
            gw.reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1))

    grad_x = None
    if need_input_grad:
        if stride == 1 and kh == kw and kh - 1 - pad >= 0:
            # unit stride: the input gradient is the full correlation of
            # grad_out with the flipped kernel, i.e. one more im2col GEMM,
            # which beats scattering column gradients back by a wide margin
            wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            grad_x, _ = conv_forward_raw(grad_out, wt, 1, kh - 1 - pad)
        else:
            gcols = (goh @ _weight_mat(w).T).reshape(n, ho, wo, kh, kw, cin)
            hp, wp = h + 2 * pad, w_in + 2 * pad
            gxp = np.zeros((n, hp, wp, cin), dtype=np.float32)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride, :] += gcols[:, :, :, i, j, :]
            if pad:
                gxp = gxp[:, pad:hp - pad, pad:wp - pad, :]
            grad_x = np.ascontiguousarray(gxp.transpose(0, 3, 1, 2))
    return grad_x, grad_w


# ---------------------------------------------------------------------------
# Differentiable ops
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution with zero padding.

    Args:
        x: input (N, Cin, H, W).
        weight: (Cout, Cin, kh, kw).
        bias: optional (1, Cout, 1, 1) tensor added per output channel.
        stride: >= 1.
        pad: >= 0, symmetric zero padding.
    """
    if stride < 1 or pad < 0:
        raise ConfigError(f"bad conv geometry: stride={stride} pad={pad}")
    if weight.data.ndim != 4:
        raise ConfigError(f"conv weight must be 4-D, got {weight.shape}")
    n, cin, h, w_in = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ConfigError(
            f"conv channel mismatch: input has {cin} channels, "
            f"weight expects {cin_w}")
    if bias is not None and bias.data.shape != (1, cout, 1, 1):
        raise ConfigError(
            f"conv bias must have shape (1, {cout}, 1, 1), got {bias.data.shape}")

    out_data, cols = conv_forward_raw(x.data, weight.data, stride, pad)
    if bias is not None:
        out_data = out_data + bias.data
    out = Tensor(out_data)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx, gw = conv_backward_raw(g, x.shape, weight.data, cols, stride, pad)
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3), keepdims=True)
        return gx, gw, gb

    _record("conv2d", inputs, out, backward)
    return out


class RunningStats:
    """Per-channel running mean/variance for batchnorm eval mode."""

    __slots__ = ("mean", "var", "initialized")

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float32)
        self.var = np.ones(channels, dtype=np.float32)
        self.initialized = False


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
              mode: str = "train", momentum: float = 0.9,
              eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes by biased batch statistics and updates ``stats``
    as running = momentum * running + (1 - momentum) * batch. Eval mode
    normalizes by the stored running statistics.

    gamma and beta are (1, C, 1, 1) tensors.
    """
    n, c, h, w = x.shape
    if gamma.data.shape != (1, c, 1, 1) or beta.data.shape != (1, c, 1, 1):
        raise ConfigError(
            f"batchnorm expects gamma/beta shaped (1, {c}, 1, 1), got "
            f"{gamma.data.shape} / {beta.data.shape}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"batchnorm mode must be train or eval, got {mode!r}")

    if mode == "eval":
        if not stats.initialized:
            raise ConfigError("batchnorm eval mode before any train step")
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (x.data - stats.mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = Tensor(gamma.data * xhat + beta.data)

        def backward_eval(g):
            gx = g * gamma.data * inv.reshape(1, c, 1, 1).astype(np.float32)
            ggamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gbeta = g.sum(axis=(0, 2, 3), keepdims=True)
            return gx, ggamma, gbeta

        _record("batchnorm", (x, gamma, beta), out, backward_eval)
        return out

    m = n * h * w
    mu = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mu.reshape(1, c, 1, 1)
    var = np.mean(xc * xc, axis=(0, 2, 3))  # biased, reuses the centered copy
    inv = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    xhat = xc * inv.reshape(1, c, 1, 1)
    out = Tensor(gamma.data * xhat + beta.data)

    stats.mean[:] = momentum * stats.mean + (1.0 - momentum) * mu
    stats.var[:] = momentum * stats.var + (1.0 - momentum) * var
    stats.initialized = True

    def backward(g):
        # exact gradient of the batch-statistics formula
        gxhat = g * gamma.data
        inv4 = inv.reshape(1, c, 1, 1)
        sum_gxhat = gxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_gxhat_xhat = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        ggamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gbeta = g.sum(axis=(0, 2, 3), keepdims=True)
        gx = m * gxhat  # reused as the accumulator below
        gx -= sum_gxhat
        gx -= xhat * sum_gxhat_xhat
        gx *= inv4 / m
        return gx.astype(np.float32, copy=False), ggamma, gbeta

    _record("batchnorm", (x, gamma, beta), out, backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; both inputs must share a shape exactly."""
    if a.shape != b.shape:
        raise ConfigError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    _record("add", (a, b), out, lambda g: (g, g))
    return out


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (N, C*r*r, H, W) -> (N, C, r*H, r*W).

    Layout: out[n, c, r*h + i, r*w + j] = in[n, c*r*r + i*r + j, h, w].
    """
    n, crr, h, w = x.shape
    if r < 1:
        raise ConfigError(f"pixel_shuffle factor must be >= 1, got {r}")
    if crr % (r * r) != 0:
        raise ConfigError(
            f"pixel_shuffle needs channels divisible by r^2={r * r}, got {crr}")
    c = crr // (r * r)
    out_data = np.ascontiguousarray(
        x.data.reshape(n, c, r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, c, h * r, w * r))
    out = Tensor(out_data)

    def backward(g):
        gx = (g.reshape(n, c, h, r, w, r)
              .transpose(0, 1, 3, 5, 2, 4)
              .reshape(n, crr, h, w))
        return (np.ascontiguousarray(gx),)

    _record("pixel_shuffle", (x,), out, backward)
    return out


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of pixel_shuffle, bit-exact (pure index permutation)."""
    n, c, hr, wr = x.shape
    if r < 1:
        raise ConfigError(f"pixel_unshuffle factor must be >= 1, got {r}")
    if hr % r or wr % r:
        raise ConfigError(
            f"pixel_unshuffle needs dims divisible by r={r}, got {hr}x{wr}")
    h, w = hr // r, wr // r
    out_data = np.ascontiguousarray(
        x.data.reshape(n, c, h, r, w, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * r * r, h, w))
    out = Tensor(out_data)

    def backward(g):
        gx = (g.reshape(n, c, r, r, h, w)
              .transpose(0, 1, 4, 2, 5, 3)
              .reshape(n, c, hr, wr))
        return (np.ascontiguousarray(gx),)

    _record("pixel_unshuffle", (x,), out, backward)
    return out


def repeat_channels(x: Tensor, k: int) -> Tensor:
    """Stack k copies of the input along the channel axis.

    Backward sums the incoming gradient over the k copies.
    """
    if k < 1:
        raise ConfigError(f"repeat_channels needs k >= 1, got {k}")
    n, c, h, w = x.shape
    out = Tensor(np.tile(x.data, (1, k, 1, 1)))

    def backward(g):
        return (g.reshape(n, k, c, h, w).sum(axis=1),)

    _record("repeat_channels", (x,), out, backward)
    return out


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error as a 1x1x1x1 tensor (use .item() for the float).

    Subgradient is sign(pred - target) / count, zero at exact ties.
    """
    if pred.shape != target.shape:
        raise ConfigError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = Tensor(np.abs(diff).mean().reshape(1, 1, 1, 1))

    def backward(g):
        scale = np.float32(g.reshape(-1)[0] / diff.size)
        gp = np.sign(diff) * scale
        return gp, -gp

    _record("l1_loss", (pred, target), out, backward)
    return out
