"""Binarization, surrogate gradients, bit packing, and the packed conv.

The sign convention is sign(0) = +1 everywhere (keeps packing total). Two
surrogate backward rules are supported for the sign op:

    ste-clip      grad * 1{|x| <= 1}, boundaries inclusive
    bireal-poly   grad * d(x), d(x) = 2+2x on [-1,0), 2-2x on [0,1], else 0

Binarized convolutions compute integer-valued dot products with the sign
weights first and apply the per-channel scale once at the end. That makes
the dense float path and the packed XNOR-popcount path bitwise identical:
float32 sums of +-1 products are exact integers, and both paths then perform
the same single multiply per output element.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import backend
from .errors import ConfigError, DataError
from .tensor import (Tensor, _record, conv_backward_raw, conv_forward_raw,
                     conv_out_hw)

QUANTIZER_KINDS = ("ste-clip", "bireal-poly")

WORD_BITS = 64
_FULL_WORD = np.uint64(0xFFFFFFFFFFFFFFFF)


def _check_quantizer(kind: str):
    if kind not in QUANTIZER_KINDS:
        raise ConfigError(f"unknown quantizer {kind!r}, expected one of {QUANTIZER_KINDS}")


# ---------------------------------------------------------------------------
# Sign and surrogate gradients
# ---------------------------------------------------------------------------


def sign_forward(x: Tensor, quantizer: str = "ste-clip") -> Tensor:
    """Elementwise binarize to {-1,+1}; sign(0) = +1.

    The backward rule is the surrogate selected by ``quantizer``, applied to
    the saved pre-sign activation.
    """
    _check_quantizer(quantizer)
    x_saved = x.data
    out = Tensor(np.where(x_saved >= 0, np.float32(1.0), np.float32(-1.0)))

    if quantizer == "ste-clip":
        backward = lambda g: (ste_backward(g, x_saved),)
    else:
        backward = lambda g: (bireal_backward(g, x_saved),)

    _record("sign", (x,), out, backward)
    return out


def ste_backward(grad_out: np.ndarray, x_saved: np.ndarray) -> np.ndarray:
    """Clipped straight-through estimator: pass grad where |x| <= 1."""
    return (grad_out * (np.abs(x_saved) <= 1.0)).astype(np.float32)


def bireal_backward(grad_out: np.ndarray, x_saved: np.ndarray) -> np.ndarray:
    """Piecewise-quadratic surrogate derivative (2+2x / 2-2x on [-1,1]).

    Written as max(0, 2 - 2|x|), which is the same tent exactly: the two
    linear branches agree with it on their own half-intervals and the clamp
    zeroes everything outside [-1, 1].
    """
    d = np.float32(2.0) - np.float32(2.0) * np.abs(x_saved)
    np.maximum(d, np.float32(0.0), out=d)
    d *= grad_out
    return d


# ---------------------------------------------------------------------------
# Weight binarization
# ---------------------------------------------------------------------------


class BinWeights:
    """Sign planes plus one positive scale per output channel.

    alpha[c] is the mean absolute latent weight of channel c's filter. The
    latent tensor is kept so gradients can flow back to it straight-through.
    """

    __slots__ = ("signs", "alpha", "latent")

    def __init__(self, signs: np.ndarray, alpha: np.ndarray,
                 latent: Optional[Tensor] = None):
        self.signs = signs
        self.alpha = alpha
        self.latent = latent

    @property
    def shape(self):
        return self.signs.shape


def binarize_weights(latent: Tensor) -> BinWeights:
    """Binarize a (Cout, Cin, kh, kw) latent weight tensor.

    signs = sign(latent) with sign(0) = +1; alpha[c] = mean |latent[c]|.
    Gradients w.r.t. the latent are straight-through with alpha constant:
    dL/dlatent = dL/d(effective weight) * alpha.
    """
    w = latent.data
    if w.ndim != 4:
        raise ConfigError(f"latent weights must be 4-D, got {w.shape}")
    signs = np.where(w >= 0, np.float32(1.0), np.float32(-1.0))
    alpha = np.abs(w).mean(axis=(1, 2, 3)).astype(np.float32)
    return BinWeights(signs, alpha, latent)


def binconv_forward(x: Tensor, w: BinWeights, stride: int = 1, pad: int = 0,
                    quantizer: str = "ste-clip") -> Tensor:
    """Binarized convolution on a post-sign activation.

    Equals conv2d(x, alpha * signs, stride, pad): computed as the integer
    sign-weight convolution scaled by alpha once per output channel.

    The activation gradient leaving this op is the plain conv gradient; the
    surrogate selected by ``quantizer`` fires at the sign op that produced x
    (the tag is validated and recorded here so graph dumps can show it).
    Weight gradients flow straight-through to the latent tensor.
    """
    _check_quantizer(quantizer)
    cout, cin, kh, kw = w.signs.shape
    if x.shape[1] != cin:
        raise ConfigError(
            f"binconv channel mismatch: input has {x.shape[1]} channels, "
            f"weights expect {cin}")

    dots, cols = conv_forward_raw(x.data, w.signs, stride, pad)
    alpha4 = w.alpha.reshape(1, cout, 1, 1)
    out = Tensor(dots * alpha4)

    latent = w.latent
    inputs = (x,) if latent is None else (x, latent)

    def backward(g):
        ga = g * alpha4
        gx, glatent = conv_backward_raw(
            ga, x.shape, w.signs, cols, stride, pad,
            need_weight_grad=latent is not None)
        if latent is None:
            return (gx,)
        return gx, glatent

    _record(f"binconv[{quantizer}]", inputs, out, backward)
    return out


# ---------------------------------------------------------------------------
# Bit packing
# ---------------------------------------------------------------------------


class BitPlane:
    """Channel-packed {-1,+1} activations with a validity mask.

    words: (N, Hp, Wp, Wc) uint64, bit i of word j covers channel 64j+i,
        LSB-first; bit 1 means +1, bit 0 means -1.
    mask:  (Hp, Wp, Wc) uint64; 0 bits mark padding pixels and unused
        channel lanes, which contribute nothing to any dot product.
    shape: logical (N, C, H, W) before padding; pad: border width baked in.
    """

    __slots__ = ("words", "mask", "shape", "pad")

    def __init__(self, words: np.ndarray, mask: np.ndarray, shape, pad: int):
        self.words = words
        self.mask = mask
        self.shape = tuple(shape)
        self.pad = pad


def _pack_lanes(bits: np.ndarray) -> np.ndarray:
    """Pack a (..., C) boolean array into (..., Wc) uint64 words, LSB-first."""
    *lead, c = bits.shape
    wc = (c + WORD_BITS - 1) // WORD_BITS
    if c != wc * WORD_BITS:
        fill = np.zeros((*lead, wc * WORD_BITS - c), dtype=bool)
        bits = np.concatenate([bits, fill], axis=-1)
    by = np.packbits(bits.reshape(*lead, wc, WORD_BITS), axis=-1, bitorder="little")
    # 8 little-endian bytes per word; host is assumed little-endian (asserted
    # at import in pack_bits) so a view reassembles LSB-first words.
    return by.reshape(*lead, wc * 8).copy().view(np.uint64)


def _lane_mask(c: int) -> np.ndarray:
    wc = (c + WORD_BITS - 1) // WORD_BITS
    mask = np.empty(wc, dtype=np.uint64)
    for j in range(wc):
        lanes = min(WORD_BITS, c - j * WORD_BITS)
        mask[j] = _FULL_WORD if lanes == WORD_BITS else np.uint64((1 << lanes) - 1)
    return mask


def pack_bits(x, pad: int = 0) -> BitPlane:
    """Pack a {-1,+1} NCHW tensor into channel-major bit planes.

    The returned plane already carries the zero-pad border as masked-out
    positions, so the packed conv needs no further padding logic.

    Raises DataError naming the first offending index if any element is not
    exactly -1 or +1.
    """
    if np.little_endian is False:
        raise ConfigError("packed planes require a little-endian host")
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    if data.ndim != 4:
        raise ConfigError(f"pack_bits expects NCHW, got shape {data.shape}")
    if pad < 0:
        raise ConfigError(f"pad must be >= 0, got {pad}")
    bad = np.abs(data) != 1.0
    if bad.any():
        idx = np.unravel_index(int(np.argmax(bad)), data.shape)
        raise DataError(
            f"pack_bits needs values in {{-1,+1}}; found {data[idx]!r} at "
            f"index {tuple(int(i) for i in idx)}")

    n, c, h, w = data.shape
    words = _pack_lanes(data.transpose(0, 2, 3, 1) > 0)  # (N,H,W,Wc)
    if pad:
        words = np.pad(words, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    words = np.ascontiguousarray(words)

    wc = words.shape[-1]
    mask = np.zeros((h + 2 * pad, w + 2 * pad, wc), dtype=np.uint64)
    mask[pad:pad + h, pad:pad + w, :] = _lane_mask(c)
    return BitPlane(words, mask, (n, c, h, w), pad)


def unpack_bits(plane: BitPlane) -> Tensor:
    """Reconstruct the {-1,+1} NCHW tensor from a packed plane (pad dropped)."""
    n, c, h, w = plane.shape
    p = plane.pad
    interior = plane.words[:, p:p + h, p:p + w, :]
    by = interior.reshape(n, h, w, -1).view(np.uint8)
    bits = np.unpackbits(by, axis=-1, bitorder="little")[..., :c]
    vals = np.where(bits.astype(bool), np.float32(1.0), np.float32(-1.0))
    return Tensor(np.ascontiguousarray(vals.transpose(0, 3, 1, 2)))


class PackedBinWeights:
    """BinWeights with sign planes packed for the XNOR kernel."""

    __slots__ = ("words", "alpha", "cin", "kh", "kw")

    def __init__(self, words: np.ndarray, alpha: np.ndarray, cin: int,
                 kh: int, kw: int):
        self.words = words
        self.alpha = alpha
        self.cin = cin
        self.kh = kh
        self.kw = kw


def pack_weights(w: BinWeights) -> PackedBinWeights:
    """Pack (Cout, Cin, kh, kw) sign planes into (Cout, kh, kw, Wc) words."""
    cout, cin, kh, kw = w.signs.shape
    words = _pack_lanes(w.signs.transpose(0, 2, 3, 1) > 0)
    return PackedBinWeights(np.ascontiguousarray(words), w.alpha, cin, kh, kw)


def xnor_conv(xp: BitPlane, w: PackedBinWeights, stride: int = 1,
              pad: int = 0) -> Tensor:
    """Packed binarized convolution; bitwise equal to binconv_forward.

    Per output element: dot = n_valid - 2 * popcount((x XOR w) AND mask),
    then output = alpha * dot. The plane must have been packed with the same
    pad this call requests (padding is baked into the mask).
    """
    if pad != xp.pad:
        raise ConfigError(
            f"plane was packed with pad={xp.pad} but conv requested pad={pad}")
    n, c, h, w_in = xp.shape
    if c != w.cin:
        raise ConfigError(
            f"packed conv channel mismatch: plane has {c}, weights expect {w.cin}")
    conv_out_hw(h, w_in, w.kh, w.kw, stride, pad)  # geometry validation
    dots = backend.xnor_conv_dots(xp.words, xp.mask, w.words, stride)
    cout = w.words.shape[0]
    out = dots.transpose(0, 3, 1, 2).astype(np.float32)
    out *= w.alpha.reshape(1, cout, 1, 1)
    return Tensor(out)
