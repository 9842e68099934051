"""Network assembly: residual blocks, upsampling tails, full nets.

Every network is head / body / tail:

    head  full-precision 3x3 conv, 3 -> C
    body  num_blocks residual blocks of two binarized 3x3 conv units each
    tail  upsampler, three variants

plus one global skip adding the head output back in just before the tail.
First and last convs stay full precision in every variant.

Block variants differ only in where bypass adds land; parameter counts are
identical across them. Each bypass add records which conv indices it spans
so `cutoff` can sever exactly one conv's shortcut coverage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, replace
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .graph import LayerGraph
from .quantize import QUANTIZER_KINDS

BLOCK_VARIANTS = ("original", "former", "later", "bireal")
TAIL_VARIANTS = ("original", "repeat-shortcut", "lightweight")
BACKBONES = ("srresnet-like", "edsr-like")
SCALES = (2, 3, 4)

# Init gamma for any BN that closes a residual branch (its output lands on an
# Add that also carries an identity path). Damping these keeps every block
# near-identity at init, so the trunk's variance stays flat instead of growing
# by one unit per branch. That matters for the binarized body: sign inputs ride
# the trunk, and the surrogate gradient only has support on [-1, 1], so an
# unnormalized trunk silently kills the gradient of every later conv. Branches
# whose shortcut is severed by `cutoff` keep gamma 1 (there is no identity add
# to hide behind).
RESIDUAL_GAMMA0 = 0.1


@dataclass
class NetworkConfig:
    backbone: str = "srresnet-like"
    num_blocks: int = 4
    channels: int = 16
    scale: int = 2
    block: str = "bireal"
    tail: str = "lightweight"
    cutoff: Optional[Union[int, str]] = None
    quantizer: str = "bireal-poly"
    seed: int = 0
    full_precision: bool = False
    global_skip: bool = True

    def validate(self) -> "NetworkConfig":
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.block not in BLOCK_VARIANTS:
            raise ConfigError(f"block must be one of {BLOCK_VARIANTS}, got {self.block!r}")
        if self.tail not in TAIL_VARIANTS:
            raise ConfigError(f"tail must be one of {TAIL_VARIANTS}, got {self.tail!r}")
        if self.quantizer not in QUANTIZER_KINDS:
            raise ConfigError(
                f"quantizer must be one of {QUANTIZER_KINDS}, got {self.quantizer!r}")
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}, got {self.scale!r}")
        if not (isinstance(self.num_blocks, int) and self.num_blocks >= 1):
            raise ConfigError(f"num_blocks must be a positive int, got {self.num_blocks!r}")
        if not (isinstance(self.channels, int) and self.channels >= 1):
            raise ConfigError(f"channels must be a positive int, got {self.channels!r}")
        if self.cutoff is not None and self.cutoff != "tail":
            if not isinstance(self.cutoff, int) or isinstance(self.cutoff, bool):
                raise ConfigError(f"cutoff must be null, an int or 'tail', got {self.cutoff!r}")
            if not 0 <= self.cutoff < 2 * self.num_blocks:
                raise ConfigError(
                    f"cutoff index {self.cutoff} out of range [0, {2 * self.num_blocks})")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"seed must be an int, got {self.seed!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, path) -> "NetworkConfig":
        try:
            with open(path) as f:
                d = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(d)


class _Builder:
    """Carries the rng and emission helpers while a network is assembled."""

    def __init__(self, g: LayerGraph, rng: np.random.Generator, quantizer: str,
                 full_precision: bool, with_bn: bool):
        self.g = g
        self.rng = rng
        self.quantizer = quantizer
        self.full_precision = full_precision
        self.with_bn = with_bn  # BN inside full-precision reference units

    def _kaiming(self, cout, cin, k, scale=1.0) -> T.Tensor:
        std = scale * float(np.sqrt(2.0 / (cin * k * k)))
        w = self.rng.normal(0.0, std, size=(cout, cin, k, k))
        return T.Tensor(w.astype(np.float32), requires_grad=True)

    def fp_conv(self, name, pred, cin, cout, k=3, bias=True, init_scale=1.0) -> str:
        pad = k // 2
        b = None
        if bias:
            b = T.Tensor(np.zeros((1, cout, 1, 1), np.float32), requires_grad=True)
        return self.g.add("FPConv", name, [pred],
                          weight=self._kaiming(cout, cin, k, init_scale), bias=b,
                          stride=1, pad=pad)

    def bn(self, name, pred, c, gamma0: float = 1.0) -> str:
        return self.g.add(
            "BN", name, [pred],
            gamma=T.Tensor(np.full((1, c, 1, 1), gamma0, np.float32),
                           requires_grad=True),
            beta=T.Tensor(np.zeros((1, c, 1, 1), np.float32), requires_grad=True),
            stats=T.RunningStats(c))

    def unit(self, name, pred, cin, cout, gamma0: float = 1.0) -> str:
        """One conv unit: Sign -> BinConv -> BN, or its full-precision stand-in."""
        if self.full_precision:
            conv = self.fp_conv(f"{name}.conv", pred, cin, cout,
                                bias=not self.with_bn)
            return self.bn(f"{name}.bn", conv, cout, gamma0) if self.with_bn else conv
        sign = self.g.add("Sign", f"{name}.sign", [pred], quantizer=self.quantizer)
        conv = self.g.add("BinConv", f"{name}.conv", [sign],
                          latent=self._kaiming(cout, cin, 3), stride=1, pad=1,
                          quantizer=self.quantizer, sign=sign)
        bn = self.bn(f"{name}.bn", conv, cout, gamma0)
        self.g.node(conv).params["unit_out"] = bn
        return bn

    def add(self, name, a, b) -> str:
        return self.g.add("Add", name, [a, b])


def _cut(cutoff, span) -> bool:
    return isinstance(cutoff, int) and cutoff in span


def _emit_block(b: _Builder, name: str, variant: str, c: int, x: str,
                idx0: int, cutoff) -> str:
    """Wire one residual block; idx0 is the index of its first conv."""
    i0, i1 = idx0, idx0 + 1
    g0 = RESIDUAL_GAMMA0
    if variant == "original":
        cut = _cut(cutoff, (i0, i1))
        y1 = b.unit(f"{name}.u0", x, c, c)
        y2 = b.unit(f"{name}.u1", y1, c, c, gamma0=1.0 if cut else g0)
        return y2 if cut else b.add(f"{name}.skip", y2, x)
    if variant == "former":
        cut0, cut = _cut(cutoff, (i0,)), _cut(cutoff, (i0, i1))
        y1u = b.unit(f"{name}.u0", x, c, c, gamma0=1.0 if cut0 else g0)
        y1 = y1u if cut0 else b.add(f"{name}.skip0", y1u, x)
        y2 = b.unit(f"{name}.u1", y1, c, c, gamma0=1.0 if cut else g0)
        return y2 if cut else b.add(f"{name}.skip", y2, x)
    if variant == "later":
        cut1, cut = _cut(cutoff, (i1,)), _cut(cutoff, (i0, i1))
        y1 = b.unit(f"{name}.u0", x, c, c)
        y2u = b.unit(f"{name}.u1", y1, c, c, gamma0=1.0 if cut1 and cut else g0)
        y2 = y2u if cut1 else b.add(f"{name}.skip1", y2u, y1)
        return y2 if cut else b.add(f"{name}.skip", y2, x)
    if variant == "bireal":
        cut0, cut1 = _cut(cutoff, (i0,)), _cut(cutoff, (i1,))
        y1u = b.unit(f"{name}.u0", x, c, c, gamma0=1.0 if cut0 else g0)
        y1 = y1u if cut0 else b.add(f"{name}.skip0", y1u, x)
        y2u = b.unit(f"{name}.u1", y1, c, c, gamma0=1.0 if cut1 else g0)
        return y2u if cut1 else b.add(f"{name}.skip1", y2u, y1)
    raise ConfigError(f"unknown block variant {variant!r}")


def _emit_tail(b: _Builder, variant: str, c: int, r: int, x: str) -> str:
    # the image-producing conv gets a small init so the untrained output
    # starts near zero instead of several image ranges away
    if variant == "lightweight":
        conv = b.fp_conv("tail.conv", x, c, 3 * r * r, init_scale=0.1)
        return b.g.add("PixelShuffle", "tail.shuffle", [conv], r=r)
    # original and repeat-shortcut both expand C -> C*r*r with one binarized unit
    if variant == "repeat-shortcut":
        y = b.unit("tail.up", x, c, c * r * r, gamma0=RESIDUAL_GAMMA0)
        rep = b.g.add("Repeat", "tail.repeat", [x], k=r * r)
        y = b.add("tail.skip", y, rep)
    else:
        y = b.unit("tail.up", x, c, c * r * r)
    ps = b.g.add("PixelShuffle", "tail.shuffle", [y], r=r)
    return b.fp_conv("tail.out", ps, c, 3, init_scale=0.1)


def build_block(variant: str, channels: int, quantizer: str = "ste-clip",
                seed: int = 0) -> LayerGraph:
    """Standalone single residual block wrapped in Input/Output, for analysis."""
    if variant not in BLOCK_VARIANTS:
        raise ConfigError(f"block must be one of {BLOCK_VARIANTS}, got {variant!r}")
    g = LayerGraph()
    b = _Builder(g, np.random.default_rng(seed), quantizer,
                 full_precision=False, with_bn=True)
    x = g.add("Input", "input", channels=channels)
    out = _emit_block(b, "block0", variant, channels, x, 0, None)
    g.add("Output", "output", [out])
    g.validate()
    return g


def build_tail(variant: str, channels: int, scale: int,
               quantizer: str = "ste-clip", seed: int = 0) -> LayerGraph:
    """Standalone upsampling tail wrapped in Input/Output."""
    if variant not in TAIL_VARIANTS:
        raise ConfigError(f"tail must be one of {TAIL_VARIANTS}, got {variant!r}")
    if scale not in SCALES:
        raise ConfigError(f"scale must be one of {SCALES}, got {scale!r}")
    g = LayerGraph()
    b = _Builder(g, np.random.default_rng(seed), quantizer,
                 full_precision=False, with_bn=True)
    x = g.add("Input", "input", channels=channels)
    out = _emit_tail(b, variant, channels, scale, x)
    g.add("Output", "output", [out])
    g.validate()
    return g


def build_network(cfg: NetworkConfig) -> LayerGraph:
    cfg.validate()
    g = LayerGraph()
    b = _Builder(g, np.random.default_rng(cfg.seed), cfg.quantizer,
                 full_precision=cfg.full_precision,
                 with_bn=cfg.backbone == "srresnet-like")
    c = cfg.channels
    x = g.add("Input", "input", channels=3)
    head = b.fp_conv("head.conv", x, 3, c)

    cur = head
    for i in range(cfg.num_blocks):
        cur = _emit_block(b, f"block{i}", cfg.block, c, cur, 2 * i, cfg.cutoff)

    if cfg.global_skip:
        cur = b.add("skip.add", cur, head)

    tail = "original" if cfg.cutoff == "tail" else cfg.tail
    out = _emit_tail(b, tail, c, cfg.scale, cur)
    g.add("Output", "output", [out])
    g.validate()
    return g


def param_count(g: LayerGraph) -> int:
    return sum(t.data.size for _, t in g.parameters())
