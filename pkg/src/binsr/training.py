"""Optimization loop, LR schedule, checkpointing, and evaluation.

Determinism contract: a run is fully specified by (configs, dataset).
Every iteration draws from a fresh generator seeded with
(seed, epoch, iter), so resuming from a checkpoint replays the exact
sample sequence a straight-through run would have seen.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import imaging as im
from . import tensor as T
from .errors import ConfigError, DataError, NumericError
from .graph import LayerGraph
from .models import NetworkConfig, build_network

CKPT_MAGIC = b"E2FC"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 300
    iters_per_epoch: int = 100
    batch: int = 16
    lr0: float = 2e-4
    halve_every: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    patch: int = 24

    def validate(self) -> "TrainConfig":
        for name in ("epochs", "iters_per_epoch", "batch", "halve_every", "patch"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive int, got {v!r}")
        for name in ("lr0", "beta1", "beta2", "eps"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v > 0):
                raise ConfigError(f"{name} must be positive, got {v!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"seed must be an int, got {self.seed!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * 0.5 ** (epoch // cfg.halve_every)


# -- Adam ----------------------------------------------------------------------


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    __slots__ = ("m", "v", "t")

    def __init__(self, params):
        self.m = [np.zeros_like(p.data) for _, p in params]
        self.v = [np.zeros_like(p.data) for _, p in params]
        self.t = 0


def adam_step(params, state: AdamState, lr: float, cfg: TrainConfig):
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, (name, p) in enumerate(params):
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + cfg.eps)


# -- batches and image/tensor glue ----------------------------------------------


def img_to_tensor(img: im.ImageU8) -> T.Tensor:
    arr = img.data.astype(np.float32).transpose(2, 0, 1) / np.float32(255.0)
    return T.Tensor(arr[None])


def tensor_to_img(t: T.Tensor) -> im.ImageU8:
    arr = t.data[0].transpose(1, 2, 0) * 255.0
    return im.ImageU8(im.float_to_u8(arr))


def make_batch(pairs, patch: int, batch: int, rng) -> tuple:
    xs, ys = [], []
    for _ in range(batch):
        k = int(rng.integers(0, len(pairs)))
        lr_tile, hr_tile = im.sample_patch(pairs[k], patch, rng)
        xs.append(lr_tile.astype(np.float32).transpose(2, 0, 1))
        ys.append(hr_tile.astype(np.float32).transpose(2, 0, 1))
    x = np.stack(xs) / np.float32(255.0)
    y = np.stack(ys) / np.float32(255.0)
    return T.Tensor(x), T.Tensor(y)


# -- checkpoints ------------------------------------------------------------------


@dataclass
class Checkpoint:
    net: NetworkConfig
    train: TrainConfig
    epoch: int
    step: int
    tensors: dict            # name -> float32 ndarray
    stats: dict              # name -> (mean, var, initialized)
    adam_t: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)


def _canon(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, net_cfg: NetworkConfig, train_cfg: TrainConfig,
                    g: LayerGraph, adam: AdamState, epoch: int, step: int):
    params = g.parameters()
    stats = g.running_stats()
    header = {
        "network": net_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "epoch": epoch,
        "step": step,
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in params],
        "stats": [{"name": n, "c": int(s.mean.size), "initialized": s.initialized}
                  for n, s in stats],
        "adam_t": adam.t,
    }
    blobs = [p.data for _, p in params]
    for _, s in stats:
        blobs.extend([s.mean, s.var])
    blobs.extend(adam.m)
    blobs.extend(adam.v)
    hdr = _canon(header)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(hdr)))
        f.write(hdr)
        for b in blobs:
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 16 or raw[:4] != CKPT_MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen])
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: corrupt checkpoint header: {e}") from e
    off = 16 + hlen

    def take(count) -> np.ndarray:
        nonlocal off
        nbytes = 4 * int(count)
        if off + nbytes > len(raw):
            raise DataError(f"{path}: checkpoint payload truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=int(count), offset=off)
        off += nbytes
        return arr.astype(np.float32)

    tensors = {}
    for ent in header["tensors"]:
        shape = tuple(ent["shape"])
        tensors[ent["name"]] = take(np.prod(shape)).reshape(shape)
    stats = {}
    for ent in header["stats"]:
        c = ent["c"]
        stats[ent["name"]] = (take(c), take(c), ent["initialized"])
    adam_m = {ent["name"]: take(np.prod(tuple(ent["shape"]))).reshape(ent["shape"])
              for ent in header["tensors"]}
    adam_v = {ent["name"]: take(np.prod(tuple(ent["shape"]))).reshape(ent["shape"])
              for ent in header["tensors"]}
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes in checkpoint")
    return Checkpoint(
        net=NetworkConfig.from_dict(header["network"]),
        train=TrainConfig.from_dict(header["train"]),
        epoch=header["epoch"], step=header["step"],
        tensors=tensors, stats=stats,
        adam_t=header["adam_t"], adam_m=adam_m, adam_v=adam_v)


def restore_network(ckpt: Checkpoint) -> LayerGraph:
    g = build_network(ckpt.net)
    params = dict(g.parameters())
    if set(params) != set(ckpt.tensors):
        raise DataError("checkpoint tensor names do not match the network config")
    for name, arr in ckpt.tensors.items():
        if params[name].shape != arr.shape:
            raise DataError(f"checkpoint tensor {name} has shape {arr.shape}, "
                            f"network wants {params[name].shape}")
        params[name].data[...] = arr
    stats = dict(g.running_stats())
    if set(stats) != set(ckpt.stats):
        raise DataError("checkpoint BN stats do not match the network config")
    for name, (mean, var, initialized) in ckpt.stats.items():
        stats[name].mean[...] = mean
        stats[name].var[...] = var
        stats[name].initialized = initialized
    return g


def restore_adam(ckpt: Checkpoint, g: LayerGraph) -> AdamState:
    params = g.parameters()
    state = AdamState(params)
    state.t = ckpt.adam_t
    for k, (name, _) in enumerate(params):
        state.m[k][...] = ckpt.adam_m[name]
        state.v[k][...] = ckpt.adam_v[name]
    return state


# -- training loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    graph: LayerGraph
    adam: AdamState
    log: list
    last_epoch: int


def _validate(g: LayerGraph, val_pairs, scale: int) -> tuple:
    # dense float path on purpose: keeps validation independent of the
    # packed kernel so model changes and kernel changes never conflate
    ps, ss = [], []
    for pair in val_pairs:
        sr = tensor_to_img(g.forward(img_to_tensor(pair.lr), mode="eval-dense"))
        p, s = im.compare_images(sr, pair.hr, crop=scale)
        ps.append(p)
        ss.append(s)
    return float(np.mean(ps)), float(np.mean(ss))


def train(net_cfg: NetworkConfig, train_cfg: TrainConfig, pairs,
          out_dir=None, val_pairs=None, resume=None, echo=None) -> TrainResult:
    net_cfg.validate()
    train_cfg.validate()
    if not pairs:
        raise DataError("training dataset is empty")
    for p in pairs:
        if p.scale != net_cfg.scale:
            raise ConfigError(f"dataset pair {p.name!r} has scale {p.scale}, "
                              f"network wants {net_cfg.scale}")

    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.net != net_cfg or ckpt.train != train_cfg:
            raise ConfigError("resume checkpoint was produced by different configs")
        g = restore_network(ckpt)
        adam = restore_adam(ckpt, g)
        start_epoch, step = ckpt.epoch + 1, ckpt.step
    else:
        g = build_network(net_cfg)
        adam = AdamState(g.parameters())
        start_epoch, step = 0, 0

    params = g.parameters()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log: list[str] = []

    def emit(line: str):
        log.append(line)
        if echo is not None:
            echo(line)

    for epoch in range(start_epoch, train_cfg.epochs):
        lr = lr_at(epoch, train_cfg)
        for it in range(train_cfg.iters_per_epoch):
            rng = np.random.default_rng([train_cfg.seed, epoch, it])
            x, y = make_batch(pairs, train_cfg.patch, train_cfg.batch, rng)
            for _, p in params:
                p.grad = None
            with T.Tape() as tape:
                pred = g.forward(x, mode="train")
                loss = T.l1_loss(pred, y)
            lv = loss.item()
            if not math.isfinite(lv):
                # stop before touching the weights; the newest checkpoint on
                # disk stays the last good state
                raise NumericError(f"non-finite loss at epoch {epoch} iter {it}")
            tape.backward(loss)
            adam_step(params, adam, lr, train_cfg)
            step += 1
            line = f"{epoch} {it} {lr:.8g} {lv:.8g}"
            if it == train_cfg.iters_per_epoch - 1 and val_pairs:
                vp, vs = _validate(g, val_pairs, net_cfg.scale)
                line += f" {vp:.6f} {vs:.6f}"
            emit(line)
        if out is not None:
            save_checkpoint(out / f"epoch{epoch:04d}.ckpt", net_cfg, train_cfg,
                            g, adam, epoch, step)
            save_checkpoint(out / "last.ckpt", net_cfg, train_cfg, g, adam,
                            epoch, step)
    return TrainResult(g, adam, log, train_cfg.epochs - 1)


# -- evaluation ----------------------------------------------------------------------


def evaluate(g: LayerGraph, net_cfg: NetworkConfig, pairs,
             mode: str = "eval") -> tuple:
    """Metrics for the model and the bicubic baseline on the same pairs."""
    if not pairs:
        raise DataError("evaluation dataset is empty")
    r = net_cfg.scale
    for p in pairs:
        if p.scale != r:
            raise ConfigError(f"pair {p.name!r} has scale {p.scale}, "
                              f"checkpoint wants {r}")
    model = im.MetricsReport()
    baseline = im.MetricsReport()
    for pair in pairs:
        sr = tensor_to_img(g.forward(img_to_tensor(pair.lr), mode=mode))
        p, s = im.compare_images(sr, pair.hr, crop=r)
        model.add(pair.name, p, s)
        up = im.bicubic_resize(pair.lr.data.astype(np.float64),
                               pair.hr.width, pair.hr.height)
        bp, bs = im.compare_images(im.ImageU8(im.float_to_u8(up)), pair.hr, crop=r)
        baseline.add(pair.name, bp, bs)
    return model, baseline
