"""Synthetic textured test images for desk-scale runs.

Content is built from piecewise-flat regions, oriented fine gratings and a
small checker: structure a x2 bicubic downsample blurs but does not erase, so
a small model can beat plain interpolation and metric trends have signal.
"""

import numpy as np

from binsr import imaging as im


def textured(h, w, seed):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = 15.0 * (xx / w - 0.5) + 10.0 * (yy / h - 0.5)
    for _ in range(int(rng.integers(3, 7))):
        x0, x1 = np.sort(rng.integers(0, w, size=2))
        y0, y1 = np.sort(rng.integers(0, h, size=2))
        if x1 - x0 < 4 or y1 - y0 < 4:
            continue
        base[y0:y1, x0:x1] += rng.uniform(-35, 35)
    for _ in range(3):
        period = rng.uniform(3.0, 8.0)  # survives x2 bicubic only partially
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(15, 30)
        u = np.cos(theta) * xx + np.sin(theta) * yy
        base += amp * np.sin(2 * np.pi * u / period + phase)
    tile = int(rng.integers(2, 5))
    base += ((xx // tile + yy // tile) % 2) * rng.uniform(12, 25)
    chans = []
    for _ in range(3):
        shift = rng.uniform(-15, 15)
        gain = rng.uniform(0.85, 1.15)
        chans.append(128.0 + gain * (base - base.mean()) + shift)
    return im.float_to_u8(np.stack(chans, axis=-1))


def write_corpus(dir_path, n, h, w, seed0=0):
    dir_path.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        im.save_png(im.ImageU8(textured(h, w, seed0 + i)),
                    dir_path / f"img{i:03d}.png")
