"""Image I/O, bicubic rescaling, luma conversion, PSNR/SSIM, datasets.

Conventions pinned here so numbers are comparable across runs:

    * bicubic uses the Keys kernel with a = -0.5, clamped edge coordinates,
      and no antialias prefilter when downscaling
    * metrics run on the BT.601 studio-range Y plane,
      Y = 16 + (65.481 R + 128.553 G + 24.966 B) / 255, peak 255
    * PSNR/SSIM crop a border of `crop` pixels first (callers pass the
      upscaling factor)
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image, UnidentifiedImageError

from .errors import DataError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


class ImageU8:
    """8-bit RGB raster, stored as a (h, w, 3) uint8 array."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
            raise DataError(
                f"ImageU8 wants (h, w, 3) uint8, got {arr.shape} {arr.dtype}")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class ImagePair:
    hr: ImageU8
    lr: ImageU8
    scale: int
    name: str = ""

    def __post_init__(self):
        r = self.scale
        if self.hr.height % r or self.hr.width % r:
            raise DataError(
                f"pair {self.name!r}: HR {self.hr.width}x{self.hr.height} "
                f"not a multiple of scale {r}")
        if (self.lr.height, self.lr.width) != (self.hr.height // r,
                                               self.hr.width // r):
            raise DataError(
                f"pair {self.name!r}: LR {self.lr.width}x{self.lr.height} "
                f"does not match HR/{r}")


def load_png(path) -> ImageU8:
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            return ImageU8(np.asarray(rgb, dtype=np.uint8))
    except (OSError, UnidentifiedImageError, ValueError) as e:
        raise DataError(f"cannot load image {path}: {e}") from e


def save_png(img: ImageU8, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img.data, mode="RGB").save(path, format="PNG")


def float_to_u8(arr) -> np.ndarray:
    """Round a real-valued [0, 255] image to uint8 with saturation."""
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


# -- bicubic -----------------------------------------------------------------


def cubic_kernel(t):
    """Keys interpolation kernel, a = -0.5; zero outside |t| < 2."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = 1.5 * t3 - 2.5 * t2 + 1.0
    far = -0.5 * t3 + 2.5 * t2 - 4.0 * t + 2.0
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def _resize_axis(img: np.ndarray, n_dst: int, axis: int) -> np.ndarray:
    n_src = img.shape[axis]
    scale = n_src / n_dst
    centers = (np.arange(n_dst) + 0.5) * scale - 0.5
    base = np.floor(centers).astype(np.int64)
    moved = np.moveaxis(img, axis, 0)
    acc = np.zeros((n_dst,) + moved.shape[1:], np.float64)
    tail = (Ellipsis,) + (None,) * (moved.ndim - 1)
    for m in range(-1, 3):
        idx = np.clip(base + m, 0, n_src - 1)
        w = cubic_kernel(centers - (base + m))
        acc += moved[idx] * w[tail]
    return np.moveaxis(acc, 0, axis)


def bicubic_resize(img, out_w: int, out_h: int) -> np.ndarray:
    """Separable cubic resample of a (h, w) or (h, w, c) real image."""
    if out_w < 1 or out_h < 1:
        raise DataError(f"output size {out_w}x{out_h} must be at least 1x1")
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise DataError(f"bicubic_resize wants a 2-D or 3-D array, got {arr.ndim}-D")
    arr = _resize_axis(arr, out_h, axis=0)
    return _resize_axis(arr, out_w, axis=1)


# -- metrics -----------------------------------------------------------------


def rgb_to_y(img) -> np.ndarray:
    arr = img.data if isinstance(img, ImageU8) else np.asarray(img)
    arr = arr.astype(np.float64)
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    return 16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0


def _crop_pair(a, b, crop: int):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DataError(f"metric inputs must be matching 2-D planes, "
                        f"got {a.shape} vs {b.shape}")
    if crop > 0:
        if 2 * crop >= min(a.shape):
            raise DataError(f"crop {crop} leaves no pixels of {a.shape}")
        a = a[crop:-crop, crop:-crop]
        b = b[crop:-crop, crop:-crop]
    return a, b


def psnr(a, b, crop: int = 0) -> float:
    a, b = _crop_pair(a, b, crop)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def _gauss1d() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * SSIM_SIGMA ** 2))
    return k / k.sum()


def _filt2(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    # separable valid-mode correlation; window normalization keeps sums exact
    v = sliding_window_view(img, len(k), axis=0)
    img = np.tensordot(v, k, axes=([2], [0]))
    v = sliding_window_view(img, len(k), axis=1)
    return np.tensordot(v, k, axes=([2], [0]))


def ssim(a, b, crop: int = 0) -> float:
    a, b = _crop_pair(a, b, crop)
    if min(a.shape) < SSIM_WINDOW:
        raise DataError(f"image {a.shape} smaller than the "
                        f"{SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    k = _gauss1d()
    mu_a = _filt2(a, k)
    mu_b = _filt2(b, k)
    va = _filt2(a * a, k) - mu_a * mu_a
    vb = _filt2(b * b, k) - mu_b * mu_b
    cov = _filt2(a * b, k) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    """Per-image PSNR/SSIM rows plus their means."""

    rows: list = field(default_factory=list)  # (name, psnr, ssim)

    def add(self, name: str, p: float, s: float):
        self.rows.append((name, p, s))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows]))

    def to_csv(self) -> str:
        lines = ["image,psnr,ssim"]
        for name, p, s in self.rows:
            lines.append(f"{name},{p:.4f},{s:.6f}")
        lines.append(f"mean,{self.mean_psnr:.4f},{self.mean_ssim:.6f}")
        return "\n".join(lines) + "\n"


def compare_images(sr: ImageU8, hr: ImageU8, crop: int) -> tuple:
    ya, yb = rgb_to_y(sr), rgb_to_y(hr)
    return psnr(ya, yb, crop), ssim(ya, yb, crop)


# -- dataset assembly ---------------------------------------------------------


def center_crop_multiple(img: ImageU8, r: int) -> ImageU8:
    h, w = img.height, img.width
    nh, nw = h - h % r, w - w % r
    if nh == 0 or nw == 0:
        raise DataError(f"image {w}x{h} smaller than scale {r}")
    top, left = (h - nh) // 2, (w - nw) // 2
    return ImageU8(img.data[top:top + nh, left:left + nw])


def degrade(hr: ImageU8, r: int) -> ImageU8:
    lr = bicubic_resize(hr.data.astype(np.float64), hr.width // r, hr.height // r)
    return ImageU8(float_to_u8(lr))


def make_pairs(hr_dir, r: int) -> tuple[list[ImagePair], int]:
    """Build (HR, bicubic-LR) pairs from every PNG in a directory.

    Returns (pairs sorted by filename, skipped file count). Unreadable files
    are skipped with a warning instead of failing the whole dataset.
    """
    files = sorted(p for p in Path(hr_dir).iterdir()
                   if p.is_file() and p.suffix.lower() == ".png")
    pairs, skipped = [], 0
    for p in files:
        try:
            hr = center_crop_multiple(load_png(p), r)
            pairs.append(ImagePair(hr, degrade(hr, r), r, name=p.stem))
        except DataError as e:
            skipped += 1
            warnings.warn(f"skipping {p.name}: {e}")
    if not pairs:
        warnings.warn(f"no usable PNG files in {hr_dir}")
    return pairs, skipped


def write_manifest(path, rows):
    """rows: iterable of (hr_path, lr_path)."""
    with open(path, "w") as f:
        for hr_path, lr_path in rows:
            f.write(f"{hr_path}\t{lr_path}\n")


def load_manifest(path, r: int) -> list[ImagePair]:
    pairs = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"manifest {path} line {i + 1}: want 'hr<TAB>lr'")
        hr, lr = load_png(parts[0]), load_png(parts[1])
        pairs.append(ImagePair(hr, lr, r, name=Path(parts[0]).stem))
    if not pairs:
        raise DataError(f"manifest {path} lists no pairs")
    return pairs


def sample_patch(pair: ImagePair, lr_patch: int, rng) -> tuple:
    """Aligned random (lr tile, hr tile); hr tile is r*lr_patch square."""
    r = pair.scale
    hl, wl = pair.lr.height, pair.lr.width
    if lr_patch > hl or lr_patch > wl:
        raise DataError(
            f"patch {lr_patch} exceeds LR size {wl}x{hl} of {pair.name!r}")
    i = int(rng.integers(0, hl - lr_patch + 1))
    j = int(rng.integers(0, wl - lr_patch + 1))
    lr = pair.lr.data[i:i + lr_patch, j:j + lr_patch].copy()
    hr = pair.hr.data[r * i:r * (i + lr_patch), r * j:r * (j + lr_patch)].copy()
    return lr, hr
