"""Independent reference implementations used as test oracles.

Everything here is written the slow, obvious way (explicit loops, float64
accumulation) and deliberately shares no code with the package.
"""

import math

import numpy as np


def conv_loop(x, w, bias=None, stride=1, pad=0):
    """Direct 6-nested-loop convolution, float64 accumulation."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wid + 2 * pad - kw) // stride + 1
    xp = np.zeros((n, cin, h + 2 * pad, wid + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wid] = x
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ci, i * stride + u, j * stride + v] * w[co, ci, u, v]
                    if bias is not None:
                        acc += float(bias[co])
                    out[b, co, i, j] = acc
    return out


def pixel_shuffle_loop(x, r):
    """out[n, c, r*h+i, r*w+j] = x[n, c*r*r + i*r + j, h, w] via loops."""
    x = np.asarray(x)
    n, crr, h, w = x.shape
    c = crr // (r * r)
    out = np.zeros((n, c, h * r, w * r), dtype=x.dtype)
    for b in range(n):
        for cc in range(c):
            for i in range(r):
                for j in range(r):
                    for hh in range(h):
                        for ww in range(w):
                            out[b, cc, r * hh + i, r * ww + j] = x[b, cc * r * r + i * r + j, hh, ww]
    return out


def fd_grad(f, x, h=1e-3):
    """Central finite differences of a scalar function over array x."""
    x = np.asarray(x, dtype=np.float32)
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a, b, floor=1e-4):
    """Max elementwise relative error with an absolute floor for tiny values."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


# -- image metrics ----------------------------------------------------------


def psnr_ref(a, b, crop=0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if crop:
        a = a[crop:-crop, crop:-crop]
        b = b[crop:-crop, crop:-crop]
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def _gauss_window(size=11, sigma=1.5):
    half = size // 2
    w = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            w[i, j] = math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma * sigma))
    return w / w.sum()


def ssim_ref(a, b, crop=0, size=11, sigma=1.5):
    """Straightforward SSIM: loop over valid window positions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if crop:
        a = a[crop:-crop, crop:-crop]
        b = b[crop:-crop, crop:-crop]
    win = _gauss_window(size, sigma)
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    h, w = a.shape
    vals = []
    for i in range(h - size + 1):
        for j in range(w - size + 1):
            pa = a[i:i + size, j:j + size]
            pb = b[i:i + size, j:j + size]
            mu_a = (win * pa).sum()
            mu_b = (win * pb).sum()
            var_a = (win * pa * pa).sum() - mu_a ** 2
            var_b = (win * pb * pb).sum() - mu_b ** 2
            cov = (win * pa * pb).sum() - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                        ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(np.mean(vals))


# -- bicubic ----------------------------------------------------------------


def cubic_kernel(t, a=-0.5):
    t = abs(float(t))
    if t <= 1.0:
        return (a + 2.0) * t ** 3 - (a + 3.0) * t ** 2 + 1.0
    if t < 2.0:
        return a * t ** 3 - 5.0 * a * t ** 2 + 8.0 * a * t - 4.0 * a
    return 0.0


def bicubic_axis_ref(src, out_len, axis_len):
    """1-D cubic kernel sum along a vector with clamped coordinates."""
    scale = axis_len / out_len
    out = np.zeros(out_len)
    for d in range(out_len):
        center = (d + 0.5) * scale - 0.5
        base = math.floor(center)
        acc = 0.0
        for m in range(-1, 3):
            idx = min(max(base + m, 0), axis_len - 1)
            acc += src[idx] * cubic_kernel(center - (base + m))
        out[d] = acc
    return out


def bicubic_ref(img, out_h, out_w):
    """Separable kernel-sum bicubic resize (rows then columns), float64."""
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    tmp = np.zeros((h, out_w, c))
    for ch in range(c):
        for row in range(h):
            tmp[row, :, ch] = bicubic_axis_ref(img[row, :, ch], out_w, w)
    out = np.zeros((out_h, out_w, c))
    for ch in range(c):
        for col in range(out_w):
            out[:, col, ch] = bicubic_axis_ref(tmp[:, col, ch], out_h, h)
    return out[:, :, 0] if squeeze else out
