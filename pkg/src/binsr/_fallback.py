"""Pure-numpy stand-in for the compiled packed-convolution kernel.

Same contract as ``binsr._native``; used when the extension is unavailable
or when BINSR_FORCE_FALLBACK=1. Much slower than the compiled kernel (it
materializes window views per output channel) but bit-identical.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def xnor_conv_dots(words: np.ndarray, mask: np.ndarray, wwords: np.ndarray,
                   stride: int) -> np.ndarray:
    """Integer dots: words (N,Hp,Wp,Wc) u64, mask (Hp,Wp,Wc), w (Cout,kh,kw,Wc)."""
    n, hp, wp, wc = words.shape
    cout, kh, kw, wc_w = wwords.shape
    if wc_w != wc:
        raise ValueError("packed channel word count mismatch")
    if mask.shape != (hp, wp, wc):
        raise ValueError("mask geometry mismatch")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("empty output")

    xv = sliding_window_view(words, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    mv = sliding_window_view(mask, (kh, kw), axis=(0, 1))[::stride, ::stride]
    # xv: (N,Ho,Wo,Wc,kh,kw), mv: (Ho,Wo,Wc,kh,kw)
    n_valid = np.bitwise_count(mv).sum(axis=(2, 3, 4), dtype=np.int32)
    dots = np.empty((n, ho, wo, cout), dtype=np.int32)
    for co in range(cout):
        w_co = wwords[co].transpose(2, 0, 1)  # (Wc,kh,kw)
        mism = np.bitwise_count((xv ^ w_co) & mv).sum(axis=(3, 4, 5), dtype=np.int32)
        dots[..., co] = n_valid - 2 * mism
    return dots
