# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled XNOR-popcount convolution kernel.

Operates on channel-packed bit planes: each 64-bit word holds up to 64
channel lanes (LSB-first), the validity mask zeroes padding pixels and
unused tail lanes. Per output element the signed dot product over valid
lanes is n_valid - 2 * popcount((x XOR w) AND mask).
"""

import numpy as np

cdef extern from *:
    """
    #include <stddef.h>
    #include <stdint.h>

    #if defined(__GNUC__) || defined(__clang__)
    #  define POPCNT64(v) __builtin_popcountll(v)
    #else
    static int POPCNT64(uint64_t v) {
        v = v - ((v >> 1) & 0x5555555555555555ULL);
        v = (v & 0x3333333333333333ULL) + ((v >> 2) & 0x3333333333333333ULL);
        v = (v + (v >> 4)) & 0x0f0f0f0f0f0f0f0fULL;
        return (int)((v * 0x0101010101010101ULL) >> 56);
    }
    #endif

    /* x: (N, Hp, Wp, Wc) packed words, m: (Hp, Wp, Wc) validity mask,
       w: (Cout, kh, kw, Wc), dots out: (N, Ho, Wo, Cout) int32.
       The window is gathered into stack buffers once per output pixel so
       the inner channel loop runs xor/and/popcount on registers. */
    static void xnor_dots(const uint64_t* restrict xb, const uint64_t* restrict mb,
                          const uint64_t* restrict wb, int32_t* restrict dots,
                          ptrdiff_t N, ptrdiff_t Hp, ptrdiff_t Wp, ptrdiff_t Wc,
                          ptrdiff_t Ho, ptrdiff_t Wo, ptrdiff_t Cout,
                          ptrdiff_t kh, ptrdiff_t kw, ptrdiff_t stride)
    {
        ptrdiff_t T = kh * kw * Wc;
        for (ptrdiff_t n = 0; n < N; n++) {
            const uint64_t* xn = xb + n * Hp * Wp * Wc;
            int32_t* dn = dots + n * Ho * Wo * Cout;
            for (ptrdiff_t ho = 0; ho < Ho; ho++) {
                for (ptrdiff_t wo = 0; wo < Wo; wo++) {
                    uint64_t xwin[1024], mwin[1024];
                    int32_t nv = 0;
                    ptrdiff_t t = 0;
                    for (ptrdiff_t i = 0; i < kh; i++) {
                        const uint64_t* xr = xn + ((ho*stride + i) * Wp + wo*stride) * Wc;
                        const uint64_t* mr = mb + ((ho*stride + i) * Wp + wo*stride) * Wc;
                        for (ptrdiff_t j = 0; j < kw; j++)
                            for (ptrdiff_t c = 0; c < Wc; c++, t++) {
                                xwin[t] = xr[j * Wc + c];
                                mwin[t] = mr[j * Wc + c];
                                nv += POPCNT64(mwin[t]);
                            }
                    }
                    int32_t* drow = dn + (ho * Wo + wo) * Cout;
                    for (ptrdiff_t co = 0; co < Cout; co++) {
                        const uint64_t* wv = wb + co * T;
                        int32_t acc = 0;
                        for (ptrdiff_t u = 0; u < T; u++)
                            acc += POPCNT64((xwin[u] ^ wv[u]) & mwin[u]);
                        drow[co] = nv - 2 * acc;
                    }
                }
            }
        }
    }
    """
    void xnor_dots(const unsigned long long* xb, const unsigned long long* mb,
                   const unsigned long long* wb, int* dots,
                   ptrdiff_t N, ptrdiff_t Hp, ptrdiff_t Wp, ptrdiff_t Wc,
                   ptrdiff_t Ho, ptrdiff_t Wo, ptrdiff_t Cout,
                   ptrdiff_t kh, ptrdiff_t kw, ptrdiff_t stride) nogil


def xnor_conv_dots(const unsigned long long[:, :, :, ::1] words,
                   const unsigned long long[:, :, ::1] mask,
                   const unsigned long long[:, :, :, ::1] wwords,
                   int stride):
    """Integer dot products for every (batch, position, output channel)."""
    cdef ptrdiff_t n = words.shape[0]
    cdef ptrdiff_t hp = words.shape[1]
    cdef ptrdiff_t wp = words.shape[2]
    cdef ptrdiff_t wc = words.shape[3]
    cdef ptrdiff_t cout = wwords.shape[0]
    cdef ptrdiff_t kh = wwords.shape[1]
    cdef ptrdiff_t kw = wwords.shape[2]
    if wwords.shape[3] != wc:
        raise ValueError("packed channel word count mismatch")
    if mask.shape[0] != hp or mask.shape[1] != wp or mask.shape[2] != wc:
        raise ValueError("mask geometry mismatch")
    if kh * kw * wc > 1024:
        raise ValueError("window too large for the packed kernel")
    cdef ptrdiff_t ho = (hp - kh) // stride + 1
    cdef ptrdiff_t wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("empty output")
    dots = np.empty((n, ho, wo, cout), dtype=np.int32)
    cdef int[:, :, :, ::1] dv = dots
    with nogil:
        xnor_dots(&words[0, 0, 0, 0], &mask[0, 0, 0], &wwords[0, 0, 0, 0],
                  &dv[0, 0, 0, 0], n, hp, wp, wc, ho, wo, cout, kh, kw, stride)
    return dots
