"""Numba-jitted XNOR-popcount kernels for the binary conv fast path.

Importing this module compiles nothing; compilation happens on first call
(results are cached on disk). `binary.py` falls back to a pure-numpy
reference when this import fails or BSL_NO_FAST is set.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)


@njit(cache=True, inline="always")
def _popcount(v: np.uint64) -> np.uint64:
    v = v - ((v >> np.uint64(1)) & _M1)
    v = (v & _M2) + ((v >> np.uint64(2)) & _M2)
    v = (v + (v >> np.uint64(4))) & _M4
    return (v * _H01) >> np.uint64(56)


@njit(cache=True)
def pack_windows(
    xp: np.ndarray,  # (N, words_per_sample) uint64, channel-last bit order
    n: int,
    c: int,
    h: int,
    w: int,
    k: int,
    stride: int,
    rep: int,
    m: int,  # bits per window = k*k*c
    wpw: int,  # words per window (rep == 1) or 1 (rep > 1)
    out: np.ndarray,  # zeroed uint64 buffer sized by the caller
) -> None:
    """Gather conv windows into packed rows; rep > 1 packs rep windows per word."""
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    one = np.uint64(1)
    for ni in range(n):
        for oy in range(ho):
            for ox in range(wo):
                p = (ni * ho + oy) * wo + ox
                if rep == 1:
                    base = p * wpw
                    q = 0
                else:
                    base = p // rep
                    q = (p % rep) * m
                for dy in range(k):
                    src = ((oy * stride + dy) * w + ox * stride) * c
                    rem = k * c  # k adjacent pixels, c bits each, one contiguous run
                    while rem > 0:
                        so = src & 63
                        qo = q & 63
                        take = 64 - (so if so > qo else qo)
                        if take > rem:
                            take = rem
                        bits = (xp[ni, src >> 6] >> np.uint64(so)) & (
                            (one << np.uint64(take)) - one
                        )
                        out[base + (q >> 6)] |= bits << np.uint64(qo)
                        src += take
                        q += take
                        rem -= take


@njit(cache=True)
def xnor_gemm(
    win: np.ndarray,  # (P, wpw) uint64 packed windows
    wk: np.ndarray,  # (O, wpw) uint64 packed kernels, same bit order
    m: int,  # logical bits per row; padding bits are zero on both sides
    out: np.ndarray,  # (P, O) int32
) -> None:
    """out[p, o] = sum of elementwise products of two {-1,+1} rows = m - 2*mismatches."""
    p_n, wpw = win.shape
    o_n = wk.shape[0]
    for p in range(p_n):
        for o in range(o_n):
            acc = np.uint64(0)
            for wd in range(wpw):
                acc += _popcount(win[p, wd] ^ wk[o, wd])
            out[p, o] = m - 2 * np.int32(acc)


@njit(cache=True)
def xnor_gemm_replicated(
    win: np.ndarray,  # (n_words,) uint64, rep windows per word
    wk: np.ndarray,  # (O,) uint64, kernel replicated rep times per word
    m: int,
    rep: int,
    out: np.ndarray,  # (P, O) int32
) -> None:
    """Replicated-kernel variant: one XNOR evaluates rep adjacent windows."""
    p_n = out.shape[0]
    o_n = wk.shape[0]
    mask = (np.uint64(1) << np.uint64(m)) - np.uint64(1)
    for wi in range(win.shape[0]):
        hi = min(rep, p_n - wi * rep)
        for o in range(o_n):
            x = win[wi] ^ wk[o]
            for r in range(hi):
                cnt = _popcount((x >> np.uint64(r * m)) & mask)
                out[wi * rep + r, o] = m - 2 * np.int32(cnt)
