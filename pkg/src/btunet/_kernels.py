"""Numba-jitted inner loops for the depthwise convolution hot path.

Plain nested loops, no fastmath and no threading, so results are
bit-reproducible for identical inputs. Signatures are specialized per
dtype (float32 for training, float64 for gradient checks) and cached on
disk after the first compile.
"""

from __future__ import annotations

import numba
import numpy as np

_JIT = dict(cache=True, fastmath=False, parallel=False, nogil=True)


@numba.njit(**_JIT)
def depthwise_forward(xp: np.ndarray, w: np.ndarray, out: np.ndarray) -> None:
    n, h, wd, c = out.shape
    kh, kw = w.shape[0], w.shape[1]
    for b in range(n):
        for i in range(h):
            for j in range(wd):
                for ki in range(kh):
                    for kj in range(kw):
                        for ch in range(c):
                            out[b, i, j, ch] += xp[b, i + ki, j + kj, ch] * w[ki, kj, ch]


@numba.njit(**_JIT)
def depthwise_grad_input(g: np.ndarray, w: np.ndarray, gxp: np.ndarray) -> None:
    n, h, wd, c = g.shape
    kh, kw = w.shape[0], w.shape[1]
    for b in range(n):
        for i in range(h):
            for j in range(wd):
                for ki in range(kh):
                    for kj in range(kw):
                        for ch in range(c):
                            gxp[b, i + ki, j + kj, ch] += g[b, i, j, ch] * w[ki, kj, ch]


@numba.njit(**_JIT)
def depthwise_grad_weight(xp: np.ndarray, g: np.ndarray, gw: np.ndarray) -> None:
    n, h, wd, c = g.shape
    kh, kw = gw.shape[0], gw.shape[1]
    for b in range(n):
        for i in range(h):
            for j in range(wd):
                for ki in range(kh):
                    for kj in range(kw):
                        for ch in range(c):
                            gw[ki, kj, ch] += xp[b, i + ki, j + kj, ch] * g[b, i, j, ch]
