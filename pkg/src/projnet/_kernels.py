"""Fused inner loops for the solver's bandwidth-bound updates.

The dot-product nodes dominate training cost: their operand arrays replicate
weights per sample, so every avoided pass over them matters.  These kernels
fuse the rescaling step of the dot projection with the solver's state
arithmetic (plain write, reflection, or the averaged Douglas-Rachford
combine) into single passes.  The scalar root solve stays in numpy where the
arrays are small.

All kernels expect C-contiguous float64 arrays, operands flattened to
(instances, width) and the rescaling parameter flattened to (instances,).
"""

from __future__ import annotations

import numba as nb
import numpy as np


@nb.njit(parallel=True, cache=True)
def dot_pq(x, y):
    """Per-instance <x, y> and |x|^2 + |y|^2 in one pass."""
    m, n = x.shape
    p = np.empty(m, dtype=np.float64)
    q = np.empty(m, dtype=np.float64)
    for i in nb.prange(m):
        pp = 0.0
        qq = 0.0
        for j in range(n):
            a = x[i, j]
            b = y[i, j]
            pp += a * b
            qq += a * a + b * b
        p[i] = pp
        q[i] = qq
    return p, q


@nb.njit(parallel=True, cache=True)
def dot_write_assign(dx, dy, sx, sy, lam):
    """dx, dy <- rescaled projection of (sx, sy). Safe when d aliases s."""
    m, n = sx.shape
    for i in nb.prange(m):
        l = lam[i]
        c = 1.0 / (1.0 - l * l)
        for j in range(n):
            a = sx[i, j]
            b = sy[i, j]
            dx[i, j] = (a + l * b) * c
            dy[i, j] = (b + l * a) * c


@nb.njit(parallel=True, cache=True)
def dot_write_reflect(dx, dy, sx, sy, lam):
    """dx, dy <- 2 * projection - s (the reflection through the dot graph)."""
    m, n = sx.shape
    for i in nb.prange(m):
        l = lam[i]
        c = 2.0 / (1.0 - l * l)
        for j in range(n):
            a = sx[i, j]
            b = sy[i, j]
            dx[i, j] = (a + l * b) * c - a
            dy[i, j] = (b + l * a) * c - b
    return dx


@nb.njit(parallel=True, cache=True)
def dot_write_combine(zx, zy, sx, sy, lam):
    """z <- z/2 + projection(s) - s/2: the averaged reflection update."""
    m, n = sx.shape
    for i in nb.prange(m):
        l = lam[i]
        c = 1.0 / (1.0 - l * l)
        for j in range(n):
            a = sx[i, j]
            b = sy[i, j]
            zx[i, j] = 0.5 * zx[i, j] + (a + l * b) * c - 0.5 * a
            zy[i, j] = 0.5 * zy[i, j] + (b + l * a) * c - 0.5 * b


@nb.njit(parallel=True, cache=True)
def reflect_flat(dst, val, src):
    """dst <- 2 * val - src over flat same-size arrays."""
    for i in nb.prange(dst.size):
        dst[i] = 2.0 * val[i] - src[i]


@nb.njit(parallel=True, cache=True)
def combine_flat(z, val, w):
    """z <- z/2 + val - w/2 over flat same-size arrays."""
    for i in nb.prange(z.size):
        z[i] = 0.5 * z[i] + val[i] - 0.5 * w[i]
