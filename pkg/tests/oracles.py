"""Brute-force oracles the projection operators are checked against.

Each oracle minimizes the squared distance to a constraint set by searching
a parametrization of the set directly, never reusing the closed forms or
root solves under test.  One-dimensional manifolds get a literal dense grid
over [-10, 10] with step 1e-3; higher-dimensional parametrizations use the
same window searched coarse-to-fine down to the 1e-3 resolution.  The dot
oracle grids only the second operand and minimizes over the first operand
exactly (a linear least-squares step), which keeps the search exhaustive
without touching the implementation's rescaling formulas.
"""

from __future__ import annotations

import numpy as np

WINDOW = 10.0
STEP = 1e-3


def _dense_axis(center: float = 0.0) -> np.ndarray:
    n = int(round(2 * WINDOW / STEP))
    return center - WINDOW + STEP * np.arange(n + 1)


def _refine(score_fn, dims: int, coarse: float = 0.02) -> tuple[np.ndarray, float]:
    """Coarse-to-fine grid minimization over [-W, W]^dims down to STEP."""
    lo = np.full(dims, -WINDOW)
    hi = np.full(dims, WINDOW)
    step = coarse
    best_pt, best_val = None, np.inf
    while True:
        axes = [np.arange(lo[d], hi[d] + step / 2, step) for d in range(dims)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        vals = score_fn(pts)
        i = int(np.argmin(vals))
        best_pt, best_val = pts[i], float(vals[i])
        if step <= STEP:
            return best_pt, best_val
        lo = np.maximum(best_pt - 2.5 * step, -WINDOW)
        hi = np.minimum(best_pt + 2.5 * step, WINDOW)
        step = max(step / 10.0, STEP)


# -- 1-D manifolds -----------------------------------------------------------


def oracle_identity(x0: float, y0: float) -> float:
    t = _dense_axis()
    return float(np.min((t - x0) ** 2 + (t - y0) ** 2))


def oracle_sum1(x0: float, y0: float) -> float:
    # graph of y = x for a single summand
    return oracle_identity(x0, y0)


def oracle_sum_relu1(x0: float, y0: float) -> float:
    t = _dense_axis()
    return float(np.min((t - x0) ** 2 + (np.maximum(t, 0.0) - y0) ** 2))


def oracle_max1(x0: float, y0: float) -> float:
    return oracle_identity(x0, y0)


def oracle_quantize(x0: float, y0: float, levels: np.ndarray) -> float:
    t = _dense_axis()
    mids = 0.5 * (levels[:-1] + levels[1:])
    idx = np.searchsorted(mids, t, side="left")
    q = levels[idx]
    return float(np.min((t - x0) ** 2 + (q - y0) ** 2))


def oracle_margin(x0: float, positive: bool, m: float) -> float:
    t = _dense_axis()
    mask = t >= m if positive else t <= 0.0
    return float(np.min(np.where(mask, (t - x0) ** 2, np.inf)))


# -- higher-dimensional parametrizations ------------------------------------


def oracle_sum2(x0: np.ndarray, y0: float) -> float:
    def score(pts):
        d = (pts - x0) ** 2
        return d.sum(axis=-1) + (pts.sum(axis=-1) - y0) ** 2

    return _refine(score, dims=2)[1]


def oracle_sum_relu2(x0: np.ndarray, y0: float) -> float:
    def score(pts):
        d = (pts - x0) ** 2
        return d.sum(axis=-1) + (np.maximum(pts.sum(axis=-1), 0.0) - y0) ** 2

    return _refine(score, dims=2)[1]


def oracle_max2(x0: np.ndarray, y0: float) -> float:
    def score(pts):
        d = (pts - x0) ** 2
        return d.sum(axis=-1) + (pts.max(axis=-1) - y0) ** 2

    return _refine(score, dims=2)[1]


def oracle_dot(x0: np.ndarray, y0: np.ndarray, z0: float) -> float:
    """Grid the y operand; the best x for fixed y is linear least squares."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    n = x0.size

    def score(pts):
        ynorm2 = (pts**2).sum(axis=-1)
        mu = (pts @ x0 - z0) / (1.0 + ynorm2)
        x = x0[None, :] - mu[:, None] * pts
        dot = (x * pts).sum(axis=-1)
        return (
            ((x - x0) ** 2).sum(axis=-1)
            + ((pts - y0) ** 2).sum(axis=-1)
            + (dot - z0) ** 2
        )

    return _refine(score, dims=n)[1]


def oracle_ce_prox(x0: np.ndarray, y: np.ndarray, lam: float) -> float:
    """Minimum of lam * cross-entropy + half squared distance, d = 2."""

    def score(pts):
        shifted = pts - pts.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1)) + pts.max(axis=-1)
        ce = lse - (pts * y).sum(axis=-1)
        return lam * ce + 0.5 * ((pts - x0) ** 2).sum(axis=-1)

    return _refine(score, dims=2)[1]


def bisect_root(f, lo: float, hi: float, iters: int = 200) -> float:
    """Plain bisection for the scalar reductions of the worked examples."""
    flo = f(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)
