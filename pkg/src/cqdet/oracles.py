"""Slow reference implementations used to cross-check the vectorized kernels.

These are written independently of the production code paths: plain loops,
explicit per-head slicing and scalar arithmetic.
"""

from __future__ import annotations

import math

import numpy as np


def naive_distance(centers) -> np.ndarray:
    c = [list(map(float, row[:3])) for row in np.asarray(centers)]
    n = len(c)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = math.sqrt(sum((c[i][k] - c[j][k]) ** 2 for k in range(3)))
    return out


def _row_softmax(row):
    m = max(row)
    e = [math.exp(r - m) for r in row]
    s = sum(e)
    return [v / s for v in e]


def vanilla_mhsa(x, wq, bq, wk, bk, wv, bv, wo, bo, heads: int) -> np.ndarray:
    """Multi-head self-attention with (in, out) weight layout, one head at a time."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    dh = d // heads
    q = x @ wq + bq
    k = x @ wk + bk
    v = x @ wv + bv
    concat = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
        for i in range(n):
            scores = [float(qh[i] @ kh[j]) / math.sqrt(dh) for j in range(n)]
            weights = _row_softmax(scores)
            concat[i, sl] = sum(w * vh[j] for j, w in enumerate(weights))
    return concat @ wo + bo


def bilinear_oracle(data, scale: float, u: float, v: float) -> np.ndarray:
    """Four-neighbour weighted sum with zero padding, pixel centers at +0.5."""
    data = np.asarray(data, dtype=np.float64)
    c, hgt, wid = data.shape
    x = u * scale - 0.5
    y = v * scale - 0.5
    x0 = math.floor(x)
    y0 = math.floor(y)
    out = np.zeros(c)
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            wx = (x - x0) if dx else (1.0 - (x - x0))
            wy = (y - y0) if dy else (1.0 - (y - y0))
            if 0 <= xi < wid and 0 <= yi < hgt:
                out += wx * wy * data[:, yi, xi]
    return out


def stable_top_k(scores, k: int) -> list[int]:
    """Top-k indices by repeated selection of the earliest maximum."""
    remaining = list(range(len(scores)))
    picked = []
    while remaining and len(picked) < k:
        best = remaining[0]
        for i in remaining[1:]:
            if scores[i] > scores[best]:
                best = i
        picked.append(best)
        remaining.remove(best)
    return picked


def pinhole_project(fx, fy, cx, cy, rotation, translation, p):
    """Scalar pinhole projection (u, v, depth)."""
    r = np.asarray(rotation, dtype=np.float64)
    pc = [sum(r[i][k] * p[k] for k in range(3)) + translation[i] for i in range(3)]
    return fx * pc[0] / pc[2] + cx, fy * pc[1] / pc[2] + cy, pc[2]
