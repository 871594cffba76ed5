"""Exact squared Euclidean distance transform on an anisotropic grid.

Separable lower-envelope-of-parabolas transform, one axis at a time. Each 1D
pass runs all lines of the volume in lock-step, so the Python loop is over
one axis length rather than over voxels.

With pitches whose squares are exact binary fractions (1.0, 1.25, 4.0, 5.0, ...)
every squared distance is an exact float64 sum, so maxima taken from this
transform equal brute-force pairwise minima bit-for-bit.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np


def _envelope(f: np.ndarray, w2: float) -> np.ndarray:
    """Row-wise min_q w2*(p-q)^2 + f[q] for f of shape [L, n] (inf = no site)."""
    lines, n = f.shape
    rows = np.arange(lines)
    sites = np.zeros((lines, n), dtype=np.int64)
    bounds = np.empty((lines, n + 1))
    k = np.full(lines, -1)
    keyed = f + w2 * np.arange(n) ** 2  # f[q] + w2*q^2, shared by every intersection

    def cross(idx: np.ndarray, q: int) -> np.ndarray:
        v = sites[idx, k[idx]]
        return (keyed[idx, q] - keyed[idx, v]) / (2 * w2 * (q - v))

    for q in range(n):
        idx = rows[np.isfinite(f[:, q])]
        if not idx.size:
            continue
        # discard parabolas hidden by the new one
        pending = idx[k[idx] >= 0]
        while pending.size:
            hidden = cross(pending, q) <= bounds[pending, k[pending]]
            pending = pending[hidden]
            k[pending] -= 1
            pending = pending[k[pending] >= 0]
        s = np.full(idx.size, -np.inf)
        has = k[idx] >= 0
        s[has] = cross(idx[has], q)
        k[idx] += 1
        sites[idx, k[idx]] = q
        bounds[idx, k[idx]] = s
        bounds[idx, k[idx] + 1] = np.inf

    out = np.full((lines, n), np.inf)
    live = rows[k >= 0]
    j = np.zeros(lines, dtype=np.int64)
    for p in range(n):
        pending = live
        while pending.size:
            step = bounds[pending, j[pending] + 1] < p
            pending = pending[step]
            j[pending] += 1
        v = sites[live, j[live]]
        out[live, p] = w2 * (p - v) ** 2 + f[live, v]
    return out


def squared_edt(sites: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """Squared distance (physical units) from every voxel to the nearest True voxel of `sites`.

    All-False input gives +inf everywhere.
    """
    sites = np.asarray(sites, dtype=bool)
    if len(spacing) != sites.ndim:
        raise ValueError(f"need one spacing per axis: {len(spacing)} for {sites.ndim} axes")
    d = np.where(sites, 0.0, np.inf)
    for axis, pitch in enumerate(spacing):
        moved = np.moveaxis(d, axis, -1)
        shape = moved.shape
        d = np.moveaxis(_envelope(moved.reshape(-1, shape[-1]), float(pitch) ** 2).reshape(shape), -1, axis)
    return d


def directed_sq_hausdorff(a: np.ndarray, b: np.ndarray, spacing: Sequence[float]) -> float:
    """max over voxels of `a` of the squared distance to `b`."""
    return float(squared_edt(b, spacing)[a].max())
