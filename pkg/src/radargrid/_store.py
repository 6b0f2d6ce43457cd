"""Compiled helpers for ring-window indexing and the cell-sorted particle store."""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def ring_storage(px, py, cs, gx0, gy0, nx, ny):
    """Storage slot of each point in a ring window, -1 outside it."""
    out = np.empty(px.shape[0], dtype=np.int64)
    for i in range(px.shape[0]):
        gx = math.floor(px[i] / cs)
        gy = math.floor(py[i] / cs)
        if gx0 <= gx < gx0 + nx and gy0 <= gy < gy0 + ny:
            out[i] = (int(gx) % nx) * ny + int(gy) % ny
        else:
            out[i] = -1
    return out


@njit(cache=True)
def counting_order(cell, n_cells):
    """Stable sort permutation of ``cell`` plus per-cell counts and CSR offsets."""
    counts = np.zeros(n_cells, dtype=np.int64)
    for c in cell:
        counts[c] += 1
    offsets = np.zeros(n_cells + 1, dtype=np.int64)
    for c in range(n_cells):
        offsets[c + 1] = offsets[c] + counts[c]
    pos = offsets[:-1].copy()
    order = np.empty(cell.shape[0], dtype=np.int64)
    for i in range(cell.shape[0]):
        c = cell[i]
        order[pos[c]] = i
        pos[c] += 1
    return order, counts, offsets


@njit(cache=True)
def gather(idx, x, y, vx, vy, w, dyn):
    n = idx.shape[0]
    ox = np.empty(n)
    oy = np.empty(n)
    ovx = np.empty(n)
    ovy = np.empty(n)
    ow = np.empty(n)
    od = np.empty(n, dtype=np.bool_)
    for i in range(n):
        j = idx[i]
        ox[i] = x[j]
        oy[i] = y[j]
        ovx[i] = vx[j]
        ovy[i] = vy[j]
        ow[i] = w[j]
        od[i] = dyn[j]
    return ox, oy, ovx, ovy, ow, od


@njit(cache=True)
def systematic_walk(cum, starts, counts, targets, u0):
    """Systematic draws per cell by a forward walk over the cumulative weights.

    Cell number ``k`` owns ``cum[starts[k]:starts[k] + counts[k]]`` covering
    ``(k, k + 1]``; each draw is the first slot whose running sum exceeds the
    pointer, clipped to the cell.
    """
    total = 0
    for k in range(targets.shape[0]):
        total += targets[k]
    out = np.empty(total, dtype=np.int64)
    o = 0
    for k in range(targets.shape[0]):
        t = targets[k]
        lo = starts[k]
        hi = lo + counts[k] - 1
        p = lo
        for j in range(t):
            u = k + (j + u0[k]) / t
            while p < hi and cum[p] <= u:
                p += 1
            out[o] = p
            o += 1
    return out


@njit(cache=True)
def interleave_cells(n_cells, first_n, first_idx, second_n, second_idx):
    """Gather order for a cell-sorted store built from two cell-sorted sources.

    Cell ``c`` receives ``first_n[c]`` entries of ``first_idx`` followed by
    ``second_n[c]`` entries of ``second_idx``.
    """
    total = 0
    for c in range(n_cells):
        total += first_n[c] + second_n[c]
    out = np.empty(total, dtype=np.int64)
    o = 0
    a = 0
    b = 0
    for c in range(n_cells):
        for _ in range(first_n[c]):
            out[o] = first_idx[a]
            a += 1
            o += 1
        for _ in range(second_n[c]):
            out[o] = second_idx[b]
            b += 1
            o += 1
    return out


@njit(cache=True)
def grid_moments(vx, vy, w, offsets, prior_w, prior_var):
    """Weighted mean and covariance per cell of a cell-sorted store, with a zero-mean prior share."""
    n = offsets.shape[0] - 1
    T = np.zeros(n)
    mx = np.zeros(n)
    my = np.zeros(n)
    cxx = np.zeros(n)
    cxy = np.zeros(n)
    cyy = np.zeros(n)
    for c in range(n):
        lo = offsets[c]
        hi = offsets[c + 1]
        W = 0.0
        sx = 0.0
        sy = 0.0
        for i in range(lo, hi):
            W += w[i]
            sx += w[i] * vx[i]
            sy += w[i] * vy[i]
        t = W + prior_w[c]
        T[c] = t
        if not t > 0.0:
            continue
        ax = sx / t
        ay = sy / t
        qxx = 0.0
        qxy = 0.0
        qyy = 0.0
        for i in range(lo, hi):
            dx = vx[i] - ax
            dy = vy[i] - ay
            qxx += w[i] * dx * dx
            qxy += w[i] * dx * dy
            qyy += w[i] * dy * dy
        L = prior_w[c]
        mx[c] = ax
        my[c] = ay
        cxx[c] = (qxx + L * (prior_var + ax * ax)) / t
        cyy[c] = (qyy + L * (prior_var + ay * ay)) / t
        cxy[c] = (qxy + L * ax * ay) / t
    return T, mx, my, cxx, cxy, cyy


@njit(cache=True)
def fast_unsupported(vx, vy, cell_of, has, miss_speed):
    """Indices of particles faster than ``miss_speed`` in cells without candidates."""
    out = np.empty(vx.shape[0], dtype=np.int64)
    m = 0
    for i in range(vx.shape[0]):
        if not has[cell_of[i]] and math.hypot(vx[i], vy[i]) > miss_speed:
            out[m] = i
            m += 1
    return out[:m]
