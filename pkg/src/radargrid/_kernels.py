"""Compiled scalar kernels for the mixture likelihoods and grid rasterisation."""

from __future__ import annotations

import math

import numba
import numpy as np
from numba import njit, prange

PI = math.pi
TWO_PI = 2.0 * math.pi
# try OpenMP and the built-in work queue before TBB, whose version probe warns on old installs
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


def raster_stripes() -> int:
    """Column bands for the raster update: one per thread, four times over for load balance."""
    n = numba.get_num_threads()
    return 1 if n == 1 else 4 * n


# contributions beyond this many marginal sigmas are dropped by the raster update
N_SIGMA = 5.0


@njit(cache=True, inline="always")
def wrap(a):
    if -PI < a <= PI:
        return a
    return a - TWO_PI * math.ceil((a - PI) / TWO_PI)


@njit(cache=True, inline="always")
def sgn(a):
    if a > 0.0:
        return 1.0
    if a < 0.0:
        return -1.0
    return 0.0


@njit(cache=True, inline="always")
def gauss2(d1, d2, s1, s2, rho, density):
    z1 = d1 / s1
    z2 = d2 / s2
    one_m = 1.0 - rho * rho
    q = (z1 * z1 - 2.0 * rho * z1 * z2 + z2 * z2) / one_m
    v = math.exp(-0.5 * q)
    if density:
        v /= TWO_PI * s1 * s2 * math.sqrt(one_m)
    return v


@njit(cache=True, inline="always")
def gauss1(d, s, density):
    z = d / s
    v = math.exp(-0.5 * z * z)
    if density:
        v /= math.sqrt(TWO_PI) * s
    return v


@njit(cache=True)
def occ_lik(rc, pc, r, phi, sr, sp, delta_r, delta_phi, w1, rho0, eta, density):
    k = (w1.shape[0] - 1) // 2
    total = 0.0
    for a in range(w1.shape[0]):
        dr = rc + (a - k) * delta_r - r
        for b in range(w1.shape[0]):
            pj = pc + (b - k) * delta_phi
            rho = sgn(wrap(pj)) * rho0
            total += w1[a] * w1[b] * gauss2(dr, wrap(pj - phi), sr, sp, rho, density)
    return eta * total


@njit(cache=True)
def free_lik(rc, pc, r, phi, sp, delta_r, delta_phi, w1, rho0, gamma, eta, density, rcap):
    if r <= 0.0 or rc >= rcap:
        return 0.0
    k = (w1.shape[0] - 1) // 2
    s_range = gamma * r
    total = 0.0
    for a in range(w1.shape[0]):
        ri = rc + (a - k) * delta_r
        if ri >= r:
            continue
        for b in range(w1.shape[0]):
            pj = pc + (b - k) * delta_phi
            rho = sgn(wrap(pj)) * rho0
            total += w1[a] * w1[b] * gauss2(ri, wrap(pj - phi), s_range, sp, rho, density)
    return eta * total


@njit(cache=True)
def doppler(px, py, pvx, pvy, sx, sy, svx, svy, eps):
    dx = px - sx
    dy = py - sy
    n = math.sqrt(dx * dx + dy * dy)
    if n < eps:
        return np.nan
    return (dx * (pvx - svx) + dy * (pvy - svy)) / n


@njit(cache=True)
def vel_lik(pred, rr, srr, delta_rr, wl, eta, density):
    k = (wl.shape[0] - 1) // 2
    total = 0.0
    for a in range(wl.shape[0]):
        total += wl[a] * gauss1(rr - (a - k) * delta_rr - pred, srr, density)
    return eta * total


@njit(cache=True)
def occ_lik_many(rc, pc, r, phi, sr, sp, delta_r, delta_phi, w1, rho0, eta, density):
    out = np.empty(rc.shape[0])
    for n in range(rc.shape[0]):
        out[n] = occ_lik(rc[n], pc[n], r, phi, sr, sp, delta_r, delta_phi, w1, rho0, eta, density)
    return out


@njit(cache=True)
def free_lik_many(rc, pc, r, phi, sp, delta_r, delta_phi, w1, rho0, gamma, eta, density, rcap):
    out = np.empty(rc.shape[0])
    for n in range(rc.shape[0]):
        out[n] = free_lik(rc[n], pc[n], r, phi, sp, delta_r, delta_phi, w1, rho0, gamma, eta, density, rcap)
    return out


# -- fast truncated evaluation used by the raster update -----------------------

@njit(cache=True, inline="always")
def occ_lik_trunc(rc, pc, r, phi, sr, sp, delta_r, delta_phi, w1, rho0, eta, density):
    k = (w1.shape[0] - 1) // 2
    rlim = N_SIGMA * sr
    plim = N_SIGMA * sp
    total = 0.0
    for a in range(w1.shape[0]):
        dr = rc + (a - k) * delta_r - r
        if abs(dr) > rlim:
            continue
        z1 = dr / sr
        for b in range(w1.shape[0]):
            pj = pc + (b - k) * delta_phi
            dp = wrap(pj - phi)
            if abs(dp) > plim:
                continue
            total += w1[a] * w1[b] * _gauss2z(z1, dp / sp, sgn(wrap(pj)) * rho0, density)
    if density:
        total /= TWO_PI * sr * sp
    return eta * total


@njit(cache=True, inline="always")
def free_consts(r, delta_r, rho0, gamma):
    """Per-detection constants of ``free_lik_trunc``."""
    s_range = gamma * r
    step = delta_r / s_range
    c_rho = 1.0 / (1.0 - rho0 * rho0)
    q = 0.5 * step * step
    return 1.0 / s_range, step, c_rho, math.exp(-q * c_rho), math.exp(-q)


@njit(cache=True, inline="always")
def free_lik_trunc(rc, pc, r, phi, sp, inv_sp, delta_r, delta_phi, w1, rho0, eta, density, rcap, fc, prune):
    """Truncated free-space likelihood with constants ``fc`` from ``free_consts``.

    When the bound ``eta * exp(-z2_min^2 / 2)`` is known not to exceed a value
    the caller already holds (``z2_min^2 >= prune``), 0 is returned instead.
    """
    if rc >= rcap:
        return 0.0
    inv_s, step, c_rho, sq_rho, sq_zero = fc
    k = (w1.shape[0] - 1) // 2
    plim = N_SIGMA * sp
    z2min = np.inf
    for b in range(w1.shape[0]):
        z2min = min(z2min, abs(wrap(pc + (b - k) * delta_phi - phi)) * inv_sp)
    if z2min * z2min >= prune or z2min > N_SIGMA * sp * inv_sp:
        return 0.0
    z0 = rc * inv_s
    total = 0.0
    for b in range(w1.shape[0]):
        pj = pc + (b - k) * delta_phi
        dp = wrap(pj - phi)
        if abs(dp) > plim:
            continue
        z2 = dp * inv_sp
        rho = sgn(wrap(pj)) * rho0
        c = 1.0 if rho == 0.0 else c_rho
        # neighbouring range hypotheses differ from the centre term by exp(-c step (z0 - rho z2)) exp(-c step^2 / 2)
        q0 = c * (z0 * z0 - 2.0 * rho * z0 * z2 + z2 * z2)
        lin = c * step * (z0 - rho * z2)
        ratio_ok = q0 < 600.0 and abs(lin) < 300.0 and c * step * step < 600.0
        e0 = math.exp(-0.5 * q0)
        t = math.exp(-lin) if ratio_ok else 0.0
        sq = sq_zero if rho == 0.0 else sq_rho
        part = 0.0
        for a in range(w1.shape[0]):
            i = a - k
            if rc + i * delta_r >= r:
                continue
            if i == 0:
                v = e0
            elif ratio_ok and i == 1:
                v = e0 * t * sq
            elif ratio_ok and i == -1:
                v = e0 * sq / t
            else:
                zi = z0 + i * step
                v = math.exp(-0.5 * c * (zi * zi - 2.0 * rho * zi * z2 + z2 * z2))
            part += w1[a] * v
        if density and rho != 0.0:
            part *= math.sqrt(c)
        total += w1[b] * part
    if density:
        total *= inv_s * inv_sp / TWO_PI
    return eta * total


@njit(cache=True, inline="always")
def _gauss2z(z1, z2, rho, density):
    """``gauss2`` on standardised offsets, without the 1 / (2 pi s1 s2) factor."""
    if rho == 0.0:
        return math.exp(-0.5 * (z1 * z1 + z2 * z2))
    one_m = 1.0 - rho * rho
    v = math.exp(-0.5 * (z1 * z1 - 2.0 * rho * z1 * z2 + z2 * z2) / one_m)
    if density:
        v /= math.sqrt(one_m)
    return v


@njit(cache=True, inline="always")
def to_masses(lo, lf):
    mo = min(1.0, lo)
    mf = min(1.0, lf)
    s = mo + mf
    if s > 1.0:
        mo /= s
        mf /= s
    return mo, mf


@njit(cache=True, inline="always")
def ds_combine(mo, mf, zo, zf):
    conflict = mo * zf + mf * zo
    if conflict >= 1.0 - 1e-15:
        return 0.0, 0.0
    # rounding can leave 1 - m_O - m_F a hair below zero
    mu = max(1.0 - mo - mf, 0.0)
    zu = max(1.0 - zo - zf, 0.0)
    no = (mo * zo + mo * zu + mu * zo) / (1.0 - conflict)
    nf = (mf * zf + mf * zu + mu * zf) / (1.0 - conflict)
    return no, nf


@njit(cache=True)
def _column_interval(xs, ys, x):
    lo = np.inf
    hi = -np.inf
    n = xs.shape[0]
    for e in range(n):
        x0 = xs[e]
        y0 = ys[e]
        x1 = xs[(e + 1) % n]
        y1 = ys[(e + 1) % n]
        if (x0 <= x <= x1) or (x1 <= x <= x0):
            if x1 == x0:
                lo = min(lo, y0, y1)
                hi = max(hi, y0, y1)
            else:
                y = y0 + (x - x0) * (y1 - y0) / (x1 - x0)
                lo = min(lo, y)
                hi = max(hi, y)
    return lo, hi


@njit(cache=True, inline="always")
def _near_ring(rc, r, k, delta_r, rlim):
    for a in range(2 * k + 1):
        if abs(rc + (a - k) * delta_r - r) <= rlim:
            return True
    return False


@njit(cache=True)
def _raster_stripe(grid_a, grid_b, ds, l_max, stamp, token0,
                   gx0, gy0, nx, ny, cs, cx_lo, cx_hi,
                   sx, sy, syaw,
                   det_r, det_phi, det_sr, det_sp,
                   delta_r, delta_phi, w1, rho0, gamma, eta_o, eta_f, density, p_clip, footprint, clip_free,
                   per_scan, acc_o, acc_f, acc_t):
    """Rasterise every detection into grid columns ``cx_lo..cx_hi`` (world indices)."""
    k = (w1.shape[0] - 1) // 2
    cell_var = cs * cs / 12.0 if footprint else 0.0
    updates = 0
    xs = np.empty(4)
    ys = np.empty(4)
    for d in range(det_r.shape[0]):
        token = token0 + d
        r = det_r[d]
        phi = det_phi[d]
        sr = det_sr[d]
        sp = det_sp[d]
        if r <= 0.0:
            continue
        sr_eff = math.sqrt(sr * sr + cell_var)
        half = N_SIGMA * sp
        # cells whose centre is within this lateral distance of a wedge are visited
        lat = cs if footprint else 0.0
        rmax = r + k * delta_r + N_SIGMA * sr_eff
        # beyond rfree only the occupied rings around each range hypothesis carry evidence
        rfree = r if clip_free else r + k * delta_r
        rlim = N_SIGMA * sr_eff
        fc = free_consts(r, delta_r, rho0, gamma)
        # the arc bulges past the chord by at most rmax * half^2 / 2
        pad = rmax * (1.0 / math.cos(min(half, 1.2)) - 1.0) + 1e-9 + 1.5 * lat
        for b in range(w1.shape[0]):
            centre = syaw + phi - (b - k) * delta_phi
            a0 = centre - half
            a1 = centre + half
            rr_ = rmax + pad
            xs[0] = sx
            ys[0] = sy
            xs[1] = sx + rr_ * math.cos(a0)
            ys[1] = sy + rr_ * math.sin(a0)
            xs[2] = sx + rr_ * math.cos(a1)
            ys[2] = sy + rr_ * math.sin(a1)
            xs[3] = sx
            ys[3] = sy
            wide = half > 1.2
            if wide:
                xmin = sx - rmax
                xmax = sx + rmax
            else:
                xmin = min(xs[0], xs[1], xs[2])
                xmax = max(xs[0], xs[1], xs[2])
            ix_lo = max(int(math.floor((xmin - pad) / cs)) - 1, cx_lo)
            ix_hi = min(int(math.floor((xmax + pad) / cs)) + 1, cx_hi)
            cu = math.cos(centre)
            su = math.sin(centre)
            rel = phi - (b - k) * delta_phi
            for gx in range(ix_lo, ix_hi + 1):
                xc = (gx + 0.5) * cs
                col = (gx % nx) * ny
                if wide:
                    lo = sy - rmax
                    hi = sy + rmax
                else:
                    lo, hi = _column_interval(xs[:3], ys[:3], xc)
                if lo > hi:
                    continue
                iy_lo = max(int(math.floor((lo - pad) / cs)) - 1, gy0)
                iy_hi = min(int(math.floor((hi + pad) / cs)) + 1, gy0 + ny - 1)
                row = iy_lo % ny
                dx = xc - sx
                for gy in range(iy_lo, iy_hi + 1):
                    si = col + row
                    row += 1
                    if row == ny:
                        row = 0
                    dy = (gy + 0.5) * cs - sy
                    rc = math.sqrt(dx * dx + dy * dy)
                    if rc > rmax:
                        continue
                    if rc >= rfree and not _near_ring(rc, r, k, delta_r, rlim):
                        continue
                    # the lateral offset never exceeds the arc length, so this rejects before atan2
                    if abs(dy * cu - dx * su) > rc * half + lat:
                        continue
                    pc = wrap(math.atan2(dy, dx) - syaw)
                    if rc * abs(wrap(pc - rel)) > rc * half + lat:
                        continue
                    if stamp[si] == token:
                        continue
                    stamp[si] = token
                    sp_eff = sp
                    if footprint:
                        sp_eff = math.sqrt(sp * sp + cell_var / max(rc * rc, cell_var))
                    lo_ = occ_lik_trunc(rc, pc, r, phi, sr_eff, sp_eff, delta_r, delta_phi, w1, rho0, eta_o, density)
                    # under max fusion, skip free terms whose peak bound cannot beat the cell's current value
                    prune = acc_t[si] if per_scan and not density else np.inf
                    lf_ = free_lik_trunc(rc, pc, r, phi, sp_eff, 1.0 / sp_eff, delta_r, delta_phi, w1, rho0, eta_f,
                                         density, r if clip_free else np.inf, fc, prune)
                    if lo_ == 0.0 and lf_ == 0.0:
                        continue
                    if per_scan:
                        acc_o[si] = max(acc_o[si], lo_)
                        if lf_ > acc_f[si]:
                            acc_f[si] = lf_
                            acc_t[si] = -2.0 * math.log(lf_ / eta_f)
                    else:
                        _fuse(grid_a, grid_b, si, ds, lo_, lf_, p_clip, l_max)
                        updates += 1
    if per_scan:
        for gx in range(cx_lo, cx_hi + 1):
            for gy in range(gy0, gy0 + ny):
                si = (gx % nx) * ny + (gy % ny)
                if acc_o[si] != 0.0 or acc_f[si] != 0.0:
                    _fuse(grid_a, grid_b, si, ds, acc_o[si], acc_f[si], p_clip, l_max)
                    acc_o[si] = 0.0
                    acc_f[si] = 0.0
                    acc_t[si] = np.inf
                    updates += 1
    return updates



@njit(cache=True, parallel=True)
def raster_update(grid_a, grid_b, ds, l_max, stamp, token0,
                  gx0, gy0, nx, ny, cs,
                  sx, sy, syaw,
                  det_r, det_phi, det_sr, det_sp,
                  delta_r, delta_phi, w1, rho0, gamma, eta_o, eta_f, density, p_clip, footprint, clip_free,
                  per_scan, acc_o, acc_f, acc_t, n_stripes):
    """Apply every detection of one sensor to a ring-buffered occupancy grid.

    For BB ``grid_a`` holds log-odds (``grid_b`` unused); for DS ``grid_a`` and
    ``grid_b`` hold occupied and free masses. Cells visited per detection are
    the union of thin wedges around each azimuth hypothesis; ``stamp`` keeps a
    cell from being updated twice by the same detection. Returns the number of
    cell updates.

    With ``clip_free`` set, free evidence stops at the measured range instead of
    at the farthest range hypothesis. With ``footprint`` set, each cell's position spread (uniform over a square
    of side ``cs``) is added to the measurement variances before evaluation, so
    sharp detections are not lost between cell centres.

    With ``per_scan`` set, the likelihoods of all detections are first reduced
    per cell by their maximum (scratch ``acc_o``/``acc_f``, zero on entry and
    on exit) and each touched cell receives a single update.

    The grid columns are split into ``n_stripes`` bands processed in parallel;
    every cell belongs to one band, so the result does not depend on the
    number of threads.
    """
    n_stripes = max(1, min(n_stripes, nx))
    counts = np.zeros(n_stripes, dtype=np.int64)
    for s in prange(n_stripes):
        counts[s] = _raster_stripe(grid_a, grid_b, ds, l_max, stamp, token0,
                                   gx0, gy0, nx, ny, cs, gx0 + s * nx // n_stripes, gx0 + (s + 1) * nx // n_stripes - 1,
                                   sx, sy, syaw, det_r, det_phi, det_sr, det_sp,
                                   delta_r, delta_phi, w1, rho0, gamma, eta_o, eta_f, density, p_clip,
                                   footprint, clip_free, per_scan, acc_o, acc_f, acc_t)
    return counts.sum()


@njit(cache=True, inline="always")
def _fuse(grid_a, grid_b, si, ds, lo_, lf_, p_clip, l_max):
    mo, mf = to_masses(lo_, lf_)
    if ds:
        no, nf = ds_combine(grid_a[si], grid_b[si], mo, mf)
        grid_a[si] = no
        grid_b[si] = nf
    else:
        p = 0.5 * (1.0 + mo - mf)
        p = min(max(p, p_clip), 1.0 - p_clip)
        v = grid_a[si] + math.log(p / (1.0 - p))
        grid_a[si] = min(max(v, -l_max), l_max)
