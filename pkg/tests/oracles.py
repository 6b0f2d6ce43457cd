"""Brute-force reference implementations used only by the tests."""

import itertools
import math
from fractions import Fraction

import numpy as np


def coin_flip_weights(k):
    """P(index = i) for i = heads - k over all 2k fair coin flips, by enumeration."""
    counts = {}
    for flips in itertools.product((0, 1), repeat=2 * k):
        i = sum(flips) - k
        counts[i] = counts.get(i, 0) + 1
    total = 2 ** (2 * k)
    return {i: Fraction(c, total) for i, c in sorted(counts.items())}


def angle_diff(a, b):
    return math.remainder(a - b, 2 * math.pi)


def bivariate(x, mean, s1, s2, rho, density):
    cov = np.array([[s1 * s1, rho * s1 * s2], [rho * s1 * s2, s2 * s2]])
    d = np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)
    q = float(d @ np.linalg.solve(cov, d))
    v = math.exp(-0.5 * q)
    if density:
        v /= 2 * math.pi * math.sqrt(np.linalg.det(cov))
    return v


def occupancy_oracle(rc, pc, z, p):
    w = coin_flip_weights(p.k_pos)
    density = p.normalization == "density"
    total = 0.0
    for i, wi in w.items():
        for j, wj in w.items():
            pj = pc + j * p.delta_phi
            rho = float(np.sign(math.remainder(pj, 2 * math.pi))) * p.rho0
            x = (rc + i * p.delta_r, z.phi + angle_diff(pj, z.phi))
            total += float(wi * wj) * bivariate(x, (z.r, z.phi), z.sigma_r, z.sigma_phi, rho, density)
    return p.eta_occ * total


def free_oracle(rc, pc, z, p):
    if p.free_gate == "target" and rc >= z.r:
        return 0.0
    w = coin_flip_weights(p.k_pos)
    density = p.normalization == "density"
    total = 0.0
    for i, wi in w.items():
        if not rc + i * p.delta_r < z.r:
            continue
        for j, wj in w.items():
            pj = pc + j * p.delta_phi
            rho = float(np.sign(math.remainder(pj, 2 * math.pi))) * p.rho0
            x = (rc + i * p.delta_r, z.phi + angle_diff(pj, z.phi))
            total += float(wi * wj) * bivariate(x, (0.0, z.phi), p.gamma * z.r, z.sigma_phi, rho, density)
    return p.eta_free * total


def velocity_oracle(pred, z, p):
    density = p.normalization == "density"
    total = 0.0
    for l, wl in coin_flip_weights(p.k_rr).items():
        d = (z.rr - l * p.delta_rr - pred) / z.sigma_rr
        v = math.exp(-0.5 * d * d)
        if density:
            v /= math.sqrt(2 * math.pi) * z.sigma_rr
        total += float(wl) * v
    return p.eta_vel * total


def radial_speed(px, py, vx, vy, sx=0.0, sy=0.0, svx=0.0, svy=0.0):
    dx, dy = px - sx, py - sy
    return (dx * (vx - svx) + dy * (vy - svy)) / math.hypot(dx, dy)
