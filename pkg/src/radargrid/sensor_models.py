"""Ambiguity-aware inverse radar sensor models.

Position and range-rate measurements may be reported shifted by integer
multiples of sensor-specific intervals. Each model is therefore a Gaussian
mixture over the shift hypotheses, weighted by independent binomial
(p = 0.5) probabilities on the symmetric index set ``{-k, ..., k}``.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Dict, Tuple

import numpy as np

from . import _kernels as K
from .core import Detection, EgoPose, SensorModelParams, SensorMount, sensor_frame, world_to_polar

SINGULAR_EPS = 1e-6


@lru_cache(maxsize=None)
def _shift_weight_array(k: int) -> np.ndarray:
    n = 2 * k
    w = np.array([math.comb(n, i) for i in range(n + 1)], dtype=float) / 2.0 ** n
    w.setflags(write=False)
    return w


def shift_weight_array(k: int) -> np.ndarray:
    """Binomial(2k, 0.5) weights ordered by index ``-k..k``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    return _shift_weight_array(int(k))


def shift_weights(k: int) -> Dict[int, float]:
    w = shift_weight_array(k)
    return {i - k: float(w[i]) for i in range(2 * k + 1)}


def joint_shift_weights(k: int) -> np.ndarray:
    """Joint (i, j) table; entry ``[i + k, j + k]`` is the product of the marginals."""
    w = shift_weight_array(k)
    return np.outer(w, w)


def _check_sigmas(*sig):
    for s in sig:
        if not s > 0:
            raise ValueError("noise standard deviations must be > 0")


def occupancy_likelihood(cell_polar, z: Detection, params: SensorModelParams):
    """Mixture occupancy likelihood of cell(s) at polar ``(r_c, phi_c)`` given ``z``.

    ``cell_polar`` may be a pair of scalars or a pair of equal-length arrays.
    """
    _check_sigmas(z.sigma_r, z.sigma_phi)
    rc, pc = cell_polar
    w1 = shift_weight_array(params.k_pos)
    density = params.normalization == "density"
    if np.ndim(rc) == 0:
        return K.occ_lik(float(rc), float(pc), z.r, z.phi, z.sigma_r, z.sigma_phi, params.delta_r,
                         params.delta_phi, w1, params.rho0, params.eta_occ, density)
    rc = np.ascontiguousarray(rc, dtype=float).ravel()
    pc = np.ascontiguousarray(pc, dtype=float).ravel()
    return K.occ_lik_many(rc, pc, z.r, z.phi, z.sigma_r, z.sigma_phi, params.delta_r,
                          params.delta_phi, w1, params.rho0, params.eta_occ, density)


def free_space_likelihood(cell_polar, z: Detection, params: SensorModelParams):
    """Mixture free-space likelihood; only hypotheses in front of the measured range contribute."""
    _check_sigmas(z.sigma_phi)
    rc, pc = cell_polar
    w1 = shift_weight_array(params.k_pos)
    density = params.normalization == "density"
    rcap = z.r if params.free_gate == "target" else np.inf
    if np.ndim(rc) == 0:
        return K.free_lik(float(rc), float(pc), z.r, z.phi, z.sigma_phi, params.delta_r, params.delta_phi,
                          w1, params.rho0, params.gamma, params.eta_free, density, rcap)
    rc = np.ascontiguousarray(rc, dtype=float).ravel()
    pc = np.ascontiguousarray(pc, dtype=float).ravel()
    return K.free_lik_many(rc, pc, z.r, z.phi, z.sigma_phi, params.delta_r, params.delta_phi,
                           w1, params.rho0, params.gamma, params.eta_free, density, rcap)


def occupancy_probability(m_occ, m_free):
    p = 0.5 * (1.0 + np.asarray(m_occ, dtype=float) - np.asarray(m_free, dtype=float))
    p = np.clip(p, 0.0, 1.0)
    return float(p) if p.ndim == 0 else p


def detection_masses(lik_occ, lik_free) -> Tuple:
    """Cap likelihoods to masses with ``m_O + m_F <= 1`` (proportional shrink)."""
    mo = np.minimum(1.0, np.asarray(lik_occ, dtype=float))
    mf = np.minimum(1.0, np.asarray(lik_free, dtype=float))
    scale = 1.0 / np.maximum(mo + mf, 1.0)
    mo, mf = mo * scale, mf * scale
    if mo.ndim == 0:
        return float(mo), float(mf)
    return mo, mf


def doppler_predict(particle_state, mount: SensorMount, pose: EgoPose) -> float:
    """Radial component of the particle velocity relative to the sensor (positive = receding)."""
    x, y, vx, vy = particle_state
    f = sensor_frame(mount, pose)
    v = K.doppler(float(x), float(y), float(vx), float(vy), f.x, f.y, f.vx, f.vy, SINGULAR_EPS)
    if np.isnan(v):
        raise ValueError("particle coincides with the sensor position; range rate is undefined")
    return v


def doppler_predict_arrays(x, y, vx, vy, frame) -> np.ndarray:
    dx = np.asarray(x) - frame.x
    dy = np.asarray(y) - frame.y
    n = np.hypot(dx, dy)
    if np.any(n < SINGULAR_EPS):
        raise ValueError("particle coincides with the sensor position; range rate is undefined")
    return (dx * (np.asarray(vx) - frame.vx) + dy * (np.asarray(vy) - frame.vy)) / n


def velocity_likelihood(particle_state, z: Detection, mount: SensorMount, pose: EgoPose,
                        params: SensorModelParams) -> float:
    _check_sigmas(z.sigma_rr)
    pred = doppler_predict(particle_state, mount, pose)
    return K.vel_lik(pred, z.rr, z.sigma_rr, params.delta_rr, shift_weight_array(params.k_rr),
                     params.eta_vel, params.normalization == "density")


def velocity_likelihood_arrays(vx, vy, px, py, z: Detection, mount: SensorMount, pose: EgoPose,
                               params: SensorModelParams) -> np.ndarray:
    """Velocity likelihood over arrays of particle states (used for surfaces)."""
    _check_sigmas(z.sigma_rr)
    pred = doppler_predict_arrays(px, py, vx, vy, sensor_frame(mount, pose))
    wl = shift_weight_array(params.k_rr)
    density = params.normalization == "density"
    out = np.zeros(np.shape(pred))
    for a, l in enumerate(params.rr_indices):
        d = (z.rr - l * params.delta_rr - pred) / z.sigma_rr
        term = np.exp(-0.5 * d * d)
        if density:
            term = term / (np.sqrt(2 * np.pi) * z.sigma_rr)
        out += wl[a] * term
    return params.eta_vel * out


def combined_particle_likelihood(particle_state, z: Detection, mount: SensorMount, pose: EgoPose,
                                 params: SensorModelParams) -> float:
    """Product of the occupancy likelihood at the particle position and its velocity likelihood."""
    x, y = particle_state[0], particle_state[1]
    polar = world_to_polar(x, y, sensor_frame(mount, pose))
    lo = occupancy_likelihood(polar, z, params)
    if lo == 0.0:
        return 0.0
    return lo * velocity_likelihood(particle_state, z, mount, pose, params)


def position_surface(kind: str, z: Detection, params: SensorModelParams, spec) -> np.ndarray:
    """``occ`` or ``free`` likelihood over every cell of ``spec`` for a sensor at the origin facing +x."""
    cx, cy = spec.cell_centers()
    rc = np.hypot(cx, cy)
    pc = np.arctan2(cy, cx)
    if kind == "occ":
        v = occupancy_likelihood((rc.ravel(), pc.ravel()), z, params)
    elif kind == "free":
        v = free_space_likelihood((rc.ravel(), pc.ravel()), z, params)
    else:
        raise ValueError(f"unknown position model {kind!r}")
    return v.reshape(cx.shape)


def velocity_surface(z: Detection, params: SensorModelParams, vx, vy) -> np.ndarray:
    """Velocity likelihood over a (vx, vy) lattice for a particle at the measured position.

    The sensor sits at the origin, facing +x, and is stationary.
    """
    mount = SensorMount(z.sensor_id, 0.0, 0.0, 0.0, math.pi, max(z.r, 1.0) * 2)
    pose = EgoPose(0.0, 0.0, 0.0)
    px, py = z.r * math.cos(z.phi), z.r * math.sin(z.phi)
    gx, gy = np.meshgrid(np.asarray(vx, dtype=float), np.asarray(vy, dtype=float), indexing="ij")
    return velocity_likelihood_arrays(gx, gy, np.full(gx.shape, px), np.full(gx.shape, py), z, mount, pose, params)
