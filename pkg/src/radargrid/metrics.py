"""Scores of grid estimates against simulator truth."""

from __future__ import annotations

import math
from typing import Dict, List, Optional

import numpy as np
from scipy.stats import rankdata

from .core import GridSpec


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve by the rank-sum formula (ties get average ranks)."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def cells_in_box(box, t: float, spec: GridSpec) -> np.ndarray:
    """Boolean window mask of cells whose centre lies inside the box at ``t``."""
    cx, cy = spec.cell_centers()
    return box.contains(cx, cy, t)


def object_velocity_error(box, t: float, spec: GridSpec, mean_x, mean_y, weight) -> Optional[Dict[str, float]]:
    """Particle-weighted mean velocity over the box's cells compared with its true velocity.

    Each cell's mean enters with its weight sum, which is the particle-weighted
    mean over all particles in those cells.
    """
    m = cells_in_box(box, t, spec) & (weight > 0)
    if not np.any(m):
        return None
    w = weight[m]
    vx = float(np.sum(w * mean_x[m]) / w.sum())
    vy = float(np.sum(w * mean_y[m]) / w.sum())
    true_speed = math.hypot(box.vx, box.vy)
    speed = math.hypot(vx, vy)
    dh = math.atan2(vy, vx) - math.atan2(box.vy, box.vx)
    dh = abs(math.atan2(math.sin(dh), math.cos(dh)))
    rmse = float(np.sqrt(np.sum(w * ((mean_x[m] - box.vx) ** 2 + (mean_y[m] - box.vy) ** 2)) / w.sum()))
    return {"cells": int(m.sum()), "vx": vx, "vy": vy, "speed": speed, "speed_error": abs(speed - true_speed),
            "heading_error_deg": math.degrees(dh), "rmse": rmse}


def region_means(prob: np.ndarray, regions: Dict[str, np.ndarray]) -> Dict[str, float]:
    return {k: float(prob[m].mean()) if np.any(m) else float("nan") for k, m in regions.items()}
