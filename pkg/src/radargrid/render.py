"""Portable pixmap writers and matplotlib figures for grids and likelihood surfaces."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np


def _image_rows(window: np.ndarray) -> np.ndarray:
    # window[ix, iy] with x forward and y left; image rows run top to bottom, so
    # put +x at the top and +y on the left
    return window[::-1, ::-1]


def occupancy_gray(prob: np.ndarray) -> np.ndarray:
    """Occupied cells dark, free cells light, unknown mid-grey."""
    return np.rint(255.0 * (1.0 - np.clip(prob, 0.0, 1.0))).astype(np.uint8)


def ds_rgb(m_occ: np.ndarray, m_free: np.ndarray) -> np.ndarray:
    """Occupied mass in red, free mass in green."""
    rgb = np.zeros(m_occ.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = np.rint(255.0 * np.clip(m_occ, 0, 1))
    rgb[..., 1] = np.rint(255.0 * np.clip(m_free, 0, 1))
    return rgb


def write_pgm(path, gray: np.ndarray) -> None:
    g = np.ascontiguousarray(gray, dtype=np.uint8)
    h, w = g.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(g.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    c = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = c.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(c.tobytes())


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end].decode())
        pos = end
    pos += 1
    magic, w, h = fields[0], int(fields[1]), int(fields[2])
    shape = (h, w) if magic == "P5" else (h, w, 3)
    return np.frombuffer(data[pos:], dtype=np.uint8).reshape(shape)


def scale_gray(values: np.ndarray) -> np.ndarray:
    """Linear map of non-negative values to 0..255 (max maps to 255)."""
    m = float(np.max(values)) if values.size else 0.0
    if m <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint(255.0 * values / m).astype(np.uint8)


def write_occupancy_images(stem, prob: np.ndarray, m_occ=None, m_free=None) -> list:
    stem = Path(stem)
    out = [stem.with_suffix(".pgm")]
    write_pgm(out[0], _image_rows(occupancy_gray(prob)))
    if m_occ is not None:
        out.append(stem.with_name(stem.name + "_ds").with_suffix(".ppm"))
        write_ppm(out[-1], _image_rows(ds_rgb(m_occ, m_free)))
    return out


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def figure_snapshot(path, snap: dict, max_arrows: int = 4000, min_speed: float = 1.0) -> None:
    """Occupancy image with the velocity field and particles overlaid."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(7, 7))
    if "occ_prob" in snap:
        p = snap["occ_prob"]
        cs = float(snap["occ_cell"])
        ox, oy = snap["occ_origin"]
        ext = (ox, ox + p.shape[0] * cs, oy, oy + p.shape[1] * cs)
        if "m_occ" in snap:
            img = ds_rgb(snap["m_occ"], snap["m_free"]).transpose(1, 0, 2)
            ax.imshow(img, origin="lower", extent=ext)
        else:
            ax.imshow(p.T, origin="lower", extent=ext, cmap="gray_r", vmin=0, vmax=1)
    if "vel_mean_x" in snap:
        cs = float(snap["vel_cell"])
        ox, oy = snap["vel_origin"]
        mx, my = snap["vel_mean_x"], snap["vel_mean_y"]
        sp = np.hypot(mx, my)
        ix, iy = np.nonzero(sp > min_speed)
        if ix.size > max_arrows:
            keep = np.linspace(0, ix.size - 1, max_arrows).astype(int)
            ix, iy = ix[keep], iy[keep]
        ax.quiver(ox + (ix + 0.5) * cs, oy + (iy + 0.5) * cs, mx[ix, iy], my[ix, iy], sp[ix, iy],
                  cmap="viridis", angles="xy")
    if "particles" in snap and len(snap["particles"]):
        pt = snap["particles"]
        fast = np.hypot(pt[:, 2], pt[:, 3]) > min_speed
        ax.scatter(pt[fast, 0], pt[fast, 1], s=0.5, c="tab:blue", alpha=0.4)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(f"cycle {int(snap.get('cycle', 0))}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def figure_surface(path, values: np.ndarray, extent, xlabel: str, ylabel: str, title: str) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(values.T, origin="lower", extent=extent, aspect="auto", cmap="magma")
    fig.colorbar(im, ax=ax)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def figure_timings(path, header, rows) -> None:
    """Stacked per-phase cycle times from the cycle report."""
    plt = _plt()
    phases = [h for h in header if h.endswith("_ms") and h != "total_ms"]
    data = np.array([[float(r[header.index(p)]) for p in phases] for r in rows]) if rows else np.zeros((0, len(phases)))
    fig, ax = plt.subplots(figsize=(7, 4))
    if len(data):
        ax.stackplot(np.arange(len(data)), data.T, labels=[p[:-3] for p in phases])
        ax.legend(loc="upper right", fontsize=7, ncol=3)
    ax.set_xlabel("cycle")
    ax.set_ylabel("time [ms]")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
