"""Geocentric HHA encoding of depth rasters.

Channels: horizontal disparity (1/d), height above the floor level, and the
angle between the local surface normal and the gravity-up direction. Gravity
defaults to the camera's -y axis (upright camera); the floor level is the 1st
percentile of heights, which is robust to stray low points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Intrinsics, View

DEFAULT_GRAVITY_UP = np.array([0.0, -1.0, 0.0])


@dataclass
class HHARaster:
    disparity: np.ndarray    # (H, W) normalized to [0, 1] over valid pixels
    height: np.ndarray       # (H, W) normalized
    angle: np.ndarray        # (H, W) normalized
    valid: np.ndarray        # (H, W) bool
    ranges: dict[str, tuple[float, float]]   # pre-normalization (min, max)

    def stacked(self) -> np.ndarray:
        return np.stack([self.disparity, self.height, self.angle], axis=-1)


def _unproject_grid(depth: np.ndarray, intr: Intrinsics) -> np.ndarray:
    h, w = depth.shape
    u, v = np.meshgrid(np.arange(w), np.arange(h))
    x = (u - intr.cx) * depth / intr.fx
    y = (v - intr.cy) * depth / intr.fy
    return np.stack([x, y, depth], axis=-1)


def estimate_normals(view: View, radius: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel unit normals from a local plane fit, oriented toward the camera.

    For each valid pixel the neighbors within `radius` of its 3D point are
    gathered and the smallest-eigenvector of their covariance taken as normal.
    Returns (normals (H, W, 3), valid mask); pixels with a degenerate
    neighborhood (fewer than 3 points, or rank < 2) are flagged invalid.
    """
    points = _unproject_grid(view.depth, view.intrinsics)
    valid = view.valid_mask
    normals = np.zeros_like(points)
    ok = np.zeros_like(valid)
    idx = np.flatnonzero(valid.ravel())
    if len(idx) == 0:
        return normals, ok
    flat = points.reshape(-1, 3)[idx]
    tree = cKDTree(flat)
    neighbor_lists = tree.query_ball_point(flat, radius, workers=-1)
    flat_normals = np.zeros_like(flat)
    flat_ok = np.zeros(len(flat), dtype=bool)
    for i, nbrs in enumerate(neighbor_lists):
        if len(nbrs) < 3:
            continue
        nb = flat[nbrs]
        centered = nb - nb.mean(axis=0)
        cov = centered.T @ centered
        evals, evecs = np.linalg.eigh(cov)
        if evals[1] <= 1e-12 * max(evals[2], 1e-30):
            continue   # neighborhood collinear
        n = evecs[:, 0]
        if n @ flat[i] > 0:   # camera sits at the origin
            n = -n
        flat_normals[i] = n
        flat_ok[i] = True
    normals.reshape(-1, 3)[idx] = flat_normals
    ok.ravel()[idx] = flat_ok
    return normals, ok


def _normalize(channel: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, tuple[float, float]]:
    lo = float(channel[valid].min())
    hi = float(channel[valid].max())
    out = np.zeros_like(channel)
    if hi > lo:
        out[valid] = (channel[valid] - lo) / (hi - lo)
    return out, (lo, hi)


def hha_encode(view: View, gravity_up: np.ndarray = DEFAULT_GRAVITY_UP,
               normal_radius: float = 0.05) -> HHARaster:
    """Encode a view's depth into the three geocentric channels.

    disparity = 1/d; height = coordinate along gravity_up minus the floor
    level (1st percentile of heights); angle = arccos(normal . gravity_up).
    Channels are min-max normalized over valid pixels, with the raw ranges
    recorded. Raises ValueError when the view has no valid depth.
    """
    gravity_up = np.asarray(gravity_up, dtype=np.float64)
    if abs(np.linalg.norm(gravity_up) - 1.0) > 1e-6:
        raise ValueError("gravity_up must be a unit vector")
    valid = view.valid_mask
    if not valid.any():
        raise ValueError("view has no valid depth")

    disparity = np.zeros_like(view.depth)
    disparity[valid] = 1.0 / view.depth[valid]

    points = _unproject_grid(view.depth, view.intrinsics)
    heights = points @ gravity_up
    floor = float(np.percentile(heights[valid], 1.0))
    height = np.where(valid, heights - floor, 0.0)

    normals, n_ok = estimate_normals(view, radius=normal_radius)
    angle = np.zeros_like(view.depth)
    cosang = np.clip(np.einsum("hwc,c->hw", normals, gravity_up), -1.0, 1.0)
    angle[n_ok] = np.arccos(cosang[n_ok])

    out_valid = valid & n_ok
    disparity_n, r_d = _normalize(disparity, valid)
    height_n, r_h = _normalize(height, valid)
    angle_n, r_a = _normalize(angle, out_valid) if out_valid.any() else (angle, (0.0, 0.0))
    return HHARaster(disparity_n, height_n, angle_n, out_valid,
                     {"disparity": r_d, "height": r_h, "angle": r_a})
