"""Camera models, labeled point clouds, and rigid transforms.

Conventions:
  * depth is optical-axis z in meters; values <= 0 or non-finite are holes
  * pixel (u, v) unprojects to ((u-cx)*d/fx, (v-cy)*d/fy, d)
  * label rasters use UNLABELED (65535) for pixels without a semantic label;
    such pixels never enter a cloud
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNLABELED = 65535

_ORTHO_TOL = 1e-9


class DegenerateGeometryError(ValueError):
    """Point configuration too thin to determine a rigid transform."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside raster")


@dataclass
class View:
    """One sparse view: color, depth and label rasters plus intrinsics."""

    color: np.ndarray   # (H, W, 3) float in [0, 1]
    depth: np.ndarray   # (H, W) float, meters
    labels: np.ndarray  # (H, W) integer label ids
    intrinsics: Intrinsics

    def __post_init__(self):
        h, w = self.depth.shape
        if self.color.shape != (h, w, 3):
            raise ValueError(
                f"color raster {self.color.shape} does not match depth {self.depth.shape}")
        if self.labels.shape != (h, w):
            raise ValueError(
                f"label raster {self.labels.shape} does not match depth {self.depth.shape}")
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise ValueError("raster size does not match intrinsics")

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.depth) & (self.depth > 0)


@dataclass
class LabeledCloud:
    """Point set in lifted 7D form: xyz position, rgb color, semantic label."""

    positions: np.ndarray  # (N, 3) float64, meters
    colors: np.ndarray     # (N, 3) float64 in [0, 1]
    labels: np.ndarray     # (N,) integer label ids

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels).reshape(-1).astype(np.int64)
        n = len(self.positions)
        if len(self.colors) != n or len(self.labels) != n:
            raise ValueError("positions, colors and labels must have equal length")

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, index) -> "LabeledCloud":
        return LabeledCloud(self.positions[index], self.colors[index], self.labels[index])

    @staticmethod
    def empty() -> "LabeledCloud":
        return LabeledCloud(np.empty((0, 3)), np.empty((0, 3)), np.empty(0, dtype=np.int64))

    @staticmethod
    def concatenate(clouds) -> "LabeledCloud":
        clouds = list(clouds)
        if not clouds:
            return LabeledCloud.empty()
        return LabeledCloud(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            np.concatenate([c.labels for c in clouds]),
        )


def _check_rotation(r: np.ndarray):
    if r.shape != (3, 3):
        raise ValueError("rotation must be 3x3")
    if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > 1e-9:
        raise ValueError("rotation determinant is not +1")


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64).reshape(3))
        _check_rotation(self.rotation)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self @ other)(p) = self(other(p))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


def unproject(view: View) -> LabeledCloud:
    """Lift every valid, labeled pixel of a view into a labeled 3D point.

    Points come out in row-major pixel order, so the result is deterministic.
    """
    intr = view.intrinsics
    mask = view.valid_mask & (view.labels != UNLABELED)
    v_idx, u_idx = np.nonzero(mask)
    d = view.depth[v_idx, u_idx]
    x = (u_idx - intr.cx) * d / intr.fx
    y = (v_idx - intr.cy) * d / intr.fy
    positions = np.column_stack([x, y, d])
    return LabeledCloud(positions, view.color[v_idx, u_idx], view.labels[v_idx, u_idx])


def project(points: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Pinhole projection of (N, 3) camera-frame points to (N, 2) pixels."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = points[:, 2]
    u = points[:, 0] * intr.fx / z + intr.cx
    v = points[:, 1] * intr.fy / z + intr.cy
    return np.column_stack([u, v])


def apply_transform(cloud: LabeledCloud, t: RigidTransform) -> LabeledCloud:
    """Rigidly move a cloud; colors, labels and ordering are untouched."""
    return LabeledCloud(t.apply(cloud.positions), cloud.colors.copy(), cloud.labels.copy())


def solve_rigid(src: np.ndarray, tgt: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform taking src points onto tgt points.

    Classic centroid + SVD solve of the cross-covariance (Kabsch), with the
    sign of the smallest singular vector flipped when the naive solution is a
    reflection. Raises DegenerateGeometryError for < 3 pairs or (near-)
    collinear sources, where the rotation is not determined.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(tgt, dtype=np.float64).reshape(-1, 3)
    if src.shape != tgt.shape:
        raise ValueError("source and target must pair up one-to-one")
    if len(src) < 3:
        raise DegenerateGeometryError(f"need >= 3 correspondences, got {len(src)}")

    c_src = src.mean(axis=0)
    c_tgt = tgt.mean(axis=0)
    a = src - c_src
    b = tgt - c_tgt

    spread = np.linalg.svd(a, compute_uv=False)
    if spread[1] <= 1e-12 * max(spread[0], 1e-30) or spread[0] <= 1e-30:
        raise DegenerateGeometryError("source points are collinear or coincident")

    h = a.T @ b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    # Re-orthonormalize to keep the RigidTransform invariant at 1e-9.
    uu, _, vv = np.linalg.svd(r)
    r = uu @ vv
    t = c_tgt - r @ c_src
    return RigidTransform(r, t)
