"""Deterministic synthetic room generator for desk-scale verification.

Scenes are built from boxes (thin boxes double as walls/floor planes), ray-cast
into color/depth/label views, and optionally corrupted with a monocular-style
error model: a global scale bias, a smooth low-frequency warp, and white noise.
Everything is seeded and bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .geometry import UNLABELED, Intrinsics, LabeledCloud, RigidTransform, View, \
    apply_transform, project, unproject
from .registration import RegistrationParams, fuse

_LIGHT_DIR = np.array([0.3, -0.8, 0.52])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    label: int
    color: tuple[float, float, float]
    rotation: Optional[np.ndarray] = None   # world-from-box; None = axis aligned


@dataclass
class SceneSpec:
    extents: tuple[float, float, float]   # room spans [0, ex] x [0, ey] x [0, ez]
    primitives: list[Box]
    seed: int = 0

    def __post_init__(self):
        ext = np.asarray(self.extents, dtype=np.float64)
        for prim in self.primitives:
            c = np.asarray(prim.center)
            r = np.linalg.norm(prim.size) / 2.0
            if (c - r > ext).any() or (c + r < -r).any():
                raise ValueError(f"primitive at {prim.center} outside room {self.extents}")


@dataclass(frozen=True)
class NoiseSpec:
    scale_bias: float = 1.0
    warp_amp: float = 0.0      # meters
    warp_cells: int = 4
    pixel_sigma: float = 0.0   # meters
    seed: int = 0

    def __post_init__(self):
        if self.scale_bias <= 0:
            raise ValueError("scale_bias must be positive")
        if self.warp_amp < 0 or self.pixel_sigma < 0:
            raise ValueError("noise amplitudes must be nonnegative")
        if self.warp_cells < 2:
            raise ValueError("warp_cells must be >= 2")

    def is_zero(self) -> bool:
        return self.scale_bias == 1.0 and self.warp_amp == 0.0 and self.pixel_sigma == 0.0


class RenderError(RuntimeError):
    pass


def _ray_box(origins: np.ndarray, dirs: np.ndarray, box: Box):
    """Slab intersection. Returns (t along ray, world normal, hit mask)."""
    half = np.asarray(box.size, dtype=np.float64) / 2.0
    center = np.asarray(box.center, dtype=np.float64)
    if box.rotation is not None:
        r = np.asarray(box.rotation, dtype=np.float64)
        o = (origins - center) @ r
        d = dirs @ r
    else:
        r = None
        o = origins - center
        d = dirs
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    t_lo = np.minimum(t1, t2)
    t_hi = np.maximum(t1, t2)
    # rays parallel to a slab: inside -> (-inf, inf), outside -> miss
    parallel = d == 0
    inside = np.abs(o) <= half
    t_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), t_lo)
    t_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), t_hi)
    t_near = t_lo.max(axis=-1)
    t_far = t_hi.min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 1e-6)
    axis = t_lo.argmax(axis=-1)
    sign = -np.sign(np.take_along_axis(d, axis[..., None], axis=-1)[..., 0])
    normal_local = np.zeros(origins.shape[:-1] + (3,))
    np.put_along_axis(normal_local, axis[..., None], sign[..., None], axis=-1)
    normal = normal_local @ r.T if r is not None else normal_local
    return t_near, normal, hit


def render_view(scene: SceneSpec, pose: RigidTransform, intr: Intrinsics) -> View:
    """Ray-cast the scene from a camera pose (camera-to-world) into a View.

    Depth is the optical-axis z of the nearest hit; labels come from the hit
    primitive; color is the primitive's base color under Lambertian shading
    with a fixed light. Pixels hitting nothing are invalid and unlabeled.
    """
    ext = np.asarray(scene.extents, dtype=np.float64)
    eye = pose.translation
    if (eye < 0).any() or (eye > ext).any():
        raise RenderError(f"camera position {eye} outside room {scene.extents}")

    h, w = intr.height, intr.width
    u, v = np.meshgrid(np.arange(w), np.arange(h))
    dirs_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy,
                         np.ones((h, w))], axis=-1)
    dirs = dirs_cam @ pose.rotation.T   # z-component of dirs_cam is 1 -> t == depth
    origins = np.broadcast_to(eye, dirs.shape)

    depth = np.full((h, w), np.inf)
    labels = np.full((h, w), UNLABELED, dtype=np.int64)
    color = np.zeros((h, w, 3))
    for prim in scene.primitives:
        t, normal, hit = _ray_box(origins, dirs, prim)
        closer = hit & (t < depth)
        if not closer.any():
            continue
        depth[closer] = t[closer]
        labels[closer] = prim.label
        shade = 0.55 + 0.45 * np.abs(normal[closer] @ _LIGHT_DIR)
        color[closer] = np.clip(np.asarray(prim.color) * shade[:, None], 0.0, 1.0)

    if not np.isfinite(depth).any():
        raise RenderError("no ray hit any primitive")
    depth[~np.isfinite(depth)] = 0.0
    return View(color, depth, labels, intr)


def warp_field(noise: NoiseSpec, shape: tuple[int, int]) -> np.ndarray:
    """The smooth per-pixel offset field (meters) used by perturb_depth."""
    h, w = shape
    rng = np.random.default_rng(noise.seed)
    control = rng.uniform(-noise.warp_amp, noise.warp_amp,
                          size=(noise.warp_cells, noise.warp_cells))
    grid = np.linspace(0.0, 1.0, noise.warp_cells)
    method = "cubic" if noise.warp_cells >= 4 else "linear"
    interp = RegularGridInterpolator((grid, grid), control, method=method)
    vv, uu = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w),
                         indexing="ij")
    return interp(np.stack([vv, uu], axis=-1))


def perturb_depth(view: View, noise: NoiseSpec) -> View:
    """Apply the monocular-style error model to a view's depth.

    depth' = scale_bias * depth * (1 + field/depth) + N(0, pixel_sigma), with
    `field` a bicubic interpolation of a warp_cells x warp_cells control grid
    drawn uniformly in [-warp_amp, warp_amp]. Colors and labels untouched;
    invalid pixels stay invalid. Deterministic given the seed.
    """
    if noise.is_zero():
        return View(view.color.copy(), view.depth.copy(), view.labels.copy(),
                    view.intrinsics)
    valid = view.valid_mask
    field = warp_field(noise, view.depth.shape)
    rng = np.random.default_rng(noise.seed + 1)
    white = rng.normal(0.0, noise.pixel_sigma, size=view.depth.shape) \
        if noise.pixel_sigma > 0 else np.zeros_like(view.depth)
    depth = view.depth.copy()
    with np.errstate(invalid="ignore", divide="ignore"):
        warped = noise.scale_bias * view.depth * (1.0 + field / view.depth) + white
    depth[valid] = warped[valid]
    return View(view.color.copy(), depth, view.labels.copy(), view.intrinsics)


@dataclass
class SynthCase:
    views: list[View]                  # noisy (or clean, if noise is zero)
    clean_views: list[View]
    gt_transforms: list[RigidTransform]   # view-i camera frame -> view-0 frame
    gt_cloud: LabeledCloud             # clean views fused at the true poses
    overlaps: list[float]              # consecutive-view co-visibility fractions


def view_overlap(a: View, b: View, rel_transform: RigidTransform,
                 depth_tol: float = 0.05) -> float:
    """Fraction of view a's points co-visible in view b.

    rel_transform maps a's camera frame into b's. A point counts when it
    projects inside b's raster and agrees with b's depth within depth_tol.
    """
    cloud = unproject(a)
    if len(cloud) == 0:
        return 0.0
    pts = rel_transform.apply(cloud.positions)
    in_front = pts[:, 2] > 0
    uv = np.full((len(pts), 2), -1.0)
    uv[in_front] = project(pts[in_front], b.intrinsics)
    ui = np.round(uv[:, 0]).astype(np.int64)
    vi = np.round(uv[:, 1]).astype(np.int64)
    inside = in_front & (ui >= 0) & (ui < b.intrinsics.width) \
        & (vi >= 0) & (vi < b.intrinsics.height)
    visible = np.zeros(len(pts), dtype=bool)
    idx = np.flatnonzero(inside)
    d_obs = b.depth[vi[idx], ui[idx]]
    visible[idx] = (d_obs > 0) & (np.abs(d_obs - pts[idx, 2]) <= depth_tol)
    return float(np.mean(visible))


def generate_case(scene: SceneSpec, poses: Sequence[RigidTransform], intr: Intrinsics,
                  noise: NoiseSpec = NoiseSpec(), min_overlap: float = 0.2,
                  fuse_voxel: float = 0.01) -> SynthCase:
    """Render a multi-view case with full ground truth.

    Poses are camera-to-world. Every view after the first must overlap some
    earlier view by at least min_overlap (fraction of co-visible points),
    otherwise a diagnostic listing all overlap fractions is raised. Per-view noise seeds derive from
    noise.seed so each view gets an independent, reproducible corruption.

    Monocular depth predictors recover scale independently per image, so the
    direction of the multiplicative bias is drawn per view: view i is perturbed
    with scale_bias ** s_i where s_i is +1 or -1, drawn reproducibly from
    noise.seed. Each individual view still follows the perturb_depth model
    exactly; with scale_bias == 1 (the clean case) the draw is a no-op.
    """
    if len(poses) < 2:
        raise ValueError("need at least 2 poses")
    clean = [render_view(scene, pose, intr) for pose in poses]
    gt_transforms = [poses[0].inverse().compose(p) for p in poses]

    # Registration accumulates views sequentially, so each view needs
    # co-visibility with at least one earlier view, not its direct predecessor.
    overlaps = []
    for i in range(1, len(poses)):
        best = 0.0
        for j in range(i):
            rel = poses[i].inverse().compose(poses[j])   # cam j -> cam i
            best = max(best, view_overlap(clean[j], clean[i], rel),
                       view_overlap(clean[i], clean[j], rel.inverse()))
        overlaps.append(best)
    if any(o < min_overlap for o in overlaps):
        raise ValueError(
            f"insufficient view overlap (min {min_overlap}): {overlaps}")

    params = RegistrationParams(fuse_voxel=fuse_voxel)
    gt_cloud = fuse([apply_transform(unproject(v), t)
                     for v, t in zip(clean, gt_transforms)], params)

    signs = np.random.default_rng(noise.seed).choice((1.0, -1.0), size=len(clean))
    noisy = [perturb_depth(v, replace(noise, seed=noise.seed + 1000 * i,
                                      scale_bias=noise.scale_bias ** signs[i]))
             for i, v in enumerate(clean)]
    return SynthCase(noisy, clean, gt_transforms, gt_cloud, overlaps)


def default_room(seed: int = 0) -> SceneSpec:
    """A 4 x 2.5 x 4 m room with labeled furniture boxes; used by demos/tests."""
    walls = [
        Box((2.0, 2.5, 2.0), (4.0, 0.02, 4.0), 1, (0.7, 0.7, 0.65)),   # floor (y down)
        Box((2.0, 1.25, 4.0), (4.0, 2.5, 0.02), 2, (0.8, 0.78, 0.72)),  # back wall
        Box((0.0, 1.25, 2.0), (0.02, 2.5, 4.0), 3, (0.75, 0.72, 0.7)),  # left wall
        Box((4.0, 1.25, 2.0), (0.02, 2.5, 4.0), 4, (0.72, 0.75, 0.7)),  # right wall
    ]
    furniture = [
        Box((1.0, 2.2, 2.8), (0.8, 0.6, 0.8), 10, (0.55, 0.3, 0.2)),    # table
        Box((2.8, 2.3, 3.2), (0.5, 0.4, 0.5), 11, (0.2, 0.35, 0.6)),    # chair
        Box((3.4, 1.9, 1.8), (0.4, 1.2, 0.6), 12, (0.3, 0.55, 0.3)),    # cabinet
        Box((1.8, 2.35, 1.2), (0.6, 0.3, 0.4), 13, (0.6, 0.55, 0.2)),   # crate
    ]
    return SceneSpec((4.0, 2.5, 4.0), walls + furniture, seed=seed)
