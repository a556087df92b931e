"""Joint global and local registration of sparse labeled views.

Pipeline per view: unproject -> plane pre-filter -> global 7D ICP against the
accumulated scene -> per-label local rigid refinement -> voxel-average fusion.

Correspondence scoring is the lifted 7D cost
    ||dxyz||^2 + w1 * ||drgb||^2 + w2 * sem(s, s')
with sem either the 0/1 label-mismatch indicator (default) or the literal
squared id difference. Pairs whose 3D distance exceeds the rejection radius
are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .geometry import (
    DegenerateGeometryError,
    LabeledCloud,
    RigidTransform,
    View,
    apply_transform,
    solve_rigid,
    unproject,
)


@dataclass(frozen=True)
class RegistrationParams:
    w1: float = 0.1              # photometric weight
    w2: float = 10.0             # semantic weight
    reject_dist: float = 0.05    # correspondence rejection radius, meters
    max_iters: int = 50          # ICP iteration cap per radius level
    trans_eps: float = 1e-4      # convergence: translation update, meters
    rot_eps: float = 1e-4        # convergence: rotation update, radians
    fuse_voxel: float = 0.01     # fusion averaging cell, meters
    semantic_mode: str = "categorical"  # or "squared" for literal id difference
    # Coarse-to-fine schedule: the search radius starts at coarse_radius_frac of
    # the target bounding-box diagonal (identity initialization would otherwise
    # find nothing inside reject_dist) and halves per level down to reject_dist.
    coarse_radius_frac: float = 0.25
    plane_tol: float = 0.03      # RANSAC plane inlier distance, meters
    min_support_frac: float = 0.01   # minimum plane support as cloud fraction
    isolation_neighbors: int = 10    # keep off-plane points with >= k neighbors
    isolation_radius: float = 0.1    # ...within this radius, meters
    min_label_points: int = 50   # smallest segment refined locally
    # Use only mutual nearest pairs in the rigid solve. One-sided matches in
    # regions the other cloud never saw drag the solve toward covered areas;
    # mutuality suppresses that bias. The correspondence sets reported by
    # match_7d / align_global are unaffected.
    reciprocal: bool = True
    seed: int = 0                # RANSAC seed; fixed for determinism

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("weights must be nonnegative")
        if self.reject_dist <= 0:
            raise ValueError("reject_dist must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.fuse_voxel <= 0:
            raise ValueError("fuse_voxel must be positive")
        if self.semantic_mode not in ("categorical", "squared"):
            raise ValueError(f"unknown semantic_mode {self.semantic_mode!r}")


class Correspondence(NamedTuple):
    src_index: int
    tgt_index: int
    geom_dist: float
    lifted_cost: float


@dataclass
class CorrespondenceSet:
    """Retained matched pairs between a source and a target cloud."""

    src_indices: np.ndarray
    tgt_indices: np.ndarray
    geom_dists: np.ndarray
    lifted_costs: np.ndarray
    src: LabeledCloud
    tgt: LabeledCloud

    def __len__(self) -> int:
        return len(self.src_indices)

    def __iter__(self) -> Iterator[Correspondence]:
        for i in range(len(self)):
            yield Correspondence(int(self.src_indices[i]), int(self.tgt_indices[i]),
                                 float(self.geom_dists[i]), float(self.lifted_costs[i]))

    def src_points(self) -> np.ndarray:
        return self.src.positions[self.src_indices]

    def tgt_points(self) -> np.ndarray:
        return self.tgt.positions[self.tgt_indices]


@dataclass
class LocalRefinement:
    label: int
    transform: RigidTransform
    status: str   # "refined", "unmatched label", "too few points", "degenerate"


@dataclass
class FusedScene:
    cloud: LabeledCloud
    per_view_transforms: list[RigidTransform]
    local_reports: list[list[LocalRefinement]] = field(default_factory=list)


class AlignmentError(RuntimeError):
    """Global alignment could not proceed; carries the last valid state."""

    def __init__(self, message, transform=None, correspondences=None, view_index=None,
                 partial_scene=None):
        super().__init__(message)
        self.transform = transform
        self.correspondences = correspondences
        self.view_index = view_index
        self.partial_scene = partial_scene


def _semantic_cost(src_labels: np.ndarray, tgt_labels: np.ndarray, mode: str) -> np.ndarray:
    if mode == "categorical":
        return (src_labels != tgt_labels).astype(np.float64)
    diff = src_labels.astype(np.float64) - tgt_labels.astype(np.float64)
    return diff * diff


def _lifted_costs(src: LabeledCloud, si: np.ndarray, tgt: LabeledCloud, ti: np.ndarray,
                  params: RegistrationParams) -> np.ndarray:
    d2 = np.sum((src.positions[si] - tgt.positions[ti]) ** 2, axis=1)
    c2 = np.sum((src.colors[si] - tgt.colors[ti]) ** 2, axis=1)
    sem = _semantic_cost(src.labels[si], tgt.labels[ti], params.semantic_mode)
    return d2 + params.w1 * c2 + params.w2 * sem


def _segment_best(src_rep: np.ndarray, tgt_idx: np.ndarray, costs: np.ndarray):
    """Per source index, the candidate of minimum cost; ties -> lowest tgt index.

    Returns (unique_src, best_tgt, best_cost). Inputs are flat candidate lists.
    """
    order = np.lexsort((tgt_idx, costs, src_rep))
    src_sorted = src_rep[order]
    firsts = np.flatnonzero(np.r_[True, src_sorted[1:] != src_sorted[:-1]])
    pick = order[firsts]
    return src_rep[pick], tgt_idx[pick], costs[pick]


def match_7d(src: LabeledCloud, tgt: LabeledCloud, params: RegistrationParams,
             tree: Optional[cKDTree] = None,
             search_radius: Optional[float] = None) -> CorrespondenceSet:
    """Nearest neighbors under the lifted 7D cost, with distance rejection.

    Exactly equivalent to brute-force minimization of the lifted cost over the
    whole target: the kd-tree first gathers candidates inside the rejection
    radius, then widens the search wherever a farther point could still win on
    total cost (possible when the in-radius winner pays color/label penalties).
    The pair for a source point is kept only when the cost minimizer lies
    within the rejection radius.
    """
    if len(src) == 0 or len(tgt) == 0:
        return CorrespondenceSet(np.empty(0, int), np.empty(0, int),
                                 np.empty(0), np.empty(0), src, tgt)
    radius = params.reject_dist if search_radius is None else search_radius
    if tree is None:
        tree = cKDTree(tgt.positions)

    # Capped k-NN gathers in-radius candidates as a dense array; rows whose
    # k-th neighbor still lies inside the radius fall back to a full ball
    # enumeration so the result stays exact.
    n_src, n_tgt = len(src), len(tgt)
    kcap = min(n_tgt, 96)
    dist, idx = tree.query(src.positions, k=kcap, distance_upper_bound=radius,
                           workers=-1)
    dist = dist.reshape(n_src, kcap)
    idx = idx.reshape(n_src, kcap)
    present = idx < n_tgt
    idx_safe = np.where(present, idx, 0)
    cost = np.where(present, dist * dist, np.inf)
    if params.w1 != 0:
        cdiff = src.colors[:, None, :] - tgt.colors[idx_safe]
        cost += np.where(present, params.w1 * np.sum(cdiff * cdiff, axis=2), 0.0)
    if params.w2 != 0:
        sem = _semantic_cost(src.labels[:, None], tgt.labels[idx_safe],
                             params.semantic_mode)
        cost += np.where(present, params.w2 * sem, 0.0)
    row_min = cost.min(axis=1)
    # ties resolved toward the lowest target index
    tie_idx = np.where(cost == row_min[:, None], idx_safe, n_tgt).min(axis=1)

    best_src = np.flatnonzero(np.isfinite(row_min))
    best_tgt = tie_idx[best_src]
    best_cost = row_min[best_src]

    saturated = np.flatnonzero(present[:, -1]) if kcap < n_tgt else np.empty(0, int)
    if len(saturated):
        balls = tree.query_ball_point(src.positions[saturated], radius, workers=-1)
        counts = np.fromiter((len(b) for b in balls), dtype=np.int64, count=len(balls))
        src_rep = np.repeat(saturated, counts)
        tgt_idx = np.concatenate(balls).astype(np.int64)
        costs = _lifted_costs(src, src_rep, tgt, tgt_idx, params)
        bs, bt, bc = _segment_best(src_rep, tgt_idx, costs)
        pos = np.searchsorted(best_src, bs)
        best_tgt[pos] = bt
        best_cost[pos] = bc

    # A target outside the radius can only beat the in-radius winner if its
    # squared distance alone is below the winner's total cost.
    widen = np.flatnonzero(np.sqrt(best_cost) > radius)
    keep = np.ones(len(best_src), dtype=bool)
    for w in widen:
        s = int(best_src[w])
        cand = np.asarray(tree.query_ball_point(src.positions[s], float(np.sqrt(best_cost[w]))),
                          dtype=np.int64)
        c = _lifted_costs(src, np.full(len(cand), s), tgt, cand, params)
        order = np.lexsort((cand, c))
        wt, wc = cand[order[0]], c[order[0]]
        gd = np.linalg.norm(src.positions[s] - tgt.positions[wt])
        if gd <= radius:
            best_tgt[w], best_cost[w] = wt, wc
        else:
            keep[w] = False   # true cost minimizer lies beyond the radius

    best_src, best_tgt, best_cost = best_src[keep], best_tgt[keep], best_cost[keep]
    geom = np.linalg.norm(src.positions[best_src] - tgt.positions[best_tgt], axis=1)
    return CorrespondenceSet(best_src, best_tgt, geom, best_cost, src, tgt)


def match_7d_bruteforce(src: LabeledCloud, tgt: LabeledCloud,
                        params: RegistrationParams) -> CorrespondenceSet:
    """Quadratic-scan reference for match_7d; oracle for equivalence tests."""
    if len(src) == 0 or len(tgt) == 0:
        return CorrespondenceSet(np.empty(0, int), np.empty(0, int),
                                 np.empty(0), np.empty(0), src, tgt)
    d2 = np.sum((src.positions[:, None, :] - tgt.positions[None, :, :]) ** 2, axis=2)
    c2 = np.sum((src.colors[:, None, :] - tgt.colors[None, :, :]) ** 2, axis=2)
    sem = _semantic_cost(src.labels[:, None], tgt.labels[None, :], params.semantic_mode)
    cost = d2 + params.w1 * c2 + params.w2 * sem
    best = np.argmin(cost, axis=1)   # argmin returns the lowest index on ties
    geom = np.sqrt(d2[np.arange(len(src)), best])
    ok = geom <= params.reject_dist
    si = np.flatnonzero(ok)
    return CorrespondenceSet(si, best[ok], geom[ok],
                             cost[np.arange(len(src)), best][ok], src, tgt)


def _match_coarse(src: LabeledCloud, tgt: LabeledCloud,
                  label_trees: dict[int, tuple[cKDTree, np.ndarray]],
                  radius: float, params: RegistrationParams) -> CorrespondenceSet:
    """Approximate lifted-cost matching for the coarse annealing levels.

    Candidates are the geometric nearest target point within each label group,
    re-scored with the full lifted cost; a ball query at coarse radii would be
    quadratic in memory. The per-label grouping keeps the semantic veto intact,
    which is what the coarse levels need.
    """
    n = len(src)
    best_cost = np.full(n, np.inf)
    best_tgt = np.full(n, -1, dtype=np.int64)
    for label in sorted(label_trees):
        tree, index_map = label_trees[label]
        dist, local = tree.query(src.positions, k=1, workers=-1)
        ok = dist <= radius
        if not ok.any():
            continue
        ti = index_map[local]
        cost = np.full(n, np.inf)
        cost[ok] = _lifted_costs(src, np.flatnonzero(ok), tgt, ti[ok], params)
        better = cost < best_cost
        tie = (cost == best_cost) & (ti < best_tgt)
        upd = better | tie
        best_cost[upd] = cost[upd]
        best_tgt[upd] = ti[upd]
    have = np.flatnonzero(np.isfinite(best_cost))
    geom = np.linalg.norm(src.positions[have] - tgt.positions[best_tgt[have]], axis=1)
    return CorrespondenceSet(have, best_tgt[have], geom, best_cost[have], src, tgt)


def _label_trees(tgt: LabeledCloud) -> dict[int, tuple[cKDTree, np.ndarray]]:
    trees = {}
    for label in np.unique(tgt.labels):
        idx = np.flatnonzero(tgt.labels == label)
        trees[int(label)] = (cKDTree(tgt.positions[idx]), idx)
    return trees


def _planar_label_mask(cloud: LabeledCloud, params: RegistrationParams
                       ) -> np.ndarray:
    """Mask of points whose label forms a near-planar sheet (walls, floors).

    Large planar structures are the reliable guides for coarse alignment:
    their normals pin rotation and the offsets along those normals pin
    translation, while sliding within each plane costs nothing. Compact
    objects are the opposite — seen from different viewpoints they expose
    different faces, and nearest-neighbor matching across a large radius
    latches one face onto another, pulling the coarse fit into gross rotation.
    The planarity test is relative to the patch extent as well as absolute,
    since sensor noise thickens a large wall patch well past plane_tol.
    """
    mask = np.zeros(len(cloud), dtype=bool)
    for label in np.unique(cloud.labels):
        idx = np.flatnonzero(cloud.labels == label)
        if len(idx) < 30:
            continue
        centered = cloud.positions[idx] - cloud.positions[idx].mean(axis=0)
        eigvals = np.linalg.eigvalsh(centered.T @ centered / len(idx))
        thin = np.sqrt(max(eigvals[0], 0.0))
        if thin < max(params.plane_tol, 0.05 * np.sqrt(eigvals[2])):
            mask[idx] = True
    return mask


def _label_planes(cloud: LabeledCloud, params: RegistrationParams
                  ) -> dict[int, tuple[np.ndarray, np.ndarray, int]]:
    """Fitted plane (normal, centroid, point count) for each planar label.

    Normals are oriented to face the origin — the camera for a raw view, the
    room interior for an accumulated scene — so that the same wall gets the
    same orientation in both clouds of an alignment.
    """
    planes = {}
    for label in np.unique(cloud.labels):
        idx = np.flatnonzero(cloud.labels == label)
        if len(idx) < 30:
            continue
        c = cloud.positions[idx].mean(axis=0)
        centered = cloud.positions[idx] - c
        eigvals, eigvecs = np.linalg.eigh(centered.T @ centered / len(idx))
        thin = np.sqrt(max(eigvals[0], 0.0))
        if thin >= max(params.plane_tol, 0.05 * np.sqrt(eigvals[2])):
            continue
        normal = eigvecs[:, 0]
        if normal @ c > 0:
            normal = -normal
        planes[int(label)] = (normal, c, len(idx))
    return planes


def _plane_init(src: LabeledCloud, tgt: LabeledCloud,
                params: RegistrationParams) -> RigidTransform | None:
    """Closed-form initial alignment from per-label plane correspondences.

    Rotation comes from a weighted Kabsch solve over the normals of planar
    labels present in both clouds; because the pairing is by label, a wall can
    only map onto the same wall, which rules out the spurious quarter-turn
    fits a box-shaped room otherwise admits. Translation is solved from the
    plane offsets along those normals; directions the normals do not span are
    filled in by centroid alignment. Returns None when fewer than two
    non-parallel shared planes exist, in which case the caller falls back to
    plain centroid alignment.
    """
    src_planes = _label_planes(src, params)
    tgt_planes = _label_planes(tgt, params)
    shared = sorted(set(src_planes) & set(tgt_planes))
    if len(shared) < 2:
        return None
    w = np.array([np.sqrt(min(src_planes[l][2], tgt_planes[l][2]))
                  for l in shared])
    ns = np.array([src_planes[l][0] for l in shared])
    nt = np.array([tgt_planes[l][0] for l in shared])
    h = (w[:, None] * ns).T @ nt
    u, s, vt = np.linalg.svd(h)
    if s[1] < 1e-6 * max(s[0], 1e-300):   # normals all parallel
        return None
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    # plane offsets pin translation along the spanned directions only
    b = np.array([nt[i] @ tgt_planes[l][1] - nt[i] @ (rot @ src_planes[l][1])
                  for i, l in enumerate(shared)])
    a = w[:, None] * nt
    t, *_ = np.linalg.lstsq(a, w * b, rcond=1e-6)
    null = np.eye(3) - _row_space_projector(a)
    gap = tgt.positions.mean(axis=0) - rot @ src.positions.mean(axis=0) - t
    return RigidTransform(rot, t + null @ gap)


def _row_space_projector(a: np.ndarray) -> np.ndarray:
    """Projector onto the row space of a (directions its rows span)."""
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    rows = vt[s > 1e-6 * max(s[0], 1e-300)]
    return rows.T @ rows


def eq2_objective(pairs: CorrespondenceSet, t: RigidTransform) -> float:
    """0.5 * sum ||tgt - R src - t||^2 over the retained pairs."""
    resid = pairs.tgt_points() - t.apply(pairs.src_points())
    return 0.5 * float(np.sum(resid ** 2))


def _radius_schedule(tgt: LabeledCloud, params: RegistrationParams,
                     cap: float | None = None) -> list[float]:
    ext = tgt.positions.max(axis=0) - tgt.positions.min(axis=0) if len(tgt) else np.zeros(3)
    r = params.coarse_radius_frac * float(np.linalg.norm(ext))
    if cap is not None:
        r = min(r, cap)
    r = max(params.reject_dist, r)
    schedule = []
    while r > params.reject_dist:
        schedule.append(r)
        r /= 2.0
    schedule.append(params.reject_dist)
    return schedule


def _cloud_normals(positions: np.ndarray, k: int = 16
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Unit surface normals and curvatures from the k-NN covariance.

    The normal is the smallest eigenvector of each neighborhood's covariance;
    orientation is arbitrary, which is fine for the symmetric point-to-plane
    residual. Curvature is the smallest eigenvalue over the trace: ~0 on a
    plane interior, large where the neighborhood straddles a surface boundary
    and the normal is meaningless. Pairs whose target has high curvature are
    excluded from the point-to-plane solves: their systematically nonzero
    residuals bias the converged pose by several millimeters, and unlike a
    residual-magnitude trim this criterion is independent of the current pose,
    so it cannot carve spurious fixed points into the iteration.
    """
    k = min(k, len(positions))
    _, idx = cKDTree(positions).query(positions, k=k, workers=-1)
    nb = positions[np.atleast_2d(idx.T).T]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum('nki,nkj->nij', nb, nb)
    eigvals, eigvecs = np.linalg.eigh(cov)
    curvature = eigvals[:, 0] / np.maximum(eigvals.sum(axis=1), 1e-300)
    return eigvecs[:, :, 0], curvature


def _point_to_plane_delta(src_pts: np.ndarray, tgt_pts: np.ndarray,
                          tgt_normals: np.ndarray) -> RigidTransform:
    """Linearized point-to-plane update (rotation vector + translation).

    Used for the iterative updates: unlike the point-to-point solve it does not
    drag partially overlapping planes toward centroid alignment, and the
    minimum-norm least-squares solution leaves unobservable directions (the
    in-plane slide of a lone plane) untouched.
    """
    a = np.hstack([np.cross(src_pts, tgt_normals), tgt_normals])
    b = np.einsum('ij,ij->i', tgt_pts - src_pts, tgt_normals)
    # the generous cutoff zeroes weakly observable directions (e.g. the
    # in-plane slide of a lone plane) instead of amplifying noise along them
    x, *_ = np.linalg.lstsq(a, b, rcond=1e-2)
    return RigidTransform(Rotation.from_rotvec(x[:3]).as_matrix(), x[3:])


def align_global(src: LabeledCloud, tgt: LabeledCloud, params: RegistrationParams,
                 anneal: bool = True, coarse_cap: float | None = None
                 ) -> tuple[RigidTransform, CorrespondenceSet]:
    """ICP over the lifted 7D cost, initialized by centroid alignment.

    Views arrive in their own camera frames, so the initial offset can exceed
    any reasonable search radius; aligning the cloud centroids first gives the
    coarse search a starting point inside its capture range.
    Coarse-to-fine: the correspondence search radius is annealed from a
    fraction of the target extent down to the rejection radius with fast
    approximate matching, then exact 7D matching takes over at the rejection
    radius. Iterative updates are point-to-plane (robust against the
    plane-boundary drag of partially overlapping views); the last update is
    the closed-form point-to-point rigid solve on the final correspondence
    set, which is also the set returned.

    At the final level, pairs whose target point sits on a surface boundary
    (high neighborhood curvature) are excluded from the solves; see
    _cloud_normals for why.
    """
    if len(src) == 0 or len(tgt) == 0:
        raise AlignmentError("cannot align empty clouds")
    tree = cKDTree(tgt.positions)
    normals, curvature = _cloud_normals(tgt.positions)
    flat = curvature < 1e-3
    centroid_init = RigidTransform(
        np.eye(3), tgt.positions.mean(axis=0) - src.positions.mean(axis=0))
    plane_init = _plane_init(src, tgt, params) if anneal else None
    if plane_init is None:
        transform = centroid_init
    else:
        transform = plane_init
        if coarse_cap is None:
            # A successful plane-based initialization is already within a
            # fraction of a metre of the optimum; wide coarse radii would only
            # reopen the door to symmetric aliases (e.g. a different wall of
            # the same label), so keep the annealing inside the
            # initialization's basin. If that basin turns out not to contain
            # the data (the coarse loop below runs out of correspondences),
            # the centroid start with the full schedule is retried instead.
            coarse_cap = 10.0 * params.reject_dist

    def mutual_filter(pairs: CorrespondenceSet, moved: LabeledCloud
                      ) -> np.ndarray:
        """Mask of pairs whose target also has the source as nearest neighbor;
        one-sided matches from disoccluded regions bias the solve."""
        if not params.reciprocal or len(pairs) < 3:
            return np.ones(len(pairs), dtype=bool)
        _, back = cKDTree(moved.positions).query(
            tgt.positions[pairs.tgt_indices], k=1, workers=-1)
        mutual = back == pairs.src_indices
        return mutual if mutual.sum() >= 3 else np.ones(len(pairs), dtype=bool)

    # Coarse levels: per-label approximate matching on a thinned source,
    # converged only to a fraction of the level's own radius before halving.
    # When both clouds carry enough near-planar labels (walls, floors), the
    # coarse levels use only those: see _planar_label_mask.
    if anneal:
        tgt_mask = _planar_label_mask(tgt, params)
        src_mask = _planar_label_mask(src, params)
        if (tgt_mask.sum() < max(100, 0.2 * len(tgt))
                or src_mask.sum() < max(100, 0.2 * len(src))):
            tgt_mask = np.ones(len(tgt), dtype=bool)
            src_mask = np.ones(len(src), dtype=bool)
        tgt_coarse = tgt.subset(tgt_mask)
        normals_coarse = normals[tgt_mask]
        label_trees = _label_trees(tgt_coarse)
        stride = 4 if src_mask.sum() > 8000 else 1
        src_coarse = src.subset(np.flatnonzero(src_mask)[::stride])

        def run_coarse(transform: RigidTransform, cap: float | None
                       ) -> RigidTransform:
            for radius in _radius_schedule(tgt, params, cap=cap):
                t_eps = max(params.trans_eps, 0.01 * radius)
                r_eps = max(params.rot_eps, 0.01 * radius)
                best_step, stall = np.inf, 0
                for _ in range(min(params.max_iters, 25)):
                    moved = apply_transform(src_coarse, transform)
                    pairs = _match_coarse(moved, tgt_coarse, label_trees,
                                          radius, params)
                    if len(pairs) < 3:
                        raise AlignmentError(
                            f"fewer than 3 correspondences within {radius:g} m",
                            transform=transform, correspondences=pairs)
                    delta = _point_to_plane_delta(
                        pairs.src_points(), pairs.tgt_points(),
                        normals_coarse[pairs.tgt_indices])
                    transform = delta.compose(transform)
                    step = (np.linalg.norm(delta.translation)
                            + delta.rotation_angle())
                    if (np.linalg.norm(delta.translation) < t_eps
                            and delta.rotation_angle() < r_eps):
                        break
                    if step < 0.9 * best_step:
                        best_step, stall = step, 0
                    else:
                        stall += 1
                        if stall >= 3:
                            break
            return transform

        try:
            transform = run_coarse(transform, coarse_cap)
        except AlignmentError:
            if plane_init is None:
                raise
            transform = run_coarse(centroid_init, None)

    # Final level: exact 7D matching at the rejection radius. On noisy data
    # the update norm plateaus at the noise floor instead of reaching the
    # epsilons, so iteration also stops once it has stagnated.
    best_step, stall = np.inf, 0
    for _ in range(params.max_iters):
        moved = apply_transform(src, transform)
        pairs = match_7d(moved, tgt, params, tree=tree)
        if len(pairs) < 3:
            raise AlignmentError(
                f"fewer than 3 correspondences within {params.reject_dist:g} m",
                transform=transform, correspondences=pairs)
        keep = mutual_filter(pairs, moved)
        keep &= flat[pairs.tgt_indices]
        if keep.sum() < 3:
            keep = mutual_filter(pairs, moved)
        sp, tp = pairs.src_points()[keep], pairs.tgt_points()[keep]
        tn = normals[pairs.tgt_indices[keep]]
        delta = _point_to_plane_delta(sp, tp, tn)
        transform = delta.compose(transform)
        step = np.linalg.norm(delta.translation) + delta.rotation_angle()
        if (np.linalg.norm(delta.translation) < params.trans_eps
                and delta.rotation_angle() < params.rot_eps):
            break
        if step < 0.9 * best_step:
            best_step, stall = step, 0
        else:
            stall += 1
            if stall >= 5:
                break

    # Closing closed-form rigid solve (Kabsch) on the converged matches. With
    # differently sampled grids the nearest-neighbor point-to-point objective
    # carries a small sampling bias that the plane residual does not, so the
    # closing update is kept only when it does not worsen the plane residual.
    moved = apply_transform(src, transform)
    pairs = match_7d(moved, tgt, params, tree=tree)
    keep = mutual_filter(pairs, moved)
    good = keep & flat[pairs.tgt_indices]
    if good.sum() < 3:
        good = keep
    sp, tp = pairs.src_points()[good], pairs.tgt_points()[good]
    tn = normals[pairs.tgt_indices[good]]
    try:
        delta = solve_rigid(sp, tp)
    except DegenerateGeometryError as e:
        raise AlignmentError(f"degenerate correspondences: {e}",
                             transform=transform, correspondences=pairs) from e
    before = np.abs(np.einsum('ij,ij->i', tp - sp, tn))
    after = np.abs(np.einsum('ij,ij->i', tp - delta.apply(sp), tn))
    if after.mean() <= before.mean():
        transform = delta.compose(transform)
    pairs = match_7d(apply_transform(src, transform), tgt, params, tree=tree)
    return transform, pairs


def _suppress_planar_drift(t: RigidTransform, positions: np.ndarray,
                           plane_tol: float) -> RigidTransform:
    """Remove the unobservable part of a refinement of a near-planar subset.

    Point-to-point ICP between partially overlapping co-planar patches is
    degenerate along the plane: it drags the patches toward centroid alignment.
    For subsets whose smallest extent is below plane_tol, the in-plane
    translation and the spin about the plane normal are therefore discarded;
    the observable tilt and out-of-plane correction are kept.
    """
    c = positions.mean(axis=0)
    centered = positions - c
    eigvals, eigvecs = np.linalg.eigh(centered.T @ centered / len(positions))
    if np.sqrt(max(eigvals[0], 0.0)) >= plane_tol:
        return t
    normal = eigvecs[:, 0]
    rvec = Rotation.from_matrix(t.rotation).as_rotvec()
    tilt = Rotation.from_rotvec(rvec - (rvec @ normal) * normal).as_matrix()
    shift_n = float((t.apply(c[None])[0] - c) @ normal) * normal
    return RigidTransform(tilt, c + shift_n - tilt @ c)


def _refine_label(sub_src: LabeledCloud, sub_tgt: LabeledCloud,
                  params: RegistrationParams) -> RigidTransform:
    """Drag one label subset onto its counterpart in the scene.

    A full 6-DOF fit over the few faces a label shows is badly conditioned at
    large offsets, so the annealing levels are translation-only steps using the
    component-wise median of the matched offsets: the median is a contraction
    toward the dominant correspondence cluster, and unlike a least-squares fit
    on noisy normals it cannot run away along a weakly observable direction.
    For a near-planar target only the along-normal component is kept (the
    in-plane offset of two partial wall patches is not a registration error).
    No rotational polish is attempted: the two subsets usually show different
    faces of the object, and a rigid fit latches onto that visibility
    difference rather than onto a real pose error. Raises AlignmentError when
    a level finds fewer than 3 correspondences.
    """
    tree = cKDTree(sub_tgt.positions)
    centered = sub_tgt.positions - sub_tgt.positions.mean(axis=0)
    eigvals, eigvecs = np.linalg.eigh(centered.T @ centered / len(sub_tgt))
    # Depth noise thickens a large wall patch well past plane_tol, so the
    # planarity test is relative to the patch size as well as absolute.
    thin = np.sqrt(max(eigvals[0], 0.0))
    planar = thin < max(params.plane_tol, 0.05 * np.sqrt(eigvals[2]))
    plane_normal = eigvecs[:, 0] if planar else None
    transform = RigidTransform.identity()
    r = params.reject_dist
    for radius in [8 * r, 4 * r, 2 * r, r]:
        best_step, stall = np.inf, 0
        for _ in range(min(params.max_iters, 15)):
            moved = transform.apply(sub_src.positions)
            dist, idx = tree.query(moved, k=1, distance_upper_bound=radius,
                                   workers=-1)
            ok = np.isfinite(dist)
            if ok.sum() < 3:
                raise AlignmentError(
                    f"fewer than 3 correspondences within {radius:g} m")
            shift = np.median(sub_tgt.positions[idx[ok]] - moved[ok], axis=0)
            if plane_normal is not None:
                shift = (shift @ plane_normal) * plane_normal
            transform = RigidTransform(np.eye(3), shift).compose(transform)
            step = np.linalg.norm(shift)
            if step < max(params.trans_eps, 0.01 * radius):
                break
            if step < 0.9 * best_step:
                best_step, stall = step, 0
            else:
                stall += 1
                if stall >= 3:
                    break
    return transform


def align_local(src: LabeledCloud, tgt: LabeledCloud,
                params: RegistrationParams) -> list[LocalRefinement]:
    """Per-label rigid refinement of an already globally aligned source.

    Each label present in both clouds with enough points is re-registered
    against the same-label target subset (the semantic cost term is then
    identically zero). Labels that cannot be refined fall back to identity.
    """
    out = []
    # Refinements are small corrections; micrometer-scale convergence only
    # burns iterations on the in-plane drift suppressed below anyway.
    local_params = replace(params,
                           trans_eps=max(params.trans_eps, 1e-5),
                           rot_eps=max(params.rot_eps, 1e-5),
                           max_iters=min(params.max_iters, 50))
    tgt_labels = set(np.unique(tgt.labels).tolist())
    for label in np.unique(src.labels):
        label = int(label)
        sub_src = src.subset(src.labels == label)
        if label not in tgt_labels:
            out.append(LocalRefinement(label, RigidTransform.identity(), "unmatched label"))
            continue
        sub_tgt = tgt.subset(tgt.labels == label)
        if len(sub_src) < params.min_label_points or len(sub_tgt) < params.min_label_points:
            out.append(LocalRefinement(label, RigidTransform.identity(), "too few points"))
            continue
        try:
            # Annealed matching: coherent per-view depth error can offset a
            # label by more than the rejection radius after global alignment.
            t = _refine_label(sub_src, sub_tgt, local_params)
        except AlignmentError:
            out.append(LocalRefinement(label, RigidTransform.identity(), "degenerate"))
            continue
        t = _suppress_planar_drift(t, sub_src.positions, params.plane_tol)
        # A genuine local refinement stays within a few rejection radii; a
        # larger move means the label slid to a spurious minimum.
        if (np.linalg.norm(t.translation) > 5.0 * params.reject_dist
                or t.rotation_angle() > 0.1):
            out.append(LocalRefinement(label, RigidTransform.identity(), "diverged"))
            continue
        out.append(LocalRefinement(label, t, "refined"))
    return out


def apply_local(cloud: LabeledCloud, refinements: Sequence[LocalRefinement]) -> LabeledCloud:
    """Apply per-label refinements; labels without one keep their position."""
    positions = cloud.positions.copy()
    for ref in refinements:
        mask = cloud.labels == ref.label
        positions[mask] = ref.transform.apply(cloud.positions[mask])
    return LabeledCloud(positions, cloud.colors.copy(), cloud.labels.copy())


def plane_prefilter(cloud: LabeledCloud, plane_tol: Optional[float] = None,
                    min_support: Optional[int] = None,
                    params: RegistrationParams = RegistrationParams()) -> LabeledCloud:
    """Drop stray points that sit on no dominant plane and have few neighbors.

    Planes are extracted greedily by RANSAC (inlier = within plane_tol of the
    plane, plane kept while support >= min_support). Remaining points survive
    only if they have at least `isolation_neighbors` neighbors within
    `isolation_radius`. Input order is preserved.
    """
    n = len(cloud)
    if n == 0:
        return cloud
    if plane_tol is None:
        plane_tol = params.plane_tol
    if min_support is None:
        min_support = max(3, int(np.ceil(params.min_support_frac * n)))
    rng = np.random.default_rng(params.seed)

    on_plane = np.zeros(n, dtype=bool)
    remaining = np.arange(n)
    while len(remaining) >= max(3, min_support):
        pts = cloud.positions[remaining]
        best_inliers = None
        for _ in range(64):
            tri = pts[rng.choice(len(pts), size=3, replace=False)]
            normal = np.cross(tri[1] - tri[0], tri[2] - tri[0])
            norm = np.linalg.norm(normal)
            if norm < 1e-12:
                continue
            normal /= norm
            dist = np.abs((pts - tri[0]) @ normal)
            inliers = dist <= plane_tol
            if best_inliers is None or inliers.sum() > best_inliers.sum():
                best_inliers = inliers
        if best_inliers is None or best_inliers.sum() < min_support:
            break
        on_plane[remaining[best_inliers]] = True
        remaining = remaining[~best_inliers]

    keep = on_plane.copy()
    if not keep.all():
        tree = cKDTree(cloud.positions)
        loose = np.flatnonzero(~keep)
        # query includes the point itself, hence the +1
        counts = tree.query_ball_point(cloud.positions[loose], params.isolation_radius,
                                       workers=-1, return_length=True)
        keep[loose] = counts >= params.isolation_neighbors + 1
    return cloud.subset(keep)


def fuse(aligned_clouds: Sequence[LabeledCloud], params: RegistrationParams) -> LabeledCloud:
    """Merge co-registered clouds by averaging positions of overlapping points.

    Overlap is realized as a voxel grid of pitch fuse_voxel: points sharing a
    cell and a label collapse to their mean position and color; distinct labels
    within one cell stay separate. Output sorted by (cell, label).
    """
    cloud = LabeledCloud.concatenate(aligned_clouds)
    if len(cloud) == 0:
        return cloud
    cells = np.floor(cloud.positions / params.fuse_voxel).astype(np.int64)
    key = np.column_stack([cells, cloud.labels])
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    m = len(uniq)
    counts = np.bincount(inverse, minlength=m).astype(np.float64)
    positions = np.empty((m, 3))
    colors = np.empty((m, 3))
    for axis in range(3):
        positions[:, axis] = np.bincount(inverse, weights=cloud.positions[:, axis],
                                         minlength=m) / counts
        colors[:, axis] = np.bincount(inverse, weights=cloud.colors[:, axis],
                                      minlength=m) / counts
    return LabeledCloud(positions, colors, uniq[:, 3])


def reconstruct(views: Sequence[View], params: RegistrationParams = RegistrationParams()
                ) -> FusedScene:
    """Sequentially register and fuse views into one labeled scene cloud.

    The first view's filtered cloud seeds the target; every later view is
    unprojected, pre-filtered, globally aligned against the accumulated scene,
    locally refined per label, and fused in. Returns the fused cloud plus the
    cumulative global transform of each view (first is identity).
    """
    if len(views) == 0:
        raise ValueError("need at least one view")
    target = plane_prefilter(unproject(views[0]), params=params)
    target = fuse([target], params)
    transforms = [RigidTransform.identity()]
    reports: list[list[LocalRefinement]] = [[]]
    for i, view in enumerate(views[1:], start=1):
        cloud = plane_prefilter(unproject(view), params=params)
        try:
            t_global, _ = align_global(cloud, target, params)
        except AlignmentError as e:
            raise AlignmentError(
                f"global alignment failed for view {i}: {e}", view_index=i,
                partial_scene=FusedScene(target, transforms, reports)) from e
        moved = apply_transform(cloud, t_global)
        refinements = align_local(moved, target, params)
        refined = apply_local(moved, refinements)
        target = fuse([target, refined], params)
        transforms.append(t_global)
        reports.append(refinements)
    return FusedScene(target, transforms, reports)
