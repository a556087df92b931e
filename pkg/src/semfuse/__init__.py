"""semfuse: sparse-view semantic 3D reconstruction and evaluation toolkit.

Builds a fused, semantically labeled point cloud from a handful of
color/depth/label views by joint global and local registration, and provides
depth, segmentation and reconstruction metrics plus a synthetic ground-truth
generator for verification.
"""

from .geometry import (DegenerateGeometryError, Intrinsics, LabeledCloud,
                       RigidTransform, UNLABELED, View, apply_transform, project,
                       solve_rigid, unproject)
from .hha import HHARaster, estimate_normals, hha_encode
from .metrics import (DepthMetrics, ReconMetrics, SegMetrics, UndefinedMetricsError,
                      depth_metrics, recon_metrics, seg_metrics)
from .registration import (AlignmentError, CorrespondenceSet, FusedScene,
                           RegistrationParams, align_global, align_local, fuse,
                           match_7d, plane_prefilter, reconstruct)
from .synth import (Box, NoiseSpec, SceneSpec, default_room, generate_case,
                    perturb_depth, render_view)

__version__ = "0.1.0"
