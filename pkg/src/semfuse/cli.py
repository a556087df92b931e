"""Command-line surface for reconstruction, evaluation, HHA and synthesis."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as sio
from .geometry import RigidTransform
from .hha import hha_encode
from .metrics import (DEFAULT_DELTA_THRESHOLDS, UndefinedMetricsError, depth_metrics,
                      recon_metrics, seg_metrics)
from .registration import AlignmentError, RegistrationParams, reconstruct
from .synth import Box, NoiseSpec, SceneSpec, generate_case


def _emit_report(values: dict, report_path=None):
    text = sio.format_report(values)
    sys.stdout.write(text)
    if report_path:
        Path(report_path).write_text(text)


def _cmd_reconstruct(args) -> int:
    views = sio.read_manifest(args.manifest)
    params = sio.read_config(args.config) if args.config else RegistrationParams()
    scene = reconstruct(views, params)
    sio.write_cloud(scene.cloud, args.out)
    report = {"views": len(views), "points": len(scene.cloud)}
    for i, t in enumerate(scene.per_view_transforms):
        for r in range(3):
            for c in range(3):
                report[f"view{i}.R{r}{c}"] = float(t.rotation[r, c])
        for c in range(3):
            report[f"view{i}.t{c}"] = float(t.translation[c])
    _emit_report(report, args.report)
    return 0


def _cmd_eval_depth(args) -> int:
    pred = sio.read_depth(args.pred, scale=args.scale)
    gt = sio.read_depth(args.gt, scale=args.scale)
    thresholds = args.thresholds or list(DEFAULT_DELTA_THRESHOLDS)
    m = depth_metrics(pred, gt, thresholds)
    _emit_report(m.as_dict(), args.report)
    return 0


def _cmd_eval_seg(args) -> int:
    pred = sio.read_labels(args.pred)
    gt = sio.read_labels(args.gt)
    m = seg_metrics(pred, gt, args.classes)
    _emit_report(m.as_dict(), args.report)
    return 0


def _cmd_eval_recon(args) -> int:
    recon = sio.read_cloud(args.recon)
    gt = sio.read_cloud(args.gt)
    m = recon_metrics(recon, gt, args.threshold)
    _emit_report(m.as_dict(), args.report)
    return 0


def _cmd_hha(args) -> int:
    with open(args.entry) as f:
        try:
            entry = json.load(f)
        except json.JSONDecodeError as e:
            raise sio.FormatError(f"{args.entry}: invalid JSON: {e}") from e
    view = sio.read_view(entry, Path(args.entry).parent)
    up = np.asarray(args.gravity_up, dtype=np.float64)
    up = up / np.linalg.norm(up)
    hha = hha_encode(view, gravity_up=up)
    sio.write_pfm(args.out, hha.stacked())
    return 0


def _load_scene_config(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise sio.FormatError(f"{path}: invalid JSON: {e}") from e
    try:
        primitives = [Box(tuple(p["center"]), tuple(p["size"]), int(p["label"]),
                          tuple(p["color"])) for p in doc["primitives"]]
        scene = SceneSpec(tuple(doc["extents"]), primitives, seed=int(doc.get("seed", 0)))
        poses = [RigidTransform(np.asarray(p["rotation"], dtype=np.float64),
                                np.asarray(p["translation"], dtype=np.float64))
                 for p in doc["poses"]]
        intr = sio._intrinsics_from_dict(doc["intrinsics"])
        noise = NoiseSpec(**doc.get("noise", {}))
        min_overlap = float(doc.get("min_overlap", 0.2))
    except (KeyError, TypeError, ValueError) as e:
        raise sio.FormatError(f"{path}: bad scene config: {e}") from e
    return scene, poses, intr, noise, min_overlap


def _cmd_synth(args) -> int:
    scene, poses, intr, noise, min_overlap = _load_scene_config(args.scene)
    case = generate_case(scene, poses, intr, noise=noise, min_overlap=min_overlap)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, view in enumerate(case.views):
        sio.write_ppm(out / f"color_{i}.ppm", view.color)
        sio.write_pfm(out / f"depth_{i}.pfm", view.depth)
        sio.write_pgm16(out / f"labels_{i}.pgm", view.labels)
        entries.append({
            "color": f"color_{i}.ppm", "depth": f"depth_{i}.pfm",
            "labels": f"labels_{i}.pgm",
            "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
                           "width": intr.width, "height": intr.height},
        })
    (out / "manifest.json").write_text(json.dumps({"views": entries}, indent=2) + "\n")
    sio.write_cloud(case.gt_cloud, out / "gt_cloud.ply")
    report = {}
    for i, t in enumerate(case.gt_transforms):
        for r in range(3):
            for c in range(3):
                report[f"view{i}.R{r}{c}"] = float(t.rotation[r, c])
        for c in range(3):
            report[f"view{i}.t{c}"] = float(t.translation[c])
    for i, o in enumerate(case.overlaps):
        report[f"overlap{i}"] = o
    sio.write_report(report, out / "gt_transforms.txt")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semfuse",
        description="Sparse-view semantic 3D reconstruction and evaluation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="register and fuse the views of a manifest")
    p.add_argument("manifest")
    p.add_argument("--config", help="key-value registration parameter file")
    p.add_argument("--out", required=True, help="output PLY path")
    p.add_argument("--report", help="write the transform report here")
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("eval-depth", help="depth error metrics between two rasters")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--thresholds", type=float, nargs="+")
    p.add_argument("--scale", type=float, help="divisor for 16-bit integer depth")
    p.add_argument("--report")
    p.set_defaults(func=_cmd_eval_depth)

    p = sub.add_parser("eval-seg", help="segmentation metrics between two label rasters")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--report")
    p.set_defaults(func=_cmd_eval_seg)

    p = sub.add_parser("eval-recon", help="accuracy/completeness between two PLY clouds")
    p.add_argument("recon")
    p.add_argument("gt")
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--report")
    p.set_defaults(func=_cmd_eval_recon)

    p = sub.add_parser("hha", help="HHA-encode one manifest entry to a 3-channel PFM")
    p.add_argument("entry", help="JSON file with one view entry")
    p.add_argument("--out", required=True)
    p.add_argument("--gravity-up", type=float, nargs=3, default=[0.0, -1.0, 0.0])
    p.set_defaults(func=_cmd_hha)

    p = sub.add_parser("synth", help="generate a synthetic case with ground truth")
    p.add_argument("scene", help="JSON scene configuration")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_synth)
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (sio.FormatError, UndefinedMetricsError, AlignmentError, OSError,
            ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():   # console entry point
    raise SystemExit(cli_main())


if __name__ == "__main__":
    main()
