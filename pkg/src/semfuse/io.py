"""File formats: PFM/PGM/PPM rasters, binary PLY clouds, manifests and configs.

Depth travels as 32-bit float PFM (meters) or 16-bit PGM with an explicit
scale-to-meters divisor. Color is 8-bit PPM. Labels are 16-bit PGM with 65535
meaning unlabeled. Clouds are binary little-endian PLY with float positions,
uchar colors and a ushort label per vertex. All readers validate headers and
sizes and reject truncated or trailing-garbage files.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import UNLABELED, Intrinsics, LabeledCloud, View
from .registration import RegistrationParams


class FormatError(ValueError):
    """Malformed or inconsistent file content."""


# ---------------------------------------------------------------------------
# netpbm-style rasters

def _read_token(f) -> bytes:
    """Next whitespace-delimited token, skipping '#' comments."""
    tok = b""
    while True:
        ch = f.read(1)
        if ch == b"":
            raise FormatError("unexpected end of header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: expected {n} payload bytes, got {len(data)}")
    return data


def _expect_eof(f, path):
    if f.read(1) != b"":
        raise FormatError(f"{path}: trailing garbage after payload")


def read_pfm(path) -> np.ndarray:
    """Read a PFM raster; grayscale -> (H, W), color -> (H, W, 3). Top row first."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_token(f)
        if magic not in (b"PF", b"Pf"):
            raise FormatError(f"{path}: not a PFM file (magic {magic!r})")
        channels = 3 if magic == b"PF" else 1
        try:
            width = int(_read_token(f))
            height = int(_read_token(f))
            scale = float(_read_token(f))
        except ValueError as e:
            raise FormatError(f"{path}: malformed PFM header: {e}") from e
        if width <= 0 or height <= 0:
            raise FormatError(f"{path}: invalid PFM dimensions {width}x{height}")
        if scale == 0:
            raise FormatError(f"{path}: PFM scale must be nonzero")
        endian = "<" if scale < 0 else ">"
        count = width * height * channels
        data = np.frombuffer(_read_exact(f, count * 4), dtype=endian + "f4")
        _expect_eof(f, path)
    shape = (height, width, 3) if channels == 3 else (height, width)
    img = data.reshape(shape).astype(np.float64)
    return img[::-1].copy()   # PFM stores rows bottom-to-top


def write_pfm(path, data: np.ndarray):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        magic = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3) data, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n-1.0\n" % (w, h))
        f.write(data[::-1].astype("<f4").tobytes())


def _read_pnm(path, magic_want: bytes, maxval_want: int) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_token(f)
        if magic != magic_want:
            raise FormatError(f"{path}: expected {magic_want.decode()} file, got {magic!r}")
        try:
            width = int(_read_token(f))
            height = int(_read_token(f))
            maxval = int(_read_token(f))
        except ValueError as e:
            raise FormatError(f"{path}: malformed header: {e}") from e
        if width <= 0 or height <= 0:
            raise FormatError(f"{path}: invalid dimensions {width}x{height}")
        if maxval != maxval_want:
            raise FormatError(f"{path}: expected maxval {maxval_want}, got {maxval}")
        channels = 3 if magic_want == b"P6" else 1
        itemsize = 2 if maxval > 255 else 1
        count = width * height * channels
        raw = _read_exact(f, count * itemsize)
        _expect_eof(f, path)
    dtype = ">u2" if itemsize == 2 else "u1"
    data = np.frombuffer(raw, dtype=dtype)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return data.reshape(shape)


def read_pgm16(path) -> np.ndarray:
    """16-bit binary PGM (big-endian sample order per netpbm)."""
    return _read_pnm(path, b"P5", 65535).astype(np.int64)


def write_pgm16(path, data: np.ndarray):
    data = np.asarray(data)
    if data.ndim != 2 or data.min() < 0 or data.max() > 65535:
        raise ValueError("PGM16 needs a 2-D array with values in [0, 65535]")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n65535\n" % (w, h))
        f.write(data.astype(">u2").tobytes())


def read_ppm(path) -> np.ndarray:
    """8-bit binary PPM as (H, W, 3) floats normalized to [0, 1]."""
    return _read_pnm(path, b"P6", 255).astype(np.float64) / 255.0


def write_ppm(path, color: np.ndarray):
    color = np.asarray(color)
    if color.ndim != 3 or color.shape[2] != 3:
        raise ValueError("PPM needs (H, W, 3) data")
    h, w = color.shape[:2]
    quantized = np.clip(np.round(color * 255.0), 0, 255).astype("u1")
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(quantized.tobytes())


# ---------------------------------------------------------------------------
# depth helpers

def read_depth(path, scale: Optional[float] = None) -> np.ndarray:
    """Depth in meters from PFM (float) or 16-bit PGM (requires scale divisor)."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic in (b"Pf", b"PF"):
        depth = read_pfm(path)
        if depth.ndim != 2:
            raise FormatError(f"{path}: depth PFM must be grayscale")
        return depth
    if magic == b"P5":
        if scale is None:
            raise FormatError(f"{path}: integer depth needs an explicit depth_scale divisor")
        if scale <= 0:
            raise FormatError(f"{path}: depth_scale must be positive")
        return read_pgm16(path).astype(np.float64) / scale
    raise FormatError(f"{path}: unsupported depth format (magic {magic!r})")


def read_labels(path) -> np.ndarray:
    return read_pgm16(path)


# ---------------------------------------------------------------------------
# PLY clouds

_PLY_PROPS = [("float", "x"), ("float", "y"), ("float", "z"),
              ("uchar", "red"), ("uchar", "green"), ("uchar", "blue"),
              ("ushort", "label")]
_PLY_VERTEX = struct.Struct("<fffBBBH")


def write_cloud(cloud: LabeledCloud, path):
    """Binary little-endian PLY: float xyz, uchar rgb (x255), ushort label.

    Byte output is deterministic for a given cloud.
    """
    n = len(cloud)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {t} {name}" for t, name in _PLY_PROPS]
    header.append("end_header")
    rgb = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    labels = cloud.labels.astype(np.uint16)
    rec = np.empty(n, dtype=np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                      ("red", "u1"), ("green", "u1"), ("blue", "u1"),
                                      ("label", "<u2")]))
    rec["x"], rec["y"], rec["z"] = cloud.positions.T.astype(np.float32)
    rec["red"], rec["green"], rec["blue"] = rgb.T
    rec["label"] = labels
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_cloud(path) -> LabeledCloud:
    path = Path(path)
    with open(path, "rb") as f:
        first = f.readline().strip()
        if first != b"ply":
            raise FormatError(f"{path}: not a PLY file")
        n = None
        props = []
        fmt = None
        while True:
            line = f.readline()
            if line == b"":
                raise FormatError(f"{path}: PLY header without end_header")
            line = line.strip()
            if line == b"end_header":
                break
            parts = line.split()
            if parts[0] == b"format":
                fmt = parts[1]
            elif parts[0] == b"element":
                if parts[1] != b"vertex":
                    raise FormatError(f"{path}: unsupported PLY element {parts[1]!r}")
                try:
                    n = int(parts[2])
                except ValueError as e:
                    raise FormatError(f"{path}: bad vertex count") from e
            elif parts[0] == b"property":
                props.append((parts[1].decode(), parts[2].decode()))
        if fmt != b"binary_little_endian":
            raise FormatError(f"{path}: unsupported PLY format {fmt!r}")
        if n is None:
            raise FormatError(f"{path}: PLY header missing vertex element")
        if props != _PLY_PROPS:
            raise FormatError(f"{path}: unexpected PLY vertex properties {props}")
        raw = _read_exact(f, n * _PLY_VERTEX.size)
        _expect_eof(f, path)
    rec = np.frombuffer(raw, dtype=np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                             ("red", "u1"), ("green", "u1"), ("blue", "u1"),
                                             ("label", "<u2")]))
    positions = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float64)
    colors = np.column_stack([rec["red"], rec["green"], rec["blue"]]).astype(np.float64) / 255.0
    return LabeledCloud(positions, colors, rec["label"].astype(np.int64))


# ---------------------------------------------------------------------------
# manifests and configuration

def _intrinsics_from_dict(d: dict) -> Intrinsics:
    try:
        return Intrinsics(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                          cy=float(d["cy"]), width=int(d["width"]), height=int(d["height"]))
    except KeyError as e:
        raise FormatError(f"intrinsics block missing field {e}") from e


def read_view(entry: dict, base: Path) -> View:
    """Assemble one View from a manifest entry (paths resolved against base)."""
    for key in ("color", "depth", "labels", "intrinsics"):
        if key not in entry:
            raise FormatError(f"manifest entry missing {key!r}")
    intr = _intrinsics_from_dict(entry["intrinsics"])
    color = read_ppm(base / entry["color"])
    depth = read_depth(base / entry["depth"], scale=entry.get("depth_scale"))
    labels = read_labels(base / entry["labels"])
    try:
        return View(color, depth, labels, intr)
    except ValueError as e:
        raise FormatError(f"manifest entry inconsistent: {e}") from e


def read_manifest(path) -> list[View]:
    """JSON view manifest: {"views": [{color, depth, labels, intrinsics, ...}]}."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(doc, dict) or "views" not in doc or not isinstance(doc["views"], list):
        raise FormatError(f"{path}: manifest must be an object with a 'views' list")
    if not doc["views"]:
        raise FormatError(f"{path}: manifest lists no views")
    return [read_view(entry, path.parent) for entry in doc["views"]]


_FLOAT_KEYS = {"w1", "w2", "reject_dist", "trans_eps", "rot_eps", "fuse_voxel",
               "coarse_radius_frac", "plane_tol", "min_support_frac",
               "isolation_radius"}
_INT_KEYS = {"max_iters", "isolation_neighbors", "min_label_points", "seed"}
_STR_KEYS = {"semantic_mode"}


def read_config(path) -> RegistrationParams:
    """Key-value registration config; unset keys keep the defaults (w1=0.1,
    w2=10, reject_dist=0.05, ...). Lines starting with '#' are comments."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'key value'")
        key, value = parts
        try:
            if key in _FLOAT_KEYS:
                values[key] = float(value)
            elif key in _INT_KEYS:
                values[key] = int(value)
            elif key in _STR_KEYS:
                values[key] = value
            else:
                raise FormatError(f"{path}:{lineno}: unknown key {key!r}")
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: bad value for {key!r}: {e}") from e
    try:
        return RegistrationParams(**values)
    except ValueError as e:
        raise FormatError(f"{path}: invalid parameters: {e}") from e


def format_report(values: dict) -> str:
    """Line-oriented 'key value' report; floats printed with full precision."""
    lines = []
    for key, value in values.items():
        if isinstance(value, float):
            lines.append(f"{key} {value!r}")
        else:
            lines.append(f"{key} {value}")
    return "\n".join(lines) + "\n"


def write_report(values: dict, path):
    Path(path).write_text(format_report(values))
