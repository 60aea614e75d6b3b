"""Readers and writers for every on-disk artifact.

Formats (all little-endian, all deterministic given identical inputs):

* Descriptors (binary): 4-byte magic ``GDSC``, then three uint32 fields
  (version, n_images, dim), then ``n_images * dim`` float32 values row-major.
  Image ids are implicit: row k belongs to image k.
* Keypoints (JSON): ``{"keypoints": {"<image_id>": [[x, y], ...]}}`` with
  64-bit float coordinates.
* Matches (JSON): ``{"matches": [{"pair": [i, j], "indices": [[a, b], ...]}]}``
  where a/b index into the keypoint arrays of images i/j.
* Intrinsics (JSON): ``{"intrinsics": {"<image_id>": {"f": .., "k1": ..,
  "k2": .., "u0": .., "v0": ..}}}``.
* Poses (text): one record per registered camera, ``camera_id qw qx qy qz
  tx ty tz`` — the camera-to-world rotation as a wxyz quaternion and the
  camera center in world coordinates.  Lines starting with ``#`` are
  comments.
* Report / timing (JSON): nested dicts with sorted keys, see the metrics and
  pipeline modules for the schemas.
* View-graph diagnostics (CSV): columns ``i,j,min_cycle_error_deg,
  median_cycle_error_deg,kept_stage1,kept_stage2`` (booleans as 0/1).
* Direction-violation diagnostics (CSV): columns ``kind,a,b,
  violation_fraction,removed``.
* Point cloud (ASCII PLY): landmarks as white vertices, camera frusta as
  red vertices (center plus four image-corner rays per camera).
"""

import json
import struct
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation as _ScipyRotation

from .errors import InputError
from .geometry import CameraIntrinsics, Pose3
from .retrieval import GlobalDescriptor
from .two_view import MatchSet

DESCRIPTOR_MAGIC = b"GDSC"
DESCRIPTOR_VERSION = 1

_INTRINSICS_FIELDS = ("f", "k1", "k2", "u0", "v0")


def _fmt(x: float) -> str:
    """Shortest decimal that round-trips a float64 exactly."""
    return format(float(x), ".17g")


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"missing input file: {path}")
    return path.read_bytes()


def _read_text(path) -> str:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"missing input file: {path}")
    return path.read_text()


def _read_json(path, root_key: str):
    try:
        payload = json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(payload, dict) or root_key not in payload:
        raise InputError(f"{path}: expected a JSON object with {root_key!r}")
    return payload[root_key]


def write_json(path, payload: dict) -> None:
    """Canonical JSON: 2-space indent, sorted keys, trailing newline."""
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True)
                          + "\n")


def read_json(path) -> dict:
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON in {path}: {exc}") from exc


def write_descriptors(path, descriptors: list) -> None:
    """Write global descriptors; row k must belong to image k."""
    vectors = []
    for k, desc in enumerate(descriptors):
        if desc.image_id != k:
            raise InputError(
                f"descriptor rows must be contiguous; row {k} has image id "
                f"{desc.image_id}")
        vectors.append(np.asarray(desc.vector, dtype=np.float32))
    dim = len(vectors[0]) if vectors else 0
    header = DESCRIPTOR_MAGIC + struct.pack(
        "<III", DESCRIPTOR_VERSION, len(vectors), dim)
    body = np.array(vectors, dtype="<f4").tobytes() if vectors else b""
    Path(path).write_bytes(header + body)


def read_descriptors(path) -> list:
    """Read global descriptors; vectors are renormalized after the float32
    round trip so they satisfy the unit-norm invariant exactly."""
    raw = _read_bytes(path)
    if len(raw) < 16 or raw[:4] != DESCRIPTOR_MAGIC:
        raise InputError(f"{path}: not a descriptor file (bad magic)")
    version, n_images, dim = struct.unpack("<III", raw[4:16])
    if version != DESCRIPTOR_VERSION:
        raise InputError(f"{path}: unsupported descriptor version {version}")
    expected = 16 + 4 * n_images * dim
    if len(raw) != expected:
        raise InputError(f"{path}: expected {expected} bytes, got {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4", offset=16)
    rows = flat.reshape(n_images, dim).astype(np.float64)
    out = []
    for k, row in enumerate(rows):
        norm = float(np.linalg.norm(row))
        if norm < 1e-12:
            raise InputError(f"{path}: zero descriptor at row {k}")
        out.append(GlobalDescriptor(k, row / norm))
    return out


def write_keypoints(path, keypoints: dict) -> None:
    payload = {str(image_id): np.asarray(kps, dtype=float).tolist()
               for image_id, kps in sorted(keypoints.items())}
    write_json(path, {"keypoints": payload})


def read_keypoints(path) -> dict:
    payload = _read_json(path, "keypoints")
    out = {}
    for key, rows in payload.items():
        arr = np.asarray(rows, dtype=float).reshape(-1, 2)
        out[int(key)] = arr
    return out


def write_matches(path, matches: list) -> None:
    records = []
    for match in sorted(matches, key=lambda m: m.pair):
        rows = np.atleast_2d(np.asarray(match.indices, dtype=int))
        records.append({"pair": [int(match.pair[0]), int(match.pair[1])],
                        "indices": rows.tolist()})
    write_json(path, {"matches": records})


def read_matches(path) -> list:
    records = _read_json(path, "matches")
    out = []
    for rec in records:
        pair = tuple(int(v) for v in rec["pair"])
        if len(pair) != 2:
            raise InputError(f"{path}: bad pair {rec['pair']}")
        indices = np.asarray(rec["indices"], dtype=int).reshape(-1, 2)
        out.append(MatchSet(pair, indices))
    return out


def write_intrinsics(path, intrinsics: dict) -> None:
    payload = {}
    for image_id, intr in sorted(intrinsics.items()):
        payload[str(image_id)] = {name: float(getattr(intr, name))
                                  for name in _INTRINSICS_FIELDS}
    write_json(path, {"intrinsics": payload})


def read_intrinsics(path) -> dict:
    payload = _read_json(path, "intrinsics")
    out = {}
    for key, fields in payload.items():
        missing = [n for n in _INTRINSICS_FIELDS if n not in fields]
        if missing:
            raise InputError(f"{path}: intrinsics {key} missing {missing}")
        out[int(key)] = CameraIntrinsics(
            **{n: float(fields[n]) for n in _INTRINSICS_FIELDS})
    return out


def write_poses(path, poses) -> None:
    """Write camera-to-world poses, one line per registered camera.

    Args:
        path: output file.
        poses: mapping camera_id -> Pose3, or a sequence where ``None``
            marks unregistered cameras (omitted from the file).
    """
    if isinstance(poses, dict):
        items = sorted(poses.items())
    else:
        items = [(i, p) for i, p in enumerate(poses) if p is not None]
    lines = ["# camera_id qw qx qy qz tx ty tz (camera-to-world, t = center)"]
    for camera_id, pose in items:
        xyzw = _ScipyRotation.from_matrix(pose.rotation).as_quat()
        wxyz = [xyzw[3], xyzw[0], xyzw[1], xyzw[2]]
        fields = ([str(int(camera_id))] + [_fmt(q) for q in wxyz]
                  + [_fmt(t) for t in pose.translation])
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path) -> dict:
    """Read a poses file into a dict camera_id -> Pose3."""
    out = {}
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise InputError(f"{path}:{lineno}: expected 8 fields, "
                             f"got {len(parts)}")
        try:
            camera_id = int(parts[0])
            values = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from exc
        w, x, y, z = values[0:4]
        norm = float(np.linalg.norm([w, x, y, z]))
        if norm < 1e-12:
            raise InputError(f"{path}:{lineno}: zero quaternion")
        rot = _ScipyRotation.from_quat(
            [x / norm, y / norm, z / norm, w / norm]).as_matrix()
        out[camera_id] = Pose3(rot, np.array(values[4:7]))
    return out


def write_view_graph_csv(path, records: dict) -> None:
    """Per-edge cycle diagnostics; ``records`` maps edge -> CycleErrorRecord."""
    lines = ["i,j,min_cycle_error_deg,median_cycle_error_deg,"
             "kept_stage1,kept_stage2"]
    for edge in sorted(records):
        rec = records[edge]
        lines.append(",".join([
            str(int(edge[0])), str(int(edge[1])),
            _fmt(rec.min_error), _fmt(rec.median_error),
            str(int(rec.kept_stage1)), str(int(rec.kept_stage2))]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_direction_violations_csv(path, measurements: list,
                                   fractions, kept: list) -> None:
    """Per-measurement ordering-violation fractions from the direction filter.

    Args:
        path: output file.
        measurements: the DirectionMeasurement list that was filtered.
        fractions: violation fraction per measurement, aligned with input.
        kept: the surviving measurement list (identity-based membership).
    """
    surviving = {id(m) for m in kept}
    lines = ["kind,a,b,violation_fraction,removed"]
    for m, frac in zip(measurements, fractions):
        lines.append(",".join([
            m.kind, str(m.a), str(m.b), _fmt(frac),
            str(int(id(m) not in surviving))]))
    Path(path).write_text("\n".join(lines) + "\n")


def _frustum_points(pose: Pose3, intr, depth: float) -> np.ndarray:
    if intr is not None:
        half_x = intr.u0 / intr.f
        half_y = intr.v0 / intr.f
    else:
        half_x, half_y = 0.5, 0.4
    corners_cam = np.array([
        [0.0, 0.0, 0.0],
        [-half_x, -half_y, 1.0],
        [half_x, -half_y, 1.0],
        [half_x, half_y, 1.0],
        [-half_x, half_y, 1.0],
    ]) * depth
    return pose.transform(corners_cam)


def export_ply(path, points, poses, intrinsics=None,
               frustum_depth: float = 0.3) -> None:
    """ASCII PLY point cloud: white landmarks plus red camera frusta.

    Every camera contributes five red vertices (its center and the four
    image-corner rays at ``frustum_depth``).  With no landmarks and no poses
    the file is a valid zero-vertex PLY.

    Args:
        path: output file.
        points: (P, 3) array (or empty) of landmark positions.
        poses: iterable of camera-to-world Pose3 (``None`` entries skipped).
        intrinsics: optional per-camera intrinsics list aligned with
            ``poses`` (or a single CameraIntrinsics) shaping the frusta.
        frustum_depth: frustum size in scene units.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    pose_list = [p for p in poses if p is not None]
    vertices = [(p, (255, 255, 255)) for p in points]
    for k, pose in enumerate(pose_list):
        if intrinsics is None:
            intr = None
        elif isinstance(intrinsics, CameraIntrinsics):
            intr = intrinsics
        else:
            intr = intrinsics[k]
        for corner in _frustum_points(pose, intr, frustum_depth):
            vertices.append((corner, (255, 0, 0)))
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(vertices)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for xyz, rgb in vertices:
        lines.append(" ".join([_fmt(v) for v in xyz]
                              + [str(c) for c in rgb]))
    Path(path).write_text("\n".join(lines) + "\n")
