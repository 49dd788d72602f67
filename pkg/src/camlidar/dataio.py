"""Readers and writers for every on-disk format.

Formats
-------
trajectory (TUM)
    ``timestamp tx ty tz qx qy qz qw`` per line, ``#`` comments.
cloud
    ``x y z`` per line; frame ids and timestamps live in a manifest CSV
    ``frame_id,timestamp,path`` (paths relative to the manifest).
correspondences
    CSV with header ``frame_id,u,v,x,y,z``.
intrinsics / config
    flat ``key=value`` entries, ``#`` comments.
calibration result
    JSON with a fixed key order, numbers rounded to 10 significant digits.

Numeric fields are parsed with a strict decimal grammar: no ``nan``/``inf``,
no digit separators, ``.`` as the decimal point regardless of locale.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IoError, MissingKey, NonMonotonic, NotUnit, ParseError
from .geometry import CameraIntrinsics, Pose, Quat

log = logging.getLogger(__name__)

_NUMBER = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_INT = re.compile(r"[+-]?\d+")

QUAT_UNIT_TOLERANCE = 1e-3
RESULT_DIGITS = 10


def parse_float(token, line=None, path=None):
    if not _NUMBER.fullmatch(token):
        raise ParseError(f"malformed number {token!r}", line, path)
    return float(token)


def parse_int(token, line=None, path=None):
    if not _INT.fullmatch(token):
        raise ParseError(f"malformed integer {token!r}", line, path)
    return int(token)


def fmt_float(x):
    """Shortest text that reads back to the identical double."""
    return repr(float(x))


def _read_text(path):
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            return f.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def _write_text(path, text):
    """Write via a temporary file so a failed write leaves no partial output."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    sensor_label: str
    poses: list

    def __post_init__(self):
        stamps = [p.t_stamp for p in self.poses]
        for i in range(1, len(stamps)):
            if not stamps[i] > stamps[i - 1]:
                raise NonMonotonic(
                    f"timestamps not strictly increasing at index {i} "
                    f"({stamps[i - 1]!r} -> {stamps[i]!r})")

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    @property
    def stamps(self):
        return np.array([p.t_stamp for p in self.poses])

    def truncated(self, n):
        return Trajectory(self.sensor_label, list(self.poses[:n]))


def read_trajectory(path, sensor_label=None) -> Trajectory:
    text = _read_text(path)
    poses = []
    last_t = None
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) != 8:
            raise ParseError(f"expected 8 fields, got {len(tokens)}", lineno, path)
        t, tx, ty, tz, qx, qy, qz, qw = (parse_float(tok, lineno, path) for tok in tokens)
        q = np.array([qw, qx, qy, qz])
        n = float(np.linalg.norm(q))
        if abs(n - 1.0) > QUAT_UNIT_TOLERANCE:
            raise NotUnit(f"quaternion norm {n:.6g} deviates from 1", lineno, path)
        if abs(n - 1.0) > 1e-9:
            log.info("%s:%d: renormalized quaternion (norm %.9g)", path, lineno, n)
        if last_t is not None and not t > last_t:
            raise NonMonotonic(f"timestamp {t!r} not after {last_t!r}", lineno, path)
        last_t = t
        poses.append(Pose(t, Quat.from_array(q), (tx, ty, tz)))
    if not poses:
        raise ParseError("empty trajectory", path=path)
    label = sensor_label if sensor_label is not None else Path(path).stem
    return Trajectory(label, poses)


def format_trajectory(traj: Trajectory) -> str:
    lines = [f"# {traj.sensor_label}: timestamp tx ty tz qx qy qz qw"]
    for p in traj.poses:
        q = p.rot
        vals = (p.t_stamp, *p.trans, q.x, q.y, q.z, q.w)
        lines.append(" ".join(fmt_float(v) for v in vals))
    return "\n".join(lines) + "\n"


def write_trajectory(traj: Trajectory, path):
    _write_text(path, format_trajectory(traj))


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------

@dataclass
class PointCloudFrame:
    frame_id: int
    t_stamp: float
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ParseError(f"non-finite coordinates in cloud {self.frame_id}")

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class ManifestEntry:
    frame_id: int
    t_stamp: float
    path: str


def read_cloud(path, frame_id=0, t_stamp=0.0) -> PointCloudFrame:
    text = _read_text(path)
    rows = []
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) != 3:
            raise ParseError(f"expected 3 fields, got {len(tokens)}", lineno, path)
        rows.append([parse_float(tok, lineno, path) for tok in tokens])
    points = np.array(rows, dtype=float).reshape(-1, 3)
    log.debug("read %d points from %s", len(points), path)
    return PointCloudFrame(frame_id, t_stamp, points)


def write_cloud(cloud: PointCloudFrame, path):
    _write_text(path, "".join(" ".join(fmt_float(v) for v in p) + "\n" for p in cloud.points))


def read_manifest(path) -> list:
    text = _read_text(path)
    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["frame_id", "timestamp", "path"]:
        raise ParseError("manifest header must be 'frame_id,timestamp,path'", 1, path)
    entries, seen = [], set()
    for rowno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 3:
            raise ParseError(f"expected 3 columns, got {len(row)}", rowno, path)
        fid = parse_int(row[0].strip(), rowno, path)
        if fid in seen:
            raise ParseError(f"duplicate frame_id {fid}", rowno, path)
        seen.add(fid)
        entries.append(ManifestEntry(fid, parse_float(row[1].strip(), rowno, path), row[2].strip()))
    return entries


def write_manifest(entries, path):
    lines = ["frame_id,timestamp,path"]
    lines += [f"{e.frame_id},{fmt_float(e.t_stamp)},{e.path}" for e in entries]
    _write_text(path, "\n".join(lines) + "\n")


def load_clouds(manifest_path) -> list:
    base = Path(manifest_path).parent
    return [read_cloud(base / e.path, e.frame_id, e.t_stamp) for e in read_manifest(manifest_path)]


# ---------------------------------------------------------------------------
# correspondences
# ---------------------------------------------------------------------------

CORR_HEADER = ["frame_id", "u", "v", "x", "y", "z"]


@dataclass
class CorrespondenceSet:
    """2D-3D constraints of one image / point-cloud pair.

    ``p_lidar`` holds LiDAR points (already brought to the image timestamp),
    ``p_cmr`` the pixels they should project to.  ``is_outlier`` is only set by
    the synthetic provider and is never written to disk.
    """

    frame_id: int
    p_lidar: np.ndarray
    p_cmr: np.ndarray
    is_outlier: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.p_lidar = np.asarray(self.p_lidar, dtype=float).reshape(-1, 3)
        self.p_cmr = np.asarray(self.p_cmr, dtype=float).reshape(-1, 2)
        if len(self.p_lidar) != len(self.p_cmr):
            raise ValueError("p_lidar and p_cmr lengths differ")

    def __len__(self):
        return len(self.p_lidar)

    def take(self, idx):
        idx = np.asarray(idx, dtype=int)
        out = None if self.is_outlier is None else self.is_outlier[idx]
        return CorrespondenceSet(self.frame_id, self.p_lidar[idx], self.p_cmr[idx], out)


def read_correspondences(path, intrinsics: CameraIntrinsics | None = None) -> list:
    """Rows grouped by ``frame_id`` in order of first appearance.

    When ``intrinsics`` is given, pixels outside the image are rejected.
    """
    text = _read_text(path)
    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != CORR_HEADER:
        raise ParseError("correspondence header must be 'frame_id,u,v,x,y,z'", 1, path)
    groups = {}
    for rowno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 6:
            raise ParseError(f"expected 6 columns, got {len(row)}", rowno, path)
        fid = parse_int(row[0].strip(), rowno, path)
        u, v, x, y, z = (parse_float(tok.strip(), rowno, path) for tok in row[1:])
        if intrinsics is not None and not (0 <= u < intrinsics.width and 0 <= v < intrinsics.height):
            raise ParseError(f"pixel ({u}, {v}) outside the image", rowno, path)
        groups.setdefault(fid, ([], []))
        groups[fid][0].append((x, y, z))
        groups[fid][1].append((u, v))
    return [CorrespondenceSet(fid, np.array(p3), np.array(p2)) for fid, (p3, p2) in groups.items()]


def format_correspondences(sets) -> str:
    lines = [",".join(CORR_HEADER)]
    for s in sets:
        for (u, v), (x, y, z) in zip(s.p_cmr, s.p_lidar):
            lines.append(",".join([str(int(s.frame_id))] + [fmt_float(c) for c in (u, v, x, y, z)]))
    return "\n".join(lines) + "\n"


def write_correspondences(sets, path):
    _write_text(path, format_correspondences(sets))


# ---------------------------------------------------------------------------
# key=value files (intrinsics, run configuration)
# ---------------------------------------------------------------------------

def parse_key_values(text, path=None) -> dict:
    """Parse flat ``key=value`` entries; several may share a line."""
    out = {}
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for tok in line.split():
            key, sep, value = tok.partition("=")
            if not sep or not key:
                raise ParseError(f"expected key=value, got {tok!r}", lineno, path)
            out[key.strip()] = value.strip()
    return out


def read_key_values(path) -> dict:
    return parse_key_values(_read_text(path), path)


def read_intrinsics(path) -> CameraIntrinsics:
    kv = read_key_values(path)
    vals = {}
    for key in ("fx", "fy", "cx", "cy"):
        if key not in kv:
            raise MissingKey(key, path)
        vals[key] = parse_float(kv[key], path=path)
    for key in ("width", "height"):
        if key not in kv:
            raise MissingKey(key, path)
        vals[key] = parse_int(kv[key], path=path)
    return CameraIntrinsics(**vals)


def write_intrinsics(k: CameraIntrinsics, path):
    _write_text(path, "".join(f"{key}={fmt_float(getattr(k, key))}\n" for key in ("fx", "fy", "cx", "cy"))
                + f"width={k.width}\nheight={k.height}\n")


# ---------------------------------------------------------------------------
# calibration results
# ---------------------------------------------------------------------------

@dataclass
class CalibResult:
    """Estimated LiDAR-to-camera transform plus diagnostics.

    ``rotation_matrix`` is carried alongside the quaternion so that a result
    read from disk is re-emitted with exactly the digits it was read with.
    """

    rotation: Quat
    translation: np.ndarray
    rotation_matrix: np.ndarray | None = None
    scales: list = field(default_factory=list)
    costs: dict = field(default_factory=dict)
    observability: list = field(default_factory=list)
    metrics: dict | None = None

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if self.rotation_matrix is None:
            self.rotation_matrix = self.rotation.matrix()
        self.rotation_matrix = np.asarray(self.rotation_matrix, dtype=float).reshape(3, 3)
        self.scales = [float(s) for s in self.scales]
        if any(not s > 0 for s in self.scales):
            raise ValueError("scales must be positive")

    @classmethod
    def from_pose(cls, pose: Pose, **kw):
        return cls(pose.rot, pose.trans, **kw)

    def pose(self):
        return Pose(0.0, self.rotation, self.translation)


def _round(x):
    return float(f"{float(x):.{RESULT_DIGITS}g}")


def _rounded(obj):
    if isinstance(obj, dict):
        return {k: _rounded(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_rounded(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)) or obj is None or isinstance(obj, str):
        return bool(obj) if isinstance(obj, np.bool_) else obj
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    return _round(obj)


def result_to_dict(r: CalibResult) -> dict:
    q = r.rotation
    return {
        "rotation_quaternion": _rounded([q.w, q.x, q.y, q.z]),
        "rotation_matrix": _rounded(r.rotation_matrix.reshape(-1)),
        "translation": _rounded(r.translation),
        "scales": _rounded(r.scales),
        "costs": _rounded(r.costs),
        "observability": _rounded(r.observability),
        "metrics": _rounded(r.metrics) if r.metrics is not None else None,
    }


def format_calib_result(r: CalibResult) -> str:
    return json.dumps(result_to_dict(r), indent=2) + "\n"


def write_calib_result(r: CalibResult, path):
    _write_text(path, format_calib_result(r))


def read_calib_result(path) -> CalibResult:
    text = _read_text(path)
    try:
        d = json.loads(text)
        q = Quat.from_array(d["rotation_quaternion"])
        R = np.array(d.get("rotation_matrix") or q.matrix().reshape(-1), dtype=float).reshape(3, 3)
        return CalibResult(
            rotation=q,
            translation=np.array(d["translation"], dtype=float),
            rotation_matrix=R,
            scales=d.get("scales", []),
            costs=d.get("costs", {}),
            observability=d.get("observability", []),
            metrics=d.get("metrics"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed calibration result: {exc}", path=path) from exc
