"""Synthetic rigs, trajectories, point clouds and 2D-3D correspondences.

A scenario drives a LiDAR along a motion profile through a static field of
world points.  The camera is rigidly attached through ``t_gt`` (LiDAR to
camera), so consecutive relative motions satisfy
``T_cam @ t_gt = t_gt @ T_lidar`` exactly before noise.  The camera odometry is
scale-ambiguous: the metric translation of pair ``i`` is divided by ``s_i``,
with ``s_0 = cam_scale`` and ``s_{i+1} = s_i * cam_scale_drift``.

The correspondence provider stands in for a learned matcher: it projects
visible cloud points through ``t_gt``, adds Gaussian pixel noise and replaces
a fraction of the pixels by gross uniform offsets.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import (CalibResult, CorrespondenceSet, ManifestEntry, PointCloudFrame, Trajectory,
                     write_calib_result, write_cloud, write_correspondences, write_intrinsics,
                     write_manifest, write_trajectory)
from .errors import InvalidSpec, NoVisiblePoints
from .geometry import CameraIntrinsics, Pose, Quat, compose, inverse, quat_to_matrix, so3_exp
from .sync import compensate_cloud, pair_trajectories

log = logging.getLogger(__name__)

PROFILES = ("figure_eight_3d", "planar_loop", "straight_line")
DEFAULT_INTRINSICS = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
LIDAR_HEIGHT = 1.7


def _default_t_gt():
    from .fixtures import kitti_pose
    return kitti_pose("left")


@dataclass(frozen=True)
class ScenarioSpec:
    t_gt: Pose = field(default_factory=_default_t_gt)
    duration: float = 60.0
    rate: float = 10.0
    profile: str = "figure_eight_3d"
    n_world_points: int = 20000
    world_half_extent: float = 40.0
    ground_fraction: float = 0.3
    n_cloud_frames: int = 50
    cloud_points: int = 5000
    cam_time_offset: float = 0.0
    cam_scale: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise InvalidSpec(f"unknown motion profile {self.profile!r}")
        if not self.rate > 0:
            raise InvalidSpec("rate must be positive")
        if self.n_samples < 4:
            raise InvalidSpec("duration x rate must give at least 4 samples")
        if not self.cam_scale > 0:
            raise InvalidSpec("cam_scale must be positive")
        if self.n_cloud_frames < 1 or self.n_world_points < 1:
            raise InvalidSpec("need at least one cloud frame and one world point")

    @property
    def n_samples(self):
        return int(round(self.duration * self.rate))


@dataclass(frozen=True)
class NoiseSpec:
    odo_rot_sigma: float = 0.0        # degrees per relative motion
    odo_trans_sigma: float = 0.0      # meters per relative motion
    cam_scale_drift: float = 1.0      # multiplicative scale change per pair
    pixel_sigma: float = 0.0          # pixels
    outlier_rate: float = 0.0
    outlier_max_offset: float = 50.0  # pixels

    def __post_init__(self):
        if min(self.odo_rot_sigma, self.odo_trans_sigma, self.pixel_sigma, self.outlier_max_offset) < 0:
            raise InvalidSpec("noise magnitudes must be non-negative")
        if not 0 <= self.outlier_rate < 1:
            raise InvalidSpec("outlier_rate must lie in [0, 1)")
        if not self.cam_scale_drift > 0:
            raise InvalidSpec("cam_scale_drift must be positive")


# ---------------------------------------------------------------------------
# motion profiles: world pose of the LiDAR as a function of time
# ---------------------------------------------------------------------------

def _euler_zyx(yaw, pitch, roll):
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    R = np.empty(np.shape(yaw) + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


def profile_poses(profile, t, duration):
    """World rotation matrices ``(n,3,3)`` and positions ``(n,3)`` at times ``t``."""
    t = np.asarray(t, dtype=float)
    if profile == "figure_eight_3d":
        w = 2 * np.pi / 30.0
        pos = np.stack([12 * np.sin(w * t), 6 * np.sin(2 * w * t), 1.0 * np.sin(3 * w * t)], axis=1)
        vel = np.stack([12 * w * np.cos(w * t), 12 * w * np.cos(2 * w * t)], axis=1)
        yaw = np.arctan2(vel[:, 1], vel[:, 0])
        pitch = np.radians(8.0) * np.sin(2 * np.pi * t / 7.0)
        roll = np.radians(8.0) * np.sin(2 * np.pi * t / 5.0 + 0.7)
    elif profile == "planar_loop":
        w = 2 * np.pi / 30.0
        pos = np.stack([15 * np.cos(w * t), 15 * np.sin(w * t), np.zeros_like(t)], axis=1)
        yaw = w * t + np.pi / 2
        pitch = roll = np.zeros_like(t)
    else:
        speed = 5.0
        start = -0.5 * speed * duration
        pos = np.stack([start + speed * t, np.zeros_like(t), np.zeros_like(t)], axis=1)
        yaw = pitch = roll = np.zeros_like(t)
    return _euler_zyx(yaw, pitch, roll), pos


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    spec: ScenarioSpec
    noise: NoiseSpec
    cam: Trajectory
    lidar: Trajectory
    clouds: list
    t_gt: Pose
    scales_gt: np.ndarray
    world_points: np.ndarray
    cloud_world_index: list

    def true_lidar_world(self, t):
        """Noise-free LiDAR pose in the world at time(s) ``t`` as (R, p)."""
        return profile_poses(self.spec.profile, np.atleast_1d(t), self.spec.duration)


def _noise_rotation(rng, sigma_deg, n):
    if sigma_deg <= 0:
        return np.broadcast_to(np.eye(3), (n, 3, 3))
    return so3_exp(rng.normal(0.0, math.radians(sigma_deg), size=(n, 3)))


def _integrate(stamps, R_rel, t_rel, label):
    poses = [Pose(stamps[0])]
    R = np.eye(3)
    p = np.zeros(3)
    for i in range(len(R_rel)):
        p = p + R @ t_rel[i]
        R = R @ R_rel[i]
        # re-orthonormalize to stop drift in long products
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        poses.append(Pose(stamps[i + 1], Quat.from_matrix(R), p))
    return Trajectory(label, poses)


def _relative(R, p):
    Rt = np.swapaxes(R[:-1], -1, -2)
    R_rel = Rt @ R[1:]
    t_rel = np.einsum("nij,nj->ni", Rt, p[1:] - p[:-1])
    return R_rel, t_rel


def _world_points(spec, rng):
    n = spec.n_world_points
    e = spec.world_half_extent
    n_ground = int(round(spec.ground_fraction * n))
    xy = rng.uniform(-e, e, size=(n, 2))
    z = rng.uniform(-LIDAR_HEIGHT, 10.0, size=n)
    z[:n_ground] = -LIDAR_HEIGHT
    return np.column_stack([xy, z])


def generate_scenario(spec: ScenarioSpec | None = None, noise: NoiseSpec | None = None) -> Scenario:
    spec = spec or ScenarioSpec()
    noise = noise or NoiseSpec()
    rng = np.random.default_rng([spec.rng_seed, 0])
    n = spec.n_samples
    l_stamps = np.arange(n) / spec.rate
    c_stamps = l_stamps + spec.cam_time_offset

    X = spec.t_gt.matrix()
    Xi = np.linalg.inv(X)

    # LiDAR odometry: noisy relative motions of the true trajectory
    Rl, pl = profile_poses(spec.profile, l_stamps, spec.duration)
    Rl_rel, tl_rel = _relative(Rl, pl)
    Rl_rel = Rl_rel @ _noise_rotation(rng, noise.odo_rot_sigma, n - 1)
    tl_rel = tl_rel + rng.normal(0.0, noise.odo_trans_sigma, size=tl_rel.shape)
    lidar = _integrate(l_stamps, Rl_rel, tl_rel, "lidar")

    # camera odometry: conjugated true motion, noise, unknown per-pair scale
    Rc_w, pc_w = profile_poses(spec.profile, c_stamps, spec.duration)
    Rc_rel_l, tc_rel_l = _relative(Rc_w, pc_w)
    T = np.zeros((n - 1, 4, 4))
    T[:, :3, :3] = Rc_rel_l
    T[:, :3, 3] = tc_rel_l
    T[:, 3, 3] = 1.0
    Tc = X @ T @ Xi
    Rc_rel = Tc[:, :3, :3] @ _noise_rotation(rng, noise.odo_rot_sigma, n - 1)
    tc_rel = Tc[:, :3, 3] + rng.normal(0.0, noise.odo_trans_sigma, size=(n - 1, 3))
    scales = spec.cam_scale * noise.cam_scale_drift ** np.arange(n - 1)
    cam = _integrate(c_stamps, Rc_rel, tc_rel / scales[:, None], "cam")

    # static world and LiDAR scans at evenly spaced scan indices
    world = _world_points(spec, rng)
    scan_idx = np.unique(np.round(np.linspace(0, n - 1, min(spec.n_cloud_frames, n))).astype(int))
    clouds, index = [], []
    for fid, j in enumerate(scan_idx):
        local = (world - pl[j]) @ Rl[j]
        r = np.linalg.norm(local, axis=1)
        sel = np.flatnonzero((r > 1.0) & (r < 80.0))
        if len(sel) > spec.cloud_points:
            sel = np.sort(rng.choice(sel, spec.cloud_points, replace=False))
        clouds.append(PointCloudFrame(fid, l_stamps[j], local[sel]))
        index.append(sel)

    return Scenario(spec, noise, cam, lidar, clouds, spec.t_gt, scales, world, index)


def rotation_excitation_deg(traj: Trajectory):
    """Per-axis range (degrees) of the trajectory's orientation relative to its start.

    Uses the rotation vector of each orientation, so small-angle ranges read
    directly as excitation about the body axes.
    """
    q0 = traj[0].rot
    rv = np.array([(q0.conjugate() * p.rot).rotvec() for p in traj.poses])
    return np.degrees(rv.max(axis=0) - rv.min(axis=0))


# ---------------------------------------------------------------------------
# correspondences
# ---------------------------------------------------------------------------

def synth_correspondences(scenario: Scenario, k: CameraIntrinsics = DEFAULT_INTRINSICS,
                          noise: NoiseSpec | None = None, per_frame=200, seed=None,
                          min_depth=2.0, max_depth=80.0, max_gap=0.15) -> list:
    """Noisy 2D-3D matches for every cloud, synchronized to the nearest camera frame.

    ``p_lidar`` is the cloud point carried to the camera timestamp with the
    odometry; ``p_cmr`` is derived from the true geometry.
    """
    noise = noise if noise is not None else scenario.noise
    rng = np.random.default_rng([scenario.spec.rng_seed, 1] if seed is None else [seed, 1])
    sync = pair_trajectories(scenario.cam, scenario.lidar, max_gap, clouds=scenario.clouds)
    by_cloud = {}
    for f in sync.frames:
        if f.nearest_cloud_id is None:
            continue
        cid = f.nearest_cloud_id
        t_cloud = scenario.clouds[cid].t_stamp
        if cid not in by_cloud or abs(f.t_stamp - t_cloud) < abs(by_cloud[cid].t_stamp - t_cloud):
            by_cloud[cid] = f

    X = scenario.t_gt.matrix()
    out = []
    for cloud, widx in zip(scenario.clouds, scenario.cloud_world_index):
        frame = by_cloud.get(cloud.frame_id)
        if frame is None:
            continue
        comp = compensate_cloud(cloud, frame)
        # true camera-frame coordinates at the camera timestamp
        Rw, pw = scenario.true_lidar_world(frame.t_stamp)
        local = (scenario.world_points[widx] - pw[0]) @ Rw[0]
        Xc = local @ X[:3, :3].T + X[:3, 3]
        z = Xc[:, 2]
        ok = (z >= max(min_depth, 1e-6)) & (z <= max_depth)
        uv = np.full((len(z), 2), np.nan)
        uv[ok, 0] = k.fx * Xc[ok, 0] / z[ok] + k.cx
        uv[ok, 1] = k.fy * Xc[ok, 1] / z[ok] + k.cy
        ok &= k.contains(np.nan_to_num(uv, nan=-1.0))
        vis = np.flatnonzero(ok)
        if len(vis) < 10:
            log.warning("frame %d: only %d visible points, skipped", cloud.frame_id, len(vis))
            continue
        if len(vis) > per_frame:
            vis = np.sort(rng.choice(vis, per_frame, replace=False))
        m = len(vis)
        pix = uv[vis] + rng.normal(0.0, noise.pixel_sigma, size=(m, 2)) if noise.pixel_sigma > 0 else uv[vis].copy()
        outlier = rng.random(m) < noise.outlier_rate
        offsets = rng.uniform(-noise.outlier_max_offset, noise.outlier_max_offset, size=(m, 2))
        pix[outlier] = uv[vis][outlier] + offsets[outlier]
        pix[:, 0] = np.clip(pix[:, 0], 0.0, np.nextafter(k.width, 0))
        pix[:, 1] = np.clip(pix[:, 1], 0.0, np.nextafter(k.height, 0))
        out.append(CorrespondenceSet(cloud.frame_id, comp.points[vis], pix, outlier))
    if not out:
        raise NoVisiblePoints("no frame sees at least 10 points")
    return out


def subsample(cset: CorrespondenceSet, fraction, seed) -> CorrespondenceSet:
    """Uniform sample without replacement of ``max(1, round(fraction * n))`` items."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = len(cset)
    size = min(n, max(1, int(math.floor(fraction * n + 0.5))))
    if size == n:
        return cset
    idx = np.sort(np.random.default_rng(seed).choice(n, size, replace=False))
    return cset.take(idx)


# ---------------------------------------------------------------------------
# on-disk bundle
# ---------------------------------------------------------------------------

def write_bundle(scenario: Scenario, corr_sets, out_dir, k: CameraIntrinsics = DEFAULT_INTRINSICS,
                 extra_config=None):
    """Write a dataset in the standard file formats plus a ready-to-run config."""
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    write_trajectory(scenario.cam, out / "cam.txt")
    write_trajectory(scenario.lidar, out / "lidar.txt")
    entries = []
    for c in scenario.clouds:
        rel = f"clouds/{c.frame_id:06d}.xyz"
        write_cloud(c, out / rel)
        entries.append(ManifestEntry(c.frame_id, c.t_stamp, rel))
    write_manifest(entries, out / "manifest.csv")
    write_correspondences(corr_sets, out / "correspondences.csv")
    write_intrinsics(k, out / "intrinsics.txt")
    write_calib_result(CalibResult.from_pose(scenario.t_gt, scales=list(scenario.scales_gt)),
                       out / "ground_truth.json")
    cfg = {
        "cam_trajectory": "cam.txt",
        "lidar_trajectory": "lidar.txt",
        "cloud_manifest": "manifest.csv",
        "correspondences": "correspondences.csv",
        "intrinsics": "intrinsics.txt",
        "reference": "ground_truth.json",
        "output": "result.json",
    }
    cfg.update(extra_config or {})
    text = "".join(f"{key}={value}\n" for key, value in cfg.items())
    (out / "calib.cfg").write_text(text, encoding="utf-8")
    return out / "calib.cfg"
