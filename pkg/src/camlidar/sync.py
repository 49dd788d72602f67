"""Time synchronization of the camera and LiDAR streams.

Camera timestamps are the reference.  The LiDAR odometry is interpolated to
every camera stamp, consecutive synchronized poses are differenced into
relative motions, and the temporally nearest point cloud is transported to the
camera stamp.

Compensation convention: a cloud captured at ``t_cloud`` is expressed in the
LiDAR frame at camera time ``t_cam`` by

    p' = inverse(P_lidar(t_cam)) @ P_lidar(t_cloud) @ p
"""
from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dataio import PointCloudFrame, Trajectory
from .errors import DegenerateInterval, FrameMismatch, NoOverlap, TooFewPairs
from .geometry import Pose, Quat, interpolate_pose, relative_arrays, slerp_array

log = logging.getLogger(__name__)

MAX_GAP = 0.15
MIN_MOTION = 0.01
MIN_ROT_DEG = 0.1
SCALE_CLAMP = (1e-3, 1e3)


@dataclass(frozen=True)
class SyncedFrame:
    cam_pose: Pose
    lidar_pose_interp: Pose
    nearest_cloud_id: int | None = None
    compensation: Pose = field(default_factory=Pose.identity)

    @property
    def t_stamp(self):
        return self.cam_pose.t_stamp


@dataclass
class SyncResult:
    frames: list
    dropped: int = 0
    out_of_range: int = 0

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]


@dataclass(frozen=True)
class MotionPair:
    index: int
    T_cam: Pose
    T_lidar: Pose
    scale_init: float
    t0: float
    t1: float


def lidar_pose_at(lidar: Trajectory, t: float, stamps=None, max_gap=math.inf):
    """Interpolated LiDAR pose at ``t``, or ``None`` if out of range or gapped."""
    stamps = lidar.stamps if stamps is None else stamps
    if t < stamps[0] or t > stamps[-1]:
        return None
    j = bisect.bisect_left(stamps, t)
    if stamps[j] == t:
        return lidar[j].with_stamp(t)
    lo, hi = lidar[j - 1], lidar[j]
    if t - lo.t_stamp > max_gap or hi.t_stamp - t > max_gap:
        return None
    return interpolate_pose(lo, hi, t)


def _pose_arrays(poses):
    q = np.array([(p.rot.w, p.rot.x, p.rot.y, p.rot.z) for p in poses]).reshape(-1, 4)
    t = np.array([p.trans for p in poses]).reshape(-1, 3)
    return q, t


def _interpolate_at(stamps, q, t, times, max_gap=math.inf):
    """Vectorized LiDAR interpolation at ``times`` (all inside the stamp range).

    Returns ``(q, t, ok)``; ``ok`` is False where a bracketing sample is more
    than ``max_gap`` away.  Exact stamp hits return the stored pose unchanged.
    """
    j = np.searchsorted(stamps, times, side="left")
    exact = stamps[np.minimum(j, len(stamps) - 1)] == times
    lo = np.clip(j - 1, 0, len(stamps) - 2)
    hi = lo + 1
    t0, t1 = stamps[lo], stamps[hi]
    interp = ~exact
    ok = exact | ((times - t0 <= max_gap) & (t1 - times <= max_gap))
    if np.any(interp & ok & (t1 - t0 < 1e-9)):
        raise DegenerateInterval("LiDAR stamps closer than 1e-9 s around a camera stamp")
    alpha = np.where(interp, (times - t0) / np.where(interp, t1 - t0, 1.0), 0.0)
    q_out = slerp_array(q[lo], q[hi], alpha)
    t_out = (1.0 - alpha)[:, None] * t[lo] + alpha[:, None] * t[hi]
    je = np.minimum(j, len(stamps) - 1)
    q_out[exact] = q[je[exact]]
    t_out[exact] = t[je[exact]]
    return q_out, t_out, ok


def _poses(stamps, q, t):
    return [Pose(float(s), Quat(*qi), ti) for s, qi, ti in zip(stamps, q, t)]


def pair_trajectories(cam: Trajectory, lidar: Trajectory, max_gap=MAX_GAP, clouds=None) -> SyncResult:
    """Synchronize the LiDAR trajectory to every camera timestamp.

    ``clouds`` (optional) is a sequence of :class:`PointCloudFrame` or
    ``(frame_id, t_stamp)`` tuples; each frame is linked to the nearest one in
    time together with the transform that carries it to the camera stamp.
    """
    if max_gap <= 0:
        raise ValueError("max_gap must be positive")
    if len(cam) < 1 or len(lidar) < 2:
        raise NoOverlap("need at least one camera pose and two LiDAR poses")
    lstamps = lidar.stamps
    cstamps = cam.stamps
    if cstamps[-1] < lstamps[0] or cstamps[0] > lstamps[-1]:
        raise NoOverlap(
            f"camera [{cstamps[0]}, {cstamps[-1]}] and LiDAR "
            f"[{lstamps[0]}, {lstamps[-1]}] time ranges do not intersect")
    lq, lt = _pose_arrays(lidar.poses)

    in_range = (cstamps >= lstamps[0]) & (cstamps <= lstamps[-1])
    idx = np.flatnonzero(in_range)
    times = cstamps[idx]
    q, t, ok = _interpolate_at(lstamps, lq, lt, times, max_gap)
    dropped = int(np.count_nonzero(~ok))
    idx, times, q, t = idx[ok], times[ok], q[ok], t[ok]
    lidar_poses = _poses(times, q, t)

    cids = [None] * len(idx)
    comps = [None] * len(idx)
    cloud_ids, cloud_ts = [], []
    for c in clouds or ():
        fid, ts = (c.frame_id, c.t_stamp) if isinstance(c, PointCloudFrame) else c
        cloud_ids.append(int(fid))
        cloud_ts.append(float(ts))
    if cloud_ts and len(idx):
        order = np.argsort(cloud_ts, kind="stable")
        cids_sorted = np.array(cloud_ids)[order]
        cts = np.array(cloud_ts)[order]
        j = np.searchsorted(cts, times, side="left")
        before = np.clip(j - 1, 0, len(cts) - 1)
        after = np.clip(j, 0, len(cts) - 1)
        # nearest cloud; ties go to the earlier one
        best = np.where(np.abs(cts[after] - times) < np.abs(cts[before] - times), after, before)
        cloud_in = (cts >= lstamps[0]) & (cts <= lstamps[-1])
        cq = np.tile([1.0, 0.0, 0.0, 0.0], (len(cts), 1))
        ct = np.zeros((len(cts), 3))
        if np.any(cloud_in):
            cq[cloud_in], ct[cloud_in], _ = _interpolate_at(lstamps, lq, lt, cts[cloud_in])
        has = cloud_in[best]
        rq, rt = relative_arrays(q, t, cq[best], ct[best])
        same = cts[best] == times
        for i in np.flatnonzero(has):
            cids[i] = int(cids_sorted[best[i]])
            if not same[i]:
                comps[i] = Pose(float(times[i]), Quat(*rq[i]), rt[i])

    frames = []
    for i, k in enumerate(idx):
        comp = comps[i] if comps[i] is not None else Pose.identity(float(times[i]))
        frames.append(SyncedFrame(cam[int(k)], lidar_poses[i], cids[i], comp))
    if dropped:
        log.info("dropped %d camera stamps with LiDAR gaps above %.3g s", dropped, max_gap)
    return SyncResult(frames, dropped, int(np.count_nonzero(~in_range)))


def scale_init(t_lidar, t_cam):
    s = np.linalg.norm(t_lidar) / max(np.linalg.norm(t_cam), 1e-9)
    return float(np.clip(s, *SCALE_CLAMP))


def relative_motions(frames, min_motion=MIN_MOTION, min_rot_deg=MIN_ROT_DEG) -> list:
    """Consecutive relative motions of both sensors, stationary pairs removed."""
    frames = list(frames)
    if len(frames) < 2:
        raise TooFewPairs(f"only {len(frames)} synchronized frames")
    stamps = np.array([f.t_stamp for f in frames])
    cq, ct = _pose_arrays([f.cam_pose for f in frames])
    lq, lt = _pose_arrays([f.lidar_pose_interp for f in frames])
    rcq, rct = relative_arrays(cq[:-1], ct[:-1], cq[1:], ct[1:])
    rlq, rlt = relative_arrays(lq[:-1], lt[:-1], lq[1:], lt[1:])
    lnorm = np.linalg.norm(rlt, axis=1)
    langle = 2.0 * np.arctan2(np.linalg.norm(rlq[:, 1:], axis=1), np.abs(rlq[:, 0]))
    moving = ~((lnorm < min_motion) & (langle < math.radians(min_rot_deg)))
    s0 = np.clip(lnorm / np.maximum(np.linalg.norm(rct, axis=1), 1e-9), *SCALE_CLAMP)
    pairs = []
    for i in np.flatnonzero(moving):
        t0, t1 = float(stamps[i]), float(stamps[i + 1])
        pairs.append(MotionPair(int(i), Pose(t0, Quat(*rcq[i]), rct[i]), Pose(t0, Quat(*rlq[i]), rlt[i]),
                                float(s0[i]), t0, t1))
    n_dropped = len(frames) - 1 - len(pairs)
    if n_dropped:
        log.info("dropped %d stationary motion pairs", n_dropped)
    if len(pairs) < 2:
        raise TooFewPairs(f"only {len(pairs)} non-stationary motion pairs")
    return pairs


def compensate_cloud(cloud: PointCloudFrame, frame: SyncedFrame) -> PointCloudFrame:
    """Express ``cloud`` in the LiDAR frame at the camera timestamp of ``frame``."""
    if frame.nearest_cloud_id is None or cloud.frame_id != frame.nearest_cloud_id:
        raise FrameMismatch(f"cloud {cloud.frame_id} is not the nearest cloud "
                            f"({frame.nearest_cloud_id}) of this frame")
    return PointCloudFrame(cloud.frame_id, frame.t_stamp, frame.compensation.apply(cloud.points))
