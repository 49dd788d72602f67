import math

import numpy as np
import pytest

from camlidar.dataio import PointCloudFrame, Trajectory
from camlidar.errors import FrameMismatch, NoOverlap, TooFewPairs
from camlidar.geometry import Pose, Quat, compose, inverse, relative
from camlidar.sync import (SyncedFrame, compensate_cloud, lidar_pose_at, pair_trajectories,
                           relative_motions, scale_init)

from conftest import assert_pose_close, random_pose, rz


def traj(stamps, poses=None, label="x"):
    if poses is None:
        poses = [Pose(t, Quat.identity(), [t, 0.0, 0.0]) for t in stamps]
    return Trajectory(label, [p.with_stamp(t) for p, t in zip(poses, stamps)])


def moving(stamps, rng=None):
    """Smooth 3D motion sampled at ``stamps``."""
    out = []
    for t in stamps:
        q = Quat.from_rotvec([0.3 * math.sin(t), 0.2 * math.cos(0.7 * t), 0.5 * t])
        out.append(Pose(t, q, [3 * math.sin(t), 2 * t, 0.5 * math.cos(t)]))
    return out


def test_identical_grids_use_exact_lidar_poses():
    stamps = np.arange(0, 2, 0.1)
    lidar = traj(stamps, moving(stamps))
    cam = traj(stamps)
    res = pair_trajectories(cam, lidar)
    assert len(res.frames) == len(stamps)
    for f, p in zip(res.frames, lidar.poses):
        assert f.lidar_pose_interp.rot == p.rot
        assert np.array_equal(f.lidar_pose_interp.trans, p.trans)
        assert f.lidar_pose_interp.t_stamp == f.cam_pose.t_stamp


def test_midpoint_is_slerped():
    lidar = Trajectory("l", [Pose(0.0), Pose(0.1, rz(90), [1.0, 0.0, 0.0])])
    cam = Trajectory("c", [Pose(0.05)])
    f = pair_trajectories(cam, lidar).frames[0]
    assert_pose_close(f.lidar_pose_interp, Pose(0.05, rz(45), [0.5, 0.0, 0.0]), 1e-12)


def test_interpolation_matches_scalar_path():
    rng = np.random.default_rng(0)
    lstamps = np.arange(0, 5, 0.1)
    lidar = traj(lstamps, moving(lstamps))
    cstamps = np.sort(rng.uniform(0.0, 4.9, 40))
    res = pair_trajectories(traj(cstamps), lidar)
    for f in res.frames:
        ref = lidar_pose_at(lidar, f.t_stamp)
        assert_pose_close(f.lidar_pose_interp, ref, 1e-12)


def test_stamp_past_end_is_dropped():
    lidar = traj(np.arange(0, 1.01, 0.1))
    cam = traj([0.5, 1.05])
    res = pair_trajectories(cam, lidar)
    assert [f.t_stamp for f in res.frames] == [0.5]
    assert res.out_of_range == 1


def test_gap_drops_and_counts():
    lidar = traj([0.0, 0.1, 0.2, 0.6, 0.7])
    cam = traj([0.05, 0.15, 0.3, 0.4, 0.5, 0.65])
    res = pair_trajectories(cam, lidar, max_gap=0.15)
    assert [round(f.t_stamp, 3) for f in res.frames] == [0.05, 0.15, 0.65]
    assert res.dropped == 3
    in_range = sum(1 for p in cam.poses if 0.0 <= p.t_stamp <= 0.7)
    assert len(res.frames) + res.dropped == in_range


def test_no_overlap():
    with pytest.raises(NoOverlap):
        pair_trajectories(traj([5.0, 6.0]), traj([0.0, 1.0]))


def test_interpolation_is_continuous_in_time():
    lstamps = np.arange(0, 3, 0.1)
    lidar = traj(lstamps, moving(lstamps))
    rng = np.random.default_rng(1)
    for t in rng.uniform(0.0, 2.8, 50):
        a = lidar_pose_at(lidar, t)
        b = lidar_pose_at(lidar, t + 1e-6)
        rel = relative(a, b)
        assert np.linalg.norm(rel.trans) < 1e-3 and rel.rot.angle() < 1e-3


def test_relative_motions_static_raises():
    stamps = np.arange(0, 1, 0.1)
    static = traj(stamps, [Pose(0.0)] * len(stamps))
    res = pair_trajectories(static, static)
    with pytest.raises(TooFewPairs):
        relative_motions(res.frames)


def test_relative_motions_identical_sensors():
    stamps = np.arange(0, 2, 0.1)
    line = traj(stamps)
    pairs = relative_motions(pair_trajectories(line, line).frames)
    assert len(pairs) == len(stamps) - 1
    for p in pairs:
        assert_pose_close(p.T_cam, p.T_lidar, 1e-12)
        assert p.t1 > p.t0


def test_relative_motions_definition():
    stamps = np.arange(0, 2, 0.1)
    lidar = traj(stamps, moving(stamps))
    res = pair_trajectories(lidar, lidar)
    for p in relative_motions(res.frames):
        a, b = res.frames[p.index], res.frames[p.index + 1]
        assert_pose_close(p.T_lidar, compose(inverse(a.lidar_pose_interp), b.lidar_pose_interp), 1e-12)
        assert p.T_lidar.t_stamp == a.t_stamp


def test_relative_motions_hand_eye_consistent():
    rng = np.random.default_rng(2)
    T_gt = random_pose(rng, scale=1.0)
    stamps = np.arange(0, 3, 0.1)
    lidar = moving(stamps)
    # camera world poses such that T_cam_i T_gt = T_gt T_lidar_i
    cam = [compose(compose(T_gt, p), inverse(T_gt)).with_stamp(p.t_stamp) for p in lidar]
    pairs = relative_motions(pair_trajectories(traj(stamps, cam), traj(stamps, lidar)).frames)
    for p in pairs:
        assert_pose_close(compose(p.T_cam, T_gt), compose(T_gt, p.T_lidar), 1e-12)


def test_stationary_pairs_dropped():
    # frames 3 -> 4 move 5 mm without rotating: below both thresholds
    stamps = np.arange(0, 1.0, 0.1)
    x = [float(i) for i in range(len(stamps))]
    x[3], x[4] = 0.0, 0.005
    tr = traj(stamps, [Pose(t, Quat.identity(), [xi, 0.0, 0.0]) for t, xi in zip(stamps, x)])
    pairs = relative_motions(pair_trajectories(tr, tr).frames)
    assert 3 not in [p.index for p in pairs]
    assert len(pairs) == len(stamps) - 2


def test_shift_invariance():
    rng = np.random.default_rng(3)
    stamps = np.arange(0, 2, 0.1)
    lidar = moving(stamps)
    cam = [compose(p, Pose(0.0, rz(20), [0.1, 0.2, 0.3])).with_stamp(p.t_stamp) for p in lidar]
    W = random_pose(rng)
    base = relative_motions(pair_trajectories(traj(stamps, cam), traj(stamps, lidar)).frames)
    moved = relative_motions(pair_trajectories(
        traj(stamps, [compose(W, p) for p in cam]), traj(stamps, [compose(W, p) for p in lidar])).frames)
    for a, b in zip(base, moved):
        assert_pose_close(a.T_cam, b.T_cam, 1e-12)
        assert_pose_close(a.T_lidar, b.T_lidar, 1e-12)


def test_scale_init():
    assert scale_init([2.0, 0.0, 0.0], [1.0, 0.0, 0.0]) == 2.0
    assert scale_init([1.0, 0.0, 0.0], [0.0, 0.0, 0.0]) == 1e3
    assert scale_init([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]) == 1e-3


# -- clouds -------------------------------------------------------------------

def test_nearest_cloud_and_identity_compensation():
    stamps = np.arange(0, 1.01, 0.1)
    lidar = traj(stamps, moving(stamps))
    cam = traj([0.3, 0.52])
    res = pair_trajectories(cam, lidar, clouds=[(7, 0.3), (8, 0.5), (9, 0.9)])
    f0, f1 = res.frames
    assert f0.nearest_cloud_id == 7
    assert f0.compensation.rot == Quat.identity() and np.array_equal(f0.compensation.trans, np.zeros(3))
    assert f1.nearest_cloud_id == 8
    expected = relative(lidar_pose_at(lidar, 0.52), lidar_pose_at(lidar, 0.5))
    assert_pose_close(f1.compensation, expected, 1e-12)


def test_compensation_convention_pure_translation():
    # LiDAR moves +1 m along x between cloud time and camera time: a static
    # world point appears 1 m closer along x in the LiDAR frame at camera time.
    lidar = Trajectory("l", [Pose(0.0), Pose(1.0, Quat.identity(), [1.0, 0.0, 0.0])])
    cam = Trajectory("c", [Pose(1.0, Quat.identity(), [0.0, 0.0, 0.0])])
    res = pair_trajectories(cam, lidar, max_gap=2.0, clouds=[(0, 0.0)])
    f = res.frames[0]
    assert np.allclose(f.compensation.trans, [-1.0, 0.0, 0.0])
    cloud = PointCloudFrame(0, 0.0, [[5.0, 1.0, 0.0]])
    out = compensate_cloud(cloud, f)
    assert np.allclose(out.points, [[4.0, 1.0, 0.0]])
    assert out.t_stamp == 1.0


def test_compensation_identity_and_round_trip():
    rng = np.random.default_rng(4)
    cloud = PointCloudFrame(3, 0.0, rng.normal(size=(50, 3)))
    ident = SyncedFrame(Pose(0.0), Pose(0.0), 3, Pose.identity())
    assert np.array_equal(compensate_cloud(cloud, ident).points, cloud.points)
    T = random_pose(rng)
    fwd = compensate_cloud(cloud, SyncedFrame(Pose(1.0), Pose(1.0), 3, T))
    back = compensate_cloud(fwd, SyncedFrame(Pose(0.0), Pose(0.0), 3, inverse(T)))
    assert np.max(np.abs(back.points - cloud.points)) < 1e-9


def test_compensation_frame_mismatch():
    cloud = PointCloudFrame(1, 0.0, np.zeros((1, 3)))
    with pytest.raises(FrameMismatch):
        compensate_cloud(cloud, SyncedFrame(Pose(0.0), Pose(0.0), 2, Pose.identity()))
