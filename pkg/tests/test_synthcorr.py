import numpy as np
import pytest

from camlidar.calib import CorrResidual, init_rotation_closed_form
from camlidar.dataio import CorrespondenceSet
from camlidar.errors import DegenerateRotations, InvalidSpec, NoVisiblePoints
from camlidar.geometry import CameraIntrinsics, compose, relative
from camlidar.robustls import StateVector
from camlidar.synthcorr import (DEFAULT_INTRINSICS, NoiseSpec, ScenarioSpec, generate_scenario,
                                rotation_excitation_deg, subsample, synth_correspondences, write_bundle)
from camlidar.sync import pair_trajectories, relative_motions

K = DEFAULT_INTRINSICS


def corr_residuals(sets, t_gt):
    st = StateVector.from_pose(t_gt)
    p = np.concatenate([c.p_lidar for c in sets])
    uv = np.concatenate([c.p_cmr for c in sets])
    ev = CorrResidual(p, uv, K).evaluate(st)
    assert ev.valid.all()
    return ev.e


def test_figure_eight_shape_and_excitation(noiseless_scenario):
    sc = noiseless_scenario
    assert len(sc.cam) == len(sc.lidar) == 600
    exc = rotation_excitation_deg(sc.lidar)
    assert np.sum(exc > 5.0) >= 2


def test_straight_line_degenerate():
    sc = generate_scenario(ScenarioSpec(profile="straight_line", duration=10.0))
    pairs = relative_motions(pair_trajectories(sc.cam, sc.lidar).frames)
    for p in pairs:
        assert abs(p.T_lidar.rot.w - 1.0) < 1e-12
    with pytest.raises(DegenerateRotations):
        init_rotation_closed_form(pairs)


def test_conjugation_identity(noiseless_scenario):
    sc = noiseless_scenario
    X = sc.t_gt
    for i in range(len(sc.lidar) - 1):
        Tl = relative(sc.lidar[i], sc.lidar[i + 1])
        Tc = relative(sc.cam[i], sc.cam[i + 1])
        Tc = type(Tc)(Tc.t_stamp, Tc.rot, Tc.trans * sc.scales_gt[i])
        a, b = compose(Tc, X), compose(X, Tl)
        assert np.abs(a.matrix() - b.matrix()).max() < 1e-12


def test_scale_drift_keeps_rotation():
    spec = ScenarioSpec(duration=20.0, rng_seed=4)
    a = generate_scenario(spec, NoiseSpec())
    b = generate_scenario(spec, NoiseSpec(cam_scale_drift=1.01))
    qa = np.array([p.rot.as_array() for p in a.cam.poses])
    qb = np.array([p.rot.as_array() for p in b.cam.poses])
    assert np.array_equal(qa, qb)
    assert not np.allclose(a.cam[-1].trans, b.cam[-1].trans)
    assert np.allclose(b.scales_gt[1:] / b.scales_gt[:-1], 1.01)


def test_noiseless_correspondences_exact(noiseless_scenario, noiseless_corr):
    e = corr_residuals(noiseless_corr, noiseless_scenario.t_gt)
    assert np.abs(e).max() < 1e-9
    for c in noiseless_corr:
        assert 10 <= len(c) <= 200
        assert np.all(K.contains(c.p_cmr))


def test_pixel_noise_std(noiseless_scenario):
    corr = synth_correspondences(noiseless_scenario, K, NoiseSpec(pixel_sigma=1.0), per_frame=200, seed=1)
    e = corr_residuals(corr, noiseless_scenario.t_gt)
    assert e.size >= 10_000
    assert 0.9 <= e.std() <= 1.1


def test_outlier_contamination(noiseless_scenario):
    corr = synth_correspondences(noiseless_scenario, K, NoiseSpec(outlier_rate=0.2), per_frame=400, seed=2)
    flags = np.concatenate([c.is_outlier for c in corr])
    assert flags.size >= 10_000
    assert 0.17 <= flags.mean() <= 0.23
    e = corr_residuals(corr, noiseless_scenario.t_gt)
    assert np.abs(e[~flags]).max() < 1e-9
    assert np.abs(e[flags]).max() <= 50.0 + 1e-9


def test_subsample():
    rng = np.random.default_rng(0)
    cs = CorrespondenceSet(0, rng.normal(size=(20000, 3)), rng.uniform(0, 400, (20000, 2)))
    sub = subsample(cs, 0.05, 11)
    assert len(sub) == 1000
    assert len(np.unique(sub.p_lidar[:, 0])) == 1000
    assert subsample(cs, 1.0, 11) is cs
    again = subsample(cs, 0.05, 11)
    assert np.array_equal(sub.p_lidar, again.p_lidar)
    other = subsample(cs, 0.05, 12)
    assert not np.array_equal(sub.p_lidar, other.p_lidar)
    tiny = CorrespondenceSet(0, np.ones((3, 3)), np.ones((3, 2)))
    assert len(subsample(tiny, 0.01, 0)) == 1
    with pytest.raises(ValueError):
        subsample(cs, 0.0, 0)


def test_bundle_byte_identical(tmp_path):
    noise = NoiseSpec(odo_rot_sigma=0.1, odo_trans_sigma=0.01, pixel_sigma=1.0, outlier_rate=0.2)
    spec = ScenarioSpec(duration=10.0, n_cloud_frames=5, rng_seed=9)
    dirs = []
    for name in ("a", "b"):
        sc = generate_scenario(spec, noise)
        corr = synth_correspondences(sc, K, noise, per_frame=50)
        write_bundle(sc, corr, tmp_path / name)
        dirs.append(tmp_path / name)
    files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file())
    assert len(files) == 5 + 7
    for f in files:
        assert (dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes()


@pytest.mark.parametrize("kwargs", [
    {"profile": "spiral"}, {"rate": 0.0}, {"duration": 0.3}, {"cam_scale": -1.0}, {"n_cloud_frames": 0},
])
def test_invalid_scenario_spec(kwargs):
    with pytest.raises(InvalidSpec):
        ScenarioSpec(**kwargs)


@pytest.mark.parametrize("kwargs", [{"pixel_sigma": -1.0}, {"outlier_rate": 1.0}, {"cam_scale_drift": 0.0}])
def test_invalid_noise_spec(kwargs):
    with pytest.raises(InvalidSpec):
        NoiseSpec(**kwargs)


def test_no_visible_points(noiseless_scenario):
    tiny = CameraIntrinsics(fx=500.0, fy=500.0, cx=0.5, cy=0.5, width=1, height=1)
    with pytest.raises(NoVisiblePoints):
        synth_correspondences(noiseless_scenario, tiny)
