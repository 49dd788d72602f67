import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from camlidar.geometry import Pose, Quat
from camlidar.synthcorr import DEFAULT_INTRINSICS, ScenarioSpec, generate_scenario, synth_correspondences
from camlidar.sync import pair_trajectories, relative_motions


def rz(deg):
    return Quat.from_axis_angle([0, 0, 1], math.radians(deg))


def rx(deg):
    return Quat.from_axis_angle([1, 0, 0], math.radians(deg))


def random_quat(rng):
    q = rng.normal(size=4)
    return Quat.from_array(q / np.linalg.norm(q))


def random_pose(rng, t_stamp=0.0, scale=5.0):
    return Pose(t_stamp, random_quat(rng), rng.uniform(-scale, scale, 3))


def assert_pose_close(a, b, tol=1e-9):
    ang = Rotation.from_matrix(a.rot.matrix() @ b.rot.matrix().T).magnitude()
    assert ang < tol, ang
    assert np.linalg.norm(a.trans - b.trans) < tol


@pytest.fixture(scope="session")
def noiseless_scenario():
    return generate_scenario(ScenarioSpec(rng_seed=0))


@pytest.fixture(scope="session")
def noiseless_pairs(noiseless_scenario):
    sync = pair_trajectories(noiseless_scenario.cam, noiseless_scenario.lidar)
    return relative_motions(sync.frames)


@pytest.fixture(scope="session")
def noiseless_corr(noiseless_scenario):
    return synth_correspondences(noiseless_scenario, DEFAULT_INTRINSICS, per_frame=200)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
