import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camlidar.calib import (CorrResidual, CostSettings, RotResidual, TransResidual, coarse_calibrate,
                            CoarseOptions, motion_blocks)
from camlidar.errors import SingularSystem
from camlidar.geometry import CameraIntrinsics, Pose, Quat, so3_exp
from camlidar.metrics import rotation_error, translation_error
from camlidar.robustls import (Cauchy, Evaluation, ResidualBlock, SolverOptions, StateVector,
                               analytic_jacobian, cauchy, describe_direction, jacobian_relative_error,
                               numeric_jacobian, observability_report, solve_lm, total_cost)
from camlidar.sync import pair_trajectories, relative_motions
from camlidar.synthcorr import ScenarioSpec, generate_scenario

from conftest import random_quat, rz

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


class ConstModel:
    """Residual that does not depend on the state."""

    def __init__(self, e, dim=2):
        self.e = np.atleast_2d(np.asarray(e, dtype=float))
        self.dim = dim

    def __len__(self):
        return len(self.e)

    def evaluate(self, state, jacobians=False):
        ev = Evaluation(self.e.copy(), np.ones(len(self.e), dtype=bool))
        if jacobians:
            ev.jac = np.zeros(self.e.shape + (6,))
        return ev


class LinearTransModel:
    """e_j = t - b_j: its least-squares minimizer is the mean of b."""

    dim = 3

    def __init__(self, b):
        self.b = np.asarray(b, dtype=float).reshape(-1, 3)

    def __len__(self):
        return len(self.b)

    def evaluate(self, state, jacobians=False):
        ev = Evaluation(state.trans - self.b, np.ones(len(self.b), dtype=bool))
        if jacobians:
            J = np.zeros((len(self.b), 3, 6))
            J[:, :, 3:] = np.eye(3)
            ev.jac = J
        return ev


class NanJacobianModel(LinearTransModel):
    def evaluate(self, state, jacobians=False):
        ev = super().evaluate(state, jacobians)
        if jacobians:
            ev.jac = np.full_like(ev.jac, np.nan)
        return ev


# -- kernel -------------------------------------------------------------------

def test_cauchy_examples():
    assert cauchy(0.0, 1.0) == (0.0, 1.0)
    for c in (0.5, 1.0, 3.0):
        rho, w = cauchy(c * c, c)
        assert math.isclose(rho, c * c * math.log(2.0), rel_tol=1e-15)
        assert w == 0.5
    rho, w = cauchy(3.0, 1.0)
    assert math.isclose(rho, math.log(4.0), rel_tol=1e-15) and abs(rho - 1.3862944) < 1e-7
    assert w == 0.25


def test_cauchy_weight_is_derivative():
    s = np.linspace(0.0, 50.0, 101)
    h = 1e-6
    num = (cauchy(s + h, 2.0)[0] - cauchy(np.abs(s - h), 2.0)[0]) / (2 * h)
    assert np.allclose(num[1:], cauchy(s, 2.0)[1][1:], rtol=1e-6)


@settings(max_examples=300, deadline=None)
@given(s1=st.floats(0, 1e6), s2=st.floats(0, 1e6), c=st.floats(1e-2, 1e2))
def test_cauchy_properties(s1, s2, c):
    lo, hi = min(s1, s2), max(s1, s2)
    rho_lo, w_lo = cauchy(lo, c)
    rho_hi, w_hi = cauchy(hi, c)
    assert w_hi <= w_lo and 0 < w_hi <= 1
    assert rho_lo <= lo * (1 + 1e-12) and rho_hi <= hi * (1 + 1e-12)
    # concavity: the chord lies below the curve at the midpoint
    mid, _ = cauchy(0.5 * (lo + hi), c)
    assert mid >= 0.5 * (rho_lo + rho_hi) - 1e-9 * max(1.0, mid)


def test_cauchy_requires_positive_scale():
    with pytest.raises(ValueError):
        Cauchy(0.0)


# -- blocks / cost ------------------------------------------------------------

def test_block_validation():
    with pytest.raises(ValueError):
        ResidualBlock("corr", [1.0, 0.0], None, ConstModel([0.0, 0.0]))
    with pytest.raises(ValueError):
        ResidualBlock("rot", 1.0, None, ConstModel([0.0, 0.0]))
    with pytest.raises(ValueError):
        ResidualBlock("nope", 1.0, None, ConstModel([0.0, 0.0]))
    b = ResidualBlock("corr", np.eye(2) * 4.0, None, ConstModel([0.0, 0.0]))
    assert b.info.tolist() == [4.0, 4.0] and b.dim == 2


def test_total_cost_examples():
    state = StateVector(Quat.identity(), np.zeros(3))
    zero = ResidualBlock("corr", 1.0, None, ConstModel([[0.0, 0.0]] * 3))
    assert total_cost(state, [zero]).total == 0.0
    b = ResidualBlock("corr", np.eye(2), None, ConstModel([3.0, 4.0]))
    assert total_cost(state, [b]).total == 25.0
    b = ResidualBlock("corr", np.eye(2), Cauchy(1.0), ConstModel([3.0, 4.0]))
    assert math.isclose(total_cost(state, [b]).total, math.log(26.0), rel_tol=1e-15)
    assert abs(total_cost(state, [b]).total - 3.2580965) < 1e-7


def test_breakdown_sums_to_total():
    rng = np.random.default_rng(0)
    state = StateVector(Quat.identity(), np.zeros(3))
    blocks = [ResidualBlock("corr", 2.0, Cauchy(1.5), ConstModel(rng.normal(size=(20, 2)))),
              ResidualBlock("trans", 3.0, None, ConstModel(rng.normal(size=(7, 3)), 3)),
              ResidualBlock("rot", 5.0, Cauchy(0.3), ConstModel(rng.normal(size=(4, 9)), 9))]
    cb = total_cost(state, blocks)
    assert math.isclose(sum(cb.by_kind.values()), cb.total, rel_tol=1e-12)
    assert set(cb.by_kind) == {"rot", "trans", "corr"}


def test_behind_camera_is_skipped_and_counted():
    state = StateVector(Quat.identity(), np.zeros(3))
    model = CorrResidual([[0, 0, 5.0], [0, 0, -5.0]], [[320.0, 240.0], [0.0, 0.0]], K)
    cb = total_cost(state, [ResidualBlock("corr", 1.0, None, model)])
    assert cb.total == 0.0 and cb.skipped == 1 and cb.evaluated == 2


def test_whitening_scales_cost_and_keeps_argmin():
    rng = np.random.default_rng(1)
    b = rng.normal(size=(10, 3))
    state0 = StateVector(Quat.identity(), np.zeros(3))
    c1 = total_cost(state0, [ResidualBlock("trans", 1.0, None, LinearTransModel(b))]).total
    c7 = total_cost(state0, [ResidualBlock("trans", 7.0, None, LinearTransModel(b))]).total
    assert c7 == 7.0 * c1
    x1, _ = solve_lm(state0, [ResidualBlock("trans", 1.0, None, LinearTransModel(b))])
    x7, _ = solve_lm(state0, [ResidualBlock("trans", 7.0, None, LinearTransModel(b))])
    assert np.allclose(x1.trans, x7.trans, atol=1e-12)


# -- state --------------------------------------------------------------------

def test_state_vector_retract():
    s = StateVector(Quat.identity(), [1.0, 2.0, 3.0], [0.5, 2.0])
    assert s.local_dim == 8 and s.k == 2
    d = np.array([0.0, 0.0, 0.1, 1.0, 0.0, 0.0, -50.0, 50.0])
    r = s.retract(d)
    assert np.all(r.scales > 0)
    assert np.allclose(r.trans, [2.0, 2.0, 3.0])
    assert np.allclose(r.R, s.R @ so3_exp([0.0, 0.0, 0.1]))
    with pytest.raises(ValueError):
        StateVector(Quat.identity(), np.zeros(3), [1.0, -1.0])


# -- LM -----------------------------------------------------------------------

def test_lm_at_zero_residual_optimum():
    rng = np.random.default_rng(2)
    b = np.tile(rng.normal(size=3), (5, 1))
    state0 = StateVector(Quat.identity(), b[0])
    x, rep = solve_lm(state0, [ResidualBlock("trans", 1.0, None, LinearTransModel(b))])
    assert rep.final_cost == 0.0 and rep.iterations <= 1
    assert np.array_equal(x.trans, state0.trans) and x.rot == state0.rot


def test_lm_quadratic_surrogate():
    rng = np.random.default_rng(3)
    b = rng.normal(size=(25, 3)) * 3.0
    x, rep = solve_lm(StateVector(Quat.identity(), [10.0, -4.0, 2.0]),
                      [ResidualBlock("trans", 1.0, None, LinearTransModel(b))])
    assert np.max(np.abs(x.trans - b.mean(axis=0))) < 1e-10
    assert rep.iterations <= 5
    assert rep.final_cost <= rep.initial_cost
    costs = rep.cost_history
    assert all(b_ <= a_ for a_, b_ in zip(costs, costs[1:]))


def test_lm_singular_system():
    with pytest.raises(SingularSystem):
        solve_lm(StateVector(Quat.identity(), [1.0, 0.0, 0.0]),
                 [ResidualBlock("trans", 1.0, None, NanJacobianModel(np.zeros((3, 3))))])


def test_lm_requires_blocks():
    with pytest.raises(ValueError):
        solve_lm(StateVector(Quat.identity(), np.zeros(3)), [])


@pytest.fixture(scope="module")
def small_problem():
    sc = generate_scenario(ScenarioSpec(duration=20.0, rng_seed=4))
    pairs = relative_motions(pair_trajectories(sc.cam, sc.lidar).frames)
    return sc, pairs


def test_lm_noiseless_recovery(small_problem):
    sc, pairs = small_problem
    blocks = motion_blocks(pairs, CostSettings())
    rng = np.random.default_rng(5)
    q0 = sc.t_gt.rot * Quat.from_rotvec(rng.normal(size=3) * 0.05)
    state0 = StateVector(q0, sc.t_gt.trans + 0.1, np.ones(len(pairs)))
    x, rep = solve_lm(state0, blocks)
    assert translation_error(sc.t_gt.trans, x.trans) < 1e-3
    assert rotation_error(sc.t_gt.rot, x.rot) < 1e-4
    assert rep.final_cost <= rep.initial_cost
    ev = rep.hessian_spectrum.eigenvalues
    assert np.all(np.diff(ev) >= 0) and np.all(ev >= 0)


def test_lm_block_permutation_invariance(small_problem):
    sc, pairs = small_problem
    blocks = motion_blocks(pairs, CostSettings())
    state0 = StateVector(sc.t_gt.rot * rz(3), sc.t_gt.trans + 0.05, np.ones(len(pairs)))
    a, _ = solve_lm(state0, blocks)
    b, _ = solve_lm(state0, blocks[::-1])
    assert abs(rotation_error(a.rot, b.rot)) < 1e-9 * 180 / math.pi
    assert np.max(np.abs(a.trans - b.trans)) < 1e-9
    assert np.max(np.abs(a.scales - b.scales)) < 1e-9


def test_lm_is_deterministic(small_problem):
    sc, pairs = small_problem
    blocks = motion_blocks(pairs, CostSettings())
    state0 = StateVector(sc.t_gt.rot * rz(3), sc.t_gt.trans + 0.05, np.ones(len(pairs)))
    a, ra = solve_lm(state0, blocks)
    b, rb = solve_lm(state0, blocks)
    assert a.rot == b.rot and np.array_equal(a.trans, b.trans) and np.array_equal(a.scales, b.scales)
    assert ra.cost_history == rb.cost_history


# -- Jacobians ----------------------------------------------------------------

def random_state(rng, k):
    return StateVector(random_quat(rng), rng.uniform(-1, 1, 3), rng.uniform(0.2, 3.0, k))


def test_numeric_jacobian_of_constant_block_is_zero():
    b = ResidualBlock("corr", 1.0, None, ConstModel([[1.0, 2.0]] * 3))
    J = numeric_jacobian(b, StateVector(Quat.identity(), np.zeros(3)))
    assert J.shape == (6, 6) and np.all(J == 0)
    with pytest.raises(ValueError):
        numeric_jacobian(b, StateVector(Quat.identity(), np.zeros(3)), h=1e-2)


def test_trans_jacobian_wrt_translation_at_identity():
    R_cam = rz(40).matrix()
    model = TransResidual(R_cam[None], [[1.0, 2.0, 0.5]], [[0.3, -1.0, 2.0]], [0])
    b = ResidualBlock("trans", 1.0, None, model)
    state = StateVector(Quat.identity(), np.zeros(3), [1.0])
    Jn = numeric_jacobian(b, state)
    blk = Jn[:, 3:6]
    ref = R_cam - np.eye(3)
    assert np.linalg.norm(blk - ref) / np.linalg.norm(ref) < 1e-6
    assert np.linalg.norm(analytic_jacobian(b, state)[:, 3:6] - ref) < 1e-12


def test_corr_jacobian_wrt_translation_centered_point():
    Z = 4.0
    b = ResidualBlock("corr", 1.0, None, CorrResidual([[0.0, 0.0, Z]], [[320.0, 240.0]], K))
    state = StateVector(Quat.identity(), np.zeros(3))
    ref = np.array([[500.0 / Z, 0.0, 0.0], [0.0, 500.0 / Z, 0.0]])
    Jn = numeric_jacobian(b, state)[:, 3:6]
    assert np.linalg.norm(Jn - ref) / np.linalg.norm(ref) < 1e-6
    assert np.allclose(analytic_jacobian(b, state)[:, 3:6], ref, atol=1e-12)


def test_rot_and_trans_jacobians_random_states():
    rng = np.random.default_rng(6)
    n = 5
    R_cam = so3_exp(rng.normal(size=(n, 3)))
    R_lidar = so3_exp(rng.normal(size=(n, 3)))
    rot = ResidualBlock("rot", 1.0, None, RotResidual(R_cam, R_lidar))
    trans = ResidualBlock("trans", 1.0, None, TransResidual(R_cam, rng.normal(size=(n, 3)),
                                                            rng.normal(size=(n, 3)), np.arange(n)))
    worst = {"rot": 0.0, "trans": 0.0}
    for _ in range(100):
        state = random_state(rng, n)
        worst["rot"] = max(worst["rot"], jacobian_relative_error(rot, state))
        worst["trans"] = max(worst["trans"], jacobian_relative_error(trans, state))
    assert worst["rot"] < 1e-5 and worst["trans"] < 1e-5, worst


def test_corr_jacobian_random_states():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        state = random_state(rng, 0)
        # points in front of the camera at this state
        X = np.column_stack([rng.uniform(-5, 5, 6), rng.uniform(-5, 5, 6), rng.uniform(2, 30, 6)])
        p = (X - state.trans) @ state.R
        b = ResidualBlock("corr", 1.0, None, CorrResidual(p, rng.uniform(0, 480, (6, 2)), K))
        worst = max(worst, jacobian_relative_error(b, state))
    assert worst < 1e-5, worst


# -- observability -------------------------------------------------------------

def test_observability_full_excitation(small_problem):
    sc, pairs = small_problem
    state = StateVector(sc.t_gt.rot, sc.t_gt.trans, sc.scales_gt[: len(pairs)])
    rep = observability_report(motion_blocks(pairs, CostSettings()), state)
    assert rep.flagged == [] and rep.warnings == []
    assert np.all(np.diff(rep.eigenvalues) >= 0)


def test_observability_planar_flags_translation():
    sc = generate_scenario(ScenarioSpec(profile="planar_loop", duration=30.0, rng_seed=1))
    pairs = relative_motions(pair_trajectories(sc.cam, sc.lidar).frames)
    est, rep = coarse_calibrate(pairs, CoarseOptions())
    obs = rep.hessian_spectrum
    assert len(obs.translation_flags) >= 1
    assert any("translation" in w for w in obs.warnings)


def test_observability_zero_blocks():
    rep = observability_report([], StateVector(Quat.identity(), np.zeros(3)))
    assert rep.flagged == list(range(6)) and len(rep.warnings) == 6


def test_describe_direction():
    assert describe_direction([0, 0, 0, 0, 0, 1.0]).startswith("translation along camera z")
    assert describe_direction([1.0, 0, 0, 0, 0, 0]).startswith("rotation about lidar x")
