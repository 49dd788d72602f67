"""Hand-eye and reprojection residuals and the two-stage calibration.

Direction convention: the estimated transform ``T_calib = (R, t)`` maps
LiDAR-frame points into the camera frame, ``p_cam = R p_lidar + t``.  Relative
motions of the two sensors then satisfy ``T_cam @ T_calib = T_calib @ T_lidar``,
where the camera translation is only known up to a positive per-pair scale
``s_i`` (monocular odometry).

Residuals, per motion pair ``i`` and correspondence ``j``::

    e_rot   = vec( (R R_lidar)^-1 (R_cam R) - I )
    e_trans = (R_cam - I) t + s_i t_cam - R t_lidar
    e_corr  = proj(p_lidar, K, T_calib) - p_cmr
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataio import CalibResult
from .errors import BehindCamera, DegenerateRotations, NoCorrespondences, TooFewPairs
from .geometry import (DEPTH_EPSILON, CameraIntrinsics, Pose, Quat, quat_to_matrix, quat_to_rotvec, skew,
                       vec_flatten)
from .robustls import Cauchy, Evaluation, ResidualBlock, SolverOptions, StateVector, solve_lm
from .synthcorr import subsample
from .sync import MotionPair, scale_init

log = logging.getLogger(__name__)

_GENERATORS = skew(np.eye(3))


# ---------------------------------------------------------------------------
# residual models
# ---------------------------------------------------------------------------

class RotResidual:
    dim = 9

    def __init__(self, R_cam, R_lidar):
        self.R_cam = np.asarray(R_cam, dtype=float).reshape(-1, 3, 3)
        self.R_lidar = np.asarray(R_lidar, dtype=float).reshape(-1, 3, 3)

    def __len__(self):
        return len(self.R_cam)

    def evaluate(self, state, jacobians=False):
        R = state.R
        C = R.T @ self.R_cam @ R
        RlT = np.swapaxes(self.R_lidar, -1, -2)
        e = vec_flatten(RlT @ C - np.eye(3))
        n = len(e)
        ev = Evaluation(e, np.ones(n, dtype=bool))
        if jacobians:
            J = np.zeros((n, 9, 6))
            for j in range(3):
                G = _GENERATORS[j]
                J[:, :, j] = vec_flatten(RlT @ (C @ G - G @ C))
            ev.jac = J
        return ev


class TransResidual:
    dim = 3

    def __init__(self, R_cam, t_cam, t_lidar, scale_index):
        self.R_cam = np.asarray(R_cam, dtype=float).reshape(-1, 3, 3)
        self.t_cam = np.asarray(t_cam, dtype=float).reshape(-1, 3)
        self.t_lidar = np.asarray(t_lidar, dtype=float).reshape(-1, 3)
        self.scale_index = np.asarray(scale_index, dtype=int).reshape(-1)

    def __len__(self):
        return len(self.t_cam)

    def evaluate(self, state, jacobians=False):
        R, t = state.R, state.trans
        s = state.scales[self.scale_index]
        A = self.R_cam - np.eye(3)
        e = A @ t + s[:, None] * self.t_cam - self.t_lidar @ R.T
        n = len(e)
        ev = Evaluation(e, np.ones(n, dtype=bool))
        if jacobians:
            J = np.empty((n, 3, 6))
            J[:, :, :3] = R @ skew(self.t_lidar)
            J[:, :, 3:] = A
            ev.jac = J
            ev.jac_scale = s[:, None] * self.t_cam
            ev.scale_index = self.scale_index
        return ev


class CorrResidual:
    dim = 2

    def __init__(self, p_lidar, p_cmr, k: CameraIntrinsics, depth_epsilon=DEPTH_EPSILON):
        self.p_lidar = np.asarray(p_lidar, dtype=float).reshape(-1, 3)
        self.p_cmr = np.asarray(p_cmr, dtype=float).reshape(-1, 2)
        self.k = k
        self.depth_epsilon = depth_epsilon

    def __len__(self):
        return len(self.p_lidar)

    def evaluate(self, state, jacobians=False):
        R, k = state.R, self.k
        X = self.p_lidar @ R.T + state.trans
        Z = X[:, 2]
        valid = Z > self.depth_epsilon
        iz = np.where(valid, 1.0 / np.where(valid, Z, 1.0), 0.0)
        u = k.fx * X[:, 0] * iz + k.cx
        v = k.fy * X[:, 1] * iz + k.cy
        e = np.where(valid[:, None], np.stack([u, v], axis=1) - self.p_cmr, 0.0)
        ev = Evaluation(e, valid)
        if jacobians:
            n = len(e)
            dproj = np.zeros((n, 2, 3))
            dproj[:, 0, 0] = k.fx * iz
            dproj[:, 0, 2] = -k.fx * X[:, 0] * iz * iz
            dproj[:, 1, 1] = k.fy * iz
            dproj[:, 1, 2] = -k.fy * X[:, 1] * iz * iz
            J = np.empty((n, 2, 6))
            J[:, :, :3] = dproj @ (-(R @ skew(self.p_lidar)))
            J[:, :, 3:] = dproj
            ev.jac = J
        return ev


def _pair_arrays(pairs):
    R_cam = quat_to_matrix(np.array([p.T_cam.rot.as_array() for p in pairs]))
    R_lidar = quat_to_matrix(np.array([p.T_lidar.rot.as_array() for p in pairs]))
    t_cam = np.stack([p.T_cam.trans for p in pairs])
    t_lidar = np.stack([p.T_lidar.trans for p in pairs])
    return R_cam, R_lidar, t_cam, t_lidar


def _single_state(state, scale=None):
    if scale is None:
        return state
    return StateVector(state.rot, state.trans, [scale])


def residual_rot(pair: MotionPair, state: StateVector):
    m = RotResidual(pair.T_cam.rotation_matrix, pair.T_lidar.rotation_matrix)
    return m.evaluate(state).e[0]


def residual_trans(pair: MotionPair, state: StateVector, s_i: float):
    if not s_i > 0:
        raise ValueError("scale must be positive")
    m = TransResidual(pair.T_cam.rotation_matrix, pair.T_cam.trans, pair.T_lidar.trans, [0])
    return m.evaluate(_single_state(state, s_i)).e[0]


def residual_corr(c, k: CameraIntrinsics, state: StateVector, depth_epsilon=DEPTH_EPSILON):
    """``c`` is a ``(p_lidar, p_cmr)`` pair."""
    p_lidar, p_cmr = c
    ev = CorrResidual(p_lidar, p_cmr, k, depth_epsilon).evaluate(state)
    if not ev.valid[0]:
        raise BehindCamera("correspondence point behind the camera")
    return ev.e[0]


# ---------------------------------------------------------------------------
# problem settings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostSettings:
    """Information matrices and robust kernels for the three residual kinds.

    ``cauchy_*`` are given in residual units (unitless, meters, pixels) and
    converted to whitened units by dividing by the matching ``sigma_*``.
    """

    sigma_rot: float = 0.01
    sigma_trans: float = 0.02
    sigma_px: float = 1.0
    robust: bool = True
    cauchy_rot: float = 0.1
    cauchy_trans: float = 0.05
    cauchy_corr: float = 2.0
    solver: SolverOptions = field(default_factory=SolverOptions)

    def _pair(self, kind):
        return {
            "rot": (self.sigma_rot, self.cauchy_rot),
            "trans": (self.sigma_trans, self.cauchy_trans),
            "corr": (self.sigma_px, self.cauchy_corr),
        }[kind]

    def info(self, kind):
        sigma, _ = self._pair(kind)
        return 1.0 / sigma**2

    def robustifier(self, kind):
        if not self.robust:
            return None
        sigma, c = self._pair(kind)
        return Cauchy(c / sigma)


def motion_blocks(pairs, settings: CostSettings, shared_scale=False):
    R_cam, R_lidar, t_cam, t_lidar = _pair_arrays(pairs)
    idx = np.zeros(len(pairs), dtype=int) if shared_scale else np.arange(len(pairs))
    return [
        ResidualBlock("rot", settings.info("rot"), settings.robustifier("rot"), RotResidual(R_cam, R_lidar)),
        ResidualBlock("trans", settings.info("trans"), settings.robustifier("trans"),
                      TransResidual(R_cam, t_cam, t_lidar, idx)),
    ]


def corr_block(corr_sets, k: CameraIntrinsics, settings: CostSettings):
    p_lidar = np.concatenate([c.p_lidar for c in corr_sets])
    p_cmr = np.concatenate([c.p_cmr for c in corr_sets])
    return ResidualBlock("corr", settings.info("corr"), settings.robustifier("corr"),
                         CorrResidual(p_lidar, p_cmr, k))


def initial_scales(pairs, shared_scale=False):
    s = np.array([p.scale_init for p in pairs])
    return np.array([np.median(s)]) if shared_scale else s


# ---------------------------------------------------------------------------
# estimates
# ---------------------------------------------------------------------------

@dataclass
class CalibEstimate:
    stage: str
    pose: Pose
    scales: np.ndarray
    report: object
    warnings: list = field(default_factory=list)
    n_pairs: int = 0
    n_corr: int = 0

    @property
    def observability(self):
        return self.report.hessian_spectrum

    def state(self):
        return StateVector(self.pose.rot, self.pose.trans, self.scales)

    def to_result(self, metrics=None) -> CalibResult:
        return CalibResult(
            rotation=self.pose.rot,
            translation=self.pose.trans,
            scales=list(self.scales),
            costs={
                "J_rot": self.report.costs.get("rot", 0.0),
                "J_trans": self.report.costs.get("trans", 0.0),
                "J_corr": self.report.costs.get("corr", 0.0),
            },
            observability=self.observability.as_records(),
            metrics=metrics,
        )


# ---------------------------------------------------------------------------
# coarse stage
# ---------------------------------------------------------------------------

def _left(q):
    """Matrix of ``q * p`` as a linear map of ``p``; stacks over leading axes."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.stack([
        np.stack([w, -x, -y, -z], -1), np.stack([x, w, -z, y], -1),
        np.stack([y, z, w, -x], -1), np.stack([z, -y, x, w], -1)], -2)


def _right(q):
    """Matrix of ``p * q`` as a linear map of ``p``."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.stack([
        np.stack([w, -x, -y, -z], -1), np.stack([x, w, z, -y], -1),
        np.stack([y, -z, w, x], -1), np.stack([z, y, -x, w], -1)], -2)


def init_rotation_closed_form(pairs, min_axis_sv=1e-6) -> Quat:
    """Closed-form rotation from ``q_cam * q = q * q_lidar`` over all pairs.

    Each pair contributes ``(L(q_cam) - R(q_lidar)) q = 0``; the stacked system
    is solved by its smallest right singular vector.
    """
    if len(pairs) < 3:
        raise DegenerateRotations(f"need at least 3 motion pairs, got {len(pairs)}")
    q_cam = np.array([p.T_cam.rot.as_array() for p in pairs])
    q_lidar = np.array([p.T_lidar.rot.as_array() for p in pairs])
    w = quat_to_rotvec(q_lidar)
    n = np.linalg.norm(w, axis=1)
    axes = w[n > 1e-6] / n[n > 1e-6, None]
    sv = np.linalg.svd(axes, compute_uv=False) if len(axes) >= 2 else np.zeros(2)
    if len(sv) < 2 or sv[1] <= min_axis_sv:
        raise DegenerateRotations("motion pairs do not rotate about two independent axes")
    M = (_left(q_cam) - _right(q_lidar)).reshape(-1, 4)
    _, _, vt = np.linalg.svd(M, full_matrices=False)
    return Quat.from_array(vt[-1])


def init_translation_linear(pairs, R):
    """Least-squares ``t`` of the translation residual at fixed rotation.

    Each pair's scale is eliminated by projecting its residual onto the plane
    orthogonal to ``t_cam``.
    """
    R_cam, _, t_cam, t_lidar = _pair_arrays(pairs)
    A = R_cam - np.eye(3)
    b = t_lidar @ R.T
    n = np.linalg.norm(t_cam, axis=1, keepdims=True)
    u = np.where(n > 1e-12, t_cam / np.where(n > 1e-12, n, 1.0), 0.0)
    P = np.eye(3) - u[:, :, None] * u[:, None, :]
    PA = P @ A
    Pb = np.einsum("nij,nj->ni", P, b)
    t, *_ = np.linalg.lstsq(PA.reshape(-1, 3), Pb.reshape(-1), rcond=None)
    return t


@dataclass(frozen=True)
class CoarseOptions:
    use_closed_form_rot_init: bool = True
    min_pairs: int = 10
    settings: CostSettings = field(default_factory=CostSettings)
    shared_scale: bool = False

    def __post_init__(self):
        if self.min_pairs < 3:
            raise ValueError("min_pairs must be at least 3")


def coarse_calibrate(pairs, opts: CoarseOptions | None = None):
    """Motion-only calibration: minimize J_rot + J_trans."""
    opts = opts or CoarseOptions()
    pairs = list(pairs)
    if len(pairs) < opts.min_pairs:
        raise TooFewPairs(f"{len(pairs)} motion pairs, need at least {opts.min_pairs}")
    warnings = []
    q0 = Quat.identity()
    if opts.use_closed_form_rot_init:
        try:
            q0 = init_rotation_closed_form(pairs)
        except DegenerateRotations as exc:
            msg = f"closed-form rotation init failed ({exc}); starting from identity"
            log.warning(msg)
            warnings.append(msg)
    t0 = init_translation_linear(pairs, q0.matrix())
    state0 = StateVector(q0, t0, initial_scales(pairs, opts.shared_scale))
    blocks = motion_blocks(pairs, opts.settings, opts.shared_scale)
    state, report = solve_lm(state0, blocks, opts.settings.solver)
    warnings += report.hessian_spectrum.warnings
    est = CalibEstimate("coarse", state.pose(), np.array(state.scales), report, warnings, len(pairs), 0)
    return est, report


# ---------------------------------------------------------------------------
# fine stage
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FineOptions:
    correspondence_fraction: float = 0.05
    max_pairs_used: int = 100
    rng_seed: int = 0
    include_motion_constraints: bool = True
    settings: CostSettings = field(default_factory=CostSettings)
    shared_scale: bool = False

    def __post_init__(self):
        if not 0 < self.correspondence_fraction <= 1:
            raise ValueError("correspondence_fraction must lie in (0, 1]")
        if self.max_pairs_used < 1:
            raise ValueError("max_pairs_used must be positive")


def select_frames(corr_sets, max_pairs_used):
    """Frames spread uniformly over the (time-ordered) frame ids."""
    sets = sorted((c for c in corr_sets if len(c)), key=lambda c: c.frame_id)
    if len(sets) <= max_pairs_used:
        return sets
    idx = np.round(np.linspace(0, len(sets) - 1, max_pairs_used)).astype(int)
    return [sets[i] for i in idx]


def sample_correspondences(corr_sets, opts: FineOptions):
    chosen = select_frames(corr_sets, opts.max_pairs_used)
    return [subsample(c, opts.correspondence_fraction, (opts.rng_seed, c.frame_id)) for c in chosen]


def fine_calibrate(pairs, corr_sets, k: CameraIntrinsics, t_init, opts: FineOptions | None = None):
    """Joint refinement: minimize J_mot + J_corr from ``t_init``.

    ``t_init`` is a :class:`CalibEstimate` (its scales are reused), a
    :class:`~camlidar.robustls.StateVector` or a :class:`Pose`.
    """
    opts = opts or FineOptions()
    pairs = list(pairs or [])
    sampled = sample_correspondences(corr_sets or [], opts)
    n_corr = sum(len(c) for c in sampled)
    if n_corr == 0:
        raise NoCorrespondences("no correspondences available for the fine stage")

    if isinstance(t_init, CalibEstimate):
        pose, scales = t_init.pose, t_init.scales
    elif isinstance(t_init, StateVector):
        pose, scales = t_init.pose(), t_init.scales
    else:
        pose, scales = t_init, None

    blocks = [corr_block(sampled, k, opts.settings)]
    use_motion = opts.include_motion_constraints and pairs
    if use_motion:
        expected = 1 if opts.shared_scale else len(pairs)
        if scales is None or len(scales) != expected:
            scales = initial_scales(pairs, opts.shared_scale)
        blocks += motion_blocks(pairs, opts.settings, opts.shared_scale)
    else:
        scales = np.zeros(0)
    state0 = StateVector(pose.rot, pose.trans, scales)
    state, report = solve_lm(state0, blocks, opts.settings.solver)
    warnings = list(report.hessian_spectrum.warnings)
    if report.skipped_corr:
        warnings.append(f"{report.skipped_corr} correspondences behind the camera at the solution")
    est = CalibEstimate("fine", state.pose(), np.array(state.scales), report, warnings,
                        len(pairs) if use_motion else 0, n_corr)
    return est, report
