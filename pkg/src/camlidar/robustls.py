"""Robustified non-linear least squares over the calibration manifold.

The state is one rigid transform plus ``k`` positive scale factors.  Its local
update has ``6 + k`` coordinates: a right rotation perturbation
``R <- R Exp(d_rot)``, an additive translation step and additive steps on the
log-scales.

Residuals come in :class:`ResidualBlock` batches.  A block holds ``n``
constraints of one kind that share an information matrix and a robustifier;
its ``model`` evaluates residuals and Jacobians for the whole batch at once.
The objective is::

    F(x) = sum_j rho_j( e_j(x)^T Omega e_j(x) )

(no factor 1/2).  Robust kernels are handled by first-order IRLS: each
Gauss-Newton system is weighted by ``rho'(s_j)`` at the current iterate.  Each
constraint touches at most one scale, so the scale block of the normal
equations is diagonal and is eliminated with a Schur complement before a dense
6x6 Cholesky solve.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BehindCamera, SingularSystem
from .geometry import Pose, Quat, quat_multiply, rotvec_to_quat

log = logging.getLogger(__name__)

KINDS = {"rot": 9, "trans": 3, "corr": 2}
MAX_DAMPING = 1e8
_DIAG_CLAMP = (1e-6, 1e32)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StateVector:
    rot: Quat
    trans: np.ndarray
    scales: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        t = np.array(self.trans, dtype=float).reshape(3)
        s = np.array(self.scales, dtype=float).reshape(-1)
        if np.any(~(s > 0)):
            raise ValueError("scales must be positive")
        t.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "trans", t)
        object.__setattr__(self, "scales", s)
        object.__setattr__(self, "_R", self.rot.matrix())

    @classmethod
    def from_pose(cls, pose: Pose, scales=()):
        return cls(pose.rot, pose.trans, scales)

    @property
    def R(self):
        return self._R

    @property
    def k(self):
        return len(self.scales)

    @property
    def local_dim(self):
        return 6 + self.k

    def pose(self, t_stamp=0.0):
        return Pose(t_stamp, self.rot, self.trans)

    def retract(self, delta):
        """Apply a local step of length ``6 + k``."""
        delta = np.asarray(delta, dtype=float)
        q = quat_multiply(self.rot.as_array(), rotvec_to_quat(delta[:3]))
        q = q / np.linalg.norm(q)
        return StateVector(Quat.from_array(q), self.trans + delta[3:6],
                           self.scales * np.exp(delta[6:]))

    def with_scales(self, scales):
        return replace(self, scales=scales)


# ---------------------------------------------------------------------------
# robust kernels
# ---------------------------------------------------------------------------

def cauchy(s, c):
    """Cauchy kernel on a squared whitened residual: ``(rho(s), rho'(s))``."""
    c2 = c * c
    s = np.asarray(s, dtype=float)
    x = s / c2
    # s * log1p(x)/x rather than c2 * log1p(x): stays <= s even for subnormal s
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(x > 0, np.log1p(x) / np.where(x > 0, x, 1.0), 1.0)
    rho = np.where(np.isinf(x), np.inf, s * ratio)
    w = 1.0 / (1.0 + x)
    if rho.ndim == 0:
        return float(rho), float(w)
    return rho, w


@dataclass(frozen=True)
class Cauchy:
    """Cauchy robustifier; ``c`` is in whitened (unit-variance) units."""

    c: float

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("Cauchy scale must be positive")

    def __call__(self, s):
        return cauchy(s, self.c)


def _apply_kernel(robustifier, s):
    if robustifier is None:
        return s, np.ones_like(s)
    return robustifier(s)


# ---------------------------------------------------------------------------
# residual blocks
# ---------------------------------------------------------------------------

@dataclass
class Evaluation:
    """Batched residuals of one block.

    ``jac`` has shape ``(n, d, 6)`` over (rotation, translation); ``jac_scale``
    ``(n, d)`` is the derivative w.r.t. the log of scale ``scale_index[j]``.
    Rows with ``valid == False`` could not be evaluated (point behind the
    camera) and carry zeros.
    """

    e: np.ndarray
    valid: np.ndarray
    jac: np.ndarray | None = None
    jac_scale: np.ndarray | None = None
    scale_index: np.ndarray | None = None


@dataclass
class ResidualBlock:
    kind: str
    info: np.ndarray
    robustifier: Cauchy | None
    model: object

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown residual kind {self.kind!r}")
        d = KINDS[self.kind]
        info = np.asarray(self.info, dtype=float)
        if info.ndim == 2:
            if info.shape != (d, d) or np.any(info != np.diag(np.diag(info))):
                raise ValueError("information matrix must be a diagonal d x d matrix")
            info = np.diag(info).copy()
        elif info.ndim == 0:
            info = np.full(d, float(info))
        if info.shape != (d,) or np.any(~(info > 0)):
            raise ValueError("information diagonal must hold d positive entries")
        self.info = info
        if getattr(self.model, "dim", d) != d:
            raise ValueError(f"model dimension does not match kind {self.kind!r}")

    @property
    def dim(self):
        return KINDS[self.kind]

    def __len__(self):
        return len(self.model)

    def evaluate(self, state, jacobians=False) -> Evaluation:
        return self.model.evaluate(state, jacobians)


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------

@dataclass
class CostBreakdown:
    total: float
    by_kind: dict
    skipped: int = 0
    evaluated: int = 0

    def J(self, kind):
        return self.by_kind.get(kind, 0.0)


def _block_cost(block, ev):
    e = np.where(ev.valid[:, None], ev.e, 0.0)
    s = (e * e) @ block.info
    rho, w = _apply_kernel(block.robustifier, s)
    return rho, w, e


def _cost_from_evals(blocks, evals):
    by_kind = {k: 0.0 for k in KINDS}
    skipped = evaluated = 0
    for block, ev in zip(blocks, evals):
        rho, _, _ = _block_cost(block, ev)
        by_kind[block.kind] += float(np.sum(rho))
        if block.kind == "corr":
            bad = int(np.count_nonzero(~ev.valid))
            skipped += bad
            evaluated += len(ev.valid)
    return CostBreakdown(math.fsum(by_kind.values()), by_kind, skipped, evaluated)


def total_cost(state: StateVector, blocks) -> CostBreakdown:
    """Robust cost and its per-kind split (``rot``, ``trans``, ``corr``).

    Correspondences that fall behind the camera contribute nothing and are
    counted in ``skipped``.
    """
    return _cost_from_evals(blocks, [b.evaluate(state) for b in blocks])


# ---------------------------------------------------------------------------
# normal equations
# ---------------------------------------------------------------------------

@dataclass
class NormalEquations:
    A: np.ndarray          # 6x6 pose block
    g: np.ndarray          # 6 pose gradient (half of dF/dx)
    D: np.ndarray          # k diagonal scale block
    B: np.ndarray          # 6xk coupling
    gs: np.ndarray         # k scale gradient


def build_normal_equations(blocks, evals, k) -> NormalEquations:
    A = np.zeros((6, 6))
    g = np.zeros(6)
    D = np.zeros(k)
    B = np.zeros((6, k))
    gs = np.zeros(k)
    for block, ev in zip(blocks, evals):
        _, w, e = _block_cost(block, ev)
        w = np.where(ev.valid, w, 0.0)
        wi = w[:, None] * block.info[None, :]            # (n, d)
        J = ev.jac
        Jw = J * wi[:, :, None]
        A += np.einsum("ndi,ndj->ij", Jw, J)
        g += np.einsum("ndi,nd->i", Jw, e)
        if ev.jac_scale is not None and k:
            Js = ev.jac_scale
            idx = ev.scale_index
            D += np.bincount(idx, weights=np.sum(wi * Js * Js, axis=1), minlength=k)
            gs += np.bincount(idx, weights=np.sum(wi * Js * e, axis=1), minlength=k)
            coup = np.einsum("ndi,nd->ni", Jw, Js)
            for r in range(6):
                B[r] += np.bincount(idx, weights=coup[:, r], minlength=k)
    return NormalEquations(A, g, D, B, gs)


def _solve_damped(ne: NormalEquations, lam):
    """Solve ``(H + lam diag(H)) delta = -g`` with the scales eliminated."""
    dA = np.clip(np.diag(ne.A), *_DIAG_CLAMP)
    A = ne.A + lam * np.diag(dA)
    Dd = ne.D + lam * np.clip(ne.D, *_DIAG_CLAMP)
    Dinv = 1.0 / Dd
    S = A - (ne.B * Dinv) @ ne.B.T
    rhs = -ne.g + ne.B @ (Dinv * ne.gs)
    S = 0.5 * (S + S.T)
    L = np.linalg.cholesky(S)
    dx = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    ds = Dinv * (-ne.gs - ne.B.T @ dx)
    return np.concatenate([dx, ds])


def _hessian_apply(ne, delta):
    dx, ds = delta[:6], delta[6:]
    hx = ne.A @ dx + ne.B @ ds
    hs = ne.B.T @ dx + ne.D * ds
    return np.concatenate([hx, hs])


# ---------------------------------------------------------------------------
# observability
# ---------------------------------------------------------------------------

_AXES = "xyz"


def describe_direction(v):
    v = np.asarray(v, dtype=float)
    rot, trans = v[:3], v[3:6]
    if np.linalg.norm(trans) >= np.linalg.norm(rot):
        i = int(np.argmax(np.abs(trans)))
        part, frac = f"translation along camera {_AXES[i]}", np.linalg.norm(trans)
    else:
        i = int(np.argmax(np.abs(rot)))
        part, frac = f"rotation about lidar {_AXES[i]}", np.linalg.norm(rot)
    return f"{part} ({frac**2:.0%} of direction)"


def is_translation_direction(v):
    v = np.asarray(v, dtype=float)
    return np.linalg.norm(v[3:6]) >= np.linalg.norm(v[:3])


@dataclass
class ObservabilityReport:
    """Spectrum of the 6x6 calibration information (scales marginalized)."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray     # columns
    flagged: list
    warnings: list

    @property
    def translation_flags(self):
        return [i for i in self.flagged if is_translation_direction(self.eigenvectors[:, i])]

    def as_records(self):
        return [
            {
                "direction": self.eigenvectors[:, i].tolist(),
                "eigenvalue": float(self.eigenvalues[i]),
                "flagged": i in self.flagged,
                "description": describe_direction(self.eigenvectors[:, i]),
            }
            for i in range(len(self.eigenvalues))
        ]


def _marginal_information(ne):
    S = ne.A.copy()
    keep = ne.D > 0
    if np.any(keep):
        S -= (ne.B[:, keep] / ne.D[keep]) @ ne.B[:, keep].T
    return 0.5 * (S + S.T)


def _spectrum(ne, ratio_threshold):
    S = _marginal_information(ne)
    vals, vecs = np.linalg.eigh(S)
    # eigenvector signs are arbitrary; fix them for reproducible output
    for i in range(vecs.shape[1]):
        j = int(np.argmax(np.abs(vecs[:, i])))
        if vecs[j, i] < 0:
            vecs[:, i] = -vecs[:, i]
    vmax = float(vals[-1]) if len(vals) else 0.0
    vals = np.where(vals < 0, 0.0, vals)
    flagged = [i for i in range(6) if vmax <= 0 or vals[i] < ratio_threshold * vmax]
    warnings = [
        f"weakly observable: {describe_direction(vecs[:, i])}, eigenvalue {vals[i]:.3g}"
        + (f" (max {vmax:.3g})" if vmax > 0 else "")
        for i in flagged
    ]
    return ObservabilityReport(vals, vecs, flagged, warnings)


def observability_report(blocks, state: StateVector, ratio_threshold=1e-6) -> ObservabilityReport:
    """Flag calibration directions the constraints barely determine.

    The Gauss-Newton information of (rotation, translation) is formed with the
    robust weights at ``state``, the scale variables are marginalized out, and
    eigen-directions whose eigenvalue is below ``ratio_threshold`` times the
    largest are reported.
    """
    blocks = list(blocks)
    evals = [b.evaluate(state, jacobians=True) for b in blocks]
    ne = build_normal_equations(blocks, evals, state.k)
    report = _spectrum(ne, ratio_threshold)
    for w in report.warnings:
        log.warning(w)
    return report


# ---------------------------------------------------------------------------
# Jacobian checks
# ---------------------------------------------------------------------------

def analytic_jacobian(block: ResidualBlock, state: StateVector):
    """Dense ``(n*d) x (6+k)`` Jacobian assembled from the block's model."""
    ev = block.evaluate(state, jacobians=True)
    if not np.all(ev.valid):
        raise BehindCamera("block not evaluable at this state")
    n, d = ev.e.shape
    J = np.zeros((n, d, state.local_dim))
    J[:, :, :6] = ev.jac
    if ev.jac_scale is not None and state.k:
        J[np.arange(n), :, 6 + ev.scale_index] = ev.jac_scale
    return J.reshape(n * d, state.local_dim)


def numeric_jacobian(block: ResidualBlock, state: StateVector, h=1e-6):
    """Central differences on the local tangent space."""
    if not 0 < h <= 1e-3:
        raise ValueError("step must lie in (0, 1e-3]")

    def residual(x):
        ev = block.evaluate(x)
        if not np.all(ev.valid):
            raise BehindCamera("block not evaluable at a perturbed state")
        return ev.e.reshape(-1)

    m = state.local_dim
    cols = []
    for i in range(m):
        step = np.zeros(m)
        step[i] = h
        cols.append((residual(state.retract(step)) - residual(state.retract(-step))) / (2 * h))
    return np.stack(cols, axis=1)


def jacobian_relative_error(block, state, h=1e-6):
    Ja = analytic_jacobian(block, state)
    Jn = numeric_jacobian(block, state, h)
    denom = np.linalg.norm(Jn)
    if denom == 0:
        return float(np.linalg.norm(Ja))
    return float(np.linalg.norm(Ja - Jn) / denom)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 100
    gradient_tolerance: float = 1e-10
    cost_tolerance: float = 1e-12
    parameter_tolerance: float = 1e-12
    initial_damping: float = 1e-4
    max_damping: float = MAX_DAMPING
    ratio_threshold: float = 1e-6


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    costs: dict
    termination: str
    hessian_spectrum: ObservabilityReport
    skipped_corr: int = 0
    evaluated_corr: int = 0
    cost_history: list = field(default_factory=list)

    @property
    def skipped_fraction(self):
        return self.skipped_corr / self.evaluated_corr if self.evaluated_corr else 0.0


def _evaluate_all(blocks, state, jacobians):
    return [b.evaluate(state, jacobians) for b in blocks]


def solve_lm(state0: StateVector, blocks, opts: SolverOptions | None = None):
    """Minimize the robust cost from ``state0``; returns ``(state, SolveReport)``."""
    opts = opts or SolverOptions()
    blocks = list(blocks)
    if not blocks:
        raise ValueError("solve_lm needs at least one residual block")
    k = state0.k

    x = state0
    evals = _evaluate_all(blocks, x, True)
    cost = _cost_from_evals(blocks, evals)
    initial = cost.total
    history = [cost.total]
    lam, nu = opts.initial_damping, 2.0
    termination = "max_iterations"
    iterations = 0

    while iterations < opts.max_iterations:
        ne = build_normal_equations(blocks, evals, k)
        grad = np.concatenate([ne.g, ne.gs])
        if cost.total == 0.0:
            termination = "zero_cost"
            break
        if np.max(np.abs(2.0 * grad)) <= opts.gradient_tolerance:
            termination = "gradient"
            break
        iterations += 1
        accepted = False
        while not accepted:
            try:
                delta = _solve_damped(ne, lam)
            except np.linalg.LinAlgError:
                delta = None
            if delta is None or not np.all(np.isfinite(delta)):
                if lam >= opts.max_damping:
                    raise SingularSystem("damped normal equations not positive definite "
                                         f"at damping {lam:.3g}")
                lam = min(lam * nu, opts.max_damping)
                nu *= 2.0
                continue
            x_new = x.retract(delta)
            evals_new = _evaluate_all(blocks, x_new, True)
            cost_new = _cost_from_evals(blocks, evals_new)
            predicted = -(2.0 * grad @ delta + delta @ _hessian_apply(ne, delta))
            actual = cost.total - cost_new.total
            if actual > 0 and cost_new.skipped <= cost.skipped:
                assert cost_new.total < cost.total
                rho = actual / predicted if predicted > 0 else 0.0
                lam *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                lam = max(lam, 1e-12)
                nu = 2.0
                accepted = True
            else:
                if lam >= opts.max_damping:
                    break
                lam = min(lam * nu, opts.max_damping)
                nu *= 2.0
        if not accepted:
            termination = "damping_limit"
            break
        step_small = np.linalg.norm(delta) <= opts.parameter_tolerance * (
            np.linalg.norm(np.concatenate([x.trans, np.log(x.scales)])) + 1.0)
        rel_change = (cost.total - cost_new.total) / max(cost.total, 1e-300)
        x, evals, cost = x_new, evals_new, cost_new
        history.append(cost.total)
        if cost.total == 0.0:
            termination = "zero_cost"
            break
        if rel_change <= opts.cost_tolerance:
            termination = "cost_change"
            break
        if step_small:
            termination = "parameter_change"
            break

    ne = build_normal_equations(blocks, evals, k)
    spectrum = _spectrum(ne, opts.ratio_threshold)
    report = SolveReport(
        iterations=iterations,
        initial_cost=initial,
        final_cost=cost.total,
        costs=dict(cost.by_kind),
        termination=termination,
        hessian_spectrum=spectrum,
        skipped_corr=cost.skipped,
        evaluated_corr=cost.evaluated,
        cost_history=history,
    )
    log.debug("LM: %d iterations, cost %.6g -> %.6g (%s)", iterations, initial, cost.total, termination)
    return x, report
