"""End-to-end calibration runs, synthetic benchmarks and ablation sweeps."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dataio
from .calib import CoarseOptions, CostSettings, FineOptions, coarse_calibrate, fine_calibrate
from .errors import CalibError, ConfigError, IoError, UnknownFrame, ValidationError
from .geometry import CameraIntrinsics, Pose
from .metrics import CONVENTIONS, compare_poses
from .robustls import SolverOptions
from .sync import compensate_cloud, pair_trajectories, relative_motions
from .synthcorr import (DEFAULT_INTRINSICS, PROFILES, NoiseSpec, ScenarioSpec, generate_scenario,
                        synth_correspondences)

log = logging.getLogger(__name__)

STAGES = ("coarse", "fine", "both")
SWEEPS = ("pose_count", "corr_fraction", "pair_count", "pairs_vs_fraction")
ABLATION_HEADER = ["sweep_value", "seed", "e_t_cm", "e_r_deg", "wall_time_s"]
AGGREGATE_HEADER = ["sweep_value", "n_runs", "e_t_mean", "e_t_std", "e_r_mean", "e_r_std",
                    "wall_time_mean", "n_constraints"]
_PATH_KEYS = ("cam_trajectory", "lidar_trajectory", "cloud_manifest", "correspondences",
              "intrinsics", "reference", "initial_calib", "output", "run_log", "synced_clouds_dir")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    cam_trajectory: str | None = None
    lidar_trajectory: str | None = None
    cloud_manifest: str | None = None
    correspondences: str | None = None
    intrinsics: str | None = None
    reference: str | None = None
    initial_calib: str | None = None
    output: str | None = "result.json"
    run_log: str | None = None
    synced_clouds_dir: str | None = None

    stage: str = "both"
    max_gap: float = 0.15
    min_motion: float = 0.01
    min_rot_deg: float = 0.1
    pose_count: int | None = None

    min_pairs: int = 10
    use_closed_form_rot_init: bool = True
    shared_scale: bool = False

    correspondence_fraction: float = 0.05
    max_pairs_used: int = 100
    seed: int = 0
    include_motion_constraints: bool = True

    robustifier: str = "cauchy"
    cauchy_rot: float = 0.1
    cauchy_trans: float = 0.05
    cauchy_corr: float = 2.0
    sigma_rot: float = 0.01
    sigma_trans: float = 0.02
    sigma_px: float = 1.0

    max_iterations: int = 100
    gradient_tolerance: float = 1e-10
    cost_tolerance: float = 1e-12
    initial_damping: float = 1e-4
    observability_ratio: float = 1e-6

    rotation_error_convention: str = "paper"
    strict: bool = False
    max_skipped_fraction: float = 0.01

    # synthetic benchmark in place of files (ablations)
    benchmark: str | None = None
    bench_profile: str = "figure_eight_3d"
    bench_duration: float = 60.0
    bench_frames: int = 50
    bench_per_frame: int = 200
    bench_min_depth: float = 2.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}")
        if self.robustifier not in ("cauchy", "none"):
            raise ConfigError("robustifier must be 'cauchy' or 'none'")
        if self.rotation_error_convention not in CONVENTIONS:
            raise ConfigError(f"rotation_error_convention must be one of {CONVENTIONS}")
        if not 0 < self.correspondence_fraction <= 1:
            raise ConfigError("correspondence_fraction must lie in (0, 1]")
        if self.min_pairs < 3:
            raise ConfigError("min_pairs must be at least 3")
        if self.max_gap <= 0:
            raise ConfigError("max_gap must be positive")
        if self.pose_count is not None and self.pose_count < 2:
            raise ConfigError("pose_count must be at least 2")
        if self.benchmark is not None and self.benchmark not in BENCHMARKS:
            raise ConfigError(f"benchmark must be one of {tuple(BENCHMARKS)}")
        if self.bench_profile not in PROFILES:
            raise ConfigError(f"bench_profile must be one of {PROFILES}")

    # -- construction -------------------------------------------------------

    @classmethod
    def from_mapping(cls, mapping, base_dir=None):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _convert(key, raw, cls.__dataclass_fields__[key].default)
        cfg = cls(**kwargs)
        if base_dir is not None:
            cfg = cfg.resolved(base_dir)
        return cfg

    def resolved(self, base_dir):
        base = Path(base_dir)
        updates = {}
        for key in _PATH_KEYS:
            value = getattr(self, key)
            if value is not None and not Path(value).is_absolute():
                updates[key] = str(base / value)
        return replace(self, **updates)

    def updated(self, **kw):
        return replace(self, **kw)

    # -- derived option objects ---------------------------------------------

    def cost_settings(self):
        return CostSettings(
            sigma_rot=self.sigma_rot, sigma_trans=self.sigma_trans, sigma_px=self.sigma_px,
            robust=self.robustifier == "cauchy",
            cauchy_rot=self.cauchy_rot, cauchy_trans=self.cauchy_trans, cauchy_corr=self.cauchy_corr,
            solver=SolverOptions(
                max_iterations=self.max_iterations,
                gradient_tolerance=self.gradient_tolerance,
                cost_tolerance=self.cost_tolerance,
                initial_damping=self.initial_damping,
                ratio_threshold=self.observability_ratio,
            ),
        )

    def coarse_options(self):
        return CoarseOptions(self.use_closed_form_rot_init, self.min_pairs, self.cost_settings(),
                             self.shared_scale)

    def fine_options(self):
        return FineOptions(self.correspondence_fraction, self.max_pairs_used, self.seed,
                           self.include_motion_constraints, self.cost_settings(), self.shared_scale)

    def check_files(self):
        required = ["cam_trajectory", "lidar_trajectory"]
        if self.stage in ("fine", "both"):
            required += ["correspondences", "intrinsics"]
        if self.stage == "fine":
            required.append("initial_calib")
        for key in required:
            if getattr(self, key) is None:
                raise ConfigError(f"config key {key!r} is required for stage {self.stage!r}")
        for key in ("cam_trajectory", "lidar_trajectory", "cloud_manifest", "correspondences",
                    "intrinsics", "reference", "initial_calib"):
            value = getattr(self, key)
            if value is not None and not Path(value).is_file():
                raise IoError(f"{key}: no such file {value}")


def _convert(key, raw, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if text.lower() in ("none", "null", ""):
        return None
    kind = RunConfig.__annotations__[key]
    try:
        if "bool" in kind:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "int" in kind:
            return int(text)
        if "float" in kind:
            return float(dataio.parse_float(text))
    except (ValueError, CalibError) as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    return text


def load_config(path, overrides=None) -> RunConfig:
    """Read a flat ``key=value`` file; relative paths resolve against its directory."""
    try:
        mapping = dataio.read_key_values(path)
    except IoError:
        raise
    except CalibError as exc:
        raise ConfigError(str(exc)) from exc
    mapping.update(overrides or {})
    return RunConfig.from_mapping(mapping, base_dir=Path(path).parent)


# ---------------------------------------------------------------------------
# run log
# ---------------------------------------------------------------------------

class RunLog:
    """Machine-readable event records, emitted as JSON lines."""

    def __init__(self):
        self.records = []

    def event(self, name, **data):
        rec = {"event": name}
        rec.update(data)
        self.records.append(rec)
        return rec

    def dumps(self):
        return "".join(json.dumps(r, default=_json_default) + "\n" for r in self.records)

    def write(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


# ---------------------------------------------------------------------------
# core run
# ---------------------------------------------------------------------------

@dataclass
class RunOutcome:
    result: dataio.CalibResult
    estimate: object
    coarse: object | None = None
    fine: object | None = None
    metrics: object | None = None
    n_pairs: int = 0
    n_corr: int = 0

    @property
    def n_constraints(self):
        """Scalar residual equations of the final problem (9 + 3 per pair, 2 per correspondence)."""
        return 12 * self.n_pairs + 2 * self.n_corr


def run_calibration(cam, lidar, corr_sets, k: CameraIntrinsics | None, cfg: RunConfig,
                    clouds=None, reference: Pose | None = None, initial: Pose | None = None,
                    runlog: RunLog | None = None) -> RunOutcome:
    """Sync, coarse and/or fine stage on in-memory data."""
    runlog = runlog or RunLog()
    if cfg.pose_count is not None:
        cam = cam.truncated(cfg.pose_count)
    if clouds is not None and corr_sets:
        known = {c.frame_id for c in clouds}
        for cs in corr_sets:
            if cs.frame_id not in known:
                raise UnknownFrame(f"correspondences reference unknown frame {cs.frame_id}")

    sync = pair_trajectories(cam, lidar, cfg.max_gap, clouds=clouds)
    runlog.event("sync", frames=len(sync.frames), dropped=sync.dropped, out_of_range=sync.out_of_range)
    pairs = relative_motions(sync.frames, cfg.min_motion, cfg.min_rot_deg)
    runlog.event("motion_pairs", pairs=len(pairs), stationary_dropped=max(len(sync.frames) - 1, 0) - len(pairs))

    coarse = fine = None
    if cfg.stage in ("coarse", "both"):
        coarse, rep = coarse_calibrate(pairs, cfg.coarse_options())
        runlog.event("coarse", iterations=rep.iterations, initial_cost=rep.initial_cost,
                     final_cost=rep.final_cost, termination=rep.termination,
                     observability_warnings=list(rep.hessian_spectrum.warnings),
                     warnings=list(coarse.warnings))
    if cfg.stage in ("fine", "both"):
        t_init = coarse if coarse is not None else initial
        if t_init is None:
            raise ConfigError("the fine stage needs a coarse estimate or initial_calib")
        fine, rep = fine_calibrate(pairs, corr_sets, k, t_init, cfg.fine_options())
        runlog.event("fine", iterations=rep.iterations, initial_cost=rep.initial_cost,
                     final_cost=rep.final_cost, termination=rep.termination,
                     correspondences=fine.n_corr, skipped_corr=rep.skipped_corr,
                     observability_warnings=list(rep.hessian_spectrum.warnings))

    est = fine if fine is not None else coarse
    rep = est.report
    if rep.skipped_fraction > cfg.max_skipped_fraction:
        raise ValidationError(f"{rep.skipped_corr} of {rep.evaluated_corr} correspondences behind "
                              f"the camera at the solution")
    if cfg.strict and rep.hessian_spectrum.flagged:
        raise ValidationError("weakly observable calibration directions: "
                              + "; ".join(rep.hessian_spectrum.warnings))

    metrics = None
    if reference is not None:
        metrics = compare_poses(reference, est.pose, cfg.rotation_error_convention)
        runlog.event("metrics", **metrics.as_dict())
    result = est.to_result(metrics.as_dict() if metrics is not None else None)
    n_pairs = est.n_pairs if est.stage == "fine" else len(pairs)
    return RunOutcome(result, est, coarse, fine, metrics, n_pairs, est.n_corr)


def _export_synced_clouds(cfg, cam, lidar, clouds):
    out = Path(cfg.synced_clouds_dir)
    out.mkdir(parents=True, exist_ok=True)
    sync = pair_trajectories(cam, lidar, cfg.max_gap, clouds=clouds)
    by_id = {c.frame_id: c for c in clouds}
    best = {}
    for f in sync.frames:
        if f.nearest_cloud_id is None:
            continue
        cur = best.get(f.nearest_cloud_id)
        t_cloud = by_id[f.nearest_cloud_id].t_stamp
        if cur is None or abs(f.t_stamp - t_cloud) < abs(cur.t_stamp - t_cloud):
            best[f.nearest_cloud_id] = f
    entries = []
    for fid in sorted(best):
        synced = compensate_cloud(by_id[fid], best[fid])
        rel = f"{fid:06d}.xyz"
        dataio.write_cloud(synced, out / rel)
        entries.append(dataio.ManifestEntry(fid, synced.t_stamp, rel))
    dataio.write_manifest(entries, out / "manifest.csv")


def run_pipeline(cfg: RunConfig) -> RunOutcome:
    """File-based run: read inputs, calibrate, write the result JSON and run log.

    The result file is only written when every stage and validation passed.
    """
    runlog = RunLog()
    log_path = cfg.run_log or (str(cfg.output) + ".log.jsonl" if cfg.output else None)
    try:
        cfg.check_files()
        cam = dataio.read_trajectory(cfg.cam_trajectory, "cam")
        lidar = dataio.read_trajectory(cfg.lidar_trajectory, "lidar")
        clouds = dataio.load_clouds(cfg.cloud_manifest) if cfg.cloud_manifest else None
        k = corr = None
        if cfg.stage in ("fine", "both"):
            k = dataio.read_intrinsics(cfg.intrinsics)
            corr = dataio.read_correspondences(cfg.correspondences, k)
        reference = dataio.read_calib_result(cfg.reference).pose() if cfg.reference else None
        initial = dataio.read_calib_result(cfg.initial_calib).pose() if cfg.initial_calib else None
        if cfg.synced_clouds_dir and clouds:
            _export_synced_clouds(cfg, cam, lidar, clouds)
        outcome = run_calibration(cam, lidar, corr, k, cfg, clouds, reference, initial, runlog)
        if cfg.output:
            dataio.write_calib_result(outcome.result, cfg.output)
        runlog.event("done", output=cfg.output)
        return outcome
    except CalibError as exc:
        runlog.event("error", type=type(exc).__name__, message=str(exc), exit_code=exc.exit_code)
        raise
    finally:
        if log_path:
            try:
                runlog.write(log_path)
            except OSError:
                log.warning("could not write run log %s", log_path)


# ---------------------------------------------------------------------------
# synthetic benchmarks
# ---------------------------------------------------------------------------

BENCHMARKS = {
    "noiseless": NoiseSpec(),
    "robustness": NoiseSpec(odo_rot_sigma=0.1, odo_trans_sigma=0.01, pixel_sigma=1.0,
                            outlier_rate=0.2, outlier_max_offset=50.0),
}


@dataclass
class BenchmarkData:
    cam: object
    lidar: object
    clouds: list
    corr_sets: list
    k: CameraIntrinsics
    t_gt: Pose


def make_benchmark(name, seed, profile="figure_eight_3d", duration=60.0, frames=50, per_frame=200,
                   min_depth=2.0) -> BenchmarkData:
    spec = ScenarioSpec(profile=profile, duration=duration, n_cloud_frames=frames, rng_seed=seed)
    noise = BENCHMARKS[name]
    sc = generate_scenario(spec, noise)
    corr = synth_correspondences(sc, DEFAULT_INTRINSICS, noise, per_frame=per_frame, min_depth=min_depth)
    return BenchmarkData(sc.cam, sc.lidar, sc.clouds, corr, DEFAULT_INTRINSICS, sc.t_gt)


def benchmark_from_config(cfg: RunConfig, seed) -> BenchmarkData:
    return make_benchmark(cfg.benchmark, seed, cfg.bench_profile, cfg.bench_duration, cfg.bench_frames,
                          cfg.bench_per_frame, cfg.bench_min_depth)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    sweep_value: float
    seed: int
    e_t_cm: float
    e_r_deg: float
    wall_time_s: float
    n_constraints: int = 0


@dataclass
class AblationResult:
    sweep: str
    rows: list
    aggregate: list = field(default_factory=list)

    def rows_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for r in self.rows:
            w.writerow([_fmt(r.sweep_value), r.seed, repr(r.e_t_cm), repr(r.e_r_deg), repr(r.wall_time_s)])
        return buf.getvalue()

    def aggregate_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(AGGREGATE_HEADER)
        for a in self.aggregate:
            w.writerow([_fmt(a["sweep_value"])] + [repr(a[h]) for h in AGGREGATE_HEADER[1:]])
        return buf.getvalue()

    def write(self, path):
        path = Path(path)
        path.write_text(self.rows_csv(), encoding="utf-8")
        agg = path.with_name(path.stem + "_aggregate" + path.suffix)
        agg.write_text(self.aggregate_csv(), encoding="utf-8")
        return path, agg


def _fmt(v):
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def apply_sweep(cfg: RunConfig, sweep, value, n_frames=None) -> RunConfig:
    if sweep == "pose_count":
        return cfg.updated(pose_count=int(value))
    if sweep == "corr_fraction":
        return cfg.updated(correspondence_fraction=float(value))
    if sweep == "pair_count":
        return cfg.updated(max_pairs_used=int(value))
    if sweep == "pairs_vs_fraction":
        # constant budget: fewer pairs, proportionally more correspondences each
        base_pairs = min(cfg.max_pairs_used, n_frames) if n_frames else cfg.max_pairs_used
        frac = min(1.0, cfg.correspondence_fraction * base_pairs / float(value))
        return cfg.updated(max_pairs_used=int(value), correspondence_fraction=frac)
    raise ConfigError(f"unknown sweep {sweep!r}; expected one of {SWEEPS}")


def aggregate_rows(rows):
    out = []
    for v in sorted({r.sweep_value for r in rows}):
        sel = [r for r in rows if r.sweep_value == v]
        et = np.array([r.e_t_cm for r in sel])
        er = np.array([r.e_r_deg for r in sel])
        ddof = 1 if len(sel) > 1 else 0
        out.append({
            "sweep_value": v,
            "n_runs": len(sel),
            "e_t_mean": float(et.mean()),
            "e_t_std": float(et.std(ddof=ddof)),
            "e_r_mean": float(er.mean()),
            "e_r_std": float(er.std(ddof=ddof)),
            "wall_time_mean": float(np.mean([r.wall_time_s for r in sel])),
            "n_constraints": float(np.mean([r.n_constraints for r in sel])),
        })
    return out


def run_ablation(cfg: RunConfig, sweep, values, seeds, workers=1) -> AblationResult:
    """Run every (sweep value, seed) cell and collect error metrics.

    With ``cfg.benchmark`` set, each seed draws a fresh synthetic scenario;
    otherwise the configured dataset is loaded once and the seed only drives
    correspondence subsampling.  Rows are sorted by (value, seed), so the
    output does not depend on ``workers``.
    """
    if sweep not in SWEEPS:
        raise ConfigError(f"unknown sweep {sweep!r}; expected one of {SWEEPS}")
    seeds = [int(s) for s in seeds]
    if cfg.benchmark:
        data = {s: benchmark_from_config(cfg, s) for s in seeds}
    else:
        cfg.check_files()
        if cfg.reference is None:
            raise ConfigError("ablations need a reference calibration")
        k = dataio.read_intrinsics(cfg.intrinsics) if cfg.intrinsics else None
        shared = BenchmarkData(
            dataio.read_trajectory(cfg.cam_trajectory, "cam"),
            dataio.read_trajectory(cfg.lidar_trajectory, "lidar"),
            dataio.load_clouds(cfg.cloud_manifest) if cfg.cloud_manifest else None,
            dataio.read_correspondences(cfg.correspondences, k) if cfg.correspondences else None,
            k,
            dataio.read_calib_result(cfg.reference).pose(),
        )
        data = {s: shared for s in seeds}

    def cell(value, seed):
        d = data[seed]
        c = apply_sweep(cfg, sweep, value, len(d.corr_sets or [])).updated(seed=seed)
        t0 = time.perf_counter()
        out = run_calibration(d.cam, d.lidar, d.corr_sets, d.k, c, d.clouds, d.t_gt)
        wall = time.perf_counter() - t0
        return AblationRow(float(value), seed, out.metrics.e_t, out.metrics.e_r, wall, out.n_constraints)

    cells = [(float(v), s) for v in values for s in seeds]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda vs: cell(*vs), cells))
    else:
        rows = [cell(v, s) for v, s in cells]
    rows.sort(key=lambda r: (r.sweep_value, r.seed))
    return AblationResult(sweep, rows, aggregate_rows(rows))
