"""Command line entry point: ``camlidar <subcommand>``.

Exit codes: 0 success, 2 configuration, 3 input parsing or I/O,
4 degeneracy, 5 solver failure, 6 validation failure, 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import dataio, pipeline
from .calib import CostSettings, corr_block, initial_scales, motion_blocks
from .errors import CalibError, ConfigError
from .geometry import Pose, Quat, so3_exp
from .metrics import CONVENTIONS, compare_poses
from .robustls import StateVector, jacobian_relative_error
from .sync import pair_trajectories, relative_motions
from .synthcorr import (DEFAULT_INTRINSICS, PROFILES, NoiseSpec, ScenarioSpec, generate_scenario,
                        synth_correspondences, write_bundle)

log = logging.getLogger("camlidar")

EXIT_OK = 0
EXIT_GENERIC = 1
EXIT_VALIDATION = 6


def _overrides(tokens):
    """Turn leftover ``--key value`` / ``--key=value`` tokens into config overrides."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for {tok}")
            i += 1
            value = tokens[i]
        out[key.replace("-", "_")] = value
        i += 1
    return out


def _config(args, extra):
    overrides = _overrides(extra)
    if args.config:
        return pipeline.load_config(args.config, overrides)
    return pipeline.RunConfig.from_mapping(overrides)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_calibrate(args, extra):
    cfg = _config(args, extra)
    if args.strict:
        cfg = cfg.updated(strict=True)
    out = pipeline.run_pipeline(cfg)
    summary = {"output": cfg.output, "stage": out.estimate.stage,
               "warnings": list(out.estimate.warnings)}
    if out.metrics is not None:
        summary["metrics"] = out.metrics.as_dict()
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_synth(args, extra):
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    spec = ScenarioSpec(profile=args.profile, duration=args.duration, n_cloud_frames=args.frames,
                        rng_seed=args.seed)
    if args.noise == "none":
        noise = NoiseSpec()
    else:
        noise = pipeline.BENCHMARKS[args.noise]
    noise = NoiseSpec(
        odo_rot_sigma=noise.odo_rot_sigma if args.odo_rot_sigma is None else args.odo_rot_sigma,
        odo_trans_sigma=noise.odo_trans_sigma if args.odo_trans_sigma is None else args.odo_trans_sigma,
        pixel_sigma=noise.pixel_sigma if args.pixel_sigma is None else args.pixel_sigma,
        outlier_rate=noise.outlier_rate if args.outlier_rate is None else args.outlier_rate,
        outlier_max_offset=noise.outlier_max_offset,
    )
    sc = generate_scenario(spec, noise)
    corr = synth_correspondences(sc, DEFAULT_INTRINSICS, noise, per_frame=args.per_frame,
                                 min_depth=args.min_depth)
    path = write_bundle(sc, corr, args.out, DEFAULT_INTRINSICS)
    print(path)
    return EXIT_OK


def cmd_ablate(args, extra):
    cfg = _config(args, extra)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values needs at least one number")
    seeds = list(range(args.seed, args.seed + args.runs))
    res = pipeline.run_ablation(cfg, args.sweep, values, seeds, workers=args.workers)
    if args.out:
        main, agg = res.write(args.out)
        print(main)
        print(agg)
    else:
        sys.stdout.write(res.rows_csv())
    return EXIT_OK


def cmd_metrics(args, extra):
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    ref = dataio.read_calib_result(args.reference).pose()
    est = dataio.read_calib_result(args.estimate).pose()
    print(json.dumps(compare_poses(ref, est, args.convention).as_dict(), indent=2))
    return EXIT_OK


def _random_states(t_ref: Pose, n_scales, rng, count, rot_deg=5.0, trans_m=0.3):
    for _ in range(count):
        dq = Quat.from_matrix(so3_exp(rng.normal(0.0, np.radians(rot_deg), 3)))
        dt = rng.uniform(-trans_m, trans_m, 3)
        scales = rng.uniform(0.2, 3.0, n_scales)
        yield StateVector(t_ref.rot * dq, t_ref.trans + dt, scales)


def gradient_check(pairs, corr_sets, k, t_ref: Pose, samples=100, seed=0, max_items=20,
                   settings: CostSettings | None = None):
    """Largest relative analytic vs. central-difference Jacobian error per block kind."""
    settings = settings or CostSettings()
    rng = np.random.default_rng(seed)
    pairs = list(pairs)[:max_items]
    blocks = motion_blocks(pairs, settings) if pairs else []
    if corr_sets:
        cs = [c.take(np.arange(min(len(c), max_items))) for c in corr_sets[:1] if len(c)]
        if cs:
            blocks.append(corr_block(cs, k, settings))
    n_scales = len(initial_scales(pairs)) if pairs else 0
    worst = {}
    for state in _random_states(t_ref, n_scales, rng, samples):
        for b in blocks:
            err = jacobian_relative_error(b, state)
            worst[b.kind] = max(worst.get(b.kind, 0.0), err)
    return worst


def cmd_check_gradients(args, extra):
    if args.config:
        cfg = _config(args, extra)
        cfg.check_files()
        cam = dataio.read_trajectory(cfg.cam_trajectory, "cam")
        lidar = dataio.read_trajectory(cfg.lidar_trajectory, "lidar")
        k = dataio.read_intrinsics(cfg.intrinsics) if cfg.intrinsics else None
        corr = dataio.read_correspondences(cfg.correspondences, k) if cfg.correspondences else []
        ref_path = cfg.reference or cfg.initial_calib
        t_ref = dataio.read_calib_result(ref_path).pose() if ref_path else Pose.identity()
        max_gap, min_motion, min_rot = cfg.max_gap, cfg.min_motion, cfg.min_rot_deg
    else:
        if extra:
            raise ConfigError(f"unexpected arguments {extra}")
        sc = generate_scenario(ScenarioSpec(duration=10.0, n_cloud_frames=5, rng_seed=args.seed))
        cam, lidar, k, t_ref = sc.cam, sc.lidar, DEFAULT_INTRINSICS, sc.t_gt
        corr = synth_correspondences(sc, k, per_frame=50)
        max_gap, min_motion, min_rot = 0.15, 0.01, 0.1
    sync = pair_trajectories(cam, lidar, max_gap)
    pairs = relative_motions(sync.frames, min_motion, min_rot)
    worst = gradient_check(pairs, corr, k, t_ref, args.samples, args.seed)
    ok = all(v <= args.tolerance for v in worst.values())
    for kind, err in worst.items():
        print(f"{kind:6s} max relative error {err:.3e} {'ok' if err <= args.tolerance else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VALIDATION


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="camlidar", description="Target-less camera-LiDAR extrinsic calibration.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="calibrate from a key=value config; extra --key value pairs override it")
    c.add_argument("--config", required=True)
    c.add_argument("--strict", action="store_true", help="fail on weakly observable directions")
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("synth", help="write a synthetic dataset and a ready-to-run config")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--profile", choices=PROFILES, default="figure_eight_3d")
    s.add_argument("--duration", type=float, default=60.0)
    s.add_argument("--frames", type=int, default=50)
    s.add_argument("--per-frame", type=int, default=200)
    s.add_argument("--min-depth", type=float, default=2.0)
    s.add_argument("--noise", choices=("none",) + tuple(k for k in pipeline.BENCHMARKS if k != "noiseless"),
                   default="none")
    s.add_argument("--odo-rot-sigma", type=float)
    s.add_argument("--odo-trans-sigma", type=float)
    s.add_argument("--pixel-sigma", type=float)
    s.add_argument("--outlier-rate", type=float)
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("ablate", help="sweep one setting over several seeds")
    a.add_argument("--config")
    a.add_argument("--sweep", choices=pipeline.SWEEPS, required=True)
    a.add_argument("--values", required=True, help="comma separated sweep values")
    a.add_argument("--seed", type=int, required=True, help="first seed")
    a.add_argument("--runs", type=int, default=3, help="seeds per value")
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--out", help="CSV path; an _aggregate CSV is written next to it")
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("metrics", help="compare two calibration result files")
    m.add_argument("--reference", required=True)
    m.add_argument("--estimate", required=True)
    m.add_argument("--convention", choices=CONVENTIONS, default="paper")
    m.set_defaults(func=cmd_metrics)

    g = sub.add_parser("check-gradients", help="compare analytic and numeric Jacobians")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--samples", type=int, default=100)
    g.add_argument("--tolerance", type=float, default=1e-5)
    g.set_defaults(func=cmd_check_gradients)
    return p


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except CalibError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_GENERIC


if __name__ == "__main__":
    sys.exit(main())
