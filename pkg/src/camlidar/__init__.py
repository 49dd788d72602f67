"""Target-less extrinsic calibration of a camera-LiDAR rig.

Modules: ``geometry`` (SO(3)/SE(3), projection), ``dataio`` (file formats),
``sync`` (time alignment, motion pairs), ``robustls`` (robust LM solver),
``calib`` (coarse and fine stages), ``synthcorr`` (synthetic data),
``metrics``, ``pipeline`` and ``cli``.
"""
from .calib import coarse_calibrate, fine_calibrate
from .geometry import CameraIntrinsics, Pose, Quat
from .metrics import compare_poses, rotation_error, translation_error
from .pipeline import RunConfig, run_ablation, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "Pose", "Quat", "RunConfig", "coarse_calibrate", "compare_poses",
    "fine_calibrate", "rotation_error", "run_ablation", "run_pipeline", "translation_error",
]
