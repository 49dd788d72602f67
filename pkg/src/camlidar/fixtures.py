"""Published LiDAR-to-camera parameters for KITTI odometry sequence 00.

Values are stored exactly as printed (five significant digits), so the
matrices are orthonormal only to about 1e-4.  They serve as parsing and
metric regression fixtures and as a realistic default rig for synthetic data.
"""
import numpy as np

from .dataio import CalibResult
from .geometry import Pose, Quat

KITTI_LEFT_R = np.array([
    [-1.2619e-04, -9.9997e-01, -8.2230e-03],
    [-7.8537e-03, 8.2238e-03, -9.9994e-01],
    [9.9997e-01, -6.1602e-05, -7.8545e-03],
])
KITTI_LEFT_T = np.array([5.1090e-02, -5.5873e-02, -2.9575e-01])

KITTI_RIGHT_R = np.array([
    [-1.8202e-03, -9.9996e-01, -8.2416e-03],
    [-8.2823e-03, 8.2564e-03, -9.9993e-01],
    [9.9996e-01, -1.7518e-03, -8.2970e-03],
])
KITTI_RIGHT_T = np.array([-4.5166e-01, -4.8448e-02, -2.8787e-01])

_TABLE = {
    "left": (KITTI_LEFT_R, KITTI_LEFT_T),
    "right": (KITTI_RIGHT_R, KITTI_RIGHT_T),
}


def kitti_reference(side="left") -> CalibResult:
    """Reference calibration as a result record (matrix kept as printed)."""
    R, t = _TABLE[side]
    return CalibResult(rotation=Quat.from_matrix(R), translation=t.copy(), rotation_matrix=R.copy())


def kitti_pose(side="left") -> Pose:
    """Nearest proper rigid transform to the printed parameters."""
    R, t = _TABLE[side]
    return Pose(0.0, Quat.from_matrix(R), t)
