"""Calibration error metrics.

``translation_error`` is the Euclidean distance in centimeters.
``rotation_error`` evaluates, with ``m = q_ref * q_est^-1``::

    E_R = atan2( sqrt(m_x^2 + m_y^2 + m_z^2), m_w )

in degrees.  As written this is half the geodesic angle of the relative
rotation; the ``"full_angle"`` convention doubles it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Quat, quat_multiply, quat_to_matrix

CONVENTIONS = ("paper", "full_angle")
GIMBAL_MARGIN_DEG = 0.5


def _quat_array(q):
    return q.as_array() if isinstance(q, Quat) else np.asarray(q, dtype=float)


def translation_error(t_ref, t_est) -> float:
    """Centimeters."""
    return float(100.0 * np.linalg.norm(np.asarray(t_ref, dtype=float) - np.asarray(t_est, dtype=float)))


def relative_quat(q_ref, q_est):
    a = _quat_array(q_ref)
    b = _quat_array(q_est)
    b_inv = b * np.array([1.0, -1.0, -1.0, -1.0]) / (b @ b)
    m = quat_multiply(a, b_inv)
    return -m if m[0] < 0 else m


def rotation_error(q_ref, q_est, convention="paper") -> float:
    """Degrees; accepts :class:`Quat` or raw ``(w, x, y, z)`` arrays of either sign."""
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown rotation error convention {convention!r}")
    m = relative_quat(q_ref, q_est)
    angle = math.degrees(math.atan2(math.sqrt(m[1] ** 2 + m[2] ** 2 + m[3] ** 2), m[0]))
    return 2.0 * angle if convention == "full_angle" else angle


def euler_xyz(R):
    """Intrinsic x-y'-z'' angles (roll, pitch, yaw) in radians with ``R = Rx Ry Rz``."""
    R = np.asarray(R, dtype=float)
    pitch = math.asin(max(-1.0, min(1.0, R[0, 2])))
    roll = math.atan2(-R[1, 2], R[2, 2])
    yaw = math.atan2(-R[0, 1], R[0, 0])
    return roll, pitch, yaw


@dataclass(frozen=True)
class MetricReport:
    e_t: float
    e_r: float
    x: float
    y: float
    z: float
    roll: float
    pitch: float
    yaw: float
    gimbal_warning: bool = False
    convention: str = "paper"

    def as_dict(self):
        return {
            "e_t_cm": self.e_t, "e_r_deg": self.e_r,
            "x_cm": self.x, "y_cm": self.y, "z_cm": self.z,
            "roll_deg": self.roll, "pitch_deg": self.pitch, "yaw_deg": self.yaw,
            "gimbal_warning": self.gimbal_warning, "rotation_error_convention": self.convention,
        }


def per_axis_errors(t_ref, t_est, q_ref, q_est):
    """Absolute per-axis errors: translation in cm, rotation in degrees.

    Rotation axes are the intrinsic XYZ angles of ``m = q_ref * q_est^-1``.
    Returns ``(x, y, z, roll, pitch, yaw, gimbal_warning)``.
    """
    d = np.abs(np.asarray(t_ref, dtype=float) - np.asarray(t_est, dtype=float)) * 100.0
    roll, pitch, yaw = (abs(math.degrees(a)) for a in euler_xyz(quat_to_matrix(relative_quat(q_ref, q_est))))
    gimbal = abs(pitch - 90.0) < GIMBAL_MARGIN_DEG
    return float(d[0]), float(d[1]), float(d[2]), roll, pitch, yaw, gimbal


def metric_report(t_ref, q_ref, t_est, q_est, convention="paper") -> MetricReport:
    x, y, z, roll, pitch, yaw, gimbal = per_axis_errors(t_ref, t_est, q_ref, q_est)
    return MetricReport(
        e_t=translation_error(t_ref, t_est),
        e_r=rotation_error(q_ref, q_est, convention),
        x=x, y=y, z=z, roll=roll, pitch=pitch, yaw=yaw,
        gimbal_warning=gimbal, convention=convention,
    )


def compare_poses(ref, est, convention="paper") -> MetricReport:
    return metric_report(ref.trans, ref.rot, est.trans, est.rot, convention)
