"""
Quaternion and rotation algebra, relative poses and the two pose error metrics.

Conventions used by every relpose module:

    - absolute poses are world-to-camera: x_cam = R * x_world + t
    - quaternions are (w, x, y, z), Hamilton product, canonical hemisphere w >= 0
    - a relative pose (dq, dt) maps camera i to camera j: dq is the rotation
      R_ij = R_j * R_i^T and dt the unit direction of t_j - R_ij * t_i, expressed
      in camera-j coordinates
    - errors are reported in degrees

Pose text format (one camera per line, '#' starts a comment):

    id qw qx qy qz tx ty tz
"""

import logging
import math
from typing import NamedTuple

import numpy as np

from util import RelPoseError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12
BASELINE_EPS = 1e-9
ROTATION_TOL = 1e-6


class GeomError(RelPoseError):
    module = "geom"


class NearZeroQuaternionError(GeomError):
    pass


class NearZeroTranslationError(GeomError):
    pass


class InvalidRotationError(GeomError):
    pass


class DegenerateBaselineError(GeomError):
    pass


class Quaternion(NamedTuple):
    w: float
    x: float
    y: float
    z: float

    def as_array(self):
        return np.array(self, dtype=np.float64)

    def norm(self):
        return math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)


IDENTITY = Quaternion(1.0, 0.0, 0.0, 0.0)


class AbsolutePose(NamedTuple):
    """World-to-camera pose: x_cam = rotation @ x_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def transform(self, X):
        """Maps world points (3,) or (N, 3) into the camera frame."""
        return np.asarray(X, dtype=np.float64) @ self.rotation.T + self.translation

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))


class RelativePose(NamedTuple):
    dq: Quaternion
    dt: np.ndarray

    def as_vector(self):
        """The 7-vector [dq, dt]."""
        return np.concatenate([self.dq.as_array(), np.asarray(self.dt, dtype=np.float64)])

    @classmethod
    def from_vector(cls, v):
        """
        Splits a 7-vector into orientation and translation and normalizes both.
        """
        v = np.asarray(v, dtype=np.float64).reshape(7)
        return cls(quat_normalize(Quaternion(*v[:4])), unit_vector(v[4:]))


def quat_normalize(q):
    """
    Scales a quaternion to unit length and moves it to the canonical hemisphere
    (w >= 0; when w == 0 the first non-zero of x, y, z is positive).
    """
    q = Quaternion(*(float(c) for c in q))
    n = q.norm()
    if n <= NORM_EPS:
        raise NearZeroQuaternionError(f"quaternion {tuple(q)} has norm {n:.3e}")
    q = Quaternion(*(c / n for c in q))
    sign = 1.0
    if q.w < 0.0:
        sign = -1.0
    elif q.w == 0.0:
        first = next((c for c in (q.x, q.y, q.z) if c != 0.0), 0.0)
        if first < 0.0:
            sign = -1.0
    if sign < 0.0:
        q = Quaternion(*(-c for c in q))
    return q


def unit_vector(t):
    t = np.asarray(t, dtype=np.float64).reshape(3)
    n = float(np.linalg.norm(t))
    if n <= NORM_EPS:
        raise NearZeroTranslationError(f"translation {t.tolist()} has norm {n:.3e}")
    return t / n


def quat_multiply(p, q):
    """Hamilton product p * q."""
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return Quaternion(
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    )


def quat_conjugate(q):
    return Quaternion(q[0], -q[1], -q[2], -q[3])


def quat_to_rotation(q):
    """
    Rotation matrix of a quaternion (normalized first).
    """
    w, x, y, z = quat_normalize(q)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def check_rotation(R, tol=ROTATION_TOL):
    """
    Validates a 3x3 rotation matrix and returns it as a float64 array.

    :raises InvalidRotationError: when R^T R deviates from I or det(R) from +1 by more than tol
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidRotationError(f"expected a finite 3x3 matrix, got shape {R.shape}")
    ortho = float(np.max(np.abs(R.T @ R - np.eye(3))))
    det = float(np.linalg.det(R))
    if ortho > tol or abs(det - 1.0) > tol:
        raise InvalidRotationError(
            f"matrix is not a rotation (orthonormality error {ortho:.2e}, det {det:.6f})"
        )
    return R


def rotation_to_quat(R):
    """
    Canonical unit quaternion of a rotation matrix (Shepperd's branch selection).
    """
    R = check_rotation(R)
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0.0:
        s = math.sqrt(trace + 1.0) * 2.0
        q = (0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s)
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = ((R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s)
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = ((R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s)
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = ((R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s)
    return quat_normalize(q)


def relative_pose(pose_i, pose_j):
    """
    Relative pose taking camera i to camera j.

    :param pose_i: AbsolutePose of the first camera
    :param pose_j: AbsolutePose of the second camera
    :return: RelativePose with dq = quat(R_j R_i^T) and dt the unit direction of t_j - R_ij t_i
    :raises DegenerateBaselineError: when the camera centers coincide
    """
    R_ij = check_rotation(pose_j.rotation) @ check_rotation(pose_i.rotation).T
    t_ij = np.asarray(pose_j.translation, dtype=np.float64) - R_ij @ np.asarray(
        pose_i.translation, dtype=np.float64
    )
    n = float(np.linalg.norm(t_ij))
    if n <= BASELINE_EPS:
        raise DegenerateBaselineError(f"camera centers coincide (baseline {n:.3e})")
    return RelativePose(rotation_to_quat(R_ij), t_ij / n)


def roe(q_est, q_gt):
    """
    Relative orientation error in degrees: the angle of the rotation taking the
    estimate onto the ground truth. Invariant to sign and positive scale of either
    quaternion. Equal to 2 acos(|<q_est, q_gt>|), evaluated through atan2 of the
    difference quaternion so it stays accurate near 0 and 180 degrees.
    """
    diff = quat_multiply(quat_conjugate(quat_normalize(q_est)), quat_normalize(q_gt))
    vec = math.sqrt(diff.x * diff.x + diff.y * diff.y + diff.z * diff.z)
    return math.degrees(2.0 * math.atan2(vec, abs(diff.w)))


def rte(t_est, t_gt):
    """
    Relative translation error in degrees: the angle between the two directions.
    """
    a = unit_vector(t_est)
    b = unit_vector(t_gt)
    return math.degrees(math.atan2(float(np.linalg.norm(np.cross(a, b))), float(a @ b)))


def rotation_angle_deg(q):
    """Magnitude of the rotation encoded by q, in degrees."""
    return roe(IDENTITY, q)


def read_poses(path):
    """
    Reads the pose text format.

    :param path: text file with lines `id qw qx qy qz tx ty tz`
    :return: dictionary id -> AbsolutePose, in file order
    """
    poses = {}
    with open(path, "r", encoding="utf-8") as f:
        for no, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 8:
                raise GeomError(f"{path}:{no}: expected 8 fields, got {len(fields)}")
            values = [float(v) for v in fields[1:]]
            poses[fields[0]] = AbsolutePose(
                quat_to_rotation(values[:4]), np.array(values[4:], dtype=np.float64)
            )
    logger.debug(f"Read {len(poses)} poses from {path}")
    return poses


def write_poses(path, poses):
    with open(path, "w", encoding="utf-8") as f:
        f.write("# id qw qx qy qz tx ty tz\n")
        for pose_id, pose in poses.items():
            q = rotation_to_quat(pose.rotation)
            values = list(q) + [float(v) for v in pose.translation]
            f.write(f"{pose_id} " + " ".join(repr(v) for v in values) + "\n")
