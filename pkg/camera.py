"""
Pinhole cameras, viewing frusta and overlapping-pair enumeration.

A frustum is the convex polytope seen by a camera between a near and a far
depth: 8 corners and 6 inward-oriented planes (4 sides, near, far). A point p
is inside when n . p + o <= 0 for every plane (n, o). Two frusta overlap iff
no separating axis exists among both face normal sets and the cross products
of their edge directions (exact separating axis test for convex polytopes).

Scene file (JSON):

    {"cameras": [{"id": "0", "intrinsics": {"fx":..., "fy":..., "cx":..., "cy":...,
                  "width":..., "height":...},
                  "pose": {"q": [qw, qx, qy, qz], "t": [tx, ty, tz]}}, ...]}
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

import util
from geom import AbsolutePose, check_rotation, quat_to_rotation, rotation_to_quat
from util import RelPoseError

logger = logging.getLogger(__name__)

DEFAULT_NEAR = 0.1
DEFAULT_FAR = 10.0
SAT_EPS = 1e-12
AXIS_EPS = 1e-12

PAIRS_HEADER = ["i", "j"]


class CameraError(RelPoseError):
    module = "camera"


class InvalidIntrinsicsError(CameraError):
    pass


class InvalidRangeError(CameraError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidIntrinsicsError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise InvalidIntrinsicsError(f"image size must be at least 1x1, got {self.width}x{self.height}")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def matrix_inv(self):
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def to_dict(self):
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"])
        )


class Projection(NamedTuple):
    uv: np.ndarray
    depth: np.ndarray
    in_front: np.ndarray  # False where the point is behind the camera (z <= 0)


class SceneCamera(NamedTuple):
    id: str
    intrinsics: CameraIntrinsics
    pose: AbsolutePose


@dataclass(frozen=True)
class Frustum:
    apex: np.ndarray
    normals: np.ndarray  # (6, 3), unit, pointing outwards
    offsets: np.ndarray  # (6,)
    corners: np.ndarray  # (8, 3): near face then far face

    def contains(self, points, tol=1e-9):
        """Inside test for (N, 3) points; boundary counts as inside."""
        points = np.atleast_2d(points)
        return np.all(points @ self.normals.T + self.offsets <= tol, axis=1)

    def edge_directions(self):
        near, far = self.corners[:4], self.corners[4:]
        lateral = far - near
        rim = np.stack([near[1] - near[0], near[2] - near[1]])
        return np.concatenate([lateral, rim])


def project(K, pose, X):
    """
    Projects world point(s) into pixel coordinates.

    Points behind the camera are not an error: their status comes back in
    `in_front` and their pixel coordinates are still the algebraic projection.

    :param K: CameraIntrinsics
    :param pose: AbsolutePose (world-to-camera)
    :param X: a 3-vector or an (N, 3) array
    :return: Projection with uv (N, 2), depth (N,), in_front (N,); single points give shapes (2,), (), ()
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    Xc = pose.transform(np.atleast_2d(X))
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * Xc[:, 0] / z + K.cx
        v = K.fy * Xc[:, 1] / z + K.cy
    uv = np.stack([u, v], axis=1)
    in_front = z > 0
    if single:
        return Projection(uv[0], z[0], bool(in_front[0]))
    return Projection(uv, z, in_front)


def unproject(K, pose, uv, depth):
    """
    World points seen at pixel(s) uv with camera depth(s) `depth`.
    """
    uv = np.asarray(uv, dtype=np.float64)
    single = uv.ndim == 1
    uv = np.atleast_2d(uv)
    depth = np.broadcast_to(np.asarray(depth, dtype=np.float64), (uv.shape[0],))
    Xc = np.stack(
        [(uv[:, 0] - K.cx) / K.fx * depth, (uv[:, 1] - K.cy) / K.fy * depth, depth], axis=1
    )
    X = (Xc - pose.translation) @ pose.rotation
    return X[0] if single else X


def scale_intrinsics(K, new_width, new_height):
    """
    Intrinsics of the same camera after resizing its images to new_width x new_height.
    """
    sx = new_width / K.width
    sy = new_height / K.height
    return CameraIntrinsics(K.fx * sx, K.fy * sy, K.cx * sx, K.cy * sy, int(new_width), int(new_height))


def _plane_through(a, b, c, inside_point):
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    o = -float(n @ a)
    if n @ inside_point + o > 0:
        n, o = -n, -o
    return n, o


def build_frustum(K, pose, near, far):
    """
    Frustum of a camera between depths near and far.

    :param K: CameraIntrinsics
    :param pose: AbsolutePose
    :param near: near depth, 0 < near
    :param far: far depth, near < far
    :return: Frustum with corners at the back-projections of the image corners
    :raises InvalidRangeError: unless 0 < near < far
    """
    if not (0 < near < far):
        raise InvalidRangeError(f"need 0 < near < far, got near={near}, far={far}")
    check_rotation(pose.rotation)
    image_corners = np.array(
        [[0.0, 0.0], [K.width, 0.0], [K.width, K.height], [0.0, K.height]], dtype=np.float64
    )
    near_corners = unproject(K, pose, image_corners, near)
    far_corners = unproject(K, pose, image_corners, far)
    corners = np.concatenate([near_corners, far_corners])
    apex = pose.center
    centroid = corners.mean(axis=0)

    planes = [
        _plane_through(apex, near_corners[k], near_corners[(k + 1) % 4], centroid) for k in range(4)
    ]
    planes.append(_plane_through(near_corners[0], near_corners[1], near_corners[2], centroid))
    planes.append(_plane_through(far_corners[0], far_corners[1], far_corners[2], centroid))
    normals = np.array([p[0] for p in planes])
    offsets = np.array([p[1] for p in planes])
    return Frustum(apex, normals, offsets, corners)


def _candidate_axes(f1, f2):
    axes = [f1.normals, f2.normals]
    e1 = f1.edge_directions()
    e2 = f2.edge_directions()
    cross = np.cross(e1[:, None, :], e2[None, :, :]).reshape(-1, 3)
    lengths = np.linalg.norm(cross, axis=1)
    scale = np.linalg.norm(e1, axis=1).max() * np.linalg.norm(e2, axis=1).max()
    keep = lengths > AXIS_EPS * max(scale, 1.0)
    axes.append(cross[keep] / lengths[keep, None])
    return np.concatenate(axes)


def separation(f1, f2):
    """
    Largest gap between the projections of the two frusta over all separating
    axis candidates. Positive: separated by that distance. Zero or negative:
    the polytopes intersect (minus the penetration along the best axis).
    """
    axes = _candidate_axes(f1, f2)
    p1 = f1.corners @ axes.T
    p2 = f2.corners @ axes.T
    gap = np.maximum(p2.min(axis=0) - p1.max(axis=0), p1.min(axis=0) - p2.max(axis=0))
    return float(gap.max())


def frustums_overlap(f1, f2):
    """True iff the two frusta (closed convex polytopes) intersect."""
    return separation(f1, f2) <= SAT_EPS


def overlapping_pairs(cameras, near=DEFAULT_NEAR, far=DEFAULT_FAR, threads=None):
    """
    Enumerates the camera pairs with overlapping fields of view.

    :param cameras: list of (CameraIntrinsics, AbsolutePose) or SceneCamera
    :param near: near depth of every frustum
    :param far: far depth of every frustum
    :param threads: worker count (default from RELPOSE_THREADS)
    :return: sorted list of (i, j) with i < j
    """
    if len(cameras) < 2:
        raise CameraError(f"need at least 2 cameras, got {len(cameras)}")
    frusta = []
    for cam in cameras:
        K, pose = (cam.intrinsics, cam.pose) if isinstance(cam, SceneCamera) else cam
        frusta.append(build_frustum(K, pose, near, far))

    candidates = list(itertools.combinations(range(len(frusta)), 2))

    def check(pair):
        return frustums_overlap(frusta[pair[0]], frusta[pair[1]])

    workers = util.get_threads(threads)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            flags = list(pool.map(check, candidates))
    else:
        flags = [check(p) for p in candidates]
    pairs = [p for p, ok in zip(candidates, flags) if ok]
    logger.info(
        f"{len(pairs)} overlapping pairs out of {len(candidates)} candidates ({len(frusta)} cameras)"
    )
    return pairs


def adjacency_matrix(pairs, n):
    """Symmetric 0/1 matrix marking the pairs whose relative pose is computed."""
    A = np.zeros((n, n), dtype=np.int64)
    for i, j in pairs:
        A[i, j] = A[j, i] = 1
    return A


def read_scene(path):
    data = util.read_json(path)
    try:
        cameras = [
            SceneCamera(
                str(c["id"]),
                CameraIntrinsics.from_dict(c["intrinsics"]),
                AbsolutePose(quat_to_rotation(c["pose"]["q"]), np.array(c["pose"]["t"], dtype=np.float64)),
            )
            for c in data["cameras"]
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise CameraError(f"malformed scene file {path}: {e}") from e
    logger.debug(f"Loaded {len(cameras)} cameras from scene {path}")
    return cameras


def write_scene(path, cameras):
    util.write_json(
        path,
        {
            "cameras": [
                {
                    "id": c.id,
                    "intrinsics": c.intrinsics.to_dict(),
                    "pose": {
                        "q": list(rotation_to_quat(c.pose.rotation)),
                        "t": [float(v) for v in c.pose.translation],
                    },
                }
                for c in cameras
            ]
        },
    )


def write_pairs(path, pairs):
    util.write_csv(path, PAIRS_HEADER, [{"i": i, "j": j} for i, j in pairs])
