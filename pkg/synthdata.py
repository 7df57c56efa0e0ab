"""
Synthetic image pairs with exact ground-truth relative pose, and the
resize/crop policy applied to every image fed to the regressor.

A scene is a textured plane n . X + d = 0 expressed in the frame of the first
camera, with d > 0 and n pointing towards that camera. Pixels of the second view
are mapped back through the plane-induced homography

    H = K (R - t n^T / d) K^-1        (p2 ~ H p1)

onto the plane, where the tiled procedural texture is sampled bilinearly. The
texture is blended with a smooth color field anchored at the foot of the plane
(the point closest to the first camera): red and green ramp along the two plane
axes and blue peaks at the foot. The field is the same in every scene, so each
view shows where it looks on the plane.
Images are 8-bit RGB, stored as binary PPM (P6).

Manifest (JSON Lines, image paths relative to the manifest):

    {"img1": ..., "img2": ..., "qw": ..., "qx": ..., "qy": ..., "qz": ...,
     "tx": ..., "ty": ..., "tz": ..., "seed": ..., "scene": ..., "intrinsics": {...}}
"""

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

import camera
import util
from camera import CameraIntrinsics, SceneCamera
from epipolar import CorrespondenceSet
from geom import AbsolutePose, RelativePose, relative_pose
from util import RelPoseError

logger = logging.getLogger(__name__)

MAX_POSE_ATTEMPTS = 100
MAX_POINT_ROUNDS = 100
HIT_EPS = 1e-12

TRAIN_MANIFEST = "train.jsonl"
VAL_MANIFEST = "val.jsonl"
SCENE_FILE = "scene.json"
IMAGE_DIR = "images"

_NOISE_OCTAVES = (4, 8, 16, 32)

DEFAULT_SHADING = 0.5  # weight of the anchored color field against the texture
SHADING_SCALE = 1.0  # plane units


class SynthDataError(RelPoseError):
    module = "synthdata"


class SamplingExhaustedError(SynthDataError):
    pass


class PlaneBehindCameraError(SynthDataError):
    pass


class ImageTooSmallError(SynthDataError):
    pass


class IoFailureError(SynthDataError):
    pass


def _tile_upsample(grid, size):
    """Bilinear, wrap-around upsampling of a (g, g, 3) grid to (size, size, 3)."""
    g = grid.shape[0]
    pos = np.arange(size) * g / size
    i0 = np.floor(pos).astype(int)
    f = pos - i0
    i0 %= g
    i1 = (i0 + 1) % g
    rows = grid[i0] * (1 - f)[:, None, None] + grid[i1] * f[:, None, None]
    return rows[:, i0] * (1 - f)[None, :, None] + rows[:, i1] * f[None, :, None]


def make_texture(seed, size=256):
    """
    Seeded RGB texture: multi-octave value noise plus a dark grid, values in
    [0, 255], periodic in both directions.
    """
    rng = util.make_rng(seed, "texture")
    tex = np.zeros((size, size, 3))
    weight_sum = 0.0
    for k, cells in enumerate(_NOISE_OCTAVES):
        weight = 0.5**k
        tex += weight * _tile_upsample(rng.random((cells, cells, 3)), size)
        weight_sum += weight
    tex /= weight_sum
    step = max(size // 8, 1)
    lines = (np.arange(size) % step) < max(step // 16, 1)
    tex[lines, :, :] *= 0.35
    tex[:, lines, :] *= 0.35
    return tex * 255.0


def _anchored_field(a, b):
    """RGB field in [0, 255] over in-plane coordinates measured from the plane foot."""
    a = np.asarray(a, dtype=np.float64) / SHADING_SCALE
    b = np.asarray(b, dtype=np.float64) / SHADING_SCALE
    red = 0.5 * (1.0 + np.tanh(a))
    green = 0.5 * (1.0 + np.tanh(b))
    blue = np.exp(-0.5 * (a * a + b * b))
    return 255.0 * np.stack([red, green, blue], axis=-1)


@dataclass(frozen=True)
class PlanarScene:
    """
    :param normal: unit normal, pointing towards the first camera
    :param distance: d > 0 in n . X + d = 0 (first camera frame)
    :param texture: (T, T, 3) float texture, tiled over the plane
    :param texel: plane units per texel
    :param shading: weight in [0, 1] of the anchored color field
    """

    normal: np.ndarray
    distance: float
    texture: np.ndarray
    texel: float = 0.03
    shading: float = 0.0

    def __post_init__(self):
        if not self.distance > 0:
            raise SynthDataError(f"plane distance must be positive, got {self.distance}")
        if not 0.0 <= self.shading <= 1.0:
            raise SynthDataError(f"shading must be in [0, 1], got {self.shading}")
        n = np.asarray(self.normal, dtype=np.float64)
        object.__setattr__(self, "normal", n / np.linalg.norm(n))

    @property
    def basis(self):
        n = self.normal
        helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = np.cross(n, helper)
        e1 /= np.linalg.norm(e1)
        return e1, np.cross(n, e1)

    def point(self, a, b):
        """Plane point(s) at in-plane coordinates (a, b)."""
        e1, e2 = self.basis
        a = np.asarray(a, dtype=np.float64)[..., None]
        b = np.asarray(b, dtype=np.float64)[..., None]
        return -self.distance * self.normal + a * e1 + b * e2

    def coordinates(self, X):
        e1, e2 = self.basis
        return X @ e1, X @ e2

    def sample(self, X):
        """Color at plane points X (N, 3): bilinear texture lookup (tiled), blended with the anchored field."""
        a, b = self.coordinates(np.atleast_2d(X))
        size = self.texture.shape[0]
        x = a / self.texel
        y = b / self.texel
        x0 = np.floor(x).astype(np.int64)
        y0 = np.floor(y).astype(np.int64)
        fx = (x - x0)[:, None]
        fy = (y - y0)[:, None]
        x0 %= size
        y0 %= size
        x1 = (x0 + 1) % size
        y1 = (y0 + 1) % size
        tex = self.texture
        top = tex[y0, x0] * (1 - fx) + tex[y0, x1] * fx
        bottom = tex[y1, x0] * (1 - fx) + tex[y1, x1] * fx
        color = top * (1 - fy) + bottom * fy
        if not self.shading:
            return color
        return (1.0 - self.shading) * color + self.shading * _anchored_field(a, b)


def make_scene(seed, distance=4.0, max_tilt_deg=20.0, texture_size=256, texel=0.03, shading=DEFAULT_SHADING):
    """Plane at the given distance, tilted up to max_tilt_deg from fronto-parallel."""
    rng = util.make_rng(seed, "scene")
    tilt = math.radians(max_tilt_deg) * rng.random()
    phi = 2.0 * math.pi * rng.random()
    normal = np.array([math.sin(tilt) * math.cos(phi), math.sin(tilt) * math.sin(phi), -math.cos(tilt)])
    return PlanarScene(normal, float(distance), make_texture(seed, texture_size), texel, shading)


def _axis_angle_matrix(axis, angle):
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def _relative_motion(pose1, pose2):
    R = pose2.rotation @ pose1.rotation.T
    return R, pose2.translation - R @ pose1.translation


def _sees_plane(scene, pose1, pose2, K):
    # camera 2 on the camera-1 side of the plane, every image corner ray hits it
    R, t = _relative_motion(pose1, pose2)
    center = -R.T @ t
    if scene.normal @ center + scene.distance <= 0:
        return False
    if K is None:
        return True
    corners = np.array(
        [[0.0, 0.0, 1.0], [K.width - 1, 0.0, 1.0], [K.width - 1, K.height - 1, 1.0], [0.0, K.height - 1, 1.0]]
    )
    rays = (corners @ K.matrix_inv.T) @ R
    return bool(np.all(rays @ scene.normal < -HIT_EPS))


def sample_pair_pose(seed, max_rotation_deg=30.0, max_baseline_ratio=0.3, scene=None, K=None, distance=1.0):
    """
    Random camera pair: camera 1 at the canonical pose, camera 2 rotated by a
    uniform random axis and an angle uniform in [0, max_rotation_deg], its center
    uniform in the ball of radius max_baseline_ratio * d around camera 1.

    :param scene: PlanarScene for the visibility check; its d sets the baseline scale
    :param distance: baseline scale when there is no scene (no visibility check then)
    :param K: CameraIntrinsics; when given, camera 2 must see the plane in all four image corners
    :return: (AbsolutePose, AbsolutePose)
    :raises SamplingExhaustedError: after 100 rejected samples
    """
    if not 0 < max_rotation_deg <= 90:
        raise SynthDataError(f"max rotation must be in (0, 90] degrees, got {max_rotation_deg}")
    if not max_baseline_ratio > 0:
        raise SynthDataError(f"baseline ratio must be positive, got {max_baseline_ratio}")
    if scene is not None:
        distance = scene.distance
    rng = util.make_rng(seed, "pose")
    pose1 = AbsolutePose.identity()
    for _ in range(MAX_POSE_ATTEMPTS):
        axis = rng.normal(size=3)
        angle = math.radians(max_rotation_deg) * rng.random()
        direction = rng.normal(size=3)
        radius = max_baseline_ratio * distance * rng.random() ** (1.0 / 3.0)
        if np.linalg.norm(axis) < HIT_EPS or np.linalg.norm(direction) < HIT_EPS or radius <= 1e-9 * distance:
            continue
        R = _axis_angle_matrix(axis, angle)
        center = radius * direction / np.linalg.norm(direction)
        pose2 = AbsolutePose(R, -R @ center)
        if scene is None or _sees_plane(scene, pose1, pose2, K):
            return pose1, pose2
    raise SamplingExhaustedError(f"no visible pose pair after {MAX_POSE_ATTEMPTS} attempts (seed {seed})")


def plane_homography(scene, pose1, pose2, K):
    """H with p2 ~ H p1 for pixels of points on the scene plane."""
    R, t = _relative_motion(pose1, pose2)
    return K.matrix @ (R - np.outer(t, scene.normal) / scene.distance) @ K.matrix_inv


def _pixel_grid(K):
    u, v = np.meshgrid(np.arange(K.width, dtype=np.float64), np.arange(K.height, dtype=np.float64))
    return np.stack([u.ravel(), v.ravel(), np.ones(u.size)], axis=1)


def _intersect(scene, rays):
    """Plane points on the lines through the camera-1 center along rays; NaN where parallel."""
    denom = rays @ scene.normal
    hit = np.abs(denom) > HIT_EPS
    s = -scene.distance / np.where(hit, denom, 1.0)
    X = rays * s[:, None]
    X[~hit] = np.nan
    return X, s, hit


def _to_image(values, K):
    return np.clip(np.rint(values), 0, 255).astype(np.uint8).reshape(K.height, K.width, 3)


def render_images(scene, poses, K):
    """
    Renders both views of the plane (no ground truth, so coincident centers are allowed).

    :param scene: PlanarScene
    :param poses: (AbsolutePose, AbsolutePose); the plane lives in the frame of the first
    :param K: CameraIntrinsics shared by both views (sets the image size)
    :return: (image1, image2), uint8 arrays (H, W, 3)
    :raises PlaneBehindCameraError: when a pixel of either view misses the plane
    """
    pose1, pose2 = poses
    pixels = _pixel_grid(K)

    X1, s, hit = _intersect(scene, pixels @ K.matrix_inv.T)
    if not np.all(hit & (s > 0)):
        raise PlaneBehindCameraError("the plane does not fill the first view")
    img1 = _to_image(scene.sample(X1), K)

    if np.array_equal(pose1.rotation, pose2.rotation) and np.array_equal(pose1.translation, pose2.translation):
        return img1, img1.copy()

    R, t = _relative_motion(pose1, pose2)
    Hn = R - np.outer(t, scene.normal) / scene.distance
    rays = np.linalg.solve(Hn, (pixels @ K.matrix_inv.T).T).T
    X2, _, hit = _intersect(scene, rays)
    depth = np.where(hit, (X2 @ R.T + t)[:, 2], -1.0)
    if not np.all(hit & (depth > 0)):
        raise PlaneBehindCameraError("the plane does not fill the second view")
    return img1, _to_image(scene.sample(X2), K)


def render_pair(scene, poses, K):
    """
    render_images() plus the ground truth relative pose of the pair.

    :return: (image1, image2, RelativePose)
    """
    img1, img2 = render_images(scene, poses, K)
    return img1, img2, relative_pose(*poses)


def _finish_matches(x1, x2, K, noise_px, outlier_ratio, rng):
    count = x1.shape[0]
    if noise_px > 0:
        x1 = x1 + rng.normal(scale=noise_px, size=x1.shape)
        x2 = x2 + rng.normal(scale=noise_px, size=x2.shape)
    mask = np.ones(count, dtype=bool)
    n_out = int(math.floor(outlier_ratio * count + 0.5))
    if n_out:
        idx = rng.choice(count, size=n_out, replace=False)
        x2 = x2.copy()
        x2[idx, 0] = rng.uniform(0, K.width - 1, size=n_out)
        x2[idx, 1] = rng.uniform(0, K.height - 1, size=n_out)
        mask[idx] = False
    return CorrespondenceSet(np.hstack([x1, x2]), K, K, mask)


def _check_counts(count, outlier_ratio):
    if count < 8:
        raise SynthDataError(f"need at least 8 correspondences, got {count}")
    if not 0 <= outlier_ratio <= 1:
        raise SynthDataError(f"outlier ratio must be in [0, 1], got {outlier_ratio}")


def _visible_in_second(X1, R, t, K):
    proj = camera.project(K, AbsolutePose(R, t), X1)
    uv = proj.uv
    ok = proj.in_front & (uv[:, 0] >= 0) & (uv[:, 0] <= K.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= K.height - 1)
    return uv, ok


def _collect_points(draw, R, t, K, count, rng):
    first, second = [], []
    found = 0
    for _ in range(MAX_POINT_ROUNDS):
        X1, uv1 = draw(rng, 2 * count)
        uv2, ok = _visible_in_second(X1, R, t, K)
        first.append(uv1[ok])
        second.append(uv2[ok])
        found += int(ok.sum())
        if found >= count:
            return np.concatenate(first)[:count], np.concatenate(second)[:count]
    raise SamplingExhaustedError(f"only {found} of {count} points visible in both views")


def make_correspondences(scene, poses, K, count, noise_px=0.0, outlier_ratio=0.0, seed=0):
    """
    Matches of random plane points seen in both views.

    :return: CorrespondenceSet with the ground-truth inlier mask
    :raises PlaneBehindCameraError: when the plane is not in front of the first camera
    """
    _check_counts(count, outlier_ratio)
    R, t = _relative_motion(*poses)
    rng = util.make_rng(seed, "plane-matches")

    def draw(rng, n):
        uv1 = np.column_stack([rng.uniform(0, K.width - 1, n), rng.uniform(0, K.height - 1, n)])
        X1, s, hit = _intersect(scene, np.hstack([uv1, np.ones((n, 1))]) @ K.matrix_inv.T)
        if not np.all(hit & (s > 0)):
            raise PlaneBehindCameraError("the plane is not in front of the first camera")
        return X1, uv1

    x1, x2 = _collect_points(draw, R, t, K, count, rng)
    return _finish_matches(x1, x2, K, noise_px, outlier_ratio, rng)


def make_box_correspondences(
    poses, K, count, noise_px=0.0, outlier_ratio=0.0, seed=0, center_depth=4.0, half_extent=1.5
):
    """
    Matches of random points in an axis-aligned box in front of the first camera
    (box center at depth center_depth on its optical axis). Non-planar, so the
    linear 8-point solver is well posed.
    """
    _check_counts(count, outlier_ratio)
    if not center_depth - half_extent > 0:
        raise SynthDataError("the point box must lie in front of the first camera")
    R, t = _relative_motion(*poses)
    rng = util.make_rng(seed, "box-matches")
    center = np.array([0.0, 0.0, center_depth])
    origin = AbsolutePose.identity()

    def draw(rng, n):
        X1 = center + rng.uniform(-half_extent, half_extent, size=(n, 3))
        uv1, ok = _visible_in_second(X1, origin.rotation, origin.translation, K)
        return X1[ok], uv1[ok]

    x1, x2 = _collect_points(draw, R, t, K, count, rng)
    return _finish_matches(x1, x2, K, noise_px, outlier_ratio, rng)


class CropPolicy(NamedTuple):
    """
    :param resize_to: smaller image side after resizing
    :param crop: square crop size (0: no crop)
    :param random: seeded random crop when True, center crop otherwise
    """

    resize_to: int = 323
    crop: int = 227
    random: bool = False


def _bilinear_clamped(img, ys, xs):
    h, w = img.shape[:2]
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def resize_image(img, resize_to):
    """Aspect-preserving bilinear resize so that the smaller side equals resize_to."""
    h, w = img.shape[:2]
    if min(h, w) == resize_to:
        return img.copy()
    scale = resize_to / min(h, w)
    if h <= w:
        nh, nw = resize_to, int(round(w * scale))
    else:
        nh, nw = int(round(h * scale)), resize_to
    ys = np.clip((np.arange(nh) + 0.5) * h / nh - 0.5, 0.0, h - 1)
    xs = np.clip((np.arange(nw) + 0.5) * w / nw - 0.5, 0.0, w - 1)
    out = _bilinear_clamped(img.astype(np.float64), ys, xs)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def crop_image(img, policy, rng=None):
    """
    Square crop of policy.crop pixels: center crop (offsets floor((size - crop) / 2))
    or, with policy.random, offsets drawn from rng.

    :raises ImageTooSmallError: when the image is smaller than the crop
    """
    c = policy.crop
    if not c:
        return img
    h, w = img.shape[:2]
    if h < c or w < c:
        raise ImageTooSmallError(f"image {h}x{w} is smaller than the {c}x{c} crop")
    if policy.random:
        if rng is None:
            raise SynthDataError("a random crop needs a random generator")
        top = int(rng.integers(0, h - c + 1))
        left = int(rng.integers(0, w - c + 1))
    else:
        top = (h - c) // 2
        left = (w - c) // 2
    return img[top : top + c, left : left + c]


def resize_and_crop(img, policy, rng=None):
    return crop_image(resize_image(img, policy.resize_to), policy, rng)


def to_network_input(img):
    """uint8 (H, W, 3) image to a float64 (3, H, W) array centered on zero."""
    return (img.astype(np.float64) / 255.0 - 0.5).transpose(2, 0, 1)


def write_ppm(path, img):
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise SynthDataError(f"PPM images must be (H, W, 3), got {img.shape}")
    try:
        with open(path, "wb") as f:
            f.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
            f.write(img.tobytes())
    except OSError as e:
        raise IoFailureError(f"cannot write {path}: {e}") from e


def _ppm_tokens(data, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SynthDataError("truncated PPM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_ppm(path):
    """Reads a binary 8-bit PPM (P6) into a uint8 (H, W, 3) array."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoFailureError(f"cannot read {path}: {e}") from e
    (magic, w, h, maxval), offset = _ppm_tokens(data, 4)
    if magic != b"P6" or int(maxval) != 255:
        raise SynthDataError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(w), int(h)
    if len(data) < offset + w * h * 3:
        raise SynthDataError(f"{path}: pixel data truncated")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=offset)
    return pixels.reshape(h, w, 3).copy()


class PairRecord(NamedTuple):
    img1: str
    img2: str
    pose: RelativePose
    seed: int = 0
    intrinsics: Optional[CameraIntrinsics] = None
    scene: str = "all"


def _record_to_json(rec, base):
    q, t = rec.pose.dq, rec.pose.dt
    obj = {
        "img1": os.path.relpath(rec.img1, base),
        "img2": os.path.relpath(rec.img2, base),
        "qw": q.w,
        "qx": q.x,
        "qy": q.y,
        "qz": q.z,
        "tx": float(t[0]),
        "ty": float(t[1]),
        "tz": float(t[2]),
        "seed": int(rec.seed),
        "scene": rec.scene,
    }
    if rec.intrinsics is not None:
        obj["intrinsics"] = rec.intrinsics.to_dict()
    return json.dumps(obj, sort_keys=True)


def write_manifest(path, records):
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, "w", encoding="utf-8") as f:
            for rec in records:
                f.write(_record_to_json(rec, base) + "\n")
    except OSError as e:
        raise IoFailureError(f"cannot write manifest {path}: {e}") from e
    logger.debug(f"Wrote {len(records)} records to {path}")


def read_manifest(path):
    """
    Reads a manifest; image paths are resolved against the manifest directory and
    ground truths are renormalized to unit length.

    :return: list of PairRecord
    """
    base = os.path.dirname(os.path.abspath(path))
    records = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise IoFailureError(f"cannot read manifest {path}: {e}") from e
    for no, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            vector = [obj[k] for k in ("qw", "qx", "qy", "qz", "tx", "ty", "tz")]
            K = CameraIntrinsics.from_dict(obj["intrinsics"]) if "intrinsics" in obj else None
            records.append(
                PairRecord(
                    os.path.join(base, obj["img1"]),
                    os.path.join(base, obj["img2"]),
                    RelativePose.from_vector(vector),
                    int(obj.get("seed", 0)),
                    K,
                    str(obj.get("scene", "all")),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise SynthDataError(f"{path}:{no}: malformed record: {e}") from e
    logger.debug(f"Read {len(records)} records from {path}")
    return records


@dataclass
class DatasetConfig:
    width: int = 64
    height: int = 64
    focal: float = 64.0
    plane_distance: float = 4.0
    max_tilt_deg: float = 20.0
    max_rotation_deg: float = 30.0
    max_baseline_ratio: float = 0.3
    texture_size: int = 256
    texel: float = 0.03
    shading: float = DEFAULT_SHADING
    scene: str = "synthetic"

    @property
    def intrinsics(self):
        return CameraIntrinsics(
            self.focal, self.focal, (self.width - 1) / 2.0, (self.height - 1) / 2.0, self.width, self.height
        )


def _make_record(index, config, seed, image_dir):
    record_seed = int(util.make_rng(seed, "record", index).integers(0, 2**63 - 1))
    K = config.intrinsics
    scene = make_scene(
        record_seed, config.plane_distance, config.max_tilt_deg, config.texture_size, config.texel, config.shading
    )
    poses = sample_pair_pose(record_seed, config.max_rotation_deg, config.max_baseline_ratio, scene, K)
    img1, img2, gt = render_pair(scene, poses, K)
    paths = [os.path.join(image_dir, f"{index:06d}_{k}.ppm") for k in (1, 2)]
    write_ppm(paths[0], img1)
    write_ppm(paths[1], img2)
    record = PairRecord(paths[0], paths[1], gt, record_seed, K, config.scene)
    cameras = [SceneCamera(f"{index}a", K, poses[0]), SceneCamera(f"{index}b", K, poses[1])]
    return record, cameras


def build_dataset(n_pairs, split_ratio, config, seed, out_dir, threads=None):
    """
    Generates n_pairs rendered pairs under out_dir: images/, train.jsonl, val.jsonl
    and scene.json (both cameras of every pair). The first int(n_pairs * split_ratio)
    records form the training split, the rest the validation split.

    :return: (train records, val records)
    :raises IoFailureError: when the output cannot be written
    """
    if n_pairs < 2:
        raise SynthDataError(f"need at least 2 pairs, got {n_pairs}")
    n_train = int(n_pairs * split_ratio)
    if not 0 < n_train < n_pairs:
        raise SynthDataError(f"split ratio {split_ratio} leaves an empty split for {n_pairs} pairs")
    image_dir = os.path.join(out_dir, IMAGE_DIR)
    try:
        os.makedirs(image_dir, exist_ok=True)
    except OSError as e:
        raise IoFailureError(f"cannot create {image_dir}: {e}") from e

    def make(index):
        return _make_record(index, config, seed, image_dir)

    workers = util.get_threads(threads)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(make, range(n_pairs)))
    else:
        results = [make(i) for i in range(n_pairs)]

    records = [r for r, _ in results]
    train, val = records[:n_train], records[n_train:]
    write_manifest(os.path.join(out_dir, TRAIN_MANIFEST), train)
    write_manifest(os.path.join(out_dir, VAL_MANIFEST), val)
    try:
        camera.write_scene(os.path.join(out_dir, SCENE_FILE), [c for _, cams in results for c in cams])
    except OSError as e:
        raise IoFailureError(f"cannot write scene file: {e}") from e
    logger.info(f"Generated {n_pairs} pairs in {out_dir}: {len(train)} train, {len(val)} val")
    return train, val
