"""
Classical two-view baseline: essential matrix from calibrated correspondences,
RANSAC, and relative pose recovery with the cheirality vote.

The minimal solver is the linear 8-point method in normalized (intrinsics-free)
coordinates, followed by projection onto the essential manifold (singular values
(s, s, 0) with Frobenius norm sqrt(2)). The epipolar constraint is x2^T E x1 = 0
with x_cam2 = R x_cam1 + t, so a noiseless E is proportional to [t]x R.

Match file (CSV, pixel coordinates):

    u1,v1,u2,v2
"""

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd

import util
from geom import AbsolutePose, RelativePose, quat_to_rotation, rotation_to_quat
from util import RelPoseError

logger = logging.getLogger(__name__)

SAMPLE_SIZE = 8
RANK_EPS = 1e-10
TRIANGULATION_EPS = 1e-12
SAMPSON_DEN_EPS = 1e-30
SPREAD_EPS = 1e-12

# local optimization of the RANSAC winner
REFINE_ROUNDS = 5
LM_STEPS = 50
LM_FD_STEP = 1e-7
LM_TOL = 1e-12

MATCH_COLUMNS = ["u1", "v1", "u2", "v2"]

_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


class EpipolarError(RelPoseError):
    module = "epipolar"


class DegenerateSampleError(EpipolarError):
    pass


class InsufficientMatchesError(EpipolarError):
    pass


class NoModelFoundError(EpipolarError):
    pass


class CheiralityAmbiguousError(EpipolarError):
    pass


class RaysParallelError(EpipolarError):
    pass


@dataclass
class CorrespondenceSet:
    """
    :param matches: (N, 4) pixel coordinates u1, v1, u2, v2
    :param K1: CameraIntrinsics of the first view
    :param K2: CameraIntrinsics of the second view
    :param inlier_mask: optional ground-truth inlier flags
    """

    matches: np.ndarray
    K1: object
    K2: object
    inlier_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.matches = np.asarray(self.matches, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(self.matches)):
            raise EpipolarError("correspondences must be finite")

    def __len__(self):
        return self.matches.shape[0]

    def subset(self, mask):
        gt = self.inlier_mask[mask] if self.inlier_mask is not None else None
        return CorrespondenceSet(self.matches[mask], self.K1, self.K2, gt)


@dataclass
class RansacConfig:
    threshold: float = 1e-3  # Sampson distance, normalized units (~1 px at f = 1000)
    confidence: float = 0.999
    max_iters: int = 10000
    seed: int = 0


class RansacResult(NamedTuple):
    E: np.ndarray
    inlier_mask: np.ndarray
    iterations: int


def normalize_points(c):
    """
    Normalized image coordinates x = (u - cx) / fx, y = (v - cy) / fy of both views.

    :return: (x1, x2), each (N, 2)
    """
    m = c.matches
    x1 = np.stack([(m[:, 0] - c.K1.cx) / c.K1.fx, (m[:, 1] - c.K1.cy) / c.K1.fy], axis=1)
    x2 = np.stack([(m[:, 2] - c.K2.cx) / c.K2.fx, (m[:, 3] - c.K2.cy) / c.K2.fy], axis=1)
    return x1, x2


def denormalize_points(K, x):
    x = np.asarray(x, dtype=np.float64)
    return np.stack([x[:, 0] * K.fx + K.cx, x[:, 1] * K.fy + K.cy], axis=1)


def skew(t):
    return np.array([[0.0, -t[2], t[1]], [t[2], 0.0, -t[0]], [-t[1], t[0], 0.0]])


def essential_from_pose(R, t):
    """[t]x R, scaled onto the essential manifold."""
    return project_to_essential(skew(np.asarray(t, dtype=np.float64)) @ R)


def project_to_essential(E):
    """
    Closest essential matrix up to scale: the singular values are replaced by (1, 1, 0).
    """
    U, S, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def _homogeneous(x):
    return np.hstack([x, np.ones((x.shape[0], 1))])


def _constraint_matrix(x1, x2):
    return np.column_stack(
        [
            x2[:, 0] * x1[:, 0],
            x2[:, 0] * x1[:, 1],
            x2[:, 0],
            x2[:, 1] * x1[:, 0],
            x2[:, 1] * x1[:, 1],
            x2[:, 1],
            x1[:, 0],
            x1[:, 1],
            np.ones(x1.shape[0]),
        ]
    )


def _conditioning(x):
    """Similarity moving the points to their centroid with mean distance sqrt(2)."""
    centroid = x.mean(axis=0)
    spread = float(np.mean(np.linalg.norm(x - centroid, axis=1)))
    if spread < SPREAD_EPS:
        raise DegenerateSampleError("matches collapse to a single point")
    s = math.sqrt(2.0) / spread
    T = np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])
    return (x - centroid) * s, T


def estimate_essential(x1, x2):
    """
    Least-squares 8-point estimate from >= 8 normalized matches, solved on
    conditioned coordinates (Hartley) and mapped back before the projection.

    :raises DegenerateSampleError: when the constraint matrix has rank < 8
    """
    if x1.shape[0] < SAMPLE_SIZE:
        raise InsufficientMatchesError(f"need at least {SAMPLE_SIZE} matches, got {x1.shape[0]}")
    c1, T1 = _conditioning(x1)
    c2, T2 = _conditioning(x2)
    A = _constraint_matrix(c1, c2)
    _, S, Vt = np.linalg.svd(A)
    if S[0] <= 0 or S[SAMPLE_SIZE - 1] < RANK_EPS * S[0]:
        raise DegenerateSampleError(f"constraint matrix rank below {SAMPLE_SIZE}")
    return project_to_essential(T2.T @ Vt[-1].reshape(3, 3) @ T1)


def estimate_essential_minimal(x1, x2):
    """Essential matrix from exactly 8 normalized matches."""
    if x1.shape[0] != SAMPLE_SIZE:
        raise EpipolarError(f"the minimal solver takes {SAMPLE_SIZE} matches, got {x1.shape[0]}")
    return estimate_essential(x1, x2)


def sampson_error(E, x1, x2):
    """
    First-order geometric error of normalized matches under E:
    (x2^T E x1)^2 / ((E x1)_1^2 + (E x1)_2^2 + (E^T x2)_1^2 + (E^T x2)_2^2).
    Returns +inf where the denominator vanishes. Accepts (2,) or (N, 2) inputs.
    """
    single = np.ndim(x1) == 1
    h1 = _homogeneous(np.atleast_2d(x1))
    h2 = _homogeneous(np.atleast_2d(x2))
    Ex1 = h1 @ E.T
    Etx2 = h2 @ E
    num = np.sum(h2 * Ex1, axis=1) ** 2
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.where(den < SAMPSON_DEN_EPS, np.inf, num / np.where(den < SAMPSON_DEN_EPS, 1.0, den))
    return float(err[0]) if single else err


def _sampson_residuals(E, x1, x2):
    # signed square roots of the Sampson errors; matches on a vanishing gradient count as zero
    h1, h2 = _homogeneous(x1), _homogeneous(x2)
    Ex1 = h1 @ E.T
    Etx2 = h2 @ E
    num = np.sum(h2 * Ex1, axis=1)
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    return np.where(den < SAMPSON_DEN_EPS, 0.0, num / np.sqrt(np.maximum(den, SAMPSON_DEN_EPS)))


def _proper_rotation(U):
    # the third singular vector is multiplied by zero in E, so its sign is free
    if np.linalg.det(U) < 0:
        U = U.copy()
        U[:, 2] = -U[:, 2]
    return U


def _local_rotation(w):
    return quat_to_rotation((1.0, 0.5 * w[0], 0.5 * w[1], 0.5 * w[2]))


def refine_essential(E, x1, x2, max_steps=LM_STEPS):
    """
    Levenberg-Marquardt on the essential manifold, E = U diag(1, 1, 0) V^T with
    U and V rotated by local increments, minimizing the summed Sampson error of
    the given matches. Steps are only taken when they lower the cost.

    :return: refined essential matrix
    """
    U, _, Vt = np.linalg.svd(E)
    U, V = _proper_rotation(U), _proper_rotation(Vt.T)
    D = np.diag([1.0, 1.0, 0.0])

    def compose(p):
        return U @ _local_rotation(p[:3]), V @ _local_rotation(p[3:])

    def residuals(p):
        Up, Vp = compose(p)
        return _sampson_residuals(Up @ D @ Vp.T, x1, x2)

    r = residuals(np.zeros(6))
    cost = float(r @ r)
    lam = 1e-3
    for _ in range(max_steps):
        J = np.empty((r.size, 6))
        for k in range(6):
            d = np.zeros(6)
            d[k] = LM_FD_STEP
            J[:, k] = (residuals(d) - residuals(-d)) / (2.0 * LM_FD_STEP)
        JtJ = J.T @ J
        g = J.T @ r
        # one gauge direction (a common roll of U and V) leaves E unchanged; damping keeps the system regular
        scale = np.maximum(np.diag(JtJ), LM_TOL * max(float(np.max(np.diag(JtJ))), LM_TOL))
        improved = False
        while lam < 1e12:
            try:
                step = np.linalg.solve(JtJ + lam * np.diag(scale), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            r_new = residuals(step)
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                U, V = compose(step)
                r, lam, improved = r_new, max(lam * 0.1, 1e-12), True
                converged = cost - cost_new <= LM_TOL * cost
                cost = cost_new
                break
            lam *= 10.0
        if not improved or converged:
            break
    return U @ D @ V.T


def inlier_mask(E, x1, x2, threshold):
    """Matches whose Sampson distance (square root of the error) is within threshold."""
    return sampson_error(E, x1, x2) <= threshold * threshold


def _adaptive_iterations(inlier_ratio, confidence, max_iters):
    good = inlier_ratio**SAMPLE_SIZE
    if good <= 0.0:
        return max_iters
    if good >= 1.0:
        return 1
    return min(max_iters, int(math.ceil(math.log(1.0 - confidence) / math.log(1.0 - good))))


def ransac_essential(c, cfg=None):
    """
    RANSAC over 8-point hypotheses scored by inlier count. The winner is then
    refined on its inliers (Sampson error, Levenberg-Marquardt) and rescored; a
    refit is only kept when it does not lose inliers.

    :param c: CorrespondenceSet
    :param cfg: RansacConfig
    :return: RansacResult(E, inlier mask, iterations run)
    :raises InsufficientMatchesError: fewer than 8 matches
    :raises NoModelFoundError: every drawn sample was degenerate
    """
    cfg = cfg or RansacConfig()
    n = len(c)
    if n < SAMPLE_SIZE:
        raise InsufficientMatchesError(f"need at least {SAMPLE_SIZE} matches, got {n}")
    x1, x2 = normalize_points(c)
    rng = util.make_rng(cfg.seed, "ransac")

    best_E, best_mask, best_count = None, None, -1
    bound = cfg.max_iters
    iterations = 0
    while iterations < min(bound, cfg.max_iters):
        sample = rng.choice(n, size=SAMPLE_SIZE, replace=False)
        iterations += 1
        try:
            E = estimate_essential_minimal(x1[sample], x2[sample])
        except DegenerateSampleError:
            continue
        mask = inlier_mask(E, x1, x2, cfg.threshold)
        count = int(mask.sum())
        # strict comparison: the earliest hypothesis wins ties
        if count > best_count:
            best_E, best_mask, best_count = E, mask, count
            bound = _adaptive_iterations(count / n, cfg.confidence, cfg.max_iters)

    if best_E is None:
        raise NoModelFoundError(f"all {iterations} samples were degenerate")

    best_E, best_mask = _local_optimization(best_E, best_mask, x1, x2, cfg.threshold)
    logger.debug(f"RANSAC: {int(best_mask.sum())}/{n} inliers after {iterations} iterations")
    return RansacResult(best_E, best_mask, iterations)


def _local_optimization(E, mask, x1, x2, threshold):
    """
    Refits the winner on its inliers and rescores, round after round, while the
    inlier count does not drop. Each round refines both the current model and a
    fresh 8-point fit of the inliers and keeps the better of the two.
    """
    count = int(mask.sum())
    for _ in range(REFINE_ROUNDS):
        if count < SAMPLE_SIZE:
            break
        starts = [E]
        try:
            starts.append(estimate_essential(x1[mask], x2[mask]))
        except DegenerateSampleError:
            logger.debug("Least-squares refit on the inlier set was degenerate")
        best = None
        for start in starts:
            candidate = refine_essential(start, x1[mask], x2[mask])
            candidate_mask = inlier_mask(candidate, x1, x2, threshold)
            if best is None or candidate_mask.sum() > best[1].sum():
                best = (candidate, candidate_mask)
        candidate, candidate_mask = best
        candidate_count = int(candidate_mask.sum())
        if candidate_count < count:
            logger.debug(f"Refit scored {candidate_count} < {count} inliers; keeping the previous model")
            break
        grew = candidate_count > count or not np.array_equal(candidate_mask, mask)
        E, mask, count = candidate, candidate_mask, candidate_count
        if not grew:
            break
    return E, mask


def _triangulate_many(pose1, pose2, x1, x2):
    P1 = np.hstack([pose1.rotation, pose1.translation.reshape(3, 1)])
    P2 = np.hstack([pose2.rotation, pose2.translation.reshape(3, 1)])
    A = np.stack(
        [
            x1[:, 0, None] * P1[2] - P1[0],
            x1[:, 1, None] * P1[2] - P1[1],
            x2[:, 0, None] * P2[2] - P2[0],
            x2[:, 1, None] * P2[2] - P2[1],
        ],
        axis=1,
    )
    _, S, Vt = np.linalg.svd(A)
    Xh = Vt[:, -1, :]
    w = Xh[:, 3]
    ok = (S[:, 2] > TRIANGULATION_EPS * S[:, 0]) & (np.abs(w) > TRIANGULATION_EPS * np.linalg.norm(Xh, axis=1))
    X = Xh[:, :3] / np.where(ok, w, 1.0)[:, None]
    d1 = pose1.transform(X)[:, 2]
    d2 = pose2.transform(X)[:, 2]
    return X, d1, d2, ok


def triangulate(pose1, pose2, x1, x2):
    """
    Linear (DLT) triangulation of one normalized match.

    :param pose1: AbsolutePose of the first camera
    :param pose2: AbsolutePose of the second camera
    :param x1: normalized coordinates (2,) in view 1
    :param x2: normalized coordinates (2,) in view 2
    :return: (X, depth in camera 1, depth in camera 2)
    :raises RaysParallelError: when the rays do not determine a finite point
    """
    X, d1, d2, ok = _triangulate_many(pose1, pose2, np.atleast_2d(x1), np.atleast_2d(x2))
    if not ok[0]:
        raise RaysParallelError(f"rays through {list(x1)} and {list(x2)} are parallel")
    return X[0], float(d1[0]), float(d2[0])


def pose_candidates(E):
    """The four (R, t) decompositions of an essential matrix."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    Ra = U @ _W @ Vt
    Rb = U @ _W.T @ Vt
    t = U[:, 2]
    return [(Ra, t), (Ra, -t), (Rb, t), (Rb, -t)]


def cheirality_counts(E, x1, x2):
    """Number of matches in front of both cameras, per candidate of pose_candidates()."""
    origin = AbsolutePose.identity()
    counts = []
    for R, t in pose_candidates(E):
        _, d1, d2, ok = _triangulate_many(origin, AbsolutePose(R, t), x1, x2)
        counts.append(int(np.sum(ok & (d1 > 0) & (d2 > 0))))
    return counts


def decompose_essential(E, x1, x2):
    """
    Relative pose from E, choosing the candidate that puts most matches in front
    of both cameras.

    :param E: essential matrix
    :param x1: normalized inlier coordinates (N, 2) in view 1
    :param x2: normalized inlier coordinates (N, 2) in view 2
    :return: RelativePose
    :raises CheiralityAmbiguousError: when the two best candidates tie
    """
    x1, x2 = np.atleast_2d(x1), np.atleast_2d(x2)
    if x1.shape[0] < 1:
        raise InsufficientMatchesError("pose recovery needs at least one inlier")
    counts = cheirality_counts(E, x1, x2)
    ranked = sorted(range(4), key=lambda k: -counts[k])
    if counts[ranked[0]] == counts[ranked[1]]:
        raise CheiralityAmbiguousError(f"cheirality vote is tied: {counts}")
    R, t = pose_candidates(E)[ranked[0]]
    return RelativePose(rotation_to_quat(R), t / np.linalg.norm(t))


def estimate_relative_pose(c, cfg=None):
    """
    RANSAC essential matrix + decomposition on the inliers.

    :return: (RelativePose, RansacResult)
    """
    result = ransac_essential(c, cfg)
    x1, x2 = normalize_points(c)
    pose = decompose_essential(result.E, x1[result.inlier_mask], x2[result.inlier_mask])
    return pose, result


def load_matches(path, K1, K2):
    """Reads a match CSV into a CorrespondenceSet."""
    df = pd.read_csv(path)
    missing = [col for col in MATCH_COLUMNS if col not in df.columns]
    if missing:
        raise EpipolarError(f"match file {path} lacks columns {missing}")
    return CorrespondenceSet(df[MATCH_COLUMNS].to_numpy(dtype=np.float64), K1, K2)


def write_matches(path, c):
    pd.DataFrame(c.matches, columns=MATCH_COLUMNS).to_csv(path, index=False, float_format="%.17g")
