"""Absolute pose from a scene-coordinate map: P3P inside RANSAC, then LM.

Hypotheses are scored by inlier counting (a correspondence is an inlier when
its reprojection residual is *strictly* below the threshold), the best one is
kept and then polished by Levenberg-Marquardt over its inliers.
"""

from __future__ import annotations

import cmath
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from numba import njit

from .geometry import NEAR_PLANE, CameraIntrinsics, Pose, rotvec_to_matrix

MIN_SAMPLE = 4
MIN_INLIERS = 6
_BLOCK = 256  # points scored between early-termination checks


class LocalizationFailure(RuntimeError):
    """Raised when a frame cannot be localized (too few correspondences/inliers)."""

    def __init__(self, reason: str, inlier_count: int = 0):
        super().__init__(reason)
        self.reason = reason
        self.inlier_count = inlier_count


@dataclass(frozen=True, eq=False)
class ScenePointMap:
    """Regular grid of predicted world coordinates.

    Cell ``(r, c)`` corresponds to pixel ``origin + (c * stride, r * stride)``.
    """

    points: np.ndarray  # (rows, cols, 3) mm
    valid: np.ndarray  # (rows, cols) bool
    stride: int
    origin: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        valid = np.asarray(self.valid, dtype=bool)
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise ValueError(f"points must be (rows, cols, 3), got {pts.shape}")
        if valid.shape != pts.shape[:2]:
            raise ValueError("validity mask shape does not match the point grid")
        if int(self.stride) != self.stride or self.stride < 1:
            raise ValueError("stride must be a positive integer")
        if not np.all(np.isfinite(pts[valid])):
            raise ValueError("valid cells must hold finite points")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "stride", int(self.stride))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def rows(self) -> int:
        return self.points.shape[0]

    @property
    def cols(self) -> int:
        return self.points.shape[1]

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.valid))

    def pixel_grid(self) -> np.ndarray:
        """(rows, cols, 2) pixel coordinates of the grid cells."""
        v, u = np.mgrid[0 : self.rows, 0 : self.cols].astype(float)
        return np.stack([self.origin[0] + u * self.stride, self.origin[1] + v * self.stride], axis=-1)

    def correspondences(self) -> Tuple[np.ndarray, np.ndarray]:
        """Pixels (N, 2) and scene points (N, 3) of the valid cells, row-major."""
        return self.pixel_grid()[self.valid], self.points[self.valid]

    def inside(self, intrinsics: CameraIntrinsics) -> bool:
        u1 = self.origin[0] + (self.cols - 1) * self.stride
        v1 = self.origin[1] + (self.rows - 1) * self.stride
        return (
            self.origin[0] >= 0 and self.origin[1] >= 0 and u1 < intrinsics.width and v1 < intrinsics.height
        )

    def with_points(self, points: np.ndarray, valid: Optional[np.ndarray] = None) -> "ScenePointMap":
        return ScenePointMap(points, self.valid if valid is None else valid, self.stride, self.origin)


@dataclass(frozen=True)
class RansacConfig:
    inlier_threshold: float = 10.0  # px
    max_iterations: int = 1024
    confidence_stop: float = 0.999
    seed: int = 0
    refine: bool = True

    def __post_init__(self):
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0 < self.confidence_stop < 1:
            raise ValueError("confidence_stop must lie in (0, 1)")

    @property
    def min_sample(self) -> int:
        return MIN_SAMPLE


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    pose: Pose
    inlier_count: int
    inlier_mask: np.ndarray  # over valid cells, row-major
    mean_reprojection_error: float  # px, over inliers
    iterations_used: int
    ransac_pose: Pose
    ransac_inlier_count: int
    timings: dict = field(default_factory=dict)


# --- residuals and scoring ---------------------------------------------------------


def residuals(intrinsics: CameraIntrinsics, pose: Pose, pixels: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Per-correspondence reprojection distance in px (+inf behind the camera)."""
    Xc = (np.asarray(points, dtype=float) - pose.translation) @ pose.rotation
    z = Xc[:, 2]
    front = z > NEAR_PLANE
    zs = np.where(front, z, 1.0)
    du = intrinsics.fx * Xc[:, 0] / zs + intrinsics.cx - pixels[:, 0]
    dv = intrinsics.fy * Xc[:, 1] / zs + intrinsics.cy - pixels[:, 1]
    r = np.hypot(du, dv)
    r[~front] = np.inf
    return r


def residual(intrinsics: CameraIntrinsics, pose: Pose, pixel, point) -> float:
    return float(
        residuals(intrinsics, pose, np.asarray(pixel, float).reshape(1, 2), np.asarray(point, float).reshape(1, 3))[0]
    )


def score(intrinsics: CameraIntrinsics, pose: Pose, scene_map: ScenePointMap, inlier_threshold: float) -> int:
    """Number of valid cells with residual strictly below the threshold."""
    if not inlier_threshold > 0:
        raise ValueError("inlier_threshold must be positive")
    pix, pts = scene_map.correspondences()
    return int(np.count_nonzero(residuals(intrinsics, pose, pix, pts) < inlier_threshold))


# --- P3P ---------------------------------------------------------------------------


@njit(cache=True)
def _frame(p1, p2, p3, out):
    """Orthonormal frame of a triangle into ``out`` (columns = axes); False if degenerate."""
    e1 = p2 - p1
    n1 = np.sqrt(e1[0] ** 2 + e1[1] ** 2 + e1[2] ** 2)
    if not n1 > 0:
        return False
    e1 = e1 / n1
    d = p3 - p1
    e3 = np.array([e1[1] * d[2] - e1[2] * d[1], e1[2] * d[0] - e1[0] * d[2], e1[0] * d[1] - e1[1] * d[0]])
    n3 = np.sqrt(e3[0] ** 2 + e3[1] ** 2 + e3[2] ** 2)
    if not n3 > 0:
        return False
    e3 = e3 / n3
    e2 = np.array([e3[1] * e1[2] - e3[2] * e1[1], e3[2] * e1[0] - e3[0] * e1[2], e3[0] * e1[1] - e3[1] * e1[0]])
    for k in range(3):
        out[k, 0] = e1[k]
        out[k, 1] = e2[k]
        out[k, 2] = e3[k]
    return True


@njit(cache=True)
def _quartic_roots(a, b, c, d, e):
    """Four (complex) roots of ``a x^4 + b x^3 + c x^2 + d x + e`` by Ferrari's method."""
    alpha = -3.0 * b * b / (8.0 * a * a) + c / a
    beta = b**3 / (8.0 * a**3) - b * c / (2.0 * a * a) + d / a
    gamma = -3.0 * b**4 / (256.0 * a**4) + b * b * c / (16.0 * a**3) - b * d / (4.0 * a * a) + e / a
    shift = -b / (4.0 * a)
    out = np.empty(4, dtype=np.complex128)
    if abs(beta) < 1e-14 * (1.0 + abs(alpha) ** 1.5 + abs(gamma) ** 0.75):
        # biquadratic: y^2 + alpha y + gamma = 0 with y = (x - shift)^2
        disc = cmath.sqrt(alpha * alpha - 4.0 * gamma + 0j)
        y1 = (-alpha + disc) / 2.0
        y2 = (-alpha - disc) / 2.0
        out[0] = shift + cmath.sqrt(y1)
        out[1] = shift - cmath.sqrt(y1)
        out[2] = shift + cmath.sqrt(y2)
        out[3] = shift - cmath.sqrt(y2)
        return out
    P = -alpha * alpha / 12.0 - gamma
    Q = -alpha**3 / 108.0 + alpha * gamma / 3.0 - beta * beta / 8.0
    R = -Q / 2.0 + cmath.sqrt(Q * Q / 4.0 + P**3 / 27.0 + 0j)
    U = R ** (1.0 / 3.0)
    if U == 0:
        y = -5.0 * alpha / 6.0 - (Q + 0j) ** (1.0 / 3.0)
    else:
        y = -5.0 * alpha / 6.0 + U - P / (3.0 * U)
    w = cmath.sqrt(alpha + 2.0 * y)
    s1 = cmath.sqrt(-(3.0 * alpha + 2.0 * y + 2.0 * beta / w))
    s2 = cmath.sqrt(-(3.0 * alpha + 2.0 * y - 2.0 * beta / w))
    out[0] = shift + 0.5 * (w + s1)
    out[1] = shift + 0.5 * (w - s1)
    out[2] = shift + 0.5 * (-w + s2)
    out[3] = shift + 0.5 * (-w - s2)
    return out


@njit(cache=True)
def _p3p(f, W, polish, Rs, ts):
    """Grunert's P3P for unit bearings ``f`` (3, 3) and world points ``W`` (3, 3).

    Writes up to four world-to-camera solutions into ``Rs`` (4, 3, 3) and
    ``ts`` (4, 3) and returns how many were written.  ``polish`` adds Newton
    steps on the three camera distances (unneeded when the pose is refined
    afterwards).
    """
    P1, P2, P3 = W[0], W[1], W[2]
    a2 = np.sum((P2 - P3) ** 2)
    b2 = np.sum((P1 - P3) ** 2)
    c2 = np.sum((P1 - P2) ** 2)
    d21 = P2 - P1
    d31 = P3 - P1
    cr = np.array(
        [d21[1] * d31[2] - d21[2] * d31[1], d21[2] * d31[0] - d21[0] * d31[2], d21[0] * d31[1] - d21[1] * d31[0]]
    )
    area = np.sqrt(np.sum(cr**2))
    if not (a2 > 1e-18 and b2 > 1e-18 and c2 > 1e-18 and area > 1e-9):
        return 0
    ca = np.sum(f[1] * f[2])
    cb = np.sum(f[0] * f[2])
    cg = np.sum(f[0] * f[1])

    A = (a2 - c2) / b2
    B = (a2 + c2) / b2
    C = (b2 - c2) / b2
    D = (b2 - a2) / b2
    c_b = c2 / b2
    a_b = a2 / b2
    A4 = (A - 1) ** 2 - 4 * c_b * ca**2
    A3 = 4 * (A * (1 - A) * cb - (1 - B) * ca * cg + 2 * c_b * ca**2 * cb)
    A2 = 2 * (A**2 - 1 + 2 * A**2 * cb**2 + 2 * C * ca**2 - 4 * B * ca * cb * cg + 2 * D * cg**2)
    A1 = 4 * (-A * (1 + A) * cb + 2 * a_b * cg**2 * cb - (1 - B) * ca * cg)
    A0 = (1 + A) ** 2 - 4 * a_b * cg**2
    scale = max(abs(A4), abs(A3), abs(A2), abs(A1), abs(A0))
    if not abs(A4) > 1e-12 * scale:
        return 0
    roots = _quartic_roots(A4, A3, A2, A1, A0)

    Fw = np.empty((3, 3))
    if not _frame(P1, P2, P3, Fw):
        return 0
    Fc = np.empty((3, 3))
    count = 0
    for k in range(4):
        v = roots[k].real
        if abs(roots[k].imag) > 1e-4 * (1.0 + abs(v)):
            continue
        for _ in range(3):
            p = (((A4 * v + A3) * v + A2) * v + A1) * v + A0
            dp = ((4 * A4 * v + 3 * A3) * v + 2 * A2) * v + A1
            if dp != 0.0:
                v -= p / dp
        den = 2 * (cg - v * ca)
        if not abs(den) > 1e-14:
            continue
        u = ((-1 + A) * v**2 - 2 * A * cb * v + 1 + A) / den
        q = 1 + v**2 - 2 * v * cb
        if not (v > 0 and u > 0 and q > 1e-14):
            continue
        s1 = np.sqrt(b2 / q)
        x1, x2, x3 = s1, u * s1, v * s1
        if polish:
            for _ in range(3):
                F0 = x2**2 + x3**2 - 2 * x2 * x3 * ca - a2
                F1 = x1**2 + x3**2 - 2 * x1 * x3 * cb - b2
                F2 = x1**2 + x2**2 - 2 * x1 * x2 * cg - c2
                J = np.array(
                    [
                        [0.0, 2 * x2 - 2 * x3 * ca, 2 * x3 - 2 * x2 * ca],
                        [2 * x1 - 2 * x3 * cb, 0.0, 2 * x3 - 2 * x1 * cb],
                        [2 * x1 - 2 * x2 * cg, 2 * x2 - 2 * x1 * cg, 0.0],
                    ]
                )
                det = np.linalg.det(J)
                if not abs(det) > 1e-300:
                    break
                step = np.linalg.solve(J, np.array([F0, F1, F2]))
                x1 -= step[0]
                x2 -= step[1]
                x3 -= step[2]
        if not (x1 > 0 and x2 > 0 and x3 > 0):
            continue
        Y1 = x1 * f[0]
        Y2 = x2 * f[1]
        Y3 = x3 * f[2]
        if not _frame(Y1, Y2, Y3, Fc):
            continue
        R = Fc @ Fw.T
        t = Y1 - R @ P1
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            continue
        Rs[count] = R
        ts[count] = t
        count += 1
    return count


def _bearings(intrinsics: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    f = intrinsics.pixel_rays(pixels[..., 0], pixels[..., 1])
    return f / np.linalg.norm(f, axis=-1, keepdims=True)


def _world_to_camera_pose(R: np.ndarray, t: np.ndarray) -> Pose:
    """Camera-to-world Pose from a world-to-camera (R, t)."""
    return Pose(R.T, -R.T @ t)


def solve_p3p(pixels, points, intrinsics: CameraIntrinsics) -> List[Pose]:
    """Up to four camera-to-world poses consistent with three correspondences.

    Candidates that do not reproject all three inputs within 1e-6 px are
    dropped; collinear or degenerate input gives an empty list.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(3, 2)
    points = np.ascontiguousarray(points, dtype=float).reshape(3, 3)
    Rs = np.empty((4, 3, 3))
    ts = np.empty((4, 3))
    k = _p3p(_bearings(intrinsics, pixels), points, True, Rs, ts)
    poses = []
    for j in range(k):
        try:
            pose = _world_to_camera_pose(Rs[j], ts[j])
        except ValueError:
            continue
        if np.all(residuals(intrinsics, pose, pixels, points) < 1e-6):
            poses.append(pose)
    return poses


# --- RANSAC ------------------------------------------------------------------------


@njit(cache=True)
def _ransac_bound(best: int, n: int, log_fail: float) -> float:
    good = (best / n) ** MIN_SAMPLE
    if good >= 1.0:
        return 0.0
    if good <= 0.0:
        return np.inf
    return log_fail / np.log1p(-good)


@njit(cache=True)
def _count_inliers(K, R, t, pix_t, pts_t, thr2, best, exact):
    """Inliers of one world-to-camera hypothesis.

    ``pix_t`` (2, N) and ``pts_t`` (3, N) are coordinate-major.  With
    ``P = K [R | t]`` the test ``|pi(P X) - p| < thr`` is evaluated as
    ``(P_0 X - u z)^2 + (P_1 X - v z)^2 < thr^2 z^2`` with ``z = P_2 X > 0``.
    Unless ``exact``, counting stops once the hypothesis can no longer
    exceed ``best`` (the partial count is then returned).
    """
    P = K @ np.hstack((R, t.reshape(3, 1)))
    p00, p01, p02, p03 = P[0, 0], P[0, 1], P[0, 2], P[0, 3]
    p10, p11, p12, p13 = P[1, 0], P[1, 1], P[1, 2], P[1, 3]
    p20, p21, p22, p23 = P[2, 0], P[2, 1], P[2, 2], P[2, 3]
    n = pts_t.shape[1]
    c = 0
    for s in range(0, n, _BLOCK):
        e = min(s + _BLOCK, n)
        for i in range(s, e):
            X0 = pts_t[0, i]
            X1 = pts_t[1, i]
            X2 = pts_t[2, i]
            z = p20 * X0 + p21 * X1 + p22 * X2 + p23
            a = p00 * X0 + p01 * X1 + p02 * X2 + p03 - pix_t[0, i] * z
            b = p10 * X0 + p11 * X1 + p12 * X2 + p13 - pix_t[1, i] * z
            c += np.int64((a * a + b * b < thr2 * z * z) and (z > NEAR_PLANE))
        if not exact and c + (n - e) <= best:
            break
    return c


@njit(cache=True)
def _ransac_run(samples, bearings, pixels, points, pix_t, pts_t, K, thr2, best, iterations, max_iterations, log_fail, exact, out_R, out_t, out_score):
    """Consume samples in order: P3P on the first three, pick the candidate
    closest on the fourth, score, keep the strict argmax, and stop as soon as
    the confidence bound is met.  ``out_score[j] = -1`` marks samples without
    a hypothesis.  Returns ``(best, best_j, iterations)``.
    """
    n = points.shape[0]
    best_j = -1
    Rs = np.empty((4, 3, 3))
    ts = np.empty((4, 3))
    f = np.empty((3, 3))
    W = np.empty((3, 3))
    fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
    for j in range(samples.shape[0]):
        if iterations >= max_iterations:
            break
        iterations += 1
        out_score[j] = -1
        s = samples[j]
        distinct = s[0] != s[1] and s[0] != s[2] and s[0] != s[3] and s[1] != s[2] and s[1] != s[3] and s[2] != s[3]
        if distinct:
            for r in range(3):
                f[r] = bearings[s[r]]
                W[r] = points[s[r]]
            k = _p3p(f, W, False, Rs, ts)
            X4 = points[s[3]]
            pick = -1
            e_best = np.inf
            for c in range(k):
                Xc = Rs[c] @ X4 + ts[c]
                if Xc[2] > NEAR_PLANE:
                    du = fx * Xc[0] / Xc[2] + cx - pixels[s[3], 0]
                    dv = fy * Xc[1] / Xc[2] + cy - pixels[s[3], 1]
                    e = du * du + dv * dv
                    if e < e_best:
                        e_best = e
                        pick = c
            if pick >= 0:
                out_R[j] = Rs[pick]
                out_t[j] = ts[pick]
                sc = _count_inliers(K, Rs[pick], ts[pick], pix_t, pts_t, thr2, best, exact)
                out_score[j] = sc
                if sc > best:
                    best = sc
                    best_j = j
        if iterations >= _ransac_bound(best, n, log_fail):
            break
    return best, best_j, iterations


def _count_inliers_batch(intrinsics, R, t, pixels, points, thr2):
    """Exact inlier counts of (M, 3, 3)/(M, 3) world-to-camera hypotheses."""
    K = intrinsics.K
    pix_t = np.ascontiguousarray(np.asarray(pixels, dtype=float).T)
    pts_t = np.ascontiguousarray(np.asarray(points, dtype=float).T)
    return np.array([_count_inliers(K, Ri, ti, pix_t, pts_t, thr2, -1, True) for Ri, ti in zip(R, t)], dtype=np.int64)


def required_iterations(inlier_ratio: float, confidence: float, sample_size: int = MIN_SAMPLE) -> float:
    """Standard RANSAC bound log(1 - p) / log(1 - w^m)."""
    good = inlier_ratio**sample_size
    if good >= 1.0:
        return 0.0
    if good <= 0.0:
        return math.inf
    return math.log(1.0 - confidence) / math.log1p(-good)


_FIRST_BATCH = 16
_BATCH = 256


def estimate_pose(
    intrinsics: CameraIntrinsics,
    scene_map: ScenePointMap,
    config: RansacConfig = RansacConfig(),
    hypothesis_log: Optional[list] = None,
) -> PoseEstimate:
    """Robust absolute pose of one frame.

    Raises ``LocalizationFailure`` with fewer than 6 valid cells or when the
    best hypothesis supports fewer than 6 inliers.  ``hypothesis_log``, if
    given, receives ``(pose_wc_R, pose_wc_t, score)`` for every scored
    hypothesis (scores are then always complete counts).
    """
    t0 = time.perf_counter()
    pixels, points = scene_map.correspondences()
    pixels = np.ascontiguousarray(pixels)
    points = np.ascontiguousarray(points)
    n = len(points)
    if n < MIN_INLIERS:
        raise LocalizationFailure(f"only {n} valid correspondences", 0)

    rng = np.random.default_rng(config.seed)
    bearings = np.ascontiguousarray(_bearings(intrinsics, pixels))
    pix_t = np.ascontiguousarray(pixels.T)
    pts_t = np.ascontiguousarray(points.T)
    thr = config.inlier_threshold
    thr2 = thr * thr
    log_fail = math.log(1.0 - config.confidence_stop)
    exact = hypothesis_log is not None
    K = intrinsics.K

    best_score = -1
    best_R = best_t = None
    iterations = 0
    batch = _FIRST_BATCH
    while iterations < config.max_iterations:
        m = min(batch, config.max_iterations - iterations)
        batch = _BATCH
        samples = rng.integers(0, n, size=(m, MIN_SAMPLE))
        out_R = np.empty((m, 3, 3))
        out_t = np.empty((m, 3))
        out_s = np.full(m, -1, dtype=np.int64)
        before = iterations
        best_new, j, iterations = _ransac_run(
            samples, bearings, pixels, points, pix_t, pts_t, K, thr2, best_score, iterations,
            config.max_iterations, log_fail, exact, out_R, out_t, out_s,
        )
        if hypothesis_log is not None:
            for k in range(iterations - before):
                if out_s[k] >= 0:
                    hypothesis_log.append((out_R[k].T.copy(), -out_R[k].T @ out_t[k], int(out_s[k])))
        if j >= 0:
            best_score = int(best_new)
            best_R, best_t = out_R[j].copy(), out_t[j].copy()
        if iterations < before + m:
            break  # confidence bound met inside the batch

    if best_R is None or best_score < MIN_INLIERS:
        raise LocalizationFailure(f"best hypothesis has {max(best_score, 0)} inliers", max(best_score, 0))

    ransac_pose = _world_to_camera_pose(best_R, best_t)
    t1 = time.perf_counter()
    pose = ransac_pose
    r = residuals(intrinsics, pose, pixels, points)
    inliers = r < thr
    if config.refine and np.count_nonzero(inliers) >= MIN_INLIERS:
        pose, _ = refine_pose(intrinsics, ransac_pose, pixels[inliers], points[inliers])
        r = residuals(intrinsics, pose, pixels, points)
        inliers = r < thr
    t2 = time.perf_counter()
    count = int(np.count_nonzero(inliers))
    if count < MIN_INLIERS:
        raise LocalizationFailure(f"refined pose has {count} inliers", count)
    return PoseEstimate(
        pose=pose,
        inlier_count=count,
        inlier_mask=inliers,
        mean_reprojection_error=float(np.mean(r[inliers])),
        iterations_used=iterations,
        ransac_pose=ransac_pose,
        ransac_inlier_count=best_score,
        timings={"ransac": t1 - t0, "refine": t2 - t1},
    )


# --- Levenberg-Marquardt -----------------------------------------------------------


def reprojection_jacobian(
    intrinsics: CameraIntrinsics, pose: Pose, points: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Projected pixels (N, 2), depths (N,) and Jacobians (N, 2, 6).

    The Jacobian is with respect to a left increment of the world-to-camera
    transform, ``X_c <- exp(w) X_c + v`` with parameters ``(w, v)``.
    """
    Xc = (np.asarray(points, dtype=float) - pose.translation) @ pose.rotation
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    iz = 1.0 / z
    fx, fy = intrinsics.fx, intrinsics.fy
    proj = np.stack([fx * x * iz + intrinsics.cx, fy * y * iz + intrinsics.cy], axis=1)
    J = np.empty((len(Xc), 2, 6))
    # d pi / d Xc
    a, c = fx * iz, -fx * x * iz * iz
    b, d = fy * iz, -fy * y * iz * iz
    # dXc/dw = -[Xc]x ; rows of -[Xc]x: (0, z, -y), (-z, 0, x), (y, -x, 0)
    J[:, 0, 0] = c * y
    J[:, 0, 1] = a * z - c * x
    J[:, 0, 2] = -a * y
    J[:, 1, 0] = -b * z + d * y
    J[:, 1, 1] = -d * x
    J[:, 1, 2] = b * x
    J[:, 0, 3] = a
    J[:, 0, 4] = 0.0
    J[:, 0, 5] = c
    J[:, 1, 3] = 0.0
    J[:, 1, 4] = b
    J[:, 1, 5] = d
    return proj, z, J


def apply_increment(pose: Pose, delta: np.ndarray) -> Pose:
    """Pose after ``X_c <- exp(w) X_c + v`` on its world-to-camera transform."""
    dR = rotvec_to_matrix(delta[:3])
    R_cw = pose.rotation.T
    t_cw = -R_cw @ pose.translation
    R_new = dR @ R_cw
    # re-orthonormalise against drift over many updates
    U, _, Vt = np.linalg.svd(R_new)
    R_new = U @ Vt
    t_new = dR @ t_cw + delta[3:]
    return Pose(R_new.T, -R_new.T @ t_new)


FLOOR_RMS = 1e-10  # px; below this the cost is at round-off level
MAX_RETRIES = 10


def _rank_deficient(H: np.ndarray) -> bool:
    w = np.linalg.eigvalsh(H)
    return not w[-1] > 0 or w[0] <= 1e-12 * w[-1]


def _cost(intrinsics, pose, pixels, points):
    Xc = (points - pose.translation) @ pose.rotation
    if np.any(Xc[:, 2] <= NEAR_PLANE):
        return math.inf
    u = intrinsics.fx * Xc[:, 0] / Xc[:, 2] + intrinsics.cx - pixels[:, 0]
    v = intrinsics.fy * Xc[:, 1] / Xc[:, 2] + intrinsics.cy - pixels[:, 1]
    return float(np.sum(u * u + v * v))


def refine_pose(
    intrinsics: CameraIntrinsics,
    initial: Pose,
    pixels: np.ndarray,
    points: np.ndarray,
    max_iterations: int = 100,
    rel_tol: float = 1e-10,
    trace: Optional[list] = None,
) -> Tuple[Pose, float]:
    """Minimise the summed squared reprojection error over the pose.

    Returns the refined pose and the final mean residual (px).  Accepted
    steps never increase the cost.  If the first Jacobian is rank-deficient
    the initial pose is returned unchanged.  ``trace`` collects the cost after
    every accepted step.
    """
    pixels = np.asarray(pixels, dtype=float)
    points = np.asarray(points, dtype=float)
    if len(points) < MIN_INLIERS:
        raise ValueError(f"need at least {MIN_INLIERS} correspondences, got {len(points)}")
    pose = initial
    cost = _cost(intrinsics, pose, pixels, points)
    if not math.isfinite(cost):
        raise ValueError("initial pose puts correspondences behind the camera")
    if trace is not None:
        trace.append(cost)

    floor = FLOOR_RMS**2 * len(points)
    lam = 1e-3
    for it in range(max_iterations):
        if cost <= floor:
            break
        proj, _, J = reprojection_jacobian(intrinsics, pose, points)
        r = (proj - pixels).reshape(-1)
        Jf = J.reshape(-1, 6)
        H = Jf.T @ Jf
        g = Jf.T @ r
        if it == 0 and _rank_deficient(H):
            return initial, float(np.mean(np.sqrt(np.sum((proj - pixels) ** 2, axis=1))))
        accepted = False
        for _ in range(MAX_RETRIES):
            A = H + lam * np.diag(np.diag(H))
            try:
                delta = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            candidate = apply_increment(pose, delta)
            new_cost = _cost(intrinsics, candidate, pixels, points)
            if new_cost <= cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
        rel = (cost - new_cost) / cost
        pose, cost = candidate, new_cost
        lam = max(lam / 10.0, 1e-12)
        if trace is not None:
            trace.append(cost)
        if rel < rel_tol or np.linalg.norm(delta) < 1e-15:
            break

    res = np.sqrt(np.sum((_project_valid(intrinsics, pose, points) - pixels) ** 2, axis=1))
    return pose, float(np.mean(res))


def _project_valid(intrinsics, pose, points):
    Xc = (points - pose.translation) @ pose.rotation
    return np.stack(
        [intrinsics.fx * Xc[:, 0] / Xc[:, 2] + intrinsics.cx, intrinsics.fy * Xc[:, 1] / Xc[:, 2] + intrinsics.cy],
        axis=1,
    )
