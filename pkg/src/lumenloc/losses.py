"""Training and evaluation losses as plain numerical functions.

Feature maps are (H, W, C) arrays; cosine quantities are computed on the
channel vector at each location.
"""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from .geometry import NEAR_PLANE, CameraIntrinsics, Pose
from .pose_solver import reprojection_jacobian

DEFAULT_MARGIN = 0.5
_MIN_NORM = 1e-12
KINK_TOL = 1e-9  # px


def _feature_map(f) -> np.ndarray:
    a = np.asarray(f, dtype=float)
    if a.ndim != 3:
        raise ValueError(f"feature map must be (H, W, C), got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("feature map contains non-finite values")
    if np.any(np.linalg.norm(a, axis=-1) <= _MIN_NORM):
        raise ValueError("feature vectors must have non-zero norm")
    return a


def cosine_similarity_map(a, b) -> np.ndarray:
    """Per-location cosine similarity, shape (H, W)."""
    a = _feature_map(a)
    b = _feature_map(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    num = np.sum(a * b, axis=-1)
    return np.clip(num / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)), -1.0, 1.0)


def cosine_distance(a, b) -> float:
    """Mean over locations of ``1 - cos``."""
    return float(np.mean(1.0 - cosine_similarity_map(a, b)))


def sim_loss(anchor, augmented: Sequence) -> float:
    """Mean of ``1 - cos(F_i, F_j)`` over the k augmented maps and all locations."""
    if len(augmented) == 0:
        raise ValueError("need at least one augmented feature map")
    total = 0.0
    for f in augmented:
        total += float(np.sum(1.0 - cosine_similarity_map(anchor, f)))
    H, W = np.shape(anchor)[:2]
    return total / (len(augmented) * H * W)


def triplet_loss(anchor, positive, negative, margin: float = DEFAULT_MARGIN) -> float:
    if margin < 0:
        raise ValueError("margin must be non-negative")
    return max(cosine_distance(anchor, positive) - cosine_distance(anchor, negative) + margin, 0.0)


def _pair(target, reconstruction) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(target, dtype=float)
    b = np.asarray(reconstruction, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def recon_loss(target, reconstruction) -> float:
    """Root-mean-square difference over every value."""
    a, b = _pair(target, reconstruction)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def recon_loss_l2(target, reconstruction) -> float:
    """Unnormalised Euclidean norm of the difference."""
    a, b = _pair(target, reconstruction)
    return float(np.linalg.norm((a - b).ravel()))


def proj_residuals(intrinsics: CameraIntrinsics, pose: Pose, pixels, points) -> np.ndarray:
    """Per-pair reprojection distance; pairs behind the camera get ``2 * diagonal``."""
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    Xc = (points - pose.translation) @ pose.rotation
    z = Xc[:, 2]
    front = z > NEAR_PLANE
    out = np.full(len(points), 2.0 * intrinsics.diagonal)
    if np.any(front):
        zf = z[front]
        u = intrinsics.fx * Xc[front, 0] / zf + intrinsics.cx
        v = intrinsics.fy * Xc[front, 1] / zf + intrinsics.cy
        out[front] = np.hypot(u - pixels[front, 0], v - pixels[front, 1])
    return out


def proj_loss(intrinsics: CameraIntrinsics, pose: Pose, pixels, points) -> Tuple[float, np.ndarray]:
    """Sum of per-pair reprojection distances, plus the per-pair vector."""
    r = proj_residuals(intrinsics, pose, pixels, points)
    return float(np.sum(r)), r


def proj_loss_gradient(intrinsics: CameraIntrinsics, pose: Pose, pixels, points) -> np.ndarray:
    """Gradient of ``proj_loss`` w.r.t. the 6-vector increment of
    :func:`lumenloc.pose_solver.apply_increment`, evaluated at zero.

    Pairs whose residual is at round-off level (the non-differentiable point
    of the norm, below ``KINK_TOL`` px) and capped behind-camera pairs
    contribute nothing.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    Xc = (points - pose.translation) @ pose.rotation
    front = Xc[:, 2] > NEAR_PLANE
    grad = np.zeros(6)
    if not np.any(front):
        return grad
    proj, _, J = reprojection_jacobian(intrinsics, pose, points[front])
    diff = proj - pixels[front]
    norm = np.linalg.norm(diff, axis=1)
    use = norm > KINK_TOL
    if np.any(use):
        unit = diff[use] / norm[use, None]
        grad = np.einsum("ni,nij->j", unit, J[use])
    return grad


def offline_objective(sim: float, triplet: float, proj_anchor: float, proj_augmented: Sequence[float]) -> float:
    aug = float(np.mean(proj_augmented)) if len(proj_augmented) else 0.0
    return float(sim) + float(triplet) + float(proj_anchor) + aug
