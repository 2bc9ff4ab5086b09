"""Pinhole camera and rigid-body math.

Conventions used throughout the package:

* ``Pose`` is camera-to-world: ``X_world = R @ X_cam + t``.  Projecting a world
  point therefore goes through ``pose.inverse()`` first.
* Pixel ``(u, v)`` is (column, row); integer values sit on pixel centres.
* Depth is the camera-frame z coordinate in millimetres.
* Euler angles for small camera perturbations are intrinsic Z-Y-X:
  ``R = Rz(roll) @ Ry(yaw) @ Rx(pitch)`` with z the optical axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

NEAR_PLANE = 1e-6  # mm
ORTHO_TOL = 1e-9


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
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError("image dimensions must be integers")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image dimensions must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))

    def scaled(self, sx: float, sy: float, scx: float, scy: float) -> "CameraIntrinsics":
        """Copy with fx, fy, cx, cy multiplied by the given factors."""
        return CameraIntrinsics(
            self.fx * sx, self.fy * sy, self.cx * scx, self.cy * scy, self.width, self.height
        )

    def pixel_rays(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Camera-frame ray directions with unit z for pixel arrays."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform, camera-to-world. Translation in millimetres."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _readonly(self.rotation)
        t = _readonly(self.translation).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation has det != +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(rotvec_to_matrix(np.asarray(rotvec, dtype=float)), translation)

    @classmethod
    def from_quaternion(cls, quat_xyzw, translation=(0.0, 0.0, 0.0)) -> "Pose":
        q = np.asarray(quat_xyzw, dtype=float)
        return cls(Rotation.from_quat(q / np.linalg.norm(q)).as_matrix(), translation)

    @classmethod
    def from_euler(cls, pitch: float, yaw: float, roll: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        """Intrinsic Z-Y-X: R = Rz(roll) Ry(yaw) Rx(pitch)."""
        R = Rotation.from_euler("ZYX", [roll, yaw, pitch]).as_matrix()
        return cls(R, translation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (..., 3) points by this pose."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def quaternion(self) -> np.ndarray:
        """Unit quaternion (x, y, z, w) with w >= 0."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def rotvec(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_rotvec()

    @property
    def is_identity_rotation(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3)))

    def __repr__(self) -> str:
        return f"Pose(rotvec={np.round(self.rotvec(), 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def rotvec_to_matrix(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula; exact identity for w == 0."""
    theta = float(np.linalg.norm(w))
    W = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if theta < 1e-8:
        # second-order series, then re-orthonormalise
        R = np.eye(3) + W + 0.5 * W @ W
        u, _, vt = np.linalg.svd(R)
        return u @ vt
    return np.eye(3) + np.sin(theta) / theta * W + (1.0 - np.cos(theta)) / theta**2 * (W @ W)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix in radians.

    Uses the trace for the cosine (clamped to [-1, 1]) and the skew part for
    the sine, so small angles keep full precision.
    """
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(s, c))


def world_to_camera(pose: Pose, points: np.ndarray) -> np.ndarray:
    return (np.asarray(points, dtype=float) - pose.translation) @ pose.rotation


def project_points(
    intrinsics: CameraIntrinsics, pose: Pose, points: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised projection of (N, 3) world points.

    Returns ``(pixels (N, 2), depth (N,))``. Pixels of points at or behind the
    near plane are NaN.
    """
    Xc = world_to_camera(pose, points)
    z = Xc[..., 2]
    front = z > NEAR_PLANE
    safe_z = np.where(front, z, 1.0)
    u = intrinsics.fx * Xc[..., 0] / safe_z + intrinsics.cx
    v = intrinsics.fy * Xc[..., 1] / safe_z + intrinsics.cy
    pix = np.stack([u, v], axis=-1)
    pix[~front] = np.nan
    return pix, z


def project(
    intrinsics: CameraIntrinsics, pose: Pose, point
) -> Optional[Tuple[np.ndarray, float]]:
    """Project a world point. ``None`` when depth <= NEAR_PLANE."""
    pix, z = project_points(intrinsics, pose, np.asarray(point, dtype=float).reshape(1, 3))
    if not z[0] > NEAR_PLANE:
        return None
    return pix[0], float(z[0])


def unproject_points(
    intrinsics: CameraIntrinsics, pose: Pose, pixels: np.ndarray, depth: np.ndarray
) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if np.any(~(depth > 0)):
        raise ValueError("depth must be positive")
    rays = intrinsics.pixel_rays(pixels[..., 0], pixels[..., 1])
    return pose.apply(rays * depth[..., None])


def unproject(intrinsics: CameraIntrinsics, pose: Pose, pixel, depth: float) -> np.ndarray:
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    return unproject_points(intrinsics, pose, np.asarray(pixel, dtype=float).reshape(1, 2), np.array([depth]))[0]


# --- camera-parameter perturbation -------------------------------------------------


@dataclass(frozen=True)
class PerturbationConfig:
    max_angle: float = 0.1  # rad, per Euler angle
    max_intrinsic_scale: float = 0.1  # fractional, per fx/fy/cx/cy

    def __post_init__(self):
        if self.max_angle < 0 or self.max_intrinsic_scale < 0:
            raise ValueError("perturbation ranges must be non-negative")


def perturbation_homography(
    intrinsics: CameraIntrinsics,
    perturbation: Pose,
    perturbed: CameraIntrinsics,
    unproject_with_perturbed_intrinsics: bool = False,
) -> np.ndarray:
    """3x3 map ``K_p T_p K^-1`` from source to perturbed homogeneous pixels.

    With ``unproject_with_perturbed_intrinsics`` the source pixel is lifted
    through ``K_p^-1`` instead of ``K^-1``.
    """
    if np.any(perturbation.translation != 0):
        raise ValueError("camera perturbation must be rotation-only")
    K_src_inv = perturbed.K_inv if unproject_with_perturbed_intrinsics else intrinsics.K_inv
    return perturbed.K @ perturbation.rotation @ K_src_inv


def perturb_pixel(
    intrinsics: CameraIntrinsics,
    perturbation: Pose,
    perturbed: CameraIntrinsics,
    pixel,
    depth: float,
    unproject_with_perturbed_intrinsics: bool = False,
) -> Optional[np.ndarray]:
    """Map a pixel with known depth through the perturbed camera.

    Returns ``None`` when the mapped point lands behind the perturbed camera.
    """
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    pixel = np.asarray(pixel, dtype=float)
    if perturbation.is_identity_rotation and perturbed == intrinsics and not np.any(perturbation.translation):
        return pixel.copy()
    H = perturbation_homography(intrinsics, perturbation, perturbed, unproject_with_perturbed_intrinsics)
    ph = H @ (depth * np.array([pixel[0], pixel[1], 1.0]))
    if not ph[2] > 0:
        return None
    return ph[:2] / ph[2]


def sample_perturbation(
    rng: np.random.Generator, intrinsics: CameraIntrinsics, config: PerturbationConfig = PerturbationConfig()
) -> Tuple[Pose, CameraIntrinsics]:
    """Draw a rotation-only ``T_p`` and scaled ``K_p``.

    Draw order is fixed (pitch, yaw, roll, then fx, fy, cx, cy scale factors)
    so a seed always reproduces the same sequence.
    """
    a = config.max_angle
    pitch, yaw, roll = rng.uniform(-a, a, size=3) if a > 0 else (0.0, 0.0, 0.0)
    s = config.max_intrinsic_scale
    scales = rng.uniform(1.0 - s, 1.0 + s, size=4) if s > 0 else np.ones(4)
    T_p = Pose.from_euler(pitch, yaw, roll) if a > 0 else Pose.identity()
    K_p = intrinsics.scaled(*scales) if s > 0 else intrinsics
    return T_p, K_p
