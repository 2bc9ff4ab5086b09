"""Distortion/deformation augmentation: color jitter, noise mixup, and
camera-parameter perturbation warping driven by a depth map.

Images are float arrays of shape (H, W, C), C in {1, 3}, values in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, PerturbationConfig, Pose, perturbation_homography, sample_perturbation

LUMA = np.array([0.299, 0.587, 0.114])


def as_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"image must be (H, W, 1|3), got {img.shape}")
    if np.any(~np.isfinite(img)) or img.min(initial=0.0) < 0.0 or img.max(initial=0.0) > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return img


@dataclass(frozen=True, eq=False)
class DepthMap:
    depth: np.ndarray  # (H, W) camera-frame z, mm
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        d = np.asarray(self.depth)
        v = np.asarray(self.valid, dtype=bool)
        if d.shape != v.shape or d.ndim != 2:
            raise ValueError("depth and validity mask must be matching 2-D arrays")
        if not np.all(np.isfinite(d[v]) & (d[v] > 0)):
            raise ValueError("valid depths must be finite and positive")
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "valid", v)


@dataclass(frozen=True)
class JitterConfig:
    brightness: Tuple[float, float] = (0.8, 1.2)
    contrast: Tuple[float, float] = (0.8, 1.2)
    saturation: Tuple[float, float] = (0.8, 1.2)


@dataclass(frozen=True)
class DDAugConfig:
    jitter: bool = True
    mixup: bool = True
    warp: bool = True
    jitter_ranges: JitterConfig = JitterConfig()
    mixup_range: Tuple[float, float] = (0.7, 1.0)
    noise_octaves: int = 4
    perturbation: PerturbationConfig = PerturbationConfig()

    def __post_init__(self):
        lo, hi = self.mixup_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("mixup range must satisfy 0 <= lo <= hi <= 1")


def _uniform(rng: np.random.Generator, lo_hi: Tuple[float, float]) -> float:
    lo, hi = lo_hi
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def apply_jitter(image: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    """Brightness gain, contrast about the per-channel mean, saturation toward luma; clamped."""
    img = as_image(image)
    out = img * brightness
    mean = out.mean(axis=(0, 1), keepdims=True)
    out = (out - mean) * contrast + mean
    if out.shape[2] == 3:
        luma = out @ LUMA
        out = luma[..., None] + saturation * (out - luma[..., None])
    return np.clip(out, 0.0, 1.0)


def color_jitter(image, rng: np.random.Generator, config: JitterConfig = JitterConfig()):
    """Random jitter. Returns ``(image, (brightness, contrast, saturation))``."""
    b = _uniform(rng, config.brightness)
    c = _uniform(rng, config.contrast)
    s = _uniform(rng, config.saturation)
    img = as_image(image)
    if b == 1.0 and c == 1.0 and s == 1.0:
        return img.copy(), (b, c, s)
    return apply_jitter(img, b, c, s), (b, c, s)


def noise_mixup(image, noise, lam: float) -> np.ndarray:
    """``lam * image + (1 - lam) * noise``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"blend factor must lie in [0, 1], got {lam}")
    a = as_image(image)
    n = as_image(noise)
    if n.shape[:2] != a.shape[:2]:
        raise ValueError(f"noise shape {n.shape} does not match image shape {a.shape}")
    if n.shape[2] != a.shape[2]:
        if n.shape[2] == 1:
            n = np.repeat(n, a.shape[2], axis=2)
        else:
            raise ValueError("channel mismatch between image and noise")
    return np.clip(lam * a + (1.0 - lam) * n, 0.0, 1.0)


def fractal_noise(width: int, height: int, rng: np.random.Generator, octaves: int = 4, base_cell: int = 32) -> np.ndarray:
    """Multi-octave value noise in [0, 1], shape (height, width, 1).

    Octave ``o`` samples a uniform random lattice with spacing
    ``base_cell / 2**o`` px, bilinearly interpolated, weighted ``0.5**o``.
    The sum is divided by the total weight.
    """
    if octaves < 1:
        raise ValueError("octaves must be >= 1")
    total = np.zeros((height, width))
    weight = 0.0
    for o in range(octaves):
        cell = max(base_cell / 2**o, 1.0)
        gy = int(np.ceil((height - 1) / cell)) + 2
        gx = int(np.ceil((width - 1) / cell)) + 2
        lattice = rng.uniform(0.0, 1.0, size=(gy, gx))
        ys = np.arange(height) / cell
        xs = np.arange(width) / cell
        coords = np.meshgrid(ys, xs, indexing="ij")
        total += 0.5**o * ndimage.map_coordinates(lattice, coords, order=1, mode="nearest")
        weight += 0.5**o
    return np.clip(total / weight, 0.0, 1.0)[..., None]


# --- perturbation warp -------------------------------------------------------------------


def warp_with_depth(
    image,
    depth: DepthMap,
    intrinsics: CameraIntrinsics,
    perturbation: Pose,
    perturbed: CameraIntrinsics,
    hole_fill: int = 2,
    unproject_with_perturbed_intrinsics: bool = False,
) -> Tuple[np.ndarray, DepthMap, np.ndarray]:
    """Forward-splat every valid pixel through the perturbed camera.

    Each source pixel goes to its nearest target pixel; when several land on
    one target the smallest camera-frame depth wins.  Holes up to
    ``hole_fill`` px from a splatted pixel take the nearest splatted value.
    Returns ``(image, depth, mask)``; ``mask`` is False where nothing landed.
    """
    img = as_image(image)
    H, W, C = img.shape
    if depth.depth.shape != (H, W):
        raise ValueError("depth map does not match image size")
    if (W, H) != (perturbed.width, perturbed.height):
        raise ValueError("perturbed intrinsics must keep the image size")
    if (
        perturbation.is_identity_rotation
        and not np.any(perturbation.translation)
        and perturbed == intrinsics
    ):
        mask = depth.valid.copy()
        out = np.where(mask[..., None], img, 0.0)
        return out, DepthMap(np.where(mask, depth.depth, 0.0), mask), mask

    Hm = perturbation_homography(intrinsics, perturbation, perturbed, unproject_with_perturbed_intrinsics)
    vs, us = np.nonzero(depth.valid)
    z = depth.depth[vs, us].astype(float)
    src = np.stack([us * z, vs * z, z], axis=0)
    dst = Hm @ src
    zn = dst[2]
    front = zn > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        tu = np.rint(dst[0] / zn)
        tv = np.rint(dst[1] / zn)
    keep = front & (tu >= 0) & (tu < W) & (tv >= 0) & (tv < H)
    tu, tv, zn = tu[keep].astype(np.int64), tv[keep].astype(np.int64), zn[keep]
    colors = img[vs[keep], us[keep]]

    # z-buffer: for every target keep the closest source
    flat = tv * W + tu
    order = np.lexsort((zn, flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    win = order[first]

    out = np.zeros((H * W, C))
    zbuf = np.zeros(H * W)
    hit = np.zeros(H * W, dtype=bool)
    out[flat[win]] = colors[win]
    zbuf[flat[win]] = zn[win]
    hit[flat[win]] = True
    out = out.reshape(H, W, C)
    zbuf = zbuf.reshape(H, W)
    hit = hit.reshape(H, W)

    mask = hit.copy()
    if hole_fill > 0 and hit.any() and not hit.all():
        dist, (iy, ix) = ndimage.distance_transform_edt(~hit, return_indices=True)
        fill = (~hit) & (dist <= hole_fill)
        out[fill] = out[iy[fill], ix[fill]]
        zbuf[fill] = zbuf[iy[fill], ix[fill]]
        mask |= fill
    return np.clip(out, 0.0, 1.0), DepthMap(zbuf, mask), mask


def perturbation_warp(image, depth: DepthMap, intrinsics, perturbation: Pose, perturbed: CameraIntrinsics, **kw):
    """Warped image and its validity mask."""
    out, _, mask = warp_with_depth(image, depth, intrinsics, perturbation, perturbed, **kw)
    return out, mask


# --- full pipeline -------------------------------------------------------------------------


@dataclass
class Provenance:
    jitter: Optional[Tuple[float, float, float]] = None
    mixup_lambda: Optional[float] = None
    noise_seed: Optional[int] = None
    perturbation: Optional[Pose] = None
    perturbed_intrinsics: Optional[CameraIntrinsics] = None
    mask: Optional[np.ndarray] = field(default=None, repr=False)

    def is_empty(self) -> bool:
        return self.jitter is None and self.mixup_lambda is None and self.perturbation is None

    def as_dict(self) -> dict:
        d = {}
        if self.jitter is not None:
            d["brightness"], d["contrast"], d["saturation"] = self.jitter
        if self.mixup_lambda is not None:
            d["mixup_lambda"] = self.mixup_lambda
            d["noise_seed"] = self.noise_seed
        if self.perturbation is not None:
            d["perturbation_rotvec"] = self.perturbation.rotvec().tolist()
            k = self.perturbed_intrinsics
            d["perturbed_intrinsics"] = [k.fx, k.fy, k.cx, k.cy]
        return d


def ddaug(image, depth: DepthMap, intrinsics: CameraIntrinsics, rng: np.random.Generator, config: DDAugConfig = DDAugConfig()):
    """Jitter, then noise mixup, then perturbation warp (each optional).

    Returns ``(augmented image, Provenance)``.  The warp's validity mask is
    kept on the provenance record.
    """
    img = as_image(image)
    prov = Provenance()
    if config.jitter:
        img, prov.jitter = color_jitter(img, rng, config.jitter_ranges)
    if config.mixup:
        prov.noise_seed = int(rng.integers(0, 2**63 - 1))
        noise = fractal_noise(img.shape[1], img.shape[0], np.random.default_rng(prov.noise_seed), config.noise_octaves)
        prov.mixup_lambda = _uniform(rng, config.mixup_range)
        img = noise_mixup(img, noise, prov.mixup_lambda)
    if config.warp:
        T_p, K_p = sample_perturbation(rng, intrinsics, config.perturbation)
        img, prov.mask = perturbation_warp(img, depth, intrinsics, T_p, K_p)
        prov.perturbation, prov.perturbed_intrinsics = T_p, K_p
    return img, prov
