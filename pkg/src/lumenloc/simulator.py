"""Synthetic branching-lumen scenes.

The lumen is a binary tree of straight segments, each swept into a capsule
(cylinder with hemispherical caps); the airway is the union of the capsules.
A camera inside the union sees, along each pixel ray, the point where the ray
first leaves the union.  Images use a headlight Lambertian model with
inverse-square-like falloff and a procedural ring/mottle texture.

Scene-coordinate maps produced here play the role of a predictor's output;
:func:`corrupt_map` adds the predictor's errors.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import formats
from .augmentation import DepthMap
from .geometry import CameraIntrinsics, Pose
from .pose_solver import ScenePointMap
from .retrieval import PoseDescriptorModel, VirtualDatabase

DEFAULT_INTRINSICS = CameraIntrinsics(200.0, 200.0, 160.0, 120.0, 320, 240)
DEFAULT_STRIDE = 8
TINT = np.array([1.0, 0.62, 0.55])


# --- lumen geometry ----------------------------------------------------------------------


@dataclass(frozen=True)
class LumenConfig:
    generations: int = 3
    radius: float = 6.0  # mm, root segment
    taper: float = 0.8  # child radius / parent radius
    root_length: Tuple[float, float] = (70.0, 90.0)  # mm
    segment_length: Tuple[float, float] = (45.0, 60.0)  # mm
    branch_angle: Tuple[float, float] = (20.0, 35.0)  # degrees from the parent axis
    ring_frequency: float = 0.25  # cycles per mm along the airway
    ring_amplitude: float = 0.3
    mottle_amplitude: float = 0.3
    mottle_frequency: float = 0.8  # rad per mm

    def __post_init__(self):
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if not self.radius > 0 or not self.taper > 0:
            raise ValueError("radius and taper must be positive")
        for name in ("root_length", "segment_length"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi")
        lo, hi = self.branch_angle
        if not 0 <= lo <= hi < 90:
            raise ValueError("branch_angle must satisfy 0 <= lo <= hi < 90")


@dataclass(frozen=True, eq=False)
class LumenModel:
    """Centerline tree plus per-segment radius and texture parameters.

    Node 0 is the root start; every other node ``c`` ends the segment
    ``nodes[parent[c]] -> nodes[c]`` whose radius is ``radius[c]``.
    """

    nodes: np.ndarray  # (N, 3) mm
    parent: np.ndarray  # (N,), -1 for node 0
    radius: np.ndarray  # (N,) mm
    config: LumenConfig = LumenConfig()
    texture_seed: int = 0

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        parent = np.asarray(self.parent, dtype=np.int64)
        radius = np.asarray(self.radius, dtype=float)
        if parent[0] != -1 or np.any(parent[1:] < 0) or np.any(parent[1:] >= np.arange(1, len(parent))):
            raise ValueError("parents must precede children and node 0 must be the root")
        if np.any(radius <= 0):
            raise ValueError("radii must be positive")
        seg = nodes[1:] - nodes[parent[1:]]
        if np.any(np.linalg.norm(seg, axis=1) <= 0):
            raise ValueError("segment lengths must be positive")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "radius", radius)
        # cumulative centerline distance of each node from the root start
        dist = np.zeros(len(nodes))
        for c in range(1, len(nodes)):
            dist[c] = dist[parent[c]] + np.linalg.norm(nodes[c] - nodes[parent[c]])
        object.__setattr__(self, "_node_dist", dist)
        trng = np.random.default_rng(self.texture_seed)
        dirs = trng.normal(size=(6, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        object.__setattr__(self, "_mottle_dirs", dirs * self.config.mottle_frequency)
        object.__setattr__(self, "_mottle_phase", trng.uniform(0, 2 * np.pi, size=6))

    @property
    def n_segments(self) -> int:
        return len(self.nodes) - 1

    def children(self, node: int) -> List[int]:
        return [int(c) for c in np.nonzero(self.parent == node)[0]]

    def capsules(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Segment starts (S, 3), ends (S, 3), radii (S,)."""
        return self.nodes[self.parent[1:]], self.nodes[1:], self.radius[1:]

    def route_nodes(self, path: Sequence[int]) -> List[int]:
        """Node ids from the root start to a leaf following ``path`` branch choices."""
        route = [0, 1]
        for i, choice in enumerate(path):
            kids = self.children(route[-1])
            if not kids:
                raise ValueError(f"branch choice {i} goes past a leaf")
            if not 0 <= int(choice) < len(kids):
                raise ValueError(f"branch choice {choice} at step {i} not in [0, {len(kids)})")
            route.append(kids[int(choice)])
        if self.children(route[-1]):
            raise ValueError("path must end at a leaf")
        return route

    def distance_to_centerline(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Distance of each point to its closest segment and that segment's radius."""
        P = np.atleast_2d(np.asarray(points, dtype=float))
        A, B, r = self.capsules()
        best = np.full(len(P), np.inf)
        best_r = np.zeros(len(P))
        for a, b, rad in zip(A, B, r):
            ab = b - a
            s = np.clip((P - a) @ ab / (ab @ ab), 0.0, 1.0)
            d = np.linalg.norm(P - (a + s[:, None] * ab), axis=1)
            upd = d < best
            best[upd] = d[upd]
            best_r[upd] = rad
        return best, best_r

    def contains(self, points: np.ndarray) -> np.ndarray:
        """True where a point lies strictly inside at least one capsule."""
        P = np.atleast_2d(np.asarray(points, dtype=float))
        A, B, r = self.capsules()
        inside = np.zeros(len(P), dtype=bool)
        for a, b, rad in zip(A, B, r):
            ab = b - a
            s = np.clip((P - a) @ ab / (ab @ ab), 0.0, 1.0)
            inside |= np.linalg.norm(P - (a + s[:, None] * ab), axis=1) < rad
        return inside

    def albedo(self, points: np.ndarray, segment: np.ndarray) -> np.ndarray:
        """Ring pattern along the airway times a smooth 3-D mottle."""
        A, B, _ = self.capsules()
        ab = B[segment] - A[segment]
        L = np.linalg.norm(ab, axis=1)
        s = np.clip(np.sum((points - A[segment]) * ab, axis=1) / L, 0.0, L)
        s_global = self._node_dist[self.parent[segment + 1]] + s
        cfg = self.config
        ring = 0.5 + 0.5 * np.cos(2 * np.pi * cfg.ring_frequency * s_global)
        mottle = np.mean(np.sin(points @ self._mottle_dirs.T + self._mottle_phase), axis=1)
        return 0.9 * (1.0 - cfg.ring_amplitude * ring) * (1.0 + cfg.mottle_amplitude * mottle)


def _perpendicular(d: np.ndarray) -> np.ndarray:
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    p = np.cross(d, helper)
    return p / np.linalg.norm(p)


def _rotate(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    return v * math.cos(angle) + np.cross(axis, v) * math.sin(angle) + axis * (axis @ v) * (1 - math.cos(angle))


def generate_lumen(rng: np.random.Generator, config: LumenConfig = LumenConfig()) -> LumenModel:
    """Random binary airway tree with ``2**generations - 1`` segments, centred on the origin."""
    nodes = [np.zeros(3), np.array([0.0, 0.0, rng.uniform(*config.root_length)])]
    parent = [-1, 0]
    radius = [config.radius, config.radius]
    frontier = [(1, np.array([0.0, 0.0, 1.0]), config.radius)]
    for _ in range(config.generations - 1):
        nxt = []
        for node, direction, rad in frontier:
            azimuth = rng.uniform(0.0, 2 * np.pi)
            base = _rotate(_perpendicular(direction), direction, azimuth)
            for side in (0, 1):
                angle = math.radians(rng.uniform(*config.branch_angle))
                bend_axis = np.cross(direction, base) * (1 if side == 0 else -1)
                child_dir = _rotate(direction, bend_axis, angle)
                child_dir /= np.linalg.norm(child_dir)
                length = rng.uniform(*config.segment_length)
                nodes.append(nodes[node] + length * child_dir)
                parent.append(node)
                radius.append(rad * config.taper)
                nxt.append((len(nodes) - 1, child_dir, rad * config.taper))
        frontier = nxt
    nodes = np.array(nodes)
    # centre the bounding box on the origin to keep coordinates small
    nodes -= 0.5 * (nodes.min(axis=0) + nodes.max(axis=0))
    return LumenModel(nodes, np.array(parent), np.array(radius), config, int(rng.integers(0, 2**31)))


def straight_tube(length: float, radius: float, config: LumenConfig = LumenConfig()) -> LumenModel:
    """Single capsule along +z from ``-length/2`` to ``length/2``."""
    nodes = np.array([[0.0, 0.0, -length / 2], [0.0, 0.0, length / 2]])
    return LumenModel(nodes, np.array([-1, 0]), np.array([radius, radius]), replace(config, generations=1))


# --- trajectories -------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryConfig:
    frames_per_mm: float = 4.0
    smoothing: float = 5.0  # mm, Gaussian sigma applied to the centerline
    max_offset: float = 1.0  # mm, lateral offset bound
    offset_wavelength: float = 40.0  # mm
    roll_amplitude: float = 0.04  # rad
    roll_wavelength: float = 60.0  # mm
    start_margin: float = 2.0  # mm past the root start
    end_margin: float = 2.0  # mm beyond the leaf radius before the leaf end

    def __post_init__(self):
        if not self.frames_per_mm > 0:
            raise ValueError("frames_per_mm must be positive")
        if self.max_offset < 0 or self.roll_amplitude < 0 or self.smoothing < 0:
            raise ValueError("offset, roll and smoothing must be non-negative")


def _resample_polyline(points: np.ndarray, step: float) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    grid = np.arange(0.0, s[-1] + 1e-9, step)
    return np.stack([np.interp(grid, s, points[:, k]) for k in range(3)], axis=1)


def _arc_length(points: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])


def route_centerline(model: LumenModel, path: Sequence[int], smoothing: float = 5.0, step: float = 0.1) -> np.ndarray:
    """Densely sampled, Gaussian-smoothed centerline of a root-to-leaf route."""
    route = model.route_nodes(path)
    dense = _resample_polyline(model.nodes[route], step)
    if smoothing > 0 and len(dense) > 2:
        dense = gaussian_filter1d(dense, smoothing / step, axis=0, mode="nearest")
    return dense


def _parallel_transport(tangents: np.ndarray) -> np.ndarray:
    normals = np.empty_like(tangents)
    n = _perpendicular(tangents[0])
    for i, t in enumerate(tangents):
        n = n - (n @ t) * t
        n /= np.linalg.norm(n)
        normals[i] = n
    return normals


def generate_trajectory(
    model: LumenModel,
    path: Sequence[int] = (),
    frames_per_mm: Optional[float] = None,
    config: TrajectoryConfig = TrajectoryConfig(),
    rng: Optional[np.random.Generator] = None,
) -> List[Pose]:
    """Camera poses following a root-to-leaf route.

    The viewing axis (camera +z) follows the smoothed centerline tangent; the
    optical centre wanders laterally by at most ``max_offset`` and the camera
    rolls by at most ``roll_amplitude`` around its axis.  Phases of the
    wander and roll come from ``rng`` (zero when omitted).
    """
    if frames_per_mm is not None:
        config = replace(config, frames_per_mm=frames_per_mm)
    route = model.route_nodes(path)
    dense = route_centerline(model, path, config.smoothing)
    s_dense = _arc_length(dense)
    end = s_dense[-1] - (model.radius[route[-1]] + config.end_margin)
    start = config.start_margin
    if end <= start:
        raise ValueError("route too short for the requested margins")
    n = int(math.floor((end - start) * config.frames_per_mm + 1e-9)) + 1
    s = start + np.arange(n) / config.frames_per_mm
    centre = np.stack([np.interp(s, s_dense, dense[:, k]) for k in range(3)], axis=1)
    # tangents by central difference on the dense curve
    h = 0.5
    ahead = np.stack([np.interp(s + h, s_dense, dense[:, k]) for k in range(3)], axis=1)
    behind = np.stack([np.interp(s - h, s_dense, dense[:, k]) for k in range(3)], axis=1)
    tangents = ahead - behind
    tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)
    normals = _parallel_transport(tangents)
    binormals = np.cross(tangents, normals)

    phases = rng.uniform(0, 2 * np.pi, size=3) if rng is not None else np.zeros(3)
    amp = config.max_offset * (0.5 + 0.5 * np.sin(2 * np.pi * s / config.offset_wavelength + phases[0]))
    ang = 2 * np.pi * s / (1.7 * config.offset_wavelength) + phases[1]
    offset = amp[:, None] * (np.cos(ang)[:, None] * normals + np.sin(ang)[:, None] * binormals)
    roll = config.roll_amplitude * np.sin(2 * np.pi * s / config.roll_wavelength + phases[2])

    poses = []
    for i in range(n):
        c, sn = math.cos(roll[i]), math.sin(roll[i])
        x = c * normals[i] + sn * binormals[i]
        y = -sn * normals[i] + c * binormals[i]
        R = np.stack([x, y, tangents[i]], axis=1)
        U, _, Vt = np.linalg.svd(R)
        poses.append(Pose(U @ Vt, centre[i] + offset[i]))
    return poses


def centerline_poses(model: LumenModel, path: Sequence[int] = (), frames_per_mm: float = 2.0, smoothing: float = 5.0) -> List[Pose]:
    """Poses on the smoothed centerline without wander or roll (virtual views)."""
    cfg = TrajectoryConfig(frames_per_mm=frames_per_mm, smoothing=smoothing, max_offset=0.0, roll_amplitude=0.0)
    return generate_trajectory(model, path, config=cfg)


# --- ray casting ----------------------------------------------------------------------------


def _quadratic_interval(qa, qb, qc):
    """Roots of ``qa t^2 + qb t + qc <= 0`` for ``qa > 0`` as (lo, hi); empty -> (inf, -inf)."""
    disc = qb * qb - 4 * qa * qc
    ok = (disc >= 0) & (qa > 1e-300)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    # numerically stable pair of roots
    qq = -0.5 * (qb + np.copysign(sq, qb))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = qq / qa
        r2 = np.where(qq != 0, qc / qq, r1)
    lo = np.where(ok, np.minimum(r1, r2), np.inf)
    hi = np.where(ok, np.maximum(r1, r2), -np.inf)
    return lo, hi


def _capsule_interval(o, D, a, b, r):
    """Parameter interval of ``o + t D`` inside the capsule ``[a, b]`` of radius ``r``."""
    axis = b - a
    L = np.linalg.norm(axis)
    u = axis / L
    oa = o - a
    da = D @ u
    oaa = oa @ u
    Dp = D - da[:, None] * u
    op = oa - oaa * u
    qa = np.sum(Dp * Dp, axis=1)
    qb = 2.0 * (Dp @ op)
    qc = op @ op - r * r
    c_lo, c_hi = _quadratic_interval(qa, qb, np.full_like(qa, qc))
    par = qa <= 1e-300
    c_lo = np.where(par, np.where(qc <= 0, -np.inf, np.inf), c_lo)
    c_hi = np.where(par, np.where(qc <= 0, np.inf, -np.inf), c_hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        s1 = (0.0 - oaa) / da
        s2 = (L - oaa) / da
    flat = da == 0
    inside_slab = 0.0 <= oaa <= L
    s_lo = np.where(flat, -np.inf if inside_slab else np.inf, np.minimum(s1, s2))
    s_hi = np.where(flat, np.inf if inside_slab else -np.inf, np.maximum(s1, s2))
    lo = np.maximum(c_lo, s_lo)
    hi = np.minimum(c_hi, s_hi)
    dd = np.sum(D * D, axis=1)
    for centre in (a, b):
        oc = o - centre
        sp_lo, sp_hi = _quadratic_interval(dd, 2.0 * (D @ oc), np.full_like(dd, oc @ oc - r * r))
        empty = lo > hi
        lo = np.where(empty, sp_lo, np.where(sp_lo <= sp_hi, np.minimum(lo, sp_lo), lo))
        hi = np.where(empty, sp_hi, np.where(sp_lo <= sp_hi, np.maximum(hi, sp_hi), hi))
    return lo, hi


def cast_rays(model: LumenModel, origin: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Ray parameter where each ray first leaves the capsule union, and the exit segment.

    ``origin`` must be inside the union.  Rays are ``origin + t * direction``
    (directions need not be unit length).  Returns ``(t, segment)`` with
    ``t = inf`` / ``segment = -1`` for rays that never leave (impossible for
    a bounded union, kept for safety).
    """
    o = np.asarray(origin, dtype=float)
    D = np.asarray(directions, dtype=float).reshape(-1, 3)
    A, B, r = model.capsules()
    S = len(A)
    lo = np.empty((len(D), S))
    hi = np.empty((len(D), S))
    for j in range(S):
        lo[:, j], hi[:, j] = _capsule_interval(o, D, A[j], B[j], r[j])
    start = (lo <= 0.0) & (hi > 0.0)
    if not np.all(start.any(axis=1)):
        raise ValueError("camera is outside the lumen")
    masked = np.where(start, hi, -np.inf)
    seg = np.argmax(masked, axis=1)
    t = masked[np.arange(len(D)), seg]
    # extend through overlapping capsules until the union is left
    for _ in range(S):
        ext = (lo <= t[:, None]) & (hi > t[:, None])
        cand = np.where(ext, hi, -np.inf)
        j = np.argmax(cand, axis=1)
        best = cand[np.arange(len(D)), j]
        upd = best > t
        if not upd.any():
            break
        t = np.where(upd, best, t)
        seg = np.where(upd, j, seg)
    return t, seg


def shading(cos_theta, distance, falloff: float = 0.005):
    """Headlight Lambertian intensity ``cos(theta) / (1 + falloff * d^2)``."""
    return np.asarray(cos_theta) / (1.0 + falloff * np.asarray(distance) ** 2)


# --- rendering ----------------------------------------------------------------------------


@dataclass(frozen=True)
class RenderConfig:
    stride: int = DEFAULT_STRIDE
    falloff: float = 0.005  # mm^-2
    gain: float = 1.6

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass(frozen=True, eq=False)
class RenderedView:
    image: np.ndarray  # (H, W, 3)
    depth: DepthMap
    scene_map: ScenePointMap


def grid_origin(stride: int) -> Tuple[float, float]:
    return (float(stride // 2), float(stride // 2))


def _check_inside(model: LumenModel, pose: Pose):
    if not model.contains(pose.translation[None])[0]:
        raise ValueError(f"pose at {pose.translation.tolist()} is outside the lumen")


def _grid_cells(intrinsics: CameraIntrinsics, stride: int):
    o = stride // 2
    us = np.arange(o, intrinsics.width, stride)
    vs = np.arange(o, intrinsics.height, stride)
    return us, vs


def _hits(model: LumenModel, pose: Pose, intrinsics: CameraIntrinsics, u: np.ndarray, v: np.ndarray):
    rays_c = intrinsics.pixel_rays(u, v).reshape(-1, 3)  # unit z: ray parameter = depth
    rays_w = rays_c @ pose.rotation.T
    t, seg = cast_rays(model, pose.translation, rays_w)
    valid = np.isfinite(t) & (t > 0)
    Xc = rays_c * np.where(valid, t, 0.0)[:, None]
    Xw = Xc @ pose.rotation.T + pose.translation
    return t, seg, valid, rays_w, Xw


def render_scene_map(model: LumenModel, pose: Pose, intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS, stride: int = DEFAULT_STRIDE) -> ScenePointMap:
    """Clean scene-coordinate grid only (rays through the grid pixels)."""
    _check_inside(model, pose)
    us, vs = _grid_cells(intrinsics, stride)
    U, V = np.meshgrid(us, vs)
    _, _, valid, _, Xw = _hits(model, pose, intrinsics, U.astype(float), V.astype(float))
    rows, cols = V.shape
    return ScenePointMap(Xw.reshape(rows, cols, 3), valid.reshape(rows, cols), stride, grid_origin(stride))


def render_frame(model: LumenModel, pose: Pose, intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS, config: RenderConfig = RenderConfig()) -> RenderedView:
    """Shaded RGB image, z-depth map and clean scene-coordinate grid."""
    _check_inside(model, pose)
    W, H = intrinsics.width, intrinsics.height
    V, U = np.mgrid[0:H, 0:W].astype(float)
    t, seg, valid, rays_w, Xw = _hits(model, pose, intrinsics, U, V)
    A, B, _ = model.capsules()
    segc = np.where(valid, seg, 0)
    ab = B[segc] - A[segc]
    s = np.clip(np.sum((Xw - A[segc]) * ab, axis=1) / np.sum(ab * ab, axis=1), 0.0, 1.0)
    normal = Xw - (A[segc] + s[:, None] * ab)
    normal /= np.maximum(np.linalg.norm(normal, axis=1, keepdims=True), 1e-12)
    ray_len = np.linalg.norm(rays_w, axis=1)
    cos_theta = np.abs(np.sum(normal * rays_w, axis=1)) / ray_len
    dist = t * ray_len
    intensity = config.gain * shading(cos_theta, dist, config.falloff) * model.albedo(Xw, segc)
    intensity = np.where(valid, intensity, 0.0)
    image = np.clip(intensity[:, None] * TINT, 0.0, 1.0).reshape(H, W, 3)
    depth = DepthMap(np.where(valid, t, 0.0).reshape(H, W), valid.reshape(H, W))
    o = config.stride // 2
    grid = (slice(o, None, config.stride), slice(o, None, config.stride))
    scene_map = ScenePointMap(Xw.reshape(H, W, 3)[grid], valid.reshape(H, W)[grid], config.stride, grid_origin(config.stride))
    return RenderedView(image, depth, scene_map)


# --- predictor noise ----------------------------------------------------------------------


@dataclass(frozen=True)
class PredictorNoiseModel:
    sigma: float = 0.5  # mm
    outlier_fraction: float = 0.1
    outlier_box: Optional[Tuple[Tuple[float, float, float], Tuple[float, float, float]]] = None
    drift_schedule: Tuple[Tuple[int, float], ...] = ()  # (first frame, sigma multiplier) steps

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1]")
        starts = [s for s, _ in self.drift_schedule]
        if starts != sorted(starts) or any(m < 0 for _, m in self.drift_schedule):
            raise ValueError("drift schedule must be sorted with non-negative multipliers")
        object.__setattr__(self, "drift_schedule", tuple((int(s), float(m)) for s, m in self.drift_schedule))

    def sigma_at(self, frame_index: int) -> float:
        mult = 1.0
        for start, m in self.drift_schedule:
            if frame_index >= start:
                mult = m
        return self.sigma * mult


def corrupt_map(clean: ScenePointMap, noise: PredictorNoiseModel, rng: np.random.Generator, frame_index: int = 0) -> ScenePointMap:
    """Gaussian noise on every valid point, then a rounded ``outlier_fraction``
    of valid cells replaced by uniform draws from the outlier box.

    Without an explicit box the bounding box of the clean valid points is used.
    """
    pts = clean.points.copy()
    valid = clean.valid
    n = clean.n_valid
    sigma = noise.sigma_at(frame_index)
    if sigma > 0 and n:
        pts[valid] += rng.normal(scale=sigma, size=(n, 3))
    k = int(round(noise.outlier_fraction * n))
    if k:
        if noise.outlier_box is not None:
            lo, hi = (np.asarray(x, dtype=float) for x in noise.outlier_box)
        else:
            lo, hi = clean.points[valid].min(axis=0), clean.points[valid].max(axis=0)
        flat = np.flatnonzero(valid.ravel())
        chosen = rng.choice(flat, size=k, replace=False)
        grid = pts.reshape(-1, 3)
        grid[chosen] = rng.uniform(lo, hi, size=(k, 3))
    return clean.with_points(pts)


# --- datasets -----------------------------------------------------------------------------


@dataclass(frozen=True)
class SimulationConfig:
    seed: int = 0
    lumen: LumenConfig = LumenConfig()
    path: Optional[Tuple[int, ...]] = None  # None: always take branch 0
    trajectory: TrajectoryConfig = TrajectoryConfig()
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    render: RenderConfig = RenderConfig()
    noise: PredictorNoiseModel = PredictorNoiseModel()
    descriptor_dim: int = 256
    descriptor_noise: float = 0.05
    virtual_frames_per_mm: float = 2.0
    fps: float = 30.0
    images: bool = False
    max_frames: Optional[int] = None

    def route(self) -> Tuple[int, ...]:
        return tuple(self.path) if self.path is not None else (0,) * (self.lumen.generations - 1)


@dataclass(frozen=True, eq=False)
class SyntheticFrame:
    index: int
    timestamp: float
    pose: Pose
    clean_map: ScenePointMap
    noisy_map: ScenePointMap
    descriptor: np.ndarray
    image: Optional[np.ndarray] = None
    depth: Optional[DepthMap] = None


@dataclass(frozen=True, eq=False)
class Dataset:
    intrinsics: CameraIntrinsics
    frames: Tuple[SyntheticFrame, ...]
    virtual_db: VirtualDatabase

    def __len__(self) -> int:
        return len(self.frames)

    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    def poses(self) -> List[Pose]:
        return [f.pose for f in self.frames]


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a).astype(np.float32).astype(np.float64)


def _quantize_map(m: ScenePointMap) -> ScenePointMap:
    return ScenePointMap(_f32(m.points), m.valid, m.stride, tuple(float(np.float32(x)) for x in m.origin))


def frame_rng(seed: int, stream: int, frame_index: int) -> np.random.Generator:
    """Independent generator per (seed, purpose, frame)."""
    return np.random.default_rng([int(seed), int(stream), int(frame_index)])


def simulate_dataset(config: SimulationConfig = SimulationConfig()) -> Dataset:
    """Lumen, trajectory, per-frame maps and descriptors, and the virtual database.

    Binary payloads are rounded to float32 so that an export/import cycle
    reproduces the dataset exactly.
    """
    lumen = generate_lumen(frame_rng(config.seed, 0, 0), config.lumen)
    path = config.route()
    poses = generate_trajectory(lumen, path, config=config.trajectory, rng=frame_rng(config.seed, 1, 0))
    if config.max_frames is not None:
        if config.max_frames < 1:
            raise ValueError("max_frames must be >= 1")
        poses = poses[: config.max_frames]
    descriptor = PoseDescriptorModel(config.descriptor_dim, config.descriptor_noise, seed=config.seed)
    frames = []
    for i, pose in enumerate(poses):
        if config.images:
            view = render_frame(lumen, pose, config.intrinsics, config.render)
            clean = view.scene_map
            image = _f32(view.image)
            depth = DepthMap(_f32(view.depth.depth), view.depth.valid)
        else:
            clean = render_scene_map(lumen, pose, config.intrinsics, config.render.stride)
            image = depth = None
        noisy = corrupt_map(clean, config.noise, frame_rng(config.seed, 2, i), i)
        desc = _f32(descriptor(pose, frame_rng(config.seed, 3, i)))
        frames.append(
            SyntheticFrame(i, i / config.fps, pose, _quantize_map(clean), _quantize_map(noisy), desc, image, depth)
        )
    vposes = centerline_poses(lumen, path, config.virtual_frames_per_mm, config.trajectory.smoothing)
    vdesc = _f32(np.stack([descriptor(p, frame_rng(config.seed, 4, k)) for k, p in enumerate(vposes)]))
    vdb = VirtualDatabase(np.arange(len(vposes)), vdesc, vposes)
    return Dataset(config.intrinsics, tuple(frames), vdb)


def _frame_path(directory, index: int, ext: str) -> str:
    return os.path.join(directory, "frames", f"frame_{index:06d}.{ext}")


def export_dataset(dataset: Dataset, directory) -> None:
    """Write the dataset directory layout (see the README)."""
    formats.ensure_dir(os.path.join(directory, "frames"))
    formats.write_intrinsics(os.path.join(directory, "intrinsics.json"), dataset.intrinsics)
    formats.write_tum(
        os.path.join(directory, "gt_poses.txt"),
        dataset.timestamps(),
        [f.pose.translation for f in dataset.frames],
        [f.pose.quaternion() for f in dataset.frames],
    )
    for f in dataset.frames:
        formats.write_scm(_frame_path(directory, f.index, "scm"), f.noisy_map)
        formats.write_scm(_frame_path(directory, f.index, "clean.scm"), f.clean_map)
        if f.image is not None:
            formats.write_imgf(_frame_path(directory, f.index, "img"), f.image)
        if f.depth is not None:
            formats.write_dptf(_frame_path(directory, f.index, "dpt"), f.depth)
    if dataset.frames:
        formats.write_descriptors(os.path.join(directory, "descriptors.bin"), np.stack([f.descriptor for f in dataset.frames]))
    dataset.virtual_db.save(os.path.join(directory, "virtual_db"))


def import_dataset(directory) -> Dataset:
    intr = formats.read_intrinsics(os.path.join(directory, "intrinsics.json"))
    stamps, pos, quats = formats.read_tum(os.path.join(directory, "gt_poses.txt"))
    desc_path = os.path.join(directory, "descriptors.bin")
    desc = formats.read_descriptors(desc_path) if len(stamps) else np.zeros((0, 0), np.float32)
    if len(desc) != len(stamps):
        raise formats.FormatError(desc_path, f"{len(desc)} descriptors for {len(stamps)} frames", offset=4)
    frames = []
    for i in range(len(stamps)):
        img_path = _frame_path(directory, i, "img")
        dpt_path = _frame_path(directory, i, "dpt")
        frames.append(
            SyntheticFrame(
                i,
                float(stamps[i]),
                Pose.from_quaternion(quats[i], pos[i]),
                formats.read_scm(_frame_path(directory, i, "clean.scm")),
                formats.read_scm(_frame_path(directory, i, "scm")),
                desc[i].astype(np.float64),
                formats.read_imgf(img_path).astype(np.float64) if os.path.exists(img_path) else None,
                _depth64(formats.read_dptf(dpt_path)) if os.path.exists(dpt_path) else None,
            )
        )
    vdb = VirtualDatabase.load(os.path.join(directory, "virtual_db"))
    return Dataset(intr, tuple(frames), vdb)


def _depth64(d: DepthMap) -> DepthMap:
    return DepthMap(d.depth.astype(np.float64), d.valid)
