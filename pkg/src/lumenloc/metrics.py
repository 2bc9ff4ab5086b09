"""Trajectory evaluation: ATE (optionally after similarity alignment),
rotational RPE and confidence-filtered ATE."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from . import formats
from .geometry import Pose, rotation_angle

ALIGN_NONE = "none"
ALIGN_7DOF = "7dof"
TIMESTAMP_TOL = 1e-6  # s


@dataclass(frozen=True, eq=False)
class Trajectory:
    timestamps: np.ndarray  # (N,) s, strictly increasing
    positions: np.ndarray  # (N, 3) mm
    quaternions: np.ndarray  # (N, 4) xyzw, unit

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float).reshape(-1)
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        q = np.asarray(self.quaternions, dtype=float).reshape(-1, 4)
        if not len(ts) == len(pos) == len(q):
            raise ValueError("timestamps, positions and quaternions must have equal lengths")
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if len(q) and np.max(np.abs(np.linalg.norm(q, axis=1) - 1.0)) > 1e-9:
            raise ValueError("quaternions must be unit length")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "quaternions", q)

    def __len__(self) -> int:
        return len(self.timestamps)

    @classmethod
    def from_poses(cls, timestamps, poses: Sequence[Pose]) -> "Trajectory":
        pos = np.array([p.translation for p in poses]).reshape(-1, 3)
        quat = np.array([p.quaternion() for p in poses]).reshape(-1, 4)
        return cls(timestamps, pos, quat)

    @property
    def rotations(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros((0, 3, 3))
        return Rotation.from_quat(self.quaternions).as_matrix()

    def poses(self) -> List[Pose]:
        return [Pose.from_quaternion(q, p) for q, p in zip(self.quaternions, self.positions)]

    def subset(self, index) -> "Trajectory":
        index = np.asarray(index, dtype=np.int64)
        return Trajectory(self.timestamps[index], self.positions[index], self.quaternions[index])

    def save(self, path) -> None:
        formats.write_tum(path, self.timestamps, self.positions, self.quaternions)

    @classmethod
    def load(cls, path) -> "Trajectory":
        return cls(*formats.read_tum(path))


@dataclass(frozen=True)
class Similarity:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def apply_trajectory(self, traj: Trajectory) -> Trajectory:
        R = Rotation.from_matrix(self.rotation)
        q = (R * Rotation.from_quat(traj.quaternions)).as_quat() if len(traj) else traj.quaternions
        return Trajectory(traj.timestamps, self.apply(traj.positions), q)


def _positions(x) -> np.ndarray:
    return x.positions if isinstance(x, Trajectory) else np.asarray(x, dtype=float).reshape(-1, 3)


def umeyama_align(estimate, reference) -> Similarity:
    """Least-squares similarity with ``s R p_i + t ~ q_i`` (reflection-safe).

    Accepts trajectories or (N, 3) arrays paired by index.  Collinear or
    coincident estimates are rejected since the rotation is then undetermined.
    """
    P = _positions(estimate)
    Q = _positions(reference)
    if P.shape != Q.shape:
        raise ValueError(f"length mismatch {len(P)} vs {len(Q)}")
    if len(P) < 3:
        raise ValueError("need at least 3 paired positions")
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    Pc, Qc = P - mp, Q - mq
    sv = np.linalg.svd(Pc, compute_uv=False)
    if not sv[0] > 0 or sv[1] <= 1e-9 * sv[0]:
        raise ValueError("degenerate point spread (collinear or coincident)")
    n = len(P)
    cov = Qc.T @ Pc / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_p = np.sum(Pc * Pc) / n
    s = float(np.trace(np.diag(D) @ S) / var_p)
    t = mq - s * R @ mp
    return Similarity(s, R, t)


def _check_pair(estimate: Trajectory, reference: Trajectory):
    if len(estimate) != len(reference):
        raise ValueError(f"length mismatch: estimate {len(estimate)} vs reference {len(reference)}")
    if len(estimate) and np.max(np.abs(estimate.timestamps - reference.timestamps)) > TIMESTAMP_TOL:
        raise ValueError("timestamps do not match")


@dataclass(frozen=True, eq=False)
class AteResult:
    rmse: float
    mean: float
    std: float
    errors: np.ndarray
    alignment: Optional[Similarity] = None


def ate(estimate: Trajectory, reference: Trajectory, mode: str = ALIGN_NONE) -> AteResult:
    """Per-frame position error after optional similarity alignment."""
    _check_pair(estimate, reference)
    if len(estimate) == 0:
        raise ValueError("empty trajectories")
    P = estimate.positions
    sim = None
    if mode == ALIGN_7DOF:
        sim = umeyama_align(estimate, reference)
        P = sim.apply(P)
    elif mode != ALIGN_NONE:
        raise ValueError(f"unknown alignment mode {mode!r}")
    err = np.linalg.norm(P - reference.positions, axis=1)
    return AteResult(float(np.sqrt(np.mean(err**2))), float(np.mean(err)), float(np.std(err)), err, sim)


@dataclass(frozen=True, eq=False)
class RpeResult:
    mean: float  # degrees
    std: float
    errors: np.ndarray


def r_rpe(estimate: Trajectory, reference: Trajectory, delta: int = 1) -> RpeResult:
    """Angle of ``R_r^T R_e`` for relative rotations over ``delta`` frames, in degrees."""
    _check_pair(estimate, reference)
    if delta < 1:
        raise ValueError("delta must be >= 1")
    if len(estimate) <= delta:
        raise ValueError(f"need more than {delta} frames")
    Re, Rr = estimate.rotations, reference.rotations
    return _rpe_pairs(Re, Rr, np.arange(len(Re) - delta), np.arange(delta, len(Re)))


def _rpe_pairs(Re, Rr, i, j) -> RpeResult:
    errs = np.array(
        [math.degrees(rotation_angle((Rr[a].T @ Rr[b]).T @ (Re[a].T @ Re[b]))) for a, b in zip(i, j)]
    )
    if len(errs) == 0:
        return RpeResult(math.nan, math.nan, errs)
    return RpeResult(float(np.mean(errs)), float(np.std(errs)), errs)


def confidence_order(inlier_counts) -> np.ndarray:
    """Frame indices sorted by decreasing inlier count, ties by earlier frame."""
    c = np.asarray(inlier_counts)
    return np.argsort(-c, kind="stable")


def retained_count(n: int, keep_fraction: float) -> int:
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    return int(math.floor(keep_fraction * n + 1e-9))


def confidence_filtered_ate(estimate: Trajectory, reference: Trajectory, inlier_counts, keep_fraction: float) -> AteResult:
    """ATE (no alignment) over the ``floor(keep * N)`` most confident frames."""
    _check_pair(estimate, reference)
    counts = np.asarray(inlier_counts)
    if len(counts) != len(estimate):
        raise ValueError("one inlier count per frame is required")
    k = retained_count(len(estimate), keep_fraction)
    if k == 0:
        raise ValueError("no frames retained")
    if k == len(estimate):
        return ate(estimate, reference, ALIGN_NONE)
    keep = np.sort(confidence_order(counts)[:k])
    return ate(estimate.subset(keep), reference.subset(keep), ALIGN_NONE)


def associate(estimate: Trajectory, reference: Trajectory, tol: float = TIMESTAMP_TOL) -> Tuple[np.ndarray, np.ndarray]:
    """Index pairs of frames present in both trajectories (estimates may have gaps)."""
    ri = np.searchsorted(reference.timestamps, estimate.timestamps)
    e_idx, r_idx = [], []
    for k, (t, j) in enumerate(zip(estimate.timestamps, ri)):
        for cand in (j - 1, j):
            if 0 <= cand < len(reference) and abs(reference.timestamps[cand] - t) <= tol:
                e_idx.append(k)
                r_idx.append(cand)
                break
    return np.array(e_idx, dtype=np.int64), np.array(r_idx, dtype=np.int64)


def evaluation_report(
    estimate: Trajectory,
    reference: Trajectory,
    mode: str = ALIGN_NONE,
    delta: int = 1,
    keep_fraction: float = 1.0,
    inlier_counts: Optional[Dict[float, int]] = None,
) -> dict:
    """Structured report over the frames present in both trajectories.

    ``inlier_counts`` maps estimate timestamps to counts and is required when
    ``keep_fraction < 1``; filtering is only defined with ``mode`` none.  Relative errors use reference-index pairs that
    are exactly ``delta`` apart with both frames present.
    """
    e_idx, r_idx = associate(estimate, reference)
    if len(e_idx) == 0:
        raise ValueError("no matching frames between estimate and reference")
    est = estimate.subset(e_idx)
    ref = Trajectory(est.timestamps, reference.positions[r_idx], reference.quaternions[r_idx])
    if keep_fraction < 1.0:
        if inlier_counts is None:
            raise ValueError("filtering needs per-frame inlier counts")
        if mode != ALIGN_NONE:
            raise ValueError("confidence-filtered ATE is computed without alignment")
        counts = [inlier_counts[t] for t in estimate.timestamps[e_idx]]
        a = confidence_filtered_ate(est, ref, counts, keep_fraction)
        kept = retained_count(len(est), keep_fraction)
    else:
        a = ate(est, ref, mode)
        kept = len(est)
    pos = {int(r): k for k, r in enumerate(r_idx)}
    pairs = [(pos[r], pos[r + delta]) for r in r_idx if r + delta in pos]
    rpe = _rpe_pairs(est.rotations, ref.rotations, [p for p, _ in pairs], [q for _, q in pairs])
    return {
        "ate_rmse": a.rmse,
        "ate_mean": a.mean,
        "ate_std": a.std,
        "rrpe_mean": rpe.mean,
        "rrpe_std": rpe.std,
        "n_frames": kept,
        "n_gaps": int(len(reference) - len(e_idx)),
        "alignment_mode": mode,
        "filter_fraction": round(1.0 - keep_fraction, 12),
        "delta": delta,
    }


def aggregate_reports(reports: Sequence[dict]) -> dict:
    """Across-sequence summary: mean and std of the per-sequence means, and
    the frame-weighted pooled mean."""
    if not reports:
        raise ValueError("no reports to aggregate")
    ate_means = np.array([r["ate_mean"] for r in reports])
    rpe_means = np.array([r["rrpe_mean"] for r in reports])
    n = np.array([r["n_frames"] for r in reports], dtype=float)
    return {
        "n_sequences": len(reports),
        "ate_mean_of_means": float(np.mean(ate_means)),
        "ate_std_of_means": float(np.std(ate_means)),
        "ate_pooled_mean": float(np.sum(ate_means * n) / np.sum(n)),
        "rrpe_mean_of_means": float(np.nanmean(rpe_means)),
        "rrpe_std_of_means": float(np.nanstd(rpe_means)),
    }
