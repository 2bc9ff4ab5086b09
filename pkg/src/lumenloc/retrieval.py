"""Virtual-buffer retrieval.

Every real frame of the training buffer votes for its nearest virtual frame;
the virtual buffer is the contiguous window of the (path-ordered) virtual
database that collects the most votes.  A window starting at position ``k``
spans positions ``k .. k + R`` inclusive, i.e. ``R + 1`` entries.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import formats
from .geometry import Pose

DEFAULT_DIM = 256
DEFAULT_RANGE = 100


def normalize(descriptors: np.ndarray) -> np.ndarray:
    d = np.asarray(descriptors, dtype=float)
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot normalize a zero descriptor")
    return d / n


@dataclass(frozen=True, eq=False)
class VirtualDatabase:
    ids: np.ndarray  # (K,) strictly increasing
    descriptors: np.ndarray  # (K, D) unit rows
    poses: Tuple[Pose, ...]

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        desc = np.asarray(self.descriptors, dtype=float)
        if desc.ndim != 2 or len(ids) != len(desc) or len(ids) != len(self.poses):
            raise ValueError("ids, descriptors and poses must have matching lengths")
        if len(ids) > 1 and np.any(np.diff(ids) <= 0):
            raise ValueError("database ids must be strictly increasing")
        if len(desc) and np.max(np.abs(np.linalg.norm(desc, axis=1) - 1.0)) > 1e-6:
            raise ValueError("descriptors must be unit-normalized")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "descriptors", desc)
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self) -> int:
        return len(self.ids)

    def save(self, directory) -> None:
        formats.ensure_dir(directory)
        formats.write_virtual_index(os.path.join(directory, "index.txt"), self.ids, self.poses)
        formats.write_descriptors(os.path.join(directory, "descriptors.bin"), self.descriptors)

    @classmethod
    def load(cls, directory) -> "VirtualDatabase":
        ids, poses = formats.read_virtual_index(os.path.join(directory, "index.txt"))
        path = os.path.join(directory, "descriptors.bin")
        desc = formats.read_descriptors(path)
        if len(desc) != len(ids):
            raise formats.FormatError(path, f"{len(desc)} descriptors for {len(ids)} index entries", offset=4)
        # kept as stored (float32 values) so a save/load cycle is exact
        return cls(ids, desc.astype(np.float64), poses)


@dataclass(frozen=True, eq=False)
class RetrievalResult:
    indices: np.ndarray  # per-query best virtual id
    hit_scores: np.ndarray  # per database position
    range_start: int  # virtual id of the first entry of the window
    range_len: int  # R
    range_score: int
    start_position: int  # position of range_start in the database


def _nearest_positions(database: VirtualDatabase, queries: np.ndarray) -> np.ndarray:
    if len(database) == 0:
        raise ValueError("virtual database is empty")
    sims = np.asarray(queries, dtype=float) @ database.descriptors.T
    return np.argmax(sims, axis=-1)  # first maximum -> smallest id


def nearest(database: VirtualDatabase, query) -> int:
    """Id of the most cosine-similar entry; ties go to the smallest id."""
    return int(database.ids[_nearest_positions(database, np.asarray(query, dtype=float)[None])[0]])


def hit_scores(database: VirtualDatabase, queries) -> np.ndarray:
    """Votes per database position from each query's nearest neighbour."""
    if len(database) == 0:
        raise ValueError("virtual database is empty")
    queries = np.asarray(queries, dtype=float).reshape(-1, database.descriptors.shape[1])
    if len(queries) == 0:
        return np.zeros(len(database), dtype=np.int64)
    return np.bincount(_nearest_positions(database, queries), minlength=len(database)).astype(np.int64)


def best_subrange(scores, R: int) -> Tuple[int, int]:
    """Start position and score of the best window of ``R + 1`` entries.

    O(K) sliding sum over ``scores``; ties resolve to the leftmost start.
    """
    scores = np.asarray(scores, dtype=np.int64)
    K = len(scores)
    if R < 0 or int(R) != R:
        raise ValueError(f"R must be a non-negative integer, got {R}")
    if R > K - 1:
        raise ValueError(f"range length {R} needs at least {R + 1} database entries, have {K}")
    csum = np.concatenate([[0], np.cumsum(scores)])
    windows = csum[R + 1 :] - csum[: K - R]
    k = int(np.argmax(windows))
    return k, int(windows[k])


def retrieve(database: VirtualDatabase, real_descriptors, R: int = DEFAULT_RANGE) -> RetrievalResult:
    if len(database) == 0:
        raise ValueError("virtual database is empty")
    queries = np.asarray(real_descriptors, dtype=float).reshape(-1, database.descriptors.shape[1])
    scores = hit_scores(database, queries)
    k, s = best_subrange(scores, R)
    idx = database.ids[_nearest_positions(database, queries)] if len(queries) else np.zeros(0, dtype=np.int64)
    return RetrievalResult(idx, scores, int(database.ids[k]), int(R), s, k)


def build_virtual_buffer(database: VirtualDatabase, real_descriptors, R: int = DEFAULT_RANGE) -> List[Tuple[int, np.ndarray, Pose]]:
    """The ``R + 1`` consecutive database entries of the winning window."""
    res = retrieve(database, real_descriptors, R)
    k = res.start_position
    return [(int(database.ids[j]), database.descriptors[j], database.poses[j]) for j in range(k, k + R + 1)]


class PoseDescriptorModel:
    """Stand-in place-recognition descriptor computed from a pose.

    The feature ``(position / 50 mm, quaternion)`` is lifted to ``dim``
    dimensions through a fixed random orthonormal basis, perturbed with
    Gaussian noise and renormalised, so nearby poses give similar vectors.
    """

    def __init__(self, dim: int = DEFAULT_DIM, noise: float = 0.05, seed: int = 0, position_scale: float = 50.0):
        if dim < 7:
            raise ValueError("descriptor dimension must be at least 7")
        basis_rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(basis_rng.normal(size=(dim, 7)))
        self.basis = q
        self.dim = dim
        self.noise = noise
        self.position_scale = position_scale

    def __call__(self, pose: Pose, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        feat = np.concatenate([pose.translation / self.position_scale, pose.quaternion()])
        d = self.basis @ feat
        if rng is not None and self.noise > 0:
            d = d + rng.normal(scale=self.noise, size=self.dim)
        return normalize(d)
