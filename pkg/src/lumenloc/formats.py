"""On-disk formats.

Binary files are little-endian with a 4-byte magic:

* ``SCM1`` scene-coordinate grid: u32 rows, u32 cols, u32 stride, f32 origin
  u, f32 origin v, rows*cols f32 xyz triples, rows*cols validity bytes.
* ``IMGF`` image: u32 w, u32 h, u32 c, w*h*c f32 (row-major, channels last).
* ``DPTF`` depth: u32 w, u32 h, w*h f32 depths, w*h validity bytes.
* ``DSC1`` descriptors: u32 count, u32 dim, count*dim f32 (row-major by id).

Text files: TUM trajectories (``timestamp tx ty tz qx qy qz qw``), the
virtual-database index (``id tx ty tz qx qy qz qw``), intrinsics JSON and
binary PPM (P6, 8-bit) previews.
"""

from __future__ import annotations

import json
import os
import struct
from typing import List, Sequence, Tuple

import numpy as np

from .geometry import CameraIntrinsics, Pose


class FormatError(ValueError):
    """Malformed file; carries the path and byte offset (or line number)."""

    def __init__(self, path, message: str, offset: int = None, line: int = None):
        self.path = str(path)
        self.offset = offset
        self.line = line
        where = f"line {line}" if line is not None else f"offset {offset}"
        super().__init__(f"{self.path}: {where}: {message}")


def _write(path, chunks: Sequence[bytes]):
    with open(path, "wb") as fh:
        for c in chunks:
            fh.write(c)


class _Reader:
    def __init__(self, path):
        self.path = path
        with open(path, "rb") as fh:
            self.buf = fh.read()
        self.pos = 0

    def magic(self, expected: bytes):
        got = self.take(4)
        if got != expected:
            raise FormatError(self.path, f"bad magic {got!r}, expected {expected!r}", offset=0)

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                self.path, f"truncated: need {n} bytes, {len(self.buf) - self.pos} left", offset=self.pos
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals if count > 1 else vals[0]

    def f32_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    def u8_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(count), dtype=np.uint8).copy()

    def finish(self):
        if self.pos != len(self.buf):
            raise FormatError(self.path, f"{len(self.buf) - self.pos} trailing bytes", offset=self.pos)


# --- scene-coordinate grids ------------------------------------------------------------


def write_scm(path, scene_map) -> None:
    pts = np.ascontiguousarray(scene_map.points, dtype="<f4")
    rows, cols = scene_map.valid.shape
    _write(
        path,
        [
            b"SCM1",
            struct.pack("<3I2f", rows, cols, scene_map.stride, *scene_map.origin),
            pts.tobytes(),
            np.ascontiguousarray(scene_map.valid, dtype=np.uint8).tobytes(),
        ],
    )


def read_scm(path):
    from .pose_solver import ScenePointMap

    r = _Reader(path)
    r.magic(b"SCM1")
    rows, cols, stride = r.u32(3)
    origin = struct.unpack("<2f", r.take(8))
    pts = r.f32_array(rows * cols * 3).reshape(rows, cols, 3)
    valid_off = r.pos
    valid = r.u8_array(rows * cols).reshape(rows, cols)
    r.finish()
    if np.any(valid > 1):
        raise FormatError(path, "validity bytes must be 0 or 1", offset=valid_off)
    try:
        return ScenePointMap(pts.astype(np.float64), valid.astype(bool), stride, origin)
    except ValueError as exc:
        raise FormatError(path, str(exc), offset=0) from exc


# --- images and depth ------------------------------------------------------------------


def write_imgf(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    _write(path, [b"IMGF", struct.pack("<3I", w, h, c), np.ascontiguousarray(img, dtype="<f4").tobytes()])


def read_imgf(path) -> np.ndarray:
    r = _Reader(path)
    r.magic(b"IMGF")
    w, h, c = r.u32(3)
    data = r.f32_array(w * h * c).reshape(h, w, c)
    r.finish()
    return data


def write_dptf(path, depth) -> None:
    d = np.ascontiguousarray(depth.depth, dtype="<f4")
    h, w = d.shape
    _write(
        path,
        [b"DPTF", struct.pack("<2I", w, h), d.tobytes(), np.ascontiguousarray(depth.valid, dtype=np.uint8).tobytes()],
    )


def read_dptf(path):
    from .augmentation import DepthMap

    r = _Reader(path)
    r.magic(b"DPTF")
    w, h = r.u32(2)
    d = r.f32_array(w * h).reshape(h, w)
    valid = r.u8_array(w * h).reshape(h, w).astype(bool)
    r.finish()
    return DepthMap(d, valid)


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    h, w, _ = img.shape
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    _write(path, [f"P6\n{w} {h}\n255\n".encode("ascii"), data.tobytes()])


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(path, "truncated header", offset=pos)
        tokens.append(buf[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise FormatError(path, "only 8-bit P6 is supported", offset=0)
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    if len(buf) - pos != w * h * 3:
        raise FormatError(path, "pixel data size mismatch", offset=pos)
    return np.frombuffer(buf[pos:], dtype=np.uint8).reshape(h, w, 3).astype(float) / 255.0


# --- descriptors -------------------------------------------------------------------------


def write_descriptors(path, descriptors: np.ndarray) -> None:
    d = np.ascontiguousarray(descriptors, dtype="<f4")
    if d.ndim != 2:
        raise ValueError("descriptors must be (count, dim)")
    _write(path, [b"DSC1", struct.pack("<2I", *d.shape), d.tobytes()])


def read_descriptors(path) -> np.ndarray:
    r = _Reader(path)
    r.magic(b"DSC1")
    count, dim = r.u32(2)
    data = r.f32_array(count * dim).reshape(count, dim)
    r.finish()
    return data


# --- text formats ------------------------------------------------------------------------


def _pose_fields(pose: Pose) -> List[str]:
    return [repr(float(x)) for x in (*pose.translation, *pose.quaternion())]


def _parse_pose(path, lineno: int, fields: Sequence[str]) -> Pose:
    try:
        vals = [float(x) for x in fields]
    except ValueError as exc:
        raise FormatError(path, f"non-numeric field ({exc})", line=lineno) from exc
    if not np.all(np.isfinite(vals)):
        raise FormatError(path, "non-finite value", line=lineno)
    q = np.array(vals[3:7])
    if np.linalg.norm(q) < 1e-12:
        raise FormatError(path, "zero quaternion", line=lineno)
    return Pose.from_quaternion(normalize_quaternion(q), vals[:3])


def write_tum(path, timestamps, positions, quaternions) -> None:
    """Write ``timestamp tx ty tz qx qy qz qw`` lines with round-trip precision."""
    with open(path, "w") as fh:
        for ts, p, q in zip(timestamps, positions, quaternions):
            fh.write(" ".join(repr(float(x)) for x in (ts, *p, *q)) + "\n")


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    """Unit quaternion; already-unit input is returned untouched."""
    n = float(np.linalg.norm(q))
    return q if abs(n - 1.0) <= 1e-12 else q / n


def read_tum(path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parse a TUM trajectory into (timestamps, positions, xyzw quaternions).

    Raises ``FormatError`` naming the offending line.
    """
    stamps, pos, quats = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.replace(",", " ").split()
            if len(fields) != 8:
                raise FormatError(path, f"expected 8 fields, got {len(fields)}", line=lineno)
            try:
                vals = [float(x) for x in fields]
            except ValueError as exc:
                raise FormatError(path, f"non-numeric field ({exc})", line=lineno) from exc
            if not np.all(np.isfinite(vals)):
                raise FormatError(path, "non-finite value", line=lineno)
            if stamps and not vals[0] > stamps[-1]:
                raise FormatError(path, "timestamps must be strictly increasing", line=lineno)
            q = np.array(vals[4:8])
            if np.linalg.norm(q) < 1e-12:
                raise FormatError(path, "zero quaternion", line=lineno)
            stamps.append(vals[0])
            pos.append(vals[1:4])
            quats.append(normalize_quaternion(q))
    return (
        np.array(stamps, dtype=float),
        np.array(pos, dtype=float).reshape(-1, 3),
        np.array(quats, dtype=float).reshape(-1, 4),
    )


def write_virtual_index(path, ids: Sequence[int], poses: Sequence[Pose]) -> None:
    with open(path, "w") as fh:
        for i, pose in zip(ids, poses):
            fh.write(" ".join([str(int(i))] + _pose_fields(pose)) + "\n")


def read_virtual_index(path) -> Tuple[np.ndarray, List[Pose]]:
    ids, poses = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 8:
                raise FormatError(path, f"expected 8 fields, got {len(fields)}", line=lineno)
            try:
                ids.append(int(fields[0]))
            except ValueError as exc:
                raise FormatError(path, "bad id", line=lineno) from exc
            poses.append(_parse_pose(path, lineno, fields[1:]))
    return np.array(ids, dtype=np.int64), poses


def write_intrinsics(path, intrinsics: CameraIntrinsics) -> None:
    with open(path, "w") as fh:
        json.dump(
            {
                "fx": intrinsics.fx,
                "fy": intrinsics.fy,
                "cx": intrinsics.cx,
                "cy": intrinsics.cy,
                "width": intrinsics.width,
                "height": intrinsics.height,
            },
            fh,
            indent=2,
        )
        fh.write("\n")


def read_intrinsics(path) -> CameraIntrinsics:
    try:
        with open(path) as fh:
            d = json.load(fh)
        return CameraIntrinsics(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"])
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(path, f"invalid intrinsics: {exc}", offset=0) from exc


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
