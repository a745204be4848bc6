"""Frames, flow fields, masks and trajectories on disk.

Formats:

* binary PGM (``P5``) and PPM (``P6``), maxval 255; color is reduced to gray
  with rounded Rec.601 luma on load,
* Middlebury ``.flo`` flow files,
* TUM trajectories (``timestamp tx ty tz qx qy qz qw``),
* KITTI odometry poses (12 numbers per line, row-major ``[R|t]``); the line
  number serves as the timestamp.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    BadMaxvalError,
    DataError,
    FormatError,
    SizeMismatchError,
    TruncatedDataError,
)
from .geometry import PoseSE3, matrix_to_quat, normalize_quat, quat_to_matrix

FLO_MAGIC = 202021.25
DEFAULT_PATTERN = "%06d.pgm"


@dataclass
class Frame:
    """One 8-bit grayscale image, ``pixels`` shaped ``(height, width)``."""

    pixels: np.ndarray
    index: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] == 0 or px.shape[1] == 0:
            raise DataError(f"frame must be a non-empty 2-D array, got shape {px.shape}")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255):
                raise DataError("pixel values outside [0, 255]")
            px = px.astype(np.uint8)
        self.pixels = px
        if self.index < 0:
            raise DataError("frame index must be nonnegative")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels) -> "Frame":
        return Frame(pixels, self.index, self.timestamp)


@dataclass
class FlowField:
    """Dense displacement field; ``u`` is horizontal, ``v`` vertical, in pixels."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise DataError(f"u/v shape mismatch: {self.u.shape} vs {self.v.shape}")

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


# Masks are plain boolean arrays shaped (height, width); True marks dynamic.


def _read_header(data: bytes, path) -> tuple[str, int, int, int, int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise TruncatedDataError(f"{path}: truncated header")
        tokens.append(data[start:pos])
        if len(tokens) == 1 and tokens[0] not in (b"P5", b"P6"):
            raise BadMagicError(f"{path}: unsupported magic {tokens[0][:8]!r}")
    pos += 1  # single whitespace byte before the raster
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header") from exc
    return tokens[0].decode(), w, h, maxval, pos


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """Rounded Rec.601 luma of an ``(..., 3)`` uint8 array."""
    rgb = rgb.astype(np.float64)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.floor(y + 0.5), 0, 255).astype(np.uint8)


def load_frame(path, index: int = 0, timestamp: float = 0.0) -> Frame:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    data = path.read_bytes()
    if data[:2] not in (b"P5", b"P6"):
        raise BadMagicError(f"{path}: expected P5 or P6, got {data[:2]!r}")
    magic, w, h, maxval, offset = _read_header(data, path)
    if maxval != 255:
        raise BadMaxvalError(f"{path}: maxval {maxval} not supported (need 255)")
    channels = 3 if magic == "P6" else 1
    n = w * h * channels
    raster = data[offset : offset + n]
    if len(raster) < n or w <= 0 or h <= 0:
        raise TruncatedDataError(f"{path}: expected {n} pixel bytes, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    if channels == 3:
        pixels = rgb_to_gray(arr.reshape(h, w, 3))
    else:
        pixels = arr.reshape(h, w).copy()
    return Frame(pixels, index, timestamp)


def store_frame(frame: Frame, path) -> None:
    px = np.ascontiguousarray(frame.pixels, dtype=np.uint8)
    h, w = px.shape
    if h == 0 or w == 0:
        raise DataError("cannot store an empty frame")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def load_mask(path) -> np.ndarray:
    return load_frame(path).pixels >= 128


def store_mask(mask: np.ndarray, path) -> None:
    store_frame(Frame(np.where(mask, 255, 0).astype(np.uint8)), path)


def read_flow(path) -> FlowField:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise TruncatedDataError(f"{path}: file too short for a .flo header")
    magic = np.frombuffer(data[:4], dtype="<f4")[0]
    if magic != np.float32(FLO_MAGIC):
        raise BadMagicError(f"{path}: bad .flo magic {magic!r}")
    w, h = (int(x) for x in np.frombuffer(data[4:12], dtype="<i4"))
    if w <= 0 or h <= 0:
        raise SizeMismatchError(f"{path}: invalid size {w}x{h}")
    body = data[12:]
    if len(body) != 8 * w * h:
        raise SizeMismatchError(f"{path}: {len(body)} payload bytes, expected {8 * w * h} for {w}x{h}")
    uv = np.frombuffer(body, dtype="<f4").reshape(h, w, 2).astype(np.float64)
    return FlowField(uv[..., 0], uv[..., 1])


def write_flow(flow: FlowField, path) -> None:
    h, w = flow.shape
    uv = np.stack([flow.u, flow.v], axis=-1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(np.array([FLO_MAGIC], dtype="<f4").tobytes())
        fh.write(np.array([w, h], dtype="<i4").tobytes())
        fh.write(uv.tobytes())


@dataclass
class Trajectory:
    """Timestamped camera-to-world poses.

    ``quats`` is ``(n, 4)`` in ``(x, y, z, w)`` order, ``positions`` ``(n, 3)``.
    """

    timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0))
    quats: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        n = len(self.timestamps)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(n, 3)
        if n:
            self.quats = normalize_quat(self.quats)
        if np.any(np.diff(self.timestamps) < 0):
            raise DataError("trajectory timestamps must be non-decreasing")

    @classmethod
    def from_poses(cls, timestamps, poses) -> "Trajectory":
        poses = list(poses)
        return cls(
            timestamps,
            np.array([p.q for p in poses]).reshape(-1, 4),
            np.array([p.t for p in poses]).reshape(-1, 3),
        )

    def __len__(self) -> int:
        return len(self.timestamps)

    def pose(self, i: int) -> PoseSE3:
        return PoseSE3(self.quats[i], self.positions[i])

    def poses(self) -> list[PoseSE3]:
        return [self.pose(i) for i in range(len(self))]

    def matrices(self) -> np.ndarray:
        """``(n, 4, 4)`` homogeneous pose matrices."""
        T = np.tile(np.eye(4), (len(self), 1, 1))
        if len(self):
            T[:, :3, :3] = quat_to_matrix(self.quats)
            T[:, :3, 3] = self.positions
        return T

    def subset(self, idx) -> "Trajectory":
        idx = np.asarray(idx, dtype=int)
        return Trajectory(self.timestamps[idx], self.quats[idx], self.positions[idx])


def _parse_reals(tokens, lineno):
    try:
        vals = [float(t) for t in tokens]
    except ValueError as exc:
        raise FormatError(f"line {lineno}: non-numeric token") from exc
    if not all(math.isfinite(v) for v in vals):
        raise FormatError(f"line {lineno}: non-finite value")
    return vals


def parse_trajectory(text: str, format: str = "tum") -> Trajectory:
    """Parse TUM or KITTI trajectory text; quaternions are normalized."""
    stamps, quats, trans = [], [], []
    if format == "tum":
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = re.split(r"[\s,]+", line)
            if len(tokens) != 8:
                raise FormatError(f"line {lineno}: expected 8 values, got {len(tokens)}")
            vals = _parse_reals(tokens, lineno)
            q = np.array(vals[4:8])
            if np.linalg.norm(q) == 0:
                raise FormatError(f"line {lineno}: zero quaternion")
            stamps.append(vals[0])
            trans.append(vals[1:4])
            quats.append(q)
    elif format == "kitti":
        frame = 0
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) != 12:
                raise FormatError(f"line {lineno}: expected 12 values, got {len(tokens)}")
            M = np.array(_parse_reals(tokens, lineno)).reshape(3, 4)
            R = M[:, :3]
            if np.abs(R.T @ R - np.eye(3)).max() > 1e-3 or np.linalg.det(R) < 0:
                raise FormatError(f"line {lineno}: rotation is not orthonormal")
            stamps.append(float(frame))
            quats.append(matrix_to_quat(R))
            trans.append(M[:, 3])
            frame += 1
    else:
        raise ValueError(f"unknown trajectory format {format!r}")
    return Trajectory(np.array(stamps), np.array(quats).reshape(-1, 4), np.array(trans).reshape(-1, 3))


def _g(x: float, digits: int) -> str:
    s = f"{x:.{digits}g}"
    return "0" if s == "-0" else s


def serialize_trajectory(traj: Trajectory, format: str = "tum", digits: int = 9) -> str:
    """Inverse of :func:`parse_trajectory`.

    TUM timestamps get 9 decimal places; every other real is written with
    ``digits`` significant digits.
    """
    lines = []
    if format == "tum":
        for ts, p, q in zip(traj.timestamps, traj.positions, traj.quats):
            vals = " ".join(_g(x, digits) for x in (*p, *q))
            lines.append(f"{ts:.9f} {vals}")
    elif format == "kitti":
        if np.any(traj.timestamps != np.round(traj.timestamps)):
            raise DataError("KITTI output requires integer frame timestamps")
        for T in traj.matrices():
            lines.append(" ".join(_g(x, digits) for x in T[:3, :4].reshape(-1)))
    else:
        raise ValueError(f"unknown trajectory format {format!r}")
    return "".join(line + "\n" for line in lines)


def load_trajectory(path, format: str | None = None) -> Trajectory:
    path = Path(path)
    text = path.read_text()
    if format is None:
        format = guess_trajectory_format(text)
    return parse_trajectory(text, format)


def guess_trajectory_format(text: str) -> str:
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            return "kitti" if len(line.split()) == 12 else "tum"
    return "tum"


def save_trajectory(traj: Trajectory, path, format: str = "tum") -> None:
    Path(path).write_text(serialize_trajectory(traj, format))


def associate_timestamps(a: Trajectory, b: Trajectory, max_diff: float = 0.02) -> list[tuple[int, int]]:
    """Greedy in-order nearest-timestamp matching.

    Each pose of ``a`` takes the closest still-unused pose of ``b`` within
    ``max_diff`` seconds. Returns ``(index_a, index_b)`` pairs.
    """
    if not max_diff > 0:
        raise ValueError("max_diff must be positive")
    tb = np.asarray(b.timestamps if isinstance(b, Trajectory) else b, dtype=float)
    ta = np.asarray(a.timestamps if isinstance(a, Trajectory) else a, dtype=float)
    order = np.argsort(tb, kind="stable")
    sorted_b = tb[order]
    used = np.zeros(len(tb), dtype=bool)
    pairs = []
    for i, t in enumerate(ta):
        lo = np.searchsorted(sorted_b, t - max_diff, side="left")
        hi = np.searchsorted(sorted_b, t + max_diff, side="right")
        best, best_d = -1, math.inf
        for k in range(lo, hi):
            j = order[k]
            d = abs(sorted_b[k] - t)
            if not used[j] and d < best_d:
                best, best_d = j, d
        if best >= 0:
            used[best] = True
            pairs.append((i, int(best)))
    return pairs


def frame_path(directory, index: int, pattern: str = DEFAULT_PATTERN) -> Path:
    return Path(directory) / (pattern % index)


def load_sequence(directory, pattern: str = DEFAULT_PATTERN, timestamps=None) -> list[Frame]:
    """Load frames ``pattern % 0, pattern % 1, ...`` until the first gap."""
    frames = []
    i = 0
    while True:
        p = frame_path(directory, i, pattern)
        if not p.exists():
            break
        ts = float(timestamps[i]) if timestamps is not None else float(i)
        frames.append(load_frame(p, index=i, timestamp=ts))
        i += 1
    return frames


def store_sequence(frames, directory, pattern: str = DEFAULT_PATTERN) -> None:
    Path(directory).mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(frames):
        store_frame(f, frame_path(directory, getattr(f, "index", k), pattern))


def load_masks(directory, count: int, pattern: str = DEFAULT_PATTERN) -> list[np.ndarray]:
    return [load_mask(frame_path(directory, i, pattern)) for i in range(count)]


def store_masks(masks, directory, pattern: str = DEFAULT_PATTERN) -> None:
    Path(directory).mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(masks):
        store_mask(m, frame_path(directory, i, pattern))


def read_times(path) -> np.ndarray:
    """KITTI ``times.txt``: one timestamp per line."""
    return np.array([float(x) for x in Path(path).read_text().split()])
