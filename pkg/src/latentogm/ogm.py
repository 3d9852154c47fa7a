"""Occupancy grid container, three-class thresholding and the OGMS sequence format.

Cell values use a canonical encoding: FREE=0.0, OCCLUDED=0.5, OCCUPIED=1.0.
Continuous values (e.g. generator outputs) are mapped back to classes with
``classify`` using the thresholds (0.25, 0.75).

OGMS layout (little-endian)::

    b"OGMS"                      magic
    u16                          version (=1)
    u32 x5                       width, height, T, H, P
    f32                          resolution (meters/cell)
    T * width*height f32         frames, row-major, row 0 = top (max y)
    T * 3 f32                    ego poses (x, y, heading)
    u32                          CRC32 of every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    BadVersionError,
    ChecksumError,
    ConfigError,
    DecodeError,
    ShapeError,
    TruncatedError,
)

FREE, OCCLUDED, OCCUPIED = 0, 1, 2
CLASSES = (FREE, OCCLUDED, OCCUPIED)
CLASS_NAMES = {FREE: "free", OCCLUDED: "occluded", OCCUPIED: "occupied"}

FREE_VALUE, OCCLUDED_VALUE, OCCUPIED_VALUE = 0.0, 0.5, 1.0
CLASS_VALUES = np.array([FREE_VALUE, OCCLUDED_VALUE, OCCUPIED_VALUE], dtype=np.float32)
DEFAULT_THRESHOLDS = (0.25, 0.75)

OGMS_MAGIC = b"OGMS"
OGMS_VERSION = 1
_OGMS_HEADER = struct.Struct("<4sH5If")


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    resolution: float

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ConfigError("grid dimensions must be integers")
        if self.width < 8 or self.height < 8:
            raise ConfigError(f"grid must be at least 8x8, got {self.width}x{self.height}")
        if not self.resolution > 0:
            raise ConfigError(f"resolution must be positive, got {self.resolution}")
        # Stored as f32 on disk; normalise so that file round trips are exact.
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "resolution", float(np.float32(self.resolution)))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "resolution": self.resolution}

    @classmethod
    def from_dict(cls, d: dict) -> GridSpec:
        return cls(int(d["width"]), int(d["height"]), float(d["resolution"]))


@dataclass(frozen=True, eq=False)
class Ogm:
    """A single grid. ``values`` has shape (height, width), row 0 at the top."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim == 1:
            if v.size != self.spec.n_cells:
                raise ShapeError(f"expected {self.spec.n_cells} values, got {v.size}")
            v = v.reshape(self.spec.shape)
        if v.shape != self.spec.shape:
            raise ShapeError(f"values shape {v.shape} does not match grid {self.spec.shape}")
        if not np.all((v >= 0.0) & (v <= 1.0)):
            raise ValueError("occupancy values must lie in [0, 1]")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __eq__(self, other):
        if not isinstance(other, Ogm):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.spec, self.values.tobytes()))


@dataclass(frozen=True, eq=False)
class ClassGrid:
    spec: GridSpec
    classes: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.classes, dtype=np.int8)
        if c.shape != self.spec.shape:
            raise ShapeError(f"classes shape {c.shape} does not match grid {self.spec.shape}")
        if not np.all((c >= FREE) & (c <= OCCUPIED)):
            raise ValueError("class labels must be FREE, OCCLUDED or OCCUPIED")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "classes", c)

    def __eq__(self, other):
        if not isinstance(other, ClassGrid):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.classes, other.classes)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.classes.ravel(), minlength=3)

    def to_ogm(self) -> Ogm:
        return Ogm(self.spec, CLASS_VALUES[self.classes])


@dataclass(frozen=True, eq=False)
class ScenarioSequence:
    spec: GridSpec
    frames: tuple[Ogm, ...]
    ego_poses: np.ndarray
    H: int
    P: int
    sequence_id: str = field(default="", compare=False)

    def __post_init__(self):
        frames = tuple(self.frames)
        poses = np.asarray(self.ego_poses, dtype=np.float32).reshape(-1, 3).copy()
        poses.setflags(write=False)
        if self.H < 1 or self.P < 1:
            raise ConfigError("H and P must be >= 1")
        if len(frames) < self.H + self.P:
            raise ConfigError(f"sequence has {len(frames)} frames, needs >= H+P={self.H + self.P}")
        if len(poses) != len(frames):
            raise ShapeError(f"{len(poses)} ego poses for {len(frames)} frames")
        for f in frames:
            if f.spec != self.spec:
                raise ShapeError("frame grid spec differs from sequence spec")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "ego_poses", poses)

    def __len__(self):
        return len(self.frames)

    def __eq__(self, other):
        if not isinstance(other, ScenarioSequence):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.H == other.H
            and self.P == other.P
            and len(self.frames) == len(other.frames)
            and all(a == b for a, b in zip(self.frames, other.frames))
            and self.ego_poses.tobytes() == other.ego_poses.tobytes()
        )

    def stacked(self) -> np.ndarray:
        """All frames as a float32 array of shape (T, height, width)."""
        return np.stack([f.values for f in self.frames])


def check_thresholds(t_free: float, t_occ: float) -> None:
    if not (0.0 < t_free < t_occ < 1.0):
        raise ConfigError(f"thresholds must satisfy 0 < t_free < t_occ < 1, got ({t_free}, {t_occ})")


def classify_array(values: np.ndarray, t_free: float = 0.25, t_occ: float = 0.75) -> np.ndarray:
    """Vectorised thresholding of raw values into class labels (int8)."""
    check_thresholds(t_free, t_occ)
    v = np.asarray(values)
    out = np.full(v.shape, OCCLUDED, dtype=np.int8)
    out[v < t_free] = FREE
    out[v > t_occ] = OCCUPIED
    return out


def classify(ogm: Ogm, t_free: float = 0.25, t_occ: float = 0.75) -> ClassGrid:
    return ClassGrid(ogm.spec, classify_array(ogm.values, t_free, t_occ))


def encode_sequence(seq: ScenarioSequence) -> bytes:
    spec = seq.spec
    header = _OGMS_HEADER.pack(
        OGMS_MAGIC, OGMS_VERSION, spec.width, spec.height, len(seq), seq.H, seq.P, spec.resolution
    )
    frames = seq.stacked().astype("<f4", copy=False).tobytes()
    poses = seq.ego_poses.astype("<f4", copy=False).tobytes()
    body = header + frames + poses
    return body + struct.pack("<I", zlib.crc32(body))


def decode_sequence(data: bytes, sequence_id: str = "") -> ScenarioSequence:
    if len(data) < 4 or data[:4] != OGMS_MAGIC:
        raise BadMagicError("not an OGMS file (bad magic)")
    if len(data) < _OGMS_HEADER.size:
        raise TruncatedError("OGMS header truncated")
    _, version, width, height, T, H, P, resolution = _OGMS_HEADER.unpack_from(data)
    if version != OGMS_VERSION:
        raise BadVersionError(f"unsupported OGMS version {version}")
    n_frame = width * height * T * 4
    expected = _OGMS_HEADER.size + n_frame + T * 12 + 4
    if len(data) < expected:
        raise TruncatedError(f"OGMS file truncated: {len(data)} < {expected} bytes")
    if len(data) > expected:
        raise DecodeError(f"OGMS file has {len(data) - expected} trailing bytes")
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[: expected - 4]) != crc:
        raise ChecksumError("OGMS checksum mismatch")
    spec = GridSpec(width, height, resolution)
    off = _OGMS_HEADER.size
    frames = np.frombuffer(data, dtype="<f4", count=width * height * T, offset=off)
    frames = frames.reshape(T, height, width)
    poses = np.frombuffer(data, dtype="<f4", count=T * 3, offset=off + n_frame).reshape(T, 3)
    return ScenarioSequence(
        spec, tuple(Ogm(spec, f) for f in frames), poses, H, P, sequence_id=sequence_id
    )


def write_sequence(seq: ScenarioSequence, path) -> None:
    Path(path).write_bytes(encode_sequence(seq))


def read_sequence(path, sequence_id: str = "") -> ScenarioSequence:
    path = Path(path)
    return decode_sequence(path.read_bytes(), sequence_id=sequence_id or path.stem)


def ogms_file_size(spec: GridSpec, T: int) -> int:
    return _OGMS_HEADER.size + T * spec.n_cells * 4 + T * 12 + 4
