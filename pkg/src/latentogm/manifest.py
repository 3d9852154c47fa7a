"""JSON manifests describing datasets, latent datasets and prediction sets.

All three share one schema::

    {
      "kind": "dataset" | "latents" | "predictions",
      "grid": {"width": .., "height": .., "resolution": ..},
      "H": 5, "P": 15, "window_stride": 5,
      "sequences": [{"id", "path", "split", "n_frames", "source", "start"}, ...],
      "meta": {...}
    }

Paths are relative to the manifest's directory. A dataset sequence is a whole
scene and is cut into windows of H+P frames every ``window_stride`` frames.
A prediction sequence *is* one window: it holds the H observed frames
followed by the predicted ones, and ``source``/``start`` locate the window in
the ground-truth scene.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError
from .ogm import GridSpec
from .util import read_json, write_json

MANIFEST_NAME = "manifest.json"
KINDS = ("dataset", "latents", "predictions")


@dataclass
class SequenceEntry:
    id: str
    path: str
    split: str
    n_frames: int
    source: str | None = None
    start: int = 0

    def to_dict(self) -> dict:
        d = {"id": self.id, "path": self.path, "split": self.split, "n_frames": self.n_frames}
        if self.source is not None:
            d["source"] = self.source
            d["start"] = self.start
        return d


@dataclass(frozen=True)
class Window:
    id: str
    source: str
    start: int  # first frame of the window in the source scene
    path: Path
    offset: int  # first frame of the window inside ``path``
    split: str


@dataclass
class DatasetManifest:
    root: Path
    kind: str
    grid: GridSpec
    H: int
    P: int
    window_stride: int
    sequences: list[SequenceEntry]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        if self.kind not in KINDS:
            raise DataError(f"unknown manifest kind {self.kind!r}")

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "grid": self.grid.to_dict(),
            "H": self.H,
            "P": self.P,
            "window_stride": self.window_stride,
            "sequences": [s.to_dict() for s in self.sequences],
            "meta": self.meta,
        }

    def save(self) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        write_json(self.path, self.to_dict())
        return self.path

    @classmethod
    def load(cls, path) -> DatasetManifest:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise DataError(f"no manifest at {path}")
        d = read_json(path)
        try:
            seqs = [SequenceEntry(**s) for s in d["sequences"]]
            return cls(
                root=path.parent,
                kind=d["kind"],
                grid=GridSpec.from_dict(d["grid"]),
                H=int(d["H"]),
                P=int(d["P"]),
                window_stride=int(d.get("window_stride", 1)),
                sequences=seqs,
                meta=d.get("meta", {}),
            )
        except (KeyError, TypeError) as e:
            raise DataError(f"malformed manifest {path}: {e}") from e

    def resolve(self, entry: SequenceEntry) -> Path:
        return self.root / entry.path

    def select(self, split: str | None = None) -> list[SequenceEntry]:
        if split is None:
            return list(self.sequences)
        splits = {split} if isinstance(split, str) else set(split)
        return [s for s in self.sequences if s.split in splits]

    def by_id(self) -> dict[str, SequenceEntry]:
        return {s.id: s for s in self.sequences}

    def windows(self, split: str | None = "test", horizon: int | None = None) -> list[Window]:
        """Evaluation windows in deterministic order."""
        out = []
        if self.kind == "predictions":
            for s in self.select(split):
                out.append(Window(s.id, s.source or s.id, s.start, self.resolve(s), 0, s.split))
            return out
        span = self.H + (self.P if horizon is None else horizon)
        for s in self.select(split):
            for start in range(0, s.n_frames - span + 1, self.window_stride):
                out.append(
                    Window(f"{s.id}@{start:04d}", s.id, start, self.resolve(s), start, s.split)
                )
        return out
