"""Image Similarity (IS) and MSE between occupancy grids, plus batch evaluation.

IS thresholds both grids into free/occluded/occupied. For every class present
in both grids it averages, over the cells of that class in one grid, the
Manhattan distance to the nearest same-class cell of the other grid; the two
directions are averaged and the per-class terms summed. A class present in
only one of the grids costs ``width + height``. Lower is better.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError
from .manifest import DatasetManifest
from .ogm import CLASSES, DEFAULT_THRESHOLDS, Ogm, classify_array, read_sequence

ORACLE_MAX_CELLS = 32 * 32


def manhattan_distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact 4-connected BFS distance (in cells) to the nearest True cell.

    Level-synchronous multi-source BFS: every iteration expands the whole
    frontier by one step. Cells are unreachable only when ``mask`` is empty,
    in which case the result is all -1.
    """
    mask = np.asarray(mask, dtype=bool)
    dist = np.full(mask.shape, -1, dtype=np.int64)
    if not mask.any():
        return dist
    dist[mask] = 0
    frontier = mask.copy()
    visited = mask.copy()
    level = 0
    while True:
        nxt = np.zeros_like(frontier)
        nxt[1:, :] |= frontier[:-1, :]
        nxt[:-1, :] |= frontier[1:, :]
        nxt[:, 1:] |= frontier[:, :-1]
        nxt[:, :-1] |= frontier[:, 1:]
        nxt &= ~visited
        if not nxt.any():
            return dist
        level += 1
        dist[nxt] = level
        visited |= nxt
        frontier = nxt


def _check_pair(a: Ogm, b: Ogm) -> None:
    if a.spec != b.spec:
        raise ShapeError(f"grid specs differ: {a.spec} vs {b.spec}")


def _combine(terms_ab: dict, terms_ba: dict, present_a, present_b, penalty: float) -> float:
    total = 0.0
    for c in CLASSES:
        if present_a[c] and present_b[c]:
            total += 0.5 * (terms_ab[c] + terms_ba[c])
        elif present_a[c] or present_b[c]:
            total += penalty
    return total


def is_metric_classes(ca: np.ndarray, cb: np.ndarray) -> float:
    """IS between two label grids of identical shape."""
    if ca.shape != cb.shape:
        raise ShapeError(f"class grids differ in shape: {ca.shape} vs {cb.shape}")
    penalty = float(ca.shape[0] + ca.shape[1])
    present_a = {c: bool((ca == c).any()) for c in CLASSES}
    present_b = {c: bool((cb == c).any()) for c in CLASSES}
    ab, ba = {}, {}
    for c in CLASSES:
        if not (present_a[c] and present_b[c]):
            continue
        ma, mb = ca == c, cb == c
        dt_b = manhattan_distance_transform(mb)
        dt_a = manhattan_distance_transform(ma)
        ab[c] = int(dt_b[ma].sum()) / int(ma.sum())
        ba[c] = int(dt_a[mb].sum()) / int(mb.sum())
    return _combine(ab, ba, present_a, present_b, penalty)


def is_metric(a: Ogm, b: Ogm, thresholds=DEFAULT_THRESHOLDS) -> float:
    _check_pair(a, b)
    return is_metric_classes(
        classify_array(a.values, *thresholds), classify_array(b.values, *thresholds)
    )


def is_metric_oracle(a: Ogm, b: Ogm, thresholds=DEFAULT_THRESHOLDS) -> float:
    """Same quantity via exhaustive all-pairs minimum. Small grids only."""
    _check_pair(a, b)
    if a.spec.n_cells > ORACLE_MAX_CELLS:
        raise ValueError(f"oracle limited to {ORACLE_MAX_CELLS} cells, got {a.spec.n_cells}")
    ca = classify_array(a.values, *thresholds)
    cb = classify_array(b.values, *thresholds)
    penalty = float(a.spec.width + a.spec.height)

    def directed(src, dst):
        ps = np.argwhere(src).astype(np.int64)
        pd = np.argwhere(dst).astype(np.int64)
        # full |ps| x |pd| Manhattan distance matrix, no search structure
        d = np.abs(ps[:, None, :] - pd[None, :, :]).sum(axis=2)
        return int(d.min(axis=1).sum()) / len(ps)

    present_a = {c: bool((ca == c).any()) for c in CLASSES}
    present_b = {c: bool((cb == c).any()) for c in CLASSES}
    ab, ba = {}, {}
    for c in CLASSES:
        if present_a[c] and present_b[c]:
            ab[c] = directed(ca == c, cb == c)
            ba[c] = directed(cb == c, ca == c)
    return _combine(ab, ba, present_a, present_b, penalty)


def mse(a: Ogm, b: Ogm) -> float:
    _check_pair(a, b)
    d = a.values.astype(np.float64) - b.values.astype(np.float64)
    return float(np.mean(d * d))


# --------------------------------------------------------------------------
# Batch evaluation


def mean_and_stderr(values) -> tuple[float, float]:
    """Mean and sample-std/sqrt(n) standard error (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class FrameResult:
    sequence_id: str
    t: int  # horizon step, 1-based
    is_value: float
    mse_value: float


@dataclass
class EvalReport:
    per_frame: list[FrameResult]
    horizon: int
    thresholds: tuple[float, float] = DEFAULT_THRESHOLDS
    meta: dict = field(default_factory=dict)

    def per_horizon(self) -> list[dict]:
        rows = []
        for t in range(1, self.horizon + 1):
            sel = [r for r in self.per_frame if r.t == t]
            is_m, is_se = mean_and_stderr([r.is_value for r in sel])
            mse_m, mse_se = mean_and_stderr([r.mse_value for r in sel])
            rows.append(
                {"t": t, "n": len(sel), "is_mean": is_m, "is_se": is_se,
                 "mse_mean": mse_m, "mse_se": mse_se}
            )
        return rows

    def overall(self) -> dict:
        is_m, is_se = mean_and_stderr([r.is_value for r in self.per_frame])
        mse_m, mse_se = mean_and_stderr([r.mse_value for r in self.per_frame])
        return {"n": len(self.per_frame), "is_mean": is_m, "is_se": is_se,
                "mse_mean": mse_m, "mse_se": mse_se}

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "thresholds": list(self.thresholds),
            "overall": self.overall(),
            "per_horizon": self.per_horizon(),
            "per_frame": [
                {"sequence_id": r.sequence_id, "t": r.t, "is": r.is_value, "mse": r.mse_value}
                for r in self.per_frame
            ],
            "meta": self.meta,
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sequence_id", "t", "is", "mse"])
            for r in self.per_frame:
                w.writerow([r.sequence_id, r.t, repr(r.is_value), repr(r.mse_value)])

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        rows = [FrameResult(r["sequence_id"], r["t"], r["is"], r["mse"]) for r in d["per_frame"]]
        return cls(rows, d["horizon"], tuple(d["thresholds"]), d.get("meta", {}))

    def summary(self, label: str = "model") -> str:
        o = self.overall()
        lines = [
            f"{'Model':<28}{'IS':>18}{'MSE':>22}",
            f"{label:<28}{o['is_mean']:>10.3f} ± {o['is_se']:<5.3f}"
            f"{o['mse_mean']:>14.4f} ± {o['mse_se']:.4f}",
            "",
            f"{'t':>3}{'n':>6}{'IS':>12}{'±':>3}{'':>7}{'MSE':>10}",
        ]
        for r in self.per_horizon():
            lines.append(
                f"{r['t']:>3}{r['n']:>6}{r['is_mean']:>12.3f}   {r['is_se']:<7.3f}{r['mse_mean']:>10.4f}"
            )
        return "\n".join(lines)


def evaluate(predictions, ground_truth, thresholds=DEFAULT_THRESHOLDS, split: str = "test") -> EvalReport:
    """Compare predicted frames H..H+P of every window against the truth.

    ``predictions`` and ``ground_truth`` are manifests (or paths to them). A
    dataset manifest may stand in for predictions, in which case its own
    windows are scored (useful as a sanity check: truth vs truth gives 0).
    """
    pred = predictions if isinstance(predictions, DatasetManifest) else DatasetManifest.load(predictions)
    truth = ground_truth if isinstance(ground_truth, DatasetManifest) else DatasetManifest.load(ground_truth)
    if pred.grid != truth.grid:
        raise ShapeError(f"grid mismatch: {pred.grid} vs {truth.grid}")
    if pred.H != truth.H:
        raise DataError(f"history length mismatch: {pred.H} vs {truth.H}")

    truth_ids = truth.by_id()
    windows = pred.windows(split if pred.kind != "predictions" else None)
    missing = sorted({w.source for w in windows if w.source not in truth_ids})
    if missing:
        raise DataError(f"no ground truth for sequences: {', '.join(missing)}")
    if not windows:
        raise DataError("no windows to evaluate")

    H = pred.H
    horizon = pred.P
    cache: dict[Path, np.ndarray] = {}

    def frames_of(path: Path) -> np.ndarray:
        if path not in cache:
            cache[path] = read_sequence(path).stacked()
        return cache[path]

    rows = []
    for w in windows:
        p = frames_of(w.path)
        g = frames_of(truth.resolve(truth_ids[w.source]))
        if w.start + H + horizon > len(g):
            raise DataError(f"ground truth {w.source} too short for window {w.id}")
        if w.offset + H + horizon > len(p):
            raise DataError(f"prediction {w.id} has fewer than {horizon} predicted frames")
        for k in range(horizon):
            a = p[w.offset + H + k]
            b = g[w.start + H + k]
            ca = classify_array(a, *thresholds)
            cb = classify_array(b, *thresholds)
            d = a.astype(np.float64) - b.astype(np.float64)
            rows.append(FrameResult(w.id, k + 1, is_metric_classes(ca, cb), float(np.mean(d * d))))
    return EvalReport(rows, horizon, tuple(thresholds), meta={"n_windows": len(windows)})
