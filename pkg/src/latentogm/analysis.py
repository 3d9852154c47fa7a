"""Latent-space experiments: prior samples, style/content swaps, interpolation.

Every decode here runs on a batch of one so results are bitwise comparable
with single-frame reconstructions.
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError
from .models import LatentPair, ReprModel, load_repr_model, param_hash, prior_sample
from .ogm import CLASSES, DEFAULT_THRESHOLDS, OCCUPIED, Ogm, classify_array
from .util import write_json

logger = logging.getLogger(__name__)


def _model(ckpt) -> ReprModel:
    if isinstance(ckpt, ReprModel):
        return ckpt
    return load_repr_model(ckpt)[0]


def model_tag(model: ReprModel) -> str:
    """Short hash of the generator weights, used in artifact file names."""
    return param_hash(model.state_dict(), "generator.")[:12]


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Ogm) else np.asarray(x, dtype=np.float32)


@torch.no_grad()
def encode_mean(model: ReprModel, x) -> LatentPair:
    t = torch.from_numpy(np.array(_values(x), dtype=np.float32))[None, None]
    return model.encoder(t).means()


@torch.no_grad()
def decode(model: ReprModel, z: LatentPair) -> Ogm:
    out = model.generator(z)[0, 0].numpy()
    return Ogm(model.cfg.grid, np.clip(out, 0.0, 1.0))


def reconstruct_one(model: ReprModel, x) -> Ogm:
    return decode(model, encode_mean(model, x))


# --------------------------------------------------------------------------
# Statistics


def class_histogram(frames, thresholds=DEFAULT_THRESHOLDS) -> np.ndarray:
    """Fraction of cells in each class (free, occluded, occupied) over all frames."""
    counts = np.zeros(len(CLASSES), dtype=np.int64)
    for f in frames:
        counts += np.bincount(classify_array(_values(f), *thresholds).ravel(), minlength=len(CLASSES))
    return counts / max(int(counts.sum()), 1)


def occupied_cells(x, thresholds=DEFAULT_THRESHOLDS) -> int:
    return int((classify_array(_values(x), *thresholds) == OCCUPIED).sum())


def occupied_centroid(x, thresholds=DEFAULT_THRESHOLDS, rows: slice | None = None):
    """Mean (row, col) of occupied cells, optionally within a band of rows; None if there are none."""
    cls = classify_array(_values(x), *thresholds)
    mask = cls == OCCUPIED
    if rows is not None:
        band = np.zeros_like(mask)
        band[rows] = True
        mask &= band
    idx = np.argwhere(mask)
    if len(idx) == 0:
        return None
    return idx.mean(axis=0)


def manhattan(a, b) -> float:
    return float(np.abs(np.asarray(a) - np.asarray(b)).sum())


# --------------------------------------------------------------------------
# Operations


@torch.no_grad()
def sample_prior(generator_ckpt, n: int, seed: int) -> list[Ogm]:
    if n < 1:
        raise ConfigError("n must be >= 1")
    model = _model(generator_ckpt)
    g = torch.Generator().manual_seed(seed)
    z = prior_sample(model.cfg, n, g)
    return [
        decode(model, LatentPair(z.z_style[i : i + 1], z.z_content[i : i + 1])) for i in range(n)
    ]


def swap_latents(x_a, x_b, encoder_ckpt, generator_ckpt, which: str) -> Ogm:
    """Decode with ``which`` latent taken from x_b and the other from x_a."""
    if which not in ("style", "content"):
        raise ConfigError(f"which must be 'style' or 'content', got {which!r}")
    enc, gen = _model(encoder_ckpt), _model(generator_ckpt)
    return decode(gen, _mix(encode_mean(enc, x_a), encode_mean(enc, x_b), which))


def _mix(za: LatentPair, zb: LatentPair, which: str) -> LatentPair:
    if which == "style":
        return LatentPair(zb.z_style, za.z_content)
    return LatentPair(za.z_style, zb.z_content)


def interpolate(x_a, x_b, n_steps: int, encoder_ckpt, generator_ckpt) -> list[Ogm]:
    """Linear interpolation of both latents at alpha = k / (n_steps - 1)."""
    if n_steps < 2:
        raise ConfigError("n_steps must be >= 2")
    enc, gen = _model(encoder_ckpt), _model(generator_ckpt)
    za, zb = encode_mean(enc, x_a), encode_mean(enc, x_b)
    out = []
    for k in range(n_steps):
        if k == 0:
            z = za
        elif k == n_steps - 1:
            z = zb
        else:
            a = k / (n_steps - 1)
            z = LatentPair((1 - a) * za.z_style + a * zb.z_style, (1 - a) * za.z_content + a * zb.z_content)
        out.append(decode(gen, z))
    return out


# --------------------------------------------------------------------------
# Artifact writers


def save_montage(ogms, path, ncols: int = 8, titles=None) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(ogms)
    ncols = min(ncols, n)
    nrows = -(-n // ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(1.6 * ncols, 1.6 * nrows), squeeze=False)
    for i, ax in enumerate(axes.flat):
        ax.axis("off")
        if i < n:
            ax.imshow(_values(ogms[i]), cmap="gray_r", vmin=0.0, vmax=1.0, interpolation="nearest")
            if titles is not None:
                ax.set_title(titles[i], fontsize=7)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the PNG bytes deterministic
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)
    return path


def run_sample(ckpt, n: int, seed: int, out_dir, reference_frames=None) -> dict:
    model = _model(ckpt)
    samples = sample_prior(model, n, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"sample_seed{seed}_{model_tag(model)}"
    save_montage(samples, out / f"{stem}.png")
    np.save(out / f"{stem}.npy", np.stack([s.values for s in samples]))
    hist = class_histogram(samples)
    stats = {"n": n, "seed": seed, "class_fractions": hist.tolist()}
    if reference_frames is not None:
        ref = class_histogram(reference_frames)
        stats["reference_class_fractions"] = ref.tolist()
        stats["max_abs_difference"] = float(np.abs(hist - ref).max())
    write_json(out / f"{stem}.json", stats)
    return stats


def run_swap(ckpt, frames: np.ndarray, n_pairs: int, seed: int, out_dir, partner: str = "data") -> dict:
    """Swap statistics over random pairs: centroid pull and count changes.

    ``partner="data"`` takes the swapped-in latent from another encoded frame;
    ``partner="prior"`` draws it from N(0, I) and uses its decoding as frame b.
    """
    if partner not in ("data", "prior"):
        raise ConfigError(f"partner must be 'data' or 'prior', got {partner!r}")
    model = _model(ckpt)
    rng = np.random.default_rng(seed)
    g = torch.Generator().manual_seed(seed)
    closer, style_change, content_change, used = 0, [], [], 0
    shown = []
    for _ in range(n_pairs):
        i, j = rng.choice(len(frames), size=2, replace=False)
        xa = frames[i]
        za = encode_mean(model, xa)
        if partner == "data":
            xb = frames[j]
            zb = encode_mean(model, xb)
        else:
            zb = prior_sample(model.cfg, 1, g)
            xb = decode(model, zb).values
        rec_a = decode(model, za)
        s = decode(model, _mix(za, zb, "style"))
        c = decode(model, _mix(za, zb, "content"))
        n_a = occupied_cells(rec_a)
        style_change.append(abs(occupied_cells(s) - n_a))
        content_change.append(abs(occupied_cells(c) - n_a))
        ca, cb, cc = occupied_centroid(xa), occupied_centroid(xb), occupied_centroid(c)
        if ca is not None and cb is not None and cc is not None:
            used += 1
            closer += manhattan(cc, cb) < manhattan(cc, ca)
        if len(shown) < 6:
            shown.append([Ogm(model.cfg.grid, xa), Ogm(model.cfg.grid, xb), s, c])
    out = Path(out_dir)
    stem = f"swap_{partner}_seed{seed}_{model_tag(model)}"
    save_montage([o for row in shown for o in row], out / f"{stem}.png", ncols=4,
                 titles=["a", "b", "style<-b", "content<-b"] * len(shown))
    stats = {
        "n_pairs": n_pairs,
        "seed": seed,
        "partner": partner,
        "content_centroid_closer_to_b": closer / max(used, 1),
        "pairs_with_centroids": used,
        "mean_abs_count_change_style": float(np.mean(style_change)),
        "mean_abs_count_change_content": float(np.mean(content_change)),
    }
    write_json(out / f"{stem}.json", stats)
    return stats


def run_interpolate(ckpt, x_a, x_b, n_steps: int, out_dir, rows: slice | None = None, tag: str = "") -> dict:
    model = _model(ckpt)
    frames = interpolate(x_a, x_b, n_steps, model, model)
    cents = [occupied_centroid(f, rows=rows) for f in frames]
    out = Path(out_dir)
    stem = f"interp{tag}_{model_tag(model)}"
    save_montage(frames, out / f"{stem}.png", ncols=n_steps,
                 titles=[f"{k / (n_steps - 1):.2f}" for k in range(n_steps)])
    stats = {
        "n_steps": n_steps,
        "centroids": [None if c is None else c.tolist() for c in cents],
        "occupied_cells": [occupied_cells(f) for f in frames],
    }
    write_json(out / f"{stem}.json", stats)
    return stats


def is_monotone(values) -> bool:
    """True if the sequence is non-decreasing or non-increasing."""
    v = np.asarray(values, dtype=float)
    d = np.diff(v)
    return bool((d >= 0).all() or (d <= 0).all())
