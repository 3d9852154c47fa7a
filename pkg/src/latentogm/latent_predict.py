"""Stage 2: sequence prediction in the frozen latent space.

LATS layout (little-endian)::

    b"LATS" | u16 version (=1) | u32 S, C, h, w, T, H, P
    | T * (S + C*h*w) f32 latents (style first, then content C-major)
    | u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import csv
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    BadMagicError,
    BadVersionError,
    ChecksumError,
    ConfigError,
    DataError,
    DecodeError,
    NumericalAbort,
    ShapeError,
    TruncatedError,
)
from .manifest import DatasetManifest, SequenceEntry
from .models import (
    LatentPair,
    ReprModel,
    load_checkpoint,
    load_repr_model,
    param_hash,
    reparameterize,
    save_checkpoint,
)
from .ogm import Ogm, ScenarioSequence, read_sequence, write_sequence
from .util import config_hash

logger = logging.getLogger(__name__)

LATS_MAGIC = b"LATS"
LATS_VERSION = 1
_LATS_HEADER = struct.Struct("<4sH7I")


@dataclass(frozen=True, eq=False)
class LatentSequence:
    sequence_id: str
    latents: np.ndarray  # (T, S + C*h*w) float32
    style_dim: int
    content_shape: tuple[int, int, int]
    H: int
    P: int

    def __post_init__(self):
        z = np.ascontiguousarray(self.latents, dtype=np.float32)
        d = self.style_dim + int(np.prod(self.content_shape))
        if z.ndim != 2 or z.shape[1] != d:
            raise ShapeError(f"latents must be (T, {d}), got {z.shape}")
        if len(z) < self.H + self.P:
            raise ConfigError(f"{len(z)} latents < H+P={self.H + self.P}")
        object.__setattr__(self, "latents", z)
        object.__setattr__(self, "content_shape", tuple(self.content_shape))

    def __len__(self):
        return len(self.latents)

    def __eq__(self, other):
        if not isinstance(other, LatentSequence):
            return NotImplemented
        return (
            (self.style_dim, self.content_shape, self.H, self.P)
            == (other.style_dim, other.content_shape, other.H, other.P)
            and self.latents.tobytes() == other.latents.tobytes()
        )

    def pair(self, t: int) -> LatentPair:
        z = torch.from_numpy(self.latents[t : t + 1])
        return LatentPair.from_flat(z, self.style_dim, self.content_shape)


def encode_latents(seq: LatentSequence) -> bytes:
    C, h, w = seq.content_shape
    header = _LATS_HEADER.pack(LATS_MAGIC, LATS_VERSION, seq.style_dim, C, h, w, len(seq), seq.H, seq.P)
    body = header + seq.latents.astype("<f4", copy=False).tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_latents(data: bytes, sequence_id: str = "") -> LatentSequence:
    if len(data) < 4 or data[:4] != LATS_MAGIC:
        raise BadMagicError("not a LATS file (bad magic)")
    if len(data) < _LATS_HEADER.size:
        raise TruncatedError("LATS header truncated")
    _, version, S, C, h, w, T, H, P = _LATS_HEADER.unpack_from(data)
    if version != LATS_VERSION:
        raise BadVersionError(f"unsupported LATS version {version}")
    D = S + C * h * w
    expected = _LATS_HEADER.size + T * D * 4 + 4
    if len(data) < expected:
        raise TruncatedError(f"LATS file truncated: {len(data)} < {expected} bytes")
    if len(data) > expected:
        raise DecodeError(f"LATS file has {len(data) - expected} trailing bytes")
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[: expected - 4]) != crc:
        raise ChecksumError("LATS checksum mismatch")
    z = np.frombuffer(data, dtype="<f4", count=T * D, offset=_LATS_HEADER.size).reshape(T, D)
    return LatentSequence(sequence_id, z, S, (C, h, w), H, P)


def write_latents(seq: LatentSequence, path) -> None:
    Path(path).write_bytes(encode_latents(seq))


def read_latents(path, sequence_id: str = "") -> LatentSequence:
    path = Path(path)
    return decode_latents(path.read_bytes(), sequence_id or path.stem)


# --------------------------------------------------------------------------
# Dataset encoding


def _as_repr_model(ckpt) -> tuple[ReprModel, dict]:
    if isinstance(ckpt, ReprModel):
        state = ckpt.state_dict()
        header = {
            "config": ckpt.cfg.to_dict(),
            "config_hash": ckpt.cfg.hash(),
            "param_hashes": {p: param_hash(state, p + ".") for p in ("encoder", "generator")},
        }
        return ckpt, header
    return load_repr_model(ckpt)


@torch.no_grad()
def encode_frames(model: ReprModel, frames: np.ndarray, batch_size: int = 128,
                  rng: torch.Generator | None = None) -> np.ndarray:
    """Posterior means (or samples, given ``rng``) for (N, H, W) frames, flattened to (N, S + C*h*w)."""
    out = []
    for i in range(0, len(frames), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(frames[i : i + batch_size])).unsqueeze(1)
        p = model.encoder(x)
        z = p.means() if rng is None else reparameterize(p, rng)
        out.append(z.flat().numpy())
    return np.concatenate(out).astype(np.float32)


def encode_dataset(dataset, encoder_ckpt, out_dir, sample_seed: int | None = None) -> DatasetManifest:
    """Encode every frame of every sequence with the frozen encoder.

    Latents are posterior means unless ``sample_seed`` is given, in which
    case they are reparameterised samples drawn from that seed.
    """
    manifest = dataset if isinstance(dataset, DatasetManifest) else DatasetManifest.load(dataset)
    model, header = _as_repr_model(encoder_ckpt)
    cfg = model.cfg
    if cfg.grid != manifest.grid:
        raise DataError(f"encoder grid {cfg.grid} does not match dataset grid {manifest.grid}")
    out = Path(out_dir)
    (out / "latents").mkdir(parents=True, exist_ok=True)
    model.eval()
    rng = None if sample_seed is None else torch.Generator().manual_seed(sample_seed)
    entries = []
    for e in manifest.sequences:
        frames = read_sequence(manifest.resolve(e)).stacked()
        z = encode_frames(model, frames, rng=rng)
        seq = LatentSequence(e.id, z, cfg.style_dim, cfg.content_shape, manifest.H, manifest.P)
        rel = f"latents/{e.id}.lats"
        write_latents(seq, out / rel)
        entries.append(SequenceEntry(e.id, rel, e.split, len(seq)))
    lm = DatasetManifest(
        root=out,
        kind="latents",
        grid=manifest.grid,
        H=manifest.H,
        P=manifest.P,
        window_stride=manifest.window_stride,
        sequences=entries,
        meta={
            "style_dim": cfg.style_dim,
            "content_shape": list(cfg.content_shape),
            "repr_config_hash": header["config_hash"],
            "encoder_param_hash": header["param_hashes"]["encoder"],
            "dataset_config_hash": manifest.meta.get("config_hash"),
            "latent": "mean" if sample_seed is None else f"sample:{sample_seed}",
        },
    )
    lm.save()
    return lm


# --------------------------------------------------------------------------
# Predictor


@dataclass
class PredictorConfig:
    hidden: int = 256
    style_features: int = 64
    content_conv: int = 16
    H: int = 5
    P: int = 15
    lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9
    batch_size: int = 512
    seed: int = 0
    teacher_forcing: float = 0.5
    max_epochs: int = 300
    patience: int = 20
    window_stride: int = 1
    # regularisers, all off by default
    dropout: float = 0.0
    weight_decay: float = 0.0
    input_noise: float = 0.0  # std of Gaussian noise on normalised training inputs

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.H < 1 or self.P < 1:
            raise ConfigError("H and P must be >= 1")
        if self.hidden < 2 or self.hidden % 2:
            raise ConfigError("hidden size must be an even number >= 2")
        if not 0.0 <= self.teacher_forcing <= 1.0:
            raise ConfigError("teacher_forcing must lie in [0, 1]")
        if self.batch_size < 1 or self.max_epochs < 1 or self.window_stride < 1:
            raise ConfigError("batch_size, max_epochs and window_stride must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.weight_decay < 0 or self.input_noise < 0:
            raise ConfigError("weight_decay and input_noise must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PredictorConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown PredictorConfig keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def hash(self) -> str:
        return config_hash(self.to_dict())


class LatentPredictor(nn.Module):
    """LSTM over per-step features from a style MLP head and a content conv head.

    The LSTM output is split in two halves feeding the style and content
    output heads, which predict the change from the current latent.
    Latents are standardised with training-set statistics held as buffers.
    """

    def __init__(self, cfg: PredictorConfig, style_dim: int, content_shape):
        super().__init__()
        self.cfg = cfg
        self.style_dim = style_dim
        self.content_shape = tuple(content_shape)
        C, h, w = self.content_shape
        k = cfg.content_conv
        self.style_in = nn.Linear(style_dim, cfg.style_features)
        self.content_in = nn.Conv2d(C, k, 3, padding=1)
        self.lstm = nn.LSTM(cfg.style_features + k * h * w, cfg.hidden, batch_first=True)
        half = cfg.hidden // 2
        self.style_out = nn.Linear(half, style_dim)
        self.content_out = nn.Linear(half, k * h * w)
        self.content_deconv = nn.ConvTranspose2d(k, C, 3, padding=1)
        self.drop = nn.Dropout(cfg.dropout)
        D = style_dim + C * h * w
        self.register_buffer("z_mean", torch.zeros(D))
        self.register_buffer("z_std", torch.ones(D))

    @property
    def latent_size(self) -> int:
        return self.style_dim + int(np.prod(self.content_shape))

    def set_normalisation(self, z: np.ndarray) -> None:
        z = torch.as_tensor(z, dtype=torch.float32).reshape(-1, self.latent_size)
        self.z_mean.copy_(z.mean(0))
        self.z_std.copy_(z.std(0).clamp_min(1e-3))

    def _features(self, zn: torch.Tensor) -> torch.Tensor:
        # zn: (B, D) normalised latents
        S = self.style_dim
        fs = F.leaky_relu(self.style_in(zn[:, :S]), 0.2)
        fc = F.leaky_relu(self.content_in(zn[:, S:].reshape(-1, *self.content_shape)), 0.2)
        return torch.cat([fs, fc.flatten(1)], dim=1)

    def _delta(self, out: torch.Tensor) -> torch.Tensor:
        a, b = out.chunk(2, dim=-1)
        ds = self.style_out(a)
        k = self.cfg.content_conv
        _, h, w = self.content_shape
        dc = self.content_deconv(F.leaky_relu(self.content_out(b), 0.2).reshape(-1, k, h, w))
        return torch.cat([ds, dc.flatten(1)], dim=1)

    def step(self, z: torch.Tensor, state=None):
        """Consume latent z_t (B, D); return the prediction of z_{t+1} and new state."""
        zn = (z - self.z_mean) / self.z_std
        x = zn
        if self.training and self.cfg.input_noise > 0:
            x = zn + self.cfg.input_noise * torch.randn_like(zn)
        out, state = self.lstm(self.drop(self._features(x)).unsqueeze(1), state)
        zn_next = zn + self._delta(self.drop(out[:, 0]))
        return zn_next * self.z_std + self.z_mean, state

    def forward(self, prefix: torch.Tensor, steps: int, targets: torch.Tensor | None = None,
                teacher_forcing: float = 0.0, rng: torch.Generator | None = None) -> torch.Tensor:
        """Autoregressive prediction of ``steps`` latents after ``prefix`` (B, H, D).

        With ``targets`` (B, steps, D) and ``teacher_forcing`` > 0 the next
        input is the ground-truth latent with that probability (one coin per
        step, shared across the batch).
        """
        state = None
        pred = None
        for t in range(prefix.shape[1]):
            pred, state = self.step(prefix[:, t], state)
        outs = [pred]
        for k in range(1, steps):
            inp = pred
            if targets is not None and teacher_forcing > 0.0:
                coin = torch.rand((), generator=rng).item()
                if coin < teacher_forcing:
                    inp = targets[:, k - 1]
            pred, state = self.step(inp, state)
            outs.append(pred)
        return torch.stack(outs, dim=1)


def _prefix_tensor(model: LatentPredictor, z_prefix) -> torch.Tensor:
    if isinstance(z_prefix, LatentSequence):
        z_prefix = z_prefix.latents[: z_prefix.H]
    if isinstance(z_prefix, (list, tuple)):
        z_prefix = torch.cat([p.flat() if isinstance(p, LatentPair) else torch.as_tensor(p).reshape(1, -1)
                              for p in z_prefix]).unsqueeze(0)
    z = torch.as_tensor(np.asarray(z_prefix, dtype=np.float32) if not torch.is_tensor(z_prefix) else z_prefix)
    if z.ndim == 2:
        z = z.unsqueeze(0)
    if z.shape[-1] != model.latent_size:
        raise ShapeError(f"latent size {z.shape[-1]} != {model.latent_size}")
    return z.float()


@torch.no_grad()
def rollout(model: LatentPredictor, z_prefix, T: int) -> torch.Tensor:
    """Autoregressive continuation for ``T`` steps; returns (B, T, D)."""
    if T < 1:
        raise ConfigError("rollout length must be >= 1")
    model.eval()
    return model(_prefix_tensor(model, z_prefix), T)


def predict(model: LatentPredictor, z_prefix) -> torch.Tensor:
    """P-step prediction from exactly H observed latents; returns (B, P, D)."""
    z = _prefix_tensor(model, z_prefix)
    if z.shape[1] != model.cfg.H:
        raise ShapeError(f"expected {model.cfg.H} observed latents, got {z.shape[1]}")
    return rollout(model, z, model.cfg.P)


def prediction_loss(z_hat: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Gaussian NLL with fixed unit variance up to constants: MSE over all entries."""
    if z_hat.shape != z.shape:
        raise ShapeError(f"prediction {tuple(z_hat.shape)} vs target {tuple(z.shape)}")
    return F.mse_loss(z_hat, z)


def constant_latent_baseline(prefix: torch.Tensor, steps: int) -> torch.Tensor:
    """Repeat the last observed latent: z_hat_t := z_{H-1}."""
    return prefix[:, -1:].expand(-1, steps, -1)


def latent_windows(seqs: list[LatentSequence], H: int, P: int, stride: int) -> torch.Tensor:
    out = []
    for s in seqs:
        for start in range(0, len(s) - H - P + 1, stride):
            out.append(s.latents[start : start + H + P])
    if not out:
        return torch.zeros((0, H + P, 0))
    return torch.from_numpy(np.stack(out))


@torch.no_grad()
def _eval_loss(model: LatentPredictor, windows: torch.Tensor, H: int, P: int) -> float:
    model.eval()
    losses = []
    for i in range(0, len(windows), 1024):
        w = windows[i : i + 1024]
        losses.append(prediction_loss(model(w[:, :H], P), w[:, H:]).item() * len(w))
    return sum(losses) / len(windows)


@dataclass
class PredictorResult:
    checkpoint: Path
    log_path: Path
    model: LatentPredictor
    best_val: float
    baseline_val: float
    history: list[dict]


def load_latent_dataset(latents) -> tuple[DatasetManifest, dict[str, list[LatentSequence]]]:
    lm = latents if isinstance(latents, DatasetManifest) else DatasetManifest.load(latents)
    if lm.kind != "latents":
        raise ConfigError(f"expected a latent dataset manifest, got kind {lm.kind!r}")
    by_split: dict[str, list[LatentSequence]] = {}
    for e in lm.sequences:
        by_split.setdefault(e.split, []).append(read_latents(lm.resolve(e), e.id))
    return lm, by_split


def train_predictor(latents, config: PredictorConfig, out_path, log_path=None) -> PredictorResult:
    """Train on train-split windows with Adam; early-stop on validation loss."""
    lm, by_split = load_latent_dataset(latents)
    H, P = config.H, config.P
    train_w = latent_windows(by_split.get("train", []), H, P, config.window_stride)
    if len(train_w) == 0:
        raise ConfigError("latent dataset has no training windows")
    val_w = latent_windows(by_split.get("val", []), H, P, 1)
    if len(val_w) == 0:
        logger.warning("no validation windows; early stopping uses training loss")
    S = int(lm.meta["style_dim"])
    content_shape = tuple(lm.meta["content_shape"])

    out_path = Path(out_path)
    log_path = Path(log_path) if log_path else out_path.with_suffix(".log.csv")
    torch.manual_seed(config.seed)
    model = LatentPredictor(config, S, content_shape)
    model.set_normalisation(np.concatenate([s.latents for s in by_split["train"]]))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.adam_betas, eps=config.adam_eps,
                           weight_decay=config.weight_decay)
    rng = torch.Generator().manual_seed(config.seed)

    eval_w = val_w if len(val_w) else train_w
    baseline = prediction_loss(constant_latent_baseline(eval_w[:, :H], P), eval_w[:, H:]).item()
    best, best_epoch, bad = math.inf, 0, 0
    history = []
    extra = {
        "latent_size": model.latent_size,
        "style_dim": S,
        "content_shape": list(content_shape),
        "repr_config_hash": lm.meta.get("repr_config_hash"),
        "encoder_param_hash": lm.meta.get("encoder_param_hash"),
    }
    # a last-good checkpoint exists even if the first epoch diverges
    save_checkpoint(out_path, "predictor", config.to_dict(), model.state_dict(),
                    epoch=0, val_loss=None, baseline_val_loss=baseline, **extra)
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    with open(log_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["epoch", "train_loss", "val_loss", "baseline_val_loss"])
        writer.writeheader()
        for epoch in range(1, config.max_epochs + 1):
            model.train()
            perm = torch.randperm(len(train_w), generator=rng)
            total, count = 0.0, 0
            for i in range(0, len(perm), config.batch_size):
                w = train_w[perm[i : i + config.batch_size]]
                z_hat = model(w[:, :H], P, targets=w[:, H:], teacher_forcing=config.teacher_forcing, rng=rng)
                loss = prediction_loss(z_hat, w[:, H:])
                if not torch.isfinite(loss):
                    raise NumericalAbort(f"non-finite prediction loss at epoch {epoch}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += loss.item() * len(w)
                count += len(w)
            val = _eval_loss(model, eval_w, H, P)
            row = {"epoch": epoch, "train_loss": total / count, "val_loss": val, "baseline_val_loss": baseline}
            history.append(row)
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            if val < best:
                best, best_epoch, bad = val, epoch, 0
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                save_checkpoint(out_path, "predictor", config.to_dict(), best_state,
                                epoch=epoch, val_loss=val, baseline_val_loss=baseline, **extra)
            else:
                bad += 1
                if bad >= config.patience:
                    logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                    break
            if epoch % 10 == 0:
                logger.info("epoch %d train %.4f val %.4f (baseline %.4f)", epoch, row["train_loss"], val, baseline)
    model.load_state_dict(best_state)
    model.eval()
    return PredictorResult(out_path, log_path, model, best, baseline, history)


def load_predictor(path) -> tuple[LatentPredictor, dict]:
    header, state = load_checkpoint(path)
    if header.get("kind") != "predictor":
        raise ConfigError(f"{path} is not a predictor checkpoint")
    cfg = PredictorConfig.from_dict(header["config"])
    model = LatentPredictor(cfg, header["style_dim"], header["content_shape"])
    model.load_state_dict(state)
    model.eval()
    return model, header


# --------------------------------------------------------------------------
# OGM prediction


def _write_prediction(out: Path, w, H: int, observed: np.ndarray, predicted: np.ndarray,
                      poses: np.ndarray, spec) -> SequenceEntry:
    frames = [Ogm(spec, f) for f in observed] + [Ogm(spec, np.clip(f, 0.0, 1.0)) for f in predicted]
    # future poses are unknown to the predictor; repeat the last observed one
    all_poses = np.concatenate([poses, np.repeat(poses[-1:], len(predicted), axis=0)])
    seq = ScenarioSequence(spec, tuple(frames), all_poses, H, len(predicted), w.id)
    rel = f"pred/{w.source}_{w.start:04d}.ogms"
    write_sequence(seq, out / rel)
    return SequenceEntry(w.id, rel, w.split, len(frames), source=w.source, start=w.start)


def _prediction_manifest(out: Path, truth: DatasetManifest, T: int, entries, meta) -> DatasetManifest:
    pm = DatasetManifest(out, "predictions", truth.grid, truth.H, T, 1, entries, meta)
    pm.save()
    return pm


def predict_ogms(encoder_ckpt, generator_ckpt, predictor_ckpt, dataset, out_dir,
                 T: int | None = None, split: str = "test") -> DatasetManifest:
    """Encode observed frames, roll the predictor out and decode; one OGMS file per window."""
    manifest = dataset if isinstance(dataset, DatasetManifest) else DatasetManifest.load(dataset)
    enc_model, enc_h = _as_repr_model(encoder_ckpt)
    gen_model, gen_h = _as_repr_model(generator_ckpt)
    if isinstance(predictor_ckpt, LatentPredictor):
        pred_model, pred_h = predictor_ckpt, {
            "repr_config_hash": enc_h["config_hash"],
            "encoder_param_hash": enc_h["param_hashes"]["encoder"],
        }
    else:
        pred_model, pred_h = load_predictor(predictor_ckpt)
    if enc_h["config_hash"] != gen_h["config_hash"]:
        raise DataError("encoder and generator checkpoints have different model configs")
    if pred_h.get("repr_config_hash") != enc_h["config_hash"]:
        raise DataError("predictor was trained on latents from a different model config")
    if pred_h.get("encoder_param_hash") != enc_h["param_hashes"]["encoder"]:
        raise DataError("predictor was trained on latents from a different encoder")
    if enc_model.cfg.grid != manifest.grid:
        raise DataError("model grid does not match dataset grid")
    H = manifest.H
    if pred_model.cfg.H != H:
        raise DataError(f"predictor history H={pred_model.cfg.H} != dataset H={H}")
    T = pred_model.cfg.P if T is None else int(T)

    out = Path(out_dir)
    (out / "pred").mkdir(parents=True, exist_ok=True)
    entries = []
    cache = {}
    for w in manifest.windows(split, horizon=T):
        if w.path not in cache:
            cache[w.path] = read_sequence(w.path)
        seq = cache[w.path]
        frames = seq.stacked()
        observed = frames[w.offset : w.offset + H]
        z_obs = torch.from_numpy(encode_frames(enc_model, observed)).unsqueeze(0)
        z_hat = rollout(pred_model, z_obs, T)[0]
        with torch.no_grad():
            pair = LatentPair.from_flat(z_hat, gen_model.cfg.style_dim, gen_model.cfg.content_shape)
            decoded = gen_model.generator(pair).squeeze(1).numpy()
        poses = seq.ego_poses[w.offset : w.offset + H]
        entries.append(_write_prediction(out, w, H, observed, decoded, poses, manifest.grid))
    meta = {
        "method": "latent",
        "repr_config_hash": enc_h["config_hash"],
        "encoder_param_hash": enc_h["param_hashes"]["encoder"],
        "generator_param_hash": gen_h["param_hashes"]["generator"],
        "rollout": T,
    }
    return _prediction_manifest(out, manifest, T, entries, meta)


def copy_last_predictions(dataset, out_dir, T: int | None = None, split: str = "test") -> DatasetManifest:
    """Baseline: every future frame equals the last observed frame."""
    manifest = dataset if isinstance(dataset, DatasetManifest) else DatasetManifest.load(dataset)
    H = manifest.H
    T = manifest.P if T is None else int(T)
    out = Path(out_dir)
    (out / "pred").mkdir(parents=True, exist_ok=True)
    entries = []
    for w in manifest.windows(split, horizon=T):
        seq = read_sequence(w.path)
        frames = seq.stacked()
        observed = frames[w.offset : w.offset + H]
        predicted = np.repeat(observed[-1:], T, axis=0)
        poses = seq.ego_poses[w.offset : w.offset + H]
        entries.append(_write_prediction(out, w, H, observed, predicted, poses, manifest.grid))
    return _prediction_manifest(out, manifest, T, entries, {"method": "copy-last", "rollout": T})


def encoder_generator_hashes(ckpt) -> dict[str, str]:
    """Fresh parameter hashes of a stage-1 checkpoint or in-memory model."""
    if isinstance(ckpt, ReprModel):
        state = ckpt.state_dict()
    else:
        _, state = load_checkpoint(ckpt)
    return {p: param_hash(state, p + ".") for p in ("encoder", "generator")}


def max_latent_norm(seqs: list[LatentSequence]) -> float:
    return float(max(np.linalg.norm(s.latents, axis=1).max() for s in seqs))
