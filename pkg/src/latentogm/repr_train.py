"""Stage 1: unsupervised representation learning (beta-VAE or VAE-GAN).

Objective per batch::

    vae   = recon(x, G(z)) + beta * KL(q(z|x) || N(0, I)),   z ~ q(z|x)
    total = vae + g_loss                                     (VAE-GAN only)

``recon`` is a negative log-likelihood surrogate (BCE by default), the KL is
summed over all style and content latents and averaged over the batch. The
discriminator is trained with the standard non-saturating real/fake loss.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError, NumericalAbort
from .manifest import DatasetManifest
from .metrics import is_metric_classes
from .models import (
    ModelConfig,
    PosteriorParams,
    ReprModel,
    reparameterize,
    save_repr_model,
)
from .ogm import DEFAULT_THRESHOLDS, classify_array, read_sequence
from .util import config_hash

logger = logging.getLogger(__name__)

RECON_MODES = ("BCE", "MSE", "RANDOM_FEATURE")
TRAIN_MODES = ("VAE", "VAE-GAN")
RANDOM_FEATURE_SEED = 20240613


def kl_divergence(p: PosteriorParams) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over latents, mean over batch."""
    def term(mu, logvar):
        return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).flatten(1).sum(dim=1)

    return (term(p.mu_style, p.logvar_style) + term(p.mu_content, p.logvar_content)).mean()


class RandomFeatures(nn.Module):
    """Frozen, randomly initialised 3-layer conv net used as a perceptual-loss stand-in.

    Weights come from ``torch.Generator().manual_seed(RANDOM_FEATURE_SEED)``
    with Kaiming-normal scaling, so every process builds the same extractor.
    """

    def __init__(self, channels=(8, 16, 32), seed: int = RANDOM_FEATURE_SEED, dtype=torch.float32):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.weights = []
        c_in = 1
        for i, c in enumerate(channels):
            w = torch.randn((c, c_in, 3, 3), generator=g, dtype=torch.float64)
            w *= math.sqrt(2.0 / (c_in * 9))
            self.register_buffer(f"w{i}", w.to(dtype))
            c_in = c

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for i, name in enumerate(n for n, _ in self.named_buffers()):
            w = getattr(self, name).to(x.dtype)
            h = F.leaky_relu(F.conv2d(h, w, stride=1 if i == 0 else 2, padding=1), 0.2)
            feats.append(h)
        return feats


_random_features: RandomFeatures | None = None


def random_features() -> RandomFeatures:
    global _random_features
    if _random_features is None:
        _random_features = RandomFeatures()
        _random_features.requires_grad_(False)
    return _random_features


def recon_loss(x: torch.Tensor, x_hat: torch.Tensor, mode: str = "BCE") -> torch.Tensor:
    if x.shape != x_hat.shape:
        raise ConfigError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if mode == "BCE":
        return F.binary_cross_entropy(x_hat, x)
    if mode == "MSE":
        return F.mse_loss(x_hat, x)
    if mode == "RANDOM_FEATURE":
        fx, fh = random_features()(x), random_features()(x_hat)
        return sum(F.mse_loss(b, a) for a, b in zip(fx, fh)) / len(fx)
    raise ConfigError(f"unknown reconstruction loss {mode!r}; expected one of {RECON_MODES}")


def vae_loss(x: torch.Tensor, model: ReprModel, beta: float, mode: str = "BCE",
             rng: torch.Generator | None = None) -> dict[str, torch.Tensor]:
    """Negative ELBO terms. Returns total, recon, kl and the reconstruction."""
    post = model.encoder(x)
    z = reparameterize(post, rng)
    x_hat = model.generator(z)
    rec = recon_loss(x, x_hat, mode)
    kl = kl_divergence(post)
    return {"total": rec + beta * kl, "recon": rec, "kl": kl, "x_hat": x_hat}


def generator_adversarial_loss(fake_logits: list[torch.Tensor]) -> torch.Tensor:
    """-1/2 E[log D(G(z))], averaged over patches and discriminator scales."""
    return sum(-0.5 * F.logsigmoid(l).mean() for l in fake_logits) / len(fake_logits)


def discriminator_loss(real_logits: list[torch.Tensor], fake_logits: list[torch.Tensor]) -> torch.Tensor:
    total = 0.0
    for r, f in zip(real_logits, fake_logits):
        total = total - F.logsigmoid(r).mean() - F.logsigmoid(-f).mean()
    return total / len(real_logits)


def gan_losses(x_real: torch.Tensor, x_fake: torch.Tensor, D) -> tuple[torch.Tensor, torch.Tensor]:
    """(g_loss, d_loss). ``d_loss`` sees ``x_fake`` detached."""
    g = generator_adversarial_loss(D(x_fake))
    d = discriminator_loss(D(x_real), D(x_fake.detach()))
    return g, d


# --------------------------------------------------------------------------
# Training


@dataclass
class ReprTrainConfig:
    mode: str = "VAE-GAN"
    beta: float = 1.0
    recon_loss: str = "BCE"
    lr: float = 1e-3
    d_lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.5, 0.99)
    batch_size: int = 16
    steps: int = 500
    seed: int = 0
    checkpoint_every: int = 250
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.adam_betas = tuple(self.adam_betas)
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.recon_loss not in RECON_MODES:
            raise ConfigError(f"recon_loss must be one of {RECON_MODES}, got {self.recon_loss!r}")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.batch_size < 1 or self.steps < 0 or self.checkpoint_every < 1:
            raise ConfigError("batch_size and checkpoint_every must be >= 1, steps >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ReprTrainConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ReprTrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def log_columns(mode: str) -> list[str]:
    cols = ["step", "total", "recon", "kl"]
    if mode == "VAE-GAN":
        cols += ["vae", "g_loss", "d_loss"]
    return cols


def load_frames(manifest: DatasetManifest, split) -> np.ndarray:
    """All frames of the selected split(s) as float32 (N, H, W)."""
    entries = manifest.select(split)
    if not entries:
        raise DataError(f"no sequences in split {split!r}")
    return np.concatenate([read_sequence(manifest.resolve(e)).stacked() for e in entries])


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    history: list[dict]
    model: ReprModel


def train_representation(
    dataset,
    config: ReprTrainConfig,
    out_path,
    log_path=None,
    model: ReprModel | None = None,
) -> TrainResult:
    """Train encoder/generator (and discriminator) on the dataset's train split.

    Checkpoints go to ``out_path`` every ``checkpoint_every`` steps and at the
    end; the CSV log has one row per step. A non-finite loss raises
    ``NumericalAbort`` and leaves the previous checkpoint untouched.
    """
    manifest = dataset if isinstance(dataset, DatasetManifest) else DatasetManifest.load(dataset)
    if manifest.grid != config.model.grid:
        raise ConfigError(f"dataset grid {manifest.grid} does not match model grid {config.model.grid}")
    out_path = Path(out_path)
    log_path = Path(log_path) if log_path else out_path.with_suffix(".log.csv")
    frames = torch.from_numpy(load_frames(manifest, "train")).unsqueeze(1)

    torch.manual_seed(config.seed)
    gan = config.mode == "VAE-GAN"
    if model is None:
        model = ReprModel(config.model, with_discriminator=gan)
    model.train()
    eg_params = [*model.encoder.parameters(), *model.generator.parameters()]
    opt = torch.optim.Adam(eg_params, lr=config.lr, betas=config.adam_betas)
    d_opt = None
    if gan:
        d_opt = torch.optim.Adam(model.discriminator.parameters(), lr=config.d_lr, betas=config.adam_betas)
    rng = torch.Generator().manual_seed(config.seed)

    extra = {
        "train_config": config.to_dict(),
        "dataset_config_hash": manifest.meta.get("config_hash"),
    }
    save_repr_model(out_path, model, step=0, **extra)
    cols = log_columns(config.mode)
    history: list[dict] = []
    with open(log_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=cols)
        writer.writeheader()
        for step in range(1, config.steps + 1):
            idx = torch.randint(len(frames), (config.batch_size,), generator=rng)
            x = frames[idx]
            out = vae_loss(x, model, config.beta, config.recon_loss, rng)
            row = {"step": step, "recon": out["recon"].item(), "kl": out["kl"].item()}
            loss = out["total"]
            if gan:
                model.discriminator.requires_grad_(False)
                g_loss = generator_adversarial_loss(model.discriminator(out["x_hat"]))
                model.discriminator.requires_grad_(True)
                loss = out["total"] + g_loss
                row["vae"] = out["total"].item()
                row["g_loss"] = g_loss.item()
            row["total"] = loss.item()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if gan:
                d_loss = discriminator_loss(model.discriminator(x), model.discriminator(out["x_hat"].detach()))
                row["d_loss"] = d_loss.item()
                d_opt.zero_grad(set_to_none=True)
                d_loss.backward()
            if not all(math.isfinite(v) for k, v in row.items() if k != "step"):
                raise NumericalAbort(f"non-finite loss at step {step}: {row}")
            if row["kl"] < -1e-5:  # closed-form KL is non-negative up to rounding
                raise NumericalAbort(f"negative KL {row['kl']} at step {step}")
            opt.step()
            if gan:
                d_opt.step()
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
            history.append(row)
            if step % config.checkpoint_every == 0 or step == config.steps:
                save_repr_model(out_path, model, step=step, **extra)
            if step % 50 == 0:
                logger.info("step %d recon %.4f kl %.2f", step, row["recon"], row["kl"])
    model.eval()
    return TrainResult(out_path, log_path, history, model)


def read_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in csv.DictReader(f)]


@torch.no_grad()
def reconstruct(model: ReprModel, frames: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Decode posterior means; frames (N, H, W) -> (N, H, W)."""
    out = []
    for i in range(0, len(frames), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(frames[i : i + batch_size])).unsqueeze(1)
        out.append(model.generator(model.encoder(x).means()).squeeze(1).numpy())
    return np.concatenate(out)


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 2:
        raise ValueError("need at least two frames for a mismatched pairing")
    while True:
        p = rng.permutation(n)
        if not np.any(p == np.arange(n)):
            return p


def reconstruction_is(model: ReprModel, frames: np.ndarray, thresholds=DEFAULT_THRESHOLDS,
                      seed: int = 0) -> dict:
    """Mean IS of matched reconstructions vs a shuffled-pair control."""
    rec = reconstruct(model, frames)
    perm = derangement(len(frames), np.random.default_rng(seed))
    ct = [classify_array(f, *thresholds) for f in frames]
    cr = [classify_array(r, *thresholds) for r in rec]
    matched = [is_metric_classes(ct[i], cr[i]) for i in range(len(frames))]
    control = [is_metric_classes(ct[i], cr[perm[i]]) for i in range(len(frames))]
    return {"matched": float(np.mean(matched)), "shuffled": float(np.mean(control)),
            "matched_all": matched, "shuffled_all": control}
