"""Encoder, style/content generator and multi-scale patch discriminator.

Shapes (desk defaults, 64x64 grid, S=32, C=32, 4x4 content):

    encoder        (B, 1, 64, 64) -> PosteriorParams
                   mu/logvar_style (B, 32), mu/logvar_content (B, 32, 4, 4)
    generator      LatentPair -> (B, 1, 64, 64) in [0, 1]
    discriminator  (B, 1, 64, 64) -> [(B, 1, 8, 8), (B, 1, 4, 4)]

A discriminator at scale ``s`` sees the input average-pooled by ``2**s`` and
applies three stride-2 convolutions, so its logit map is ``input / 2**(s+3)``
on each side.

Checkpoint container (little-endian)::

    b"OGMC" | u16 version | u32 header_len | header JSON (utf-8)
    | f32 tensor blob | u32 CRC32 of all preceding bytes

The header holds ``config`` (ModelConfig or predictor config), its hash, the
tensor index (name, shape, byte offset) and per-component parameter hashes.
Readers ignore unknown header keys, so new fields do not break old files.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadMagicError, BadVersionError, ChecksumError, ConfigError, ShapeError, TruncatedError
from .ogm import GridSpec, Ogm
from .util import config_hash

LOGVAR_CLAMP = 10.0


@dataclass
class ModelConfig:
    grid: GridSpec = field(default_factory=lambda: GridSpec(64, 64, 1.0 / 3.0))
    style_dim: int = 32
    content_channels: int = 32
    content_h: int = 4
    content_w: int = 4
    enc_stem: int = 8
    enc_channels: tuple[int, ...] = (16, 32, 48, 64)
    gen_channels: tuple[int, ...] = (64, 48, 32, 16)
    const_channels: int = 64
    content_proj: int = 64
    disc_channels: tuple[int, ...] = (16, 32, 64)
    disc_scales: int = 2

    def __post_init__(self):
        if isinstance(self.grid, dict):
            self.grid = GridSpec.from_dict(self.grid)
        self.enc_channels = tuple(self.enc_channels)
        self.gen_channels = tuple(self.gen_channels)
        self.disc_channels = tuple(self.disc_channels)
        self.validate()

    @property
    def n_stages(self) -> int:
        return len(self.gen_channels)

    @property
    def content_shape(self) -> tuple[int, int, int]:
        return (self.content_channels, self.content_h, self.content_w)

    @property
    def latent_size(self) -> int:
        return self.style_dim + self.content_channels * self.content_h * self.content_w

    def validate(self) -> None:
        if min(self.style_dim, self.content_channels, self.content_h, self.content_w) < 1:
            raise ConfigError("latent dimensions must be positive")
        if len(self.enc_channels) != len(self.gen_channels):
            raise ConfigError("encoder and generator need the same number of stages")
        k = self.n_stages
        if (self.content_w << k, self.content_h << k) != (self.grid.width, self.grid.height):
            raise ConfigError(
                f"content {self.content_h}x{self.content_w} upsampled {k} times does not "
                f"match grid {self.grid.height}x{self.grid.width}"
            )
        if self.disc_scales < 1 or len(self.disc_channels) < 1:
            raise ConfigError("discriminator needs at least one scale and one layer")
        n_down = len(self.disc_channels) + self.disc_scales - 1
        if min(self.grid.width, self.grid.height) >> n_down < 1:
            raise ConfigError("discriminator too deep for the grid size")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def disc_output_sizes(self) -> list[tuple[int, int]]:
        n = len(self.disc_channels)
        return [
            (self.grid.height >> (s + n), self.grid.width >> (s + n)) for s in range(self.disc_scales)
        ]


@dataclass
class PosteriorParams:
    mu_style: torch.Tensor
    logvar_style: torch.Tensor
    mu_content: torch.Tensor
    logvar_content: torch.Tensor

    def means(self) -> LatentPair:
        return LatentPair(self.mu_style, self.mu_content)


@dataclass
class LatentPair:
    z_style: torch.Tensor  # (B, S)
    z_content: torch.Tensor  # (B, C, h, w)

    def flat(self) -> torch.Tensor:
        return torch.cat([self.z_style, self.z_content.flatten(1)], dim=1)

    @classmethod
    def from_flat(cls, z: torch.Tensor, style_dim: int, content_shape) -> LatentPair:
        return cls(z[:, :style_dim], z[:, style_dim:].reshape(-1, *content_shape))


def _lrelu(x):
    return F.leaky_relu(x, 0.2)


class ResDown(nn.Module):
    """Residual block that halves the spatial size."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_in, 3, padding=1)
        self.conv2 = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1, bias=False)

    def forward(self, x):
        h = self.conv2(_lrelu(self.conv1(_lrelu(x))))
        return (h + self.skip(F.avg_pool2d(x, 2))) / math.sqrt(2.0)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Conv2d(1, cfg.enc_stem, 3, padding=1)
        chans = [cfg.enc_stem, *cfg.enc_channels]
        self.blocks = nn.ModuleList(ResDown(a, b) for a, b in zip(chans[:-1], chans[1:]))
        top = chans[-1]
        self.content_head = nn.Conv2d(top, 2 * cfg.content_channels, 3, padding=1)
        self.style_head = nn.Linear(top, 2 * cfg.style_dim)

    def forward(self, x: torch.Tensor) -> PosteriorParams:
        if x.shape[1:] != (1, *self.cfg.grid.shape):
            raise ShapeError(f"encoder expects (B, 1, {self.cfg.grid.shape}), got {tuple(x.shape)}")
        h = self.stem(x)
        for b in self.blocks:
            h = b(h)
        h = _lrelu(h)
        mu_c, lv_c = self.content_head(h).chunk(2, dim=1)
        mu_s, lv_s = self.style_head(h.mean(dim=(2, 3))).chunk(2, dim=1)
        return PosteriorParams(
            mu_s,
            lv_s.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP),
            mu_c,
            lv_c.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP),
        )


class StyleModulation(nn.Module):
    """Instance normalisation followed by a style-dependent per-channel affine map."""

    def __init__(self, channels: int, style_dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.affine = nn.Linear(style_dim, 2 * channels)
        nn.init.zeros_(self.affine.bias)

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        xn = F.instance_norm(x, eps=self.eps)
        gamma, beta = self.affine(style).chunk(2, dim=1)
        return xn * (1.0 + gamma[:, :, None, None]) + beta[:, :, None, None]


class StyledConv(nn.Module):
    def __init__(self, c_in: int, c_out: int, style_dim: int, upsample: bool = False):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.mod = StyleModulation(c_out, style_dim)

    def forward(self, x, style):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        return _lrelu(self.mod(self.conv(x), style))


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.content_in = nn.Conv2d(cfg.content_channels, cfg.content_proj, 3, padding=1)
        self.const = nn.Parameter(
            torch.randn(1, cfg.const_channels, cfg.content_h, cfg.content_w) * 0.02
        )
        c0 = cfg.content_proj + cfg.const_channels
        self.head = StyledConv(c0, cfg.gen_channels[0], cfg.style_dim)
        chans = [cfg.gen_channels[0], *cfg.gen_channels]
        self.ups = nn.ModuleList()
        for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
            self.ups.append(StyledConv(a, b, cfg.style_dim, upsample=True))
            if i < len(chans) - 2:  # full resolution gets a single conv
                self.ups.append(StyledConv(b, b, cfg.style_dim))
        self.to_ogm = nn.Conv2d(cfg.gen_channels[-1], 1, 1)

    def logits(self, z: LatentPair) -> torch.Tensor:
        cfg = self.cfg
        if z.z_style.shape[1:] != (cfg.style_dim,) or z.z_content.shape[1:] != cfg.content_shape:
            raise ShapeError(
                f"latent dims {tuple(z.z_style.shape)}/{tuple(z.z_content.shape)} do not match config"
            )
        s = z.z_style
        h = _lrelu(self.content_in(z.z_content))
        h = torch.cat([h, self.const.expand(h.shape[0], -1, -1, -1)], dim=1)
        h = self.head(h, s)
        for block in self.ups:
            h = block(h, s)
        return self.to_ogm(h)

    def forward(self, z: LatentPair) -> torch.Tensor:
        return torch.sigmoid(self.logits(z))


class PatchDiscriminator(nn.Module):
    def __init__(self, channels: tuple[int, ...]):
        super().__init__()
        layers, c_in = [], 1
        for c in channels:
            layers += [nn.Conv2d(c_in, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c_in = c
        layers.append(nn.Conv2d(c_in, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class MultiScaleDiscriminator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.scales = nn.ModuleList(PatchDiscriminator(cfg.disc_channels) for _ in range(cfg.disc_scales))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[1:] != (1, *self.cfg.grid.shape):
            raise ShapeError(f"discriminator expects (B, 1, {self.cfg.grid.shape}), got {tuple(x.shape)}")
        out = []
        for s, d in enumerate(self.scales):
            xs = F.avg_pool2d(x, 2**s) if s else x
            out.append(d(xs))
        return out


class ReprModel(nn.Module):
    """Encoder + generator (+ discriminator) trained together in stage 1."""

    def __init__(self, cfg: ModelConfig, with_discriminator: bool = True):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.generator = Generator(cfg)
        self.discriminator = MultiScaleDiscriminator(cfg) if with_discriminator else None


# --------------------------------------------------------------------------
# Operation-level helpers


def ogm_batch(xs, spec: GridSpec | None = None) -> torch.Tensor:
    """Stack Ogm objects (or arrays) into a (B, 1, H, W) float32 tensor."""
    if isinstance(xs, Ogm):
        xs = [xs]
    arrs = []
    for x in xs:
        if isinstance(x, Ogm):
            if spec is not None and x.spec != spec:
                raise ShapeError(f"grid {x.spec} does not match model grid {spec}")
            arrs.append(x.values)
        else:
            arrs.append(np.asarray(x, dtype=np.float32))
    return torch.from_numpy(np.stack(arrs)).unsqueeze(1)


@torch.no_grad()
def encode(encoder: Encoder, x) -> PosteriorParams:
    if not torch.is_tensor(x):
        x = ogm_batch(x, encoder.cfg.grid)
    return encoder(x)


def reparameterize(p: PosteriorParams, rng: torch.Generator | None = None) -> LatentPair:
    """z = mu + exp(logvar / 2) * eps, eps ~ N(0, I) drawn from ``rng``."""
    eps_s = torch.randn(p.mu_style.shape, generator=rng, dtype=p.mu_style.dtype)
    eps_c = torch.randn(p.mu_content.shape, generator=rng, dtype=p.mu_content.dtype)
    return LatentPair(
        p.mu_style + torch.exp(0.5 * p.logvar_style) * eps_s,
        p.mu_content + torch.exp(0.5 * p.logvar_content) * eps_c,
    )


@torch.no_grad()
def generate(generator: Generator, z: LatentPair) -> list[Ogm]:
    out = generator(z).squeeze(1).numpy()
    # sigmoid may round to exactly 0/1 in float32; clip guards against -0.0 etc.
    return [Ogm(generator.cfg.grid, np.clip(o, 0.0, 1.0)) for o in out]


@torch.no_grad()
def discriminate(discriminator: MultiScaleDiscriminator, x) -> list[torch.Tensor]:
    if not torch.is_tensor(x):
        x = ogm_batch(x, discriminator.cfg.grid)
    return discriminator(x)


def prior_sample(cfg: ModelConfig, n: int, rng: torch.Generator | None = None) -> LatentPair:
    return LatentPair(
        torch.randn((n, cfg.style_dim), generator=rng),
        torch.randn((n, *cfg.content_shape), generator=rng),
    )


# --------------------------------------------------------------------------
# Checkpoints

CKPT_MAGIC = b"OGMC"
CKPT_VERSION = 1


def param_hash(state: dict[str, torch.Tensor], prefix: str = "") -> str:
    """SHA-256 over sorted (name, shape, f32 bytes) of parameters under ``prefix``."""
    h = hashlib.sha256()
    for name in sorted(state):
        if not name.startswith(prefix):
            continue
        t = state[name].detach().cpu().to(torch.float32).contiguous().numpy()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.astype("<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(path, kind: str, config: dict, state: dict[str, torch.Tensor], **extra) -> dict:
    index, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        b = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = {
        "kind": kind,
        "config": config,
        "config_hash": config_hash(config),
        "tensors": index,
        **extra,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    body = CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(hb)) + hb + b"".join(blobs)
    data = body + struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return header


def load_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{path} is not a checkpoint")
    if len(data) < 14:
        raise TruncatedError(f"{path} truncated")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise BadVersionError(f"unsupported checkpoint version {version}")
    start = 10 + hlen
    if len(data) < start + 4:
        raise TruncatedError(f"{path} truncated")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumError(f"{path} checksum mismatch")
    header = json.loads(data[10:start])
    state = {}
    for t in header["tensors"]:
        off = start + t["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=t["nbytes"] // 4, offset=off)
        state[t["name"]] = torch.from_numpy(arr.reshape(t["shape"]).copy())
    return header, state


def save_repr_model(path, model: ReprModel, **extra) -> dict:
    state = model.state_dict()
    hashes = {
        part: param_hash(state, part + ".")
        for part in ("encoder", "generator", "discriminator")
        if getattr(model, part) is not None
    }
    return save_checkpoint(path, "repr", model.cfg.to_dict(), state, param_hashes=hashes, **extra)


def load_repr_model(path) -> tuple[ReprModel, dict]:
    header, state = load_checkpoint(path)
    if header.get("kind") != "repr":
        raise ConfigError(f"{path} is not a representation checkpoint")
    cfg = ModelConfig.from_dict(header["config"])
    has_d = any(k.startswith("discriminator.") for k in state)
    model = ReprModel(cfg, with_discriminator=has_d)
    model.load_state_dict(state)
    model.eval()
    return model, header
