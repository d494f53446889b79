"""Tiny conditional latent diffusion.

The forward process is ``z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`` and
:func:`reconstruct_latent` is its exact algebraic inverse given a noise
estimate.  The same inverse drives the ancestral sampler, so the denoised
latent used by the EDGE losses during fine-tuning and the clean-latent
estimate used while sampling are computed by one function.
"""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ValidationError
from .text import BagOfWordsEncoder, Vocabulary

CHECKPOINT_FORMAT = "edgedistill-checkpoint"
CHECKPOINT_VERSION = 1

# what the U-Net emits; "v" is converted to a noise estimate before use
PREDICTIONS = ("eps", "v")

Generators = torch.Generator | Sequence[torch.Generator] | None


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Cumulative signal coefficients ``alpha_bar`` over ``T`` steps (float64)."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size == 0:
            raise ValidationError("alpha_bar must be a non-empty vector")
        if not (np.all(ab > 0) and np.all(ab < 1)):
            raise ValidationError("alpha_bar must lie strictly inside (0, 1)")
        if np.any(np.diff(ab) >= 0):
            raise ValidationError("alpha_bar must be strictly decreasing")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return int(self.alpha_bar.size)

    @classmethod
    def cosine(cls, T: int = 100, s: float = 0.008, max_beta: float = 0.999) -> "NoiseSchedule":
        if T < 1:
            raise ValidationError("T must be positive")
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1 - f[1:] / f[:-1], 1e-8, max_beta)
        return cls(np.cumprod(1 - betas))

    @classmethod
    def linear(cls, T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        # rescaled so that short chains still end near pure noise
        scale = 1000.0 / T
        betas = np.linspace(beta_start * scale, min(beta_end * scale, 0.999), T)
        return cls(np.cumprod(1 - betas))

    def coefficients(self, t: torch.Tensor, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(sqrt(abar_t), sqrt(1 - abar_t)) shaped to broadcast against ``like``."""
        t = _check_timesteps(t, self.T, like.shape[0])
        ab = torch.from_numpy(self.alpha_bar.copy())[t]
        shape = (-1,) + (1,) * (like.dim() - 1)
        signal = ab.sqrt().to(like.dtype).reshape(shape)
        noise = (1 - ab).sqrt().to(like.dtype).reshape(shape)
        return signal, noise


def _check_timesteps(t, T: int, n: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(n)
    if t.shape != (n,):
        raise ConfigurationError(f"expected {n} timesteps, got shape {tuple(t.shape)}")
    if n and (int(t.min()) < 0 or int(t.max()) >= T):
        raise IndexError(f"timestep outside [0, {T})")
    return t


@dataclass
class LatentBatch:
    z0: torch.Tensor
    zt: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor


def randn_like(x: torch.Tensor, generator: Generators) -> torch.Tensor:
    """Standard normal noise; a sequence of generators draws one row each."""
    if generator is None or isinstance(generator, torch.Generator):
        return torch.randn(x.shape, generator=generator, dtype=x.dtype)
    if len(generator) != x.shape[0]:
        raise ConfigurationError("need one generator per batch row")
    rows = [torch.randn(x.shape[1:], generator=g, dtype=x.dtype) for g in generator]
    return torch.stack(rows)


def forward_noise(
    z0: torch.Tensor, t, schedule: NoiseSchedule, generator: Generators = None,
    eps: torch.Tensor | None = None,
) -> LatentBatch:
    """Noise ``z0`` to level ``t``; the drawn ``eps`` is kept in the batch."""
    t = _check_timesteps(t, schedule.T, z0.shape[0])
    if eps is None:
        eps = randn_like(z0, generator)
    elif eps.shape != z0.shape:
        raise ConfigurationError("eps must match z0 in shape")
    signal, noise = schedule.coefficients(t, z0)
    return LatentBatch(z0, signal * z0 + noise * eps, t, eps)


def reconstruct_latent(
    zt: torch.Tensor, eps_hat: torch.Tensor, t, schedule: NoiseSchedule
) -> torch.Tensor:
    """Denoised latent ``(z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)``."""
    if zt.shape != eps_hat.shape:
        raise ConfigurationError(f"shape mismatch {tuple(zt.shape)} vs {tuple(eps_hat.shape)}")
    signal, noise = schedule.coefficients(t, zt)
    return (zt - noise * eps_hat) / signal


# ---------------------------------------------------------------------------
# image codec

class LatentCodec(nn.Module):
    """``identity``: lossless pixel-unshuffle into ``patch``-sized blocks.

    ``autoencoder``: a two-layer conv encoder/decoder that must be trained
    (see :func:`train_autoencoder`) before its latents are meaningful.
    """

    def __init__(self, mode: str = "identity", channels: int = 3, patch: int = 4,
                 latent_channels: int = 16):
        super().__init__()
        if mode not in ("identity", "autoencoder"):
            raise ConfigurationError(f"unknown codec mode {mode!r}")
        self.mode, self.channels, self.patch = mode, channels, patch
        if mode == "identity":
            self.latent_channels = channels * patch * patch
        else:
            self.latent_channels = latent_channels
            hidden = 32
            self.enc = nn.Sequential(
                nn.Conv2d(channels, hidden, 3, padding=1), nn.SiLU(),
                nn.Conv2d(hidden, latent_channels, patch, stride=patch),
            )
            self.dec = nn.Sequential(
                nn.ConvTranspose2d(latent_channels, hidden, patch, stride=patch), nn.SiLU(),
                nn.Conv2d(hidden, channels, 3, padding=1),
            )

    def _check(self, x: torch.Tensor, channels: int, what: str):
        if x.dim() != 4 or x.shape[1] != channels:
            raise ConfigurationError(f"{what} must be (N, {channels}, H, W), got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x, self.channels, "image")
        if x.shape[-1] % self.patch or x.shape[-2] % self.patch:
            raise ConfigurationError(f"image size must be divisible by patch {self.patch}")
        if self.mode == "identity":
            return F.pixel_unshuffle(x, self.patch)
        return self.enc(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        self._check(z, self.latent_channels, "latent")
        if self.mode == "identity":
            return F.pixel_shuffle(z, self.patch)
        return torch.sigmoid(self.dec(z))


def train_autoencoder(codec: LatentCodec, images: torch.Tensor, steps: int = 300,
                      lr: float = 3e-3, batch_size: int = 32, seed: int = 0) -> list[float]:
    """Fit the autoencoder codec by pixel MSE; returns the loss trace."""
    if codec.mode != "autoencoder":
        raise ConfigurationError("only the autoencoder codec is trainable")
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    trace = []
    for _ in range(steps):
        idx = torch.randint(0, images.shape[0], (min(batch_size, images.shape[0]),), generator=gen)
        x = images[idx]
        loss = F.mse_loss(codec.decode(codec.encode(x)), x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(loss.item())
    return trace


# ---------------------------------------------------------------------------
# noise predictor

def timestep_embedding(t: torch.Tensor, dim: int, T: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = (t.float() * (1000.0 / T))[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ConditionalUNet(nn.Module):
    """Two-level U-Net; time and text conditioning are added to every block's features."""

    def __init__(self, channels: int, width: int = 64, cond_dim: int = 64, T: int = 100):
        super().__init__()
        self.channels, self.cond_dim, self.T = channels, cond_dim, T
        emb_dim = width * 2
        self.time_mlp = nn.Sequential(nn.Linear(width, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.cond_proj = nn.Sequential(nn.Linear(cond_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.time_dim = width
        w1, w2 = width, width * 2
        self.inp = nn.Conv2d(channels, w1, 3, padding=1)
        self.down1 = ResBlock(w1, w1, emb_dim)
        self.down2 = ResBlock(w1, w2, emb_dim)
        self.mid = ResBlock(w2, w2, emb_dim)
        self.up2 = ResBlock(w2 * 2, w1, emb_dim)
        self.up1 = ResBlock(w1 * 2, w1, emb_dim)
        self.out_norm = nn.GroupNorm(8, w1)
        self.out = nn.Conv2d(w1, channels, 3, padding=1)

    def forward(self, z: torch.Tensor, t: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(timestep_embedding(t, self.time_dim, self.T)) + self.cond_proj(y)
        h0 = self.inp(z)
        h1 = self.down1(h0, emb)
        h2 = self.down2(F.avg_pool2d(h1, 2), emb)
        m = self.mid(h2, emb)
        u2 = self.up2(torch.cat([m, h2], 1), emb)
        u1 = self.up1(torch.cat([F.interpolate(u2, scale_factor=2, mode="nearest"), h1], 1), emb)
        return self.out(F.silu(self.out_norm(u1)))


# ---------------------------------------------------------------------------
# the full model

@dataclass
class DiffusionConfig:
    image_size: int = 32
    image_channels: int = 3
    codec: str = "identity"
    patch: int = 4
    ae_latent_channels: int = 16
    width: int = 64
    cond_dim: int = 64
    timesteps: int = 100
    schedule: str = "cosine"
    prediction: str = "v"
    pool_grid: int = 1
    clip_denoised: bool = True
    latent_scale: float | None = None
    vocab_oov: int = 32
    extra: dict = field(default_factory=dict)

    def validate(self):
        if self.image_size % self.patch:
            raise ConfigurationError("model.image_size must be divisible by model.patch")
        if (self.image_size // self.patch) % 2:
            raise ConfigurationError("latent side length must be even")
        if self.schedule not in ("cosine", "linear"):
            raise ConfigurationError(f"model.schedule: unknown schedule {self.schedule!r}")
        if self.prediction not in PREDICTIONS:
            raise ConfigurationError(f"model.prediction must be one of {PREDICTIONS}")
        if self.pool_grid < 1 or (self.image_size // self.patch) % self.pool_grid:
            raise ConfigurationError("model.pool_grid must divide the latent side length")
        if self.latent_scale is not None and self.latent_scale <= 0:
            raise ConfigurationError("model.latent_scale must be positive")
        for name in ("width", "cond_dim", "timesteps"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"model.{name} must be positive")
        if self.width % 8:
            raise ConfigurationError("model.width must be a multiple of 8")

    def make_schedule(self) -> NoiseSchedule:
        if self.schedule == "cosine":
            return NoiseSchedule.cosine(self.timesteps)
        return NoiseSchedule.linear(self.timesteps)


class EdgeDiffusion(nn.Module):
    """Codec, text encoder, noise predictor and the two embedding projections.

    Parameter names are prefixed ``codec.``, ``text.``, ``unet.``, ``head.``
    (latent side) and ``text_head.`` (condition side), which is what
    ``trainable_prefixes`` matches against.

    Diffusion runs on ``latent_scale * codec.encode(x)``.  The scale is 1
    until :meth:`calibrate_latent_scale` sets it to the reciprocal RMS of
    the training latents (unless the config pins it).
    """

    def __init__(self, config: DiffusionConfig, vocab: Vocabulary):
        super().__init__()
        config.validate()
        self.config = config
        self.schedule = config.make_schedule()
        self.codec = LatentCodec(config.codec, config.image_channels, config.patch,
                                 config.ae_latent_channels)
        self.text = BagOfWordsEncoder(vocab, config.cond_dim)
        self.unet = ConditionalUNet(self.codec.latent_channels, config.width, config.cond_dim,
                                    config.timesteps)
        g = config.pool_grid
        self.head = nn.Linear(self.codec.latent_channels * g * g, config.cond_dim)
        self.text_head = nn.Linear(config.cond_dim, config.cond_dim)
        self.register_buffer("latent_scale", torch.tensor(config.latent_scale or 1.0))

    @property
    def calibrated(self) -> bool:
        return self.config.latent_scale is not None or float(self.latent_scale) != 1.0

    @torch.no_grad()
    def calibrate_latent_scale(self, images: torch.Tensor) -> float:
        if self.config.latent_scale is None:
            rms = self.codec.encode(images).pow(2).mean().sqrt()
            self.latent_scale.fill_(float(1.0 / rms))
        return float(self.latent_scale)

    @property
    def vocab(self) -> Vocabulary:
        return self.text.vocab

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        side = self.config.image_size // self.config.patch
        return (self.codec.latent_channels, side, side)

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (self.config.image_size, self.config.image_size):
            raise ConfigurationError(f"expected {self.config.image_size}px images, got {tuple(x.shape)}")
        return self.codec.encode(x) * self.latent_scale

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        if tuple(z.shape[1:]) != self.latent_shape:
            raise ConfigurationError(f"expected latents {self.latent_shape}, got {tuple(z.shape[1:])}")
        return self.codec.decode(z / self.latent_scale)

    def encode_text(self, captions: str | Sequence[str]) -> torch.Tensor:
        """Condition embeddings ``(N, cond_dim)``; a single string gives ``(cond_dim,)``."""
        if isinstance(captions, str):
            return self.text([captions])[0]
        return self.text(list(captions))

    def embed_latent(self, z: torch.Tensor) -> torch.Tensor:
        """Pool a spatial latent onto a ``pool_grid`` grid and project to ``cond_dim``."""
        pooled = F.adaptive_avg_pool2d(z, self.config.pool_grid).flatten(1)
        return self.head(pooled)

    def embed_text(self, y: torch.Tensor) -> torch.Tensor:
        """Project condition embeddings into the space shared with :meth:`embed_latent`."""
        return self.text_head(y)

    def forward(self, zt: torch.Tensor, t: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return predict_noise(self, zt, t, y)


def model_output(model: EdgeDiffusion, zt: torch.Tensor, t, y: torch.Tensor) -> torch.Tensor:
    """Raw U-Net output in the configured parameterization."""
    if tuple(zt.shape[1:]) != model.latent_shape:
        raise ConfigurationError(f"latent shape {tuple(zt.shape[1:])} != {model.latent_shape}")
    if y.dim() != 2 or y.shape != (zt.shape[0], model.config.cond_dim):
        raise ConfigurationError(f"condition must be ({zt.shape[0]}, {model.config.cond_dim})")
    t = _check_timesteps(t, model.schedule.T, zt.shape[0])
    return model.unet(zt, t, y)


def output_to_noise(model: EdgeDiffusion, out: torch.Tensor, zt: torch.Tensor, t) -> torch.Tensor:
    if model.config.prediction == "eps":
        return out
    # v = sqrt(abar) eps - sqrt(1 - abar) z0  =>  eps = sqrt(abar) v + sqrt(1 - abar) z_t
    signal, noise = model.schedule.coefficients(t, zt)
    return signal * out + noise * zt


def training_target(model: EdgeDiffusion, z0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    """Regression target of the MSE term, matching :func:`model_output`."""
    if model.config.prediction == "eps":
        return eps
    signal, noise = model.schedule.coefficients(t, z0)
    return signal * eps - noise * z0


def predict_noise(model: EdgeDiffusion, zt: torch.Tensor, t, y: torch.Tensor) -> torch.Tensor:
    """Noise estimate with the same shape as ``zt``."""
    return output_to_noise(model, model_output(model, zt, t, y), zt, t)


def sampling_timesteps(T: int, steps: int) -> list[int]:
    if steps < 1 or steps > T:
        raise ConfigurationError(f"sampler steps must be in [1, {T}], got {steps}")
    if steps == T:
        return list(range(T - 1, -1, -1))
    return sorted({int(round(v)) for v in np.linspace(0, T - 1, steps)}, reverse=True)


@torch.no_grad()
def sample(
    model: EdgeDiffusion, y: torch.Tensor, steps: int | None = None,
    generator: Generators = None,
) -> torch.Tensor:
    """Ancestral sampling from pure noise, conditioned on ``y`` ``(N, cond_dim)``.

    With ``steps < T`` the chain is respaced: each transition uses the
    posterior between consecutive retained timesteps.
    """
    schedule = model.schedule
    seq = sampling_timesteps(schedule.T, steps or schedule.T)
    n = y.shape[0]
    z = randn_like(torch.empty((n,) + model.latent_shape), generator)
    ab = schedule.alpha_bar
    # identity latents are pixels, so the clean estimate can be clipped to the pixel range
    lo, hi = (0.0, float(model.latent_scale)) if model.config.codec == "identity" else (None, None)
    for i, t in enumerate(seq):
        t_vec = torch.full((n,), t, dtype=torch.long)
        eps_hat = predict_noise(model, z, t_vec, y)
        z0_hat = reconstruct_latent(z, eps_hat, t_vec, schedule)
        if model.config.clip_denoised and lo is not None:
            z0_hat = z0_hat.clamp(lo, hi)
        if i == len(seq) - 1:
            z = z0_hat
            break
        ab_t, ab_prev = ab[t], ab[seq[i + 1]]
        beta = 1.0 - ab_t / ab_prev
        c0 = math.sqrt(ab_prev) * beta / (1.0 - ab_t)
        ct = math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t)
        sigma = math.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab_t))
        z = c0 * z0_hat + ct * z + sigma * randn_like(z, generator)
    return z


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: EdgeDiffusion, path: str | Path, meta: dict | None = None) -> Path:
    """Write parameters, schedule and configuration into one archive."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "vocab": model.vocab.to_state(),
        "alpha_bar": model.schedule.alpha_bar.tolist(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "meta": meta or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> tuple[EdgeDiffusion, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT or "version" not in payload:
        raise ValidationError(f"{path} is not a model checkpoint")
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {payload['version']}")
    model = EdgeDiffusion(DiffusionConfig(**payload["config"]), Vocabulary.from_state(payload["vocab"]))
    if not np.allclose(model.schedule.alpha_bar, payload["alpha_bar"], rtol=0, atol=0):
        raise ValidationError("stored schedule does not match configuration")
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("meta", {})
