"""Small trainable KL autoencoder with the fixed 8x / 4-channel interface.

Stands in for a large frozen pretrained VAE: three stride-2 stages give
exactly 8x spatial compression into 4 latent channels, so every downstream
latent shape matches the full-scale pipeline. Encoding for diffusion is
deterministic (posterior mean); sampling only happens inside the training
loss. Activations are smooth (SiLU/tanh) end to end, which keeps the whole
model finite-difference checkable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import nn

from .errors import ValidationError

LATENT_CHANNELS = 4
DOWNSAMPLE_FACTOR = 8


@dataclass(frozen=True)
class AutoencoderConfig:
    in_channels: int = 3
    latent_channels: int = 4
    downsample_factor: int = 8
    base_width: int = 32
    kl_weight: float = 1e-6

    def __post_init__(self):
        if self.latent_channels != LATENT_CHANNELS:
            raise ValidationError(f"latent_channels is fixed at {LATENT_CHANNELS}")
        if self.downsample_factor != DOWNSAMPLE_FACTOR:
            raise ValidationError(f"downsample_factor is fixed at {DOWNSAMPLE_FACTOR}")
        if self.base_width < 2:
            raise ValidationError("base_width must be >= 2")
        if self.kl_weight < 0:
            raise ValidationError("kl_weight must be non-negative")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "latent_channels": self.latent_channels,
            "downsample_factor": self.downsample_factor,
            "base_width": self.base_width,
            "kl_weight": self.kl_weight,
        }


@dataclass(frozen=True)
class FrameBatch:
    """(N, 3, H, W) float frames in [-1, 1] with 8-divisible spatial dims."""

    data: torch.Tensor

    def __post_init__(self):
        d = self.data
        if d.ndim != 4 or d.shape[1] != 3:
            raise ValidationError(f"frame batch must be (N,3,H,W), got {tuple(d.shape)}")
        if d.shape[2] % DOWNSAMPLE_FACTOR or d.shape[3] % DOWNSAMPLE_FACTOR:
            raise ValidationError(
                f"H and W must be divisible by {DOWNSAMPLE_FACTOR}, got "
                f"{d.shape[2]}x{d.shape[3]}"
            )
        if float(d.abs().max()) > 1.0 + 1e-4:
            raise ValidationError("frame values must lie in [-1, 1]")


def _num_groups(channels: int) -> int:
    for g in (32, 16, 8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class _ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_num_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_num_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class FrameAutoencoder(nn.Module):
    """Encoder/decoder pair; widths (w, 2w, 4w) across the three stages."""

    def __init__(self, config: AutoencoderConfig | None = None):
        super().__init__()
        self.config = config or AutoencoderConfig()
        w = self.config.base_width
        c_in = self.config.in_channels
        z = self.config.latent_channels

        self.encoder = nn.Sequential(
            nn.Conv2d(c_in, w, 3, padding=1),
            _ResBlock(w, w),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            _ResBlock(2 * w, 2 * w),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            _ResBlock(4 * w, 4 * w),
            nn.Conv2d(4 * w, 4 * w, 3, stride=2, padding=1),
            _ResBlock(4 * w, 4 * w),
            nn.GroupNorm(_num_groups(4 * w), 4 * w),
            nn.SiLU(),
            nn.Conv2d(4 * w, 2 * z, 3, padding=1),  # -> mean | logvar
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(z, 4 * w, 3, padding=1),
            _ResBlock(4 * w, 4 * w),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(4 * w, 2 * w, 3, padding=1),
            _ResBlock(2 * w, 2 * w),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, w, 3, padding=1),
            _ResBlock(w, w),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w, w, 3, padding=1),
            _ResBlock(w, w),
            nn.GroupNorm(_num_groups(w), w),
            nn.SiLU(),
            nn.Conv2d(w, c_in, 3, padding=1),
        )

    def posterior(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean, logvar = self.encoder(x).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def decode_latents(self, z: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.decoder(z))


def encode(frames: FrameBatch, model: FrameAutoencoder) -> torch.Tensor:
    """Deterministic encoding (posterior mean): (N,3,H,W) -> (N,4,H/8,W/8)."""
    mean, _ = model.posterior(frames.data)
    return mean


def decode(latents: torch.Tensor, model: FrameAutoencoder) -> torch.Tensor:
    """Decode latents back to frames in [-1, 1]: (N,4,h,w) -> (N,3,8h,8w)."""
    if latents.ndim != 4 or latents.shape[1] != LATENT_CHANNELS:
        raise ValidationError(
            f"latents must be (N,{LATENT_CHANNELS},h,w), got {tuple(latents.shape)}"
        )
    if latents.shape[2] < 1 or latents.shape[3] < 1:
        raise ValidationError("latent dims must be positive")
    return model.decode_latents(latents)


def train_autoencoder(
    dataset: Iterable[FrameBatch] | Sequence[FrameBatch],
    config: AutoencoderConfig,
    steps: int,
    seed: int,
    lr: float = 1e-3,
) -> tuple[FrameAutoencoder, list[float]]:
    """Train from scratch on the given frame batches; returns (model, losses).

    Loss is reconstruction MSE plus kl_weight * KL(posterior || N(0, I)).
    Batches are visited round-robin. Fully deterministic given the seed;
    steps=0 returns the freshly initialized model untouched.
    """
    batches = list(dataset)
    if not batches:
        raise ValidationError("dataset is empty")
    if steps < 0:
        raise ValidationError("steps must be >= 0")

    torch.manual_seed(seed)
    model = FrameAutoencoder(config)
    if steps == 0:
        return model, []

    opt = torch.optim.Adam(model.parameters(), lr=lr)
    noise_gen = torch.Generator().manual_seed(seed + 1)
    history: list[float] = []
    for step in range(steps):
        x = batches[step % len(batches)].data
        mean, logvar = model.posterior(x)
        eps = torch.randn(mean.shape, generator=noise_gen)
        z = mean + torch.exp(0.5 * logvar) * eps
        recon = model.decode_latents(z)
        recon_loss = torch.mean((recon - x) ** 2)
        kl = 0.5 * torch.mean(
            torch.sum(mean**2 + torch.exp(logvar) - 1.0 - logvar, dim=(1, 2, 3))
        )
        loss = recon_loss + config.kl_weight * kl
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    return model, history
