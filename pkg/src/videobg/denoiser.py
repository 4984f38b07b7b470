"""3D denoising network: per-frame spatial blocks + temporal motion modules.

The network consumes a 9-channel per-frame feature map, channels
[0:4] noisy latents, [4:8] segmentation latents, [8:9] downsampled mask,
plus a timestep and a matrix of condition tokens, and predicts the
4-channel noise. Spatial residual/attention blocks treat the T frames as a
batch; after each spatial attention stack a motion module runs 1D
self-attention across the frame axis at every spatial location. Motion
module output projections are zero-initialized, so a freshly built network
is exactly per-frame; temporal behaviour is learned on top.

Timestep conditioning is a sinusoidal embedding pushed through a two-layer
MLP and injected into every residual block as a per-channel scale/shift.
Condition tokens enter through cross-attention in every attention stack;
an all-zero token matrix is the canonical "condition dropped" input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .diffusion import LatentVideo
from .errors import ValidationError

INPUT_CHANNELS = 9
OUTPUT_CHANNELS = 4


@dataclass(frozen=True)
class DenoiserConfig:
    clip_length: int = 8
    levels: tuple[int, ...] = (64, 128, 256)
    attn_heads: int = 4
    time_embed_dim: int = 256
    cross_dim: int = 96
    temporal_pos_enc: bool = True
    base_resolution: int = 8  # latent h = w at the input

    def __post_init__(self):
        if self.clip_length < 1:
            raise ValidationError("clip_length must be positive")
        if not self.levels or any(w <= 0 for w in self.levels):
            raise ValidationError("levels must be positive widths")
        if any(b > a for a, b in zip(self.levels[1:], self.levels)):
            raise ValidationError("level widths must be non-decreasing")
        if self.base_resolution // (2 ** (len(self.levels) - 1)) < 2:
            raise ValidationError(
                f"lowest resolution under 2x2: {self.base_resolution} px across "
                f"{len(self.levels)} levels"
            )
        if any(w % self.attn_heads for w in self.levels):
            raise ValidationError("level widths must be divisible by attn_heads")


@dataclass(frozen=True)
class DenoiserInput:
    """9-channel features (T, 9, h, w) plus the diffusion timestep."""

    features: torch.Tensor
    tau: int

    def __post_init__(self):
        f = self.features
        if f.ndim != 4 or f.shape[1] != INPUT_CHANNELS:
            raise ValidationError(
                f"denoiser input must be (T,{INPUT_CHANNELS},h,w), got {tuple(f.shape)}"
            )
        if not torch.isfinite(f).all():
            raise ValidationError("denoiser input contains non-finite values")
        m = f[:, 8]
        if float(m.min()) < 0.0 or float(m.max()) > 1.0:
            raise ValidationError("mask channel must lie in [0, 1]")
        if self.tau < 0:
            raise ValidationError("timestep must be non-negative")


@dataclass(frozen=True)
class ConditionTokens:
    """Projected condition embedding consumed by cross-attention.

    The all-zero matrix is the canonical dropped-condition value.
    """

    tokens: torch.Tensor  # (N_tok, D_cross)

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValidationError(f"condition tokens must be 2D, got {tuple(self.tokens.shape)}")
        if not torch.isfinite(self.tokens).all():
            raise ValidationError("condition tokens contain non-finite values")

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    @classmethod
    def dropped(cls, num_tokens: int, width: int) -> "ConditionTokens":
        return cls(tokens=torch.zeros(num_tokens, width))


def assemble_input(
    noisy_latents, seg_latents, mask_small: torch.Tensor, tau: int = 0
) -> DenoiserInput:
    """Concatenate [Z_tau | S | M] along channels; the order is a wire contract."""
    z = noisy_latents.data if isinstance(noisy_latents, LatentVideo) else noisy_latents
    s = seg_latents.data if isinstance(seg_latents, LatentVideo) else seg_latents
    if z.shape != s.shape:
        raise ValidationError(f"latent shapes differ: {tuple(z.shape)} vs {tuple(s.shape)}")
    t_n, _, h, w = z.shape
    if mask_small.shape != (t_n, 1, h, w):
        raise ValidationError(
            f"mask must be ({t_n},1,{h},{w}), got {tuple(mask_small.shape)}"
        )
    return DenoiserInput(features=torch.cat([z, s, mask_small], dim=1), tau=tau)


def _num_groups(channels: int) -> int:
    for g in (32, 16, 8, 4, 2):
        if channels % g == 0:
            return g
    return 1


def sinusoidal_embedding(position: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of integer positions, shape (..., dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10_000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    )
    angles = position.double().unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        emb = torch.nn.functional.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    """GN -> SiLU -> conv, modulated by a scale/shift from the time embedding."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_num_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, 2 * out_ch)
        self.norm2 = nn.GroupNorm(_num_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        scale, shift = self.time_proj(temb).chunk(2, dim=-1)
        h = self.norm2(h) * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(nn.functional.silu(h))
        return h + self.skip(x)


class _Attention(nn.Module):
    """Multi-head attention over explicit query/key-value token sets."""

    def __init__(self, dim: int, kv_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, q_tokens, kv_tokens):
        b, n, d = q_tokens.shape
        m = kv_tokens.shape[1]
        h = self.heads
        q = self.q(q_tokens).view(b, n, h, d // h).transpose(1, 2)
        k = self.k(kv_tokens).view(b, m, h, d // h).transpose(1, 2)
        v = self.v(kv_tokens).view(b, m, h, d // h).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // h), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(out)


class SpatialTransformer(nn.Module):
    """Per-frame self-attention + cross-attention over condition tokens + MLP."""

    def __init__(self, channels: int, cross_dim: int, heads: int):
        super().__init__()
        self.norm_in = nn.GroupNorm(_num_groups(channels), channels)
        self.proj_in = nn.Conv2d(channels, channels, 1)
        self.norm1 = nn.LayerNorm(channels)
        self.self_attn = _Attention(channels, channels, heads)
        self.norm2 = nn.LayerNorm(channels)
        self.cross_attn = _Attention(channels, cross_dim, heads)
        self.norm3 = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(
            nn.Linear(channels, 4 * channels), nn.SiLU(), nn.Linear(4 * channels, channels)
        )
        self.proj_out = nn.Conv2d(channels, channels, 1)

    def forward(self, x, cond):
        # x: (B*T, C, h, w); cond: (B*T, N_tok, D_cross)
        bt, c, h, w = x.shape
        res = x
        t = self.proj_in(self.norm_in(x)).flatten(2).transpose(1, 2)  # (B*T, h*w, C)
        n = self.norm1(t)
        t = t + self.self_attn(n, n)
        t = t + self.cross_attn(self.norm2(t), cond)
        t = t + self.mlp(self.norm3(t))
        t = t.transpose(1, 2).reshape(bt, c, h, w)
        return res + self.proj_out(t)


class MotionModule(nn.Module):
    """1D temporal self-attention at each spatial location.

    Projection layers around the attention; the output projection starts at
    zero so an untrained module is the identity and the whole network is
    per-frame until the modules train away from zero.
    """

    def __init__(self, channels: int, heads: int, pos_enc: bool, max_len: int = 64):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.proj_in = nn.Linear(channels, channels)
        self.attn = _Attention(channels, channels, heads)
        self.proj_out = nn.Linear(channels, channels)
        nn.init.zeros_(self.proj_out.weight)
        nn.init.zeros_(self.proj_out.bias)
        if pos_enc:
            pe = sinusoidal_embedding(torch.arange(max_len), channels).float()
            self.register_buffer("pos_enc", pe, persistent=False)
        else:
            self.pos_enc = None

    def forward(self, x, batch: int, frames: int):
        # x: (B*T, C, h, w) -> tokens (B*h*w, T, C)
        bt, c, h, w = x.shape
        t = x.view(batch, frames, c, h * w).permute(0, 3, 1, 2).reshape(batch * h * w, frames, c)
        tokens = self.proj_in(self.norm(t))
        if self.pos_enc is not None:
            tokens = tokens + self.pos_enc[:frames].to(tokens.dtype)
        t = t + self.proj_out(self.attn(tokens, tokens))
        return t.view(batch, h * w, frames, c).permute(0, 2, 3, 1).reshape(bt, c, h, w)


class VideoDenoiser(nn.Module):
    """U-Net over latent clips; see the module docstring for the layout."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        levels = config.levels
        tdim = config.time_embed_dim
        heads = config.attn_heads
        cross = config.cross_dim
        pos = config.temporal_pos_enc

        self.time_mlp = nn.Sequential(
            nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim)
        )
        self.stem = nn.Conv2d(INPUT_CHANNELS, levels[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        for i, width in enumerate(levels):
            in_w = levels[max(i - 1, 0)] if i > 0 else levels[0]
            self.down_blocks.append(nn.ModuleDict({
                "res": ResBlock(in_w, width, tdim),
                "spatial": SpatialTransformer(width, cross, heads),
                "motion": MotionModule(width, heads, pos),
            }))
            if i < len(levels) - 1:
                self.downsamplers.append(nn.Conv2d(width, width, 3, stride=2, padding=1))

        mid = levels[-1]
        self.mid_res1 = ResBlock(mid, mid, tdim)
        self.mid_spatial = SpatialTransformer(mid, cross, heads)
        self.mid_motion = MotionModule(mid, heads, pos)
        self.mid_res2 = ResBlock(mid, mid, tdim)

        self.up_blocks = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for i in reversed(range(len(levels))):
            width = levels[i]
            skip_w = width
            self.up_blocks.append(nn.ModuleDict({
                "res": ResBlock(width + skip_w, width, tdim),
                "spatial": SpatialTransformer(width, cross, heads),
                "motion": MotionModule(width, heads, pos),
            }))
            if i > 0:
                self.upsamplers.append(nn.Conv2d(width, levels[i - 1], 3, padding=1))

        self.head_norm = nn.GroupNorm(_num_groups(levels[0]), levels[0])
        self.head = nn.Conv2d(levels[0], OUTPUT_CHANNELS, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, features: torch.Tensor, tau, cond_tokens: torch.Tensor) -> torch.Tensor:
        """Predict noise. features: (T,9,h,w) or (B,T,9,h,w); cond: (N,D) or (B,N,D)."""
        squeeze = features.ndim == 4
        if squeeze:
            features = features.unsqueeze(0)
        if cond_tokens.ndim == 2:
            cond_tokens = cond_tokens.unsqueeze(0)
        b, t_n, c_in, h, w = features.shape
        if c_in != INPUT_CHANNELS:
            raise ValidationError(f"expected {INPUT_CHANNELS} input channels, got {c_in}")
        if cond_tokens.shape[0] != b or cond_tokens.shape[2] != self.config.cross_dim:
            raise ValidationError(
                f"condition tokens (B,N,{self.config.cross_dim}) expected, "
                f"got {tuple(cond_tokens.shape)}"
            )

        dtype = self.stem.weight.dtype
        x = features.reshape(b * t_n, c_in, h, w).to(dtype)
        tau_vec = torch.as_tensor(tau, dtype=torch.float64).reshape(-1)
        if tau_vec.numel() == 1:
            tau_vec = tau_vec.expand(b)
        temb = self.time_mlp(
            sinusoidal_embedding(tau_vec, self.config.time_embed_dim).to(dtype)
        )
        temb = temb.repeat_interleave(t_n, dim=0)  # (B*T, tdim)
        cond = cond_tokens.to(dtype).repeat_interleave(t_n, dim=0)  # (B*T, N, D)

        x = self.stem(x)
        skips = []
        for i, block in enumerate(self.down_blocks):
            x = block["res"](x, temb)
            x = block["spatial"](x, cond)
            x = block["motion"](x, b, t_n)
            skips.append(x)
            if i < len(self.downsamplers):
                x = self.downsamplers[i](x)

        x = self.mid_res1(x, temb)
        x = self.mid_spatial(x, cond)
        x = self.mid_motion(x, b, t_n)
        x = self.mid_res2(x, temb)

        for i, block in enumerate(self.up_blocks):
            skip = skips.pop()
            if x.shape[-2:] != skip.shape[-2:]:
                x = nn.functional.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = block["res"](torch.cat([x, skip], dim=1), temb)
            x = block["spatial"](x, cond)
            x = block["motion"](x, b, t_n)
            if i < len(self.upsamplers):
                x = self.upsamplers[i](x)

        out = self.head(nn.functional.silu(self.head_norm(x)))
        out = out.view(b, t_n, OUTPUT_CHANNELS, h, w)
        return out.squeeze(0) if squeeze else out

    def zero_motion_modules(self) -> None:
        """Reset every motion output projection to zero (exact per-frame net)."""
        for m in self.modules():
            if isinstance(m, MotionModule):
                nn.init.zeros_(m.proj_out.weight)
                nn.init.zeros_(m.proj_out.bias)


def predict_noise(
    inp: DenoiserInput, cond: ConditionTokens, model: VideoDenoiser
) -> torch.Tensor:
    """Validated forward pass: (T,9,h,w) -> (T,4,h,w)."""
    if cond.width != model.config.cross_dim:
        raise ValidationError(
            f"condition width {cond.width} != model cross_dim {model.config.cross_dim}"
        )
    return model(inp.features, inp.tau, cond.tokens)


def count_parameters(model: nn.Module) -> int:
    """Total trainable scalar parameter count."""
    return sum(p.numel() for p in model.parameters())
