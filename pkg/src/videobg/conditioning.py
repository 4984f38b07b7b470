"""Condition-frame encoding, projection, and the random dropping scheme.

A small patch-token vision encoder stands in for a large pretrained
contrastive image encoder: it exposes the same interface (the token matrix
of the last hidden layer) at desk widths, and trains jointly with the
denoiser. A two-layer MLP projects those tokens into the cross-attention
width.

Dropping: during training each sample independently draws one of four
mutually exclusive modes -- keep everything (70%), drop segmentation+mask,
drop the condition frame, or drop all three (10% each). Dropped inputs are
replaced by all-zero tensors before they reach any encoder; a dropped
condition frame never runs through the encoder at all but becomes the
all-zero token matrix directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import torch
from torch import nn

from .denoiser import ConditionTokens
from .errors import ValidationError


class DropDecision(Enum):
    KEEP_ALL = "keep_all"
    DROP_SEG_AND_MASK = "drop_seg_and_mask"
    DROP_COND = "drop_cond"
    DROP_ALL = "drop_all"


DROP_PROBABILITY = 0.1  # per non-keep mode; KEEP_ALL gets the remaining 0.7


@dataclass(frozen=True)
class ConditionEncoderConfig:
    image_size: int = 64
    patch_size: int = 16
    embed_dim: int = 128     # token width of the last hidden layer
    num_layers: int = 2
    num_heads: int = 4
    cross_dim: int = 96      # projection target width
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValidationError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ValidationError("embed_dim must be divisible by num_heads")

    @property
    def num_tokens(self) -> int:
        """Patch tokens plus one global token."""
        return (self.image_size // self.patch_size) ** 2 + 1


@dataclass(frozen=True)
class RawConditionEmbedding:
    """Last-hidden-layer token matrix of the frame encoder, (N_tok, D_enc)."""

    tokens: torch.Tensor

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValidationError(f"raw embedding must be 2D, got {tuple(self.tokens.shape)}")
        if not torch.isfinite(self.tokens).all():
            raise ValidationError("raw embedding contains non-finite values")


class _EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x):
        n = self.norm1(x)
        x = x + self.attn(n, n, n, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class ConditionFrameEncoder(nn.Module):
    """Patch embedding + transformer blocks; returns all tokens incl. global."""

    def __init__(self, config: ConditionEncoderConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = nn.Conv2d(3, d, config.patch_size, stride=config.patch_size)
        self.global_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.empty(1, config.num_tokens, d))
        nn.init.normal_(self.pos_embed, std=0.02)
        nn.init.normal_(self.global_token, std=0.02)
        self.blocks = nn.ModuleList(
            _EncoderBlock(d, config.num_heads, config.mlp_ratio)
            for _ in range(config.num_layers)
        )
        self.norm = nn.LayerNorm(d)

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        # frame: (H, W, 3) in [-1, 1], channels-last by convention
        x = frame.permute(2, 0, 1).unsqueeze(0)
        tok = self.patch_embed(x).flatten(2).transpose(1, 2)  # (1, P, D)
        tok = torch.cat([self.global_token, tok], dim=1) + self.pos_embed
        for block in self.blocks:
            tok = block(tok)
        return self.norm(tok).squeeze(0)  # (N_tok, D)


class ConditionProjector(nn.Module):
    """Tokenwise two-layer MLP from encoder width into cross-attention width.

    Hidden width is the rounded geometric mean of the two. The activation is
    swappable so a linear build can be probed against a plain matrix product.
    """

    def __init__(self, in_dim: int, out_dim: int, activation: nn.Module | None = None):
        super().__init__()
        hidden = round(math.sqrt(in_dim * out_dim))
        self.fc1 = nn.Linear(in_dim, hidden)
        self.act = nn.SiLU() if activation is None else activation
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(tokens)))


def encode_condition_frame(
    frame: torch.Tensor, encoder: ConditionFrameEncoder
) -> RawConditionEmbedding:
    """Encode an (H, W, 3) frame in [-1, 1] into last-hidden-layer tokens.

    The all-zero frame is the dropped-condition sentinel and must take the
    dropped path (see condition_tokens) instead of being encoded.
    """
    cfg = encoder.config
    if frame.ndim != 3 or frame.shape != (cfg.image_size, cfg.image_size, 3):
        raise ValidationError(
            f"condition frame must be ({cfg.image_size},{cfg.image_size},3), "
            f"got {tuple(frame.shape)}"
        )
    if float(frame.abs().max()) > 1.0 + 1e-5:
        raise ValidationError("condition frame must be normalized to [-1, 1]")
    if not frame.any():
        raise ValidationError(
            "all-zero frame is the dropped-condition sentinel; use condition_tokens()"
        )
    return RawConditionEmbedding(tokens=encoder(frame))


def project_condition(
    raw: RawConditionEmbedding, projector: ConditionProjector
) -> ConditionTokens:
    """Project raw tokens into the cross-attention space, tokenwise."""
    if raw.tokens.shape[1] != projector.fc1.in_features:
        raise ValidationError(
            f"raw token width {raw.tokens.shape[1]} != projector input "
            f"{projector.fc1.in_features}"
        )
    return ConditionTokens(tokens=projector(raw.tokens))


def condition_tokens(
    frame: torch.Tensor | None,
    encoder: ConditionFrameEncoder,
    projector: ConditionProjector,
) -> ConditionTokens:
    """Route a condition frame to tokens; None or all-zero means dropped."""
    if frame is None or not frame.any():
        return ConditionTokens.dropped(encoder.config.num_tokens, projector.fc2.out_features)
    return project_condition(encode_condition_frame(frame, encoder), projector)


def draw_drop_decision(rng: torch.Generator) -> DropDecision:
    """Categorical draw: the three drop modes at 10% each, keep-all at 70%."""
    u = float(torch.rand((), generator=rng))
    if u < DROP_PROBABILITY:
        return DropDecision.DROP_SEG_AND_MASK
    if u < 2 * DROP_PROBABILITY:
        return DropDecision.DROP_COND
    if u < 3 * DROP_PROBABILITY:
        return DropDecision.DROP_ALL
    return DropDecision.KEEP_ALL


def apply_drop(
    decision: DropDecision,
    seg: torch.Tensor,
    mask: torch.Tensor,
    cond_frame: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Zero out the dropped inputs pre-encoder; kept inputs pass unchanged."""
    drop_seg = decision in (DropDecision.DROP_SEG_AND_MASK, DropDecision.DROP_ALL)
    drop_cond = decision in (DropDecision.DROP_COND, DropDecision.DROP_ALL)
    return (
        torch.zeros_like(seg) if drop_seg else seg,
        torch.zeros_like(mask) if drop_seg else mask,
        torch.zeros_like(cond_frame) if drop_cond else cond_frame,
    )
