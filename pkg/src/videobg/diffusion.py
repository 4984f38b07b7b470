"""Core diffusion mechanics, independent of any network.

Implements the forward noising chain, the ancestral reverse step, the
noise-prediction training loss and classifier-free guidance:

    forward step:  q(x_tau | x_{tau-1}) = N(sqrt(1-beta_tau) x_{tau-1}, beta_tau I)
    forward jump:  x_tau = sqrt(abar_tau) x_0 + sqrt(1-abar_tau) eps
    reverse step:  x_{tau-1} = mu + sigma z,
                   mu = (x_tau - beta_tau/sqrt(1-abar_tau) eps_pred) / sqrt(alpha_tau)
                   sigma^2 = beta_tau (1-abar_{tau-1}) / (1-abar_tau)
    guidance:      eps = eps_uncond + s (eps_cond - eps_uncond)

Timesteps are 1-based (tau in {1..num_steps}); abar_0 = 1 by convention so
tau=0 means "no noise". Schedule tables are kept in float64 so the
cumulative-product recurrence holds to ~1e-16; per-step coefficients are
computed in float64 and applied in the dtype of the data tensor.

Sampling supports fewer inference steps than training steps by striding the
training timesteps and recomputing the posterior over each skipped interval
(plain strided ancestral sampling, no DDIM).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from .errors import ValidationError

# Noise predictor contract used by sample_loop: maps a (T,9,h,w) feature
# tensor, an integer timestep and a (N_tok,D) condition-token matrix to a
# (T,4,h,w) noise estimate. Channel order of the features is [Z_tau | S | M].
DenoiseFn = Callable[[torch.Tensor, int, torch.Tensor], torch.Tensor]

LATENT_CHANNELS = 4


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule tables: beta, alpha = 1-beta, abar = cumprod(alpha)."""

    num_steps: int
    betas: torch.Tensor       # (num_steps,) float64, beta_tau for tau=1..num_steps
    alphas: torch.Tensor      # (num_steps,) float64
    alpha_bars: torch.Tensor  # (num_steps,) float64

    def alpha_bar(self, tau: int) -> float:
        """abar_tau as a python float; abar_0 is defined as 1 (no noise)."""
        if tau == 0:
            return 1.0
        self._check_tau(tau)
        return float(self.alpha_bars[tau - 1])

    def beta(self, tau: int) -> float:
        self._check_tau(tau)
        return float(self.betas[tau - 1])

    def _check_tau(self, tau: int) -> None:
        if not 1 <= tau <= self.num_steps:
            raise ValidationError(
                f"timestep {tau} outside [1, {self.num_steps}]"
            )


@dataclass(frozen=True)
class LatentVideo:
    """A clip in latent space: (T, 4, h, w), one latent frame per video frame."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValidationError(f"latent video must be 4D, got {tuple(self.data.shape)}")
        if self.data.shape[1] != LATENT_CHANNELS:
            raise ValidationError(
                f"latent video needs {LATENT_CHANNELS} channels, got {self.data.shape[1]}"
            )
        if self.data.shape[0] < 1 or self.data.shape[2] < 1 or self.data.shape[3] < 1:
            raise ValidationError("latent video dims must be positive")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class GuidanceConfig:
    """Inference-time guidance settings plus the strided timestep visit order."""

    scale: float = 5.0
    num_inference_steps: int = 50
    stride_map: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.scale < 0:
            raise ValidationError(f"guidance scale must be >= 0, got {self.scale}")
        if self.num_inference_steps < 1:
            raise ValidationError("num_inference_steps must be positive")
        if len(self.stride_map) != self.num_inference_steps:
            raise ValidationError(
                f"stride_map length {len(self.stride_map)} != "
                f"num_inference_steps {self.num_inference_steps}"
            )
        if self.stride_map[-1] != 1:
            raise ValidationError("stride_map must end at timestep 1")
        if any(b >= a for a, b in zip(self.stride_map, self.stride_map[1:])):
            raise ValidationError("stride_map must be strictly decreasing")

    @classmethod
    def evenly_strided(
        cls, num_train_steps: int, num_inference_steps: int = 50, scale: float = 5.0
    ) -> "GuidanceConfig":
        """Visit evenly spaced training timesteps from num_train_steps down to 1."""
        if num_inference_steps > num_train_steps:
            raise ValidationError(
                f"cannot take {num_inference_steps} inference steps with only "
                f"{num_train_steps} training steps"
            )
        if num_inference_steps == 1:
            taus = (num_train_steps,) if num_train_steps == 1 else (1,)
        else:
            span = torch.linspace(num_train_steps, 1, num_inference_steps, dtype=torch.float64)
            taus = tuple(int(round(v)) for v in span.tolist())
        return cls(scale=scale, num_inference_steps=num_inference_steps, stride_map=taus)


def build_schedule(num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule from beta_start to beta_end inclusive.

    Defaults follow the common linear-DDPM choice (1e-4 -> 0.02 over 1000
    steps); the values themselves are configuration, not physics.
    """
    if num_steps < 1:
        raise ValidationError(f"num_steps must be >= 1, got {num_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValidationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = torch.linspace(beta_start, beta_end, num_steps, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(num_steps=num_steps, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValidationError(
            f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}"
        )


def forward_step(
    x_prev: torch.Tensor, tau: int, schedule: NoiseSchedule, noise: torch.Tensor
) -> torch.Tensor:
    """One Markov noising step: sqrt(1-beta_tau) x_{tau-1} + sqrt(beta_tau) noise."""
    _check_same_shape(x_prev, noise, "forward_step")
    beta = schedule.beta(tau)
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * noise


def forward_jump(
    x0: torch.Tensor, tau: int, schedule: NoiseSchedule, noise: torch.Tensor
) -> torch.Tensor:
    """Closed-form jump to step tau: sqrt(abar_tau) x0 + sqrt(1-abar_tau) noise.

    tau=0 returns x0 unchanged (abar_0 = 1).
    """
    _check_same_shape(x0, noise, "forward_jump")
    abar = schedule.alpha_bar(tau)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * noise


def training_loss(eps_pred: torch.Tensor, eps_true: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and injected noise, over all elements."""
    _check_same_shape(eps_pred, eps_true, "training_loss")
    return torch.mean((eps_pred - eps_true) ** 2)


def ddpm_step(
    x_tau: torch.Tensor,
    tau: int,
    eps_pred: torch.Tensor,
    schedule: NoiseSchedule,
    noise: torch.Tensor,
    prev_tau: int | None = None,
) -> torch.Tensor:
    """One ancestral reverse step from tau to prev_tau (default tau-1).

    When prev_tau skips intermediate timesteps the posterior is recomputed
    over the whole interval using alpha_eff = abar_tau / abar_prev. The
    posterior variance is the fixed beta-tilde variance, which vanishes when
    prev_tau = 0, so the final step is deterministic regardless of `noise`.
    """
    schedule._check_tau(tau)
    if prev_tau is None:
        prev_tau = tau - 1
    if not 0 <= prev_tau < tau:
        raise ValidationError(f"prev_tau {prev_tau} must lie in [0, {tau})")
    _check_same_shape(x_tau, eps_pred, "ddpm_step")
    _check_same_shape(x_tau, noise, "ddpm_step")

    abar_t = schedule.alpha_bar(tau)
    abar_p = schedule.alpha_bar(prev_tau)
    alpha_eff = abar_t / abar_p
    beta_eff = 1.0 - alpha_eff

    mean = (x_tau - (beta_eff / math.sqrt(1.0 - abar_t)) * eps_pred) / math.sqrt(alpha_eff)
    variance = beta_eff * (1.0 - abar_p) / (1.0 - abar_t)
    if variance <= 0.0:
        return mean
    return mean + math.sqrt(variance) * noise


def cfg_combine(
    eps_cond: torch.Tensor, eps_uncond: torch.Tensor, scale: float
) -> torch.Tensor:
    """Classifier-free guidance: eps_uncond + scale * (eps_cond - eps_uncond).

    scale=1 and scale=0 are short-circuited so the conditional/unconditional
    branches are reproduced bit-exactly, as the algebra says they should be.
    """
    _check_same_shape(eps_cond, eps_uncond, "cfg_combine")
    if scale < 0:
        raise ValidationError(f"guidance scale must be >= 0, got {scale}")
    if scale == 1.0:
        return eps_cond.clone()
    if scale == 0.0:
        return eps_uncond.clone()
    return eps_uncond + scale * (eps_cond - eps_uncond)


def sample_loop(
    denoise_fn: DenoiseFn,
    seg_latents: LatentVideo,
    mask_small: torch.Tensor,
    cond_tokens: torch.Tensor,
    guidance: GuidanceConfig,
    schedule: NoiseSchedule,
    seed: int,
) -> LatentVideo:
    """Guided ancestral sampling of a latent video.

    Starts from seeded Gaussian noise and walks guidance.stride_map down to
    timestep 1. At each visited tau the denoiser is evaluated on the
    9-channel concatenation [Z_tau | seg | mask], once with cond_tokens and
    once with the zeroed (dropped) condition; the two estimates are combined
    with cfg_combine before the reverse step. Deterministic given the seed.
    """
    if guidance.stride_map[0] > schedule.num_steps:
        raise ValidationError(
            f"stride_map starts at {guidance.stride_map[0]} but schedule has "
            f"{schedule.num_steps} steps"
        )
    seg = seg_latents.data
    t, _, h, w = seg.shape
    if mask_small.shape != (t, 1, h, w):
        raise ValidationError(
            f"mask_small must be ({t},1,{h},{w}), got {tuple(mask_small.shape)}"
        )
    if cond_tokens.ndim != 2:
        raise ValidationError("cond_tokens must be a 2D token matrix")

    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(t, LATENT_CHANNELS, h, w, generator=gen, dtype=seg.dtype)
    dropped = torch.zeros_like(cond_tokens)

    visits = guidance.stride_map
    for i, tau in enumerate(visits):
        prev = visits[i + 1] if i + 1 < len(visits) else 0
        feats = torch.cat([z, seg, mask_small], dim=1)
        # denoise_fn is pure (never touches the rng stream), so evaluating
        # only the branch that survives the cfg algebra keeps scale=1 and
        # scale=0 trajectories bit-identical to single-branch sampling.
        if guidance.scale == 1.0:
            eps = denoise_fn(feats, tau, cond_tokens)
        elif guidance.scale == 0.0:
            eps = denoise_fn(feats, tau, dropped)
        else:
            eps_cond = denoise_fn(feats, tau, cond_tokens)
            eps_uncond = denoise_fn(feats, tau, dropped)
            eps = cfg_combine(eps_cond, eps_uncond, guidance.scale)
        step_noise = torch.randn(z.shape, generator=gen, dtype=z.dtype)
        z = ddpm_step(z, tau, eps, schedule, step_noise, prev_tau=prev)
    return LatentVideo(z)
