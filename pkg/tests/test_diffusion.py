"""Oracle tests for the network-independent diffusion math."""

import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from videobg.diffusion import (
    GuidanceConfig,
    LatentVideo,
    NoiseSchedule,
    build_schedule,
    cfg_combine,
    ddpm_step,
    forward_jump,
    forward_step,
    sample_loop,
    training_loss,
)
from videobg.errors import ValidationError


def cumprod_oracle(betas):
    """Independent cumulative-product loop: abar_tau = prod_{s<=tau} (1-beta_s)."""
    out, acc = [], 1.0
    for b in betas:
        acc *= 1.0 - b
        out.append(acc)
    return out


class TestBuildSchedule:
    def test_single_step(self):
        s = build_schedule(1, 0.5, 0.5)
        assert s.betas.tolist() == [0.5]
        assert s.alpha_bars.tolist() == [0.5]

    def test_three_step_hand_values(self):
        s = build_schedule(3, 0.1, 0.3)
        assert torch.allclose(s.betas, torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64))
        # hand-computed: 0.9, 0.9*0.8, 0.9*0.8*0.7
        expected = torch.tensor([0.9, 0.72, 0.504], dtype=torch.float64)
        assert torch.allclose(s.alpha_bars, expected, atol=1e-15)
        oracle = cumprod_oracle(s.betas.tolist())
        assert torch.allclose(s.alpha_bars, torch.tensor(oracle, dtype=torch.float64), atol=1e-15)

    def test_default_thousand_steps_nearly_destroys_signal(self):
        s = build_schedule(1000, 1e-4, 0.02)
        oracle = cumprod_oracle(s.betas.tolist())
        assert abs(float(s.alpha_bars[-1]) - oracle[-1]) < 1e-12
        assert oracle[-1] < 1e-4

    def test_recurrence_exact(self):
        s = build_schedule(1000, 1e-4, 0.02)
        for tau in range(1, s.num_steps + 1):
            assert abs(s.alpha_bar(tau) - s.alpha_bar(tau - 1) * float(s.alphas[tau - 1])) < 1e-12

    @pytest.mark.parametrize(
        "num_steps,b0,b1",
        [(0, 0.1, 0.2), (-3, 0.1, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2), (10, 0.1, 1.0)],
    )
    def test_rejects_bad_parameters(self, num_steps, b0, b1):
        with pytest.raises(ValidationError):
            build_schedule(num_steps, b0, b1)

    @given(
        num_steps=st.integers(1, 200),
        b0=st.floats(1e-5, 0.4),
        spread=st.floats(0.0, 0.5),
    )
    @settings(max_examples=50, deadline=None)
    def test_consistency_property(self, num_steps, b0, spread):
        s = build_schedule(num_steps, b0, min(b0 + spread, 0.9))
        assert bool((s.betas > 0).all()) and bool((s.betas < 1).all())
        assert bool((s.betas[1:] >= s.betas[:-1]).all())
        diffs = s.alpha_bars[1:] - s.alpha_bars[:-1]
        assert bool((diffs < 0).all())  # strictly decreasing
        recon = s.alpha_bars[:-1] * s.alphas[1:]
        assert torch.allclose(s.alpha_bars[1:], recon, atol=1e-12, rtol=0)


class TestForwardProcess:
    def test_zero_beta_limit_is_identity(self):
        s = build_schedule(1, 1e-12, 1e-12)
        x = torch.randn(4, 3, generator=torch.Generator().manual_seed(0))
        out = forward_step(x, 1, s, torch.zeros_like(x))
        assert torch.allclose(out, x, atol=1e-9)

    def test_hand_value(self):
        s = build_schedule(1, 0.19, 0.19)
        x = torch.ones(1, dtype=torch.float64)
        out = forward_step(x, 1, s, torch.zeros_like(x))
        assert abs(float(out) - 0.9) < 1e-12  # sqrt(0.81)

    def test_zero_noise_chain_matches_jump(self):
        s = build_schedule(50, 1e-3, 0.05)
        gen = torch.Generator().manual_seed(7)
        x0 = torch.randn(2, 4, 5, 5, generator=gen, dtype=torch.float64)
        zero = torch.zeros_like(x0)
        x = x0
        for tau in range(1, 51):
            x = forward_step(x, tau, s, zero)
            jump = forward_jump(x0, tau, s, zero)
            assert torch.max(torch.abs(x - jump)) < 1e-6
            # the zero-noise chain is exactly the cumulative product
            assert torch.allclose(x, math.sqrt(s.alpha_bar(tau)) * x0, atol=1e-6)

    def test_jump_at_tau_zero_is_identity(self):
        s = build_schedule(10, 1e-3, 0.05)
        x0 = torch.randn(3, 3, generator=torch.Generator().manual_seed(1))
        assert torch.equal(forward_jump(x0, 0, s, torch.randn_like(x0)), x0)

    def test_monte_carlo_variance(self):
        # x0=0: Var[x_tau] = 1 - abar_tau. Sample variance of n draws of a
        # normal has std ~ var * sqrt(2/(n-1)); assert within 3 sigma.
        s = build_schedule(100, 1e-3, 0.02)
        tau = 60
        n = 10_000
        gen = torch.Generator().manual_seed(123)
        eps = torch.randn(n, generator=gen, dtype=torch.float64)
        x = forward_jump(torch.zeros(n, dtype=torch.float64), tau, s, eps)
        target = 1.0 - s.alpha_bar(tau)
        sigma = target * math.sqrt(2.0 / (n - 1))
        assert abs(float(x.var(unbiased=True)) - target) < 3 * sigma

    def test_shape_mismatch_rejected(self):
        s = build_schedule(10, 1e-3, 0.05)
        with pytest.raises(ValidationError):
            forward_step(torch.zeros(3), 1, s, torch.zeros(4))
        with pytest.raises(ValidationError):
            forward_jump(torch.zeros(3), 1, s, torch.zeros(4))

    def test_tau_out_of_range(self):
        s = build_schedule(10, 1e-3, 0.05)
        x = torch.zeros(2)
        for tau in (0, 11, -1):
            with pytest.raises(ValidationError):
                forward_step(x, tau, s, x)
        with pytest.raises(ValidationError):
            forward_jump(x, 11, s, x)


class TestTrainingLoss:
    def test_identical_gives_zero(self):
        x = torch.randn(5, 4, generator=torch.Generator().manual_seed(2))
        assert float(training_loss(x, x)) == 0.0

    def test_unit_offset_gives_one(self):
        x = torch.randn(5, 4, generator=torch.Generator().manual_seed(3))
        assert abs(float(training_loss(x + 1.0, x)) - 1.0) < 1e-6

    def test_matches_elementwise_loop_oracle(self):
        gen = torch.Generator().manual_seed(4)
        a = torch.randn(3, 2, 4, generator=gen, dtype=torch.float64)
        b = torch.randn(3, 2, 4, generator=gen, dtype=torch.float64)
        total = 0.0
        for p, q in zip(a.flatten().tolist(), b.flatten().tolist()):
            total += (p - q) ** 2
        oracle = total / a.numel()
        assert abs(float(training_loss(a, b)) - oracle) < 1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            training_loss(torch.zeros(3), torch.zeros(2))


class TestDdpmStep:
    @staticmethod
    def oracle_eps(x, tau, x0, schedule):
        """Ideal denoiser: the exact noise component of the current state."""
        abar = schedule.alpha_bar(tau)
        return (x - math.sqrt(abar) * x0) / math.sqrt(1.0 - abar)

    def test_oracle_denoiser_round_trip(self):
        # An ideal denoiser shrinks the noise coefficient multiplicatively;
        # the tau=1 step annihilates it, recovering x0 exactly.
        s = build_schedule(10, 1e-3, 0.05)
        gen = torch.Generator().manual_seed(11)
        x0 = torch.randn(1, generator=gen, dtype=torch.float64)
        eps = torch.randn(1, generator=gen, dtype=torch.float64)
        x = forward_jump(x0, 10, s, eps)
        zero = torch.zeros_like(x)
        for tau in range(10, 0, -1):
            x = ddpm_step(x, tau, self.oracle_eps(x, tau, x0, s), s, zero)
        assert float((x - x0) ** 2) < 1e-3

    def test_round_trip_on_tensor(self):
        s = build_schedule(20, 1e-3, 0.08)
        gen = torch.Generator().manual_seed(12)
        x0 = torch.randn(4, 4, 8, 8, generator=gen, dtype=torch.float64)
        eps = torch.randn_like(x0)
        x = forward_jump(x0, 20, s, eps)
        zero = torch.zeros_like(x)
        for tau in range(20, 0, -1):
            x = ddpm_step(x, tau, self.oracle_eps(x, tau, x0, s), s, zero)
        assert float(((x - x0) ** 2).mean()) < 1e-3

    def test_small_beta_limit(self):
        s = build_schedule(5, 1e-10, 1e-9)
        x = torch.randn(3, 3, generator=torch.Generator().manual_seed(13), dtype=torch.float64)
        out = ddpm_step(x, 3, torch.zeros_like(x), s, torch.zeros_like(x))
        # x / sqrt(alpha) with alpha ~ 1
        assert torch.allclose(out, x, atol=1e-8)

    def test_shape_preserved(self):
        s = build_schedule(10, 1e-3, 0.05)
        x = torch.zeros(8, 4, 8, 8)
        out = ddpm_step(x, 5, torch.zeros_like(x), s, torch.zeros_like(x))
        assert out.shape == (8, 4, 8, 8)

    def test_tau_validation(self):
        s = build_schedule(10, 1e-3, 0.05)
        x = torch.zeros(2)
        with pytest.raises(ValidationError):
            ddpm_step(x, 0, x, s, x)
        with pytest.raises(ValidationError):
            ddpm_step(x, 11, x, s, x)
        with pytest.raises(ValidationError):
            ddpm_step(x, 5, x, s, x, prev_tau=5)

    def test_strided_posterior_variance_zero_at_end(self):
        # prev_tau=0 forces a deterministic step even with nonzero noise
        s = build_schedule(10, 1e-3, 0.05)
        x = torch.randn(3, generator=torch.Generator().manual_seed(14))
        a = ddpm_step(x, 4, torch.zeros_like(x), s, torch.randn_like(x), prev_tau=0)
        b = ddpm_step(x, 4, torch.zeros_like(x), s, torch.zeros_like(x), prev_tau=0)
        assert torch.equal(a, b)


class TestCfgCombine:
    def test_scale_one_is_conditional_bitexact(self):
        gen = torch.Generator().manual_seed(20)
        a, b = torch.randn(4, 4, generator=gen), torch.randn(4, 4, generator=gen)
        assert torch.equal(cfg_combine(a, b, 1.0), a)

    def test_scale_zero_is_unconditional_bitexact(self):
        gen = torch.Generator().manual_seed(21)
        a, b = torch.randn(4, 4, generator=gen), torch.randn(4, 4, generator=gen)
        assert torch.equal(cfg_combine(a, b, 0.0), b)

    def test_hand_value(self):
        a = torch.full((2,), 2.0)
        b = torch.full((2,), 1.0)
        assert torch.allclose(cfg_combine(a, b, 5.0), torch.full((2,), 6.0))

    def test_rejects_negative_scale_and_mismatch(self):
        with pytest.raises(ValidationError):
            cfg_combine(torch.zeros(2), torch.zeros(2), -0.5)
        with pytest.raises(ValidationError):
            cfg_combine(torch.zeros(2), torch.zeros(3), 1.0)

    @given(s1=st.floats(0.0, 10.0), s2=st.floats(0.0, 10.0), seed=st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_affine_in_scale(self, s1, s2, seed):
        gen = torch.Generator().manual_seed(seed)
        a = torch.randn(3, 3, generator=gen, dtype=torch.float64)
        b = torch.randn(3, 3, generator=gen, dtype=torch.float64)
        lhs = cfg_combine(a, b, s1) + cfg_combine(a, b, s2)
        rhs = 2.0 * cfg_combine(a, b, (s1 + s2) / 2.0)
        assert torch.max(torch.abs(lhs - rhs)) < 1e-6


class TestGuidanceConfig:
    def test_evenly_strided_full_resolution(self):
        g = GuidanceConfig.evenly_strided(10, 10, scale=1.0)
        assert g.stride_map == tuple(range(10, 0, -1))

    def test_evenly_strided_endpoints(self):
        g = GuidanceConfig.evenly_strided(1000, 50)
        assert g.stride_map[0] == 1000 and g.stride_map[-1] == 1
        assert len(g.stride_map) == 50
        assert all(a > b for a, b in zip(g.stride_map, g.stride_map[1:]))

    def test_rejects_invalid_maps(self):
        with pytest.raises(ValidationError):
            GuidanceConfig(scale=5.0, num_inference_steps=2, stride_map=(5, 2))  # no 1
        with pytest.raises(ValidationError):
            GuidanceConfig(scale=5.0, num_inference_steps=3, stride_map=(5, 5, 1))
        with pytest.raises(ValidationError):
            GuidanceConfig(scale=-1.0, num_inference_steps=2, stride_map=(2, 1))
        with pytest.raises(ValidationError):
            GuidanceConfig.evenly_strided(10, 11)


def toy_denoiser(feats: torch.Tensor, tau: int, cond: torch.Tensor) -> torch.Tensor:
    """Bounded deterministic stand-in: mixes latents, mask and condition."""
    z = feats[:, 0:4]
    m = feats[:, 8:9]
    bias = torch.tanh(cond.sum()) * 0.1
    return torch.tanh(z * 0.5 + m * 0.1 + bias)


class TestSampleLoop:
    def _inputs(self, t=4, h=8, w=8, tok=5, dim=6, seed=99):
        gen = torch.Generator().manual_seed(seed)
        seg = LatentVideo(torch.randn(t, 4, h, w, generator=gen))
        mask = torch.rand(t, 1, h, w, generator=gen)
        cond = torch.randn(tok, dim, generator=gen)
        return seg, mask, cond

    def test_deterministic_and_shaped(self):
        seg, mask, cond = self._inputs()
        sched = build_schedule(20, 1e-3, 0.05)
        g = GuidanceConfig.evenly_strided(20, 8, scale=5.0)
        a = sample_loop(toy_denoiser, seg, mask, cond, g, sched, seed=5)
        b = sample_loop(toy_denoiser, seg, mask, cond, g, sched, seed=5)
        assert torch.equal(a.data, b.data)
        assert a.data.shape == (4, 4, 8, 8)

    def test_cfg_collapse_matches_plain_ancestral_sampling(self):
        # scale=1 with full-resolution striding must equal an independently
        # written unguided conditional ancestral sampler, bit for bit.
        seg, mask, cond = self._inputs(t=3, h=4, w=4)
        sched = build_schedule(12, 1e-3, 0.05)
        g = GuidanceConfig.evenly_strided(12, 12, scale=1.0)
        out = sample_loop(toy_denoiser, seg, mask, cond, g, sched, seed=17)

        gen = torch.Generator().manual_seed(17)
        z = torch.randn(3, 4, 4, 4, generator=gen)
        for tau in range(12, 0, -1):
            feats = torch.cat([z, seg.data, mask], dim=1)
            eps = toy_denoiser(feats, tau, cond)
            noise = torch.randn(z.shape, generator=gen)
            z = ddpm_step(z, tau, eps, sched, noise, prev_tau=tau - 1)
        assert torch.equal(out.data, z)

    def test_scale_zero_matches_dropped_branch(self):
        seg, mask, cond = self._inputs(t=3, h=4, w=4)
        sched = build_schedule(12, 1e-3, 0.05)
        out = sample_loop(
            toy_denoiser, seg, mask, cond,
            GuidanceConfig.evenly_strided(12, 6, scale=0.0), sched, seed=3,
        )
        dropped = sample_loop(
            toy_denoiser, seg, mask, torch.zeros_like(cond),
            GuidanceConfig.evenly_strided(12, 6, scale=1.0), sched, seed=3,
        )
        assert torch.equal(out.data, dropped.data)

    def test_outputs_finite_for_bounded_denoiser(self):
        seg, mask, cond = self._inputs()
        sched = build_schedule(1000, 1e-4, 0.02)
        g = GuidanceConfig.evenly_strided(1000, 50, scale=5.0)
        out = sample_loop(toy_denoiser, seg, mask, cond, g, sched, seed=1)
        assert bool(torch.isfinite(out.data).all())

    def test_rejects_inconsistent_inputs(self):
        seg, mask, cond = self._inputs()
        sched = build_schedule(10, 1e-3, 0.05)
        g = GuidanceConfig.evenly_strided(10, 5)
        with pytest.raises(ValidationError):
            sample_loop(toy_denoiser, seg, mask[:, :, :4], cond, g, sched, seed=0)
        big = GuidanceConfig.evenly_strided(50, 5)
        with pytest.raises(ValidationError):
            sample_loop(toy_denoiser, seg, mask, cond, big, sched, seed=0)

    def test_propagates_denoiser_failure(self):
        seg, mask, cond = self._inputs()
        sched = build_schedule(10, 1e-3, 0.05)

        def broken(feats, tau, cond):
            raise RuntimeError("denoiser exploded")

        with pytest.raises(RuntimeError, match="denoiser exploded"):
            sample_loop(broken, seg, mask, cond, GuidanceConfig.evenly_strided(10, 5), sched, seed=0)


class TestLatentVideo:
    def test_rejects_wrong_channels(self):
        with pytest.raises(ValidationError):
            LatentVideo(torch.zeros(4, 3, 8, 8))
        with pytest.raises(ValidationError):
            LatentVideo(torch.zeros(4, 4, 8))
