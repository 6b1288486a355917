"""Rectified-flow identities, guidance arithmetic, and the Euler sampler."""

import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from vidmux.conditioning import TaskTag, build_condition, null_text_bundle
from vidmux.errors import NumericAbortError, ValidationError
from vidmux.flow import (
    FlowSample,
    SamplerConfig,
    cfg_velocity,
    euler_sample,
    flow_loss,
    logit_normal_time,
    make_flow_sample,
)
from vidmux.latents import LatentGrid, VideoTensor


def rand_latent(gen, shape=(2, 2, 2, 8), dtype=torch.float32, frames=None):
    return LatentGrid(
        torch.randn(shape, generator=gen, dtype=dtype), source_frames=frames
    )


def any_bundle(gen, t=4):
    clip = VideoTensor(torch.rand(t, 16, 16, 3, generator=gen) * 2 - 1)
    return build_condition(clip, TaskTag.I2V, "a kite", gen)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(23)


class TestFlowSample:
    def test_endpoint_zero_is_data(self, gen):
        x0 = rand_latent(gen)
        sample = make_flow_sample(x0, gen, time=0.0)
        assert torch.equal(sample.xt.data, x0.data)

    def test_endpoint_one_is_noise(self, gen):
        x0 = rand_latent(gen)
        sample = make_flow_sample(x0, gen, time=1.0)
        assert torch.equal(sample.xt.data, sample.eps.data)

    def test_velocity_additive_identity(self, gen):
        for _ in range(50):
            sample = make_flow_sample(rand_latent(gen), gen)
            assert torch.equal(sample.v_target.data + sample.x0.data, sample.eps.data)

    def test_interpolation_formula(self, gen):
        x0 = rand_latent(gen, dtype=torch.float64)
        sample = make_flow_sample(x0, gen, time=0.375)
        expect = (1 - 0.375) * x0.data + 0.375 * sample.eps.data
        assert torch.equal(sample.xt.data, expect)

    def test_time_range_enforced(self, gen):
        with pytest.raises(ValidationError):
            make_flow_sample(rand_latent(gen), gen, time=1.5)

    def test_deterministic_per_seed(self):
        x0 = rand_latent(torch.Generator().manual_seed(1))
        a = make_flow_sample(x0, torch.Generator().manual_seed(9))
        b = make_flow_sample(x0, torch.Generator().manual_seed(9))
        assert a.time == b.time
        assert torch.equal(a.eps.data, b.eps.data)
        assert torch.equal(a.xt.data, b.xt.data)

    def test_source_frames_threaded(self, gen):
        x0 = rand_latent(gen, shape=(2, 2, 2, 8), frames=8)
        sample = make_flow_sample(x0, gen)
        assert sample.xt.source_frames == 8
        assert sample.v_target.source_frames == 8


class TestLogitNormalTime:
    def test_open_unit_interval(self):
        gen = torch.Generator().manual_seed(3)
        draws = [logit_normal_time(gen) for _ in range(10000)]
        assert all(0.0 < t < 1.0 for t in draws)

    def test_median_near_half(self):
        # sigmoid of a standard normal is symmetric around 0.5
        gen = torch.Generator().manual_seed(4)
        draws = [logit_normal_time(gen) for _ in range(10000)]
        mean = sum(draws) / len(draws)
        assert abs(mean - 0.5) < 0.01

    def test_mass_concentrates_centrally(self):
        gen = torch.Generator().manual_seed(5)
        draws = [logit_normal_time(gen) for _ in range(10000)]
        central = sum(1 for t in draws if 0.25 < t < 0.75)
        # P(0.25 < sigmoid(z) < 0.75) = P(|z| < log 3) ~ 0.729
        assert abs(central / len(draws) - 0.729) < 0.03


class TestFlowLoss:
    def test_zero_iff_exact(self, gen):
        sample = make_flow_sample(rand_latent(gen), gen)
        assert flow_loss(sample.v_target, sample).item() == 0.0

    def test_matches_mean_square_oracle(self, gen):
        sample = make_flow_sample(rand_latent(gen, dtype=torch.float64), gen)
        pred = LatentGrid(sample.v_target.data + 0.25)
        loss = flow_loss(pred, sample).item()
        assert loss == pytest.approx(0.0625, rel=1e-12)

    def test_shape_mismatch_rejected(self, gen):
        sample = make_flow_sample(rand_latent(gen), gen)
        with pytest.raises(ValidationError):
            flow_loss(LatentGrid(torch.zeros(1, 2, 2, 8)), sample)


class TestGuidance:
    def test_scale_one_returns_conditional(self, gen):
        v_c, v_u = rand_latent(gen), rand_latent(gen)
        assert cfg_velocity(v_c, v_u, 1.0) is v_c

    def test_scale_zero_returns_unconditional(self, gen):
        v_c, v_u = rand_latent(gen), rand_latent(gen)
        assert cfg_velocity(v_c, v_u, 0.0) is v_u

    def test_affine_formula(self, gen):
        v_c = rand_latent(gen, dtype=torch.float64)
        v_u = rand_latent(gen, dtype=torch.float64)
        out = cfg_velocity(v_c, v_u, 9.0)
        expect = v_u.data + 9.0 * (v_c.data - v_u.data)
        assert torch.allclose(out.data, expect, atol=1e-12)

    def test_linear_in_scale(self, gen):
        v_c = rand_latent(gen, dtype=torch.float64)
        v_u = rand_latent(gen, dtype=torch.float64)
        at = lambda s: cfg_velocity(v_c, v_u, s).data
        lhs = at(5.0) - at(3.0)
        rhs = 2.0 * (at(2.0) - at(1.0))
        assert torch.allclose(lhs, rhs, atol=1e-10)


class TestSamplerConfig:
    def test_defaults(self):
        config = SamplerConfig()
        assert config.steps == 50
        assert config.guidance_scale == 9.0

    def test_validation(self):
        with pytest.raises(ValidationError):
            SamplerConfig(steps=0)


class TestEulerSampler:
    def test_linear_transport_is_exact(self, gen):
        # v = (x - a) / t moves noise straight to a; Euler reproduces
        # the line to rounding error at any step count
        a = torch.randn(1, 2, 2, 4, generator=gen, dtype=torch.float64)
        bundle = any_bundle(gen)

        def velocity(latent, t, b):
            return LatentGrid((latent.data - a) / t,
                              source_frames=latent.source_frames)

        out = euler_sample(
            velocity, bundle, SamplerConfig(steps=25, guidance_scale=1.0),
            torch.Generator().manual_seed(0), (1, 2, 2, 4), dtype=torch.float64,
        )
        assert (out.data - a).abs().max().item() < 1e-12

    def test_first_order_error_on_curved_field(self, gen):
        # integrating dx/dt = a - x from t = 1 down to 0 gives
        # x(0) = a + (x(1) - a) * e; Euler error must shrink linearly
        # in the step size
        a = torch.randn(1, 2, 2, 4, generator=gen, dtype=torch.float64)
        bundle = any_bundle(gen)

        def velocity(latent, t, b):
            return LatentGrid(a - latent.data, source_frames=latent.source_frames)

        errors = []
        for steps in (10, 20, 40, 80):
            seed = torch.Generator().manual_seed(12)
            x1 = torch.randn(1, 2, 2, 4, generator=seed, dtype=torch.float64)
            exact = a + (x1 - a) * math.e
            out = euler_sample(
                velocity, bundle, SamplerConfig(steps=steps, guidance_scale=1.0),
                torch.Generator().manual_seed(12), (1, 2, 2, 4), dtype=torch.float64,
            )
            errors.append((out.data - exact).abs().mean().item())
        ratios = [errors[i] / errors[i + 1] for i in range(3)]
        for ratio in ratios:
            assert 1.7 < ratio < 2.3

    def test_scale_one_matches_pure_conditional_rollout(self, gen):
        # the guided path at scale 1 must be bitwise the conditional
        # trajectory even for a prompt-sensitive velocity field
        bundle = any_bundle(gen)

        def velocity(latent, t, b):
            shift = 1.0 if b.prompt else -1.0
            return LatentGrid(latent.data * 0.3 + shift,
                              source_frames=latent.source_frames)

        out = euler_sample(
            velocity, bundle, SamplerConfig(steps=20, guidance_scale=1.0),
            torch.Generator().manual_seed(5), (1, 2, 2, 4),
        )
        x = torch.randn(1, 2, 2, 4, generator=torch.Generator().manual_seed(5))
        for k in range(20):
            x = x - (1.0 / 20) * (x * 0.3 + 1.0)
        assert torch.equal(out.data, x)

    def test_guidance_changes_trajectory(self, gen):
        bundle = any_bundle(gen)

        def velocity(latent, t, b):
            shift = 1.0 if b.prompt else -1.0
            return LatentGrid(latent.data * 0.3 + shift,
                              source_frames=latent.source_frames)

        runs = {}
        for scale in (1.0, 9.0):
            runs[scale] = euler_sample(
                velocity, bundle, SamplerConfig(steps=10, guidance_scale=scale),
                torch.Generator().manual_seed(5), (1, 2, 2, 4),
            )
        assert not torch.equal(runs[1.0].data, runs[9.0].data)

    def test_null_bundle_defaults_to_null_text(self, gen):
        bundle = any_bundle(gen)
        seen = []

        def velocity(latent, t, b):
            seen.append(b.prompt)
            return LatentGrid(torch.zeros_like(latent.data),
                              source_frames=latent.source_frames)

        euler_sample(
            velocity, bundle, SamplerConfig(steps=2, guidance_scale=9.0),
            torch.Generator().manual_seed(1), (1, 2, 2, 4),
        )
        assert set(seen) == {bundle.prompt, ""}

    def test_scale_one_skips_null_branch(self, gen):
        bundle = any_bundle(gen)
        seen = []

        def velocity(latent, t, b):
            seen.append(b.prompt)
            return LatentGrid(torch.zeros_like(latent.data),
                              source_frames=latent.source_frames)

        euler_sample(
            velocity, bundle, SamplerConfig(steps=4, guidance_scale=1.0),
            torch.Generator().manual_seed(1), (1, 2, 2, 4),
        )
        assert seen == [bundle.prompt] * 4

    def test_model_abort_gains_step_index(self, gen):
        # a model blowing up mid-run surfaces the offending step
        bundle = any_bundle(gen)
        calls = [0]

        def velocity(latent, t, b):
            calls[0] += 1
            if calls[0] > 3:
                raise NumericAbortError("velocity model produced non-finite outputs")
            return LatentGrid(torch.zeros_like(latent.data),
                              source_frames=latent.source_frames)

        with pytest.raises(NumericAbortError) as info:
            euler_sample(
                velocity, bundle, SamplerConfig(steps=8, guidance_scale=1.0),
                torch.Generator().manual_seed(1), (1, 2, 2, 4),
            )
        assert info.value.step == 3

    def test_source_frames_threaded(self, gen):
        bundle = any_bundle(gen)

        def velocity(latent, t, b):
            return LatentGrid(torch.zeros_like(latent.data),
                              source_frames=latent.source_frames)

        out = euler_sample(
            velocity, bundle, SamplerConfig(steps=2, guidance_scale=1.0),
            torch.Generator().manual_seed(1), (2, 2, 2, 4), source_frames=8,
        )
        assert out.source_frames == 8


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=2**31 - 1),
    time=st.floats(min_value=0.0, max_value=1.0),
)
def test_flow_identities_property(seed, time):
    gen = torch.Generator().manual_seed(seed)
    x0 = rand_latent(gen, dtype=torch.float64)
    sample = make_flow_sample(x0, gen, time=time)
    assert torch.equal(sample.v_target.data + sample.x0.data, sample.eps.data)
    expect = (1 - time) * x0.data + time * sample.eps.data
    assert torch.allclose(sample.xt.data, expect, atol=1e-12)
