"""Condition adapter: shape law, zero start, size budget, gradients."""

import pytest
import torch

from vidmux.adapter import COND_CHANNELS, ConditionAdapter, condition_stack, inject
from vidmux.backbone import get_preset, parameter_count
from vidmux.conditioning import TaskTag, build_condition
from vidmux.errors import NumericAbortError, ShapeMismatchError
from vidmux.latents import LatentGrid, ToyCodec, VideoTensor


def bundle_of(gen, t=8, h=16, w=16, task=TaskTag.VINP):
    clip = VideoTensor(torch.rand(t, h, w, 3, generator=gen) * 2 - 1)
    return build_condition(clip, task, "a canvas boat", gen)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(31)


class TestStack:
    def test_five_channels(self, gen):
        bundle = bundle_of(gen)
        stacked = condition_stack(bundle)
        assert stacked.shape == (8, 16, 16, COND_CHANNELS)
        assert torch.equal(stacked[..., :3], bundle.pixel_cond.data)
        assert torch.equal(stacked[..., 3:4], bundle.depth_cond.data)
        assert torch.equal(stacked[..., 4:], bundle.mask.data)


class TestShapeLaw:
    def test_matches_codec_grid(self, gen):
        adapter = ConditionAdapter(16)
        codec = ToyCodec(3, latent_channels=16)
        for t, h, w in ((1, 8, 8), (4, 16, 24), (9, 32, 16), (8, 24, 24)):
            task = TaskTag.IINP if t == 1 else TaskTag.VINP
            bundle = bundle_of(gen, t, h, w, task=task)
            feature = adapter(bundle)
            assert tuple(feature.data.shape) == codec.latent_shape(t, h, w)

    def test_flagship_shape(self, gen):
        adapter = ConditionAdapter(16)
        clip = VideoTensor(torch.rand(49, 128, 224, 3, generator=gen) * 2 - 1)
        bundle = build_condition(clip, TaskTag.I2V, "x", gen)
        assert tuple(adapter(bundle).data.shape) == (13, 16, 28, 16)


class TestZeroStart:
    def test_fresh_adapter_emits_zero(self, gen):
        # the final projection starts at zero so conditioning ramps in
        adapter = ConditionAdapter(16)
        feature = adapter(bundle_of(gen))
        assert feature.data.abs().max() == 0

    def test_trained_adapter_departs_from_zero(self, gen):
        adapter = ConditionAdapter(16)
        with torch.no_grad():
            adapter.conv_out.weight.normal_(generator=gen)
        feature = adapter(bundle_of(gen))
        assert feature.data.abs().max() > 0


class TestBudget:
    def test_under_one_percent_of_backbone(self):
        for preset in ("toy", "2b", "8b"):
            config = get_preset(preset)
            adapter_params = ConditionAdapter(16).parameter_count()
            backbone_params = parameter_count(config, 16)
            assert adapter_params < 0.01 * backbone_params

    def test_count_matches_torch(self):
        adapter = ConditionAdapter(16)
        assert adapter.parameter_count() == sum(p.numel() for p in adapter.parameters())


class TestGradients:
    def test_all_convolutions_receive_gradients(self, gen):
        adapter = ConditionAdapter(16).double()
        with torch.no_grad():
            for param in adapter.parameters():
                param.add_(torch.randn(param.shape, generator=gen, dtype=torch.float64) * 0.05)
        clip = VideoTensor(torch.rand(8, 16, 16, 3, generator=gen, dtype=torch.float64) * 2 - 1)
        bundle = build_condition(clip, TaskTag.VOUTP, "x", gen)
        adapter(bundle).data.pow(2).sum().backward()
        for name, param in adapter.named_parameters():
            assert param.grad is not None, name
            assert torch.isfinite(param.grad).all(), name
            assert param.grad.abs().max() > 0, name

    def test_finite_differences(self, gen):
        torch.set_num_threads(1)
        adapter = ConditionAdapter(16).double()
        with torch.no_grad():
            for param in adapter.parameters():
                param.add_(torch.randn(param.shape, generator=gen, dtype=torch.float64) * 0.05)
        clip = VideoTensor(torch.rand(4, 16, 16, 3, generator=gen, dtype=torch.float64) * 2 - 1)
        bundle = build_condition(clip, TaskTag.VINP, "x", gen)

        def loss_value():
            return adapter(bundle).data.pow(2).sum()

        adapter.zero_grad()
        loss_value().backward()
        step = 1e-5
        for name, param in adapter.named_parameters():
            flat = param.detach().reshape(-1)
            idx = int(param.grad.reshape(-1).abs().argmax().item())
            with torch.no_grad():
                original = flat[idx].item()
                flat[idx] = original + step
                up = loss_value().item()
                flat[idx] = original - step
                down = loss_value().item()
                flat[idx] = original
            fd = (up - down) / (2 * step)
            an = param.grad.reshape(-1)[idx].item()
            assert abs(fd - an) <= 1e-9 + 1e-4 * max(abs(fd), abs(an)), name


class TestInject:
    def test_adds_feature(self, gen):
        latent = LatentGrid(torch.randn(2, 2, 2, 16, generator=gen), source_frames=8)
        feature = LatentGrid(torch.randn(2, 2, 2, 16, generator=gen))
        merged = inject(latent, feature)
        assert torch.equal(merged.data, latent.data + feature.data)
        assert merged.source_frames == 8

    def test_shape_mismatch(self, gen):
        latent = LatentGrid(torch.randn(2, 2, 2, 16, generator=gen))
        feature = LatentGrid(torch.randn(1, 2, 2, 16, generator=gen))
        with pytest.raises(ShapeMismatchError):
            inject(latent, feature)


class TestNumericGuard:
    def test_overflow_aborts(self, gen):
        adapter = ConditionAdapter(16)
        with torch.no_grad():
            for param in adapter.parameters():
                param.fill_(1e30)
        with pytest.raises(NumericAbortError):
            adapter(bundle_of(gen))
