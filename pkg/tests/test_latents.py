"""Codec shape laws, exactness guarantees, and validation errors."""

import pytest
import torch
from hypothesis import given, settings, strategies as st

from vidmux.errors import DimensionError, ShapeMismatchError, ValidationError
from vidmux.latents import (
    LatentGrid,
    ToyCodec,
    VideoTensor,
    group_expand_time,
    group_reduce_time,
    latent_frames,
)


def rand_video(gen, t=8, h=16, w=16, c=3, dtype=torch.float32):
    data = torch.rand(t, h, w, c, generator=gen, dtype=dtype) * 2 - 1
    return VideoTensor(data)


def block_constant_video(gen, t=8, h=16, w=16, c=3, dtype=torch.float64):
    """Content constant within every 8x8 block and every temporal group."""
    groups = latent_frames(t)
    coarse = torch.rand(groups, h // 8, w // 8, c, generator=gen, dtype=dtype) * 2 - 1
    full = group_expand_time(coarse, t)
    full = full.repeat_interleave(8, dim=1).repeat_interleave(8, dim=2)
    return VideoTensor(full)


class TestLatentFrames:
    def test_known_values(self):
        # (T, t) pairs: first frame kept for 4k+1, plain grouping for 4k
        for frames, expect in [(1, 1), (4, 1), (5, 2), (8, 2), (9, 3),
                               (12, 3), (13, 4), (49, 13), (96, 24), (97, 25)]:
            assert latent_frames(frames) == expect

    def test_invalid_counts(self):
        for frames in (2, 3, 6, 7, 10, 11):
            with pytest.raises(DimensionError):
                latent_frames(frames)


class TestVideoTensorValidation:
    def test_rejects_bad_rank(self):
        with pytest.raises(DimensionError):
            VideoTensor(torch.zeros(16, 16, 3))

    def test_rejects_bad_channel_count(self):
        with pytest.raises(DimensionError):
            VideoTensor(torch.zeros(1, 16, 16, 2))

    def test_rejects_non_multiple_of_eight(self):
        with pytest.raises(DimensionError):
            VideoTensor(torch.zeros(1, 12, 16, 3))
        with pytest.raises(DimensionError):
            VideoTensor(torch.zeros(1, 16, 20, 3))

    def test_rejects_bad_frame_counts(self):
        for frames in (2, 3, 6, 7):
            with pytest.raises(DimensionError):
                VideoTensor(torch.zeros(frames, 8, 8, 3))

    def test_rejects_out_of_range(self):
        data = torch.zeros(1, 8, 8, 3)
        data[0, 0, 0, 0] = 1.5
        with pytest.raises(ValidationError):
            VideoTensor(data)

    def test_rejects_non_finite(self):
        data = torch.zeros(1, 8, 8, 3)
        data[0, 1, 1, 1] = float("nan")
        with pytest.raises(ValidationError):
            VideoTensor(data)

    def test_rejects_integer_dtype(self):
        with pytest.raises(ValidationError):
            VideoTensor(torch.zeros(1, 8, 8, 3, dtype=torch.int32))

    def test_accepts_single_channel(self):
        VideoTensor(torch.zeros(4, 8, 8, 1))


class TestLatentGridValidation:
    def test_source_frames_consistency(self):
        LatentGrid(torch.zeros(3, 2, 2, 16), source_frames=9)
        with pytest.raises(DimensionError):
            LatentGrid(torch.zeros(3, 2, 2, 16), source_frames=8)

    def test_rejects_non_finite(self):
        data = torch.zeros(1, 2, 2, 4)
        data[0, 0, 0, 0] = float("inf")
        with pytest.raises(ValidationError):
            LatentGrid(data)


class TestShapeLaw:
    def test_flagship_size(self):
        codec = ToyCodec(3)
        assert codec.latent_shape(49, 128, 224) == (13, 16, 28, 192)

    def test_projected_width(self):
        codec = ToyCodec(3, latent_channels=16)
        assert codec.latent_shape(49, 128, 224) == (13, 16, 28, 16)

    def test_encode_matches_latent_shape_on_grid(self):
        gen = torch.Generator().manual_seed(0)
        codec = ToyCodec(3, latent_channels=16)
        for frames in (1, 4, 5, 8, 9, 13):
            for h in (8, 16, 24):
                for w in (8, 16):
                    video = rand_video(gen, frames, h, w)
                    grid = codec.encode(video)
                    assert tuple(grid.data.shape) == codec.latent_shape(frames, h, w)
                    assert grid.source_frames == frames
                    back = codec.decode(grid)
                    assert back.data.shape == video.data.shape


class TestRoundTrip:
    def test_exact_on_block_and_group_constant_content(self):
        gen = torch.Generator().manual_seed(1)
        codec = ToyCodec(3)
        for frames in (1, 8, 9):
            video = block_constant_video(gen, t=frames)
            back = codec.decode(codec.encode(video))
            assert torch.equal(back.data, video.data)

    def test_first_frame_survives_exactly(self):
        # T = 4k + 1 keeps frame 0 in its own group: no arithmetic touches it
        gen = torch.Generator().manual_seed(2)
        codec = ToyCodec(3)
        video = rand_video(gen, t=9)
        back = codec.decode(codec.encode(video))
        assert torch.equal(back.data[0], video.data[0])

    def test_error_equals_removed_temporal_variance(self):
        # decode(encode(v)) replaces each frame group by its mean, so the
        # squared error must equal the within-group deviation, computed
        # here by brute force
        gen = torch.Generator().manual_seed(3)
        codec = ToyCodec(3)
        video = rand_video(gen, t=8, dtype=torch.float64)
        back = codec.decode(codec.encode(video))
        err = ((back.data - video.data) ** 2).sum().item()
        oracle = 0.0
        data = video.data
        for g in range(2):
            group = data[4 * g:4 * g + 4]
            mean = group.mean(dim=0, keepdim=True)
            oracle += ((group - mean) ** 2).sum().item()
        assert err == pytest.approx(oracle, rel=1e-10)

    def test_linearity(self):
        gen = torch.Generator().manual_seed(4)
        codec = ToyCodec(3, latent_channels=16)
        a = rand_video(gen, dtype=torch.float64)
        b = rand_video(gen, dtype=torch.float64)
        mix = VideoTensor(0.25 * a.data + 0.5 * b.data)
        lhs = codec.encode(mix).data
        rhs = 0.25 * codec.encode(a).data + 0.5 * codec.encode(b).data
        assert torch.allclose(lhs, rhs, atol=1e-12)

    def test_decode_needs_frame_count(self):
        grid = LatentGrid(torch.zeros(2, 2, 2, 192))
        with pytest.raises(ValidationError):
            ToyCodec(3).decode(grid)
        ToyCodec(3).decode(grid, frames=8)


class TestProjection:
    def test_rows_orthonormal(self):
        codec = ToyCodec(3, latent_channels=16)
        p = codec.projection
        eye = p @ p.T
        assert torch.allclose(eye, torch.eye(16, dtype=p.dtype), atol=1e-12)

    def test_leading_rows_are_patch_means(self):
        codec = ToyCodec(3, latent_channels=16)
        p = codec.projection
        for c in range(3):
            expect = torch.zeros(192, dtype=p.dtype)
            expect[c * 64:(c + 1) * 64] = 0.125
            assert torch.allclose(p[c], expect, atol=1e-12)

    def test_block_flat_content_survives_projection(self):
        gen = torch.Generator().manual_seed(5)
        codec = ToyCodec(3, latent_channels=16)
        video = block_constant_video(gen, t=8)
        back = codec.decode(codec.encode(video))
        assert torch.allclose(back.data, video.data, atol=1e-12)

    def test_full_width_skips_projection(self):
        assert ToyCodec(3, latent_channels=192).projection is None

    def test_invalid_width(self):
        with pytest.raises(DimensionError):
            ToyCodec(3, latent_channels=2)
        with pytest.raises(DimensionError):
            ToyCodec(3, latent_channels=500)

    def test_projection_seed_changes_tail_rows_only(self):
        a = ToyCodec(3, latent_channels=16, projection_seed=1).projection
        b = ToyCodec(3, latent_channels=16, projection_seed=2).projection
        assert torch.allclose(a[:3], b[:3], atol=1e-12)
        assert not torch.allclose(a[3:], b[3:])


class TestTemporalGrouping:
    def test_mean_of_equal_values_is_bitwise_exact(self):
        gen = torch.Generator().manual_seed(6)
        value = torch.rand(5, 3, generator=gen, dtype=torch.float64)
        stacked = value.unsqueeze(0).expand(8, -1, -1).contiguous()
        reduced = group_reduce_time(stacked)
        assert torch.equal(reduced[0], value)
        assert torch.equal(reduced[1], value)

    def test_expand_then_reduce_is_identity(self):
        gen = torch.Generator().manual_seed(7)
        for frames in (1, 4, 5, 12, 13):
            grid = torch.rand(latent_frames(frames), 2, 2, generator=gen)
            back = group_reduce_time(group_expand_time(grid, frames))
            assert torch.equal(back, grid)

    def test_expand_rejects_mismatched_counts(self):
        with pytest.raises(ShapeMismatchError):
            group_expand_time(torch.zeros(3, 2), 8)


class TestCodecErrors:
    def test_channel_mismatch(self):
        codec = ToyCodec(3)
        with pytest.raises(ShapeMismatchError):
            codec.encode(VideoTensor(torch.zeros(1, 8, 8, 1)))

    def test_decode_channel_mismatch(self):
        codec = ToyCodec(3, latent_channels=16)
        with pytest.raises(ShapeMismatchError):
            codec.decode(LatentGrid(torch.zeros(1, 1, 1, 24)), frames=1)


@settings(max_examples=25, deadline=None)
@given(
    frames=st.sampled_from([1, 4, 5, 8, 9, 12, 13]),
    seed=st.integers(min_value=0, max_value=2**31 - 1),
)
def test_round_trip_never_increases_energy(frames, seed):
    # group averaging is a projection: it can only remove energy
    gen = torch.Generator().manual_seed(seed)
    codec = ToyCodec(3)
    video = rand_video(gen, t=frames, dtype=torch.float64)
    back = codec.decode(codec.encode(video))
    assert (back.data ** 2).sum() <= (video.data ** 2).sum() + 1e-9
