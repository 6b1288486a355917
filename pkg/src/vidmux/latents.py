"""Toy video <-> latent codec with fixed compression factors.

The codec stands in for a learned video autoencoder.  It folds 8x8
spatial patches into channels and averages frames in groups of four
(the first frame of a ``T = 4k + 1`` clip is kept intact), so every
operation is linear and deterministic, and the round trip is exactly
invertible wherever no temporal averaging happens.

An optional channel projection maps the folded features onto a smaller
orthonormal basis whose first rows are the per-channel patch means, so
block-flat content survives the projection essentially unchanged while
the latent width stays small enough for a desk-scale backbone.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DimensionError, ShapeMismatchError, ValidationError

SPATIAL_FACTOR = 8
TEMPORAL_GROUP = 4

__all__ = [
    "SPATIAL_FACTOR",
    "TEMPORAL_GROUP",
    "VideoTensor",
    "LatentGrid",
    "ToyCodec",
    "latent_frames",
    "group_reduce_time",
    "group_expand_time",
]


@dataclass(frozen=True)
class VideoTensor:
    """A pixel-space clip shaped ``(T, H, W, C)`` with values in [-1, 1].

    ``C`` is 3 for color content and 1 for scalar maps (depth, masks).
    ``H`` and ``W`` must be multiples of 8 and ``T`` must be 1 or satisfy
    ``T % 4 in (0, 1)`` so the temporal grouping below is well defined.
    """

    data: torch.Tensor

    def __post_init__(self):
        d = self.data
        if not isinstance(d, torch.Tensor):
            raise ValidationError(f"expected a torch.Tensor, got {type(d).__name__}")
        if d.ndim != 4:
            raise DimensionError(f"video tensor must be rank 4 (T, H, W, C), got rank {d.ndim}")
        if not d.dtype.is_floating_point:
            raise ValidationError(f"video tensor must be floating point, got {d.dtype}")
        t, h, w, c = d.shape
        if t < 1:
            raise DimensionError("video tensor needs at least one frame")
        if t != 1 and t % TEMPORAL_GROUP not in (0, 1):
            raise DimensionError(
                f"frame count {t} unsupported: T must be 1, a multiple of 4, or 4k+1"
            )
        if h % SPATIAL_FACTOR or w % SPATIAL_FACTOR:
            raise DimensionError(f"spatial size {h}x{w} must be a multiple of {SPATIAL_FACTOR}")
        if c not in (1, 3):
            raise DimensionError(f"channel count must be 1 or 3, got {c}")
        if not torch.isfinite(d).all():
            raise ValidationError("video tensor contains non-finite values")
        if d.abs().max().item() > 1.0:
            raise ValidationError("video tensor values must lie in [-1, 1]")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]


@dataclass(frozen=True)
class LatentGrid:
    """A latent clip shaped ``(t, h, w, c)``, unbounded real values.

    ``source_frames`` remembers the pixel-space frame count the grid was
    encoded from (or is destined for), since ``T -> t`` is not invertible
    on its own: both ``T = 4k`` and ``T = 4k + 1`` land on nearby grids.
    """

    data: torch.Tensor
    source_frames: int | None = None

    def __post_init__(self):
        d = self.data
        if not isinstance(d, torch.Tensor):
            raise ValidationError(f"expected a torch.Tensor, got {type(d).__name__}")
        if d.ndim != 4:
            raise DimensionError(f"latent grid must be rank 4 (t, h, w, c), got rank {d.ndim}")
        if not d.dtype.is_floating_point:
            raise ValidationError(f"latent grid must be floating point, got {d.dtype}")
        if min(d.shape) < 1:
            raise DimensionError(f"latent grid has an empty axis: {tuple(d.shape)}")
        if not torch.isfinite(d).all():
            raise ValidationError("latent grid contains non-finite values")
        if self.source_frames is not None and latent_frames(self.source_frames) != d.shape[0]:
            raise DimensionError(
                f"source_frames={self.source_frames} maps to "
                f"{latent_frames(self.source_frames)} latent frames, grid has {d.shape[0]}"
            )

    @property
    def t(self) -> int:
        return self.data.shape[0]

    @property
    def h(self) -> int:
        return self.data.shape[1]

    @property
    def w(self) -> int:
        return self.data.shape[2]

    @property
    def c(self) -> int:
        return self.data.shape[3]


def latent_frames(frames: int) -> int:
    """Number of latent frames a ``frames``-long clip encodes to."""
    if frames == 1:
        return 1
    if frames % TEMPORAL_GROUP == 1:
        return (frames - 1) // TEMPORAL_GROUP + 1
    if frames % TEMPORAL_GROUP == 0:
        return frames // TEMPORAL_GROUP
    raise DimensionError(f"frame count {frames} unsupported: T must be 1, 4k, or 4k+1")


def _mean_of_four(groups: torch.Tensor) -> torch.Tensor:
    # groups: (G, 4, ...).  Pairwise summation keeps the mean of four
    # equal values bitwise equal to that value, which the exactness
    # guarantees below rely on.
    return ((groups[:, 0] + groups[:, 1]) + (groups[:, 2] + groups[:, 3])) * 0.25


def group_reduce_time(x: torch.Tensor) -> torch.Tensor:
    """Average groups of four along axis 0, keeping frame 0 when T = 4k+1."""
    t = x.shape[0]
    if t == 1:
        return x.clone()
    if t % TEMPORAL_GROUP == 1:
        body = x[1:].reshape(-1, TEMPORAL_GROUP, *x.shape[1:])
        return torch.cat([x[:1], _mean_of_four(body)], dim=0)
    if t % TEMPORAL_GROUP == 0:
        return _mean_of_four(x.reshape(-1, TEMPORAL_GROUP, *x.shape[1:]))
    raise DimensionError(f"frame count {t} unsupported for temporal grouping")


def group_expand_time(x: torch.Tensor, frames: int) -> torch.Tensor:
    """Invert :func:`group_reduce_time` by repeating each group mean."""
    if latent_frames(frames) != x.shape[0]:
        raise ShapeMismatchError(
            f"{x.shape[0]} latent frames cannot expand to {frames} pixel frames"
        )
    if frames == 1:
        return x.clone()
    if frames % TEMPORAL_GROUP == 1:
        body = x[1:].repeat_interleave(TEMPORAL_GROUP, dim=0)
        return torch.cat([x[:1], body], dim=0)
    return x.repeat_interleave(TEMPORAL_GROUP, dim=0)


def _fold_space(x: torch.Tensor) -> torch.Tensor:
    """(T, H, W, C) -> (T, H/8, W/8, C*64); feature index is c*64 + dy*8 + dx."""
    t, h, w, c = x.shape
    f = SPATIAL_FACTOR
    y = x.permute(0, 3, 1, 2).reshape(t, c, h // f, f, w // f, f)
    y = y.permute(0, 2, 4, 1, 3, 5)
    return y.reshape(t, h // f, w // f, c * f * f)


def _unfold_space(z: torch.Tensor, channels: int) -> torch.Tensor:
    """Inverse of :func:`_fold_space`."""
    t, hh, ww, folded = z.shape
    f = SPATIAL_FACTOR
    if folded != channels * f * f:
        raise ShapeMismatchError(f"{folded} folded channels do not unfold to {channels} channels")
    y = z.reshape(t, hh, ww, channels, f, f).permute(0, 3, 1, 4, 2, 5)
    return y.reshape(t, channels, hh * f, ww * f).permute(0, 2, 3, 1)


def _dc_preserving_basis(rows: int, cols: int, channels: int, seed: int) -> torch.Tensor:
    """Orthonormal (rows, cols) matrix whose first ``channels`` rows are
    per-channel patch means (value 1/8 on the channel's 64 slots)."""
    block = cols // channels
    cand = torch.zeros(cols, rows, dtype=torch.float64)
    scale = 1.0 / float(block) ** 0.5
    for c in range(channels):
        cand[c * block:(c + 1) * block, c] = scale
    gen = torch.Generator().manual_seed(seed)
    cand[:, channels:] = torch.randn(cols, rows - channels, generator=gen, dtype=torch.float64)
    q, r = torch.linalg.qr(cand)
    q = q * torch.sign(torch.diagonal(r)).unsqueeze(0)
    return q.T.contiguous()


class ToyCodec:
    """Linear pixel <-> latent codec with 8x spatial and 4x temporal folding.

    With ``latent_channels`` unset the latent width is the full folded
    width (``64 * pixel_channels``) and the spatial fold is exactly
    invertible.  Setting ``latent_channels`` inserts an orthonormal
    projection whose leading rows preserve per-patch means, trading
    exact invertibility on textured content for a narrow latent.
    """

    def __init__(self, pixel_channels: int = 3, latent_channels: int | None = None,
                 projection_seed: int = 101):
        if pixel_channels not in (1, 3):
            raise DimensionError(f"pixel channel count must be 1 or 3, got {pixel_channels}")
        folded = SPATIAL_FACTOR * SPATIAL_FACTOR * pixel_channels
        self.pixel_channels = pixel_channels
        self.projection: torch.Tensor | None
        if latent_channels is None or latent_channels == folded:
            self.latent_channels = folded
            self.projection = None
        else:
            if not pixel_channels <= latent_channels <= folded:
                raise DimensionError(
                    f"latent channel count must lie in [{pixel_channels}, {folded}], "
                    f"got {latent_channels}"
                )
            self.latent_channels = latent_channels
            self.projection = _dc_preserving_basis(
                latent_channels, folded, pixel_channels, projection_seed
            )

    def encode(self, video: VideoTensor) -> LatentGrid:
        if video.channels != self.pixel_channels:
            raise ShapeMismatchError(
                f"codec expects {self.pixel_channels}-channel video, got {video.channels}"
            )
        z = group_reduce_time(_fold_space(video.data))
        if self.projection is not None:
            z = z @ self.projection.T.to(z.dtype)
        return LatentGrid(z, source_frames=video.frames)

    def decode(self, latent: LatentGrid, frames: int | None = None) -> VideoTensor:
        if frames is None:
            frames = latent.source_frames
        if frames is None:
            raise ValidationError("decode needs a frame count: latent has no source_frames")
        z = latent.data
        if self.projection is not None:
            if latent.c != self.latent_channels:
                raise ShapeMismatchError(
                    f"latent has {latent.c} channels, codec expects {self.latent_channels}"
                )
            z = z @ self.projection.to(z.dtype)
        x = _unfold_space(group_expand_time(z, frames), self.pixel_channels)
        return VideoTensor(x.clamp(-1.0, 1.0))

    def latent_shape(self, frames: int, height: int, width: int) -> tuple[int, int, int, int]:
        """Latent grid shape for a pixel clip of the given extent."""
        if height % SPATIAL_FACTOR or width % SPATIAL_FACTOR:
            raise DimensionError(f"spatial size {height}x{width} must be a multiple of 8")
        return (
            latent_frames(frames),
            height // SPATIAL_FACTOR,
            width // SPATIAL_FACTOR,
            self.latent_channels,
        )
