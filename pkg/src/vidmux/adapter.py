"""Condition adapter: pixel-space condition stack -> latent-space feature.

A small strided 3D conv tower mirrors the codec's 8x spatial and 4x
temporal compression so its output aligns with the latent grid
elementwise.  The final projection is zero-initialized, which makes a
freshly built adapter contribute nothing until training moves it.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .conditioning import ConditionBundle
from .errors import NumericAbortError, ShapeMismatchError
from .latents import LatentGrid, group_reduce_time

COND_CHANNELS = 5  # pixel (3) + depth (1) + mask (1)

__all__ = ["COND_CHANNELS", "ConditionAdapter", "condition_stack", "inject"]


def condition_stack(bundle: ConditionBundle) -> torch.Tensor:
    """Concatenate pixel, depth, and mask into one (T, H, W, 5) tensor."""
    return torch.cat(
        [bundle.pixel_cond.data, bundle.depth_cond.data, bundle.mask.data], dim=-1
    )


class ConditionAdapter(nn.Module):
    """Four conv3d stages with stepwise 2x spatial pooling and a final
    grouped temporal reduction, landing on the latent grid's shape.

    Parameter count scales with ``latent_channels`` and stays a small
    fraction of any backbone preset.
    """

    def __init__(self, latent_channels: int, hidden_channels: int | None = None):
        super().__init__()
        if latent_channels < 1:
            raise ValueError(f"latent_channels must be positive, got {latent_channels}")
        hidden = hidden_channels if hidden_channels is not None else max(1, latent_channels // 4)
        self.latent_channels = latent_channels
        self.hidden_channels = hidden
        self.conv_in = nn.Conv3d(COND_CHANNELS, hidden, 3, padding=1)
        self.conv_mid1 = nn.Conv3d(hidden, hidden, 3, padding=1)
        self.conv_mid2 = nn.Conv3d(hidden, hidden, 3, padding=1)
        self.conv_out = nn.Conv3d(hidden, latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, bundle: ConditionBundle) -> LatentGrid:
        stack = condition_stack(bundle)
        x = stack.permute(3, 0, 1, 2).unsqueeze(0)  # (1, 5, T, H, W)
        x = F.silu(self.conv_in(x))
        x = F.avg_pool3d(x, kernel_size=(1, 2, 2))
        x = F.silu(self.conv_mid1(x))
        x = F.avg_pool3d(x, kernel_size=(1, 2, 2))
        x = F.silu(self.conv_mid2(x))
        x = F.avg_pool3d(x, kernel_size=(1, 2, 2))
        # (1, C, T, h, w) -> group frames like the codec, first frame kept
        x = group_reduce_time(x.squeeze(0).permute(1, 0, 2, 3))
        x = self.conv_out(x.permute(1, 0, 2, 3).unsqueeze(0))
        feature = x.squeeze(0).permute(1, 2, 3, 0)  # (t, h, w, c)
        if not torch.isfinite(feature).all():
            raise NumericAbortError("condition adapter produced non-finite activations")
        return LatentGrid(feature, source_frames=bundle.frames)


def inject(latent: LatentGrid, feature: LatentGrid) -> LatentGrid:
    """Add an adapter feature onto a latent grid of identical shape."""
    if latent.data.shape != feature.data.shape:
        raise ShapeMismatchError(
            f"latent {tuple(latent.data.shape)} and feature "
            f"{tuple(feature.data.shape)} do not align"
        )
    return LatentGrid(latent.data + feature.data, source_frames=latent.source_frames)
