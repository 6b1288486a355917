"""Rectified-flow training targets and the Euler guidance sampler.

The forward process is the straight line ``x_t = (1 - t) x_0 + t eps``
with velocity target ``eps - x_0``; training regresses that constant
velocity with mean squared error at logit-normal times.  Sampling runs
explicit Euler from ``t = 1`` down to ``t = 0`` on a uniform grid,
steering with classifier-free guidance between a conditioned and a
null-text velocity estimate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .conditioning import ConditionBundle, null_text_bundle
from .errors import NumericAbortError, ShapeMismatchError, ValidationError
from .latents import LatentGrid

__all__ = [
    "FlowSample",
    "SamplerConfig",
    "make_flow_sample",
    "flow_loss",
    "cfg_velocity",
    "euler_sample",
]

# model(latent, time, bundle) -> velocity
VelocityFn = Callable[[LatentGrid, float, ConditionBundle], LatentGrid]


@dataclass(frozen=True)
class FlowSample:
    """One training point on the straight path from data to noise.

    The noise endpoint is stored re-rounded as ``v_target + x0`` so the
    defining identity holds bitwise; at ``time`` 0 or 1 the mixture
    equals the respective endpoint exactly.
    """

    x0: LatentGrid
    eps: LatentGrid
    time: float
    xt: LatentGrid
    v_target: LatentGrid

    def __post_init__(self):
        if not 0.0 <= self.time <= 1.0:
            raise ValidationError(f"flow time must lie in [0, 1], got {self.time}")
        shape = self.x0.data.shape
        for name in ("eps", "xt", "v_target"):
            other = getattr(self, name).data.shape
            if other != shape:
                raise ShapeMismatchError(f"{name} shape {tuple(other)} != x0 {tuple(shape)}")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 9.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError(f"sampler needs at least one step, got {self.steps}")
        if not self.guidance_scale >= 0.0:
            raise ValidationError(f"guidance scale must be >= 0, got {self.guidance_scale}")


def logit_normal_time(rng: torch.Generator) -> float:
    """Sigmoid of a standard normal draw; support is the open (0, 1)."""
    z = torch.randn((), generator=rng, dtype=torch.float64)
    return float(torch.sigmoid(z))


def make_flow_sample(x0: LatentGrid, rng: torch.Generator,
                     time: float | None = None) -> FlowSample:
    """Draw noise (and, unless pinned, a logit-normal time) and build
    the interpolated state plus its velocity target."""
    if time is None:
        time = logit_normal_time(rng)
    elif not 0.0 <= time <= 1.0:
        raise ValidationError(f"flow time must lie in [0, 1], got {time}")
    data = x0.data
    eps = torch.randn(data.shape, generator=rng, dtype=data.dtype)
    v_target = eps - data
    eps = v_target + data  # re-round so v_target + x0 == eps bitwise
    if time == 0.0:
        xt = data.clone()
    elif time == 1.0:
        xt = eps.clone()
    else:
        xt = (1.0 - time) * data + time * eps
    frames = x0.source_frames
    return FlowSample(
        x0=x0,
        eps=LatentGrid(eps, source_frames=frames),
        time=time,
        xt=LatentGrid(xt, source_frames=frames),
        v_target=LatentGrid(v_target, source_frames=frames),
    )


def flow_loss(pred_v: LatentGrid, sample: FlowSample) -> torch.Tensor:
    """Mean squared error against the sample's velocity target.

    Returned as a scalar tensor so gradients can flow; take ``.item()``
    for logging.
    """
    if pred_v.data.shape != sample.v_target.data.shape:
        raise ShapeMismatchError(
            f"prediction shape {tuple(pred_v.data.shape)} != target "
            f"{tuple(sample.v_target.data.shape)}"
        )
    return (pred_v.data - sample.v_target.data).pow(2).mean()


def cfg_velocity(v_cond: LatentGrid, v_uncond: LatentGrid, scale: float) -> LatentGrid:
    """Guided velocity ``v_uncond + scale * (v_cond - v_uncond)``.

    Scales 1 and 0 short-circuit to the conditioned and unconditioned
    branches so those cases are bitwise exact.
    """
    if v_cond.data.shape != v_uncond.data.shape:
        raise ShapeMismatchError(
            f"guidance branches disagree: {tuple(v_cond.data.shape)} vs "
            f"{tuple(v_uncond.data.shape)}"
        )
    if scale == 1.0:
        return v_cond
    if scale == 0.0:
        return v_uncond
    data = v_uncond.data + scale * (v_cond.data - v_uncond.data)
    return LatentGrid(data, source_frames=v_cond.source_frames)


def euler_sample(model: VelocityFn, bundle: ConditionBundle,
                 config: SamplerConfig, rng: torch.Generator,
                 latent_shape: tuple[int, int, int, int],
                 null_bundle: ConditionBundle | None = None,
                 dtype: torch.dtype = torch.float32,
                 source_frames: int | None = None) -> LatentGrid:
    """Integrate dx/dt = -v from Gaussian noise at t = 1 down to t = 0.

    Both guidance branches see identical 3D conditions; only the prompt
    differs.  A non-finite state aborts with the offending step index.
    """
    if null_bundle is None:
        null_bundle = null_text_bundle(bundle)
    x = torch.randn(latent_shape, generator=rng, dtype=dtype)
    dt = 1.0 / config.steps
    for k in range(config.steps):
        t = (config.steps - k) / config.steps
        state = LatentGrid(x, source_frames=source_frames)
        try:
            v_cond = model(state, t, bundle)
            if config.guidance_scale == 1.0:
                v = v_cond  # skip the null branch entirely
            else:
                v_uncond = model(state, t, null_bundle)
                v = cfg_velocity(v_cond, v_uncond, config.guidance_scale)
        except NumericAbortError as err:
            if err.step is None:
                raise NumericAbortError(str(err), step=k) from err
            raise
        x = x - dt * v.data
        if not torch.isfinite(x).all():
            raise NumericAbortError(f"sampler state became non-finite at step {k}", step=k)
    return LatentGrid(x, source_frames=source_frames)
