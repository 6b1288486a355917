"""Task tags and unified 3D condition construction.

Every task, generative or manipulative, is expressed through the same
three aligned tensors: a pixel condition (3 channels), a depth condition
(1 channel), and a binary mask (1 channel) that is 1 wherever the model
may condition on the other two.  Pixel and depth are exactly zero
outside the mask, a plain text-to-X bundle is all-zero, and the task
identity additionally rides on the prompt as a textual suffix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn.functional as F

from .errors import (
    EmptyPromptError,
    ShapeMismatchError,
    TaskMismatchError,
    ValidationError,
)
from .latents import VideoTensor

NULL_PROMPT = ""

# Tasks that window a clip from its ends draw the window length from
# this inclusive range.
CLIP_WINDOW_MIN = 8
CLIP_WINDOW_MAX = 16

# Minimum frame count before end-windowed tasks leave room to generate.
EXTENSION_MIN_FRAMES = CLIP_WINDOW_MAX + 1

SR_FACTOR_MIN = 2
SR_FACTOR_MAX = 6

STYLE_INSTRUCTION = "apply an oil painting style"

_LUMA_WEIGHTS = (0.299, 0.587, 0.114)

__all__ = [
    "TaskTag",
    "VIDEO_TASKS",
    "IMAGE_TASKS",
    "ConditionBundle",
    "ConditionOptions",
    "NULL_PROMPT",
    "STYLE_INSTRUCTION",
    "build_condition",
    "zero_conditions",
    "depth_proxy",
    "motion_proxy",
    "luminance",
    "qualified_tasks",
    "task_suffix",
    "append_task_suffix",
    "parse_task_suffix",
]


class TaskTag(Enum):
    """The sixteen supported tasks; values are the canonical names used
    in prompt suffixes, file layouts, and manifests."""

    T2V = "text-to-video"
    I2V = "image-to-video"
    VEXT = "video-extension"
    VINP = "video-inpainting"
    VOUTP = "video-outpainting"
    VCOLOR = "video-colorization"
    FLF2V = "first-last-frame-to-video"
    FLC2V = "first-last-clip-to-video"
    VSR = "video-super-resolution"
    VEDIT = "video-editing"
    T2I = "text-to-image"
    IINP = "image-inpainting"
    IOUTP = "image-outpainting"
    ICOLOR = "image-colorization"
    SISR = "single-image-super-resolution"
    IEDIT = "image-editing"


VIDEO_TASKS = frozenset({
    TaskTag.T2V, TaskTag.I2V, TaskTag.VEXT, TaskTag.VINP, TaskTag.VOUTP,
    TaskTag.VCOLOR, TaskTag.FLF2V, TaskTag.FLC2V, TaskTag.VSR, TaskTag.VEDIT,
})
IMAGE_TASKS = frozenset(set(TaskTag) - VIDEO_TASKS)

# Tasks whose condition bundle carries no content at all.
TEXT_ONLY_TASKS = frozenset({TaskTag.T2V, TaskTag.T2I})

# Tasks that need a paired edited clip; the synthetic corpus has none,
# so these only qualify when the caller says a pair exists.
EDIT_TASKS = frozenset({TaskTag.VEDIT, TaskTag.IEDIT})

_TASK_BY_NAME = {tag.value: tag for tag in TaskTag}


def task_from_name(name: str) -> TaskTag:
    try:
        return _TASK_BY_NAME[name]
    except KeyError:
        raise ValidationError(f"unknown task name {name!r}") from None


def task_suffix(task: TaskTag) -> str:
    return f"[task: {task.value}]"


def append_task_suffix(prompt: str, task: TaskTag) -> str:
    prompt = prompt.strip()
    suffix = task_suffix(task)
    return f"{prompt} {suffix}" if prompt else suffix


def parse_task_suffix(prompt: str) -> tuple[str, TaskTag]:
    """Split a suffixed prompt back into (base prompt, task)."""
    head, sep, tail = prompt.rpartition("[task: ")
    if not sep or not tail.endswith("]"):
        raise ValidationError(f"prompt carries no task suffix: {prompt!r}")
    return head.rstrip(), task_from_name(tail[:-1])


def luminance(clip: torch.Tensor) -> torch.Tensor:
    """Rec. 601 luma of a (..., 3) tensor, keeping the channel axis."""
    if clip.shape[-1] != 3:
        raise ShapeMismatchError(f"luminance needs 3 channels, got {clip.shape[-1]}")
    w = torch.tensor(_LUMA_WEIGHTS, dtype=clip.dtype)
    return (clip * w).sum(dim=-1, keepdim=True)


def _gaussian_kernel(radius: int, dtype: torch.dtype) -> torch.Tensor:
    sigma = max(0.5 * radius, 1e-3)
    x = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur2d(maps: torch.Tensor, radius: int) -> torch.Tensor:
    """Separable Gaussian blur of a (N, H, W) stack, replicate padding."""
    if radius == 0:
        return maps
    k = _gaussian_kernel(radius, maps.dtype)
    x = maps.unsqueeze(1)
    x = F.pad(x, (0, 0, radius, radius), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, -1, 1))
    x = F.pad(x, (radius, radius, 0, 0), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, 1, -1))
    return x.squeeze(1)


def depth_proxy(clip: VideoTensor, radius: int = 2) -> VideoTensor:
    """Smoothed inverse luminance in [0, 1]: dark pixels read as far.

    A stand-in for a monocular depth estimator; with ``radius = 0`` it
    is exactly ``1 - (luma + 1) / 2``.
    """
    if clip.channels != 3:
        raise ShapeMismatchError(f"depth proxy expects a 3-channel clip, got {clip.channels}")
    if radius < 0:
        raise ValidationError(f"blur radius must be non-negative, got {radius}")
    lum01 = (luminance(clip.data) + 1.0) * 0.5
    depth = 1.0 - lum01
    depth = _blur2d(depth.squeeze(-1), radius).unsqueeze(-1)
    return VideoTensor(depth.clamp(0.0, 1.0))


def motion_proxy(clip: VideoTensor) -> float:
    """Mean absolute luma difference between consecutive frames.

    Zero for single images.  Serves as the motion score fed to the
    backbone as a scalar condition.
    """
    if clip.channels != 3:
        raise ShapeMismatchError(f"motion proxy expects a 3-channel clip, got {clip.channels}")
    if clip.frames == 1:
        return 0.0
    lum = luminance(clip.data)
    return float((lum[1:] - lum[:-1]).abs().mean().item())


@dataclass(frozen=True)
class ConditionBundle:
    """Aligned pixel/depth/mask conditions plus prompt and motion score.

    The mask is 1 on regions the model may condition on.  Pixel and
    depth are exactly zero wherever the mask is 0, and text-only tasks
    carry all-zero tensors.
    """

    pixel_cond: VideoTensor
    depth_cond: VideoTensor
    mask: VideoTensor
    task: TaskTag
    prompt: str
    motion_score: float

    def __post_init__(self):
        if self.pixel_cond.channels != 3:
            raise ShapeMismatchError("pixel condition must have 3 channels")
        if self.depth_cond.channels != 1 or self.mask.channels != 1:
            raise ShapeMismatchError("depth condition and mask must have 1 channel")
        extent = self.pixel_cond.data.shape[:3]
        if self.depth_cond.data.shape[:3] != extent or self.mask.data.shape[:3] != extent:
            raise ShapeMismatchError(
                f"condition tensors disagree on (T, H, W): pixel {tuple(extent)}, "
                f"depth {tuple(self.depth_cond.data.shape[:3])}, "
                f"mask {tuple(self.mask.data.shape[:3])}"
            )
        m = self.mask.data
        if not ((m == 0) | (m == 1)).all():
            raise ValidationError("mask must be binary")
        hole = 1.0 - m
        if (self.pixel_cond.data * hole).abs().max() != 0:
            raise ValidationError("pixel condition must be zero outside the mask")
        if (self.depth_cond.data * hole).abs().max() != 0:
            raise ValidationError("depth condition must be zero outside the mask")
        if self.task in TEXT_ONLY_TASKS:
            if m.abs().max() != 0 or self.pixel_cond.data.abs().max() != 0 \
                    or self.depth_cond.data.abs().max() != 0:
                raise ValidationError(f"{self.task.value} bundles must be all-zero")
        if not isinstance(self.prompt, str):
            raise ValidationError("prompt must be a string")
        if not (math.isfinite(self.motion_score) and self.motion_score >= 0):
            raise ValidationError(f"motion score must be finite and >= 0, got {self.motion_score}")

    @property
    def frames(self) -> int:
        return self.pixel_cond.frames

    @property
    def height(self) -> int:
        return self.pixel_cond.height

    @property
    def width(self) -> int:
        return self.pixel_cond.width


@dataclass(frozen=True)
class ConditionOptions:
    """Optional knobs for :func:`build_condition`.

    ``clip_frames`` pins the end-window length for video-extension and
    first-last-clip tasks (benchmarks use a fixed 8); ``sr_factor`` pins
    the super-resolution degradation factor; ``edit_instruction``
    overrides the default style instruction for editing tasks.
    """

    clip_frames: int | None = None
    sr_factor: int | None = None
    edit_instruction: str | None = None
    depth_radius: int = 2

    def __post_init__(self):
        if self.clip_frames is not None and not (
                CLIP_WINDOW_MIN <= self.clip_frames <= CLIP_WINDOW_MAX):
            raise ValidationError(
                f"clip_frames must lie in [{CLIP_WINDOW_MIN}, {CLIP_WINDOW_MAX}]"
            )
        if self.sr_factor is not None and not (SR_FACTOR_MIN <= self.sr_factor <= SR_FACTOR_MAX):
            raise ValidationError(f"sr_factor must lie in [{SR_FACTOR_MIN}, {SR_FACTOR_MAX}]")
        if self.depth_radius < 0:
            raise ValidationError("depth_radius must be non-negative")


DEFAULT_OPTIONS = ConditionOptions()


def _randint(rng: torch.Generator, lo: int, hi: int) -> int:
    """Uniform integer in the inclusive range [lo, hi]."""
    if lo > hi:
        raise ValidationError(f"empty integer range [{lo}, {hi}]")
    return int(torch.randint(lo, hi + 1, (1,), generator=rng).item())


def _interior_rectangle(rng: torch.Generator, height: int, width: int,
                        tries: int = 64) -> tuple[int, int, int, int]:
    """Rectangle (y0, x0, h, w) with >= 1 pixel margin on every side,
    covering between 1/9 and 1/4 of the full frame area."""
    area = height * width
    for _ in range(tries):
        rect_h = _randint(rng, 1, height - 2)
        w_lo = max(1, -(-area // (9 * rect_h)))
        w_hi = min(width - 2, area // (4 * rect_h))
        if w_lo > w_hi:
            continue
        rect_w = _randint(rng, w_lo, w_hi)
        y0 = _randint(rng, 1, height - 1 - rect_h)
        x0 = _randint(rng, 1, width - 1 - rect_w)
        return y0, x0, rect_h, rect_w
    raise ValidationError(
        f"could not place an interior rectangle on a {height}x{width} frame"
    )


def _boundary_band(rng: torch.Generator, extent: int) -> int:
    """Band width covering between 1/8 and 1/4 of one axis."""
    lo = -(-extent // 8)
    hi = extent // 4
    return _randint(rng, lo, hi)


def _degrade_resolution(clip: torch.Tensor, factor: int) -> torch.Tensor:
    """Box-downsample by ``factor`` then nearest-upsample back."""
    t, h, w, c = clip.shape
    x = clip.permute(0, 3, 1, 2)
    small = (max(1, h // factor), max(1, w // factor))
    x = F.interpolate(x, size=small, mode="area")
    x = F.interpolate(x, size=(h, w), mode="nearest")
    return x.permute(0, 2, 3, 1)


def _window_lengths(task: TaskTag, frames: int, rng: torch.Generator,
                    options: ConditionOptions) -> tuple[int, int]:
    """End-window lengths (head, tail) for VEXT / FLC2V."""
    if frames < EXTENSION_MIN_FRAMES:
        raise TaskMismatchError(
            f"{task.value} needs at least {EXTENSION_MIN_FRAMES} frames, got {frames}"
        )
    if task is TaskTag.VEXT:
        head = options.clip_frames if options.clip_frames is not None else \
            _randint(rng, CLIP_WINDOW_MIN, min(CLIP_WINDOW_MAX, frames - 1))
        if head >= frames:
            raise TaskMismatchError(f"window of {head} frames leaves nothing to extend")
        return head, 0
    if options.clip_frames is not None:
        head = tail = options.clip_frames
    else:
        head = _randint(rng, CLIP_WINDOW_MIN,
                        min(CLIP_WINDOW_MAX, frames - 1 - CLIP_WINDOW_MIN))
        tail = _randint(rng, CLIP_WINDOW_MIN, min(CLIP_WINDOW_MAX, frames - 1 - head))
    if head + tail >= frames:
        raise TaskMismatchError(
            f"end windows of {head}+{tail} frames leave nothing to generate in {frames}"
        )
    return head, tail


def build_condition(clip: VideoTensor, task: TaskTag, prompt: str,
                    rng: torch.Generator,
                    options: ConditionOptions = DEFAULT_OPTIONS) -> ConditionBundle:
    """Derive the unified condition bundle for ``task`` from a clip.

    The clip supplies shapes, content to mask or degrade, and the motion
    score; randomness (mask geometry, window lengths, degradation
    factors) is drawn from ``rng`` only.
    """
    if clip.channels != 3:
        raise ShapeMismatchError(f"conditions are built from 3-channel clips, got {clip.channels}")
    t, h, w = clip.frames, clip.height, clip.width
    if task in IMAGE_TASKS and t != 1:
        raise TaskMismatchError(f"{task.value} is an image task, clip has {t} frames")
    if task in VIDEO_TASKS and t == 1:
        raise TaskMismatchError(f"{task.value} is a video task, clip has a single frame")
    if task in TEXT_ONLY_TASKS and not prompt.strip():
        raise EmptyPromptError(f"{task.value} requires a non-empty prompt")

    x = clip.data
    mask = torch.ones(t, h, w, 1, dtype=x.dtype)
    pixel = None  # defaults to clip * mask

    if task in TEXT_ONLY_TASKS:
        mask = torch.zeros_like(mask)
    elif task is TaskTag.I2V:
        mask[1:] = 0.0
    elif task is TaskTag.FLF2V:
        mask[1:-1] = 0.0
    elif task in (TaskTag.VEXT, TaskTag.FLC2V):
        head, tail = _window_lengths(task, t, rng, options)
        mask[:] = 0.0
        mask[:head] = 1.0
        if tail:
            mask[t - tail:] = 1.0
    elif task in (TaskTag.VINP, TaskTag.IINP):
        y0, x0, rect_h, rect_w = _interior_rectangle(rng, h, w)
        mask[:, y0:y0 + rect_h, x0:x0 + rect_w] = 0.0
    elif task in (TaskTag.VOUTP, TaskTag.IOUTP):
        top, bottom = _boundary_band(rng, h), _boundary_band(rng, h)
        left, right = _boundary_band(rng, w), _boundary_band(rng, w)
        mask[:, :top] = 0.0
        mask[:, h - bottom:] = 0.0
        mask[:, :, :left] = 0.0
        mask[:, :, w - right:] = 0.0
    elif task in (TaskTag.VCOLOR, TaskTag.ICOLOR):
        pixel = luminance(x).expand(t, h, w, 3).contiguous()
    elif task in (TaskTag.VSR, TaskTag.SISR):
        factor = options.sr_factor if options.sr_factor is not None else \
            _randint(rng, SR_FACTOR_MIN, SR_FACTOR_MAX)
        pixel = _degrade_resolution(x, factor)
    elif task in EDIT_TASKS:
        pixel = x.clone()
        prompt = options.edit_instruction if options.edit_instruction is not None \
            else STYLE_INSTRUCTION
    # remaining tasks (I2V, FLF2V, windowed, masked) take pixel = clip * mask

    if pixel is None:
        pixel = x * mask

    depth = depth_proxy(clip, options.depth_radius).data * mask
    return ConditionBundle(
        pixel_cond=VideoTensor(pixel),
        depth_cond=VideoTensor(depth),
        mask=VideoTensor(mask),
        task=task,
        prompt=append_task_suffix(prompt, task),
        motion_score=motion_proxy(clip),
    )


def zero_conditions(bundle: ConditionBundle) -> ConditionBundle:
    """Zero the condition tensors, keeping task, prompt, and motion score."""
    return ConditionBundle(
        pixel_cond=VideoTensor(torch.zeros_like(bundle.pixel_cond.data)),
        depth_cond=VideoTensor(torch.zeros_like(bundle.depth_cond.data)),
        mask=VideoTensor(torch.zeros_like(bundle.mask.data)),
        task=bundle.task,
        prompt=bundle.prompt,
        motion_score=bundle.motion_score,
    )


def null_text_bundle(bundle: ConditionBundle) -> ConditionBundle:
    """Same conditions, null prompt: the unguided branch for sampling."""
    return ConditionBundle(
        pixel_cond=bundle.pixel_cond,
        depth_cond=bundle.depth_cond,
        mask=bundle.mask,
        task=bundle.task,
        prompt=NULL_PROMPT,
        motion_score=bundle.motion_score,
    )


def qualified_tasks(clip: VideoTensor, has_edit_pair: bool = False) -> frozenset[TaskTag]:
    """Tasks a clip can serve as training or benchmark material for.

    Single frames qualify for image tasks only; end-windowed video tasks
    need enough frames for an 8..16-frame window plus generated content.
    Editing tasks additionally need a paired edited clip.
    """
    if clip.frames == 1:
        tags = set(IMAGE_TASKS)
    else:
        tags = set(VIDEO_TASKS)
        if clip.frames < EXTENSION_MIN_FRAMES:
            tags -= {TaskTag.VEXT, TaskTag.FLC2V}
    if not has_edit_pair:
        tags -= EDIT_TASKS
    return frozenset(tags)
