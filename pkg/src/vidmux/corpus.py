"""Procedural training corpus: tiny captioned clips with known motion.

Four archetypes cover the behaviors the tasks care about: a static
shape, a shape translating at constant speed, a shape pulsing in
brightness, and a drifting gradient.  With ``group_aligned`` set, all
temporal change happens at 4-frame group boundaries and all spatial
structure sits on the 8-pixel block grid, so the toy codec round-trips
every clip exactly; that is the regime overfitting experiments use.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .errors import ValidationError
from .latents import SPATIAL_FACTOR, TEMPORAL_GROUP, VideoTensor

ARCHETYPES = ("static", "translate", "oscillate", "gradient")

_PALETTE = {
    "red": (0.9, -0.6, -0.6),
    "green": (-0.6, 0.8, -0.5),
    "blue": (-0.5, -0.4, 0.9),
    "yellow": (0.9, 0.8, -0.6),
    "magenta": (0.8, -0.6, 0.8),
    "cyan": (-0.6, 0.8, 0.9),
}
_BACKGROUNDS = {"dark": -0.85, "gray": -0.25, "light": 0.65}
_SHAPES = ("square", "disk")
_DIRECTIONS = ("right", "left", "down", "up")

__all__ = [
    "ARCHETYPES",
    "CorpusConfig",
    "CorpusSample",
    "make_synthetic_corpus",
    "read_corpus_spec",
    "write_corpus_spec",
]


@dataclass(frozen=True)
class CorpusConfig:
    images: int
    videos: int
    frames: int
    height: int
    width: int
    group_aligned: bool = False

    def __post_init__(self):
        if self.images < 0 or self.videos < 0 or self.images + self.videos == 0:
            raise ValidationError("corpus needs a non-negative sample split with at least one sample")
        if self.videos and self.frames < 2:
            raise ValidationError("video samples need at least two frames")
        if self.videos and self.frames % TEMPORAL_GROUP not in (0, 1):
            raise ValidationError(
                f"video frame count must be 4k or 4k+1 to survive the codec, got {self.frames}"
            )
        if self.height % SPATIAL_FACTOR or self.width % SPATIAL_FACTOR:
            raise ValidationError(
                f"corpus resolution {self.height}x{self.width} must be a multiple of 8"
            )


@dataclass(frozen=True)
class CorpusSample:
    clip: VideoTensor
    caption: str
    kind: str  # "image" | "video"
    archetype: str


def _group_index(frame: int, frames: int) -> int:
    """Codec temporal group of a frame (first frame alone when T = 4k+1)."""
    if frames == 1 or frame == 0:
        return 0
    if frames % TEMPORAL_GROUP == 1:
        return (frame - 1) // TEMPORAL_GROUP + 1
    return frame // TEMPORAL_GROUP


def _pick(rng: torch.Generator, options):
    idx = int(torch.randint(0, len(options), (1,), generator=rng).item())
    return options[idx]


def _shape_frame(height: int, width: int, shape: str, color, bg: float,
                 y0: int, x0: int, size: int) -> tuple[torch.Tensor, torch.Tensor]:
    frame = torch.full((height, width, 3), bg)
    ys = torch.arange(height).unsqueeze(1)
    xs = torch.arange(width).unsqueeze(0)
    if shape == "square":
        inside = (ys >= y0) & (ys < y0 + size) & (xs >= x0) & (xs < x0 + size)
    else:
        radius = size / 2
        cy, cx = y0 + radius - 0.5, x0 + radius - 0.5
        inside = (ys - cy) ** 2 + (xs - cx) ** 2 <= radius**2
    frame[inside] = torch.tensor(color)
    return frame, inside


def _roll_shift(direction: str, amount: int) -> tuple[int, int, int]:
    # (dy, dx, axis order irrelevant): positive rolls move content down/right
    if direction == "right":
        return 0, amount, 0
    if direction == "left":
        return 0, -amount, 0
    if direction == "down":
        return amount, 0, 0
    return -amount, 0, 0


def _gradient_frame(height: int, width: int, vertical: bool, blocky: bool) -> torch.Tensor:
    span = height if vertical else width
    if blocky:
        blocks = span // SPATIAL_FACTOR
        levels = torch.linspace(-0.8, 0.8, blocks)
        ramp = levels.repeat_interleave(SPATIAL_FACTOR)
    else:
        ramp = torch.linspace(-0.8, 0.8, span)
    if vertical:
        frame = ramp.view(span, 1, 1).expand(height, width, 3)
    else:
        frame = ramp.view(1, span, 1).expand(height, width, 3)
    return frame.contiguous()


def _make_clip(rng: torch.Generator, archetype: str, frames: int, height: int,
               width: int, aligned: bool) -> tuple[VideoTensor, str]:
    color_name = _pick(rng, sorted(_PALETTE))
    bg_name = _pick(rng, sorted(_BACKGROUNDS))
    shape = _pick(rng, _SHAPES)
    if aligned:
        shape = "square"  # disks straddle block boundaries
    direction = _pick(rng, _DIRECTIONS)
    color, bg = _PALETTE[color_name], _BACKGROUNDS[bg_name]

    blocks_y = height // SPATIAL_FACTOR
    blocks_x = width // SPATIAL_FACTOR
    size_blocks = 1 if min(blocks_y, blocks_x) < 3 else int(
        torch.randint(1, min(blocks_y, blocks_x) - 1, (1,), generator=rng).item()
    )
    size = size_blocks * SPATIAL_FACTOR
    y0 = int(torch.randint(0, blocks_y - size_blocks + 1, (1,), generator=rng).item()) \
        * SPATIAL_FACTOR
    x0 = int(torch.randint(0, blocks_x - size_blocks + 1, (1,), generator=rng).item()) \
        * SPATIAL_FACTOR

    shape_mask = None
    if archetype == "gradient":
        vertical = direction in ("down", "up")
        base = _gradient_frame(height, width, vertical, blocky=aligned)
        orientation = "vertical" if vertical else "horizontal"
        caption = f"a {orientation} gradient drifting {direction}"
    else:
        base, shape_mask = _shape_frame(height, width, shape, color, bg, y0, x0, size)
        caption = {
            "static": f"a static {color_name} {shape} on a {bg_name} background",
            "translate": f"a {color_name} {shape} sliding {direction} across a {bg_name} background",
            "oscillate": f"a {color_name} {shape} pulsing in brightness on a {bg_name} background",
        }[archetype]

    if frames == 1 or archetype == "static":
        data = base.unsqueeze(0).expand(frames, height, width, 3).contiguous()
        return VideoTensor(data), caption

    out = []
    for f in range(frames):
        step = _group_index(f, frames) if aligned else f
        if archetype == "oscillate":
            # pulse the shape only; a block-aligned mask keeps blocks flat
            factor = 1.0 if step % 2 == 0 else 0.55
            frame = torch.where(shape_mask.unsqueeze(-1), base * factor, base)
        else:  # translate or gradient: rigid wrap-around motion
            amount = step * (SPATIAL_FACTOR if aligned else 2)
            dy, dx, _ = _roll_shift(direction, amount)
            frame = torch.roll(base, shifts=(dy, dx), dims=(0, 1))
        out.append(frame)
    return VideoTensor(torch.stack(out)), caption


def make_synthetic_corpus(config: CorpusConfig,
                          rng: torch.Generator) -> list[CorpusSample]:
    """Build ``images + videos`` captioned samples, cycling archetypes."""
    samples: list[CorpusSample] = []
    image_archetypes = ("static", "gradient")
    for i in range(config.images):
        archetype = image_archetypes[i % len(image_archetypes)]
        clip, caption = _make_clip(rng, archetype, 1, config.height, config.width,
                                   config.group_aligned)
        samples.append(CorpusSample(clip, caption, "image", archetype))
    for i in range(config.videos):
        archetype = ARCHETYPES[i % len(ARCHETYPES)]
        clip, caption = _make_clip(rng, archetype, config.frames, config.height,
                                   config.width, config.group_aligned)
        samples.append(CorpusSample(clip, caption, "video", archetype))
    return samples


def write_corpus_spec(path: str | Path, config: CorpusConfig) -> None:
    lines = [
        f"images={config.images}",
        f"videos={config.videos}",
        f"frames={config.frames}",
        f"height={config.height}",
        f"width={config.width}",
        f"group_aligned={'true' if config.group_aligned else 'false'}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_corpus_spec(path: str | Path) -> CorpusConfig:
    fields: dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = key.strip(), value.strip()
        if key == "group_aligned":
            if value.lower() not in ("true", "false"):
                raise ValidationError(f"{path}:{lineno}: group_aligned must be true or false")
            fields[key] = value.lower() == "true"
        else:
            try:
                fields[key] = int(value)
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: {key} must be an integer") from None
    try:
        return CorpusConfig(**fields)  # type: ignore[arg-type]
    except TypeError as exc:
        raise ValidationError(f"{path}: {exc}") from None
