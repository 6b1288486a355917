"""Multi-task rectified-flow training on the synthetic corpus.

Each step draws image or video samples per the stage's mix, picks a
qualified task (the plain generation tasks carry tripled weight),
builds the condition bundle, applies text and condition dropout, and
regresses the velocity target.  A single generator drives every random
choice in a fixed order, so one seed pins the whole run.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .backbone import ModelConfig, ScalarConditions, VelocityModel, build_model
from .conditioning import (
    TEXT_ONLY_TASKS,
    ConditionBundle,
    TaskTag,
    build_condition,
    null_text_bundle,
    qualified_tasks,
    zero_conditions,
)
from .corpus import CorpusSample
from .errors import NumericAbortError, ValidationError
from .flow import flow_loss, make_flow_sample
from .latents import SPATIAL_FACTOR, TEMPORAL_GROUP, ToyCodec, VideoTensor

WARMUP_STEPS = 100
BOOSTED_TASKS = frozenset({TaskTag.T2I, TaskTag.T2V, TaskTag.I2V})
TASK_BOOST = 3.0

__all__ = [
    "WARMUP_STEPS",
    "RecipeStage",
    "TaskWeights",
    "DropoutPolicy",
    "TrainRecord",
    "TrainResult",
    "sample_task",
    "apply_dropout",
    "train",
    "reference_recipe",
    "validate_recipe",
    "read_recipe",
    "write_recipe",
    "write_metrics",
    "read_metrics",
    "loss_ratio",
    "fixed_order_reductions",
]


@contextmanager
def fixed_order_reductions():
    """Pin reductions to one thread so accumulation order is stable."""
    saved = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(saved)


@dataclass(frozen=True)
class RecipeStage:
    """One stage of the resolution/mix escalation schedule."""

    name: str
    frames: int
    height: int
    width: int
    image_video_ratio: float
    batch_size: int
    learning_rate: float
    iterations: int

    def __post_init__(self):
        if not self.name:
            raise ValidationError("stage needs a name")
        if self.frames != 1 and self.frames % TEMPORAL_GROUP not in (0, 1):
            raise ValidationError(f"stage frame count {self.frames} is not codec-valid")
        if self.height % SPATIAL_FACTOR or self.width % SPATIAL_FACTOR:
            raise ValidationError(
                f"stage resolution {self.height}x{self.width} must be a multiple of 8"
            )
        if not 0.0 <= self.image_video_ratio <= 1.0:
            raise ValidationError(
                f"image/video ratio must lie in [0, 1], got {self.image_video_ratio}"
            )
        if self.batch_size < 1:
            raise ValidationError(f"batch size must be positive, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning rate must be positive, got {self.learning_rate}")
        if self.iterations < 1:
            raise ValidationError(f"stage needs at least one iteration, got {self.iterations}")


def reference_recipe() -> list[RecipeStage]:
    """The four-stage escalation the full-scale configuration targets.

    Instantiable for validation and bookkeeping; actually training at
    these sizes is far outside this package's scope.
    """
    return [
        RecipeStage("128px", 49, 128, 224, 0.5, 16, 1e-4, 170_000),
        RecipeStage("360px", 89, 352, 640, 0.3, 2, 8e-5, 100_000),
        RecipeStage("720px", 97, 720, 1280, 0.2, 1, 5e-5, 50_000),
        RecipeStage("multi-res", 97, 720, 1280, 0.1, 1, 5e-5, 40_000),
    ]


def validate_recipe(stages: list[RecipeStage]) -> None:
    if not stages:
        raise ValidationError("recipe has no stages")
    names = [s.name for s in stages]
    if len(set(names)) != len(names):
        raise ValidationError(f"duplicate stage names in recipe: {names}")
    if stages[-1].image_video_ratio > 0.1:
        raise ValidationError(
            f"final stage must be video-dominant (image ratio <= 0.1), "
            f"got {stages[-1].image_video_ratio}"
        )


def write_recipe(path: str | Path, stages: list[RecipeStage]) -> None:
    """One stage per line as space-separated ``key=value`` pairs."""
    lines = []
    for s in stages:
        lines.append(
            f"name={s.name} frames={s.frames} height={s.height} width={s.width} "
            f"ratio={s.image_video_ratio} batch={s.batch_size} "
            f"lr={s.learning_rate} steps={s.iterations}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_recipe(path: str | Path) -> list[RecipeStage]:
    stages = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields: dict[str, str] = {}
        for part in line.split():
            key, sep, value = part.partition("=")
            if not sep:
                raise ValidationError(f"{path}:{lineno}: expected key=value, got {part!r}")
            fields[key] = value
        try:
            stages.append(RecipeStage(
                name=fields.pop("name"),
                frames=int(fields.pop("frames")),
                height=int(fields.pop("height")),
                width=int(fields.pop("width")),
                image_video_ratio=float(fields.pop("ratio")),
                batch_size=int(fields.pop("batch")),
                learning_rate=float(fields.pop("lr")),
                iterations=int(fields.pop("steps")),
            ))
        except KeyError as exc:
            raise ValidationError(f"{path}:{lineno}: missing field {exc}") from None
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
        if fields:
            raise ValidationError(f"{path}:{lineno}: unknown fields {sorted(fields)}")
    validate_recipe(stages)
    return stages


class TaskWeights:
    """Positive per-task sampling weights.

    The default triples text-to-image, text-to-video, and image-to-video
    relative to a common base weight; custom maps must preserve that
    exact 3:1 structure.
    """

    def __init__(self, weights: dict[TaskTag, float] | None = None, base: float = 1.0):
        if weights is None:
            if not base > 0:
                raise ValidationError(f"base weight must be positive, got {base}")
            weights = {
                tag: base * TASK_BOOST if tag in BOOSTED_TASKS else base
                for tag in TaskTag
            }
        if set(weights) != set(TaskTag):
            missing = {t.value for t in TaskTag} - {t.value for t in weights}
            raise ValidationError(f"weights must cover every task; missing {sorted(missing)}")
        for tag, value in weights.items():
            if not value > 0:
                raise ValidationError(f"weight for {tag.value} must be positive, got {value}")
        plain = {weights[t] for t in TaskTag if t not in BOOSTED_TASKS}
        boosted = {weights[t] for t in BOOSTED_TASKS}
        if len(plain) != 1 or len(boosted) != 1:
            raise ValidationError("weights must be constant within the plain and boosted groups")
        if boosted.pop() != TASK_BOOST * plain.pop():
            raise ValidationError(
                f"T2I/T2V/I2V must weigh exactly {TASK_BOOST}x the other tasks"
            )
        self._weights = dict(weights)

    def weight(self, task: TaskTag) -> float:
        return self._weights[task]

    def as_dict(self) -> dict[TaskTag, float]:
        return dict(self._weights)


@dataclass(frozen=True)
class DropoutPolicy:
    """Regularization rates: null-text for the text-only tasks, condition
    zeroing for everything else."""

    null_text_video: float = 0.10
    null_text_image: float = 0.30
    zero_condition: float = 0.10

    def __post_init__(self):
        for field in ("null_text_video", "null_text_image", "zero_condition"):
            rate = getattr(self, field)
            if not 0.0 <= rate <= 1.0:
                raise ValidationError(f"{field} must lie in [0, 1], got {rate}")


def _randint(rng: torch.Generator, lo: int, hi: int) -> int:
    return int(torch.randint(lo, hi + 1, (1,), generator=rng).item())


def sample_task(qualified: frozenset[TaskTag] | set[TaskTag], weights: TaskWeights,
                rng: torch.Generator) -> TaskTag:
    """Weighted draw over the qualified set, renormalized to it."""
    if not qualified:
        raise ValidationError("no qualified tasks to sample from")
    ordered = sorted(qualified, key=lambda t: t.value)
    mass = [weights.weight(t) for t in ordered]
    total = sum(mass)
    u = float(torch.rand((), generator=rng).item()) * total
    acc = 0.0
    for task, m in zip(ordered, mass):
        acc += m
        if u < acc:
            return task
    return ordered[-1]


def apply_dropout(bundle: ConditionBundle, policy: DropoutPolicy,
                  rng: torch.Generator) -> ConditionBundle:
    """Consume one uniform draw and maybe blank part of the bundle.

    Text-only tasks lose their prompt at the video or image rate; every
    other task has its condition tensors zeroed at the shared rate, with
    prompt and task suffix kept.
    """
    u = float(torch.rand((), generator=rng).item())
    if bundle.task in TEXT_ONLY_TASKS:
        rate = policy.null_text_image if bundle.task is TaskTag.T2I else policy.null_text_video
        if u < rate:
            return null_text_bundle(bundle)
    elif u < policy.zero_condition:
        return zero_conditions(bundle)
    return bundle


@dataclass(frozen=True)
class TrainRecord:
    step: int
    stage: str
    task: TaskTag
    kind: str
    loss: float
    lr: float
    text_dropped: bool
    cond_zeroed: bool


@dataclass
class TrainResult:
    model: VelocityModel
    codec: ToyCodec
    records: list[TrainRecord]


def _fit_clip(clip: VideoTensor, frames: int, height: int, width: int) -> VideoTensor:
    """Crop or pad time to ``frames``; resample space to the stage size."""
    data = clip.data
    if data.shape[0] >= frames:
        data = data[:frames]
    else:
        pad = data[-1:].expand(frames - data.shape[0], -1, -1, -1)
        data = torch.cat([data, pad], dim=0)
    if data.shape[1] != height or data.shape[2] != width:
        x = data.permute(0, 3, 1, 2)
        if data.shape[1] >= height and data.shape[2] >= width:
            x = F.interpolate(x, size=(height, width), mode="area")
        else:
            x = F.interpolate(x, size=(height, width), mode="bilinear", align_corners=False)
        data = x.permute(0, 2, 3, 1)
    return VideoTensor(data.contiguous())


def train(recipe: list[RecipeStage], corpus: list[CorpusSample],
          model_config: ModelConfig, *, latent_channels: int | None = 16,
          weights: TaskWeights | None = None,
          policy: DropoutPolicy | None = None,
          seed: int = 0) -> TrainResult:
    """Run the full recipe and return the trained model with its codec.

    Raises ``NumericAbortError`` as soon as a loss stops being finite.
    """
    validate_recipe(recipe)
    if not corpus:
        raise ValidationError("corpus is empty")
    weights = weights if weights is not None else TaskWeights()
    policy = policy if policy is not None else DropoutPolicy()

    codec = ToyCodec(pixel_channels=3, latent_channels=latent_channels)
    model = build_model(model_config, codec.latent_channels, seed=seed)
    rng = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=recipe[0].learning_rate)

    images = [s for s in corpus if s.kind == "image"]
    videos = [s for s in corpus if s.kind == "video"]
    records: list[TrainRecord] = []
    step = 0

    with fixed_order_reductions():
        for stage in recipe:
            for _ in range(stage.iterations):
                lr = stage.learning_rate * min(1.0, (step + 1) / WARMUP_STEPS)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad()
                for _ in range(stage.batch_size):
                    u = float(torch.rand((), generator=rng).item())
                    want_image = u < stage.image_video_ratio
                    pool = images if (want_image and images) or not videos else videos
                    sample = pool[_randint(rng, 0, len(pool) - 1)]
                    is_image = sample.kind == "image"
                    clip = _fit_clip(sample.clip, 1 if is_image else stage.frames,
                                     stage.height, stage.width)
                    task = sample_task(qualified_tasks(clip), weights, rng)
                    bundle = build_condition(clip, task, sample.caption, rng)
                    dropped = apply_dropout(bundle, policy, rng)
                    flow = make_flow_sample(codec.encode(clip), rng)
                    pred = model(flow.xt, dropped,
                                 ScalarConditions(flow.time, dropped.motion_score))
                    loss = flow_loss(pred, flow)
                    if not torch.isfinite(loss):
                        raise NumericAbortError(
                            f"training loss became non-finite at step {step}", step=step
                        )
                    (loss / stage.batch_size).backward()
                    records.append(TrainRecord(
                        step=step,
                        stage=stage.name,
                        task=task,
                        kind=sample.kind,
                        loss=float(loss.item()),
                        lr=lr,
                        text_dropped=dropped.prompt != bundle.prompt,
                        cond_zeroed=dropped.mask is not bundle.mask,
                    ))
                optimizer.step()
                step += 1
    return TrainResult(model=model, codec=codec, records=records)


_METRICS_HEADER = "step\tstage\ttask\tkind\tloss\tlr\ttext_dropped\tcond_zeroed"


def write_metrics(path: str | Path, records: list[TrainRecord]) -> None:
    lines = [_METRICS_HEADER]
    for r in records:
        lines.append(
            f"{r.step}\t{r.stage}\t{r.task.value}\t{r.kind}\t{r.loss!r}\t"
            f"{r.lr!r}\t{int(r.text_dropped)}\t{int(r.cond_zeroed)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics(path: str | Path) -> list[TrainRecord]:
    from .conditioning import task_from_name

    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _METRICS_HEADER:
        raise ValidationError(f"{path}: unrecognized metrics header")
    records = []
    for line in lines[1:]:
        step, stage, task, kind, loss, lr, dropped, zeroed = line.split("\t")
        records.append(TrainRecord(
            step=int(step), stage=stage, task=task_from_name(task), kind=kind,
            loss=float(loss), lr=float(lr),
            text_dropped=dropped == "1", cond_zeroed=zeroed == "1",
        ))
    return records


def loss_ratio(records: list[TrainRecord], window: int = 100) -> float:
    """Mean loss over the last ``window`` records divided by the first."""
    if len(records) < 2 * window:
        raise ValidationError(
            f"need at least {2 * window} records for a loss ratio, have {len(records)}"
        )
    losses = [r.loss for r in records]
    first = sum(losses[:window]) / window
    last = sum(losses[-window:]) / window
    if first == 0:
        raise ValidationError("initial loss window averaged zero")
    return last / first
