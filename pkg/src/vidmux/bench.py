"""Benchmark construction, quality filters, and reference metrics.

The pipeline filters source clips for sharpness (variance of a 3x3
Laplacian on 0-255 luma) and for visible motion (the same mean
frame-difference proxy the conditioner uses), truncates survivors to a
common frame count, then materializes a fixed number of condition
bundles plus ground truth per task.  Image tasks are benchmarked on
each clip's first frame.  PSNR and SSIM are computed on [0, 1]-mapped
values; SSIM uses an 11x11 Gaussian window (sigma 1.5) over valid
positions only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .conditioning import (
    ConditionBundle,
    ConditionOptions,
    TaskTag,
    IMAGE_TASKS,
    build_condition,
    luminance,
    motion_proxy,
    task_from_name,
)
from .errors import (
    InsufficientClipsError,
    ShapeMismatchError,
    ValidationError,
)
from .latents import VideoTensor
from .serialization import read_video, write_bundle, write_video

TOTAL_SAMPLES = 480
BENCH_WINDOW_FRAMES = 8  # fixed end-window length for extension-style tasks

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2

__all__ = [
    "TOTAL_SAMPLES",
    "BenchConfig",
    "BenchEntry",
    "BenchReport",
    "blur_score",
    "motion_score_255",
    "filter_videos",
    "build_benchmark",
    "write_benchmark",
    "read_manifest",
    "evaluate_outputs",
    "write_report",
    "psnr",
    "ssim",
]


@dataclass(frozen=True)
class BenchConfig:
    """Filter thresholds and benchmark composition.

    The default motion threshold is calibrated to the [-1, 1] luma
    difference proxy rather than an optical-flow magnitude, so its
    numeric value is small.
    """

    frames: int = 97
    blur_threshold: float = 200.0
    motion_threshold: float = 0.02
    per_task_count: int = 30
    tasks: tuple[TaskTag, ...] = tuple(TaskTag)

    def __post_init__(self):
        if self.frames < 2:
            raise ValidationError(f"benchmark clips need >= 2 frames, got {self.frames}")
        if self.frames % 4 != 1:
            raise ValidationError(
                f"benchmark frame count must be 4k+1 for codec alignment, got {self.frames}"
            )
        if self.blur_threshold < 0 or self.motion_threshold < 0:
            raise ValidationError("filter thresholds must be non-negative")
        if len(set(self.tasks)) != len(self.tasks):
            raise ValidationError("benchmark task list contains duplicates")
        if self.per_task_count * len(self.tasks) != TOTAL_SAMPLES:
            raise ValidationError(
                f"per_task_count * tasks must equal {TOTAL_SAMPLES}, got "
                f"{self.per_task_count} * {len(self.tasks)}"
            )


def _luma255(data: torch.Tensor) -> torch.Tensor:
    """(T, H, W, 3) in [-1, 1] -> (T, H, W) luma on the 0-255 scale."""
    return (luminance(data).squeeze(-1) + 1.0) * 127.5


_LAPLACIAN = torch.tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def _laplacian_variance(lum: torch.Tensor) -> torch.Tensor:
    """Population variance of the valid 3x3 Laplacian response, per frame."""
    resp = F.conv2d(lum.unsqueeze(1), _LAPLACIAN.to(lum.dtype).view(1, 1, 3, 3))
    return resp.var(dim=(1, 2, 3), unbiased=False)


def blur_score(frame: VideoTensor) -> float:
    """Sharpness of a single frame; larger is sharper."""
    if frame.frames != 1:
        raise ValidationError(f"blur_score takes a single frame, got {frame.frames}")
    if frame.channels != 3:
        raise ShapeMismatchError("blur_score expects 3 channels")
    return float(_laplacian_variance(_luma255(frame.data)).item())


def motion_score_255(clip: VideoTensor) -> float:
    """Motion proxy used for filtering; same statistic the conditioner
    attaches to bundles."""
    return motion_proxy(clip)


def filter_videos(clips: list[VideoTensor], config: BenchConfig) -> list[VideoTensor]:
    """Keep clips that are long enough, sharp on every frame, and show
    enough motion; survivors are truncated to the target frame count."""
    kept = []
    for clip in clips:
        if clip.frames < config.frames:
            continue
        truncated = VideoTensor(clip.data[:config.frames])
        sharpness = _laplacian_variance(_luma255(truncated.data))
        if sharpness.min().item() < config.blur_threshold:
            continue
        if motion_proxy(truncated) <= config.motion_threshold:
            continue
        kept.append(truncated)
    return kept


@dataclass(frozen=True)
class BenchEntry:
    task: TaskTag
    index: int
    bundle: ConditionBundle
    truth: VideoTensor
    seed: int

    @property
    def sample_id(self) -> str:
        return f"{self.index:03d}"


def build_benchmark(clips: list[VideoTensor], captions: list[str],
                    config: BenchConfig, rng: torch.Generator) -> list[BenchEntry]:
    """Filter the pool and materialize every task's condition set.

    Each entry draws a fresh 31-bit seed from ``rng`` and builds its
    bundle from a generator seeded with it, so single entries can be
    reproduced from the manifest alone.
    """
    if len(captions) != len(clips):
        raise ValidationError(f"{len(clips)} clips but {len(captions)} captions")
    # filter clip by clip so captions stay in lockstep with survivors
    pool: list[VideoTensor] = []
    kept_captions: list[str] = []
    for clip, caption in zip(clips, captions):
        passed = filter_videos([clip], config)
        if passed:
            pool.append(passed[0])
            kept_captions.append(caption)
    if len(pool) < config.per_task_count:
        raise InsufficientClipsError(
            f"need {config.per_task_count} qualifying clips, only {len(pool)} "
            f"passed the filters",
            needed=config.per_task_count,
            available=len(pool),
        )
    options = ConditionOptions(clip_frames=BENCH_WINDOW_FRAMES)
    entries: list[BenchEntry] = []
    for task in config.tasks:
        choice = torch.randperm(len(pool), generator=rng)[:config.per_task_count]
        for index, clip_idx in enumerate(choice.tolist()):
            clip, caption = pool[clip_idx], kept_captions[clip_idx]
            truth = clip if task not in IMAGE_TASKS else VideoTensor(clip.data[:1])
            seed = int(torch.randint(0, 2**31 - 1, (1,), generator=rng).item())
            child = torch.Generator().manual_seed(seed)
            bundle = build_condition(truth, task, caption, child, options)
            entries.append(BenchEntry(task=task, index=index, bundle=bundle,
                                      truth=truth, seed=seed))
    return entries


_MANIFEST_HEADER = "task\tid\tseed\tmotion_score\tprompt"


def write_benchmark(directory: str | Path, entries: list[BenchEntry]) -> None:
    """Lay out ``<task>/<id>.cond/`` bundle dirs, ``<task>/<id>.truth.vt``
    ground truths, and a root manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [_MANIFEST_HEADER]
    for entry in entries:
        task_dir = directory / entry.task.value
        task_dir.mkdir(exist_ok=True)
        write_bundle(task_dir / f"{entry.sample_id}.cond", entry.bundle)
        write_video(task_dir / f"{entry.sample_id}.truth.vt", entry.truth)
        lines.append(
            f"{entry.task.value}\t{entry.sample_id}\t{entry.seed}\t"
            f"{entry.bundle.motion_score!r}\t{entry.bundle.prompt}"
        )
    (directory / "manifest.tsv").write_text("\n".join(lines) + "\n")


def read_manifest(directory: str | Path) -> list[dict[str, str]]:
    path = Path(directory) / "manifest.tsv"
    if not path.is_file():
        raise ValidationError(f"{directory}: no manifest.tsv")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != _MANIFEST_HEADER:
        raise ValidationError(f"{path}: unrecognized manifest header")
    rows = []
    for line in lines[1:]:
        task, sample_id, seed, motion, prompt = line.split("\t", 4)
        rows.append({
            "task": task, "id": sample_id, "seed": seed,
            "motion_score": motion, "prompt": prompt,
        })
    return rows


def _to_unit(data: torch.Tensor) -> torch.Tensor:
    return (data + 1.0) * 0.5


def psnr(x: VideoTensor, y: VideoTensor) -> float:
    """Peak signal-to-noise ratio in dB over [0, 1]-mapped values;
    identical inputs give ``inf``."""
    if x.data.shape != y.data.shape:
        raise ShapeMismatchError(
            f"psnr needs matching shapes, got {tuple(x.data.shape)} and {tuple(y.data.shape)}"
        )
    mse = (_to_unit(x.data.double()) - _to_unit(y.data.double())).pow(2).mean().item()
    if mse == 0.0:
        return float("inf")
    return float(-10.0 * math.log10(mse))


def _gaussian_window(dtype: torch.dtype) -> torch.Tensor:
    half = (_SSIM_WINDOW - 1) / 2
    coords = torch.arange(_SSIM_WINDOW, dtype=dtype) - half
    g = torch.exp(-(coords**2) / (2 * _SSIM_SIGMA**2))
    g = g / g.sum()
    return (g.unsqueeze(1) @ g.unsqueeze(0)).view(1, 1, _SSIM_WINDOW, _SSIM_WINDOW)


def ssim(x: VideoTensor, y: VideoTensor) -> float:
    """Mean structural similarity over frames, channels, and valid
    window positions."""
    if x.data.shape != y.data.shape:
        raise ShapeMismatchError(
            f"ssim needs matching shapes, got {tuple(x.data.shape)} and {tuple(y.data.shape)}"
        )
    t, h, w, c = x.data.shape
    if h < _SSIM_WINDOW or w < _SSIM_WINDOW:
        raise ValidationError(
            f"ssim needs frames of at least {_SSIM_WINDOW}x{_SSIM_WINDOW}, got {h}x{w}"
        )
    a = _to_unit(x.data.double()).permute(0, 3, 1, 2).reshape(t * c, 1, h, w)
    b = _to_unit(y.data.double()).permute(0, 3, 1, 2).reshape(t * c, 1, h, w)
    win = _gaussian_window(torch.float64)
    mu_a = F.conv2d(a, win)
    mu_b = F.conv2d(b, win)
    var_a = F.conv2d(a * a, win) - mu_a**2
    var_b = F.conv2d(b * b, win) - mu_b**2
    cov = F.conv2d(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_a**2 + mu_b**2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float((num / den).mean().item())


@dataclass(frozen=True)
class BenchReport:
    rows: list[dict]          # task, id, psnr, ssim
    per_task: dict[str, dict] # task -> {"psnr": mean, "ssim": mean, "count": n}
    overall: dict[str, float]


def evaluate_outputs(bench_dir: str | Path, outputs_dir: str | Path) -> BenchReport:
    """Score ``<task>/<id>.vt`` outputs against the stored ground truth.

    Every manifest row must have a matching output of matching shape.
    """
    bench_dir, outputs_dir = Path(bench_dir), Path(outputs_dir)
    rows = []
    for item in read_manifest(bench_dir):
        truth = read_video(bench_dir / item["task"] / f"{item['id']}.truth.vt")
        out_path = outputs_dir / item["task"] / f"{item['id']}.vt"
        if not out_path.is_file():
            raise ValidationError(f"missing output for {item['task']}/{item['id']}: {out_path}")
        produced = read_video(out_path)
        rows.append({
            "task": item["task"],
            "id": item["id"],
            "psnr": psnr(produced, truth),
            "ssim": ssim(produced, truth),
        })
    per_task: dict[str, dict] = {}
    for row in rows:
        bucket = per_task.setdefault(row["task"], {"psnr": 0.0, "ssim": 0.0, "count": 0})
        bucket["psnr"] += row["psnr"]
        bucket["ssim"] += row["ssim"]
        bucket["count"] += 1
    for bucket in per_task.values():
        bucket["psnr"] /= bucket["count"]
        bucket["ssim"] /= bucket["count"]
    overall = {
        "psnr": sum(r["psnr"] for r in rows) / len(rows),
        "ssim": sum(r["ssim"] for r in rows) / len(rows),
    } if rows else {"psnr": 0.0, "ssim": 0.0}
    return BenchReport(rows=rows, per_task=per_task, overall=overall)


def write_report(path: str | Path, report: BenchReport) -> None:
    lines = ["task\tid\tpsnr\tssim"]
    for row in report.rows:
        lines.append(f"{row['task']}\t{row['id']}\t{row['psnr']:.6f}\t{row['ssim']:.6f}")
    lines.append("")
    lines.append("task\tmean_psnr\tmean_ssim\tcount")
    for task in sorted(report.per_task):
        bucket = report.per_task[task]
        lines.append(
            f"{task}\t{bucket['psnr']:.6f}\t{bucket['ssim']:.6f}\t{bucket['count']}"
        )
    lines.append("")
    lines.append(
        f"overall\tmean_psnr={report.overall['psnr']:.6f}\t"
        f"mean_ssim={report.overall['ssim']:.6f}"
    )
    Path(path).write_text("\n".join(lines) + "\n")
