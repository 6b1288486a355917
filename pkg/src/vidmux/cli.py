"""Command-line front end.

Subcommands cover the full loop: build a condition bundle from a clip,
train on a synthetic corpus, sample from a checkpoint, build and score
benchmarks, and inspect any artifact.  Every mutating command writes a
``manifest.json`` recording the command, flags, seed, input hashes, and
output hashes; manifests carry no timestamps, so reruns with equal
inputs and seed produce byte-identical trees.

Exit codes: 0 success, 2 validation or usage errors, 3 numeric aborts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import torch

from . import bench as bench_mod
from .backbone import (
    ScalarConditions,
    build_model,
    get_preset,
    parameter_count,
    read_model_spec,
    write_model_spec,
)
from .conditioning import ConditionOptions, build_condition, task_from_name
from .corpus import make_synthetic_corpus, read_corpus_spec
from .errors import NumericAbortError, ValidationError
from .flow import SamplerConfig, euler_sample
from .latents import ToyCodec
from .serialization import (
    load_checkpoint,
    read_bundle,
    read_tensor,
    read_video,
    save_checkpoint,
    write_bundle,
    write_video,
)
from .trainer import loss_ratio, read_recipe, train, write_metrics

SEED_ENV_VAR = "VIDMUX_SEED"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV_VAR, "0")
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from None


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_tree(root: Path, skip: tuple[str, ...] = ("manifest.json",)) -> dict[str, str]:
    """Relative path -> sha256 for every file under ``root``."""
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.name not in skip:
            out[str(path.relative_to(root))] = _sha256(path)
    return out


def _write_manifest(out_dir: Path, command: str, flags: dict, seed: int,
                    inputs: dict[str, Path], extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "flags": {k: str(v) for k, v in sorted(flags.items())},
        "seed": seed,
        "inputs": {
            name: {"path": str(path), "sha256": _sha256(Path(path))}
            for name, path in sorted(inputs.items())
        },
        "artifacts": _hash_tree(out_dir),
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def cmd_build_conditions(args) -> int:
    clip = read_video(args.input)
    task = task_from_name(args.task)
    options = ConditionOptions(
        clip_frames=args.clip_frames,
        sr_factor=args.sr_factor,
        edit_instruction=args.edit_instruction,
    )
    bundle = build_condition(clip, task, args.prompt, _generator(args.seed), options)
    out = Path(args.out)
    write_bundle(out, bundle)
    _write_manifest(
        out, "build-conditions",
        {"input": args.input, "task": args.task, "prompt": args.prompt},
        args.seed, {"input": Path(args.input)},
    )
    print(f"wrote bundle for {task.value} to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    recipe = read_recipe(args.recipe)
    corpus_config = read_corpus_spec(args.corpus)
    config = get_preset(args.preset)
    latent_channels = args.latent_channels
    if args.preset.lower() in ("2b", "8b"):
        count = parameter_count(config, latent_channels)
        print(
            f"refusing to train the {args.preset.lower()} preset: "
            f"{count:,} parameters is far beyond desk scale; "
            f"the configuration validated cleanly (use --preset toy to train)",
            file=sys.stderr,
        )
        return EXIT_VALIDATION
    corpus = make_synthetic_corpus(corpus_config, _generator(args.seed))
    result = train(recipe, corpus, config, latent_channels=latent_channels,
                   seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.vxc",
                    {k: v.detach() for k, v in result.model.state_dict().items()})
    write_model_spec(out / "model.cfg", config, result.codec.latent_channels)
    write_metrics(out / "metrics.tsv", result.records)
    extra = {"steps": result.records[-1].step + 1 if result.records else 0}
    try:
        extra["loss_ratio_final_to_initial"] = loss_ratio(result.records)
    except ValidationError:
        pass  # short runs have no 100-step windows to compare
    _write_manifest(
        out, "train",
        {"recipe": args.recipe, "corpus": args.corpus, "preset": args.preset,
         "latent_channels": latent_channels},
        args.seed,
        {"recipe": Path(args.recipe), "corpus": Path(args.corpus)},
        extra=extra,
    )
    final = result.records[-1].loss if result.records else float("nan")
    print(f"trained {len(result.records)} samples; final loss {final:.6f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    config, latent_channels = read_model_spec(args.config)
    state = load_checkpoint(args.checkpoint)
    model = build_model(config, latent_channels, seed=0)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise ValidationError(f"checkpoint does not fit the configuration: {exc}") from None
    model.eval()
    bundle = read_bundle(args.bundle)
    codec = ToyCodec(pixel_channels=3, latent_channels=latent_channels)
    sampler = SamplerConfig(steps=args.steps, guidance_scale=args.cfg_scale)

    def velocity(latent, time, cond_bundle):
        return model(latent, cond_bundle, ScalarConditions(time, cond_bundle.motion_score))

    shape = codec.latent_shape(bundle.frames, bundle.height, bundle.width)
    with torch.no_grad():
        grid = euler_sample(velocity, bundle, sampler, _generator(args.seed),
                            shape, source_frames=bundle.frames)
        video = codec.decode(grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_video(out / "sample.vt", video)
    _write_manifest(
        out, "sample",
        {"checkpoint": args.checkpoint, "config": args.config, "bundle": args.bundle,
         "steps": args.steps, "cfg_scale": args.cfg_scale},
        args.seed,
        {"checkpoint": Path(args.checkpoint), "config": Path(args.config)},
    )
    print(f"sampled {video.frames}x{video.height}x{video.width} video to {out / 'sample.vt'}")
    return EXIT_OK


def cmd_bench_build(args) -> int:
    corpus_config = read_corpus_spec(args.corpus)
    rng = _generator(args.seed)
    corpus = make_synthetic_corpus(corpus_config, rng)
    clips = [s.clip for s in corpus if s.kind == "video"]
    captions = [s.caption for s in corpus if s.kind == "video"]
    config = bench_mod.BenchConfig(
        frames=args.frames,
        blur_threshold=args.blur_threshold,
        motion_threshold=args.motion_threshold,
    )
    entries = bench_mod.build_benchmark(clips, captions, config, rng)
    out = Path(args.out)
    bench_mod.write_benchmark(out, entries)
    _write_manifest(
        out, "bench-build",
        {"corpus": args.corpus, "frames": args.frames,
         "blur_threshold": args.blur_threshold,
         "motion_threshold": args.motion_threshold},
        args.seed, {"corpus": Path(args.corpus)},
        extra={"samples": len(entries)},
    )
    print(f"built {len(entries)} benchmark samples in {out}")
    return EXIT_OK


def cmd_bench_eval(args) -> int:
    report = bench_mod.evaluate_outputs(args.benchmark, args.outputs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench_mod.write_report(out / "report.tsv", report)
    _write_manifest(
        out, "bench-eval",
        {"benchmark": args.benchmark, "outputs": args.outputs},
        args.seed, {},
        extra={"overall": report.overall},
    )
    print(
        f"scored {len(report.rows)} outputs: "
        f"mean psnr {report.overall['psnr']:.3f} dB, "
        f"mean ssim {report.overall['ssim']:.4f}"
    )
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        if (path / "meta.txt").is_file():
            bundle = read_bundle(path)
            print(f"condition bundle: task={bundle.task.value}")
            print(f"  extent: {bundle.frames}x{bundle.height}x{bundle.width}")
            print(f"  motion score: {bundle.motion_score:.6f}")
            print(f"  prompt: {bundle.prompt}")
            print(f"  mask coverage: {bundle.mask.data.mean().item():.4f}")
            return EXIT_OK
        if (path / "manifest.tsv").is_file():
            rows = bench_mod.read_manifest(path)
            tasks = sorted({r['task'] for r in rows})
            print(f"benchmark: {len(rows)} samples, {len(tasks)} tasks")
            for task in tasks:
                n = sum(1 for r in rows if r["task"] == task)
                print(f"  {task}: {n}")
            return EXIT_OK
        raise ValidationError(f"{path}: directory is neither a bundle nor a benchmark")
    raw = path.read_bytes()[:4]
    if raw == b"VXC1":
        state = load_checkpoint(path)
        total = sum(v.numel() for v in state.values())
        print(f"checkpoint: {len(state)} tensors, {total:,} parameters")
        for name in list(sorted(state))[:8]:
            print(f"  {name}: {tuple(state[name].shape)}")
        if len(state) > 8:
            print(f"  ... and {len(state) - 8} more")
        return EXIT_OK
    tensor = read_tensor(path)
    print(f"tensor: shape {tuple(tensor.shape)}, dtype {tensor.dtype}")
    print(f"  range: [{tensor.min().item():.6f}, {tensor.max().item():.6f}]")
    print(f"  mean: {tensor.mean().item():.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidmux",
        description="desk-scale multi-task video generation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_seed(p):
        p.add_argument("--seed", type=int, default=None,
                       help=f"RNG seed (default: ${SEED_ENV_VAR} or 0)")

    p = sub.add_parser("build-conditions", help="derive a condition bundle from a clip")
    p.add_argument("--input", required=True, help="source clip (.vt)")
    p.add_argument("--task", required=True, help="canonical task name")
    p.add_argument("--prompt", default="", help="text prompt (before the task suffix)")
    p.add_argument("--clip-frames", type=int, default=None,
                   help="pin the end-window length, for extension-style tasks")
    p.add_argument("--sr-factor", type=int, default=None,
                   help="pin the super-resolution degradation factor")
    p.add_argument("--edit-instruction", default=None,
                   help="override the editing style instruction")
    p.add_argument("--out", required=True, help="output bundle directory")
    add_seed(p)
    p.set_defaults(func=cmd_build_conditions)

    p = sub.add_parser("train", help="train on a synthetic corpus")
    p.add_argument("--recipe", required=True, help="recipe file (one stage per line)")
    p.add_argument("--corpus", required=True, help="corpus spec file (key=value lines)")
    p.add_argument("--preset", default="toy", help="model preset: toy, 2b, 8b")
    p.add_argument("--latent-channels", type=int, default=16,
                   help="latent width (projected codec)")
    p.add_argument("--out", required=True, help="output directory")
    add_seed(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate a video from a bundle")
    p.add_argument("--checkpoint", required=True, help="trained weights (.vxc)")
    p.add_argument("--config", required=True, help="model spec file")
    p.add_argument("--bundle", required=True, help="condition bundle directory")
    p.add_argument("--steps", type=int, default=50, help="Euler steps")
    p.add_argument("--cfg-scale", type=float, default=9.0, help="guidance scale")
    p.add_argument("--out", required=True, help="output directory")
    add_seed(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("bench-build", help="construct the benchmark")
    p.add_argument("--corpus", required=True, help="corpus spec file for source clips")
    p.add_argument("--frames", type=int, default=97, help="benchmark clip length")
    p.add_argument("--blur-threshold", type=float, default=200.0)
    p.add_argument("--motion-threshold", type=float, default=0.02)
    p.add_argument("--out", required=True, help="output directory")
    add_seed(p)
    p.set_defaults(func=cmd_bench_build)

    p = sub.add_parser("bench-eval", help="score outputs against a benchmark")
    p.add_argument("--benchmark", required=True, help="benchmark directory")
    p.add_argument("--outputs", required=True,
                   help="directory of <task>/<id>.vt outputs")
    p.add_argument("--out", required=True, help="report directory")
    add_seed(p)
    p.set_defaults(func=cmd_bench_eval)

    p = sub.add_parser("inspect", help="describe a tensor, checkpoint, bundle, or benchmark")
    p.add_argument("path", help="artifact path")
    add_seed(p)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)  # fixed reduction order: same seed, same bytes
    try:
        if getattr(args, "seed", None) is None:
            args.seed = _default_seed()
        return args.func(args)
    except NumericAbortError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
