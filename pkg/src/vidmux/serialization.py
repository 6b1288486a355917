"""Flat binary containers for tensors, checkpoints, and condition bundles.

Everything is little-endian and dependency-free on the read side: a
rank-4 tensor file is eight uint32 header fields followed by the raw
element stream in row-major order.  Checkpoints reuse the same header
magic-plus-version discipline but store a sequence of named entries of
arbitrary rank, since model weights are not rank 4.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .conditioning import ConditionBundle, task_from_name
from .errors import ValidationError
from .latents import VideoTensor

MAGIC_TENSOR = int.from_bytes(b"VXT1", "little")
MAGIC_CHECKPOINT = int.from_bytes(b"VXC1", "little")
FORMAT_VERSION = 1

_DTYPE_TAGS = {torch.float32: 0, torch.float64: 1}
_TAG_DTYPES = {0: torch.float32, 1: torch.float64}
_TAG_NUMPY = {0: "<f4", 1: "<f8"}

_HEADER = struct.Struct("<8I")

__all__ = [
    "MAGIC_TENSOR",
    "MAGIC_CHECKPOINT",
    "FORMAT_VERSION",
    "write_tensor",
    "read_tensor",
    "write_video",
    "read_video",
    "save_checkpoint",
    "load_checkpoint",
    "write_bundle",
    "read_bundle",
]


def _to_le_bytes(tensor: torch.Tensor, tag: int) -> bytes:
    return np.ascontiguousarray(tensor.detach().numpy()).astype(_TAG_NUMPY[tag]).tobytes()


def _from_le_bytes(buf: bytes, tag: int, shape: tuple[int, ...]) -> torch.Tensor:
    arr = np.frombuffer(buf, dtype=_TAG_NUMPY[tag]).reshape(shape)
    return torch.from_numpy(arr.astype(_TAG_NUMPY[tag].replace("<", "="), copy=True))


def _dtype_tag(dtype: torch.dtype) -> int:
    try:
        return _DTYPE_TAGS[dtype]
    except KeyError:
        raise ValidationError(f"unsupported dtype for serialization: {dtype}") from None


def write_tensor(path: str | Path, tensor: torch.Tensor) -> None:
    """Write a rank-4 float tensor: 8 uint32 header fields, then the data."""
    if tensor.ndim != 4:
        raise ValidationError(f"tensor container holds rank-4 tensors, got rank {tensor.ndim}")
    tag = _dtype_tag(tensor.dtype)
    t, h, w, c = tensor.shape
    header = _HEADER.pack(MAGIC_TENSOR, FORMAT_VERSION, t, h, w, c, tag, 0)
    Path(path).write_bytes(header + _to_le_bytes(tensor, tag))


def read_tensor(path: str | Path) -> torch.Tensor:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    magic, version, t, h, w, c, tag, _ = _HEADER.unpack_from(raw)
    if magic != MAGIC_TENSOR:
        raise ValidationError(f"{path}: bad magic {magic:#010x}")
    if version != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported container version {version}")
    if tag not in _TAG_DTYPES:
        raise ValidationError(f"{path}: unknown dtype tag {tag}")
    count = t * h * w * c
    body = raw[_HEADER.size:]
    itemsize = 4 if tag == 0 else 8
    if len(body) != count * itemsize:
        raise ValidationError(f"{path}: payload holds {len(body)} bytes, expected {count * itemsize}")
    return _from_le_bytes(body, tag, (t, h, w, c))


def write_video(path: str | Path, video: VideoTensor) -> None:
    write_tensor(path, video.data)


def read_video(path: str | Path) -> VideoTensor:
    return VideoTensor(read_tensor(path))


def save_checkpoint(path: str | Path, state: dict[str, torch.Tensor]) -> None:
    """Write named tensors of arbitrary rank, sorted by name.

    Layout: the usual 8-field header (count in field 3), then per entry
    ``u32 name_len, name bytes, u32 dtype_tag, u32 ndim, u32*ndim dims,
    payload``.
    """
    if not state:
        raise ValidationError("refusing to write a checkpoint with no tensors")
    parts = [_HEADER.pack(MAGIC_CHECKPOINT, FORMAT_VERSION, len(state), 0, 0, 0, 0, 0)]
    for name in sorted(state):
        tensor = state[name]
        tag = _dtype_tag(tensor.dtype)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<II{tensor.ndim}I", tag, tensor.ndim, *tensor.shape))
        parts.append(_to_le_bytes(tensor, tag))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> dict[str, torch.Tensor]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    magic, version, count, *_ = _HEADER.unpack_from(raw)
    if magic != MAGIC_CHECKPOINT:
        raise ValidationError(f"{path}: bad magic {magic:#010x}")
    if version != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    state: dict[str, torch.Tensor] = {}
    offset = _HEADER.size
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        tag, ndim = struct.unpack_from("<II", raw, offset)
        offset += 8
        shape = struct.unpack_from(f"<{ndim}I", raw, offset) if ndim else ()
        offset += 4 * ndim
        if tag not in _TAG_DTYPES:
            raise ValidationError(f"{path}: unknown dtype tag {tag} for entry {name!r}")
        numel = 1
        for dim in shape:
            numel *= dim
        itemsize = 4 if tag == 0 else 8
        body = raw[offset:offset + numel * itemsize]
        if len(body) != numel * itemsize:
            raise ValidationError(f"{path}: truncated payload for entry {name!r}")
        offset += numel * itemsize
        state[name] = _from_le_bytes(body, tag, shape)
    if offset != len(raw):
        raise ValidationError(f"{path}: {len(raw) - offset} trailing bytes")
    return state


_BUNDLE_FILES = ("pixel.vt", "depth.vt", "mask.vt")


def write_bundle(directory: str | Path, bundle: ConditionBundle) -> None:
    """Persist a condition bundle as a directory: three tensor files and
    a ``meta.txt`` whose last line holds the raw prompt."""
    if "\n" in bundle.prompt:
        raise ValidationError("prompts must be single-line for bundle fixtures")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_video(directory / "pixel.vt", bundle.pixel_cond)
    write_video(directory / "depth.vt", bundle.depth_cond)
    write_video(directory / "mask.vt", bundle.mask)
    meta = (
        f"task={bundle.task.value}\n"
        f"motion_score={bundle.motion_score!r}\n"
        f"prompt={bundle.prompt}\n"
    )
    (directory / "meta.txt").write_text(meta)


def read_bundle(directory: str | Path) -> ConditionBundle:
    directory = Path(directory)
    meta_path = directory / "meta.txt"
    if not meta_path.is_file():
        raise ValidationError(f"{directory}: not a bundle directory (no meta.txt)")
    fields: dict[str, str] = {}
    for line in meta_path.read_text().splitlines():
        key, sep, value = line.partition("=")
        if sep:
            fields[key] = value
    for required in ("task", "motion_score", "prompt"):
        if required not in fields:
            raise ValidationError(f"{meta_path}: missing {required}")
    for name in _BUNDLE_FILES:
        if not (directory / name).is_file():
            raise ValidationError(f"{directory}: bundle is missing {name}")
    return ConditionBundle(
        pixel_cond=read_video(directory / "pixel.vt"),
        depth_cond=read_video(directory / "depth.vt"),
        mask=read_video(directory / "mask.vt"),
        task=task_from_name(fields["task"]),
        prompt=fields["prompt"],
        motion_score=float(fields["motion_score"]),
    )

