"""Velocity backbone: a 3D-attention transformer over latent tokens.

Each latent cell is one token.  Blocks run full self-attention across
all ``t * h * w`` tokens with rotary embeddings split over the three
grid axes, cross-attention into the text sequence, and a feed-forward
stage; scale/shift/gate modulation for the attention and feed-forward
branches comes from the summed timestep and motion embeddings.  Query
and key vectors are RMS-normalized per head with a learned gain before
rotation, and the output head is zero-initialized so an untrained model
predicts zero velocity.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn
import torch.nn.functional as F

from .adapter import ConditionAdapter, inject
from .conditioning import ConditionBundle
from .errors import NumericAbortError, ValidationError
from .latents import LatentGrid

ROPE_BASE = 10000.0
MAX_TEXT_TOKENS = 64
SCALAR_FREQ_DIM = 256
SCALAR_FREQ_SCALE = 1000.0
NORM_EPS = 1e-6

__all__ = [
    "ModelConfig",
    "PRESETS",
    "get_preset",
    "read_model_spec",
    "write_model_spec",
    "ScalarConditions",
    "grid_positions",
    "axis_channel_split",
    "rope3d",
    "apply_rope3d",
    "qk_norm",
    "embed_text",
    "sinusoidal_embedding",
    "TextEmbedder",
    "TransformerBlock",
    "VelocityModel",
    "build_model",
    "parameter_count",
]


@dataclass(frozen=True)
class ModelConfig:
    """Backbone hyperparameters.  ``model_dim`` is ``heads * head_dim``."""

    layers: int
    heads: int
    head_dim: int
    ffn_dim: int
    text_dim: int = 2048

    def __post_init__(self):
        for field in ("layers", "heads", "head_dim", "ffn_dim", "text_dim"):
            value = getattr(self, field)
            if not isinstance(value, int) or value < 1:
                raise ValidationError(f"{field} must be a positive integer, got {value!r}")
        if self.head_dim % 16:
            raise ValidationError(
                f"head_dim must be a multiple of 16 for the 2/8-3/8-3/8 rotary "
                f"split, got {self.head_dim}"
            )

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim


PRESETS = {
    "toy": ModelConfig(layers=2, heads=4, head_dim=16, ffn_dim=256, text_dim=2048),
    "2b": ModelConfig(layers=28, heads=28, head_dim=64, ffn_dim=7168, text_dim=2048),
    "8b": ModelConfig(layers=40, heads=48, head_dim=64, ffn_dim=12288, text_dim=2048),
}


def get_preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ValidationError(
            f"unknown preset {name!r}; choose from {sorted(PRESETS)}"
        ) from None


def write_model_spec(path: str | Path, config: ModelConfig, latent_channels: int) -> None:
    """Persist a config as sorted ``key=value`` lines."""
    fields = {
        "ffn_dim": config.ffn_dim,
        "head_dim": config.head_dim,
        "heads": config.heads,
        "latent_channels": latent_channels,
        "layers": config.layers,
        "text_dim": config.text_dim,
    }
    lines = [f"{key}={value}" for key, value in sorted(fields.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_model_spec(path: str | Path) -> tuple[ModelConfig, int]:
    fields: dict[str, int] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"{path}:{lineno}: expected key=value, got {line!r}")
        try:
            fields[key.strip()] = int(value.strip())
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: {key.strip()} must be an integer") from None
    try:
        latent_channels = fields.pop("latent_channels")
    except KeyError:
        raise ValidationError(f"{path}: missing latent_channels") from None
    try:
        config = ModelConfig(**fields)
    except TypeError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return config, latent_channels


@dataclass(frozen=True)
class ScalarConditions:
    """Per-call scalar inputs: diffusion time in [0, 1] and the clip's
    motion score."""

    timestep: float
    motion_score: float

    def __post_init__(self):
        if not (math.isfinite(self.timestep) and 0.0 <= self.timestep <= 1.0):
            raise ValidationError(f"timestep must lie in [0, 1], got {self.timestep}")
        if not (math.isfinite(self.motion_score) and self.motion_score >= 0.0):
            raise ValidationError(f"motion score must be finite and >= 0, got {self.motion_score}")


def grid_positions(t: int, h: int, w: int) -> torch.Tensor:
    """Integer (tau, eta, omega) coordinates for every cell of a
    (t, h, w) grid, flattened row-major to (t*h*w, 3)."""
    axes = torch.meshgrid(
        torch.arange(t), torch.arange(h), torch.arange(w), indexing="ij"
    )
    return torch.stack([a.reshape(-1) for a in axes], dim=-1)


def axis_channel_split(head_dim: int) -> tuple[int, int, int]:
    """Per-axis channel widths: 2/8 temporal, 3/8 per spatial axis."""
    if head_dim % 16:
        raise ValidationError(f"head_dim must be a multiple of 16, got {head_dim}")
    eighth = head_dim // 8
    return 2 * eighth, 3 * eighth, 3 * eighth


def _axis_angles(positions: torch.Tensor, width: int, dtype: torch.dtype) -> torch.Tensor:
    # positions: (L,) -> (L, width/2) rotation angles on a geometric
    # frequency ladder from 1 down to ~1/ROPE_BASE.
    exponents = torch.arange(0, width, 2, dtype=dtype) / width
    inv_freq = ROPE_BASE ** (-exponents)
    return positions.to(dtype).unsqueeze(-1) * inv_freq


def _rotate_pairs(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    # x: (..., L, width); angles: (L, width/2) broadcast over leading dims.
    cos, sin = angles.cos(), angles.sin()
    pairs = x.unflatten(-1, (-1, 2))
    even, odd = pairs[..., 0], pairs[..., 1]
    out = torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1)
    return out.flatten(-2)


def apply_rope3d(x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Rotate (..., L, head_dim) vectors by their grid positions (L, 3).

    Channels split 2/8-3/8-3/8 across the temporal and two spatial axes;
    each segment gets an independent rotary ladder.  Position (0, 0, 0)
    is the identity, and attention logits built from rotated vectors
    depend only on coordinate differences.
    """
    head_dim = x.shape[-1]
    widths = axis_channel_split(head_dim)
    if positions.ndim != 2 or positions.shape[-1] != 3:
        raise ValidationError(f"positions must be (L, 3), got {tuple(positions.shape)}")
    if positions.shape[0] != x.shape[-2]:
        raise ValidationError(
            f"{positions.shape[0]} positions for {x.shape[-2]} vectors"
        )
    segments = x.split(widths, dim=-1)
    out = [
        _rotate_pairs(seg, _axis_angles(positions[:, axis], width, x.dtype))
        for axis, (seg, width) in enumerate(zip(segments, widths))
    ]
    return torch.cat(out, dim=-1)


def rope3d(vector: torch.Tensor, position: torch.Tensor) -> torch.Tensor:
    """Single-vector form of :func:`apply_rope3d`."""
    if vector.ndim != 1:
        raise ValidationError(f"expected a flat head vector, got rank {vector.ndim}")
    return apply_rope3d(vector.unsqueeze(0), position.reshape(1, 3)).squeeze(0)


def qk_norm(x: torch.Tensor, gain: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """RMS-normalize the last axis and apply a per-channel gain."""
    rms = x.pow(2).mean(dim=-1, keepdim=True).add(eps).sqrt()
    return x / rms * gain


def _token_seed(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def embed_text(prompt: str, text_dim: int, *,
               null_vector: torch.Tensor | None = None,
               dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Deterministic hash-based token embeddings, (n_tokens, text_dim).

    Whitespace tokenization; each token seeds a unit Gaussian vector, so
    equal tokens embed equally across runs and prompts that differ only
    in their task suffix differ in the trailing tokens.  The null prompt
    maps to the single ``null_vector`` row, which must be supplied.
    """
    if not prompt.split():  # the null prompt, possibly padded
        if null_vector is None:
            raise ValidationError("null prompt needs a null embedding vector")
        return null_vector.reshape(1, -1).to(dtype)
    tokens = prompt.split()
    if len(tokens) > MAX_TEXT_TOKENS:
        # keep the head and the trailing task suffix
        tokens = tokens[:MAX_TEXT_TOKENS - 2] + tokens[-2:]
    rows = []
    for token in tokens:
        gen = torch.Generator().manual_seed(_token_seed(token))
        row = torch.randn(text_dim, generator=gen, dtype=torch.float64)
        rows.append(row / row.norm())
    return torch.stack(rows).to(dtype)


def sinusoidal_embedding(value: torch.Tensor, dim: int,
                         max_period: float = 10000.0) -> torch.Tensor:
    """Classic sin/cos features of a scalar, shaped (dim,)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=value.dtype) / half
    )
    args = value * freqs
    return torch.cat([args.cos(), args.sin()])


class TextEmbedder(nn.Module):
    """Hash-based text encoder with a learned null-prompt vector."""

    def __init__(self, text_dim: int):
        super().__init__()
        self.text_dim = text_dim
        self.null_vector = nn.Parameter(torch.randn(text_dim) / math.sqrt(text_dim))

    def forward(self, prompt: str) -> torch.Tensor:
        if not prompt.split():
            return self.null_vector.unsqueeze(0)
        return embed_text(prompt, self.text_dim, dtype=self.null_vector.dtype)


class ScalarEmbedder(nn.Module):
    """Sinusoidal features of one scalar pushed through a two-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj_in = nn.Linear(SCALAR_FREQ_DIM, dim)
        self.proj_out = nn.Linear(dim, dim)

    def forward(self, value: float | torch.Tensor) -> torch.Tensor:
        dtype = self.proj_in.weight.dtype
        if not isinstance(value, torch.Tensor):
            value = torch.tensor(float(value), dtype=dtype)
        feats = sinusoidal_embedding(value.to(dtype) * SCALAR_FREQ_SCALE, SCALAR_FREQ_DIM)
        return self.proj_out(F.silu(self.proj_in(feats)))


class SelfAttention(nn.Module):
    """Full 3D attention with per-head RMS query/key normalization and
    rotary position encoding applied after normalization."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        dim = config.model_dim
        self.heads = config.heads
        self.head_dim = config.head_dim
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.q_gain = nn.Parameter(torch.ones(config.head_dim))
        self.k_gain = nn.Parameter(torch.ones(config.head_dim))

    def forward(self, x: torch.Tensor, positions: torch.Tensor,
                return_weights: bool = False):
        length = x.shape[0]
        qkv = self.qkv(x).reshape(length, 3, self.heads, self.head_dim)
        q, k, v = (qkv[:, i].transpose(0, 1) for i in range(3))  # (heads, L, hd)
        q = apply_rope3d(qk_norm(q, self.q_gain), positions)
        k = apply_rope3d(qk_norm(k, self.k_gain), positions)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        weights = logits.softmax(dim=-1)
        y = (weights @ v).transpose(0, 1).reshape(length, -1)
        y = self.out(y)
        if return_weights:
            return y, weights
        return y


class CrossAttention(nn.Module):
    """Latent-token queries attending into the text sequence.

    The output projection starts at zero so text influence ramps in
    smoothly during training.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        dim = config.model_dim
        self.heads = config.heads
        self.head_dim = config.head_dim
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(config.text_dim, dim)
        self.to_v = nn.Linear(config.text_dim, dim)
        self.out = nn.Linear(dim, dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        length, s = x.shape[0], text.shape[0]
        q = self.to_q(x).reshape(length, self.heads, self.head_dim).transpose(0, 1)
        k = self.to_k(text).reshape(s, self.heads, self.head_dim).transpose(0, 1)
        v = self.to_v(text).reshape(s, self.heads, self.head_dim).transpose(0, 1)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        y = (logits.softmax(dim=-1) @ v).transpose(0, 1).reshape(length, -1)
        return self.out(y)


class FeedForward(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.up = nn.Linear(config.model_dim, config.ffn_dim)
        self.down = nn.Linear(config.ffn_dim, config.model_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down(F.gelu(self.up(x), approximate="tanh"))


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale) + shift


class TransformerBlock(nn.Module):
    """Self-attention, text cross-attention, and feed-forward stages.

    A zero-initialized projection of the scalar-condition embedding
    yields six modulation vectors (shift/scale/gate for the two
    modulated branches), so at initialization every block reduces to
    identity plus the untrained attention residuals.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        dim = config.model_dim
        self.norm_self = nn.LayerNorm(dim, eps=NORM_EPS, elementwise_affine=False)
        self.norm_cross = nn.LayerNorm(dim, eps=NORM_EPS, elementwise_affine=False)
        self.norm_ffn = nn.LayerNorm(dim, eps=NORM_EPS, elementwise_affine=False)
        self.self_attn = SelfAttention(config)
        self.cross_attn = CrossAttention(config)
        self.ffn = FeedForward(config)
        self.modulation = nn.Linear(dim, 6 * dim)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x: torch.Tensor, positions: torch.Tensor,
                text: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        mods = self.modulation(F.silu(cond)).chunk(6)
        shift_sa, scale_sa, gate_sa, shift_ff, scale_ff, gate_ff = mods
        h = _modulate(self.norm_self(x), shift_sa, scale_sa)
        x = x + gate_sa * self.self_attn(h, positions)
        x = x + self.cross_attn(self.norm_cross(x), text)
        h = _modulate(self.norm_ffn(x), shift_ff, scale_ff)
        return x + gate_ff * self.ffn(h)


class VelocityModel(nn.Module):
    """Full velocity predictor: adapter injection, token embedding,
    transformer blocks, and a zero-initialized output head."""

    def __init__(self, config: ModelConfig, latent_channels: int,
                 adapter: ConditionAdapter):
        super().__init__()
        if adapter.latent_channels != latent_channels:
            raise ValidationError(
                f"adapter emits {adapter.latent_channels} channels, "
                f"model expects {latent_channels}"
            )
        dim = config.model_dim
        self.config = config
        self.latent_channels = latent_channels
        self.adapter = adapter
        self.token_embed = nn.Linear(latent_channels, dim)
        self.text = TextEmbedder(config.text_dim)
        self.time_embed = ScalarEmbedder(dim)
        self.motion_embed = ScalarEmbedder(dim)
        self.blocks = nn.ModuleList(TransformerBlock(config) for _ in range(config.layers))
        self.final_norm = nn.LayerNorm(dim, eps=NORM_EPS, elementwise_affine=False)
        self.head = nn.Linear(dim, latent_channels)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, latent: LatentGrid, bundle: ConditionBundle,
                scalars: ScalarConditions) -> LatentGrid:
        if latent.c != self.latent_channels:
            raise ValidationError(
                f"latent has {latent.c} channels, model expects {self.latent_channels}"
            )
        x = inject(latent, self.adapter(bundle))
        t, h, w, c = x.data.shape
        tokens = self.token_embed(x.data.reshape(-1, c))
        positions = grid_positions(t, h, w)
        text = self.text(bundle.prompt)
        cond = self.time_embed(scalars.timestep) + self.motion_embed(scalars.motion_score)
        for block in self.blocks:
            tokens = block(tokens, positions, text, cond)
        out = self.head(self.final_norm(tokens))
        if not torch.isfinite(out).all():
            raise NumericAbortError("velocity model produced non-finite outputs")
        return LatentGrid(out.reshape(t, h, w, c), source_frames=latent.source_frames)


def build_model(config: ModelConfig, latent_channels: int, seed: int = 0) -> VelocityModel:
    """Construct a model with all parameters drawn deterministically."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        adapter = ConditionAdapter(latent_channels)
        return VelocityModel(config, latent_channels, adapter)


def parameter_count(config: ModelConfig, latent_channels: int,
                    include_adapter: bool = False) -> int:
    """Closed-form parameter total; mirrors the module structure."""
    dim = config.model_dim
    linear = lambda fan_in, fan_out: fan_in * fan_out + fan_out
    scalar_mlp = linear(SCALAR_FREQ_DIM, dim) + linear(dim, dim)
    block = (
        linear(dim, 6 * dim)                      # modulation
        + linear(dim, 3 * dim) + linear(dim, dim)  # self-attention qkv + out
        + 2 * config.head_dim                      # q/k gains
        + linear(dim, dim)                         # cross-attention queries
        + 2 * linear(config.text_dim, dim)         # cross-attention keys/values
        + linear(dim, dim)                         # cross-attention out
        + linear(dim, config.ffn_dim) + linear(config.ffn_dim, dim)
    )
    total = (
        linear(latent_channels, dim)
        + config.text_dim                          # null prompt vector
        + 2 * scalar_mlp
        + config.layers * block
        + linear(dim, latent_channels)
    )
    if include_adapter:
        hidden = max(1, latent_channels // 4)
        conv = lambda fan_in, fan_out: fan_in * fan_out * 27 + fan_out
        total += (
            conv(5, hidden) + 2 * conv(hidden, hidden) + conv(hidden, latent_channels)
        )
    return total
