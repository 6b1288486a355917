"""Desk-scale unified multi-task video generation and manipulation.

One latent diffusion transformer handles sixteen generation and
manipulation tasks through a shared condition interface: aligned pixel,
depth, and mask tensors plus a task-suffixed prompt.  The package pairs
it with a deterministic toy codec, a rectified-flow trainer, an Euler
guidance sampler, a benchmark pipeline, and a CLI.
"""

from .backbone import ModelConfig, PRESETS, ScalarConditions, VelocityModel, build_model
from .conditioning import (
    ConditionBundle,
    ConditionOptions,
    TaskTag,
    build_condition,
    qualified_tasks,
)
from .corpus import CorpusConfig, make_synthetic_corpus
from .flow import FlowSample, SamplerConfig, cfg_velocity, euler_sample, flow_loss, make_flow_sample
from .latents import LatentGrid, ToyCodec, VideoTensor
from .trainer import DropoutPolicy, RecipeStage, TaskWeights, train

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "PRESETS",
    "ScalarConditions",
    "VelocityModel",
    "build_model",
    "ConditionBundle",
    "ConditionOptions",
    "TaskTag",
    "build_condition",
    "qualified_tasks",
    "CorpusConfig",
    "make_synthetic_corpus",
    "FlowSample",
    "SamplerConfig",
    "cfg_velocity",
    "euler_sample",
    "flow_loss",
    "make_flow_sample",
    "LatentGrid",
    "ToyCodec",
    "VideoTensor",
    "DropoutPolicy",
    "RecipeStage",
    "TaskWeights",
    "train",
    "__version__",
]
