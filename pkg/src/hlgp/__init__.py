"""Hierarchical layer-grouped prompt tuning for class-incremental learning.

A frozen desk-scale ViT is steered per task by key/value prompts derived
from a single root prompt through per-group bottleneck adapters and
per-layer position offsets, with two-stage soft task matching at
inference. Includes a built-in reverse-mode autodiff engine verified
against finite differences, a synthetic benchmark, and a CLI harness.
"""

from .backbone import FrozenBackbone, LayerPrompt, ViTConfig
from .config import ExperimentConfig, load_config
from .data import SyntheticSpec, TaskStream, generate_stream, load_external
from .fusion import PromptBank, TaskWeights, two_stage_predict
from .metrics import AccuracyMatrix, af, caa, faa
from .prompts import (
    GroupAdapter,
    HlgpGenerator,
    IndependentGenerator,
    PIETable,
    RootPrompt,
    SubPromptSet,
    count_trainable_params,
    partition_layers,
)
from .tensor import Tape, Tensor, finite_diff_grad
from .trainer import ContinualState, TrainConfig, pretrain_backbone, run_stream

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix",
    "ContinualState",
    "ExperimentConfig",
    "FrozenBackbone",
    "GroupAdapter",
    "HlgpGenerator",
    "IndependentGenerator",
    "LayerPrompt",
    "PIETable",
    "PromptBank",
    "RootPrompt",
    "SubPromptSet",
    "SyntheticSpec",
    "Tape",
    "TaskStream",
    "TaskWeights",
    "Tensor",
    "TrainConfig",
    "ViTConfig",
    "af",
    "caa",
    "count_trainable_params",
    "faa",
    "finite_diff_grad",
    "generate_stream",
    "load_config",
    "load_external",
    "partition_layers",
    "pretrain_backbone",
    "run_stream",
    "two_stage_predict",
    "__version__",
]
