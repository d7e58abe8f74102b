"""Soft task matching: two-stage inference over the prompt bank.

Stage 1 probes with uniformly averaged sub-prompts and turns the class
probabilities into per-task weights (the class partition makes the sums a
distribution already, so no renormalization). Stage 2 re-infers with the
sub-prompts fused by those weights. Fusion happens at sub-prompt level,
after adapter projection and position offsets.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import FrozenBackbone, LayerPrompt
from .errors import ContractError, DataError
from .prompts import SubPromptSet
from .tensor import Tensor


class TaskWeights:
    """Non-negative weights over seen tasks, summing to 1 within 1e-6."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)
        if self.w.ndim != 1 or self.w.size < 1:
            raise ContractError(f"task weights must be a non-empty vector, got {self.w.shape}")
        if (self.w < 0).any():
            raise ContractError("task weights must be non-negative")
        if abs(float(self.w.sum()) - 1.0) > 1e-6:
            raise ContractError(f"task weights sum to {self.w.sum()!r}, not 1")

    def __len__(self) -> int:
        return self.w.size


class PromptBank:
    """Per-task prompt generators plus the class-to-task ownership map."""

    def __init__(self):
        self.generators: list = []
        self.task_classes: list[list[int]] = []

    @property
    def num_tasks(self) -> int:
        return len(self.generators)

    def add_task(self, generator, class_ids: list[int]) -> None:
        new = set(class_ids)
        for t, seen in enumerate(self.task_classes):
            overlap = new & set(seen)
            if overlap:
                raise DataError(
                    f"classes {sorted(overlap)} already owned by task {t}"
                )
        self.generators.append(generator)
        self.task_classes.append(list(class_ids))

    def class_columns(self) -> list[int]:
        """Global class ids in classifier-column order (task-major)."""
        out: list[int] = []
        for ids in self.task_classes:
            out.extend(ids)
        return out

    def ownership(self) -> np.ndarray:
        """Owning task index per classifier column."""
        out: list[int] = []
        for t, ids in enumerate(self.task_classes):
            out.extend([t] * len(ids))
        return np.asarray(out, dtype=np.int64)


def uniform_weights(num_tasks: int) -> TaskWeights:
    if num_tasks < 1:
        raise ContractError("need at least one task")
    return TaskWeights(np.full(num_tasks, 1.0 / num_tasks))


def aggregate_task_weights(probs: np.ndarray, ownership: np.ndarray) -> TaskWeights:
    """Sum class probabilities per owning task.

    The class sets partition all seen classes, so the sums form a
    distribution with no renormalization.
    """
    probs = np.asarray(probs, dtype=np.float64)
    ownership = np.asarray(ownership, dtype=np.int64)
    if probs.ndim != 1 or probs.shape != ownership.shape:
        raise ContractError(
            f"probs {probs.shape} and ownership {ownership.shape} must be "
            f"equal-length vectors"
        )
    if abs(float(probs.sum()) - 1.0) > 1e-6:
        raise ContractError(f"probabilities sum to {probs.sum()!r}, not 1")
    if (ownership < 0).any():
        raise ContractError("class without an owning task")
    num_tasks = int(ownership.max()) + 1
    w = np.zeros(num_tasks)
    np.add.at(w, ownership, probs)
    return TaskWeights(w)


def fuse_subprompts(sets: list[SubPromptSet], weights: TaskWeights) -> SubPromptSet:
    """Per layer: weighted sum of the tasks' key and value sub-prompts.

    A single-task bank short-circuits to that task's sub-prompts unscaled,
    keeping one-task inference bit-identical to a plain forward pass.
    """
    if len(sets) != len(weights):
        raise ContractError(
            f"{len(weights)} weights for {len(sets)} task prompt sets"
        )
    if len(sets) == 1:
        return sets[0]

    def mix(parts: list[Tensor]) -> Tensor:
        acc = T.scale(parts[0], weights.w[0])
        for tau in range(1, len(parts)):
            acc = T.add(acc, T.scale(parts[tau], weights.w[tau]))
        return acc

    num_layers = len(sets[0].layers)
    layers = []
    group_key = []
    group_value = []
    for i in range(num_layers):
        layers.append(LayerPrompt(
            mix([s.layers[i].key_prompt for s in sets]),
            mix([s.layers[i].value_prompt for s in sets]),
        ))
        group_key.append(mix([s.group_key[i] for s in sets]))
        group_value.append(mix([s.group_value[i] for s in sets]))
    return SubPromptSet(layers, group_key, group_value)


def fuse_subprompts_per_sample(sets: list[SubPromptSet],
                               weights: np.ndarray) -> list[LayerPrompt]:
    """Batched fusion: one (B, L, D) prompt pair per layer from per-sample
    task weights (B, T). Inference-only — operates on raw values."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[1] != len(sets):
        raise ContractError(
            f"per-sample weights {weights.shape} do not match {len(sets)} tasks"
        )
    out = []
    for i in range(len(sets[0].layers)):
        keys = np.stack([s.layers[i].key_prompt.data for s in sets])
        values = np.stack([s.layers[i].value_prompt.data for s in sets])
        fused_k = np.einsum("bt,tld->bld", weights, keys)
        fused_v = np.einsum("bt,tld->bld", weights, values)
        out.append(LayerPrompt(Tensor(fused_k), Tensor(fused_v)))
    return out


def _restrict(layers: list, prompt_layers) -> list:
    if prompt_layers is None:
        return layers
    lo, hi = prompt_layers
    return [lp if lo <= i < hi else None for i, lp in enumerate(layers)]


def two_stage_predict(bank: PromptBank, backbone: FrozenBackbone, classifier,
                      images, prompt_layers=None):
    """Predict with uniform-fused probe then task-weighted re-inference.

    Costs exactly two backbone forward passes per sample. Returns
    (class_id, TaskWeights) for a single (C,H,W) image, or
    (class_ids, weight matrix) for a batch. ``prompt_layers`` optionally
    restricts injection to a half-open layer range.
    """
    if bank.num_tasks < 1:
        raise ContractError("prompt bank is empty")
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    single = arr.ndim == 3
    sets = [g.subprompts() for g in bank.generators]
    ownership = bank.ownership()

    probe = fuse_subprompts(sets, uniform_weights(bank.num_tasks))
    feats1 = backbone.forward_features(images, _restrict(probe.layers, prompt_layers))
    if single:
        feats1 = T.reshape(feats1, (1,) + feats1.shape)
    probs = T.softmax(classifier.logits(feats1), axis=-1).data

    batch = probs.shape[0]
    weight_rows = np.zeros((batch, bank.num_tasks))
    for b in range(batch):
        weight_rows[b] = aggregate_task_weights(probs[b], ownership).w

    if bank.num_tasks == 1:
        stage2 = probe.layers  # identical prompts either way; skip refusing
    else:
        stage2 = fuse_subprompts_per_sample(sets, weight_rows)
    feats2 = backbone.forward_features(images, _restrict(stage2, prompt_layers))
    if single:
        feats2 = T.reshape(feats2, (1,) + feats2.shape)
    logits2 = classifier.logits(feats2).data
    columns = np.asarray(bank.class_columns())
    preds = columns[np.argmax(logits2, axis=-1)]

    if single:
        return int(preds[0]), TaskWeights(weight_rows[0])
    return preds, weight_rows
