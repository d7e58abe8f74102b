"""Continual-learning loop over a frozen backbone.

Each task gets its own prompt generator (fresh for task 0, deep-copied
from the preceding task afterwards) and its own classifier rows. Training
optimizes cross-entropy masked to the current task's classes; the forward
pass fuses sub-prompts of all tasks seen so far with uniform weights, so
frozen tasks keep contributing their (constant) prompts. After a task
finishes, its generator and classifier rows freeze and stay bit-stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import FrozenBackbone
from .data import Task, TaskStream, batches
from .errors import ConfigError, ContractError, DataError
from .fusion import PromptBank, fuse_subprompts, two_stage_predict, uniform_weights
from .metrics import AccuracyMatrix
from .prompts import PIE_MODES, PROMPT_MODES, clone_generator, make_generator
from .tensor import Tensor

TRAIN_FUSION_MODES = ("uniform", "current_only")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    batch_size: int = 24
    epochs_per_task: int = 20
    seed: int = 0
    prompt_mode: str = "hlgp_pie"
    pie_mode: str = "shared"
    shared_layers: int = 4
    rank: int = 16
    prompt_len: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    train_fusion: str = "uniform"
    eval_batch_size: int = 64
    # half-open [start, stop) layer range receiving prompts; None = all layers
    prompt_layers: tuple[int, int] | None = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs_per_task <= 0:
            raise ConfigError("learning_rate, batch_size, epochs_per_task must be positive")
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError(f"unknown prompt_mode {self.prompt_mode!r}")
        if self.pie_mode not in PIE_MODES:
            raise ConfigError(f"unknown pie_mode {self.pie_mode!r}")
        if self.train_fusion not in TRAIN_FUSION_MODES:
            raise ConfigError(f"unknown train_fusion {self.train_fusion!r}")
        if self.prompt_len < 0 or self.rank < 1 or self.shared_layers < 1:
            raise ConfigError("prompt_len/rank/shared_layers out of range")
        if self.prompt_layers is not None:
            object.__setattr__(self, "prompt_layers", tuple(self.prompt_layers))
            lo, hi = self.prompt_layers
            if lo < 0 or hi < lo:
                raise ConfigError(f"bad prompt_layers range {self.prompt_layers}")


class Adam:
    """Adam with per-tensor first/second moments, checkpointable."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(sorted(params.items()))
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


class Classifier:
    """Linear head whose rows grow with the classes of each new task."""

    def __init__(self, embed_dim: int):
        self.embed_dim = embed_dim
        self.parts: list[tuple[Tensor, Tensor]] = []

    @property
    def num_classes(self) -> int:
        return sum(w.shape[0] for w, _ in self.parts)

    def add_task(self, num_classes: int) -> None:
        t = len(self.parts)
        w = Tensor(np.zeros((num_classes, self.embed_dim)), trainable=True,
                   name=f"classifier.task{t}.weight")
        b = Tensor(np.zeros(num_classes), trainable=True,
                   name=f"classifier.task{t}.bias")
        self.parts.append((w, b))

    def logits(self, feats: Tensor) -> Tensor:
        if not self.parts:
            raise ContractError("classifier has no tasks")
        cols = [
            T.add(T.matmul(feats, T.transpose(w)), b) for w, b in self.parts
        ]
        return cols[0] if len(cols) == 1 else T.concat(cols, axis=-1)

    def freeze_task(self, t: int) -> None:
        for tensor in self.parts[t]:
            tensor.freeze()

    def trainable_tensors(self) -> dict[str, Tensor]:
        return {t.name: t for part in self.parts for t in part if t.trainable}

    def named_tensors(self) -> dict[str, Tensor]:
        return {t.name: t for part in self.parts for t in part}


@dataclass
class ContinualState:
    backbone: FrozenBackbone
    bank: PromptBank
    classifier: Classifier
    matrix: AccuracyMatrix
    completed_tasks: int = 0
    adam: Adam | None = None
    prediction_log: list = field(default_factory=list)

    @classmethod
    def fresh(cls, backbone: FrozenBackbone) -> "ContinualState":
        return cls(backbone=backbone, bank=PromptBank(),
                   classifier=Classifier(backbone.cfg.embed_dim),
                   matrix=AccuracyMatrix())


def init_task(state: ContinualState, task: Task, cfg: TrainConfig) -> None:
    """Create task ``task.task_id``'s generator and classifier rows.

    Task 0 is freshly initialized; later tasks deep-copy the preceding
    task's parameters as their trainable starting point.
    """
    t = task.task_id
    if t != state.completed_tasks or t != state.bank.num_tasks:
        raise ContractError(
            f"cannot init task {t}: {state.completed_tasks} tasks completed, "
            f"{state.bank.num_tasks} in bank"
        )
    if not state.backbone.is_frozen():
        raise ContractError("backbone must be frozen before continual training")
    bcfg = state.backbone.cfg
    if t == 0:
        gen = make_generator(cfg.prompt_mode, 0, cfg.prompt_len, bcfg.embed_dim,
                             bcfg.num_layers, cfg.shared_layers, cfg.rank,
                             cfg.pie_mode, cfg.seed)
    else:
        gen = clone_generator(t, state.bank.generators[t - 1])
    state.bank.add_task(gen, task.class_ids)
    state.classifier.add_task(len(task.class_ids))
    params = dict(gen.trainable_tensors())
    params.update(state.classifier.trainable_tensors())
    state.adam = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2,
                      cfg.adam_eps)


def _column_map(bank: PromptBank) -> dict[int, int]:
    return {c: i for i, c in enumerate(bank.class_columns())}


def restrict_prompt_layers(layers: list, prompt_layers) -> list:
    """Blank out prompts for layers outside the configured range."""
    if prompt_layers is None:
        return layers
    lo, hi = prompt_layers
    return [lp if lo <= i < hi else None for i, lp in enumerate(layers)]


def _train_forward(state: ContinualState, images: np.ndarray,
                   cfg: TrainConfig) -> Tensor:
    sets = [g.subprompts() for g in state.bank.generators]
    if cfg.train_fusion == "current_only":
        fused = sets[-1]
    else:
        fused = fuse_subprompts(sets, uniform_weights(len(sets)))
    layers = restrict_prompt_layers(fused.layers, cfg.prompt_layers)
    return state.backbone.forward_features(images, layers)


def train_task(state: ContinualState, task: Task, cfg: TrainConfig) -> dict:
    """Adam steps on current-class-masked cross-entropy; returns a summary."""
    t = task.task_id
    if state.bank.num_tasks != t + 1 or state.adam is None:
        raise ContractError(f"init_task({t}) must run before train_task")
    if len(task.train_labels) == 0:
        raise ContractError(f"task {t} has no training data")
    col_map = _column_map(state.bank)
    mask = np.zeros(state.classifier.num_classes, dtype=bool)
    for c in task.class_ids:
        mask[col_map[c]] = True

    first_loss = None
    last_loss = float("nan")
    for epoch in range(cfg.epochs_per_task):
        for images, labels in batches(task, cfg.batch_size, cfg.seed, epoch):
            cols = np.array([col_map[int(l)] for l in labels])
            state.adam.zero_grad()
            with T.Tape() as tape:
                feats = _train_forward(state, images, cfg)
                logits = state.classifier.logits(feats)
                loss = T.cross_entropy_from_logits(logits, cols, class_mask=mask)
            tape.backward(loss)
            state.adam.step()
            last_loss = loss.item()
            if first_loss is None:
                first_loss = last_loss

    correct = 0
    for images, labels in batches(task, cfg.eval_batch_size, cfg.seed, 0):
        cols = np.array([col_map[int(l)] for l in labels])
        logits = state.classifier.logits(_train_forward(state, images, cfg)).data
        masked = np.where(mask, logits, -np.inf)
        correct += int((np.argmax(masked, axis=-1) == cols).sum())
    train_acc = 100.0 * correct / len(task.train_labels)
    return {"task": t, "first_loss": first_loss, "final_loss": last_loss,
            "train_accuracy": train_acc}


def freeze_task(state: ContinualState, t: int) -> None:
    state.bank.generators[t].freeze()
    state.classifier.freeze_task(t)
    state.completed_tasks = t + 1


def evaluate_seen_tasks(state: ContinualState, stream: TaskStream,
                        cfg: TrainConfig) -> list[float]:
    """Two-stage accuracy on every seen task's test set, logging predictions."""
    after = state.completed_tasks - 1
    row = []
    for j in range(state.completed_tasks):
        task = stream.tasks[j]
        hits = 0
        n = len(task.test_labels)
        for start in range(0, n, cfg.eval_batch_size):
            images = task.test_images[start : start + cfg.eval_batch_size]
            labels = task.test_labels[start : start + cfg.eval_batch_size]
            preds, _ = two_stage_predict(state.bank, state.backbone,
                                         state.classifier, images,
                                         prompt_layers=cfg.prompt_layers)
            for p, l in zip(preds, labels):
                state.prediction_log.append((after, j, int(p), int(l)))
                hits += int(p == l)
        row.append(100.0 * hits / n)
    return row


def pretrain_backbone(backbone: FrozenBackbone, base_task: Task,
                      learning_rate: float = 1e-3, batch_size: int = 24,
                      epochs: int = 30, seed: int = 0) -> dict:
    """Train the whole backbone on a held-out base split, then freeze it.

    The temporary base classifier is discarded; only the frozen feature
    extractor survives. Returns a summary with the base test accuracy.
    """
    if backbone.is_frozen():
        raise ContractError("backbone is already frozen")
    classes = sorted(base_task.class_ids)
    col = {c: i for i, c in enumerate(classes)}
    head_w = Tensor(np.zeros((len(classes), backbone.cfg.embed_dim)),
                    trainable=True, name="base_head.weight")
    head_b = Tensor(np.zeros(len(classes)), trainable=True, name="base_head.bias")
    params = dict(backbone.trainable_tensors())
    params["base_head.weight"] = head_w
    params["base_head.bias"] = head_b
    adam = Adam(params, learning_rate)
    last_loss = float("nan")
    for epoch in range(epochs):
        for images, labels in batches(base_task, batch_size, seed, epoch):
            cols = np.array([col[int(l)] for l in labels])
            adam.zero_grad()
            with T.Tape() as tape:
                feats = backbone.forward_features(images)
                logits = T.add(T.matmul(feats, T.transpose(head_w)), head_b)
                loss = T.cross_entropy_from_logits(logits, cols)
            tape.backward(loss)
            adam.step()
            last_loss = loss.item()
    backbone.freeze()

    hits = 0
    n = len(base_task.test_labels)
    for start in range(0, n, 64):
        images = base_task.test_images[start : start + 64]
        labels = base_task.test_labels[start : start + 64]
        feats = backbone.forward_features(images)
        logits = (T.add(T.matmul(feats, T.transpose(head_w)), head_b)).data
        preds = np.argmax(logits, axis=-1)
        hits += int(sum(preds[i] == col[int(l)] for i, l in enumerate(labels)))
    return {
        "final_loss": last_loss,
        "base_test_accuracy": 100.0 * hits / n,
        "backbone_hash": backbone.content_hash(),
    }


def run_stream(backbone: FrozenBackbone, stream: TaskStream, cfg: TrainConfig,
               state: ContinualState | None = None,
               on_task_complete=None) -> ContinualState:
    """Full continual run: init, train, freeze, evaluate for each task.

    Pass a resumed ``state`` to continue after its completed tasks; the
    result is identical to an uninterrupted run with the same seeds.
    """
    if stream.num_tasks < 1:
        raise DataError("stream has no tasks")
    if state is None:
        state = ContinualState.fresh(backbone)
    if state.backbone is not backbone:
        raise ContractError("state was built for a different backbone object")
    for t in range(state.completed_tasks, stream.num_tasks):
        task = stream.tasks[t]
        init_task(state, task, cfg)
        train_task(state, task, cfg)
        freeze_task(state, t)
        state.matrix.add_row(evaluate_seen_tasks(state, stream, cfg))
        if on_task_complete is not None:
            on_task_complete(state)
    return state
