"""Synthetic class-incremental task streams and the raw-tensor dataset file.

Each class is a procedural prototype: an orientation/frequency grating plus
a colored Gaussian blob in one quadrant, with Gaussian pixel noise on top.
Prototypes are arranged so classes within a task separate easily while the
same class slot across tasks stays visually close — the stream is meant to
expose forgetting, not raw capacity.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    MagicError,
    TruncationError,
    VersionError,
)
from .rand import rng_for

DATA_MAGIC = b"HLGPDATA"
DATA_VERSION = 1

# Beyond this many distinct classes the prototype parameters start to
# collide (orientation/phase wrap), so stream construction refuses.
PATTERN_VOCAB_SIZE = 64

_PALETTE = np.array(
    [
        [1.0, 0.2, -0.6],
        [-0.8, 0.9, 0.1],
        [0.1, -0.5, 1.0],
        [0.9, 0.8, -0.9],
        [-1.0, 0.3, 0.7],
        [0.5, -0.9, -0.4],
        [-0.3, -0.7, 0.9],
        [0.7, 0.6, 0.5],
        [-0.6, 1.0, -0.8],
        [0.2, 0.4, -1.0],
        [-0.9, -0.2, -0.7],
        [0.8, -0.4, 0.6],
    ]
)

_GOLDEN = 0.618033988749895


@dataclass(frozen=True)
class SyntheticSpec:
    tasks: int
    classes_per_task: int
    train_per_class: int
    test_per_class: int
    image_size: int = 16
    channels: int = 3
    noise: float = 0.1
    seed: int = 0
    class_offset: int = 0

    def __post_init__(self):
        for name in ("tasks", "classes_per_task", "train_per_class", "test_per_class",
                     "image_size", "channels"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"SyntheticSpec.{name} must be positive")
        if self.noise < 0:
            raise ConfigError("SyntheticSpec.noise must be >= 0")
        if self.class_offset < 0:
            raise ConfigError("SyntheticSpec.class_offset must be >= 0")
        total = self.class_offset + self.tasks * self.classes_per_task
        if total > PATTERN_VOCAB_SIZE:
            raise ConfigError(
                f"{total} classes exceed the pattern vocabulary "
                f"({PATTERN_VOCAB_SIZE})"
            )


@dataclass
class Task:
    task_id: int
    class_ids: list[int]
    train_images: np.ndarray  # (N, C, H, W) float64 holding f32-exact values
    train_labels: np.ndarray  # (N,) int64, values from class_ids
    test_images: np.ndarray
    test_labels: np.ndarray


@dataclass
class TaskStream:
    tasks: list[Task]
    image_shape: tuple  # (C, H, W)

    def __post_init__(self):
        seen: set[int] = set()
        for task in self.tasks:
            ids = set(task.class_ids)
            if ids & seen:
                raise DataError(
                    f"task {task.task_id} reuses classes {sorted(ids & seen)}"
                )
            seen |= ids
            for labels in (task.train_labels, task.test_labels):
                bad = set(np.unique(labels).tolist()) - ids
                if bad:
                    raise DataError(
                        f"task {task.task_id} has labels {sorted(bad)} outside "
                        f"its class set"
                    )

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def all_classes(self) -> list[int]:
        out: list[int] = []
        for task in self.tasks:
            out.extend(task.class_ids)
        return out


def _class_prototype(class_id: int, spec: SyntheticSpec) -> np.ndarray:
    """Deterministic (C, H, W) prototype in [-1, 1] for one class.

    Orientations follow golden-ratio spacing (every class distinct) while
    frequency, quadrant, and color cycle through short vocabularies, so
    classes from different tasks collide on some attributes: individually
    easy, mutually confusable.
    """
    h = spec.image_size
    theta = np.pi * ((class_id * _GOLDEN) % 1.0)
    freq = 2.0 + class_id % 4
    phase = 2.0 * np.pi * ((class_id * 0.37) % 1.0)
    quadrant = class_id % 4
    color = _PALETTE[class_id % len(_PALETTE)][: spec.channels]

    ys, xs = np.meshgrid(np.arange(h), np.arange(h), indexing="ij")
    u, v = xs / h, ys / h
    grating = np.sin(2.0 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)) + phase)
    qy, qx = (quadrant // 2, quadrant % 2)
    cy, cx = (0.25 + 0.5 * qy) * h, (0.25 + 0.5 * qx) * h
    blob = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * (h / 6.0) ** 2))

    img = 0.6 * grating[None, :, :] + 0.8 * color[:, None, None] * blob[None, :, :]
    return np.clip(img, -1.0, 1.0)


def _sample_class(class_id: int, count: int, split: str, spec: SyntheticSpec) -> np.ndarray:
    base = _class_prototype(class_id, spec)
    noise = rng_for(spec.seed, "data", split, class_id).normal(
        size=(count,) + base.shape
    )
    imgs = np.clip(base[None] + spec.noise * noise, -1.0, 1.0)
    # round through f32 so the f32 on-disk payload round-trips bit-exactly
    return imgs.astype(np.float32).astype(np.float64)


def generate_stream(spec: SyntheticSpec) -> TaskStream:
    """Deterministic stream of ``spec.tasks`` tasks with disjoint labels."""
    tasks = []
    for t in range(spec.tasks):
        ids = [
            spec.class_offset + t * spec.classes_per_task + j
            for j in range(spec.classes_per_task)
        ]
        train_imgs, train_lbls, test_imgs, test_lbls = [], [], [], []
        for c in ids:
            train_imgs.append(_sample_class(c, spec.train_per_class, "train", spec))
            train_lbls.append(np.full(spec.train_per_class, c, dtype=np.int64))
            test_imgs.append(_sample_class(c, spec.test_per_class, "test", spec))
            test_lbls.append(np.full(spec.test_per_class, c, dtype=np.int64))
        tasks.append(
            Task(
                task_id=t,
                class_ids=ids,
                train_images=np.concatenate(train_imgs),
                train_labels=np.concatenate(train_lbls),
                test_images=np.concatenate(test_imgs),
                test_labels=np.concatenate(test_lbls),
            )
        )
    shape = (spec.channels, spec.image_size, spec.image_size)
    return TaskStream(tasks=tasks, image_shape=shape)


def batches(task: Task, batch_size: int, seed: int, epoch: int):
    """Epoch-seeded shuffle; yields (images, labels); keeps the last partial batch."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    n = len(task.train_labels)
    order = rng_for(seed, "batch", task.task_id, epoch).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield task.train_images[idx], task.train_labels[idx]


# ---------------------------------------------------------------------------
# raw-tensor dataset file
#
# magic "HLGPDATA" | version u32 LE | header_len u32 LE | JSON header |
# contiguous little-endian f32 payload: per task, train images then test
# images, each sample (C*H*W) row-major, in header order.


def save_stream(stream: TaskStream, path) -> None:
    header = {
        "dtype": "f32",
        "shape": list(stream.image_shape),
        "tasks": [
            {
                "task_id": t.task_id,
                "class_ids": list(t.class_ids),
                "train_labels": t.train_labels.tolist(),
                "test_labels": t.test_labels.tolist(),
            }
            for t in stream.tasks
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(DATA_MAGIC)
    buf.write(struct.pack("<I", DATA_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for t in stream.tasks:
        buf.write(t.train_images.astype("<f4").tobytes())
        buf.write(t.test_images.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_external(path) -> TaskStream:
    """Parse a dataset file, validating format and stream invariants."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if len(raw) < len(DATA_MAGIC) + 8:
        raise TruncationError("file shorter than the fixed header")
    if raw[: len(DATA_MAGIC)] != DATA_MAGIC:
        raise MagicError(f"bad magic {raw[:len(DATA_MAGIC)]!r}")
    off = len(DATA_MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != DATA_VERSION:
        raise VersionError(f"unsupported dataset version {version}")
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if off + hlen > len(raw):
        raise TruncationError("header extends past end of file")
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unparseable header: {exc}") from exc
    off += hlen

    if header.get("dtype") != "f32":
        raise FormatError(f"unsupported payload dtype {header.get('dtype')!r}")
    shape = tuple(header["shape"])
    if len(shape) != 3 or any(d <= 0 for d in shape):
        raise FormatError(f"bad image shape {shape}")
    per_sample = int(np.prod(shape))

    counts = []
    for t in header["tasks"]:
        counts.append((len(t["train_labels"]), len(t["test_labels"])))
    total = sum(a + b for a, b in counts) * per_sample * 4
    if len(raw) - off < total:
        raise TruncationError(
            f"payload has {len(raw) - off} bytes, header declares {total}"
        )
    if len(raw) - off > total:
        raise FormatError(f"{len(raw) - off - total} trailing bytes after payload")

    tasks = []
    for t, (ntr, nte) in zip(header["tasks"], counts):
        tr = np.frombuffer(raw, dtype="<f4", count=ntr * per_sample, offset=off)
        off += ntr * per_sample * 4
        te = np.frombuffer(raw, dtype="<f4", count=nte * per_sample, offset=off)
        off += nte * per_sample * 4
        tasks.append(
            Task(
                task_id=int(t["task_id"]),
                class_ids=[int(c) for c in t["class_ids"]],
                train_images=tr.astype(np.float64).reshape((ntr,) + shape),
                train_labels=np.asarray(t["train_labels"], dtype=np.int64),
                test_images=te.astype(np.float64).reshape((nte,) + shape),
                test_labels=np.asarray(t["test_labels"], dtype=np.int64),
            )
        )
    return TaskStream(tasks=tasks, image_shape=shape)
