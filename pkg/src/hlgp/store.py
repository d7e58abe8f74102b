"""Bit-exact checkpoint serialization.

Layout: magic "HLGPCKPT" | version u32 LE | manifest_len u32 LE | JSON
manifest | raw little-endian tensor payload | crc32 of payload (u32 LE).

The manifest carries free-form metadata plus one record per tensor (name,
shape, dtype f32/f64, byte offset into the payload, trainable flag, owner
tag). Tensors are laid out in sorted-name order with contiguous offsets,
and the manifest is serialized with sorted keys, so identical state
produces identical bytes.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .backbone import FrozenBackbone, ViTConfig
from .errors import (
    ChecksumError,
    DataError,
    FormatError,
    MagicError,
    TruncationError,
    VersionError,
)
from .fusion import PromptBank
from .metrics import AccuracyMatrix
from .prompts import (
    GroupAdapter,
    HlgpGenerator,
    IndependentGenerator,
    PIETable,
    RootPrompt,
    partition_layers,
)
from .tensor import Tensor
from .trainer import Classifier, ContinualState

CKPT_MAGIC = b"HLGPCKPT"
CKPT_VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass
class TensorRecord:
    data: np.ndarray
    trainable: bool
    owner: str  # "backbone" | "task{t}" | "classifier" | "optim"


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise FormatError(f"unsupported tensor dtype {arr.dtype}")


def save_records(path, records: dict[str, TensorRecord], meta: dict) -> None:
    entries = []
    payload = io.BytesIO()
    offset = 0
    for name in sorted(records):
        rec = records[name]
        raw = np.ascontiguousarray(rec.data).astype(
            _DTYPES[_dtype_tag(rec.data)], copy=False).tobytes()
        entries.append({
            "name": name,
            "shape": list(rec.data.shape),
            "dtype": _dtype_tag(rec.data),
            "offset": offset,
            "trainable": bool(rec.trainable),
            "owner": rec.owner,
        })
        payload.write(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta, "tensors": entries},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = payload.getvalue()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_records(path) -> tuple[dict[str, TensorRecord], dict]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(CKPT_MAGIC) + 8:
        raise TruncationError("file shorter than the fixed header")
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise MagicError(f"bad magic {raw[:len(CKPT_MAGIC)]!r}")
    pos = len(CKPT_MAGIC)
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if pos + mlen + 4 > len(raw):
        raise TruncationError("manifest extends past end of file")
    try:
        manifest = json.loads(raw[pos : pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unparseable manifest: {exc}") from exc
    pos += mlen
    body = raw[pos:-4]
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(body) != crc:
        raise ChecksumError("payload crc32 mismatch")

    entries = manifest["tensors"]
    expected = 0
    for e in sorted(entries, key=lambda e: e["offset"]):
        if e["dtype"] not in _DTYPES:
            raise FormatError(f"unknown dtype {e['dtype']!r} for {e['name']}")
        size = int(np.prod(e["shape"], dtype=np.int64)) * _DTYPES[e["dtype"]].itemsize
        if e["offset"] != expected:
            raise FormatError(
                f"tensor {e['name']} at offset {e['offset']}, expected {expected} "
                f"(offsets must tile the payload)"
            )
        expected += size
    if expected != len(body):
        raise TruncationError(
            f"payload is {len(body)} bytes, manifest declares {expected}"
        )

    records = {}
    for e in entries:
        dt = _DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype=dt, count=count,
                            offset=e["offset"]).reshape(e["shape"]).copy()
        records[e["name"]] = TensorRecord(arr, bool(e["trainable"]), e["owner"])
    return records, manifest["meta"]


# ---------------------------------------------------------------------------
# backbone checkpoints


def save_backbone(path, backbone: FrozenBackbone, meta: dict | None = None) -> None:
    records = {
        f"backbone.{name}": TensorRecord(t.data, t.trainable, "backbone")
        for name, t in backbone.named_tensors().items()
    }
    full_meta = {
        "kind": "backbone",
        "backbone_cfg": vars(backbone.cfg) | {},
        "backbone_hash": backbone.content_hash(),
    }
    full_meta.update(meta or {})
    save_records(path, records, full_meta)


def _rebuild_backbone(records: dict[str, TensorRecord], meta: dict) -> FrozenBackbone:
    cfg = ViTConfig(**meta["backbone_cfg"])
    tensors = {}
    for name, rec in records.items():
        if not name.startswith("backbone."):
            continue
        short = name[len("backbone."):]
        tensors[short] = Tensor(rec.data, trainable=rec.trainable, name=short)
    return FrozenBackbone(cfg, tensors)


def load_backbone(path) -> tuple[FrozenBackbone, dict]:
    records, meta = load_records(path)
    if meta.get("kind") not in ("backbone", "state"):
        raise FormatError(f"checkpoint kind {meta.get('kind')!r} has no backbone")
    return _rebuild_backbone(records, meta), meta


# ---------------------------------------------------------------------------
# full continual state


def _generator_records(t: int, gen) -> dict[str, TensorRecord]:
    return {
        f"task{t}.{name}": TensorRecord(tensor.data, tensor.trainable, f"task{t}")
        for name, tensor in gen.named_tensors().items()
    }


def _generator_meta(gen) -> dict:
    if isinstance(gen, IndependentGenerator):
        return {
            "prompt_mode": "independent_layerwise",
            "num_layers": len(gen.pairs),
            "prompt_len": gen.pairs[0].key_prompt.shape[0],
        }
    return {
        "prompt_mode": "hlgp",
        "pie_mode": gen.pie.mode,
        "num_layers": gen.part.num_layers,
        "shared_layers": gen.part.shared_layers,
        "prompt_len": gen.root.key.shape[0],
    }


def _rebuild_generator(t: int, gmeta: dict, records: dict[str, TensorRecord]):
    prefix = f"task{t}."
    local = {
        name[len(prefix):]: Tensor(rec.data, rec.trainable, name[len(prefix):])
        for name, rec in records.items()
        if name.startswith(prefix)
    }
    if gmeta["prompt_mode"] == "independent_layerwise":
        from .backbone import LayerPrompt

        pairs = [
            LayerPrompt(local[f"layer.{i}.key"], local[f"layer.{i}.value"])
            for i in range(gmeta["num_layers"])
        ]
        return IndependentGenerator(t, pairs)
    part = partition_layers(gmeta["num_layers"], gmeta["shared_layers"])
    root = RootPrompt(t, local["root.key"], local["root.value"])

    def adapter(g: int, pathway: str) -> GroupAdapter:
        p = f"adapter.{g}.{pathway}."
        return GroupAdapter(g, pathway, local[p + "down"], local[p + "down_bias"],
                            local[p + "up"], local[p + "up_bias"])

    key_adapters = [adapter(g, "key") for g in range(part.num_groups)]
    value_adapters = [adapter(g, "value") for g in range(part.num_groups)]
    mode = gmeta["pie_mode"]
    if mode == "none":
        pie = PIETable(t, mode, [], [])
    elif mode == "non_shared":
        keys = [local[f"pie.key.{i}"] for i in range(part.num_layers)]
        values = [local[f"pie.value.{i}"] for i in range(part.num_layers)]
        pie = PIETable(t, mode, keys, values)
    else:
        tables = [local[f"pie.{i}"] for i in range(part.num_layers)]
        pie = PIETable(t, mode, tables, tables)
    return HlgpGenerator(t, part, root, key_adapters, value_adapters, pie)


def save_state(path, state: ContinualState, meta: dict | None = None) -> None:
    """Checkpoint a continual run at a task boundary."""
    records = {
        f"backbone.{name}": TensorRecord(t.data, t.trainable, "backbone")
        for name, t in state.backbone.named_tensors().items()
    }
    task_meta = []
    for t, gen in enumerate(state.bank.generators):
        records.update(_generator_records(t, gen))
        gm = _generator_meta(gen)
        gm["class_ids"] = list(state.bank.task_classes[t])
        task_meta.append(gm)
    for name, tensor in state.classifier.named_tensors().items():
        records[name] = TensorRecord(tensor.data, tensor.trainable, "classifier")
    optim_meta = None
    if state.adam is not None:
        for pname in state.adam.params:
            records[f"optim.m.{pname}"] = TensorRecord(
                state.adam.m[pname], False, "optim")
            records[f"optim.v.{pname}"] = TensorRecord(
                state.adam.v[pname], False, "optim")
        optim_meta = {
            "step_count": state.adam.step_count,
            "lr": state.adam.lr,
            "beta1": state.adam.beta1,
            "beta2": state.adam.beta2,
            "eps": state.adam.eps,
            "params": sorted(state.adam.params),
        }
    full_meta = {
        "kind": "state",
        "backbone_cfg": vars(state.backbone.cfg) | {},
        "backbone_hash": state.backbone.content_hash(),
        "completed_tasks": state.completed_tasks,
        "tasks": task_meta,
        "matrix": state.matrix.to_lists(),
        "optim": optim_meta,
    }
    full_meta.update(meta or {})
    save_records(path, records, full_meta)


def load_state(path) -> tuple[ContinualState, dict]:
    records, meta = load_records(path)
    if meta.get("kind") != "state":
        raise FormatError(f"checkpoint kind {meta.get('kind')!r} is not a state")
    backbone = _rebuild_backbone(records, meta)
    bank = PromptBank()
    classifier = Classifier(backbone.cfg.embed_dim)
    for t, gmeta in enumerate(meta["tasks"]):
        bank.add_task(_rebuild_generator(t, gmeta, records), gmeta["class_ids"])
        w = records[f"classifier.task{t}.weight"]
        b = records[f"classifier.task{t}.bias"]
        classifier.parts.append((
            Tensor(w.data, w.trainable, f"classifier.task{t}.weight"),
            Tensor(b.data, b.trainable, f"classifier.task{t}.bias"),
        ))
    state = ContinualState(
        backbone=backbone,
        bank=bank,
        classifier=classifier,
        matrix=AccuracyMatrix(meta["matrix"]),
        completed_tasks=int(meta["completed_tasks"]),
    )
    if meta.get("optim"):
        state.adam = _rebuild_adam(meta["optim"], records, state)
    return state, meta


def _rebuild_adam(ometa: dict, records: dict[str, TensorRecord],
                  state: ContinualState):
    """Reattach the saved optimizer moments to the tensors they describe.

    Optimizer param names are task-local (the last-trained task's) plus
    classifier rows; a resumed run starts the next task with a fresh
    optimizer, so this exists for checkpoint fidelity.
    """
    from .trainer import Adam

    current = state.bank.generators[state.completed_tasks - 1]
    pool = dict(current.named_tensors())
    pool.update(state.classifier.named_tensors())
    params = {name: pool[name] for name in ometa["params"]}
    adam = Adam(params, ometa["lr"], ometa["beta1"], ometa["beta2"],
                ometa["eps"])
    adam.step_count = int(ometa["step_count"])
    for name in ometa["params"]:
        adam.m[name] = records[f"optim.m.{name}"].data.copy()
        adam.v[name] = records[f"optim.v.{name}"].data.copy()
    return adam
