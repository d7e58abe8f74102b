"""Experiment configuration: a strict JSON document.

Top-level keys: profile, seed, seeds, out_dir, backbone, train, data,
pretrain, ablate, external_data. Unknown keys anywhere are rejected.
A ``profile`` names a bundled baseline ("easy", "hard", "tiny"); explicit
sections override its values key by key.

Documented defaults: learning_rate 3e-3, batch_size 24, rank 16,
shared_layers 4, prompt_len 10 (the hard profile raises it to 20).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .backbone import ViTConfig
from .data import SyntheticSpec
from .errors import ConfigError
from .trainer import TrainConfig

# Desk-scale backbone shared by the bundled profiles: 12 layers so the
# shared-layer sweep {1,2,4,6,12} divides evenly, narrow width for speed.
_DESK_BACKBONE = {
    "image_size": 16, "patch_size": 4, "channels": 3, "embed_dim": 32,
    "num_layers": 12, "num_heads": 4, "mlp_ratio": 2.0, "prompt_length": 10,
}

_DESK_PRETRAIN = {
    "classes": 8, "train_per_class": 25, "test_per_class": 10, "noise": 0.2,
    "class_offset": 48, "learning_rate": 1e-3, "batch_size": 24, "epochs": 20,
}

PROFILES: dict[str, dict] = {
    # 5 short tasks, CIFAR-style stand-in
    "easy": {
        "backbone": dict(_DESK_BACKBONE),
        "pretrain": dict(_DESK_PRETRAIN),
        "data": {
            "tasks": 5, "classes_per_task": 2, "train_per_class": 20,
            "test_per_class": 10, "image_size": 16, "noise": 0.15,
        },
        "train": {
            "epochs_per_task": 12, "prompt_len": 10,
            "train_fusion": "current_only",
        },
    },
    # 10 harder tasks, longer prompts, echoing the tougher benchmark setting
    "hard": {
        "backbone": dict(_DESK_BACKBONE, prompt_length=20),
        "pretrain": dict(_DESK_PRETRAIN),
        "data": {
            "tasks": 10, "classes_per_task": 4, "train_per_class": 12,
            "test_per_class": 6, "image_size": 16, "noise": 0.3,
        },
        "train": {
            "epochs_per_task": 6, "prompt_len": 20,
            "train_fusion": "current_only",
        },
    },
    # gradient-check profile: every dimension minimal
    "tiny": {
        "backbone": {
            "image_size": 16, "patch_size": 8, "channels": 3, "embed_dim": 8,
            "num_layers": 2, "num_heads": 2, "mlp_ratio": 2.0,
            "prompt_length": 2,
        },
        "pretrain": dict(_DESK_PRETRAIN, classes=2, epochs=2),
        "data": {
            "tasks": 2, "classes_per_task": 2, "train_per_class": 6,
            "test_per_class": 3, "image_size": 16, "noise": 0.1,
        },
        "train": {
            "epochs_per_task": 2, "prompt_len": 2, "rank": 2,
            "shared_layers": 1, "batch_size": 6,
        },
    },
}

_TOP_KEYS = {"profile", "seed", "seeds", "out_dir", "backbone", "train",
             "data", "pretrain", "ablate", "external_data"}
_PRETRAIN_KEYS = {"classes", "train_per_class", "test_per_class", "noise",
                  "class_offset", "learning_rate", "batch_size", "epochs"}
_ABLATE_KEYS = {"shared_layers", "pie_modes"}


@dataclass
class PretrainConfig:
    classes: int = 8
    train_per_class: int = 25
    test_per_class: int = 10
    noise: float = 0.2
    class_offset: int = 48
    learning_rate: float = 1e-3
    batch_size: int = 24
    epochs: int = 20

    def __post_init__(self):
        if self.classes < 2 or self.epochs < 1:
            raise ConfigError("pretrain needs >= 2 classes and >= 1 epoch")


@dataclass
class AblateConfig:
    shared_layers: list[int] = field(default_factory=lambda: [1, 2, 4, 6, 12])
    pie_modes: list[str] = field(default_factory=lambda: ["shared"])


@dataclass
class ExperimentConfig:
    seed: int
    seeds: list[int]
    out_dir: str
    backbone: ViTConfig
    train: TrainConfig
    data: Optional[SyntheticSpec]
    pretrain: PretrainConfig
    ablate: AblateConfig
    external_data: Optional[str] = None


def _check_keys(section: str, given: dict, allowed: set[str]) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _dataclass_section(cls, section: str, given: dict) -> Any:
    import dataclasses

    allowed = {f.name for f in dataclasses.fields(cls)}
    _check_keys(section, given, allowed)
    try:
        return cls(**given)
    except TypeError as exc:
        raise ConfigError(f"bad {section} section: {exc}") from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    _check_keys("top-level", doc, _TOP_KEYS)
    profile = doc.get("profile")
    base: dict = {}
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(
                f"unknown profile {profile!r}; bundled: {sorted(PROFILES)}"
            )
        base = PROFILES[profile]
    merged = _merge(base, {k: v for k, v in doc.items() if k != "profile"})

    seed = int(merged.get("seed", 0))
    seeds = [int(s) for s in merged.get("seeds", [seed])]
    out_dir = str(merged.get("out_dir", "runs"))

    backbone = _dataclass_section(ViTConfig, "backbone", merged.get("backbone", {}))

    train_doc = dict(merged.get("train", {}))
    train_doc.setdefault("seed", seed)
    train = _dataclass_section(TrainConfig, "train", train_doc)

    data = None
    if "data" in merged:
        data_doc = dict(merged["data"])
        data_doc.setdefault("seed", seed)
        if data_doc.get("image_size", backbone.image_size) != backbone.image_size:
            raise ConfigError(
                f"data image_size {data_doc['image_size']} does not match "
                f"backbone image_size {backbone.image_size}"
            )
        data_doc.setdefault("image_size", backbone.image_size)
        data_doc.setdefault("channels", backbone.channels)
        data = _dataclass_section(SyntheticSpec, "data", data_doc)

    pre_doc = dict(merged.get("pretrain", {}))
    _check_keys("pretrain", pre_doc, _PRETRAIN_KEYS)
    pretrain = PretrainConfig(**pre_doc)

    abl_doc = dict(merged.get("ablate", {}))
    _check_keys("ablate", abl_doc, _ABLATE_KEYS)
    ablate = AblateConfig(**abl_doc)

    external = merged.get("external_data")
    return ExperimentConfig(seed=seed, seeds=seeds, out_dir=out_dir,
                            backbone=backbone, train=train, data=data,
                            pretrain=pretrain, ablate=ablate,
                            external_data=external)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc)
