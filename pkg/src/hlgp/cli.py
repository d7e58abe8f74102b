"""Command-line entry point.

Subcommands: pretrain, train, eval, gradcheck, ablate, params. Every
command takes --config (JSON experiment document), optional --seed and
--out overrides, prints a JSON summary to stdout, and writes its artifacts
(checkpoints, CSV/JSON tables) under the output directory.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric/contract
failure, 5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import FrozenBackbone, ViTConfig
from .config import ExperimentConfig, load_config
from .data import SyntheticSpec, TaskStream, generate_stream, load_external
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    GradCheckError,
    HlgpError,
)
from .metrics import af, caa, faa, metrics_csv
from .prompts import make_generator, param_breakdown
from .store import load_backbone, load_state, save_backbone, save_state
from .tensor import Tensor
from .trainer import (
    Classifier,
    ContinualState,
    evaluate_seen_tasks,
    pretrain_backbone,
    run_stream,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_GRADCHECK = 5

GRADCHECK_EPSILON = 1e-3
GRADCHECK_TOLERANCE = 1e-4


def _echo(summary: dict) -> None:
    print(json.dumps(summary, indent=2, sort_keys=True))


def _out_dir(cfg: ExperimentConfig, args) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        from .config import config_from_dict

        cfg = config_from_dict({"profile": args.profile} if args.profile else {})
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg,
            seed=args.seed,
            seeds=[args.seed],
            train=dataclasses.replace(cfg.train, seed=args.seed),
            data=dataclasses.replace(cfg.data, seed=args.seed) if cfg.data else None,
        )
    return cfg


def _base_task(cfg: ExperimentConfig):
    p = cfg.pretrain
    spec = SyntheticSpec(
        tasks=1, classes_per_task=p.classes, train_per_class=p.train_per_class,
        test_per_class=p.test_per_class, image_size=cfg.backbone.image_size,
        channels=cfg.backbone.channels, noise=p.noise, seed=cfg.seed,
        class_offset=p.class_offset,
    )
    return generate_stream(spec).tasks[0]


def _stream(cfg: ExperimentConfig) -> TaskStream:
    if cfg.external_data:
        return load_external(cfg.external_data)
    if cfg.data is None:
        raise ConfigError("config has neither a data section nor external_data")
    return generate_stream(cfg.data)


def _pretrained_backbone(cfg: ExperimentConfig) -> tuple[FrozenBackbone, dict]:
    backbone = FrozenBackbone.random_init(cfg.backbone, seed=cfg.seed,
                                          trainable=True)
    p = cfg.pretrain
    summary = pretrain_backbone(backbone, _base_task(cfg),
                                learning_rate=p.learning_rate,
                                batch_size=p.batch_size, epochs=p.epochs,
                                seed=cfg.seed)
    return backbone, summary


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args)
    backbone, summary = _pretrained_backbone(cfg)
    path = out / "backbone.ckpt"
    save_backbone(path, backbone, meta={"seed": cfg.seed})
    summary["checkpoint"] = str(path)
    _echo(summary)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args)
    stream = _stream(cfg)
    ckpt_path = out / "state.ckpt"

    if args.resume:
        state, _ = load_state(args.resume)
        backbone = state.backbone
    else:
        state = None
        backbone_path = args.backbone or (out / "backbone.ckpt")
        backbone, _ = load_backbone(backbone_path)
    if not backbone.is_frozen():
        raise ConfigError(
            "backbone checkpoint still has trainable tensors; run pretrain first"
        )
    hash_before = backbone.content_hash()

    def checkpoint(st: ContinualState) -> None:
        save_state(ckpt_path, st, meta={"seed": cfg.seed})

    state = run_stream(backbone, stream, cfg.train, state=state,
                       on_task_complete=checkpoint)
    if backbone.content_hash() != hash_before:
        raise ContractError("backbone changed during continual training")

    csv_text = metrics_csv(state.matrix)
    (out / "metrics.csv").write_text(csv_text)
    (out / "matrix.json").write_text(
        json.dumps(state.matrix.to_lists(), sort_keys=True) + "\n")
    summary = {
        "faa": faa(state.matrix),
        "caa": caa(state.matrix),
        "af": af(state.matrix) if state.matrix.num_tasks > 1 else None,
        "tasks": state.completed_tasks,
        "backbone_hash": hash_before,
        "checkpoint": str(ckpt_path),
        "metrics_csv": str(out / "metrics.csv"),
    }
    _echo(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args)
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint pointing at a state file")
    state, _ = load_state(args.checkpoint)
    stream = _stream(cfg)
    if stream.num_tasks < state.completed_tasks:
        raise DataError(
            f"stream has {stream.num_tasks} tasks, checkpoint completed "
            f"{state.completed_tasks}"
        )
    row = evaluate_seen_tasks(state, stream, cfg.train)
    summary = {
        "per_task_accuracy": row,
        "mean_accuracy": float(np.mean(row)),
        "stored_faa": faa(state.matrix),
        "stored_caa": caa(state.matrix),
        "stored_af": af(state.matrix) if state.matrix.num_tasks > 1 else None,
    }
    (out / "eval.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    _echo(summary)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    """Compare analytic and finite-difference gradients for every trainable
    scalar of the tiny profile (2 layers, width 8, 2-token prompts)."""
    cfg = _load(args)
    out = _out_dir(cfg, args)
    vit = ViTConfig(image_size=16, patch_size=8, channels=3, embed_dim=8,
                    num_layers=2, num_heads=2, mlp_ratio=2.0, prompt_length=2)
    backbone = FrozenBackbone.random_init(vit, seed=cfg.seed, trainable=False)
    spec = SyntheticSpec(tasks=1, classes_per_task=2, train_per_class=3,
                         test_per_class=1, image_size=16, channels=3,
                         noise=0.2, seed=cfg.seed)
    task = generate_stream(spec).tasks[0]
    images = task.train_images
    labels = task.train_labels  # classes 0/1 map straight to columns

    gen = make_generator(cfg.train.prompt_mode, 0, 2, 8, 2, 1, 2,
                         cfg.train.pie_mode, cfg.seed)
    classifier = Classifier(8)
    classifier.add_task(2)
    # non-degenerate init: at the training zero-init the up-projections make
    # the downstream gradients provably zero, which would vacuously pass
    rng = np.random.default_rng(cfg.seed + 7)
    params = dict(gen.trainable_tensors())
    params.update(classifier.trainable_tensors())
    for p in params.values():
        p.data[:] = rng.normal(0.0, 0.3, size=p.shape)

    def loss() -> Tensor:
        sp = gen.subprompts()
        feats = backbone.forward_features(images, sp.layers)
        logits = classifier.logits(feats)
        return T.cross_entropy_from_logits(logits, labels)

    for p in params.values():
        p.zero_grad()
    with T.Tape() as tape:
        tape_loss = loss()
    tape.backward(tape_loss)

    report = {}
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        fd = T.finite_diff_grad(lambda: loss().item(), p, GRADCHECK_EPSILON)
        err = T.max_relative_error(p.grad, fd)
        report[name] = err
        worst = max(worst, err)

    passed = bool(worst < GRADCHECK_TOLERANCE)
    summary = {
        "params": report,
        "max_rel_err": worst,
        "epsilon": GRADCHECK_EPSILON,
        "tolerance": GRADCHECK_TOLERANCE,
        "scalars_checked": int(sum(p.data.size for p in params.values())),
        "pass": passed,
    }
    (out / "gradcheck.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    _echo(summary)
    if not passed:
        raise GradCheckError(f"max relative error {worst:.3e} >= {GRADCHECK_TOLERANCE}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args)
    stream = _stream(cfg)
    backbone, _ = _pretrained_backbone(cfg)
    hash_before = backbone.content_hash()

    rows = []
    for s in cfg.ablate.shared_layers:
        for pie in cfg.ablate.pie_modes:
            mode = "hlgp" if pie == "none" else "hlgp_pie"
            train_cfg = dataclasses.replace(cfg.train, shared_layers=s,
                                            pie_mode=pie, prompt_mode=mode)
            state = run_stream(backbone, stream, train_cfg)
            bd = param_breakdown(
                mode, embed_dim=cfg.backbone.embed_dim,
                prompt_len=cfg.train.prompt_len,
                num_layers=cfg.backbone.num_layers, shared_layers=s,
                rank=cfg.train.rank, pie_mode=pie,
                classes_per_task=len(stream.tasks[0].class_ids),
                tasks_so_far=stream.num_tasks)
            rows.append({
                "shared_layers": s,
                "pie_mode": pie,
                "faa": faa(state.matrix),
                "af": af(state.matrix) if stream.num_tasks > 1 else float("nan"),
                "params_per_task": bd["per_task"],
                "params_cumulative": bd["cumulative"],
            })
    if backbone.content_hash() != hash_before:
        raise ContractError("backbone changed during ablation sweep")

    lines = ["shared_layers,pie_mode,faa,af,params_per_task,params_cumulative"]
    for r in rows:
        lines.append(
            f"{r['shared_layers']},{r['pie_mode']},{r['faa']:.6f},"
            f"{r['af']:.6f},{r['params_per_task']},{r['params_cumulative']}"
        )
    (out / "ablate.csv").write_text("\n".join(lines) + "\n")
    _echo({"cells": rows, "csv": str(out / "ablate.csv")})
    return EXIT_OK


FULL_SCALE_PROFILES = {
    # dims of the full-size configuration, for accounting only
    "full_scale_L10": dict(embed_dim=768, prompt_len=10, num_layers=12,
                           rank=16, classes_per_task=10, tasks=10,
                           shared_layers=4),
    "full_scale_L20": dict(embed_dim=768, prompt_len=20, num_layers=12,
                           rank=16, classes_per_task=20, tasks=10,
                           shared_layers=4),
}


def cmd_params(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args)
    profiles = {
        "config": dict(embed_dim=cfg.backbone.embed_dim,
                       prompt_len=cfg.train.prompt_len,
                       num_layers=cfg.backbone.num_layers,
                       rank=cfg.train.rank,
                       classes_per_task=(cfg.data.classes_per_task
                                         if cfg.data else 10),
                       tasks=(cfg.data.tasks if cfg.data else 10)),
    }
    profiles.update(FULL_SCALE_PROFILES)

    summary = {}
    for pname, dims in profiles.items():
        s = dims.get("shared_layers", cfg.train.shared_layers)
        if dims["num_layers"] % s:
            s = 4 if dims["num_layers"] % 4 == 0 else dims["num_layers"]
        common = dict(embed_dim=dims["embed_dim"], prompt_len=dims["prompt_len"],
                      num_layers=dims["num_layers"], shared_layers=s,
                      rank=dims["rank"], classes_per_task=dims["classes_per_task"],
                      tasks_so_far=dims["tasks"])
        entry = {
            "dims": dict(common),
            "hlgp_pie": param_breakdown("hlgp_pie", pie_mode=cfg.train.pie_mode
                                        if cfg.train.pie_mode != "none" else "shared",
                                        **common),
            "hlgp": param_breakdown("hlgp", pie_mode="none", **common),
            "independent_layerwise": param_breakdown(
                "independent_layerwise", pie_mode="none", **common),
        }
        entry["ratio_hlgp_vs_baseline_per_task"] = (
            entry["hlgp"]["per_task"]
            / entry["independent_layerwise"]["per_task"])
        entry["ratio_hlgp_vs_baseline_cumulative"] = (
            entry["hlgp"]["cumulative"]
            / entry["independent_layerwise"]["cumulative"])
        summary[pname] = entry
    (out / "params.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    _echo(summary)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hlgp",
        description="Hierarchical layer-grouped prompt tuning harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="path to a JSON experiment config")
        p.add_argument("--profile", choices=["easy", "hard", "tiny"],
                       help="bundled profile when no --config is given")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")

    p = sub.add_parser("pretrain", help="train and freeze a backbone")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="run the continual stream")
    common(p)
    p.add_argument("--backbone", help="backbone checkpoint (default <out>/backbone.ckpt)")
    p.add_argument("--resume", help="state checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a state checkpoint")
    common(p)
    p.add_argument("--checkpoint", help="state checkpoint to evaluate")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify gradients on the tiny profile")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="sweep shared layers / offset modes")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("params", help="trainable-parameter accounting")
    common(p)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except GradCheckError as exc:
        print(f"gradcheck failed: {exc}", file=sys.stderr)
        return EXIT_GRADCHECK
    except HlgpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
