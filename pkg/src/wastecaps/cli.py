"""Command line surface: prepare data, pretrain, train, evaluate, sweep, report.

Commands compose through files under ``--out``. Every command takes explicit
seeds, never wall-clock defaults, so reruns with the same inputs write
byte-identical artifacts; each run also records a JSON manifest listing the
SHA-256 of everything it emitted.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import fields

import numpy as np

from . import data as D
from . import synthetic as S
from .checkpoint import load_checkpoint, save_checkpoint
from .experiments import (
    ConfigError,
    ExperimentConfig,
    build_model,
    evaluate,
    parse_config,
    pretrain_extractor,
    read_config,
    read_training_log,
    render_ranking,
    sweep,
    train,
    write_config,
    write_training_log,
)
from .layers import build_extractor
from .metrics import render_confusion, render_per_class, render_table

ENV_PREFIX = "WASTECAPS_"

# Per-class extra copies applied to the training split, when the class exists.
DEFAULT_AUGMENT_PLAN = {"gloves": 1, "mask": 2}


def _env_overrides(environ=None) -> dict[str, str]:
    """Collect WASTECAPS_<FIELD> environment overrides for config keys."""
    env = os.environ if environ is None else environ
    known = {f.name for f in fields(ExperimentConfig)}
    overrides: dict[str, str] = {}
    bad = []
    for key in sorted(env):
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name in known:
            overrides[name] = env[key]
        else:
            bad.append(key)
    if bad:
        raise ConfigError([f"environment override {k} matches no config key" for k in bad])
    return overrides


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def _write_run_manifest(out_dir: str, command: str, seed, inputs: dict,
                        artifacts: list[str], started: float) -> str:
    record = {
        "command": command,
        "seed": seed,
        "inputs": inputs,
        "artifacts": {
            os.path.relpath(p, out_dir): _sha256(p) for p in sorted(artifacts)
        },
        "started": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(time.time())),
    }
    path = os.path.join(out_dir, f"run_{command}.json")
    with open(path, "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _write_text(path: str, text: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write(text)
    return path


def _load_encoded(manifest: D.DatasetManifest, root: str, split: str, target: int):
    """One split as (X, Y) arrays, images letterboxed to ``target``."""
    samples = D.load_split_samples(manifest, root, split)
    if not samples:
        raise ValueError(f"split {split!r} is empty in {root}")
    for s in samples:
        s.image = D.pad_resize(s.image, target)
    x, y = D.normalize_encode(samples, len(manifest.classes))
    return x.data, y.data


# -- commands -----------------------------------------------------------------

def cmd_prepare(data_root: str, out_dir: str, seed: int,
                augment_target: int = 224) -> list[str]:
    """Ingest a class-directory tree, split it, and apply the augment plan."""
    started = time.time()
    if not os.path.isdir(data_root):
        raise ValueError(f"data root {data_root!r} is not a directory")
    manifest = D.ingest_directory(data_root)
    counts = {c: 0 for c in manifest.classes}
    for e in manifest.entries:
        counts[e.class_name] += 1
    empty = sorted(c for c, n in counts.items() if n == 0)
    if empty:
        raise ValueError(f"class directories with no images: {empty}")
    for e in manifest.entries:
        e.path = os.path.abspath(os.path.join(data_root, e.path))
    manifest = D.stratified_split(manifest, seed=seed)

    # Validation pass: every image must load as HxWx3 before we commit splits.
    by_source = {}
    for e in manifest.entries:
        img = D.load_image(e.path)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"{e.path}: expected an RGB image, got shape {img.shape}")
        by_source[e.source_id] = e

    plan = D.AugmentationPlan(
        {c: n for c, n in DEFAULT_AUGMENT_PLAN.items() if c in manifest.classes},
        rng_seed=seed,
    )
    train_samples = D.load_split_samples(manifest, "", "train")
    augmented = D.augment_samples(train_samples, plan, manifest.classes,
                                  target=augment_target)
    for s in augmented:
        if not s.augmented_from:
            continue
        src = by_source[s.augmented_from]
        stem = os.path.splitext(os.path.basename(src.path))[0]
        k = s.source_id.rsplit("#aug", 1)[1]
        rel = os.path.join("augmented", src.class_name, f"{stem}_aug{k}.png")
        D.save_image(s.image, os.path.join(out_dir, rel))
        manifest.entries.append(
            D.ManifestEntry(rel, src.class_name, "train", s.source_id, s.augmented_from)
        )

    artifacts = []
    os.makedirs(out_dir, exist_ok=True)
    full = os.path.join(out_dir, "manifest.csv")
    D.write_manifest(manifest, full)
    artifacts.append(full)
    for split in D.SPLITS:
        part = D.DatasetManifest(classes=list(manifest.classes),
                                 entries=list(manifest.in_split(split)))
        path = os.path.join(out_dir, f"{split}.csv")
        D.write_manifest(part, path)
        artifacts.append(path)
    artifacts.append(_write_text(os.path.join(out_dir, "distribution.csv"),
                                 D.class_distribution_report(manifest)))
    artifacts += [os.path.join(out_dir, e.path) for e in manifest.entries
                  if e.augmented_from]
    _write_run_manifest(out_dir, "prepare", seed,
                        {"data_root": os.path.abspath(data_root)}, artifacts, started)
    print(f"prepared {len(manifest.entries)} entries "
          f"({len(manifest.classes)} classes) under {out_dir}")
    return artifacts


def cmd_pretrain(out_dir: str, seed: int, epochs: int = 5, per_class: int = 60,
                 size: int = 64, learning_rate: float = 0.001,
                 batch_size: int = 100) -> list[str]:
    """Pretrain the feature extractor on generated pose-varied shapes."""
    started = time.time()
    x, y = S.make_pose_dataset(per_class, size=size, seed=seed)
    extractor = build_extractor(rng=np.random.default_rng(seed))
    state, history = pretrain_extractor(extractor, (x, y), epochs,
                                        learning_rate=learning_rate,
                                        batch_size=batch_size, seed=seed)
    os.makedirs(out_dir, exist_ok=True)
    ckpt = os.path.join(out_dir, "extractor.bin")
    save_checkpoint(ckpt, state, {
        "kind": "extractor", "seed": seed, "epochs": epochs,
        "per_class": per_class, "size": size,
    })
    rows = ["epoch,loss,accuracy"]
    rows += [f"{e},{l:.6f},{a:.6f}" for e, l, a in history]
    hist = _write_text(os.path.join(out_dir, "pretrain_history.csv"),
                       "\n".join(rows) + "\n")
    _write_run_manifest(out_dir, "pretrain", seed,
                        {"per_class": per_class, "size": size, "epochs": epochs},
                        [ckpt, hist], started)
    print(f"pretrained extractor: final loss {history[-1][1]:.4f}, "
          f"accuracy {history[-1][2]:.3f}")
    return [ckpt, hist]


def _load_prepared(data_dir: str, input_size: int):
    manifest = D.read_manifest(os.path.join(data_dir, "manifest.csv"))
    xt, yt = _load_encoded(manifest, data_dir, "train", input_size)
    xv, yv = _load_encoded(manifest, data_dir, "val", input_size)
    return manifest, (xt, yt), (xv, yv)


def _load_extractor_state(path: str | None):
    if path is None:
        return None
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "extractor":
        raise ValueError(f"{path} is not an extractor checkpoint")
    return state


def cmd_train(config_path: str, data_dir: str, out_dir: str,
              seed: int | None = None, extractor_path: str | None = None,
              environ=None) -> list[str]:
    """Train one experiment from a prepared data directory."""
    started = time.time()
    overrides = _env_overrides(environ)
    if seed is not None:
        overrides["seed"] = str(seed)
    config = read_config(config_path, overrides)
    manifest, train_xy, val_xy = _load_prepared(data_dir, config.input_size)
    if config.num_classes != len(manifest.classes):
        raise ConfigError([
            f"config num_classes {config.num_classes} does not match "
            f"{len(manifest.classes)} prepared classes"
        ])
    result = train(config, train_xy, val_xy,
                   extractor_state=_load_extractor_state(extractor_path))

    os.makedirs(out_dir, exist_ok=True)
    cfg_echo = os.path.join(out_dir, "config.cfg")
    write_config(config, cfg_echo)
    log_path = os.path.join(out_dir, "log.csv")
    write_training_log(result.log, log_path)
    ckpt = os.path.join(out_dir, "checkpoint.bin")
    save_checkpoint(ckpt, result.model.state_dict(), {
        "kind": "model",
        "config": {f.name: str(getattr(config, f.name)) for f in fields(config)},
        "classes": manifest.classes,
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
    })
    artifacts = [cfg_echo, log_path, ckpt]
    _write_run_manifest(out_dir, "train", config.seed,
                        {"config": os.path.abspath(config_path),
                         "data": os.path.abspath(data_dir)}, artifacts, started)
    print(f"trained {config.experiment}: best epoch {result.best_epoch}, "
          f"val loss {result.best_val_loss:.6f} ({len(result.log.records)} epochs)")
    return artifacts


def cmd_eval(checkpoint_path: str, data_dir: str, split: str,
             out_dir: str) -> list[str]:
    """Evaluate a trained checkpoint on one prepared split."""
    started = time.time()
    if split not in D.SPLITS:
        raise ValueError(f"split must be one of {D.SPLITS}, got {split!r}")
    arrays, meta = load_checkpoint(checkpoint_path)
    if meta.get("kind") != "model":
        raise ValueError(f"{checkpoint_path} is not a model checkpoint")
    config = parse_config(meta["config"])
    model = build_model(config)
    try:
        model.load_state_dict(arrays)
    except (KeyError, ValueError) as e:
        raise ValueError(f"checkpoint does not match the configured architecture: {e}")
    manifest = D.read_manifest(os.path.join(data_dir, "manifest.csv"))
    x, y = _load_encoded(manifest, data_dir, split, config.input_size)
    loss, report = evaluate(model, x, y, config.batch_size,
                            class_names=meta["classes"])

    os.makedirs(out_dir, exist_ok=True)
    table = render_table([(config.experiment, report)])
    body = table + "\n" + render_per_class(report)
    report_path = _write_text(os.path.join(out_dir, f"eval_{split}_report.txt"), body)
    cm_path = _write_text(os.path.join(out_dir, f"eval_{split}_confusion.csv"),
                          render_confusion(report.confusion))
    artifacts = [report_path, cm_path]
    _write_run_manifest(out_dir, f"eval_{split}", config.seed,
                        {"checkpoint": os.path.abspath(checkpoint_path),
                         "data": os.path.abspath(data_dir), "split": split},
                        artifacts, started)
    print(table, end="")
    print(f"{split} loss {loss:.6f}, accuracy {report.accuracy:.4f}")
    return artifacts


def cmd_sweep(config_path: str, data_dir: str, out_dir: str, budget: int,
              seed: int, extractor_path: str | None = None,
              environ=None) -> list[str]:
    """Random-search the hyperparameter grid and persist the ranking."""
    started = time.time()
    base = read_config(config_path, _env_overrides(environ))
    manifest, train_xy, val_xy = _load_prepared(data_dir, base.input_size)
    extractor_state = _load_extractor_state(extractor_path)
    entries = sweep(base, train_xy, val_xy, budget=budget, seed=seed,
                    extractor_state=extractor_state)

    os.makedirs(out_dir, exist_ok=True)
    artifacts = [_write_text(os.path.join(out_dir, "ranking.csv"),
                             render_ranking(entries))]
    for rank, entry in enumerate(entries, 1):
        path = os.path.join(out_dir, f"sweep_log_rank{rank:02d}.csv")
        write_training_log(entry.log, path)
        artifacts.append(path)
    winner = entries[0].config
    win_cfg = os.path.join(out_dir, "best.cfg")
    write_config(winner, win_cfg)
    result = train(winner, train_xy, val_xy, extractor_state=extractor_state)
    win_ckpt = os.path.join(out_dir, "best.bin")
    save_checkpoint(win_ckpt, result.model.state_dict(), {
        "kind": "model",
        "config": {f.name: str(getattr(winner, f.name)) for f in fields(winner)},
        "classes": manifest.classes,
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
    })
    artifacts += [win_cfg, win_ckpt]
    _write_run_manifest(out_dir, "sweep", seed,
                        {"config": os.path.abspath(config_path),
                         "data": os.path.abspath(data_dir), "budget": budget},
                        artifacts, started)
    print(f"swept {len(entries)} configs; best val macro F1 "
          f"{entries[0].val_macro_f1:.4f}")
    return artifacts


def cmd_report(run_dir: str) -> None:
    """Print the config, training summary, and eval tables from a run directory."""
    found = False
    cfg = os.path.join(run_dir, "config.cfg")
    if os.path.exists(cfg):
        found = True
        print(open(cfg).read(), end="")
    log = os.path.join(run_dir, "log.csv")
    if os.path.exists(log):
        found = True
        parsed = read_training_log(log)
        best = parsed.records[parsed.best_epoch - 1]
        print(f"epochs: {len(parsed.records)}, best epoch {best.epoch}: "
              f"val loss {best.val_loss:.6f}, val accuracy {best.val_acc:.4f}")
    for name in sorted(os.listdir(run_dir)) if os.path.isdir(run_dir) else []:
        if name.startswith("eval_") and name.endswith("_report.txt"):
            found = True
            print(open(os.path.join(run_dir, name)).read(), end="")
    if not found:
        raise ValueError(f"no run artifacts under {run_dir}")


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wastecaps",
        description="Train and evaluate waste-image classifiers from the command line.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest, split, and augment an image tree")
    p.add_argument("--data-root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--augment-target", type=int, default=224,
                   help="square size for augmented copies")

    p = sub.add_parser("pretrain", help="pretrain the extractor on synthetic shapes")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--per-class", type=int, default=60)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=100)

    p = sub.add_parser("train", help="train one experiment from prepared data")
    p.add_argument("--config", required=True)
    p.add_argument("--data-root", required=True, help="output of `prepare`")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="overrides the config seed")
    p.add_argument("--extractor", default=None,
                   help="pretrained extractor checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", required=True, help="output of `prepare`")
    p.add_argument("--split", required=True, choices=D.SPLITS)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="random-search the hyperparameter grid")
    p.add_argument("--config", required=True, help="base config file")
    p.add_argument("--data-root", required=True, help="output of `prepare`")
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=int, default=20)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--extractor", default=None)

    p = sub.add_parser("report", help="print artifacts from a run directory")
    p.add_argument("--out", required=True, help="run directory to summarize")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "prepare":
            cmd_prepare(args.data_root, args.out, args.seed, args.augment_target)
        elif args.command == "pretrain":
            cmd_pretrain(args.out, args.seed, args.epochs, args.per_class,
                         args.size, args.learning_rate, args.batch_size)
        elif args.command == "train":
            cmd_train(args.config, args.data_root, args.out, args.seed,
                      args.extractor)
        elif args.command == "eval":
            cmd_eval(args.checkpoint, args.data_root, args.split, args.out)
        elif args.command == "sweep":
            cmd_sweep(args.config, args.data_root, args.out, args.budget,
                      args.seed, args.extractor)
        elif args.command == "report":
            cmd_report(args.out)
    except ConfigError as e:
        for msg in e.errors:
            print(f"error: {msg}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
