"""Command-line front end.

Verbs: prepare, train, crossval, ablation, evaluate, ensemble, gradcam.
Every run writes its artifacts under ``<output_dir>/runs/<verb>-<stamp>-<hash>/``
together with the exact config snapshot and a run manifest with seeds and
artifact hashes. Exit codes: 0 ok, 2 config error, 3 data error, 4 runtime.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import torch

from . import __version__
from .catalog import (
    class_distribution,
    eval_ids,
    load_catalog,
    load_manifest,
    make_split,
    save_manifest,
)
from .config import ExperimentConfig, dump_config, load_config, resolve_weights
from .ensembling import EnsembleSpec, evaluate_ensemble
from .errors import ConfigError, DataError, PipelineError
from .gradcam import gradcam, overlay
from .images import ImageStore
from .labels import ALL_LABELS
from .metrics import evaluate_predictions, render_report
from .models import build_model, load_checkpoint
from .seeding import derive_seed
from .training import predict_dataset, run_ablation, train, train_kfold

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def _run_dir(config: ExperimentConfig, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = config.output_dir / "runs"
    candidate = base / f"{command}-{stamp}-{config.config_hash()}"
    n = 1
    while candidate.exists():
        candidate = base / f"{command}-{stamp}-{config.config_hash()}-{n}"
        n += 1
    candidate.mkdir(parents=True)
    return candidate


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _finish_run(run_dir: Path, config: ExperimentConfig, command: str) -> None:
    dump_config(config, run_dir / "config_snapshot.yaml")
    artifacts = {
        str(p.relative_to(run_dir)): _sha256(p)
        for p in sorted(run_dir.rglob("*"))
        if p.is_file() and p.name != "run.json"
    }
    payload = {
        "command": command,
        "version": __version__,
        "config_hash": config.config_hash(),
        "seeds": {"split": config.split.seed, "train": config.train.seed, "tta": config.ensemble.tta_seed},
        "artifacts": artifacts,
    }
    (run_dir / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_records(config: ExperimentConfig):
    return load_catalog(config.dataset.metadata_path, config.dataset.images_root)


def _manifest_path(config: ExperimentConfig, args) -> Path:
    if args.manifest:
        return Path(args.manifest)
    return config.output_dir / "manifest.json"


def _require_manifest(config: ExperimentConfig, args):
    path = _manifest_path(config, args)
    if not path.is_file():
        raise DataError(f"no split manifest at {path}; run 'prepare' first or pass --manifest")
    return load_manifest(path)


def cmd_prepare(config: ExperimentConfig, args) -> int:
    records = _load_records(config)
    manifest = make_split(
        records,
        seed=config.split.seed,
        test_fraction=config.split.test_fraction,
        val_fraction=config.split.val_fraction,
        k=config.split.k,
    )
    run_dir = _run_dir(config, "prepare")
    save_manifest(manifest, run_dir / "manifest.json")
    save_manifest(manifest, _manifest_path(config, args))

    image_dist = class_distribution(records, "image")
    lesion_dist = class_distribution(records, "lesion")
    weights = resolve_weights(config, records)
    summary = {
        "images": image_dist.total,
        "lesions": lesion_dist.total,
        "image_counts": {c.code: image_dist.counts[c] for c in ALL_LABELS},
        "lesion_counts": {c.code: lesion_dist.counts[c] for c in ALL_LABELS},
        "class_weights": None if weights is None else {c.code: weights.weights[c] for c in ALL_LABELS},
        "subset_sizes": {
            "train": len(manifest.train_ids),
            "val": len(manifest.val_ids),
            "test": len(manifest.test_ids),
        },
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _finish_run(run_dir, config, "prepare")
    print(f"manifest: {_manifest_path(config, args)}")
    print(f"run: {run_dir}")
    return EXIT_OK


def cmd_train(config: ExperimentConfig, args) -> int:
    records = _load_records(config)
    manifest = _require_manifest(config, args)
    weights = resolve_weights(config, records)
    train_config = config.train_config(weights)
    run_dir = _run_dir(config, "train")

    torch.manual_seed(derive_seed(train_config.seed, "init"))
    model = build_model(config.model)
    ckpt, history = train(model, manifest, train_config, records, run_dir, config.augmentation)
    print(f"checkpoint: {ckpt}")
    print(f"best epoch {history.best_epoch}, best val accuracy {history.best_val_accuracy:.4f}")
    _finish_run(run_dir, config, "train")
    print(f"run: {run_dir}")
    return EXIT_OK


def cmd_crossval(config: ExperimentConfig, args) -> int:
    records = _load_records(config)
    manifest = _require_manifest(config, args)
    weights = resolve_weights(config, records)
    train_config = config.train_config(weights)
    run_dir = _run_dir(config, "crossval")

    checkpoints, fold_reports = train_kfold(
        manifest, train_config, records, config.model, run_dir, config.augmentation
    )
    for fold, report in enumerate(fold_reports):
        render_report(report, run_dir / f"fold{fold}" / "report")

    spec = EnsembleSpec(
        checkpoint_paths=tuple(checkpoints),
        tta_n=config.ensemble.tta_n,
        tta_seed=config.ensemble.tta_seed,
    )
    (run_dir / "ensemble_spec.json").write_text(
        json.dumps({"checkpoints": [str(p.relative_to(run_dir)) for p in checkpoints],
                    "tta_n": spec.tta_n, "tta_seed": spec.tta_seed}, indent=2) + "\n"
    )
    reports = evaluate_ensemble(spec, manifest, records)
    for name, report in reports.items():
        render_report(report, run_dir / name)
        print(f"{name}: accuracy {report.accuracy:.4f}")
    _finish_run(run_dir, config, "crossval")
    print(f"run: {run_dir}")
    return EXIT_OK


def cmd_ablation(config: ExperimentConfig, args) -> int:
    records = _load_records(config)
    manifest = _require_manifest(config, args)
    weights = resolve_weights(config, records)
    if weights is None:
        raise ConfigError("ablation requires a weight scheme (the baseline uses class weights)")
    train_config = config.train_config(weights)
    run_dir = _run_dir(config, "ablation")

    report = run_ablation(train_config, manifest, records, config.model, run_dir, config.augmentation)
    for row in report.rows:
        render_report(row.report, run_dir / f"exp{row.number}_{row.name}" / "report")
        s = row.summary()
        print(f"experiment {row.number} ({row.name}): accuracy {s['accuracy']:.4f} f1 {s['f1']:.4f}")
    _finish_run(run_dir, config, "ablation")
    print(f"run: {run_dir}")
    return EXIT_OK


def _resolve_checkpoints(args, run_hint: str) -> list[Path]:
    paths = [Path(p) for p in (args.checkpoints or [])]
    if args.from_run:
        paths.extend(sorted(Path(args.from_run).glob("fold*/best.pt")))
    if not paths:
        raise ConfigError(f"{run_hint} needs --checkpoints or --from-run")
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise DataError(f"checkpoint files not found: {missing}")
    return paths


def cmd_evaluate(config: ExperimentConfig, args) -> int:
    records = _load_records(config)
    manifest = _require_manifest(config, args)
    if not args.checkpoint:
        raise ConfigError("evaluate needs --checkpoint")
    model = load_checkpoint(Path(args.checkpoint), num_classes=config.model.num_classes)
    run_dir = _run_dir(config, "evaluate")

    store = ImageStore(records)
    test_ids = eval_ids(manifest, records, "test")
    if not test_ids:
        raise DataError("manifest has an empty test split")
    probs, truths = predict_dataset(model, store, test_ids, config.train.batch_size)
    report = evaluate_predictions(probs, truths)
    render_report(report, run_dir / "report")
    print(f"test accuracy {report.accuracy:.4f}, macro f1 {report.macro_f1:.4f}")
    _finish_run(run_dir, config, "evaluate")
    print(f"run: {run_dir}")
    return EXIT_OK


def cmd_ensemble(config: ExperimentConfig, args) -> int:
    records = _load_records(config)
    manifest = _require_manifest(config, args)
    checkpoints = _resolve_checkpoints(args, "ensemble")
    spec = EnsembleSpec(
        checkpoint_paths=tuple(checkpoints),
        tta_n=config.ensemble.tta_n,
        tta_seed=config.ensemble.tta_seed,
    )
    run_dir = _run_dir(config, "ensemble")
    reports = evaluate_ensemble(spec, manifest, records)
    for name, report in reports.items():
        render_report(report, run_dir / name)
        print(f"{name}: accuracy {report.accuracy:.4f}")
    _finish_run(run_dir, config, "ensemble")
    print(f"run: {run_dir}")
    return EXIT_OK


def cmd_gradcam(config: ExperimentConfig, args) -> int:
    records = _load_records(config)
    manifest = _require_manifest(config, args)
    if not args.checkpoint:
        raise ConfigError("gradcam needs --checkpoint")
    model = load_checkpoint(Path(args.checkpoint), num_classes=config.model.num_classes)
    run_dir = _run_dir(config, "gradcam")

    store = ImageStore(records)
    if args.image_ids:
        ids = args.image_ids
    else:
        ids = eval_ids(manifest, records, "test")[: args.limit]
    for image_id in ids:
        raw = store.load(image_id)
        probs, _ = predict_dataset(model, store, [image_id], batch_size=1)
        target = ALL_LABELS[int(probs[0].argmax())]
        heat = gradcam(model, raw, target)
        paths = overlay(raw, heat, run_dir / f"{image_id}_{target.code}.png")
        logger.info("wrote %s", paths["overlay"])
    print(f"{len(ids)} overlays under {run_dir}")
    _finish_run(run_dir, config, "gradcam")
    print(f"run: {run_dir}")
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "crossval": cmd_crossval,
    "ablation": cmd_ablation,
    "evaluate": cmd_evaluate,
    "ensemble": cmd_ensemble,
    "gradcam": cmd_gradcam,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionclf",
        description="Imbalance-aware skin lesion classification pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config YAML")
        p.add_argument("--manifest", help="split manifest JSON (default: <output_dir>/manifest.json)")
        p.add_argument("--out", help="override output_dir from the config")
        p.add_argument("--seed", type=int, help="override split and train seeds")
        if name in ("evaluate", "gradcam"):
            p.add_argument("--checkpoint", help="model checkpoint to load")
        if name == "ensemble":
            p.add_argument("--checkpoints", nargs="+", help="member checkpoint files")
            p.add_argument("--from-run", help="crossval run directory with fold*/best.pt")
        if name == "gradcam":
            p.add_argument("--image-ids", nargs="+", help="specific images (default: first test images)")
            p.add_argument("--limit", type=int, default=8, help="number of test images to explain")
    return parser


def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    if args.out:
        config = dataclasses.replace(config, output_dir=Path(args.out))
    if args.seed is not None:
        config = dataclasses.replace(
            config,
            split=dataclasses.replace(config.split, seed=args.seed),
            train=dataclasses.replace(config.train, seed=args.seed),
        )
    return config


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = _apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](config, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (PipelineError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
