"""Command-line entry point: one binary with subcommands covering the whole
workflow (prepare / train / grid / evaluate / report / preview-aug /
predict).

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
stdout carries machine-parseable output paths; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import cv2
import numpy as np
import torch

from .augment import AUG_TABLE, AugConfig, render_preview
from .dataset import (
    ISIC2016,
    load_sample,
    load_split,
    save_split,
    scan_dataset,
    split_train_val,
)
from .errors import DecodeError, DivergenceDetected, LesionSegError, OutOfBudget
from .models import ModelLabel, build_model, default_spec, predict_mask
from .report import write_report
from .train import (
    DEFAULT_SEEDS,
    SampleStore,
    TrainConfig,
    _run_eval_epoch,
    collect_results,
    overfit_single_batch,
    run_dir_for,
    run_grid,
    train_one,
)

logger = logging.getLogger("lesionseg")

OVERFIT_TARGET = 0.95  # frozen smoke-test bar; see the training test suite


def _parse_csv(text: str, all_values) -> list[str]:
    if text == "all":
        return list(all_values)
    return [t for t in text.split(",") if t]


def _canonical_labels(names) -> list[str]:
    order = {l.value: i for i, l in enumerate(ModelLabel)}
    return sorted(names, key=lambda n: (order.get(n, len(order)), n))


def _spec_from_args(args):
    spec = default_spec(args.model)
    overrides = {}
    if getattr(args, "base_filters", None):
        overrides["base_filters"] = args.base_filters
    if getattr(args, "depth", None):
        overrides["depth"] = args.depth
    if getattr(args, "image_size", None):
        overrides["input_shape"] = (args.image_size, args.image_size, 3)
    return replace(spec, **overrides) if overrides else spec


def _config_from_args(args) -> TrainConfig:
    config = TrainConfig.from_file(args.config) if args.config \
        else TrainConfig()
    overrides = {}
    if getattr(args, "epochs", None):
        overrides["max_epochs"] = args.epochs
    if getattr(args, "batch_size", None):
        overrides["batch_size"] = args.batch_size
    if getattr(args, "image_size", None):
        overrides["image_size"] = args.image_size
    return replace(config, **overrides) if overrides else config


def _split_from_args(args):
    index = scan_dataset(args.data_root, ISIC2016)
    if getattr(args, "split", None):
        return load_split(args.split, index)
    return split_train_val(index, val_fraction=args.val_fraction,
                           seed=args.split_seed)


def cmd_prepare(args) -> int:
    index = scan_dataset(args.data_root, ISIC2016)
    train, val = split_train_val(index, val_fraction=args.val_fraction,
                                 seed=args.seed)
    path = save_split(args.out, train, val, seed=args.seed,
                      val_fraction=args.val_fraction)
    logger.info("split %d train / %d val", len(train), len(val))
    print(path)
    return 0


def cmd_train(args) -> int:
    split = _split_from_args(args)
    config = _config_from_args(args)
    spec = _spec_from_args(args)
    if args.overfit_batch:
        store = SampleStore(split[0], config.image_size)
        samples = [store.get(i) for i in range(min(8, len(store)))]
        trace = overfit_single_batch(spec.label, samples, steps=args.steps,
                                     lr=args.lr, seed=args.seed, spec=spec)
        best = max(trace)
        reached = best >= OVERFIT_TARGET
        logger.info("overfit smoke: best dice %.4f over %d steps",
                    best, len(trace))
        print(json.dumps({"best_dice": round(best, 6), "steps": len(trace),
                          "reached": reached}))
        return 0 if reached else 3
    aug = AugConfig.from_label(args.aug)
    train_one(spec, aug, split, config, seed=args.seed, runs_root=args.runs)
    print(run_dir_for(args.runs, spec.label.value, args.aug, args.seed))
    return 0


def _grid_cell(payload) -> None:
    """One (label, aug, seed) cell; runs in a worker process under --jobs."""
    (label, aug_label, train_idx, val_idx, config, seed, runs_root,
     overrides) = payload
    spec = replace(default_spec(label), **overrides) if overrides \
        else default_spec(label)
    manifest = run_dir_for(runs_root, label, aug_label, seed) / "manifest.json"
    if manifest.exists() and json.loads(manifest.read_text()).get("completed"):
        return
    try:
        train_one(spec, AugConfig.from_label(aug_label),
                  (train_idx, val_idx), config, seed, runs_root=runs_root)
    except DivergenceDetected:
        pass  # failure manifest written; counted at aggregation


def cmd_grid(args) -> int:
    labels = _parse_csv(args.models, [l.value for l in ModelLabel])
    augs = _parse_csv(args.augs, sorted(AUG_TABLE))
    seeds = [int(s) for s in _parse_csv(args.seeds, [])] or list(DEFAULT_SEEDS)
    split = _split_from_args(args)
    config = _config_from_args(args)
    overrides = {}
    if args.base_filters:
        overrides["base_filters"] = args.base_filters
    if args.depth:
        overrides["depth"] = args.depth

    if args.jobs > 1:
        import multiprocessing as mp

        payloads = [(label, aug, split[0], split[1], config, seed,
                     args.runs, overrides)
                    for label in labels for aug in augs for seed in seeds]
        with mp.get_context("spawn").Pool(args.jobs) as pool:
            pool.map(_grid_cell, payloads)
        results = collect_results(args.runs, labels, augs, seeds)
    else:
        if overrides:
            for payload in [(l, a, split[0], split[1], config, s,
                             args.runs, overrides)
                            for l in labels for a in augs for s in seeds]:
                _grid_cell(payload)
            results = collect_results(args.runs, labels, augs, seeds)
        else:
            results = run_grid(labels, augs, split, config, seeds=seeds,
                               runs_root=args.runs)
    logger.info("grid complete: %d cells", len(results))
    print(Path(args.runs))
    return 0


def _load_model(args):
    spec = _spec_from_args(args)
    model = build_model(spec)
    ckpt = torch.load(args.checkpoint, map_location="cpu", weights_only=True)
    model.load_state_dict(ckpt["state_dict"])
    return model


def cmd_evaluate(args) -> int:
    model = _load_model(args)
    split = _split_from_args(args)
    index = split[0] if args.subset == "train" else split[1]
    config = TrainConfig(batch_size=args.batch_size or 32,
                         image_size=args.image_size or 256)
    store = SampleStore(index, config.image_size)
    dice, iou, ft = _run_eval_epoch(model, store, config)
    print(json.dumps({"subset": args.subset, "n": len(store),
                      "dice": round(dice, 6), "iou": round(iou, 6),
                      "FT": round(ft, 6)}))
    return 0


def cmd_report(args) -> int:
    runs_root = Path(args.runs)
    label_dirs = [d for d in runs_root.iterdir() if d.is_dir()] \
        if runs_root.is_dir() else []
    if not label_dirs:
        raise LesionSegError(f"no runs found under {runs_root}")
    labels = _parse_csv(args.models, []) or _canonical_labels(
        d.name for d in label_dirs)
    augs = _parse_csv(args.augs, []) or sorted(
        {a.name for d in label_dirs for a in d.iterdir() if a.is_dir()})
    if args.seeds:
        seeds = [int(s) for s in _parse_csv(args.seeds, [])]
    else:
        seeds = sorted({int(s.name) for d in label_dirs
                        for a in d.iterdir() if a.is_dir()
                        for s in a.iterdir()
                        if s.is_dir() and s.name.isdigit()})
    if not augs or not seeds:
        raise LesionSegError(f"no completed runs under {runs_root}")
    results = collect_results(runs_root, labels, augs, seeds)
    subset = _parse_csv(args.overall_subset, []) if args.overall_subset \
        else None
    paths = write_report(results, args.out, overall_subset=subset,
                         figures=not args.no_figures)
    for path in paths:
        print(path)
    return 0


def cmd_preview_aug(args) -> int:
    config = AugConfig.from_label(args.aug)
    index = scan_dataset(args.data_root, ISIC2016)
    size = (args.image_size, args.image_size)
    batch = [load_sample(r, size)
             for r in index.records[:max(args.samples, 1)]]
    path = render_preview(batch, config, seed=args.seed, path=args.out)
    print(path)
    return 0


def cmd_predict(args) -> int:
    model = _load_model(args)
    raw = cv2.imread(str(args.image), cv2.IMREAD_COLOR)
    if raw is None:
        raise DecodeError(f"could not read image {args.image}")
    raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    size = args.image_size or 256
    raw = cv2.resize(raw, (size, size), interpolation=cv2.INTER_LINEAR)
    image = np.clip(raw.astype(np.float32) / 255.0, 0.0, 1.0)
    mask = predict_mask(model, image, threshold=args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(out), (mask * 255).astype(np.uint8))
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionseg",
        description="Skin lesion segmentation experiments: data prep, "
                    "training grid, evaluation, and result tables.")
    sub = parser.add_subparsers(dest="command", required=True)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data-root", required=True, type=Path,
                      help="dataset root with *.jpg images and "
                           "*_Segmentation.png masks")
    data.add_argument("--split", type=Path, default=None,
                      help="split manifest from `prepare`; omitting it "
                           "splits in memory")
    data.add_argument("--val-fraction", type=float, default=0.2)
    data.add_argument("--split-seed", type=int, default=1)

    sizing = argparse.ArgumentParser(add_help=False)
    sizing.add_argument("--config", type=Path, default=None,
                        help="JSON training config; defaults to the full "
                             "protocol")
    sizing.add_argument("--epochs", type=int, default=None)
    sizing.add_argument("--batch-size", type=int, default=None)
    sizing.add_argument("--image-size", type=int, default=None)
    sizing.add_argument("--base-filters", type=int, default=None,
                        help="override the model width (toy runs)")
    sizing.add_argument("--depth", type=int, default=None,
                        help="override the encoder depth (toy runs)")

    p = sub.add_parser("prepare", parents=[],
                       help="scan the dataset and write a split manifest")
    p.add_argument("--data-root", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[data, sizing],
                       help="train one (model, augmentation, seed) run")
    p.add_argument("--model", required=True)
    p.add_argument("--aug", default="AUG-1")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--runs", type=Path, default=Path("runs"))
    p.add_argument("--overfit-batch", action="store_true",
                   help="skip the protocol; memorize one 8-sample batch "
                        "as a sanity check")
    p.add_argument("--steps", type=int, default=200,
                   help="overfit smoke step budget")
    p.add_argument("--lr", type=float, default=0.05,
                   help="overfit smoke learning rate")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", parents=[data, sizing],
                       help="run the full (models x augs x seeds) grid, "
                            "resuming completed cells")
    p.add_argument("--models", default="all",
                   help="comma-separated labels or 'all'")
    p.add_argument("--augs", default="all")
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--runs", type=Path, default=Path("runs"))
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel worker processes")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("evaluate", parents=[data],
                       help="run a checkpoint over a split and print metrics")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--model", required=True)
    p.add_argument("--subset", choices=("train", "val"), default="val")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--base-filters", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report",
                       help="regenerate tables and figures from a runs tree")
    p.add_argument("--runs", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--models", default="")
    p.add_argument("--augs", default="")
    p.add_argument("--seeds", default="")
    p.add_argument("--overall-subset", default="")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("preview-aug",
                       help="render a before/after augmentation panel")
    p.add_argument("--data-root", required=True, type=Path)
    p.add_argument("--aug", required=True)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--image-size", type=int, default=256)
    p.set_defaults(func=cmd_preview_aug)

    p = sub.add_parser("predict",
                       help="write the predicted mask for one image")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--base-filters", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the usage message
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (DivergenceDetected, OutOfBudget) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except LesionSegError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
