"""Command-line entry point: ``tinyaction <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ._io import ConfigError, atomic_write_text, canonical_json
from .distill import TrainConfig, distill_student, extract_knowledge, train_model, write_report
from .experiment import Manifest, PipelineError, run_pipeline
from .fusion import (DEFAULT_GRID, FusionConfig, calibrate_thresholds, ensemble_scores,
                     f1_scores, format_matrix_csv, postprocess, read_group_map, read_labels_csv,
                     read_scores_csv, read_thresholds, write_scores_csv, write_thresholds)
from .net import load_checkpoint
from .synthdata import DatasetSpec, balance_dataset, generate_dataset, load_splits, save_splits

log = logging.getLogger("tinyaction")

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    level = os.environ.get("TINYACTION_LOG", "quiet").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"TINYACTION_LOG must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def cmd_gen_data(args):
    spec = DatasetSpec.from_file(args.spec)
    try:
        splits = generate_dataset(spec)
    except ValueError as exc:
        raise ConfigError(f"{args.spec}: {exc}") from None
    save_splits(splits, args.out)
    if args.print_counts:
        print("class\tgroup\ttrain\tval\ttest")
        for c in range(spec.num_classes):
            row = [str(c), str(int(splits[0].group_map[c]))]
            row += [str(int(ds.recount()[c])) for ds in splits]
            print("\t".join(row))
    return 0


def _train_config(args, **overrides):
    if args.config:
        return TrainConfig.from_file(args.config, **overrides)
    cfg = TrainConfig(**overrides)
    cfg.validate()
    return cfg


def _write_outputs(out, report):
    out = Path(out)
    write_report(out / "report.json", report)
    write_scores_csv(out / "scores_test.csv", report.test_scores)


def cmd_train(args):
    train, val, test = load_splits(args.data)
    overrides = {"tier": args.tier} if args.tier else {}
    cfg = _train_config(args, **overrides)
    if args.balance is not None:
        train = balance_dataset(train, args.balance)
    _, report = train_model(train, cfg, val=val, test=test, out_dir=args.out)
    _write_outputs(args.out, report)
    return 0


def cmd_distill(args):
    train, val, test = load_splits(args.data)
    overrides = {"alpha": args.alpha} if args.alpha is not None else {}
    cfg = _train_config(args, **overrides)
    if args.balance is not None:
        train = balance_dataset(train, args.balance)
    teacher, _, _ = load_checkpoint(args.teacher)
    knowledge = extract_knowledge(teacher, train, cfg.clips, args.teacher_tier)
    atomic_write_text(Path(args.out) / "knowledge.csv",
                      format_matrix_csv(knowledge.ids, knowledge.knowledge))
    _, report = distill_student(train, knowledge, cfg, val=val, test=test, out_dir=args.out)
    _write_outputs(args.out, report)
    return 0


def _fuse(paths, weights):
    return ensemble_scores([read_scores_csv(p) for p in paths], weights)


def cmd_fuse(args):
    weights = None
    if args.weights:
        weights = [float(w) for w in args.weights.split(",")]
        if len(weights) != len(args.scores):
            raise ConfigError(f"--weights has {len(weights)} entries for {len(args.scores)} score files")
    val_paths = args.val_scores
    if len(val_paths) not in (1, len(args.scores)):
        raise ConfigError("--val-scores takes one fused file or one file per --scores entry")
    fused = _fuse(args.scores, weights)
    fused_val = _fuse(val_paths, weights if len(val_paths) > 1 else None)
    val_ids, val_y = read_labels_csv(args.val_labels)
    val_y = _align_labels(val_ids, val_y, fused_val.ids, args.val_labels)
    thresholds = calibrate_thresholds(fused_val, val_y, args.grid or DEFAULT_GRID)
    groups = read_group_map(args.groups, fused.num_classes) if args.groups else None
    metrics = {"thresholds": thresholds.tolist(), "num_models": len(args.scores),
               "weights": weights if weights is not None else [1.0] * len(args.scores)}
    if args.labels:
        ids, y = read_labels_csv(args.labels)
        y = _align_labels(ids, y, fused.ids, args.labels)
        preds = postprocess(fused, FusionConfig(thresholds, groups))
        metrics["test"] = f1_scores(preds, y)
    if args.out_scores:
        write_scores_csv(args.out_scores, fused)
    if args.out_thresholds:
        write_thresholds(args.out_thresholds, thresholds)
    atomic_write_text(args.out, canonical_json(metrics))
    return 0


def _align_labels(label_ids, labels, ids, path):
    pos = {int(i): r for r, i in enumerate(label_ids)}
    missing = [int(i) for i in ids if int(i) not in pos]
    if missing:
        raise ConfigError(f"{path}: no labels for sample id {missing[0]}")
    return labels[[pos[int(i)] for i in ids]]


def cmd_eval(args):
    scores = read_scores_csv(args.scores)
    ids, y = read_labels_csv(args.labels)
    y = _align_labels(ids, y, scores.ids, args.labels)
    thresholds = read_thresholds(args.thresholds) if args.thresholds else np.full(scores.num_classes, 0.5)
    groups = read_group_map(args.groups, scores.num_classes) if args.groups else None
    preds = postprocess(scores, FusionConfig(thresholds, groups, fallback_argmax=args.fallback_argmax))
    text = canonical_json(f1_scores(preds, y))
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_pipeline(args):
    manifest = Manifest.load(args.manifest)
    run_pipeline(manifest, parallel=args.parallel or None)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="tinyaction", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    g.add_argument("--spec", required=True, help="key = value dataset spec file")
    g.add_argument("--out", required=True, help="output directory for train/val/test .bin files")
    g.add_argument("--print-counts", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model on a dataset tier")
    t.add_argument("--data", required=True)
    t.add_argument("--tier", choices=("lr", "sr", "hr"))
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--balance", type=float, metavar="QUANTILE",
                   help="flip-balance the training split first, tail classes up to this count quantile")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("distill", help="train an LR student against a teacher checkpoint")
    d.add_argument("--data", required=True)
    d.add_argument("--teacher", required=True, help="teacher checkpoint")
    d.add_argument("--teacher-tier", default="sr", choices=("lr", "sr", "hr"))
    d.add_argument("--config")
    d.add_argument("--alpha", type=float)
    d.add_argument("--balance", type=float, metavar="QUANTILE")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_distill)

    f = sub.add_parser("fuse", help="ensemble score files and calibrate thresholds")
    f.add_argument("--scores", nargs="+", required=True)
    f.add_argument("--weights", help="comma-separated, one per score file")
    f.add_argument("--val-scores", nargs="+", required=True)
    f.add_argument("--val-labels", required=True)
    f.add_argument("--groups")
    f.add_argument("--labels", help="test labels; adds F1 metrics to the output")
    f.add_argument("--grid", type=float, nargs="+")
    f.add_argument("--out-scores")
    f.add_argument("--out-thresholds")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("eval", help="F1 metrics of a score file")
    e.add_argument("--scores", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--thresholds")
    e.add_argument("--groups")
    e.add_argument("--fallback-argmax", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("pipeline", help="run the full multi-replicate experiment")
    pl.add_argument("--manifest", required=True)
    pl.add_argument("--parallel", action="store_true", help="one process per replicate")
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except (ConfigError, PipelineError, FileNotFoundError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"tinyaction {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
