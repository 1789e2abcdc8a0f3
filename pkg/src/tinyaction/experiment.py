"""End-to-end replicate runner behind the ``pipeline`` command.

One replicate = one freshly generated benchmark plus every training stage:

1. LR baseline with first-K frames, LR with uniform clip sampling, LR with
   uniform sampling on the flip-balanced training set;
2. SR teacher on the balanced set, knowledge extraction, LR student;
3. a second SR model trained with the asymmetric loss, then an equal-weight
   ensemble over checkpoints of the balanced LR model, both SR models and the
   student, with calibrated per-class thresholds, argmax fallback and group
   suppression.

Every number in the report is a sample-averaged F1 on the test split and can
be recomputed from the score/label CSVs written next to it.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import multiprocessing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import ConfigError, atomic_write_text, canonical_json
from .distill import (TrainConfig, default_f1, distill_student, extract_knowledge, score_matrix,
                      train_model, write_report)
from .fusion import (DEFAULT_GRID, FusionConfig, calibrate_thresholds, ensemble_scores, f1_scores,
                     frequency_prior_report, postprocess, write_group_map, write_labels_csv,
                     write_scores_csv, write_thresholds)
from .synthdata import DatasetSpec, balance_dataset, generate_dataset, load_splits

log = logging.getLogger(__name__)

F1_FIELDS = ("baseline_lr", "uniform_sampling", "data_balance", "sr_teacher", "sr_kd_student",
             "best_single_calibrated", "ensemble_postproc")
ENSEMBLE_MODELS = ("balance", "teacher", "teacher_asl", "student")
ENSEMBLE_METHODS = ("all", "top_k", "greedy")


class PipelineError(RuntimeError):
    pass


@dataclass
class Manifest:
    dataset_spec: Path
    output_dir: Path
    replicates: int = 1
    seed: int = 0
    dataset: Path = None  # optional pre-generated splits shared by all replicates
    train: dict = field(default_factory=dict)
    teacher: dict = field(default_factory=dict)
    student: dict = field(default_factory=lambda: {"alpha": 0.5})
    teacher_asl: dict = field(default_factory=lambda: {"loss": "asl"})
    tail_quantile: float = 0.5
    prior_counts: str = "balanced"
    ensemble_epochs: list = field(default_factory=lambda: [10, 20, 30])
    ensemble_method: str = "all"
    ensemble_size: int = 4  # top_k and greedy only
    ensemble_picks: int = 12  # greedy only
    grid: list = field(default_factory=lambda: list(DEFAULT_GRID))
    parallel: bool = False

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"{path}: no such manifest")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"{path}: unknown manifest key {unknown[0]!r}")
        for key in ("dataset_spec", "output_dir"):
            if key not in raw:
                raise ConfigError(f"{path}: missing manifest key {key!r}")
        base = path.parent
        for key in ("dataset_spec", "output_dir", "dataset"):
            if raw.get(key) is not None:
                raw[key] = (base / raw[key]).resolve()
        m = cls(**raw)
        m.check()
        return m

    def check(self):
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if not Path(self.dataset_spec).is_file():
            raise ConfigError(f"dataset spec {self.dataset_spec} does not exist")
        if self.dataset is not None and not Path(self.dataset).is_dir():
            raise ConfigError(f"dataset directory {self.dataset} does not exist")
        if self.prior_counts not in ("balanced", "original"):
            raise ConfigError("prior_counts must be 'balanced' or 'original'")
        if self.ensemble_method not in ENSEMBLE_METHODS:
            raise ConfigError(f"ensemble_method must be one of {', '.join(ENSEMBLE_METHODS)}")
        if self.ensemble_size < 1 or self.ensemble_picks < self.ensemble_size:
            raise ConfigError("need ensemble_picks >= ensemble_size >= 1")

    def configs(self, seed):
        base = TrainConfig(seed=seed, **self.train)
        teacher = dataclasses.replace(base, tier="sr", **self.teacher)
        student = dataclasses.replace(base, **self.student)
        teacher_asl = dataclasses.replace(teacher, **self.teacher_asl)
        for cfg in (base, teacher, student, teacher_asl):
            cfg.validate()
        return base, teacher, student, teacher_asl


def _val_f1(candidates, weights, val_labels, group_map, grid):
    fused = ensemble_scores([c[1] for c in candidates], weights)
    th = calibrate_thresholds(fused, val_labels, grid)
    preds = postprocess(fused, FusionConfig(th, group_map))
    return f1_scores(preds, val_labels)["sample_f1"]


def _ranked(candidates, val_labels, group_map, grid):
    n = len(candidates)
    singles = [_val_f1(candidates, np.eye(n)[i], val_labels, group_map, grid) for i in range(n)]
    return np.argsort(-np.asarray(singles), kind="stable")


def top_k_ensemble(candidates, val_labels, group_map, grid, size=4):
    """Equal-weight average of the ``size`` best candidates by post-processed validation F1.

    ``candidates`` are ``(name, val_scores)`` pairs; ties go to the earliest
    candidate. Returns a 0/1 weight per candidate.
    """
    counts = np.zeros(len(candidates))
    counts[_ranked(candidates, val_labels, group_map, grid)[:size]] = 1
    return counts


def greedy_ensemble(candidates, val_labels, group_map, grid, picks=12, size=4):
    """Forward selection with replacement, scored by post-processed validation F1.

    Seeded with the ``size`` best single candidates, then grown one pick at a
    time (ties: earliest candidate). Returns the multiplicity of each candidate.
    With a small validation split this tends to overfit.
    """
    n = len(candidates)
    counts = top_k_ensemble(candidates, val_labels, group_map, grid, size)
    while counts.sum() < picks:
        scores = [_val_f1(candidates, counts + np.eye(n)[i], val_labels, group_map, grid) for i in range(n)]
        counts[int(np.argmax(scores))] += 1
    return counts


def _stage(name, seed, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise PipelineError(f"stage {name!r} failed for replicate seed {seed}: {exc}") from exc


def run_replicate(manifest: Manifest, replicate: int) -> dict:
    spec = DatasetSpec.from_file(manifest.dataset_spec)
    spec = dataclasses.replace(spec, seed=spec.seed + replicate)
    seed = manifest.seed + replicate
    out = Path(manifest.output_dir) / f"rep_{replicate}"
    log.info("replicate %d: data seed %d, train seed %d", replicate, spec.seed, seed)

    if manifest.dataset is not None:
        train, val, test = _stage("load-data", seed, load_splits, manifest.dataset)
    else:
        train, val, test = _stage("gen-data", seed, generate_dataset, spec)
    val_y, test_y = val.label_matrix(), test.label_matrix()
    write_labels_csv(out / "labels_val.csv", val.ids, val_y)
    write_labels_csv(out / "labels_test.csv", test.ids, test_y)
    write_group_map(out / "groups.csv", train.group_map)
    base, teacher_cfg, student_cfg, asl_cfg = manifest.configs(seed)
    keep = set(manifest.ensemble_epochs)

    def run(name, fn, ds, cfg, **kw):
        cfg = dataclasses.replace(cfg, checkpoint_every=_gcd_epochs(keep, cfg.epochs))
        model, report = _stage(name, seed, fn, ds, cfg, val=val, test=test, out_dir=out / name, **kw)
        write_report(out / name / "report.json", report)
        write_scores_csv(out / name / "scores_test.csv", report.test_scores)
        return model, report, cfg

    f1 = {}
    _, rep, _ = run("baseline", train_model, train, dataclasses.replace(base, sampling="first"))
    f1["baseline_lr"] = default_f1(rep.test_scores, test_y)
    _, rep, _ = run("uniform", train_model, train, base)
    f1["uniform_sampling"] = default_f1(rep.test_scores, test_y)

    balanced = _stage("balance", seed, balance_dataset, train, manifest.tail_quantile)
    runs = {}
    runs["balance"] = run("balance", train_model, balanced, base)
    f1["data_balance"] = default_f1(runs["balance"][1].test_scores, test_y)
    runs["teacher"] = run("teacher", train_model, balanced, teacher_cfg)
    f1["sr_teacher"] = default_f1(runs["teacher"][1].test_scores, test_y)
    knowledge = _stage("knowledge", seed, extract_knowledge, runs["teacher"][0], balanced,
                       teacher_cfg.clips, teacher_cfg.tier)
    student_fn = lambda ds, cfg, **kw: distill_student(ds, knowledge, cfg, **kw)  # noqa: E731
    runs["student"] = run("student", student_fn, balanced, student_cfg)
    f1["sr_kd_student"] = default_f1(runs["student"][1].test_scores, test_y)
    runs["teacher_asl"] = run("teacher_asl", train_model, balanced, asl_cfg)

    # every ensemble candidate: one checkpoint of one of the ensemble models
    names, val_sm, test_sm = [], [], []
    for model_name in ENSEMBLE_MODELS:
        _, report, cfg = runs[model_name]
        for epoch, snap in report.snapshots:
            if epoch not in keep:
                continue
            names.append(f"{model_name}@{epoch}")
            val_sm.append(score_matrix(snap, val, cfg))
            test_sm.append(score_matrix(snap, test, cfg))
            write_scores_csv(out / model_name / f"scores_val_epoch_{epoch}.csv", val_sm[-1])
            write_scores_csv(out / model_name / f"scores_test_epoch_{epoch}.csv", test_sm[-1])
    if not names:
        raise PipelineError(f"stage 'ensemble' failed for replicate seed {seed}: "
                            f"no checkpoint matches ensemble_epochs {sorted(keep)}")
    groups = train.group_map
    grid = manifest.grid

    single_cal, single_uncal, single_val = {}, {}, {}
    for name, v, t in zip(names, val_sm, test_sm):
        th = calibrate_thresholds(v, val_y, grid)
        write_thresholds(out / "singles" / f"{name.replace('@', '_epoch_')}_thresholds.csv", th)
        cfg = FusionConfig(th, groups)
        single_cal[name] = f1_scores(postprocess(t, cfg), test_y)["sample_f1"]
        single_val[name] = f1_scores(postprocess(v, cfg), val_y)["sample_f1"]
        single_uncal[name] = default_f1(t, test_y)
    best_val = max(names, key=lambda n: (single_val[n], -names.index(n)))
    f1["best_single_calibrated"] = single_cal[best_val]

    candidates = list(zip(names, val_sm))
    if manifest.ensemble_method == "all":
        # every family and epoch at equal weight; nothing is tuned on the small validation split
        counts = np.ones(len(candidates))
    elif manifest.ensemble_method == "greedy":
        counts = _stage("ensemble", seed, greedy_ensemble, candidates, val_y, groups, grid,
                        manifest.ensemble_picks, manifest.ensemble_size)
    else:
        counts = _stage("ensemble", seed, top_k_ensemble, candidates, val_y, groups, grid,
                        manifest.ensemble_size)
    fused_val = ensemble_scores(val_sm, counts)
    fused_test = ensemble_scores(test_sm, counts)
    thresholds = calibrate_thresholds(fused_val, val_y, grid)
    preds = postprocess(fused_test, FusionConfig(thresholds, groups))
    ens_metrics = f1_scores(preds, test_y)
    f1["ensemble_postproc"] = ens_metrics["sample_f1"]
    ens_dir = out / "ensemble"
    write_scores_csv(ens_dir / "scores_val.csv", fused_val)
    write_scores_csv(ens_dir / "scores_test.csv", fused_test)
    write_thresholds(ens_dir / "thresholds.csv", thresholds)
    prior = balanced.class_counts if manifest.prior_counts == "balanced" else train.class_counts
    members = {n: int(c) for n, c in zip(names, counts) if c}
    atomic_write_text(ens_dir / "members.json", canonical_json(members))

    return {
        "replicate": replicate,
        "data_seed": spec.seed,
        "train_seed": seed,
        "f1": f1,
        "single_calibrated": single_cal,
        "single_uncalibrated": single_uncal,
        "best_single_by_val": best_val,
        "ensemble_members": members,
        "ensemble_metrics": ens_metrics,
        "threshold_prior": frequency_prior_report(thresholds, prior),
    }


def _gcd_epochs(epochs, total):
    g = 0
    for e in epochs:
        if 1 <= e <= total:
            g = int(np.gcd(g, e))
    return g or total


def _summary(reps):
    def stats(values):
        v = np.array(values, dtype=np.float64)
        return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0}

    out = {k: stats([r["f1"][k] for r in reps]) for k in F1_FIELDS}
    slots = reps[0]["single_calibrated"].keys()
    cal = {s: float(np.mean([r["single_calibrated"][s] for r in reps])) for s in slots}
    uncal = {s: float(np.mean([r["single_uncalibrated"][s] for r in reps])) for s in slots}
    best_cal = max(cal, key=lambda s: cal[s])
    best_uncal = max(uncal, key=lambda s: uncal[s])
    diff = np.array([r["f1"]["sr_kd_student"] - r["f1"]["data_balance"] for r in reps])
    return {
        "f1": out,
        "single_calibrated_mean": cal,
        "single_uncalibrated_mean": uncal,
        "best_single_calibrated": {"slot": best_cal, "mean": cal[best_cal]},
        "best_single_uncalibrated": {"slot": best_uncal, "mean": uncal[best_uncal]},
        "student_minus_balance": stats(diff),
    }


def _run_one(args):
    manifest, r = args
    return run_replicate(manifest, r)


def run_pipeline(manifest: Manifest, parallel=None) -> dict:
    """Run every replicate and write ``report.json``; returns the report."""
    manifest.check()
    parallel = manifest.parallel if parallel is None else parallel
    jobs = [(manifest, r) for r in range(manifest.replicates)]
    if parallel and manifest.replicates > 1:
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(min(manifest.replicates, multiprocessing.cpu_count())) as pool:
            reps = pool.map(_run_one, jobs)
    else:
        reps = [_run_one(j) for j in jobs]
    report = {"replicates": reps, "summary": _summary(reps),
              "manifest": {"replicates": manifest.replicates, "seed": manifest.seed,
                           "train": manifest.train, "teacher": manifest.teacher,
                           "student": manifest.student, "teacher_asl": manifest.teacher_asl,
                           "tail_quantile": manifest.tail_quantile,
                           "ensemble_epochs": list(manifest.ensemble_epochs),
                           "ensemble_method": manifest.ensemble_method,
                           "ensemble_size": manifest.ensemble_size,
                           "ensemble_picks": manifest.ensemble_picks}}
    atomic_write_text(Path(manifest.output_dir) / "report.json", canonical_json(report))
    return report
