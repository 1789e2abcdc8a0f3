"""Ensemble fusion, per-class threshold calibration, group suppression and F1 metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from ._io import ConfigError, atomic_write_text, fmt_float

DEFAULT_GRID = tuple(np.round(np.arange(1, 20) * 0.05, 2))


@dataclass
class ScoreMatrix:
    ids: np.ndarray  # (N,) int64
    scores: np.ndarray  # (N, C) float64 in [0, 1]

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[0] != self.ids.shape[0]:
            raise ValueError(f"scores shape {self.scores.shape} does not match {len(self.ids)} ids")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("sample ids must be unique")
        if not np.all(np.isfinite(self.scores)) or self.scores.min(initial=0) < 0 or self.scores.max(initial=0) > 1:
            raise ValueError("scores must be finite and lie in [0, 1]")

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    def aligned_to(self, ids) -> np.ndarray:
        """Score rows reordered to match ``ids``."""
        pos = {int(i): r for r, i in enumerate(self.ids)}
        try:
            return self.scores[[pos[int(i)] for i in ids]]
        except KeyError as exc:
            raise ValueError(f"sample id {exc.args[0]} missing from score matrix") from None


@dataclass
class FusionConfig:
    thresholds: np.ndarray
    group_map: np.ndarray = None
    fallback_argmax: bool = True

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if np.any((self.thresholds < 0) | (self.thresholds > 1)):
            raise ValueError("thresholds must lie in [0, 1]")


def ensemble_scores(matrices, weights=None) -> ScoreMatrix:
    """Weighted mean of several score matrices, rows matched by sample id."""
    if not matrices:
        raise ValueError("need at least one score matrix")
    ref = matrices[0]
    for m in matrices[1:]:
        if m.num_classes != ref.num_classes:
            raise ValueError(f"class count mismatch: {m.num_classes} vs {ref.num_classes}")
        if set(m.ids.tolist()) != set(ref.ids.tolist()):
            raise ValueError("score matrices cover different sample ids")
    if weights is None:
        weights = np.ones(len(matrices))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(matrices),) or np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("weights must be nonnegative, one per matrix, with positive sum")
    w = weights / weights.sum()
    acc = np.zeros_like(ref.scores)
    for wi, m in zip(w, matrices):
        acc += wi * m.aligned_to(ref.ids)
    # rounding in the weighted sum can step a hair outside the inputs' range
    stacked = [m.aligned_to(ref.ids) for m in matrices]
    lo = np.minimum.reduce(stacked)
    hi = np.maximum.reduce(stacked)
    return ScoreMatrix(ref.ids.copy(), np.clip(acc, lo, hi))


def _binary_f1(pred, truth):
    tp = np.sum(pred & truth)
    fp = np.sum(pred & ~truth)
    fn = np.sum(~pred & truth)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def calibrate_thresholds(val_scores: ScoreMatrix, val_labels, grid=DEFAULT_GRID) -> np.ndarray:
    """Per-class grid threshold maximising that class's validation F1.

    Ties go to the lowest grid value. A class with neither positives nor
    predictions scores F1 = 1 at that threshold, so classes absent from the
    validation set end up with the lowest threshold that predicts nothing.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0 or np.any((grid < 0) | (grid > 1)):
        raise ValueError("grid must be nonempty with values in [0, 1]")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly ascending")
    labels = np.asarray(val_labels).astype(bool)
    if labels.shape[0] == 0:
        raise ValueError("empty validation set")
    if labels.shape != val_scores.scores.shape:
        raise ValueError("validation labels and scores disagree in shape")
    s = val_scores.scores
    out = np.empty(s.shape[1])
    for c in range(s.shape[1]):
        f1 = [_binary_f1(s[:, c] >= t, labels[:, c]) for t in grid]
        out[c] = grid[int(np.argmax(f1))]  # argmax returns the first maximiser
    return out


def frequency_prior_report(thresholds, class_counts) -> dict:
    """How well the chosen thresholds follow "more frequent class, higher threshold"."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    counts = np.asarray(class_counts, dtype=np.float64)
    if np.ptp(thresholds) == 0 or np.ptp(counts) == 0:
        rho = 0.0
    else:
        rho = float(spearmanr(counts, thresholds).statistic)
    return {"class_counts": counts.astype(int).tolist(), "thresholds": thresholds.tolist(),
            "spearman_count_vs_threshold": rho}


def apply_thresholds(scores: ScoreMatrix, config: FusionConfig) -> np.ndarray:
    s = scores.scores
    if config.thresholds.shape != (s.shape[1],):
        raise ValueError("need one threshold per class")
    preds = (s >= config.thresholds).astype(np.uint8)
    if config.fallback_argmax:
        empty = ~preds.any(axis=1)
        preds[np.flatnonzero(empty), np.argmax(s[empty], axis=1)] = 1
    return preds


def group_suppress(scores: ScoreMatrix, preds, group_map) -> np.ndarray:
    """Keep only the top-scoring predicted class within each group (ties: lowest index)."""
    preds = np.asarray(preds).astype(np.uint8)
    s = scores.scores
    group_map = np.asarray(group_map)
    if group_map.shape != (s.shape[1],):
        raise ValueError("every class must be mapped to a group")
    out = preds.copy()
    for g in np.unique(group_map):
        cols = np.flatnonzero(group_map == g)
        if len(cols) < 2:
            continue
        sub = out[:, cols].astype(bool)
        crowded = sub.sum(axis=1) > 1
        if not crowded.any():
            continue
        masked = np.where(sub[crowded], s[crowded][:, cols], -np.inf)
        winner = np.argmax(masked, axis=1)
        keep = np.zeros_like(sub[crowded])
        keep[np.arange(len(winner)), winner] = True
        rows = np.flatnonzero(crowded)
        out[np.ix_(rows, cols)] = keep
    return out


def f1_scores(preds, labels) -> dict:
    """Sample-averaged, micro and macro F1 of binary prediction/label matrices."""
    p = np.asarray(preds).astype(bool)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape:
        raise ValueError(f"preds shape {p.shape} != labels shape {y.shape}")
    tp = (p & y).sum(axis=1)
    denom = p.sum(axis=1) + y.sum(axis=1)
    per_sample = np.where(denom == 0, 1.0, 2 * tp / np.maximum(denom, 1))
    TP, FP, FN = (p & y).sum(), (p & ~y).sum(), (~p & y).sum()
    micro = 0.0 if 2 * TP + FP + FN == 0 else 2 * TP / (2 * TP + FP + FN)
    tpc, fpc, fnc = (p & y).sum(axis=0), (p & ~y).sum(axis=0), (~p & y).sum(axis=0)
    dc = 2 * tpc + fpc + fnc
    per_class = np.where(dc == 0, 0.0, 2 * tpc / np.maximum(dc, 1))
    return {
        "sample_f1": float(per_sample.mean()) if len(per_sample) else 0.0,
        "micro_f1": float(micro),
        "macro_f1": float(per_class.mean()) if len(per_class) else 0.0,
    }


def postprocess(scores: ScoreMatrix, config: FusionConfig) -> np.ndarray:
    """Thresholds, argmax fallback, then group suppression (if a group map is set)."""
    preds = apply_thresholds(scores, config)
    if config.group_map is not None:
        preds = group_suppress(scores, preds, config.group_map)
    return preds


# -- file formats --------------------------------------------------------------

def _header(num_classes):
    return ["sample_id"] + [f"class_{c}" for c in range(num_classes)]


def format_matrix_csv(ids, values, as_int=False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_header(values.shape[1]))
    for i, row in zip(ids, values):
        w.writerow([int(i)] + [str(int(v)) if as_int else fmt_float(v) for v in row])
    return buf.getvalue()


def write_scores_csv(path, sm: ScoreMatrix):
    atomic_write_text(path, format_matrix_csv(sm.ids, sm.scores))


def write_labels_csv(path, ids, labels):
    atomic_write_text(path, format_matrix_csv(ids, np.asarray(labels), as_int=True))


def _read_matrix_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty file; expected header 'sample_id,class_0,...,class_<C-1>'")
    head = rows[0]
    if len(head) < 2 or head != _header(len(head) - 1):
        raise ConfigError(f"{path}: malformed header {','.join(head)!r}; "
                          "expected 'sample_id,class_0,...,class_<C-1>'")
    ids, vals = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(head):
            raise ConfigError(f"{path}:{lineno}: expected {len(head)} fields, got {len(row)}")
        try:
            ids.append(int(row[0]))
            vals.append([float(v) for v in row[1:]])
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: non-numeric field") from None
    return np.array(ids, dtype=np.int64), np.array(vals, dtype=np.float64).reshape(len(ids), len(head) - 1)


def read_scores_csv(path) -> ScoreMatrix:
    ids, vals = _read_matrix_csv(path)
    try:
        return ScoreMatrix(ids, vals)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def read_labels_csv(path):
    ids, vals = _read_matrix_csv(path)
    if not np.all((vals == 0) | (vals == 1)):
        raise ConfigError(f"{path}: labels must be 0 or 1")
    return ids, vals.astype(np.uint8)


def write_group_map(path, group_map):
    atomic_write_text(path, "".join(f"{c},{int(g)}\n" for c, g in enumerate(group_map)))


def read_group_map(path, num_classes=None) -> np.ndarray:
    entries = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            c, g = (int(x) for x in raw.split(","))
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: expected 'class_index,group_id', got {raw!r}") from None
        entries[c] = g
    n = num_classes if num_classes is not None else len(entries)
    missing = [c for c in range(n) if c not in entries]
    if missing:
        raise ConfigError(f"{path}: class {missing[0]} has no group")
    return np.array([entries[c] for c in range(n)], dtype=np.int64)


def write_thresholds(path, thresholds):
    atomic_write_text(path, "class,threshold\n" + "".join(
        f"{c},{fmt_float(t)}\n" for c, t in enumerate(thresholds)))


def read_thresholds(path) -> np.ndarray:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0] != "class,threshold":
        raise ConfigError(f"{path}: expected header 'class,threshold'")
    vals = {}
    for lineno, ln in enumerate(lines[1:], start=2):
        try:
            c, t = ln.split(",")
            vals[int(c)] = float(t)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: expected 'class,threshold'") from None
    return np.array([vals[c] for c in range(len(vals))])
