"""Training loops: plain baselines, the SR teacher and the distilled LR student.

The student objective mixes BCE on the labels with a squared-error term that
pulls its sigmoid scores toward the teacher's scores on the matching SR video.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import ConfigError, canonical_json, atomic_write_text, read_kv
from .fusion import FusionConfig, ScoreMatrix, apply_thresholds, f1_scores
from .losses import asl_loss, bce_loss, total_loss
from .net import backward, forward, init_model, predict_probs, save_checkpoint
from .optim import AdamWState, LrSchedule, adamw_step, lr_at
from .synthdata import Dataset, LabeledSample, first_k_indices, uniform_sample_indices

log = logging.getLogger(__name__)

LOSSES = ("bce", "asl", "total")
SAMPLINGS = ("uniform", "first")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    loss: str = "bce"
    alpha: float = 0.5
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    margin: float = 0.05
    base_lr: float = 3e-3
    warmup_epochs: int = 1
    cycle_epochs: int = 10
    cycle_mult: int = 2
    eta_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    hidden: int = 64
    blocks: int = 1
    dropout: float = 0.5
    drop_path: float = 0.4
    clips: int = 16
    sampling: str = "uniform"
    tier: str = "lr"
    seed: int = 0
    checkpoint_every: int = 1
    audit: bool = False

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.clips < 1 or self.checkpoint_every < 1:
            raise ValueError("epochs, batch_size, clips and checkpoint_every must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.sampling not in SAMPLINGS:
            raise ValueError(f"sampling must be one of {SAMPLINGS}")
        if self.tier not in ("lr", "sr", "hr"):
            raise ValueError("tier must be lr, sr or hr")

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        """Flat key-value file; absent keys keep their defaults."""
        entries = read_kv(path)
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, (value, lineno) in entries.items():
            if key not in kinds:
                raise ConfigError(f"{path}:{lineno}: unknown training key {key!r}")
            kwargs[key] = _parse_value(value, kinds[key], path, lineno, key)
        kwargs.update(overrides)
        cfg = cls(**kwargs)
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cfg

    def schedule(self, steps_per_epoch: int) -> LrSchedule:
        return LrSchedule(base_lr=self.base_lr, warmup_steps=self.warmup_epochs * steps_per_epoch,
                          cycle_steps=self.cycle_epochs * steps_per_epoch,
                          cycle_mult=self.cycle_mult, eta_min=self.eta_min)


def _parse_value(value, kind, path, lineno, key):
    kind = str(kind)
    try:
        if kind == "bool":
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError
            return value.lower() in ("true", "1")
        return {"int": int, "float": float, "str": str}[kind](value)
    except ValueError:
        raise ConfigError(f"{path}:{lineno}: {key} expects {kind}, got {value!r}") from None


@dataclass
class DistillTarget:
    ids: np.ndarray
    knowledge: np.ndarray  # (N, C) teacher probabilities

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.knowledge = np.asarray(self.knowledge, dtype=np.float64)
        if self.knowledge.shape[0] != len(self.ids):
            raise ValueError("one knowledge row per sample id is required")
        if np.any((self.knowledge < 0) | (self.knowledge > 1)):
            raise ValueError("knowledge entries must lie in [0, 1]")

    def rows_for(self, ids) -> np.ndarray:
        pos = {int(i): r for r, i in enumerate(self.ids)}
        missing = [int(i) for i in ids if int(i) not in pos]
        if missing:
            raise KeyError(f"no knowledge row for sample id {missing[0]}")
        return self.knowledge[[pos[int(i)] for i in ids]]


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    val_f1: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    test_scores: ScoreMatrix = None
    snapshots: list = field(default_factory=list)  # (epoch, MlpModel), in memory only
    audit_losses: list = field(default_factory=list)

    def to_json(self) -> dict:
        out = {"losses": self.losses, "val_f1": self.val_f1,
               "checkpoints": [Path(p).name for p in self.checkpoints]}
        if self.audit_losses:
            out["audit_losses"] = self.audit_losses
        return out


def frame_indices(num_frames, clips, sampling="uniform", rng=None):
    if sampling == "first":
        return first_k_indices(num_frames, clips)
    return uniform_sample_indices(num_frames, clips, rng)


def featurize(sample: LabeledSample, clips: int, rng=None, tier="lr", sampling="uniform") -> np.ndarray:
    """Flatten the K selected frames of one tier into a single vector.

    ``rng=None`` picks each clip's middle frame (evaluation mode).
    """
    frames = sample.videos[tier].frames
    return frames[frame_indices(frames.shape[0], clips, sampling, rng)].reshape(-1)


def featurize_stack(videos, clips, rng=None, sampling="uniform") -> np.ndarray:
    """Row-wise :func:`featurize` for an (N, T, h, w) stack, consuming ``rng`` in row order."""
    n, t = videos.shape[:2]
    if rng is None or sampling == "first":
        idx = frame_indices(t, clips, sampling, None)
        return videos[:, idx].reshape(n, -1)
    idx = uniform_sample_indices(t, clips, rng, size=n)
    return np.take_along_axis(videos, idx[:, :, None, None], axis=1).reshape(n, -1)


def _loss(config: TrainConfig, logits, labels, knowledge):
    if config.loss == "bce":
        return bce_loss(logits, labels)
    if config.loss == "asl":
        return asl_loss(logits, labels, config.gamma_pos, config.gamma_neg, config.margin)
    return total_loss(logits, labels, knowledge, config.alpha)


def score_matrix(model, ds: Dataset, config: TrainConfig) -> ScoreMatrix:
    """Eval-mode sigmoid scores on ``ds`` using the config's tier and sampling."""
    x = featurize_stack(ds.stack(config.tier), config.clips, None, config.sampling)
    logits, _ = forward(model, x, "eval")
    return ScoreMatrix(ds.ids, predict_probs(logits))


def default_f1(scores: ScoreMatrix, labels) -> float:
    """Sample-averaged F1 at a flat 0.5 threshold, no post-processing."""
    cfg = FusionConfig(np.full(scores.num_classes, 0.5), fallback_argmax=False)
    return f1_scores(apply_thresholds(scores, cfg), labels)["sample_f1"]


def _sorted(ds: Dataset) -> Dataset:
    return ds.subset(sorted(ds.samples, key=lambda s: s.id))


def train_model(train: Dataset, config: TrainConfig, *, val: Dataset = None, test: Dataset = None,
                knowledge: DistillTarget = None, out_dir=None):
    """Mini-batch AdamW training; returns ``(model, report)``.

    Samples are put in id order first, so the result does not depend on the
    order of ``train.samples``. With ``out_dir`` every checkpoint is also
    written there as ``epoch_<n>.ckpt``.
    """
    config.validate()
    if not len(train):
        raise ValueError("training set is empty")
    if config.loss == "total" and knowledge is None:
        raise ValueError("loss 'total' needs teacher knowledge")
    train = _sorted(train)
    videos = train.stack(config.tier)
    labels = train.label_matrix().astype(np.float64)
    ids = train.ids
    k_rows = knowledge.rows_for(ids) if config.loss == "total" else None
    n = len(train)
    input_dim = config.clips * videos.shape[2] * videos.shape[3]

    model = init_model(input_dim, config.hidden, config.blocks, train.num_classes,
                       config.dropout, config.drop_path, seed=[config.seed, 1])
    opt = AdamWState.zeros_like(model.params, beta1=config.beta1, beta2=config.beta2,
                                eps=config.eps, weight_decay=config.weight_decay)
    data_rng = np.random.default_rng([config.seed, 2])
    noise_rng = np.random.default_rng([config.seed, 3])
    steps_per_epoch = math.ceil(n / config.batch_size)
    schedule = config.schedule(steps_per_epoch)
    val_x = val_y = None
    if val is not None:
        val_x = featurize_stack(val.stack(config.tier), config.clips, None, config.sampling)
        val_y = val.label_matrix()
    if config.audit:
        audit_x = featurize_stack(videos, config.clips, None, config.sampling)

    report = TrainReport()
    step = 0
    for epoch in range(1, config.epochs + 1):
        if config.audit:
            report.audit_losses.append(audit_loss(model, config, audit_x, labels, k_rows))
        x_all = featurize_stack(videos, config.clips, data_rng, config.sampling)
        order = data_rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            rows = order[start:start + config.batch_size]
            logits, cache = forward(model, x_all[rows], "train", noise_rng)
            loss = _loss(config, logits, labels[rows], None if k_rows is None else k_rows[rows])
            if not np.isfinite(loss.value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = backward(model, cache, loss.grad)
            model.params, opt = adamw_step(model.params, grads, opt, lr_at(step, schedule))
            step += 1
            total += loss.value * len(rows)
        report.losses.append(total / n)
        if val_x is not None:
            logits, _ = forward(model, val_x, "eval")
            report.val_f1.append(default_f1(ScoreMatrix(val.ids, predict_probs(logits)), val_y))
        log.debug("epoch %d loss %.6f", epoch, report.losses[-1])
        if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
            report.snapshots.append((epoch, model.copy()))
            if out_dir is not None:
                path = Path(out_dir) / f"epoch_{epoch}.ckpt"
                save_checkpoint(path, model, seed=config.seed, epoch=epoch, optimizer=opt)
                report.checkpoints.append(path)
    if test is not None:
        report.test_scores = score_matrix(model, test, config)
    return model, report


def audit_loss(model, config, x, labels, k_rows) -> float:
    """Eval-mode training loss over the whole set, accumulated batch by batch in id order."""
    n = x.shape[0]
    total = 0.0
    for start in range(0, n, config.batch_size):
        sl = slice(start, start + config.batch_size)
        logits, _ = forward(model, x[sl], "eval")
        loss = _loss(config, logits, labels[sl], None if k_rows is None else k_rows[sl])
        total += loss.value * logits.shape[0]
    return total / n


def extract_knowledge(teacher, ds: Dataset, clips: int, tier="sr") -> DistillTarget:
    """Teacher scores on every sample's ``tier`` video, eval mode, mid-clip frames."""
    x = featurize_stack(ds.stack(tier), clips, None, "uniform")
    if x.shape[1] != teacher.input_dim:
        raise ValueError(f"teacher expects {teacher.input_dim} features, {tier} video gives {x.shape[1]}")
    logits, _ = forward(teacher, x, "eval")
    return DistillTarget(ds.ids, predict_probs(logits))


def distill_student(train: Dataset, knowledge: DistillTarget, config: TrainConfig, **kwargs):
    """Train on LR video against labels and teacher knowledge, weighted by ``config.alpha``."""
    missing = set(train.ids.tolist()) - set(knowledge.ids.tolist())
    if missing:
        raise KeyError(f"no knowledge row for sample id {min(missing)}")
    config = dataclasses.replace(config, loss="total", tier="lr")
    return train_model(train, config, knowledge=knowledge, **kwargs)


def write_report(path, report: TrainReport):
    atomic_write_text(path, canonical_json(report.to_json()))
