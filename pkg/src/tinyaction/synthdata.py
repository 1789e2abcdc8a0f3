"""Synthetic long-tailed, multi-label, dual-resolution video benchmark.

Every class owns a fixed T x H x W prototype made of three parts:

* a blocky group pattern shared by all classes of the same group (survives
  average pooling, so LR video can tell groups apart),
* a blocky class pattern (weak, also survives pooling),
* a zero-block-mean class detail (removed exactly by d x d pooling, so only
  the HR/SR tiers carry it),

all modulated by a class-specific temporal bump. A sample's HR video is the
sum of the prototypes of its active labels (each possibly mirrored) plus
Gaussian noise; LR is the pooled HR plus noise; SR blends HR back in with the
upsampled LR.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import ConfigError, atomic_write_bytes, read_kv

TIERS = ("lr", "sr", "hr")

# fixed mixing amplitudes of the prototype parts
GROUP_AMPLITUDE = 1.0
CLASS_AMPLITUDE = 1.0
DETAIL_AMPLITUDE = 0.5
ENVELOPE_WIDTH = 0.18  # fraction of T

_TAG_PROTO = 0x5EED01
_TAG_GROUP = 0x5EED02
_TAG_SAMPLE = 0x5EED03

DATASET_MAGIC = "TINYACTION-DATASET"
DATASET_VERSION = 1


@dataclass(frozen=True)
class VideoTensor:
    frames: np.ndarray  # (T, H, W) float64
    tier: str

    def __post_init__(self):
        if self.tier not in TIERS:
            raise ValueError(f"unknown resolution tier {self.tier!r}")
        if self.frames.ndim != 3 or min(self.frames.shape) < 1:
            raise ValueError(f"video must be T x H x W with every dim >= 1, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("video contains non-finite values")


@dataclass
class LabeledSample:
    id: int
    labels: np.ndarray  # (C,) uint8 multi-hot
    videos: dict  # tier -> VideoTensor
    is_augmented: bool = False

    def video(self, tier: str) -> VideoTensor:
        return self.videos[tier]


@dataclass
class Dataset:
    samples: list
    num_classes: int
    group_map: np.ndarray  # (C,) int
    frames: int
    height: int
    width: int
    downsample: int
    class_counts: np.ndarray = None

    def __post_init__(self):
        self.group_map = np.asarray(self.group_map, dtype=np.int64)
        if self.group_map.shape != (self.num_classes,):
            raise ValueError("group_map must assign every class to exactly one group")
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique within a dataset")
        for s in self.samples:
            if s.labels.shape != (self.num_classes,) or not s.labels.any():
                raise ValueError(f"sample {s.id}: labels must be a nonempty multi-hot vector")
        if self.class_counts is None:
            self.class_counts = self.recount()
        else:
            self.class_counts = np.asarray(self.class_counts, dtype=np.int64)

    def __len__(self):
        return len(self.samples)

    def recount(self) -> np.ndarray:
        if not self.samples:
            return np.zeros(self.num_classes, dtype=np.int64)
        return self.label_matrix().sum(axis=0).astype(np.int64)

    @property
    def ids(self) -> np.ndarray:
        return np.array([s.id for s in self.samples], dtype=np.int64)

    def label_matrix(self) -> np.ndarray:
        return np.stack([s.labels for s in self.samples]).astype(np.uint8)

    def stack(self, tier: str) -> np.ndarray:
        """All videos of one tier as an (N, T, h, w) array."""
        return np.stack([s.videos[tier].frames for s in self.samples])

    def subset(self, samples) -> "Dataset":
        return dataclasses.replace(self, samples=list(samples), class_counts=None)


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 10
    head_class_count: int = 200
    tail_ratio: float = 0.65
    secondary_label_prob: float = 0.3
    frames: int = 32
    height: int = 8
    width: int = 8
    downsample: int = 2
    noise_hr: float = 2.5
    noise_lr: float = 1.0
    noise_sr: float = 0.1
    sr_recovery: float = 0.8
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    num_groups: int = 3
    mirror_prob: float = 0.5
    seed: int = 0

    def validate(self):
        if self.num_classes < 1 or self.head_class_count < 1:
            raise ValueError("num_classes and head_class_count must be >= 1")
        if not 0.0 < self.tail_ratio < 1.0:
            raise ValueError("tail_ratio must lie in (0, 1)")
        for name in ("secondary_label_prob", "sr_recovery", "mirror_prob",
                     "train_fraction", "val_fraction", "test_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if abs(self.train_fraction + self.val_fraction + self.test_fraction - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if min(self.frames, self.height, self.width, self.downsample) < 1:
            raise ValueError("frames, height, width and downsample must be >= 1")
        if self.height % self.downsample or self.width % self.downsample:
            raise ValueError(f"downsample {self.downsample} must divide height {self.height} and width {self.width}")
        if min(self.noise_hr, self.noise_lr, self.noise_sr) < 0:
            raise ValueError("noise levels must be >= 0")
        if not 1 <= self.num_groups <= self.num_classes:
            raise ValueError("num_groups must lie in [1, num_classes]")

    @classmethod
    def from_file(cls, path) -> "DatasetSpec":
        """Read a flat key-value spec file; every field is required."""
        entries = read_kv(path)
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in entries:
                raise ConfigError(f"{path}: missing spec key {f.name!r}")
            value, lineno = entries.pop(f.name)
            kwargs[f.name] = _convert(value, f.type, path, lineno, f.name)
        if entries:
            key, (_, lineno) = next(iter(entries.items()))
            raise ConfigError(f"{path}:{lineno}: unknown spec key {key!r}")
        spec = cls(**kwargs)
        try:
            spec.validate()
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return spec

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in dataclasses.fields(self))


def _convert(value, type_name, path, lineno, key):
    conv = {"int": int, "float": float, "str": str}[str(type_name)]
    try:
        return conv(value)
    except ValueError:
        raise ConfigError(f"{path}:{lineno}: {key} expects {type_name}, got {value!r}") from None


def primary_counts(spec: DatasetSpec) -> np.ndarray:
    """round(N_max * r**c) for every class, with halves rounded up."""
    return np.array([math.floor(spec.head_class_count * spec.tail_ratio ** c + 0.5)
                     for c in range(spec.num_classes)], dtype=np.int64)


def split_counts(spec: DatasetSpec):
    """Per-class (train, val, test) sizes of the stratified split."""
    out = []
    for c, n in enumerate(primary_counts(spec)):
        n_val = math.floor(n * spec.val_fraction + 0.5)
        n_test = math.floor(n * spec.test_fraction + 0.5)
        n_train = int(n) - n_val - n_test
        if n_train < 1:
            raise ValueError(f"class {c} has {n} samples, leaving none for the training split")
        out.append((n_train, n_val, n_test))
    return out


def make_group_map(num_classes, num_groups) -> np.ndarray:
    # interleaved so every group mixes head and tail classes
    return np.arange(num_classes, dtype=np.int64) % num_groups


def _pool(x, d):
    t, h, w = x.shape[-3:]
    return x.reshape(*x.shape[:-3], t, h // d, d, w // d, d).mean(axis=(-3, -1))


def _upsample(x, d):
    return np.repeat(np.repeat(x, d, axis=-2), d, axis=-1)


def class_prototypes(spec: DatasetSpec) -> np.ndarray:
    """(C, T, H, W) prototypes; a deterministic function of (seed, class)."""
    T, H, W, d = spec.frames, spec.height, spec.width, spec.downsample
    groups = make_group_map(spec.num_classes, spec.num_groups)
    bases = []
    for g in range(spec.num_groups):
        rng = np.random.default_rng([spec.seed, _TAG_GROUP, g])
        bases.append(_upsample(rng.standard_normal((H // d, W // d)), d))
    t = np.arange(T, dtype=np.float64)
    protos = np.empty((spec.num_classes, T, H, W))
    for c in range(spec.num_classes):
        rng = np.random.default_rng([spec.seed, _TAG_PROTO, c])
        coarse = _upsample(rng.standard_normal((H // d, W // d)), d)
        detail = rng.standard_normal((H, W))
        if d > 1:
            detail = detail - _upsample(_pool(detail[None], d)[0], d)
            detail /= detail.std() + 1e-12
        centre = rng.uniform(0.1, 0.9) * (T - 1)
        width = max(ENVELOPE_WIDTH * T, 0.5)
        envelope = np.exp(-0.5 * ((t - centre) / width) ** 2)
        pattern = (GROUP_AMPLITUDE * bases[groups[c]] + CLASS_AMPLITUDE * coarse
                   + DETAIL_AMPLITUDE * detail)
        protos[c] = envelope[:, None, None] * pattern
    return protos


def _draw_sample(spec, protos, groups, sample_id, primary):
    rng = np.random.default_rng([spec.seed, _TAG_SAMPLE, sample_id])
    C, d = spec.num_classes, spec.downsample
    labels = np.zeros(C, dtype=np.uint8)
    labels[primary] = 1
    # fixed draw order and sizes keep every sample reproducible from its own seed
    add_secondary = rng.random() < spec.secondary_label_prob
    u = rng.random()
    mirror = rng.random(C) < spec.mirror_prob
    if add_secondary and C > 1:
        others = np.flatnonzero(groups != groups[primary]) if spec.num_groups > 1 else \
            np.flatnonzero(np.arange(C) != primary)
        labels[others[min(int(u * len(others)), len(others) - 1)]] = 1
    hr = np.zeros(protos.shape[1:])
    for c in np.flatnonzero(labels):
        hr += protos[c][:, :, ::-1] if mirror[c] else protos[c]
    hr += spec.noise_hr * rng.standard_normal(hr.shape)
    lr = _pool(hr, d) + spec.noise_lr * rng.standard_normal(
        (spec.frames, spec.height // d, spec.width // d))
    sr = (spec.sr_recovery * hr + (1.0 - spec.sr_recovery) * _upsample(lr, d)
          + spec.noise_sr * rng.standard_normal(hr.shape))
    videos = {"lr": VideoTensor(lr, "lr"), "sr": VideoTensor(sr, "sr"), "hr": VideoTensor(hr, "hr")}
    return LabeledSample(id=sample_id, labels=labels, videos=videos)


def generate_dataset(spec: DatasetSpec):
    """Return ``(train, val, test)`` datasets drawn from ``spec``.

    Sample ids run over classes in order; each sample is generated from its own
    seed derived from ``(spec.seed, id)``, so the output does not depend on the
    order in which samples are produced.
    """
    spec.validate()
    sizes = split_counts(spec)
    protos = class_prototypes(spec)
    groups = make_group_map(spec.num_classes, spec.num_groups)
    splits = ([], [], [])
    next_id = 0
    for c, per_split in enumerate(sizes):
        for split, n in zip(splits, per_split):
            for _ in range(n):
                split.append(_draw_sample(spec, protos, groups, next_id, c))
                next_id += 1
    common = dict(num_classes=spec.num_classes, group_map=groups, frames=spec.frames,
                  height=spec.height, width=spec.width, downsample=spec.downsample)
    return tuple(Dataset(samples=s, **common) for s in splits)


def uniform_sample_indices(num_frames: int, num_clips: int, rng=None, size=None) -> np.ndarray:
    """One frame per clip after cutting ``num_frames`` into ``num_clips`` equal clips.

    Clip c spans ``[floor(c*T/K), floor((c+1)*T/K))``. A random frame is taken
    from each nonempty clip; with ``rng=None`` the middle frame is taken instead
    (deterministic evaluation mode). Empty clips (T < K) repeat the clamped
    start frame. With ``size=n`` the result is an (n, K) matrix of independent
    draws, identical to n consecutive calls with the same generator.
    """
    if num_frames < 1 or num_clips < 1:
        raise ValueError("num_frames and num_clips must both be >= 1")
    c = np.arange(num_clips + 1, dtype=np.int64)
    edges = (c * num_frames) // num_clips
    start = edges[:-1]
    length = edges[1:] - start
    shape = (num_clips,) if size is None else (size, num_clips)
    if rng is None:
        offset = np.broadcast_to(length // 2, shape)
    else:
        # floor(u * len) is uniform on [0, len); the clamp guards float rounding at u -> 1
        u = rng.random(shape)
        offset = np.minimum((u * length).astype(np.int64), np.maximum(length - 1, 0))
    return np.minimum(start + offset, num_frames - 1)


def first_k_indices(num_frames: int, num_clips: int) -> np.ndarray:
    """The first K frames (clamped), i.e. sampling without uniform clip coverage."""
    if num_frames < 1 or num_clips < 1:
        raise ValueError("num_frames and num_clips must both be >= 1")
    return np.minimum(np.arange(num_clips), num_frames - 1)


def flip_horizontal(video: VideoTensor) -> VideoTensor:
    return VideoTensor(np.ascontiguousarray(video.frames[:, :, ::-1]), video.tier)


def tail_classes(class_counts, tail_quantile: float) -> np.ndarray:
    if not 0.0 <= tail_quantile <= 1.0:
        raise ValueError(f"tail_quantile must lie in [0, 1], got {tail_quantile}")
    counts = np.asarray(class_counts)
    return counts <= np.quantile(counts, tail_quantile)


def balance_dataset(train: Dataset, tail_quantile: float = 0.5) -> Dataset:
    """Append a horizontally flipped copy of every sample carrying a tail label."""
    if not len(train):
        raise ValueError("cannot balance an empty dataset")
    tail = tail_classes(train.class_counts, tail_quantile)
    next_id = int(train.ids.max()) + 1
    extra = []
    for s in train.samples:
        if np.any(tail & (s.labels > 0)):
            extra.append(LabeledSample(
                id=next_id, labels=s.labels.copy(),
                videos={k: flip_horizontal(v) for k, v in s.videos.items()},
                is_augmented=True))
            next_id += 1
    return train.subset(train.samples + extra)


# -- persistence -------------------------------------------------------------

def save_dataset(ds: Dataset, path):
    counts = ds.recount()
    header = (
        f"{DATASET_MAGIC} {DATASET_VERSION}\n"
        f"num_classes {ds.num_classes}\n"
        f"frames {ds.frames}\nheight {ds.height}\nwidth {ds.width}\n"
        f"downsample {ds.downsample}\n"
        f"num_samples {len(ds)}\n"
        f"counts {' '.join(str(int(c)) for c in counts)}\n"
        f"groups {' '.join(str(int(g)) for g in ds.group_map)}\n"
        f"tiers {' '.join(TIERS)}\n"
        "end\n"
    )
    parts = [header.encode("ascii")]
    for s in ds.samples:
        parts.append(np.int64(s.id).astype("<i8").tobytes())
        parts.append(np.uint8(s.is_augmented).tobytes())
        parts.append(s.labels.astype(np.uint8).tobytes())
        for tier in TIERS:
            parts.append(np.ascontiguousarray(s.videos[tier].frames, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    end = raw.find(b"end\n")
    if end < 0:
        raise ConfigError(f"{path}: missing header terminator")
    lines = raw[:end].decode("ascii").splitlines()
    magic, version = lines[0].split()
    if magic != DATASET_MAGIC or int(version) != DATASET_VERSION:
        raise ConfigError(f"{path}: not a version-{DATASET_VERSION} dataset file")
    head = {ln.split(" ", 1)[0]: ln.split(" ", 1)[1] if " " in ln else "" for ln in lines[1:]}
    C, T, H, W, d = (int(head[k]) for k in ("num_classes", "frames", "height", "width", "downsample"))
    n = int(head["num_samples"])
    counts = np.array(head["counts"].split(), dtype=np.int64)
    groups = np.array(head["groups"].split(), dtype=np.int64)
    shapes = {"lr": (T, H // d, W // d), "sr": (T, H, W), "hr": (T, H, W)}
    buf = memoryview(raw)[end + 4:]
    pos = 0
    samples = []
    for _ in range(n):
        sid = int(np.frombuffer(buf, "<i8", 1, pos)[0]); pos += 8
        aug = bool(buf[pos]); pos += 1
        labels = np.frombuffer(buf, np.uint8, C, pos).copy(); pos += C
        videos = {}
        for tier in head["tiers"].split():
            size = int(np.prod(shapes[tier]))
            arr = np.frombuffer(buf, "<f8", size, pos).reshape(shapes[tier]).astype(np.float64)
            pos += 8 * size
            videos[tier] = VideoTensor(arr, tier)
        samples.append(LabeledSample(sid, labels, videos, aug))
    if pos != len(buf):
        raise ConfigError(f"{path}: {len(buf) - pos} trailing bytes after {n} samples")
    ds = Dataset(samples, C, groups, T, H, W, d)
    if not np.array_equal(ds.class_counts, counts):
        raise ConfigError(f"{path}: stored class counts disagree with the samples")
    return ds


SPLITS = ("train", "val", "test")


def save_splits(datasets, directory):
    directory = Path(directory)
    for name, ds in zip(SPLITS, datasets):
        save_dataset(ds, directory / f"{name}.bin")


def load_splits(directory):
    directory = Path(directory)
    missing = [n for n in SPLITS if not (directory / f"{n}.bin").is_file()]
    if missing:
        raise ConfigError(f"{directory}: missing dataset split file(s) {', '.join(missing)}")
    return tuple(load_dataset(directory / f"{n}.bin") for n in SPLITS)
