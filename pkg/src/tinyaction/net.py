"""Residual MLP classifier with hand-written forward and backward passes.

Layout: input projection D -> H, then ``blocks`` residual blocks
``h + keep * (relu(h W1 + b1) * dropout_mask) W2 + b2``, then a linear head
H -> C. ``keep`` is the per-sample drop-path factor (0 or 1/(1 - rate)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._io import ConfigError, atomic_write_bytes, fmt_float

CKPT_MAGIC = "TINYACTION-CKPT"
CKPT_VERSION = 1


@dataclass
class MlpModel:
    input_dim: int
    hidden: int
    blocks: int
    num_classes: int
    dropout: float = 0.0
    drop_path: float = 0.0
    params: dict = field(default_factory=dict)

    def param_shapes(self):
        D, H, C = self.input_dim, self.hidden, self.num_classes
        shapes = {"in.W": (D, H), "in.b": (H,)}
        for i in range(self.blocks):
            shapes[f"block{i}.W1"] = (H, H)
            shapes[f"block{i}.b1"] = (H,)
            shapes[f"block{i}.W2"] = (H, H)
            shapes[f"block{i}.b2"] = (H,)
        shapes["head.W"] = (H, C)
        shapes["head.b"] = (C,)
        return shapes

    def copy(self) -> "MlpModel":
        return MlpModel(self.input_dim, self.hidden, self.blocks, self.num_classes,
                        self.dropout, self.drop_path, {k: v.copy() for k, v in self.params.items()})


def is_bias(name: str) -> bool:
    return name.rsplit(".", 1)[-1].startswith("b")


def init_model(input_dim, hidden, blocks, num_classes, dropout=0.0, drop_path=0.0, seed=0) -> MlpModel:
    if min(input_dim, hidden, num_classes) < 1 or blocks < 0:
        raise ValueError("model dimensions must be >= 1 (blocks >= 0)")
    for name, rate in (("dropout", dropout), ("drop_path", drop_path)):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"{name} rate must lie in [0, 1), got {rate}")
    model = MlpModel(input_dim, hidden, blocks, num_classes, float(dropout), float(drop_path))
    rng = np.random.default_rng(seed)
    for name, shape in model.param_shapes().items():
        if is_bias(name):
            model.params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(3.0 / shape[0])
            model.params[name] = rng.uniform(-bound, bound, size=shape)
    return model


@dataclass
class ForwardCache:
    x: np.ndarray
    hidden_in: list  # residual stream entering each block, then the head input
    pre_act: list  # h W1 + b1 per block
    drop_mask: list  # scaled dropout mask per block (None in eval)
    keep: list  # (N, 1) scaled drop-path factor per block (None in eval)
    param_shapes: dict


def forward(model: MlpModel, x, mode="eval", rng=None):
    """Return ``(logits, cache)`` for an (N, D) batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"expected batch of shape (N, {model.input_dim}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in input batch")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    if train and rng is None and (model.dropout > 0 or model.drop_path > 0):
        raise ValueError("train mode with nonzero dropout/drop-path needs an rng")
    p = model.params
    n = x.shape[0]
    h = x @ p["in.W"] + p["in.b"]
    cache = ForwardCache(x, [], [], [], [], model.param_shapes())
    for i in range(model.blocks):
        cache.hidden_in.append(h)
        a = h @ p[f"block{i}.W1"] + p[f"block{i}.b1"]
        r = np.maximum(a, 0.0)
        mask = keep = None
        if train and model.dropout > 0:
            mask = (rng.random(a.shape) >= model.dropout) / (1.0 - model.dropout)
            r = r * mask
        u = r @ p[f"block{i}.W2"] + p[f"block{i}.b2"]
        if train and model.drop_path > 0:
            keep = (rng.random((n, 1)) >= model.drop_path) / (1.0 - model.drop_path)
            u = u * keep
        h = h + u
        cache.pre_act.append(a)
        cache.drop_mask.append(mask)
        cache.keep.append(keep)
    cache.hidden_in.append(h)
    logits = h @ p["head.W"] + p["head.b"]
    return logits, cache


def backward(model: MlpModel, cache: ForwardCache, grad_logits) -> dict:
    """Gradients of ``sum(logits * grad_logits)`` w.r.t. every parameter."""
    if cache.param_shapes != model.param_shapes():
        raise ValueError("cache was produced by a model with different shapes")
    p = model.params
    g = np.asarray(grad_logits, dtype=np.float64)
    n = cache.x.shape[0]
    if g.shape != (n, model.num_classes):
        raise ValueError(f"grad_logits must have shape {(n, model.num_classes)}, got {g.shape}")
    grads = {}
    h = cache.hidden_in[-1]
    grads["head.W"] = h.T @ g
    grads["head.b"] = g.sum(axis=0)
    dh = g @ p["head.W"].T
    for i in reversed(range(model.blocks)):
        h_in, a = cache.hidden_in[i], cache.pre_act[i]
        mask, keep = cache.drop_mask[i], cache.keep[i]
        du = dh if keep is None else dh * keep
        r = np.maximum(a, 0.0)
        if mask is not None:
            r = r * mask
        grads[f"block{i}.W2"] = r.T @ du
        grads[f"block{i}.b2"] = du.sum(axis=0)
        dr = du @ p[f"block{i}.W2"].T
        if mask is not None:
            dr = dr * mask
        da = dr * (a > 0)
        grads[f"block{i}.W1"] = h_in.T @ da
        grads[f"block{i}.b1"] = da.sum(axis=0)
        dh = dh + da @ p[f"block{i}.W1"].T
    grads["in.W"] = cache.x.T @ dh
    grads["in.b"] = dh.sum(axis=0)
    return {k: grads[k] for k in p}


def predict_probs(logits) -> np.ndarray:
    """Elementwise sigmoid without overflow for large |logit|."""
    x = np.asarray(logits, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, model: MlpModel, *, seed=0, epoch=0, optimizer=None):
    """Write a checkpoint; ``optimizer`` is an optional :class:`~tinyaction.optim.AdamWState`."""
    lines = [
        f"{CKPT_MAGIC} {CKPT_VERSION}",
        f"input_dim {model.input_dim}",
        f"hidden {model.hidden}",
        f"blocks {model.blocks}",
        f"num_classes {model.num_classes}",
        f"dropout {fmt_float(model.dropout)}",
        f"drop_path {fmt_float(model.drop_path)}",
        f"seed {seed}",
        f"epoch {epoch}",
    ]
    blocks = [model.params[k] for k in model.params]
    if optimizer is not None:
        lines += [
            f"optimizer adamw",
            f"step {optimizer.step}",
            f"beta1 {fmt_float(optimizer.beta1)}",
            f"beta2 {fmt_float(optimizer.beta2)}",
            f"eps {fmt_float(optimizer.eps)}",
            f"weight_decay {fmt_float(optimizer.weight_decay)}",
        ]
        blocks += [optimizer.m[k] for k in model.params] + [optimizer.v[k] for k in model.params]
    lines.append("end")
    payload = "\n".join(lines).encode("ascii") + b"\n"
    payload += b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes() for b in blocks)
    atomic_write_bytes(path, payload)


def load_checkpoint(path):
    """Return ``(model, meta, optimizer_state_or_None)``."""
    from .optim import AdamWState

    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\nend\n")
    if end < 0:
        raise ConfigError(f"{path}: missing checkpoint header terminator")
    lines = raw[:end].decode("ascii").splitlines()
    magic, version = lines[0].split()
    if magic != CKPT_MAGIC or int(version) != CKPT_VERSION:
        raise ConfigError(f"{path}: not a version-{CKPT_VERSION} checkpoint")
    head = dict(ln.split(" ", 1) for ln in lines[1:])
    model = MlpModel(int(head["input_dim"]), int(head["hidden"]), int(head["blocks"]),
                     int(head["num_classes"]), float(head["dropout"]), float(head["drop_path"]))
    buf = memoryview(raw)[end + 5:]
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        arr = np.frombuffer(buf, "<f8", size, pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        return arr

    shapes = model.param_shapes()
    for k, shape in shapes.items():
        model.params[k] = take(shape)
    opt = None
    if head.get("optimizer") == "adamw":
        opt = AdamWState(
            m={k: take(s) for k, s in shapes.items()},
            v={k: take(s) for k, s in shapes.items()},
            step=int(head["step"]), beta1=float(head["beta1"]), beta2=float(head["beta2"]),
            eps=float(head["eps"]), weight_decay=float(head["weight_decay"]))
    if pos != len(buf):
        raise ConfigError(f"{path}: {len(buf) - pos} unexpected trailing bytes")
    meta = {"seed": int(head["seed"]), "epoch": int(head["epoch"])}
    return model, meta, opt
