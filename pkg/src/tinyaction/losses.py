"""Training objectives with analytic gradients.

All losses return a :class:`LossValue` whose ``grad`` is taken w.r.t. the
first argument (logits for everything except :func:`kd_loss`, which works on
probabilities).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .net import predict_probs


class LossValue(NamedTuple):
    value: float
    grad: np.ndarray


def _log_sigmoid(x):
    # log(sigmoid(x)) = -softplus(-x), stable for large |x|
    return -(np.maximum(-x, 0.0) + np.log1p(np.exp(-np.abs(x))))


def _check_pair(a, b, names):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{names[0]} shape {a.shape} != {names[1]} shape {b.shape}")
    return a, b


def bce_loss(logits, labels) -> LossValue:
    """Mean binary cross-entropy over all N*C entries, in logit form."""
    x, y = _check_pair(logits, labels, ("logits", "labels"))
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    return LossValue(float(per.mean()), (predict_probs(x) - y) / x.size)


def kd_loss(probs, knowledge) -> LossValue:
    """Squared error between student and teacher scores, mean over classes then samples."""
    p, k = _check_pair(probs, knowledge, ("probs", "knowledge"))
    diff = p - k
    return LossValue(float((diff ** 2).mean(axis=-1).mean()), 2.0 * diff / p.size)


def total_loss(logits, labels, knowledge, alpha: float) -> LossValue:
    """``alpha * bce + (1 - alpha) * kd`` with the kd gradient chained through the sigmoid."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    x = np.asarray(logits, dtype=np.float64)
    bce = bce_loss(x, labels)
    p = predict_probs(x)
    kd = kd_loss(p, knowledge)
    value = alpha * bce.value + (1.0 - alpha) * kd.value
    grad = alpha * bce.grad + (1.0 - alpha) * (kd.grad * p * (1.0 - p))
    return LossValue(float(value), grad)


def asl_loss(logits, labels, gamma_pos=0.0, gamma_neg=4.0, margin=0.05) -> LossValue:
    """Asymmetric loss: focal weighting with separate exponents plus a shifted negative probability.

    Gradients flow through both the focusing factor and the log term.
    """
    if gamma_pos < 0 or gamma_neg < 0:
        raise ValueError("focusing exponents must be >= 0")
    if not 0.0 <= margin < 1.0:
        raise ValueError(f"margin must lie in [0, 1), got {margin}")
    x, y = _check_pair(logits, labels, ("logits", "labels"))
    p = predict_probs(x)
    q = predict_probs(-x)  # 1 - p without cancellation
    n = x.size

    log_p = _log_sigmoid(x)
    focus_pos = q ** gamma_pos
    loss_pos = -focus_pos * log_p
    # d/dx of -(1-p)^g log p = g p (1-p)^g log p - (1-p)^(g+1)
    grad_pos = gamma_pos * p * focus_pos * log_p - focus_pos * q

    if margin == 0.0:
        p_m = p
        log_1m = _log_sigmoid(-x)
        one_m = q
    else:
        p_m = np.maximum(p - margin, 0.0)
        one_m = 1.0 - p_m
        log_1m = np.log(one_m)
    active = p_m > 0
    focus_neg = np.where(active, p_m, 0.0) ** gamma_neg if gamma_neg > 0 else np.ones_like(p)
    loss_neg = np.where(active, -focus_neg * log_1m, 0.0)
    # d/dp_m of -p_m^g log(1-p_m), then dp/dx = p(1-p)
    if gamma_neg > 0:
        dfocus = gamma_neg * np.where(active, p_m, 1.0) ** (gamma_neg - 1.0)
        dneg = -dfocus * log_1m + focus_neg / one_m
    else:
        dneg = 1.0 / one_m
    grad_neg = np.where(active, dneg * p * q, 0.0)

    per = y * loss_pos + (1.0 - y) * loss_neg
    grad = y * grad_pos + (1.0 - y) * grad_neg
    return LossValue(float(per.mean()), grad / n)
