"""Objective terms: supervised CE, entropy gate, soft consistency CE, total.

Probability and logit arrays carry classes on the last axis and may have
any number of leading batch axes. Entropy gating is done per image over the
last two (spatial) axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adacm import SoftTarget
from .raster import IGNORE, log_softmax, softmax

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class GateConfig:
    """Percentage of highest-entropy pixels dropped per image."""

    tau_percent: float = 20.0

    def __post_init__(self):
        if not 0.0 <= self.tau_percent <= 100.0:
            raise ValueError(f"tau_percent must be in [0, 100], got {self.tau_percent}")


@dataclass(frozen=True)
class LossReport:
    l_sup: float
    l_con: float
    l_total: float
    lambda_con: float
    retained_fraction: float


def pixel_entropy(probs):
    """Natural-log entropy per pixel with ``0 ln 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    plogp = np.where(p > 0, p * np.log(np.maximum(p, PROB_FLOOR)), 0.0)
    return -plogp.sum(axis=-1)


def num_dropped(n_pixels, tau_percent):
    # round() guards against 0.2 * N landing a hair above an integer
    return min(n_pixels, math.ceil(round(tau_percent * n_pixels / 100.0, 9)))


def gate(entropy, cfg):
    """Reliability mask: 0 for the ``tau``% highest-entropy pixels of each image.

    Ties are broken by flat pixel index, lower index dropped first.
    """
    if isinstance(cfg, (int, float)):
        cfg = GateConfig(float(cfg))
    ent = np.asarray(entropy, dtype=np.float64)
    if ent.ndim < 2 or ent.size == 0:
        raise ValueError("entropy map must be non-empty and at least 2-D")
    spatial = ent.shape[-2:]
    flat = ent.reshape(-1, spatial[0] * spatial[1])
    n = flat.shape[1]
    drop = num_dropped(n, cfg.tau_percent)
    keep = np.ones_like(flat, dtype=bool)
    idx = np.arange(n)
    for row, values in enumerate(flat):
        order = np.lexsort((idx, -values))
        keep[row, order[:drop]] = False
    return keep.reshape(ent.shape)


def supervised_loss(logits, labels):
    """Mean of ``-ln p_true`` over non-ignore pixels."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    valid = labels != IGNORE
    if not valid.any():
        raise ValueError("every pixel is ignored; supervised loss undefined")
    logp = log_softmax(logits)
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    return float(-picked[valid].sum() / valid.sum())


def _effective_gate(target, reliability):
    gate_ = np.asarray(reliability, dtype=bool)
    if isinstance(target, SoftTarget):
        gate_ = (gate_ | target.override) & ~target.ignore
    return gate_


def _target_probs(target):
    return target.probs if isinstance(target, SoftTarget) else np.asarray(target)


def consistency_loss(strong_logits, target, reliability):
    """Soft cross-entropy of the strong prediction against a constant target.

    Returns ``(loss, retained_fraction)``. The mean runs over all pixels;
    gated-out pixels contribute zero. Pasted ground-truth pixels (override
    flags) always pass the gate.
    """
    z = np.asarray(strong_logits, dtype=np.float64)
    t = np.asarray(_target_probs(target), dtype=np.float64)
    g = _effective_gate(target, reliability)
    if z.shape != t.shape or z.shape[:-1] != g.shape:
        raise ValueError(f"shape mismatch: logits {z.shape}, target {t.shape}, gate {g.shape}")
    logp = np.maximum(log_softmax(z), math.log(PROB_FLOOR))
    per_pixel = -(t * logp).sum(axis=-1)
    n = g.size
    loss = float(np.where(g, per_pixel, 0.0).sum() / n)
    return loss, float(g.sum() / n)


def total_loss(l_sup, l_con, lambda_con=1.0, retained_fraction=1.0):
    if not all(math.isfinite(v) for v in (l_sup, l_con, lambda_con)):
        raise ValueError(f"non-finite loss terms: {l_sup}, {l_con}, {lambda_con}")
    return LossReport(l_sup, l_con, l_sup + lambda_con * l_con, lambda_con, retained_fraction)


def loss_gradients(logits, target, reliability=None):
    """Gradient of a loss term with respect to the logits.

    Integer ``target`` selects the supervised loss (ignore pixels excluded,
    normalized by the valid count); a probability array or
    :class:`SoftTarget` selects the consistency loss, normalized by the
    total pixel count and masked by ``reliability``. Per pixel the gradient
    is ``(softmax(z) - t) * gate / N``.
    """
    z = np.asarray(logits, dtype=np.float64)
    p = softmax(z)
    if not isinstance(target, SoftTarget) and np.issubdtype(np.asarray(target).dtype, np.integer):
        labels = np.asarray(target)
        valid = labels != IGNORE
        n = valid.sum()
        if n == 0:
            raise ValueError("every pixel is ignored; supervised loss undefined")
        onehot = np.zeros_like(p)
        safe = np.where(valid, labels, 0).astype(np.int64)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        return (p - onehot) * valid[..., None] / n
    t = np.asarray(_target_probs(target), dtype=np.float64)
    if reliability is None:
        reliability = np.ones(z.shape[:-1], dtype=bool)
    g = _effective_gate(target, reliability)
    # general soft-target form: d/dz of -sum t log softmax(z) = p * sum(t) - t
    grad = p * t.sum(axis=-1, keepdims=True) - t
    return grad * g[..., None] / g.size
