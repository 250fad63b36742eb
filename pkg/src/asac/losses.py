"""Task, reconstruction, and quantization losses.

Reconstruction error is a single global mean over every element of
every (scores, reconstruction) pair, so layers and heads all weigh
equally.  Probabilities inside the log terms are clamped at 1e-12 to
keep the losses finite at confident mistakes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError

PROB_FLOOR = 1e-12


def recon_loss(pairs) -> T.Tensor:
    """Global mean squared error over all (scores, recon) pairs.

    ``pairs`` is a sequence of (Tensor, Tensor) with matching shapes.
    """
    if not pairs:
        return T.constant(0.0)
    total = None
    count = 0
    for scores, recon in pairs:
        diff = scores - recon
        sq = (diff * diff).sum()
        total = sq if total is None else total + sq
        count += scores.size
    return total * (1.0 / count)


def ce_multiclass(logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    """Mean cross-entropy; labels are integer class ids."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or len(labels) != logits.shape[0]:
        raise ContractError(f"logits {logits.shape} vs labels {labels.shape}")
    probs = T.clip(T.softmax_lastdim(logits), PROB_FLOOR, 1.0)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = (probs * T.constant(onehot)).sum(axis=1)
    return -T.log(picked).mean()


def bce_binary(logits: T.Tensor, targets: np.ndarray) -> T.Tensor:
    """Mean binary cross-entropy over every logit.

    Works for a single-logit head ([B] or [B, 1]) and for multilabel
    heads ([B, L]); the mean runs over all entries either way.
    """
    targets = np.asarray(targets, dtype=np.float64)
    flat_logits = T.reshape(logits, (-1,))
    flat_targets = targets.reshape(-1)
    if flat_logits.shape[0] != flat_targets.shape[0]:
        raise ContractError(f"logits {logits.shape} vs targets {targets.shape}")
    p = T.clip(T.sigmoid(flat_logits), PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = T.constant(flat_targets)
    terms = y * T.log(p) + (1.0 - y) * T.log(1.0 - p)
    return -terms.mean()


@dataclass
class LossBreakdown:
    task: T.Tensor
    recon: T.Tensor
    vq: T.Tensor
    total: T.Tensor

    def values(self) -> dict:
        return {"task_loss": self.task.item(), "recon_loss": self.recon.item(),
                "vq_loss": self.vq.item(), "total_loss": self.total.item()}

    def first_nonfinite(self) -> str | None:
        for name, value in self.values().items():
            if not np.isfinite(value):
                return name
        return None


def total_loss(task: T.Tensor, recon: T.Tensor, vq: T.Tensor,
               lam: float) -> LossBreakdown:
    """task + lam * (recon + vq), kept differentiable end to end."""
    total = task + (recon + vq) * lam
    return LossBreakdown(task=task, recon=recon, vq=vq, total=total)
