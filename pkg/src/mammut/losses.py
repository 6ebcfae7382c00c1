"""Pretraining objectives: softmax contrastive, captioning with teacher
forcing, the sigmoid focal contrastive variant, and their weighted sum.

All losses are pure functions of tensors plus the learnable temperature,
so they are thread-safe and compose onto one tape for a single backward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import TokenBatch
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    caption: float = 1.0
    focal: float = 1.0
    gamma: float = 2.0

    def __post_init__(self):
        if self.caption < 0 or self.focal < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.caption == 0 and self.focal == 0:
            raise ValueError("at least one loss weight must be positive")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


class Temperature:
    """Learnable tau > 0 stored as log(tau); init gives tau == 1.0."""

    def __init__(self, init: float = 1.0):
        self.log_tau = Tensor(np.log(init), requires_grad=True)

    def tensor(self) -> Tensor:
        return T.exp(self.log_tau)

    def value(self) -> float:
        return float(np.exp(self.log_tau.data))


def _scaled_similarities(v: Tensor, l: Tensor, tau: Tensor) -> Tensor:
    if v.shape[0] == 0:
        raise ValueError("contrastive loss needs a nonempty batch")
    if v.shape != l.shape:
        raise T.ShapeError(f"embedding shapes differ: {v.shape} vs {l.shape}")
    sims = T.matmul(v, T.transpose(l, (1, 0)))
    return T.mul(sims, T.power(tau, -1.0))


def contrastive_loss(v: Tensor, l: Tensor, tau: Tensor) -> Tensor:
    """Softmax B-way contrastive objective, image-to-text + text-to-image.

    Each direction averages -log softmax of the matching pair over the
    batch; image-to-text normalizes over texts for a fixed image, and
    text-to-image over images for a fixed text.
    """
    s = _scaled_similarities(v, l, tau)
    B = s.shape[0]
    diag = np.arange(B)
    i2t = T.scale(T.mean(T.gather_last(T.log_softmax(s), diag)), -1.0)
    t2i = T.scale(T.mean(T.gather_last(T.log_softmax(T.transpose(s, (1, 0))), diag)), -1.0)
    return T.add(i2t, t2i)


def captioning_loss(logits: Tensor, targets: TokenBatch) -> Tensor:
    """Teacher-forced autoregressive NLL: position t predicts token t+1,
    summed over valid steps per example, averaged over the batch.

    Rows with no valid target (nothing after bos) are excluded from the
    mean; a batch with no scorable row is an error.
    """
    Tm1 = targets.length - 1
    tgt_ids = targets.ids[:, 1:]
    tgt_valid = targets.valid[:, 1:]
    counts = tgt_valid.sum(axis=1)
    scorable = counts > 0
    n = int(scorable.sum())
    if n == 0:
        raise ValueError("captioning loss: batch contains only padding")
    logp = T.gather_last(T.log_softmax(T.narrow(logits, 1, 0, Tm1)), tgt_ids)
    w = (tgt_valid & scorable[:, None]).astype(logp.data.dtype) / n
    return T.scale(T.sum_(T.mul(logp, Tensor(w))), -1.0)


def focal_contrastive_loss(v: Tensor, l: Tensor, tau: Tensor,
                           gamma: float) -> Tensor:
    """Pairwise sigmoid focal objective over all B x B pairs, both directions.

    p is sigmoid(similarity/tau) on the diagonal and its complement off it;
    each direction contributes -(1/B) * sum (1-p)^gamma log p. The two
    directions coincide in value for this symmetric form but are both
    computed, mirroring the softmax variant's sum.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    s = _scaled_similarities(v, l, tau)
    B = s.shape[0]
    sign = (2.0 * np.eye(B) - 1.0)  # +s on matching pairs, -s on mismatches
    i2t = T.sum_(T.focal_binary_term(T.mul(s, Tensor(sign)), gamma))
    t2i = T.sum_(T.focal_binary_term(T.mul(T.transpose(s, (1, 0)), Tensor(sign)),
                                     gamma))
    return T.scale(T.add(i2t, t2i), 1.0 / B)


def total_loss(caption_term: Tensor, contrastive_term: Tensor,
               weights: LossWeights) -> Tensor:
    """Weighted sum; a zero weight blocks gradients into that branch."""
    return T.add(T.scale(caption_term, weights.caption),
                 T.scale(contrastive_term, weights.focal))
