"""Attention-similarity distillation loss, cross-entropy and their weighted sum."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
from torch import Tensor

from .attention import AttentionMaps
from .errors import AlignmentError, ConfigurationError, ValidationError

__all__ = [
    "LossBreakdown",
    "cosine_similarity",
    "kd_loss",
    "cross_entropy",
    "total_loss",
    "DEFAULT_LAMBDA_KD",
]

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_KD = 5.0
NORM_EPS = 1e-12


def _per_sample_similarity(t: Tensor, s: Tensor) -> tuple[Tensor, int]:
    t = t.reshape(t.shape[0], -1)
    s = s.reshape(s.shape[0], -1)
    dot = (t * s).sum(dim=1)
    tt = (t * t).sum(dim=1)
    ss = (s * s).sum(dim=1)
    degenerate = (tt.detach().sqrt() < NORM_EPS) | (ss.detach().sqrt() < NORM_EPS)
    # sqrt(tt * ss) rather than sqrt(tt) * sqrt(ss): for t == s this is exactly tt,
    # so identical maps give a similarity of exactly 1.
    denom = torch.where(degenerate, torch.ones_like(tt), tt * ss).sqrt()
    sim = torch.where(degenerate, torch.zeros_like(dot), dot / denom)
    return sim.clamp(-1.0, 1.0), int(degenerate.sum())


def cosine_similarity(teacher_map: Tensor, student_map: Tensor) -> Tensor:
    """Batch-mean cosine similarity of per-sample flattened maps.

    Samples where either map has L2 norm below 1e-12 contribute 0.
    """
    if teacher_map.shape != student_map.shape:
        raise AlignmentError(
            f"attention map shapes differ: {tuple(teacher_map.shape)} vs {tuple(student_map.shape)}"
        )
    sim, n_bad = _per_sample_similarity(teacher_map, student_map)
    if n_bad:
        log.warning("%d sample(s) with zero-norm attention map; similarity set to 0", n_bad)
    return sim.mean()


def kd_loss(
    teacher_maps: Sequence[AttentionMaps],
    student_maps: Sequence[AttentionMaps],
    weights: Optional[Sequence[float]] = None,
) -> tuple[Tensor, list[Tensor]]:
    """Mean over blocks of ((1 - sim_channel) + (1 - sim_spatial)) / 2.

    ``weights`` switches to a normalised weighted mean over blocks.
    """
    if len(teacher_maps) != len(student_maps):
        raise AlignmentError(
            f"teacher has {len(teacher_maps)} attention blocks, student has {len(student_maps)}"
        )
    if not teacher_maps:
        raise AlignmentError("no attention maps to distil")
    per_block = []
    n_bad = 0
    for i, (t, s) in enumerate(zip(teacher_maps, student_maps)):
        for kind, tm, sm in (("channel", t.channel, s.channel), ("spatial", t.spatial, s.spatial)):
            if tm.shape != sm.shape:
                raise AlignmentError(
                    f"block {i}: {kind} map shapes differ: "
                    f"{tuple(tm.shape)} vs {tuple(sm.shape)}"
                )
        sim_c, bad_c = _per_sample_similarity(t.channel, s.channel)
        sim_s, bad_s = _per_sample_similarity(t.spatial, s.spatial)
        n_bad += bad_c + bad_s
        per_block.append(((1 - sim_c.mean()) + (1 - sim_s.mean())) / 2)
    if n_bad:
        log.warning("%d zero-norm attention map(s) in this step; similarity set to 0", n_bad)
    stacked = torch.stack(per_block)
    if weights is None:
        return stacked.mean(), per_block
    w = torch.as_tensor(weights, dtype=stacked.dtype, device=stacked.device)
    if w.shape != stacked.shape or (w < 0).any() or w.sum() <= 0:
        raise ConfigurationError("block weights must be nonnegative, one per block, not all zero")
    return (w * stacked).sum() / w.sum(), per_block


def cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean negative log-likelihood of hard labels under softmax(logits)."""
    if logits.dim() != 2 or logits.shape[1] < 2:
        raise ValidationError(f"logits must be (N, C) with C >= 2, got {tuple(logits.shape)}")
    labels = torch.as_tensor(labels, device=logits.device).long()
    if labels.shape != (logits.shape[0],):
        raise ValidationError(f"expected {logits.shape[0]} labels, got shape {tuple(labels.shape)}")
    if ((labels < 0) | (labels >= logits.shape[1])).any():
        raise ValidationError(f"labels must lie in [0, {logits.shape[1]})")
    log_probs = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    return -log_probs.gather(1, labels[:, None]).mean()


@dataclass
class LossBreakdown:
    l_ce: Tensor
    l_kd: Tensor
    lambda_kd: float
    total: Tensor
    per_block_kd: list[Tensor] = field(default_factory=list)

    def as_record(self) -> dict:
        return {
            "l_ce": float(self.l_ce),
            "l_kd": float(self.l_kd),
            "lambda_kd": float(self.lambda_kd),
            "total": float(self.total),
            "per_block_kd": [float(v) for v in self.per_block_kd],
        }


def total_loss(
    l_ce: Tensor,
    l_kd: Tensor,
    lambda_kd: float = DEFAULT_LAMBDA_KD,
    per_block: Sequence[Tensor] = (),
) -> LossBreakdown:
    if lambda_kd < 0:
        raise ConfigurationError(f"lambda_kd must be nonnegative, got {lambda_kd}")
    l_ce = torch.as_tensor(l_ce)
    l_kd = torch.as_tensor(l_kd, dtype=l_ce.dtype)
    total = l_ce + lambda_kd * l_kd
    return LossBreakdown(l_ce, l_kd, float(lambda_kd), total, list(per_block))
