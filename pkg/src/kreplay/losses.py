"""Caption, knowledge-prediction and distillation losses.

All functions take torch tensors and stay differentiable with respect to the
student logits. Single-sample functions operate on ``(L, V)`` logit matrices;
batch reduction is the caller's job (see :func:`kreplay.train.train_step`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
from torch.nn import functional as F

from .text import PAD


@dataclass(frozen=True)
class LossWeights:
    lambda_k: float = 1.0
    lambda_d: float = 1.0

    def __post_init__(self):
        for name in ("lambda_k", "lambda_d"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBundle:
    l_ce: float = 0.0
    l_cov: float = 0.0
    l_rep: float = 0.0
    l_kpred: float = 0.0
    l_distill: float = 0.0
    l_total: float = 0.0
    n_caption: int = 0
    n_replay: int = 0

    CSV_FIELDS = ("l_ce", "l_cov", "l_rep", "l_kpred", "l_distill", "l_total")

    def check(self, weights: LossWeights, rtol: float = 1e-12) -> None:
        expect_total = self.l_ce + weights.lambda_k * self.l_kpred + weights.lambda_d * self.l_distill
        for got, want, what in (
            (self.l_kpred, self.l_cov + self.l_rep, "l_kpred"),
            (self.l_total, expect_total, "l_total"),
        ):
            if abs(got - want) > rtol * max(1.0, abs(want)):
                raise AssertionError(f"{what}={got} inconsistent with components ({want})")

    def values(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def caption_ce(logits: torch.Tensor, target, epsilon: float = 0.1, pad_id: int | None = PAD) -> torch.Tensor:
    """Label-smoothed NLL averaged over the predicted (non-PAD) positions.

    Row r of ``logits`` predicts ``target[r + 1]``. The smoothing mass is spread
    uniformly over every entry except ``pad_id``; pass ``pad_id=None`` to spread
    it over the whole vocabulary.
    """
    target = torch.as_tensor(target, dtype=torch.long)
    if logits.dim() != 2 or logits.shape[0] != target.shape[0] - 1:
        raise ValueError(f"logits rows {tuple(logits.shape)} do not match target length {target.shape[0]}")
    if not 0 <= epsilon < 1:
        raise ValueError("epsilon must be in [0, 1)")
    logp = logits.log_softmax(-1)
    gold = target[1:]
    nll = -logp.gather(1, gold[:, None])[:, 0]
    if pad_id is None:
        smooth = -logp.sum(-1) / logp.shape[1]
    else:
        keep = torch.ones(logp.shape[1], dtype=torch.bool)
        keep[pad_id] = False
        smooth = -logp[:, keep].sum(-1) / int(keep.sum())
    per_pos = (1 - epsilon) * nll + epsilon * smooth
    if pad_id is not None:
        mask = gold != pad_id
        return per_pos[mask].mean() if mask.any() else per_pos.sum() * 0
    return per_pos.mean()


def keyword_probability(logits: torch.Tensor, subword_id: int) -> torch.Tensor:
    """Largest probability any position assigns to ``subword_id``."""
    return logits.softmax(-1)[:, subword_id].max()


def coverage_loss(probs) -> torch.Tensor:
    """-sum log sigmoid(p), with the sigmoid applied to the probability itself."""
    p = torch.as_tensor(probs, dtype=torch.float64) if not torch.is_tensor(probs) else probs
    return F.softplus(-p).sum()


def repetition_penalty(probs) -> torch.Tensor:
    p = torch.as_tensor(probs, dtype=torch.float64) if not torch.is_tensor(probs) else probs
    return ((1 - p) ** 2).sum()


def kpred_loss(probs) -> torch.Tensor:
    return coverage_loss(probs) + repetition_penalty(probs)


def keyword_probs(logits: torch.Tensor, subword_ids) -> torch.Tensor:
    if len(subword_ids) == 0:
        return logits.new_zeros(0)
    return torch.stack([keyword_probability(logits, int(i)) for i in subword_ids])


def distill_loss(z_teacher: torch.Tensor, z_student: torch.Tensor, temperature: float = 16.0) -> torch.Tensor:
    """Mean over positions of KL(softmax(z_t/T) || softmax(z_s/T)); no T^2 factor."""
    if z_teacher.shape != z_student.shape:
        raise ValueError(f"shape mismatch {tuple(z_teacher.shape)} vs {tuple(z_student.shape)}")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    log_t = (z_teacher / temperature).log_softmax(-1)
    log_s = (z_student / temperature).log_softmax(-1)
    return (log_t.exp() * (log_t - log_s)).sum(-1).mean()


def total_loss(l_ce, l_kpred, l_distill, weights: LossWeights):
    return l_ce + weights.lambda_k * l_kpred + weights.lambda_d * l_distill
