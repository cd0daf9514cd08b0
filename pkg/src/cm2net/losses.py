"""Training objectives: cosine-similarity classification, the symmetric
batch contrastive loss, the feature-level prompt loss, and their weighted
combination.

Both argument sets of the contrastive loss are L2-normalized before the
dot products, so the logits are cosines scaled by 1/tau and stay on a
bounded scale at the default temperature of 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class LossWeights:
    """Weights of the combined objective.

    lam blends classification against text-contrastive; eps scales the
    prompt loss; omega weights the per-source prompt terms; tau is the
    contrastive temperature and tau_cls the classification temperature.
    """

    lam: float = 0.5
    eps: float = 0.5
    omega: list = field(default_factory=list)
    tau: float = 1.0
    tau_cls: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0,1], got {self.lam}")
        if self.eps < 0.0:
            raise ValueError(f"epsilon must be >= 0, got {self.eps}")
        if self.tau <= 0.0 or self.tau_cls <= 0.0:
            raise ValueError("temperatures must be positive")
        if any(w < 0.0 for w in self.omega):
            raise ValueError("all omega weights must be >= 0")

    @staticmethod
    def uniform_omega(num_sources):
        return [1.0 / num_sources] * num_sources if num_sources else []


def similarity_scores(v: Tensor, class_embeds: Tensor) -> Tensor:
    """Cosine similarity of each sample embedding against each class embedding."""
    if v.ndim != 2 or class_embeds.ndim != 2 or v.shape[1] != class_embeds.shape[1]:
        raise T.ShapeError(
            f"similarity_scores dims incompatible: {v.shape} vs {class_embeds.shape}")
    vn = T.l2_normalize(v)
    cn = T.l2_normalize(class_embeds)
    return T.matmul(vn, T.transpose(cn))


def cls_loss(scores: Tensor, targets, tau: float = 1.0) -> Tensor:
    """Cross-entropy over softmax(scores / tau), averaged over the batch."""
    targets = np.asarray(targets, dtype=np.int64)
    if scores.ndim != 2 or targets.shape != (scores.shape[0],):
        raise T.ShapeError("cls_loss expects scores[BxC] and B targets")
    if targets.min() < 0 or targets.max() >= scores.shape[1]:
        raise T.DomainError("cls_loss target out of range")
    logp = T.log_softmax_rows(T.scale(scores, 1.0 / tau))
    picked = T.take_per_row(logp, targets)
    return T.scale(T.tmean(picked), -1.0)


def cl_logits(a: Tensor, b: Tensor, tau: float) -> Tensor:
    """Pairwise cosine logits of the contrastive loss: cos(a_i, b_k) / tau."""
    if a.ndim != 2 or a.shape != b.shape:
        raise T.ShapeError(f"contrastive args must be equal BxD, got "
                           f"{a.shape} vs {b.shape}")
    an = T.l2_normalize(a)
    bn = T.l2_normalize(b)
    return T.scale(T.matmul(an, T.transpose(bn)), 1.0 / tau)


def cl_loss(a: Tensor, b: Tensor, tau: float = 1.0) -> Tensor:
    """Symmetric InfoNCE over row-aligned pairs: L_{a->b} + L_{b->a}.

    Each direction sums -log softmax of the matched pair's logit over the
    batch; rows of a and b are L2-normalized first.
    """
    batch = a.shape[0] if a.ndim == 2 else 0
    if batch < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    logits = cl_logits(a, b, tau)
    diag = np.arange(batch)
    l_ab = T.scale(T.tsum(T.take_per_row(T.log_softmax_rows(logits), diag)), -1.0)
    l_ba = T.scale(T.tsum(T.take_per_row(
        T.log_softmax_rows(T.transpose(logits)), diag)), -1.0)
    return T.add(l_ab, l_ba)


def text_loss(w: Tensor, v_m: Tensor, tau: float = 1.0) -> Tensor:
    """Label-text contrastive loss: CL(w, v_m)."""
    return cl_loss(w, v_m, tau)


def prompt_loss(mapped, f_m: Tensor, omega, tau: float = 1.0) -> Tensor:
    """Weighted sum of contrastive losses between mapped source features
    and the new modality's features. Zero when there are no sources."""
    if len(mapped) != len(omega):
        raise ValueError(f"got {len(mapped)} mapped feature sets but "
                         f"{len(omega)} omega weights")
    if not mapped:
        return Tensor(0.0)
    total = None
    for m_i, w_i in zip(mapped, omega):
        term = T.scale(cl_loss(m_i, f_m, tau), float(w_i))
        total = term if total is None else T.add(total, term)
    return total


def total_loss(l_cls: Tensor, l_text: Tensor, l_prompt: Tensor,
               weights: LossWeights) -> Tensor:
    """(1 - lambda) * L_cls + lambda * L_text + epsilon * L_prompt."""
    out = T.add(T.scale(l_cls, 1.0 - weights.lam),
                T.scale(l_text, weights.lam))
    return T.add(out, T.scale(l_prompt, weights.eps))
