"""Caption, semantic and combined objectives."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .graph import criterion_score


def semantic_loss(alphas, s_h, s_r, s_t, W, gamma: float = 0.3, lam: float = 0.01, score_floor=None):
    """sum_g sum_t (alpha_gt - gamma) * softplus(-score_g) + lam * ||W||^2.

    ``alphas`` is (T, G) and is treated as a constant; the score flows into
    the semantic features and ``W``. With no triplets only the penalty remains.

    Triplets with alpha below gamma carry a negative weight, and softplus is
    unbounded as the score falls, so the loss has no minimum. ``score_floor``
    clamps scores from below: a punished triplet stops receiving gradient
    once it sits that far under the selection threshold.
    """
    reg = lam * W.pow(2).sum()
    if s_h.shape[0] == 0:
        return reg
    weights = (alphas.detach() - gamma).sum(0)
    score = criterion_score(s_h, s_r, s_t, W)
    if score_floor is not None:
        score = score.clamp(min=score_floor)
    return (weights * F.softplus(-score)).sum() + reg


def total_loss(caption_loss, sem_loss, beta: float):
    return caption_loss + beta * sem_loss
