"""Knowledge transfer from ID preferences to modal interaction patterns.

The stage-1 recommender's user/item embeddings define a per-batch target
distribution over in-batch items (gradient-barriered). Modal embeddings,
linearly mapped into the ID space, define matching predicted distributions;
a KL term pulls each modality's distribution toward the target.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError

# guard for log(0) rows in the detached target
LOG_FLOOR = -30.0


def target_distribution(user_emb: torch.Tensor, item_emb: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax of user/item affinities, detached from autograd.

    Row u holds user u's preference over the batch's items; the batch must
    contain at least two items so every row has an in-batch negative.
    """
    if user_emb.dim() != 2 or user_emb.shape != item_emb.shape:
        raise ConfigError(
            f"paired embedding matrices must match, got {tuple(user_emb.shape)} "
            f"vs {tuple(item_emb.shape)}"
        )
    if user_emb.shape[0] < 2:
        raise DataError("no in-batch negatives: batch must hold at least 2 items")
    return (user_emb @ item_emb.t()).softmax(dim=1).detach()


def modal_distribution(user_emb: torch.Tensor, modal_emb: torch.Tensor,
                       linear: nn.Linear) -> torch.Tensor:
    """Row-wise log-softmax of user affinities to linearly-mapped modal rows."""
    if modal_emb.shape[-1] != linear.in_features:
        raise ConfigError(
            f"modal width {modal_emb.shape[-1]} does not match map input {linear.in_features}"
        )
    if linear.out_features != user_emb.shape[-1]:
        raise ConfigError(
            f"map output {linear.out_features} does not match user width {user_emb.shape[-1]}"
        )
    return F.log_softmax(user_emb @ linear(modal_emb).t(), dim=1)


def kt_loss(probs_id: torch.Tensor, log_prob_t: torch.Tensor,
            log_prob_v: torch.Tensor) -> torch.Tensor:
    """Mean over rows of KL(target || text) + KL(target || visual).

    Each row contributes sum_j p_id (log p_id - log p_m); the target's log is
    floored so zero-probability entries contribute exactly zero.
    """
    if probs_id.shape != log_prob_t.shape or probs_id.shape != log_prob_v.shape:
        raise ConfigError("distribution shapes disagree")
    log_id = probs_id.log().clamp_min(LOG_FLOOR)
    kl_t = (probs_id * (log_id - log_prob_t)).sum(dim=1)
    kl_v = (probs_id * (log_id - log_prob_v)).sum(dim=1)
    return (kl_t + kl_v).mean()


class KnowledgeTransfer(nn.Module):
    """Transfer-loss weight plus the two trainable modal alignment maps."""

    def __init__(self, d_proj: int, d: int, weight: float = 1.0, seed: int = 0):
        super().__init__()
        if weight < 0:
            raise ConfigError(f"transfer weight must be >= 0, got {weight}")
        self.weight = weight
        self.text_map = nn.Linear(d_proj, d)
        self.visual_map = nn.Linear(d_proj, d)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for lin in (self.text_map, self.visual_map):
                lin.weight.normal_(0.0, d_proj**-0.5, generator=gen)
                lin.bias.zero_()

    def loss(self, user_emb: torch.Tensor, item_emb: torch.Tensor,
             text_emb: torch.Tensor, visual_emb: torch.Tensor) -> torch.Tensor:
        """Unweighted transfer loss for one batch of aligned rows."""
        probs_id = target_distribution(user_emb, item_emb)
        log_t = modal_distribution(user_emb, text_emb, self.text_map)
        log_v = modal_distribution(user_emb, visual_emb, self.visual_map)
        return kt_loss(probs_id, log_t, log_v)
