"""ID-embedding recommender with a VBPR-style multimodal scorer.

The score of item i for user u adds an ID dot product and one projected dot
product per modality:

    f_u(i) = <e_u, e_i> + <e_u, W_t e_i_t> + <e_u, W_v e_i_v>

Stage 1 trains this model on cached modality embeddings; stage 2 reuses it
with live prompted encoder outputs.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError


class RecModel(nn.Module):
    def __init__(self, num_users: int, num_items: int, d: int = 64, d_proj: int = 32,
                 seed: int = 0):
        super().__init__()
        if min(num_users, num_items, d, d_proj) < 1:
            raise ConfigError("num_users, num_items, d, and d_proj must all be >= 1")
        self.num_users = num_users
        self.num_items = num_items
        self.d = d
        self.d_proj = d_proj
        self.user_table = nn.Embedding(num_users, d)
        self.item_table = nn.Embedding(num_items, d)
        self.text_map = nn.Linear(d_proj, d, bias=False)
        self.visual_map = nn.Linear(d_proj, d, bias=False)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.user_table.weight.normal_(0.0, 0.02, generator=gen)
            self.item_table.weight.normal_(0.0, 0.02, generator=gen)
            self.text_map.weight.normal_(0.0, d_proj**-0.5, generator=gen)
            self.visual_map.weight.normal_(0.0, d_proj**-0.5, generator=gen)

    def _check_index(self, idx: torch.Tensor, limit: int, what: str) -> None:
        if idx.numel() and (idx.min() < 0 or idx.max() >= limit):
            raise DataError(f"{what} index outside [0, {limit})")

    def score(self, users, items, text_emb: torch.Tensor, visual_emb: torch.Tensor) -> torch.Tensor:
        """Score user/item pairs given that pair's modal embeddings.

        ``users`` and ``items`` align elementwise with the embedding rows;
        scalars give a scalar score.
        """
        users = torch.as_tensor(users, dtype=torch.long)
        items = torch.as_tensor(items, dtype=torch.long)
        self._check_index(users, self.num_users, "user")
        self._check_index(items, self.num_items, "item")
        if text_emb.shape[-1] != self.d_proj or visual_emb.shape[-1] != self.d_proj:
            raise ConfigError(f"modal embeddings must have width {self.d_proj}")
        e_u = self.user_table(users)
        e_i = self.item_table(items)
        parts = (
            (e_u * e_i).sum(-1)
            + (e_u * self.text_map(text_emb)).sum(-1)
            + (e_u * self.visual_map(visual_emb)).sum(-1)
        )
        return parts

    def item_representations(self, text_all: torch.Tensor, visual_all: torch.Tensor) -> torch.Tensor:
        """Fused per-item vectors: ID row + projected modal embeddings."""
        if text_all.shape[0] != self.num_items or visual_all.shape[0] != self.num_items:
            raise DataError("modal embedding tables must cover every item")
        return self.item_table.weight + self.text_map(text_all) + self.visual_map(visual_all)

    def score_matrix(self, users, text_all: torch.Tensor, visual_all: torch.Tensor) -> torch.Tensor:
        """All-item scores for each user row; used by the ranking evaluator."""
        users = torch.as_tensor(users, dtype=torch.long)
        self._check_index(users, self.num_users, "user")
        return self.user_table(users) @ self.item_representations(text_all, visual_all).t()

    def bpr_loss(self, triples, text_all: torch.Tensor, visual_all: torch.Tensor) -> torch.Tensor:
        """Mean pairwise ranking loss over (user, pos, neg) triples."""
        if len(triples) == 0:
            raise DataError("empty triple batch")
        users = torch.as_tensor([t[0] for t in triples], dtype=torch.long)
        pos = torch.as_tensor([t[1] for t in triples], dtype=torch.long)
        neg = torch.as_tensor([t[2] for t in triples], dtype=torch.long)
        pos_scores = self.score(users, pos, text_all[pos], visual_all[pos])
        neg_scores = self.score(users, neg, text_all[neg], visual_all[neg])
        return bpr_loss(pos_scores, neg_scores)

    def rank_items(self, user: int, text_all: torch.Tensor, visual_all: torch.Tensor,
                   exclude=()) -> np.ndarray:
        """Item ids by descending score; ties resolved by ascending id.

        Excluded items sink below all scored items.
        """
        with torch.no_grad():
            scores = self.score_matrix([user], text_all, visual_all)[0].double().numpy()
        return rank_by_score(scores, exclude)


def bpr_loss(pos_scores: torch.Tensor, neg_scores: torch.Tensor) -> torch.Tensor:
    """-mean ln sigmoid(pos - neg), in the numerically safe log-sigmoid form."""
    if pos_scores.numel() == 0:
        raise DataError("empty triple batch")
    return -F.logsigmoid(pos_scores - neg_scores).mean()


def rank_by_score(scores: np.ndarray, exclude=()) -> np.ndarray:
    """Permutation of item ids by descending score, ascending id on ties."""
    scores = np.asarray(scores, dtype=np.float64).copy()
    exclude = np.asarray(sorted(exclude), dtype=np.int64)
    if exclude.size:
        scores[exclude] = -np.inf
    ids = np.arange(scores.shape[0])
    return np.lexsort((ids, -scores))
