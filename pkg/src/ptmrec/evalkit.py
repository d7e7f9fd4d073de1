"""Full-ranking evaluation: Recall@K and NDCG@K with train-item masking."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import InteractionCorpus
from .errors import ConfigError
from .recommender import rank_by_score


def recall_at_k(ranked, relevant, k: int) -> float:
    """Fraction of the relevant set found in the top k positions."""
    if not relevant:
        raise ConfigError("empty relevant set; exclude the user upstream")
    hits = sum(1 for item in list(ranked)[:k] if item in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant, k: int) -> float:
    """Binary-relevance NDCG with positions counted from 1."""
    if not relevant:
        raise ConfigError("empty relevant set; exclude the user upstream")
    dcg = sum(
        1.0 / math.log2(pos + 1)
        for pos, item in enumerate(list(ranked)[:k], start=1)
        if item in relevant
    )
    ideal = sum(1.0 / math.log2(pos + 1) for pos in range(1, min(k, len(relevant)) + 1))
    return dcg / ideal


@dataclass
class EvalResult:
    metrics: dict[str, float]
    num_users: int
    split: str
    ks: tuple[int, ...]
    per_user: dict[str, list[float]] | None = field(default=None, repr=False)

    def to_json(self, seed=None, checkpoint=None) -> dict:
        return {
            "split": self.split,
            "Ks": list(self.ks),
            "metrics": self.metrics,
            "num_users": self.num_users,
            "seed": seed,
            "checkpoint": checkpoint,
        }


def evaluate(
    score_fn,
    corpus: InteractionCorpus,
    split: str = "val",
    ks: tuple[int, ...] = (10, 20),
    batch_users: int = 256,
    keep_per_user: bool = False,
) -> EvalResult:
    """Rank every non-masked item per user and average the metrics.

    ``score_fn`` maps a list of user ids to a (len(users), num_items) score
    array. Validation masks each user's train items; test additionally masks
    val items. Users whose relevant set is empty are skipped.
    """
    if split not in ("val", "test"):
        raise ConfigError(f"split must be 'val' or 'test', got {split!r}")
    relevant_of = corpus.test if split == "test" else corpus.val
    users = [u for u in range(corpus.num_users) if relevant_of[u]]
    sums = {f"{name}@{k}": 0.0 for name in ("recall", "ndcg") for k in ks}
    per_user: dict[str, list[float]] = {key: [] for key in sums} if keep_per_user else None

    for start in range(0, len(users), batch_users):
        chunk = users[start : start + batch_users]
        scores = np.asarray(score_fn(chunk), dtype=np.float64)
        for row, u in enumerate(chunk):
            masked = set(corpus.train[u])
            if split == "test":
                masked |= set(corpus.val[u])
            ranked = rank_by_score(scores[row], exclude=masked)
            # masked items sit at the bottom; truncate so none is a candidate
            candidates = corpus.num_items - len(masked)
            top = ranked[: min(max(ks), candidates)]
            relevant = set(relevant_of[u])
            for k in ks:
                r = recall_at_k(top, relevant, k)
                n = ndcg_at_k(top, relevant, k)
                sums[f"recall@{k}"] += r
                sums[f"ndcg@{k}"] += n
                if per_user is not None:
                    per_user[f"recall@{k}"].append(r)
                    per_user[f"ndcg@{k}"].append(n)

    count = max(len(users), 1)
    metrics = {key: value / count for key, value in sums.items()}
    return EvalResult(metrics=metrics, num_users=len(users), split=split, ks=tuple(ks),
                      per_user=per_user)


def write_eval_json(path: str | Path, result: EvalResult, seed=None, checkpoint=None) -> None:
    Path(path).write_text(json.dumps(result.to_json(seed=seed, checkpoint=checkpoint), indent=1))
