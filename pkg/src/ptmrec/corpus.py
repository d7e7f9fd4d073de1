"""Interaction data and item modality payloads.

Handles loading the on-disk dataset layout (interactions.tsv,
items.tokens.jsonl, items.patches.bin, splits.json), per-user splitting,
BPR triple sampling, and cluster-structured synthetic data generation.
All operations are deterministic functions of their inputs and seed.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

# Users with fewer interactions cannot hold one val and one test item.
KCORE_MIN_INTERACTIONS = 3

# Token 0 is reserved for padding; synthetic text never emits it.
PAD_TOKEN = 0

INTERACTIONS_FILE = "interactions.tsv"
TOKENS_FILE = "items.tokens.jsonl"
PATCHES_FILE = "items.patches.bin"
SPLITS_FILE = "splits.json"
ID_MAPS_FILE = "id_maps.json"


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    timestamp: int = 0


class BprTriple(NamedTuple):
    user: int
    pos_item: int
    neg_item: int


@dataclass
class InteractionCorpus:
    """Dense-id interaction data with per-user train/val/test splits.

    Until ``split_per_user`` runs, all interactions sit in ``train`` and the
    val/test lists are empty. Item lists are sorted; the three per-user lists
    are pairwise disjoint.
    """

    num_users: int
    num_items: int
    train: list[list[int]]
    val: list[list[int]]
    test: list[list[int]]
    split_seed: int | None = None
    split_ratios: tuple[float, float, float] | None = None
    _train_sets: list[set[int]] | None = field(default=None, repr=False, compare=False)

    def train_set(self, user: int) -> set[int]:
        if self._train_sets is None:
            self._train_sets = [set(items) for items in self.train]
        return self._train_sets[user]

    def num_train_interactions(self) -> int:
        return sum(len(items) for items in self.train)

    def validate(self) -> None:
        for u in range(self.num_users):
            tr, va, te = set(self.train[u]), set(self.val[u]), set(self.test[u])
            if tr & va or tr & te or va & te:
                raise DataError(f"user {u}: overlapping split lists")
            for i in tr | va | te:
                if not 0 <= i < self.num_items:
                    raise DataError(f"user {u}: item id {i} out of range")


@dataclass
class ItemModalityBundle:
    item_id: int
    tokens: list[int]
    patches: np.ndarray  # (M, d_patch) float32


@dataclass
class ModalityBundles:
    """Column layout of all items' modality payloads."""

    tokens: list[list[int]]
    patches: np.ndarray  # (num_items, M, d_patch) float32

    @property
    def num_items(self) -> int:
        return len(self.tokens)

    @property
    def patch_count(self) -> int:
        return self.patches.shape[1]

    @property
    def patch_dim(self) -> int:
        return self.patches.shape[2]

    def bundle(self, item_id: int) -> ItemModalityBundle:
        return ItemModalityBundle(item_id, self.tokens[item_id], self.patches[item_id])


def load_interactions(path: str | Path) -> InteractionCorpus:
    """Parse a ``user \\t item \\t timestamp`` TSV into a dense-id corpus.

    Ids are remapped to contiguous ranges (in first-seen order of the
    surviving rows); the remap tables are persisted next to the file as
    ``id_maps.json``. Users below the k-core floor are dropped and counted.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"interactions file not found: {path}")
    per_user: dict[int, dict[int, int]] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise DataError(f"{path}: line {lineno}: expected 2 or 3 fields, got {len(parts)}")
            try:
                user = int(parts[0])
                item = int(parts[1])
                ts = int(parts[2]) if len(parts) == 3 and parts[2] != "" else 0
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if user < 0 or item < 0:
                raise DataError(f"{path}: line {lineno}: negative id")
            per_user.setdefault(user, {})
            # dedupe (user, item); keep the first timestamp
            per_user[user].setdefault(item, ts)

    if not per_user:
        raise DataError(f"{path}: no interactions")

    dropped = [u for u, items in per_user.items() if len(items) < KCORE_MIN_INTERACTIONS]
    for u in dropped:
        del per_user[u]
    if dropped:
        logger.info("dropped %d users below the %d-interaction floor", len(dropped), KCORE_MIN_INTERACTIONS)
    if not per_user:
        raise DataError(f"{path}: no users with >= {KCORE_MIN_INTERACTIONS} interactions")

    user_map: dict[int, int] = {}
    item_map: dict[int, int] = {}
    for u in sorted(per_user):
        user_map[u] = len(user_map)
        for i in sorted(per_user[u]):
            if i not in item_map:
                item_map[i] = len(item_map)

    num_users, num_items = len(user_map), len(item_map)
    train: list[list[int]] = [[] for _ in range(num_users)]
    for u, items in per_user.items():
        train[user_map[u]] = sorted(item_map[i] for i in items)

    maps_path = path.parent / ID_MAPS_FILE
    maps_path.write_text(
        json.dumps(
            {
                "users": {str(k): v for k, v in user_map.items()},
                "items": {str(k): v for k, v in item_map.items()},
                "dropped_users": len(dropped),
            },
            indent=1,
        )
    )

    empty = [[] for _ in range(num_users)]
    return InteractionCorpus(
        num_users=num_users,
        num_items=num_items,
        train=train,
        val=[list(x) for x in empty],
        test=[list(x) for x in empty],
    )


def split_per_user(
    corpus: InteractionCorpus,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> InteractionCorpus:
    """Randomly split each user's pooled items at the given ratios.

    Val and test each receive ``max(1, floor(n * ratio))`` items so every
    user with >= 3 interactions keeps at least one item per split.
    """
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must be positive and sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    train: list[list[int]] = []
    val: list[list[int]] = []
    test: list[list[int]] = []
    for u in range(corpus.num_users):
        items = sorted(set(corpus.train[u]) | set(corpus.val[u]) | set(corpus.test[u]))
        n = len(items)
        if n < KCORE_MIN_INTERACTIONS:
            raise DataError(f"user {u} has {n} interactions, below the k-core floor")
        n_val = max(1, int(n * ratios[1]))
        n_test = max(1, int(n * ratios[2]))
        perm = rng.permutation(n)
        val_idx = perm[:n_val]
        test_idx = perm[n_val : n_val + n_test]
        train_idx = perm[n_val + n_test :]
        arr = np.asarray(items)
        train.append(sorted(arr[train_idx].tolist()))
        val.append(sorted(arr[val_idx].tolist()))
        test.append(sorted(arr[test_idx].tolist()))
    return InteractionCorpus(
        num_users=corpus.num_users,
        num_items=corpus.num_items,
        train=train,
        val=val,
        test=test,
        split_seed=seed,
        split_ratios=tuple(ratios),
    )


def sample_bpr_triples(
    corpus: InteractionCorpus,
    batch_size: int,
    rng: np.random.Generator,
) -> list[BprTriple]:
    """Draw BPR triples: uniform user, uniform positive, rejection-sampled negative.

    Users whose train set covers every item are skipped (no negative exists).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    eligible = [u for u in range(corpus.num_users) if 0 < len(corpus.train[u]) < corpus.num_items]
    if not eligible:
        raise DataError("no user admits a (positive, negative) pair")
    eligible = np.asarray(eligible)
    users = eligible[rng.integers(0, len(eligible), size=batch_size)]
    triples: list[BprTriple] = []
    for u in users.tolist():
        items = corpus.train[u]
        pos = items[int(rng.integers(0, len(items)))]
        train_set = corpus.train_set(u)
        while True:
            neg = int(rng.integers(0, corpus.num_items))
            if neg not in train_set:
                break
        triples.append(BprTriple(u, pos, neg))
    return triples


@dataclass
class SyntheticConfig:
    num_users: int = 400
    num_items: int = 600
    num_clusters: int = 8
    signal_strength: float = 0.8
    vocab_size: int = 512
    patch_count: int = 16  # M
    patch_dim: int = 32  # d_patch
    interactions_per_user: int = 20
    # sharpness of within-cluster preferences: 0 = uniform, larger values
    # concentrate each user on items whose patch offset matches their taste
    taste_strength: float = 4.0


# Synthetic text lengths are drawn uniformly from this closed range.
TEXT_LEN_RANGE = (6, 16)
# Each item repeats a few signature tokens so modal features carry
# item-level (not just cluster-level) information.
SIGNATURE_TOKENS = 3


def generate_synthetic(
    config: SyntheticConfig,
    seed: int,
    out_dir: str | Path,
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> tuple[InteractionCorpus, ModalityBundles]:
    """Write a cluster-structured synthetic dataset and return it.

    Items belong to latent clusters (round-robin so cluster sizes are even).
    Text tokens come from a cluster-specific vocabulary band mixed with
    item-specific signature tokens; patch features are Gaussian around a
    cluster mean plus an item offset. Each user interacts within a preferred
    cluster with probability ``signal_strength`` and uniformly otherwise.
    """
    cfg = config
    if cfg.num_clusters > min(cfg.num_items, cfg.vocab_size // 8):
        raise DataError(
            f"num_clusters={cfg.num_clusters} exceeds min(num_items, vocab_size/8)="
            f"{min(cfg.num_items, cfg.vocab_size // 8)}"
        )
    if cfg.interactions_per_user > cfg.num_items:
        raise DataError("interactions_per_user exceeds num_items")
    if cfg.interactions_per_user < KCORE_MIN_INTERACTIONS:
        raise DataError(f"interactions_per_user must be >= {KCORE_MIN_INTERACTIONS}")

    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    item_cluster = np.arange(cfg.num_items) % cfg.num_clusters
    cluster_items = [np.flatnonzero(item_cluster == c) for c in range(cfg.num_clusters)]

    # text: band of tokens per cluster within [1, vocab_size)
    band = (cfg.vocab_size - 1) // cfg.num_clusters
    tokens: list[list[int]] = []
    lo, hi = TEXT_LEN_RANGE
    for i in range(cfg.num_items):
        c = int(item_cluster[i])
        start = 1 + c * band
        signature = rng.integers(start, start + band, size=SIGNATURE_TOKENS)
        length = int(rng.integers(lo, hi + 1))
        body = rng.integers(start, start + band, size=length)
        # overwrite a prefix with the signature so every item keeps stable marks
        body[: min(SIGNATURE_TOKENS, length)] = signature[: min(SIGNATURE_TOKENS, length)]
        tokens.append([int(t) for t in rng.permutation(body)])

    # patches: cluster mean + item offset + per-patch noise
    cluster_means = rng.normal(0.0, 1.0, size=(cfg.num_clusters, cfg.patch_dim))
    item_offsets = rng.normal(0.0, 0.5, size=(cfg.num_items, cfg.patch_dim))
    patches = np.empty((cfg.num_items, cfg.patch_count, cfg.patch_dim), dtype=np.float32)
    for i in range(cfg.num_items):
        mean = cluster_means[item_cluster[i]] + item_offsets[i]
        patches[i] = (mean + rng.normal(0.0, 0.25, size=(cfg.patch_count, cfg.patch_dim))).astype(
            np.float32
        )

    # interactions: preferred cluster with probability signal_strength; within
    # the cluster, items matching the user's taste vector are favored so the
    # preference signal lives in the patch features, not only in cluster id
    user_cluster = rng.integers(0, cfg.num_clusters, size=cfg.num_users)
    user_taste = rng.normal(0.0, 1.0, size=(cfg.num_users, cfg.patch_dim))
    affinity_scale = cfg.taste_strength / math.sqrt(cfg.patch_dim) / 0.5
    interactions: list[Interaction] = []
    all_items = np.arange(cfg.num_items)
    for u in range(cfg.num_users):
        preferred = cluster_items[int(user_cluster[u])]
        raw = affinity_scale * (item_offsets[preferred] @ user_taste[u])
        taste_weights = np.exp(raw - raw.max())
        chosen: set[int] = set()
        for t in range(cfg.interactions_per_user):
            in_cluster = rng.random() < cfg.signal_strength
            pool = preferred if in_cluster else all_items
            keep = ~np.isin(pool, list(chosen)) if chosen else np.ones(len(pool), bool)
            if not keep.any():
                in_cluster = False
                pool = all_items
                keep = ~np.isin(pool, list(chosen))
            candidates = pool[keep]
            if in_cluster and cfg.taste_strength > 0:
                weights = taste_weights[keep]
                weights = weights / weights.sum()
                pick = int(rng.choice(candidates, p=weights))
            else:
                pick = int(candidates[rng.integers(0, len(candidates))])
            chosen.add(pick)
            interactions.append(Interaction(u, pick, t))

    write_interactions_tsv(out_dir / INTERACTIONS_FILE, interactions)
    write_tokens_jsonl(out_dir / TOKENS_FILE, tokens)
    write_patches_bin(out_dir / PATCHES_FILE, patches)
    (out_dir / ID_MAPS_FILE).write_text(
        json.dumps(
            {
                "users": {str(u): u for u in range(cfg.num_users)},
                "items": {str(i): i for i in range(cfg.num_items)},
                "dropped_users": 0,
            }
        )
    )

    train = [[] for _ in range(cfg.num_users)]
    for it in interactions:
        train[it.user_id].append(it.item_id)
    corpus = InteractionCorpus(
        num_users=cfg.num_users,
        num_items=cfg.num_items,
        train=[sorted(x) for x in train],
        val=[[] for _ in range(cfg.num_users)],
        test=[[] for _ in range(cfg.num_users)],
    )
    corpus = split_per_user(corpus, split_ratios, seed)
    write_splits_json(out_dir / SPLITS_FILE, corpus)
    return corpus, ModalityBundles(tokens=tokens, patches=patches)


def write_interactions_tsv(path: str | Path, interactions: Sequence[Interaction]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for it in interactions:
            fh.write(f"{it.user_id}\t{it.item_id}\t{it.timestamp}\n")


def write_tokens_jsonl(path: str | Path, tokens: Sequence[Sequence[int]]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for item_id, toks in enumerate(tokens):
            fh.write(json.dumps({"item": item_id, "tokens": list(toks)}) + "\n")


def read_tokens_jsonl(path: str | Path, num_items: int | None = None) -> list[list[int]]:
    rows: dict[int, list[int]] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rows[int(obj["item"])] = [int(t) for t in obj["tokens"]]
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
    n = num_items if num_items is not None else (max(rows) + 1 if rows else 0)
    missing = [i for i in range(n) if i not in rows]
    if missing:
        raise DataError(f"{path}: missing token rows for items {missing[:5]}...")
    return [rows[i] for i in range(n)]


def write_patches_bin(path: str | Path, patches: np.ndarray) -> None:
    """Header: 3 x uint32 LE (num_items, M, d_patch); payload row-major float32 LE."""
    arr = np.ascontiguousarray(patches, dtype="<f4")
    n, m, d = arr.shape
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<III", n, m, d))
        fh.write(arr.tobytes())


def read_patches_bin(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise DataError(f"{path}: truncated header")
    n, m, d = struct.unpack("<III", raw[:12])
    expected = 12 + 4 * n * m * d
    if len(raw) != expected:
        raise DataError(f"{path}: payload length {len(raw)} != expected {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(n, m, d).copy()


def write_splits_json(path: str | Path, corpus: InteractionCorpus) -> None:
    payload = {
        "seed": corpus.split_seed,
        "ratios": list(corpus.split_ratios) if corpus.split_ratios else None,
        "num_users": corpus.num_users,
        "num_items": corpus.num_items,
        "users": {
            str(u): {"train": corpus.train[u], "val": corpus.val[u], "test": corpus.test[u]}
            for u in range(corpus.num_users)
        },
    }
    Path(path).write_text(json.dumps(payload))


def read_splits_json(path: str | Path) -> InteractionCorpus:
    obj = json.loads(Path(path).read_text())
    num_users = int(obj["num_users"])
    num_items = int(obj["num_items"])
    train = [[] for _ in range(num_users)]
    val = [[] for _ in range(num_users)]
    test = [[] for _ in range(num_users)]
    for key, splits in obj["users"].items():
        u = int(key)
        train[u] = [int(i) for i in splits["train"]]
        val[u] = [int(i) for i in splits["val"]]
        test[u] = [int(i) for i in splits["test"]]
    ratios = obj.get("ratios")
    return InteractionCorpus(
        num_users=num_users,
        num_items=num_items,
        train=train,
        val=val,
        test=test,
        split_seed=obj.get("seed"),
        split_ratios=tuple(ratios) if ratios else None,
    )


def load_dataset(data_dir: str | Path) -> tuple[InteractionCorpus, ModalityBundles]:
    """Load a dataset directory written by ``generate_synthetic``.

    Prefers splits.json (it preserves the exact split); falls back to the
    raw TSV when no splits file exists.
    """
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"dataset directory not found: {data_dir}")
    for required in (PATCHES_FILE, TOKENS_FILE):
        if not (data_dir / required).exists():
            raise DataError(f"dataset file not found: {data_dir / required}")
    splits = data_dir / SPLITS_FILE
    if splits.exists():
        corpus = read_splits_json(splits)
    else:
        corpus = load_interactions(data_dir / INTERACTIONS_FILE)
    patches = read_patches_bin(data_dir / PATCHES_FILE)
    tokens = read_tokens_jsonl(data_dir / TOKENS_FILE, num_items=corpus.num_items)
    if patches.shape[0] != corpus.num_items:
        raise DataError(
            f"patches cover {patches.shape[0]} items but corpus has {corpus.num_items}"
        )
    corpus.validate()
    return corpus, ModalityBundles(tokens=tokens, patches=patches)
