"""Full-catalog ranking, accuracy metrics (NDCG, Recall, MRR) and
category-based diversity metrics (CC, ILD)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CUTOFFS = (5, 10, 20)


class ProtocolError(ValueError):
    pass


@dataclass
class RankedList:
    user: int
    items: np.ndarray  # top-N item ids, best first
    target_rank: int  # 1-based rank of the target in the full ranking


def rank_all(scores: np.ndarray, targets=None, exclusions=None, top: int = max(CUTOFFS), users=None) -> list[RankedList]:
    """Rank every item per row; ties go to the lower item id.

    ``scores`` is (B, |V|) with column j scoring item j + 1. ``exclusions``
    is a per-row iterable of item ids pushed to the bottom; excluding a
    row's target is a protocol error.
    """
    scores = np.array(scores, dtype=np.float64, copy=True)
    B, V = scores.shape
    if exclusions is not None:
        for b, ex in enumerate(exclusions):
            ex = np.asarray(list(ex), dtype=np.int64)
            ex = ex[ex > 0]
            if targets is not None and int(targets[b]) in set(ex.tolist()):
                raise ProtocolError(f"row {b}: target item {int(targets[b])} is excluded from ranking")
            scores[b, ex - 1] = -np.inf
    out = []
    ids = np.arange(1, V + 1)
    for b in range(B):
        # lexsort keys: last is primary; descending score then ascending id
        order = np.lexsort((ids, -scores[b]))
        ranked = ids[order]
        keep = np.isfinite(scores[b, order])
        rank = 0
        if targets is not None:
            tgt = int(targets[b])
            s = scores[b, tgt - 1]
            # strictly better items, plus equal-score items with smaller id
            rank = int(np.sum(scores[b] > s) + np.sum((scores[b] == s) & (ids < tgt))) + 1
        user = int(users[b]) if users is not None else b
        out.append(RankedList(user=user, items=ranked[keep][:top], target_rank=rank))
    return out


def ndcg_at(rank: int, N: int) -> float:
    """Single-target NDCG: 1 / log2(rank + 1) inside the cutoff."""
    if rank < 1:
        raise ValueError("rank is 1-based")
    return 1.0 / math.log2(rank + 1) if rank <= N else 0.0


def recall_at(rank: int, N: int) -> float:
    return 1.0 if 1 <= rank <= N else 0.0


def mrr(rank: int) -> float:
    return 1.0 / rank


def category_coverage(items, categories: dict[int, set[int]], num_categories: int, N: int) -> float:
    """Share of all categories touched by the top-N items."""
    if num_categories < 1:
        raise ValueError("num_categories must be >= 1")
    seen: set[int] = set()
    for i in list(items)[:N]:
        seen |= categories.get(int(i), set())
    return len(seen) / num_categories


def category_vectors(categories: dict[int, set[int]], num_items: int, num_categories: int) -> np.ndarray:
    """Binary (|V|+1, C) membership matrix; row 0 is the pad item."""
    vec = np.zeros((num_items + 1, max(num_categories, 1)))
    for i, cats in categories.items():
        if 0 < i <= num_items:
            vec[i, list(cats)] = 1.0
    return vec


def intra_list_distance(items, vectors: np.ndarray, N: int) -> float:
    """Mean pairwise (1 - cosine) over top-N items with a nonzero vector.

    Returns NaN when fewer than two usable items remain.
    """
    rows = vectors[np.asarray(list(items)[:N], dtype=np.int64)] if len(items) else np.zeros((0, vectors.shape[1]))
    norms = np.linalg.norm(rows, axis=1)
    rows = rows[norms > 0] / norms[norms > 0, None]
    k = rows.shape[0]
    if k < 2:
        return math.nan
    sim = rows @ rows.T
    iu = np.triu_indices(k, 1)
    return float(np.mean(1.0 - sim[iu]))


def metric_table(lists: list[RankedList], categories=None, num_items: int = 0, num_categories: int = 0, cutoffs=CUTOFFS) -> dict:
    """Dataset-level means; keys like ``ndcg@10``, ``mrr``, ``cc@5``."""
    table: dict[str, float] = {}
    ranks = [r.target_rank for r in lists]
    for N in cutoffs:
        table[f"ndcg@{N}"] = float(np.mean([ndcg_at(r, N) for r in ranks])) if ranks else 0.0
        table[f"recall@{N}"] = float(np.mean([recall_at(r, N) for r in ranks])) if ranks else 0.0
    table["mrr"] = float(np.mean([mrr(r) for r in ranks])) if ranks else 0.0
    if categories is not None and num_categories > 0:
        vectors = category_vectors(categories, num_items, num_categories)
        for N in cutoffs:
            table[f"cc@{N}"] = float(np.mean([category_coverage(r.items, categories, num_categories, N) for r in lists]))
            ild = [intra_list_distance(r.items, vectors, N) for r in lists]
            ild = [v for v in ild if not math.isnan(v)]
            table[f"ild@{N}"] = float(np.mean(ild)) if ild else math.nan
    return table


def table_rows(table: dict) -> list[tuple[str, str, float]]:
    """(metric, N, value) rows for the CSV export; N is blank for MRR."""
    rows = []
    for key, value in table.items():
        name, _, N = key.partition("@")
        rows.append((name, N, value))
    return rows
