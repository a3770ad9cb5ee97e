"""Leave-one-out evaluation of a model (or any scorer) over held-out targets."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .data import FixedSequence, InteractionLog
from .metrics import CUTOFFS, RankedList, metric_table, rank_all
from .model import GenAttModel
from .tensor import RngStream, no_grad

Scorer = Callable[[np.ndarray], np.ndarray]


def model_scorer(model: GenAttModel, seed: int = 0, samples: int = 1) -> Scorer:
    """Eval-mode scores; stochastic modes average ``samples`` seeded passes."""

    def score(items: np.ndarray) -> np.ndarray:
        total = None
        with no_grad():
            for k in range(max(1, samples)):
                out = model.forward(items, RngStream(seed).fork(k), training=False)
                s = out.scores.data.astype(np.float64)
                total = s if total is None else total + s
        return total / max(1, samples)

    return score


def rank_sequences(
    scorer: Scorer,
    seqs: Sequence[FixedSequence],
    users: Sequence[int] | None = None,
    exclude_history: bool = True,
    batch_size: int = 256,
) -> list[RankedList]:
    """Full-catalog ranking of each sequence's target.

    History exclusion removes the input items, except the target itself if
    the user consumed it before.
    """
    lists: list[RankedList] = []
    for lo in range(0, len(seqs), batch_size):
        chunk = seqs[lo:lo + batch_size]
        items = np.stack([s.items for s in chunk])
        targets = np.array([s.target for s in chunk])
        scores = scorer(items)
        exclusions = None
        if exclude_history:
            exclusions = [set(s.items[s.items > 0].tolist()) - {int(s.target)} for s in chunk]
        chunk_users = users[lo:lo + batch_size] if users is not None else range(lo, lo + len(chunk))
        lists.extend(rank_all(scores, targets=targets, exclusions=exclusions, users=list(chunk_users)))
    return lists


def evaluate(
    scorer: Scorer | GenAttModel,
    seqs: Sequence[FixedSequence],
    log: InteractionLog | None = None,
    users: Sequence[int] | None = None,
    exclude_history: bool = True,
    seed: int = 0,
    samples: int = 1,
    cutoffs=CUTOFFS,
) -> dict:
    """Mean NDCG/Recall@N, MRR and (given category metadata) CC/ILD@N."""
    if isinstance(scorer, GenAttModel):
        scorer = model_scorer(scorer, seed, samples)
    lists = rank_sequences(scorer, seqs, users, exclude_history)
    if log is not None and log.num_categories > 0:
        return metric_table(lists, log.categories, log.num_items, log.num_categories, cutoffs)
    return metric_table(lists, cutoffs=cutoffs)


def popularity_scorer(train_counts: np.ndarray) -> Scorer:
    """Scores every row by global item popularity (index j -> item j + 1)."""
    counts = np.asarray(train_counts, dtype=np.float64)

    def score(items: np.ndarray) -> np.ndarray:
        return np.broadcast_to(counts, (items.shape[0], counts.shape[0])).copy()

    return score


def random_scorer(num_items: int, seed: int = 0) -> Scorer:
    rng = RngStream(seed)

    def score(items: np.ndarray) -> np.ndarray:
        return rng.uniform((items.shape[0], num_items))

    return score
