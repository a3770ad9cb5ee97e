"""Seeded synthetic corpus with category clusters and sequential drift.

Items are split into ``cats`` equal clusters, each cluster ordered as a
ring. A user prefers two clusters; at every step they usually stay in the
current cluster and walk one or two places along its ring, sometimes hop
to their other cluster, and rarely pick any item at random. No user sees
the same item twice.
"""

from __future__ import annotations

import numpy as np

from .data import InteractionLog
from .tensor import RngStream


def synthetic_log(
    users: int = 500,
    items: int = 200,
    cats: int = 10,
    seed: int = 0,
    min_len: int = 12,
    max_len: int = 30,
    stay: float = 0.8,
    noise: float = 0.05,
) -> InteractionLog:
    if items % cats:
        raise ValueError("items must be a multiple of cats")
    rng = RngStream(seed)
    per = items // cats
    cluster_of = {i: (i - 1) // per for i in range(1, items + 1)}
    categories = {i: {cluster_of[i]} for i in range(1, items + 1)}
    # every third item also carries a neighbouring category
    for i in range(1, items + 1, 3):
        categories[i].add((cluster_of[i] + 1) % cats)

    seqs: dict[int, list[int]] = {}
    for u in range(1, users + 1):
        prefs = rng.permutation(cats)[:2].tolist()
        length = int(rng.integers(min_len, max_len + 1))
        cur = prefs[0]
        pos = int(rng.integers(0, per))
        seen: set[int] = set()
        seq: list[int] = []
        while len(seq) < length:
            if rng.uniform(()) < noise:
                item = int(rng.integers(1, items + 1))
            else:
                if rng.uniform(()) > stay:
                    cur = prefs[1] if cur == prefs[0] else prefs[0]
                    pos = int(rng.integers(0, per))
                else:
                    pos = (pos + 1 + int(rng.integers(0, 2))) % per
                item = cur * per + pos + 1
            # walk forward along the ring past anything already consumed
            tries = 0
            while item in seen and tries < items:
                c = cluster_of[item]
                item = c * per + ((item - 1 - c * per + 1) % per) + 1
                tries += 1
                if tries % per == 0:
                    item = int(rng.integers(1, items + 1))
            if item in seen:
                continue
            seen.add(item)
            seq.append(item)
        seqs[u] = seq
    return InteractionLog(users=seqs, num_items=items, categories=categories, num_categories=cats)


def write_tsv(log_: InteractionLog, interactions_path, categories_path=None) -> None:
    """Export as ``user<TAB>item<TAB>timestamp`` (+ ``item<TAB>category``)."""
    lines = []
    for u in sorted(log_.users):
        for t, i in enumerate(log_.users[u]):
            lines.append(f"u{u}\ti{i}\t{t}")
    with open(interactions_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    if categories_path is not None:
        rows = [f"i{i}\tc{c}" for i in sorted(log_.categories) for c in sorted(log_.categories[i])]
        with open(categories_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(rows) + "\n")
