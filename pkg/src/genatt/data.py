"""Interaction logs, k-core filtering, leave-one-out splits and padding."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import RngStream

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


class EmptyLogError(DataError):
    pass


class SamplingError(DataError):
    pass


@dataclass
class InteractionLog:
    """Per-user chronological item sequences with dense ids.

    Item ids run over ``1..num_items``; 0 is reserved for padding.
    ``categories`` maps item id to a set of category ids in
    ``0..num_categories-1``.
    """

    users: dict[int, list[int]]
    num_items: int
    categories: dict[int, set[int]] = field(default_factory=dict)
    num_categories: int = 0

    @property
    def num_interactions(self) -> int:
        return sum(len(s) for s in self.users.values())

    def to_json(self) -> dict:
        return {
            "num_items": self.num_items,
            "num_categories": self.num_categories,
            "users": {str(u): seq for u, seq in sorted(self.users.items())},
            "categories": {str(i): sorted(c) for i, c in sorted(self.categories.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "InteractionLog":
        return cls(
            users={int(u): list(map(int, s)) for u, s in obj["users"].items()},
            num_items=int(obj["num_items"]),
            categories={int(i): set(map(int, c)) for i, c in obj["categories"].items()},
            num_categories=int(obj["num_categories"]),
        )


@dataclass
class FixedSequence:
    items: np.ndarray  # (n,) int, left padded with 0
    mask: np.ndarray  # (n,) bool, True on real items
    target: int = 0


@dataclass
class TrainSequence:
    """One user's training region laid out for per-position supervision.

    Position ``i`` reads the prefix ``items[:i+1]`` and must predict
    ``targets[i]``; ``targets == 0`` marks unsupervised positions.
    """

    user: int
    items: np.ndarray
    targets: np.ndarray
    history: np.ndarray  # items the user touched in the training region


@dataclass
class SplitSet:
    train: list[TrainSequence]
    valid: list[FixedSequence]
    test: list[FixedSequence]
    valid_users: list[int]
    test_users: list[int]
    skipped: int = 0

    def manifest(self) -> dict:
        out: dict[str, dict] = {}
        for u, s in zip(self.valid_users, self.valid):
            out.setdefault(str(u), {})["valid_target"] = int(s.target)
        for u, s in zip(self.test_users, self.test):
            out.setdefault(str(u), {})["test_target"] = int(s.target)
        return out


def _read_rows(path: Path, ncols: int):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != ncols:
            raise DataError(f"{path}:{lineno}: expected {ncols} tab-separated fields, got {len(parts)}")
        rows.append((lineno, parts))
    return rows


def load_interactions(path, categories_path=None) -> InteractionLog:
    """Read ``user<TAB>item<TAB>timestamp`` rows into a dense-id log.

    Ids are re-indexed in order of first appearance. Per-user sequences are
    sorted by timestamp with ties kept in file order.
    """
    rows = _read_rows(path, 3)
    if not rows:
        raise EmptyLogError(f"{path}: no interactions")
    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    events: dict[int, list[tuple[float, int, int]]] = {}
    for order, (lineno, (u, i, ts)) in enumerate(rows):
        try:
            stamp = float(ts)
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad timestamp {ts!r}") from None
        uid = user_ids.setdefault(u, len(user_ids) + 1)
        iid = item_ids.setdefault(i, len(item_ids) + 1)
        events.setdefault(uid, []).append((stamp, order, iid))
    users = {u: [iid for _, _, iid in sorted(ev)] for u, ev in events.items()}

    categories: dict[int, set[int]] = {}
    num_categories = 0
    if categories_path is not None:
        cat_ids: dict[str, int] = {}
        for lineno, (i, c) in _read_rows(categories_path, 2):
            if i not in item_ids:
                continue
            cid = cat_ids.setdefault(c, len(cat_ids))
            categories.setdefault(item_ids[i], set()).add(cid)
        num_categories = len(cat_ids)
    return InteractionLog(users, len(item_ids), categories, num_categories)


def _densify(users: dict[int, list[int]], categories: dict[int, set[int]], num_categories: int) -> InteractionLog:
    item_map: dict[int, int] = {}
    for u in sorted(users):
        for i in users[u]:
            item_map.setdefault(i, len(item_map) + 1)
    new_users = {}
    for new_u, u in enumerate(sorted(users), start=1):
        new_users[new_u] = [item_map[i] for i in users[u]]
    new_cats = {item_map[i]: set(c) for i, c in categories.items() if i in item_map}
    return InteractionLog(new_users, len(item_map), new_cats, num_categories)


def filter_min_interactions(log_: InteractionLog, k: int = 10) -> InteractionLog:
    """Drop users and items with fewer than ``k`` interactions until stable."""
    if k < 1:
        raise ValueError("k must be >= 1")
    users = {u: list(s) for u, s in log_.users.items()}
    while True:
        counts: dict[int, int] = {}
        for seq in users.values():
            for i in seq:
                counts[i] = counts.get(i, 0) + 1
        keep_items = {i for i, c in counts.items() if c >= k}
        changed = len(keep_items) != len(counts)
        nxt = {}
        for u, seq in users.items():
            seq2 = [i for i in seq if i in keep_items]
            if len(seq2) >= k:
                nxt[u] = seq2
            else:
                changed = True
        if not changed:
            break
        users = nxt
    if not users:
        raise EmptyLogError(f"no users left after filtering at k={k}")
    return _densify(users, log_.categories, log_.num_categories)


def pad_truncate(seq, n: int) -> FixedSequence:
    """Keep the most recent ``n`` items and left-pad with zeros."""
    if n < 1:
        raise ValueError("n must be >= 1")
    tail = list(seq)[-n:] if len(seq) else []
    items = np.zeros(n, dtype=np.int64)
    if tail:
        items[n - len(tail):] = tail
    return FixedSequence(items=items, mask=items > 0)


def leave_one_out_split(log_: InteractionLog, n: int) -> SplitSet:
    """Hold out each user's last item for test and second-to-last for validation.

    The training region is everything before the validation target. Its
    first item is supervised from an empty prefix, so a length-3 user still
    yields one training target.
    """
    train, valid, test = [], [], []
    valid_users, test_users = [], []
    skipped = 0
    for u in sorted(log_.users):
        seq = log_.users[u]
        if len(seq) < 3:
            skipped += 1
            continue
        region = seq[:-2]
        inputs = [0] + region[:-1]
        # the input window and target window slide together
        padded_in = pad_truncate(inputs, n).items
        padded_tgt = pad_truncate(region, n).items
        train.append(TrainSequence(u, padded_in, padded_tgt, np.array(sorted(set(region)), dtype=np.int64)))

        v = pad_truncate(seq[:-2], n)
        v.target = seq[-2]
        valid.append(v)
        valid_users.append(u)

        t = pad_truncate(seq[:-1], n)
        t.target = seq[-1]
        test.append(t)
        test_users.append(u)
    if skipped:
        log.warning("skipped %d users with fewer than 3 interactions", skipped)
    return SplitSet(train, valid, test, valid_users, test_users, skipped)


def negative_sample(target: int, user_items, num_items: int, rng: RngStream) -> int:
    """Uniform draw from items the user never touched (never 0)."""
    owned = set(int(i) for i in user_items) | {int(target)}
    owned.discard(0)
    if len(owned) >= num_items:
        raise SamplingError("no item left to sample as a negative")
    while True:
        cand = int(rng.integers(1, num_items + 1))
        if cand not in owned:
            return cand


def sample_negatives(targets: np.ndarray, histories: list[np.ndarray], num_items: int, rng: RngStream) -> np.ndarray:
    """Vectorised ``negative_sample`` for a (B, n) target grid.

    Rejected draws are redrawn in rounds; zero targets get a zero negative.
    """
    out = np.zeros_like(targets)
    need = targets > 0
    for b, hist in enumerate(histories):
        if len(set(hist.tolist()) - {0}) >= num_items:
            raise SamplingError(f"row {b}: user owns every item")
    pending = need.copy()
    while pending.any():
        draws = rng.integers(1, num_items + 1, targets.shape)
        ok = pending.copy()
        for b, hist in enumerate(histories):
            if ok[b].any():
                ok[b] &= ~np.isin(draws[b], hist)
        ok &= draws != targets
        out[ok] = draws[ok]
        pending &= ~ok
    return out


def dataset_stats(log_: InteractionLog) -> dict:
    n_users = len(log_.users)
    n_inter = log_.num_interactions
    return {
        "users": n_users,
        "items": log_.num_items,
        "interactions": n_inter,
        "density": n_inter / (n_users * log_.num_items) if n_users and log_.num_items else 0.0,
        "categories": log_.num_categories,
    }


def save_log(log_: InteractionLog, path) -> None:
    Path(path).write_text(json.dumps(log_.to_json(), sort_keys=True) + "\n", encoding="utf-8")


def load_log(path) -> InteractionLog:
    return InteractionLog.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
