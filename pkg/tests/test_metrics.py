import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genatt.checks import metric_oracle_mismatches
from genatt.data import FixedSequence, InteractionLog, pad_truncate
from genatt.evaluation import evaluate, popularity_scorer, random_scorer, rank_sequences
from genatt.metrics import (
    ProtocolError,
    category_coverage,
    category_vectors,
    intra_list_distance,
    metric_table,
    mrr,
    ndcg_at,
    rank_all,
    recall_at,
    table_rows,
)


def test_rank_simple_and_ties():
    assert rank_all(np.array([[3.0, 1.0, 2.0]]))[0].items.tolist() == [1, 3, 2]
    assert rank_all(np.array([[2.0, 2.0]]))[0].items.tolist() == [1, 2]


def test_rank_matches_sort_oracle():
    r = np.random.default_rng(0)
    scores = r.integers(0, 5, (20, 12)).astype(float)
    targets = r.integers(1, 13, 20)
    for row, lst in zip(scores, rank_all(scores, targets, top=12)):
        oracle = sorted(range(1, 13), key=lambda i: (-row[i - 1], i))
        assert lst.items.tolist() == oracle
        assert lst.target_rank == oracle.index(targets[lst.user]) + 1


def test_rank_exclusions():
    lst = rank_all(np.array([[5.0, 4.0, 3.0]]), targets=[3], exclusions=[{1}])[0]
    assert lst.items.tolist() == [2, 3] and lst.target_rank == 2
    with pytest.raises(ProtocolError):
        rank_all(np.array([[5.0, 4.0, 3.0]]), targets=[1], exclusions=[{1}])


@pytest.mark.parametrize("rank, N, expected", [(1, 5, 1.0), (3, 5, 0.5), (6, 5, 0.0)])
def test_ndcg(rank, N, expected):
    assert abs(ndcg_at(rank, N) - expected) <= 1e-12


def test_recall_mrr():
    assert recall_at(4, 5) == 1 and recall_at(4, 3) == 0 and mrr(4) == 0.25
    assert recall_at(1, 5) == ndcg_at(1, 5) == mrr(1) == 1.0


def _lists(ranks):
    return [type("R", (), {"target_rank": r, "items": np.array([])})() for r in ranks]


def test_mrr_three_users():
    assert metric_table(_lists([1, 2, 10]))["mrr"] == pytest.approx((1 + 0.5 + 0.1) / 3, abs=1e-12)
    assert metric_table(_lists([1, 2, 10]))["mrr"] == pytest.approx(0.5333, abs=1e-4)


def test_category_coverage():
    cats = {1: {0}, 2: {1}, 3: {2, 0}}
    assert category_coverage([1, 2, 3], cats, 10, 5) == pytest.approx(0.3)
    assert category_coverage([1, 1, 1], {1: {4}}, 10, 3) == pytest.approx(0.1)
    assert category_coverage([], cats, 10, 5) == 0.0


def test_ild():
    vec = category_vectors({1: {0}, 2: {0}, 3: {1}}, 3, 2)
    assert intra_list_distance([1, 2], vec, 5) == pytest.approx(0.0)
    assert intra_list_distance([1, 3], vec, 5) == pytest.approx(1.0)
    assert intra_list_distance([1, 2, 3], vec, 5) == pytest.approx(2 / 3)
    assert math.isnan(intra_list_distance([1], vec, 5))


def test_all_rankings_of_six_items_match_oracle():
    assert metric_oracle_mismatches() == 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=30))
def test_metric_properties(ranks):
    table = metric_table(_lists(ranks))
    for N, M in ((5, 10), (10, 20)):
        assert table[f"ndcg@{N}"] <= table[f"ndcg@{M}"] + 1e-15
        assert table[f"recall@{N}"] <= table[f"recall@{M}"]
    for N in (5, 10, 20):
        assert 0 <= table[f"ndcg@{N}"] <= table[f"recall@{N}"] <= 1


def test_oracle_scorer_is_perfect():
    seqs = [FixedSequence(np.array([0, 2, 3]), np.array([False, True, True]), target=t) for t in (1, 4, 5)]

    def oracle(items):
        s = np.zeros((items.shape[0], 6))
        for b, sq in enumerate(seqs):
            s[b, sq.target - 1] = 1.0
        return s

    table = evaluate(oracle, seqs)
    assert all(table[k] == 1.0 for k in ("ndcg@5", "recall@5", "ndcg@20", "mrr"))


def test_random_scorer_recall10():
    seqs = [FixedSequence(np.zeros(3, dtype=np.int64), np.zeros(3, bool), target=t) for t in np.random.default_rng(0).integers(1, 101, 1000)]
    table = evaluate(random_scorer(100, seed=3), seqs)
    assert abs(table["recall@10"] - 0.10) <= 0.03


def test_five_user_end_to_end_brute_force():
    r = np.random.default_rng(7)
    V, C = 9, 3
    cats = {i: {int(i % C)} | ({(i + 1) % C} if i % 4 == 0 else set()) for i in range(1, V + 1)}
    log = InteractionLog({}, V, cats, C)
    seqs = []
    for _ in range(5):
        hist = r.choice(np.arange(1, V + 1), 4, replace=False).tolist()
        s = pad_truncate(hist[:3], 4)
        s.target = hist[3]
        seqs.append(s)
    raw = r.normal(size=(5, V))
    table = evaluate(lambda items: raw, seqs, log)
    # brute force from raw scores
    exp = {k: [] for k in table}
    for b, s in enumerate(seqs):
        cands = [i for i in range(1, V + 1) if i not in set(s.items.tolist()) - {0}]
        order = sorted(cands, key=lambda i: (-raw[b, i - 1], i))
        rank = order.index(s.target) + 1
        for N in (5, 10, 20):
            exp[f"ndcg@{N}"].append(1 / math.log2(rank + 1) if rank <= N else 0.0)
            exp[f"recall@{N}"].append(float(rank <= N))
            top = order[:N]
            exp[f"cc@{N}"].append(len(set().union(*(cats[i] for i in top))) / C)
            d = []
            for x in range(len(top)):
                for y in range(x + 1, len(top)):
                    a, c = cats[top[x]], cats[top[y]]
                    d.append(1 - len(a & c) / math.sqrt(len(a) * len(c)))
            exp[f"ild@{N}"].append(sum(d) / len(d))
        exp["mrr"].append(1 / rank)
    for k, v in exp.items():
        assert table[k] == pytest.approx(sum(v) / len(v), abs=1e-12), k


def test_history_exclusion_keeps_target():
    s = FixedSequence(np.array([0, 2, 3]), np.array([False, True, True]), target=3)
    lst = rank_sequences(lambda items: np.array([[0.0, 5.0, 1.0, 0.5]]), [s])[0]
    assert 2 not in lst.items.tolist() and lst.target_rank == 1


def test_popularity_scorer_and_rows():
    score = popularity_scorer(np.array([1.0, 5.0, 2.0]))
    assert score(np.zeros((2, 4))).shape == (2, 3)
    rows = table_rows({"ndcg@5": 0.5, "mrr": 0.25})
    assert rows == [("ndcg", "5", 0.5), ("mrr", "", 0.25)]
