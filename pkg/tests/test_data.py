import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from genatt.data import (
    DataError,
    EmptyLogError,
    InteractionLog,
    SamplingError,
    dataset_stats,
    filter_min_interactions,
    leave_one_out_split,
    load_interactions,
    load_log,
    negative_sample,
    pad_truncate,
    sample_negatives,
    save_log,
)
from genatt.synthetic import synthetic_log, write_tsv
from genatt.tensor import RngStream


def _write(tmp_path, name, rows):
    p = tmp_path / name
    p.write_text("".join("\t".join(map(str, r)) + "\n" for r in rows), encoding="utf-8")
    return p


def test_load_two_rows(tmp_path):
    log = load_interactions(_write(tmp_path, "a.tsv", [("u1", "i1", 10), ("u1", "i2", 20)]))
    assert log.users == {1: [1, 2]} and log.num_items == 2


def test_load_sorts_by_timestamp(tmp_path):
    log = load_interactions(_write(tmp_path, "a.tsv", [("u1", "i2", 20), ("u1", "i1", 10)]))
    # i2 is seen first in the file so it becomes id 1
    assert log.users[1] == [2, 1]


def test_load_reindex_matches_naive_oracle(tmp_path):
    rows = [("a", "x", 5), ("b", "y", 1), ("a", "z", 2), ("c", "x", 3), ("b", "w", 0), ("c", "v", 9), ("a", "v", 7)]
    log = load_interactions(_write(tmp_path, "a.tsv", rows))
    # oracle: map raw ids by first appearance, then sort each user by time
    umap, imap = {}, {}
    for u, i, _ in rows:
        umap.setdefault(u, len(umap) + 1)
        imap.setdefault(i, len(imap) + 1)
    expected = {}
    for u in umap:
        evs = sorted((t, imap[i]) for uu, i, t in rows if uu == u)
        expected[umap[u]] = [i for _, i in evs]
    assert log.users == expected
    assert log.num_items == 5


def test_load_comments_and_categories(tmp_path):
    p = tmp_path / "a.tsv"
    p.write_text("# header\nu1\ti1\t1\nu1\ti2\t2\n", encoding="utf-8")
    c = _write(tmp_path, "c.tsv", [("i1", "A"), ("i1", "B"), ("i2", "B"), ("i9", "C")])
    log = load_interactions(p, c)
    assert log.categories == {1: {0, 1}, 2: {1}}
    assert log.num_categories == 2


def test_load_bad_row_reports_line(tmp_path):
    p = tmp_path / "a.tsv"
    p.write_text("u1\ti1\t1\nu2\ti2\n", encoding="utf-8")
    with pytest.raises(DataError, match=":2:"):
        load_interactions(p)


def test_load_empty_file(tmp_path):
    p = tmp_path / "a.tsv"
    p.write_text("", encoding="utf-8")
    with pytest.raises(EmptyLogError):
        load_interactions(p)


def test_filter_k1_identity():
    log = InteractionLog({1: [1, 2], 2: [2]}, 2)
    assert filter_min_interactions(log, 1).users == log.users


def test_filter_drops_short_user():
    log = InteractionLog({1: [1], 2: [1, 2], 3: [1, 2]}, 2)
    out = filter_min_interactions(log, 2)
    assert len(out.users) == 2


def _brute_filter(users, k):
    users = {u: list(s) for u, s in users.items()}
    while True:
        counts = {}
        for s in users.values():
            for i in s:
                counts[i] = counts.get(i, 0) + 1
        nxt = {u: [i for i in s if counts[i] >= k] for u, s in users.items()}
        nxt = {u: s for u, s in nxt.items() if len(s) >= k}
        if nxt == users:
            return users
        users = nxt


def test_filter_cascade_matches_brute_force():
    # item 4 is rare; dropping it pushes user 3 below k, which then makes item 3 rare
    users = {1: [1, 2], 2: [1, 2], 3: [3, 4], 4: [3]}
    out = filter_min_interactions(InteractionLog(users, 5), 2)
    expected = _brute_filter(users, 2)
    assert sorted(len(s) for s in out.users.values()) == sorted(len(s) for s in expected.values())
    assert out.num_interactions == sum(len(s) for s in expected.values())
    assert len(out.users) == len(expected) == 2


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.integers(1, 30), st.lists(st.integers(1, 12), min_size=1, max_size=10), min_size=1, max_size=15), st.integers(1, 4))
def test_filter_property_matches_brute(users, k):
    expected = _brute_filter(users, k)
    if not expected:
        with pytest.raises(EmptyLogError):
            filter_min_interactions(InteractionLog(users, 12), k)
        return
    out = filter_min_interactions(InteractionLog(users, 12), k)
    assert out.num_interactions == sum(len(s) for s in expected.values())
    assert len(out.users) == len(expected)
    assert out.num_items == len({i for s in expected.values() for i in s})


def test_filter_everything_removed():
    with pytest.raises(EmptyLogError):
        filter_min_interactions(InteractionLog({1: [1]}, 1), 5)


@pytest.mark.parametrize(
    "seq, n, items, mask",
    [
        (list(range(1, 8)), 5, [3, 4, 5, 6, 7], [True] * 5),
        ([1, 2, 3], 5, [0, 0, 1, 2, 3], [False, False, True, True, True]),
        ([], 3, [0, 0, 0], [False] * 3),
    ],
)
def test_pad_truncate(seq, n, items, mask):
    out = pad_truncate(seq, n)
    assert out.items.tolist() == items and out.mask.tolist() == mask


def test_split_abcd():
    split = leave_one_out_split(InteractionLog({1: [1, 2, 3, 4]}, 4), 4)
    assert split.test[0].items.tolist() == [0, 1, 2, 3] and split.test[0].target == 4
    assert split.valid[0].items.tolist() == [0, 0, 1, 2] and split.valid[0].target == 3
    assert split.manifest() == {"1": {"test_target": 4, "valid_target": 3}}


def test_split_length3_one_target_and_skip():
    split = leave_one_out_split(InteractionLog({1: [1, 2, 3], 2: [1, 2]}, 4), 4)
    assert int((split.train[0].targets > 0).sum()) == 1
    assert split.skipped == 1 and split.test_users == [1]


def test_split_no_leakage_scan():
    log = synthetic_log(users=100, items=60, cats=6, seed=4)
    split = leave_one_out_split(log, 20)
    for tr, v, t, u in zip(split.train, split.valid, split.test, split.test_users):
        seq = log.users[u]
        assert t.target == seq[-1] and v.target == seq[-2]
        assert t.target not in v.items and t.target not in tr.targets and t.target not in tr.items
        assert v.target not in tr.targets and v.target not in tr.items
        # each input position only sees items before its own target
        for i in range(len(tr.items)):
            if tr.targets[i]:
                pos = seq.index(int(tr.targets[i]))
                assert set(tr.items[: i + 1].tolist()) - {0} <= set(seq[:pos])


def test_negative_forced_outcome():
    rng = RngStream(0)
    assert all(negative_sample(1, {1}, 2, rng) == 2 for _ in range(50))


def test_negative_sampling_error():
    with pytest.raises(SamplingError):
        negative_sample(1, {1, 2}, 2, RngStream(0))


def test_negative_uniform_chi_square():
    rng = RngStream(1)
    owned = {1, 2, 3, 4, 5}
    draws = [negative_sample(3, owned, 20, rng) for _ in range(6000)]
    counts = np.bincount(draws, minlength=21)[6:]
    assert set(draws) <= set(range(6, 21))
    assert stats.chisquare(counts).pvalue > 1e-3


def test_sample_negatives_vectorised():
    targets = np.array([[0, 1, 2], [3, 4, 0]])
    hist = [np.array([1, 2]), np.array([3, 4])]
    neg = sample_negatives(targets, hist, 6, RngStream(0))
    assert neg[0, 0] == 0 and neg[1, 2] == 0
    assert not np.isin(neg[0, 1:], hist[0]).any() and not np.isin(neg[1, :2], hist[1]).any()


def test_stats_and_roundtrip(tmp_path):
    log = InteractionLog({1: [1, 2], 2: [2, 3, 1]}, 3, {1: {0}}, 1)
    assert dataset_stats(log) == {"users": 2, "items": 3, "interactions": 5, "density": 5 / 6, "categories": 1}
    save_log(log, tmp_path / "l.json")
    assert load_log(tmp_path / "l.json") == log


def test_synthetic_tsv_roundtrip(tmp_path):
    log = synthetic_log(users=30, items=40, cats=4, seed=2)
    write_tsv(log, tmp_path / "i.tsv", tmp_path / "c.tsv")
    back = load_interactions(tmp_path / "i.tsv", tmp_path / "c.tsv")
    assert back.num_interactions == log.num_interactions
    assert all(len(set(s)) == len(s) for s in log.users.values())
