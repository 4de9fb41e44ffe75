"""Snapshot store tests: retention, history lookup, merge, binary format."""

import numpy as np
import pytest

from ecdctr.embstore import (
    EmbeddingSnapshot,
    SnapshotStore,
    load_snapshot,
    save_snapshot,
    snapshot_file_size,
)
from ecdctr.errors import (
    ConfigError,
    FormatError,
    InsufficientHistoryError,
    OrderingError,
)
from ecdctr.nncore import AttentionParams, mean_pool, self_attention


def snap(side, tag, ids, d=4, seed=0):
    rng = np.random.default_rng(seed + tag)
    return EmbeddingSnapshot(side=side, month_tag=tag, dim=d,
                             ids=np.array(ids, dtype=np.uint64),
                             vectors=rng.normal(size=(len(ids), d)).astype(np.float32))


def test_retention_keeps_last_three():
    store = SnapshotStore(retention_k=3)
    for m in range(1, 6):
        store.put_snapshot(snap("user", m, [1, 2]))
    assert store.tags("user") == [3, 4, 5]


def test_first_insert_into_empty_store():
    store = SnapshotStore()
    store.put_snapshot(snap("item", 7, [1]))
    assert store.tags("item") == [7]


def test_out_of_order_rejected():
    store = SnapshotStore()
    store.put_snapshot(snap("user", 3, [1]))
    with pytest.raises(OrderingError):
        store.put_snapshot(snap("user", 3, [1]))
    with pytest.raises(OrderingError):
        store.put_snapshot(snap("user", 2, [1]))


def test_retention_per_side_independent():
    # interleave in several orders; per-side counts must be independent
    for user_months, item_months in [
            ([1, 2, 3, 4], [1]), ([1, 2], [1, 2, 3, 4, 5]), ([1, 2, 3], [2, 4])]:
        store = SnapshotStore(retention_k=3)
        events = [("user", m) for m in user_months] + \
                 [("item", m) for m in item_months]
        events.sort(key=lambda e: (e[1], e[0]))
        for side, m in events:
            store.put_snapshot(snap(side, m, [0]))
        assert store.tags("user") == user_months[-3:]
        assert store.tags("item") == item_months[-3:]


def test_lookup_missing_id_gives_zeros():
    store = SnapshotStore()
    for m in (1, 2, 3):
        store.put_snapshot(snap("user", m, [10, 20]))
    h = store.lookup_history("user", 999)
    assert len(h) == 3
    for v in h:
        np.testing.assert_array_equal(v, np.zeros(4, dtype=np.float32))


def test_lookup_newest_first_and_partial_presence():
    store = SnapshotStore()
    store.put_snapshot(snap("user", 1, [5]))
    store.put_snapshot(snap("user", 2, [5]))
    newest = EmbeddingSnapshot(side="user", month_tag=3, dim=4,
                               ids=np.array([7], dtype=np.uint64),
                               vectors=np.full((1, 4), 2.5, dtype=np.float32))
    store.put_snapshot(newest)
    h = store.lookup_history("user", 7)
    np.testing.assert_array_equal(h[0], np.full(4, 2.5, dtype=np.float32))
    np.testing.assert_array_equal(h[1], np.zeros(4))
    np.testing.assert_array_equal(h[2], np.zeros(4))


def test_lookup_matches_naive_scan():
    store = SnapshotStore()
    rng = np.random.default_rng(0)
    months = []
    for m in (4, 5, 6):
        ids = np.sort(rng.choice(100, size=30, replace=False))
        s = snap("item", m, ids, seed=9)
        months.append(s)
        store.put_snapshot(s)
    for id_ in range(100):
        h = store.lookup_history("item", id_)
        for j, s in enumerate(months[::-1]):
            hit = np.flatnonzero(s.ids == id_)
            expect = s.vectors[hit[0]] if len(hit) else np.zeros(4)
            np.testing.assert_array_equal(h[j], expect)


def test_lookup_requires_three_snapshots():
    store = SnapshotStore()
    store.put_snapshot(snap("user", 1, [1]))
    with pytest.raises(InsufficientHistoryError):
        store.lookup_history("user", 1)


def test_merge_uniform_attention_is_mean():
    store = SnapshotStore()
    for m in (1, 2, 3):
        store.put_snapshot(snap("user", m, [3, 8]))
    d = 4
    attn = AttentionParams(np.zeros((d, d)), np.zeros((d, d)), np.eye(d))
    merged = store.merge_tables("user", attn)
    for id_ in (3, 8):
        expect = np.mean([s.get(id_) for s in store.snapshots["user"]], axis=0)
        np.testing.assert_allclose(merged.get(id_), expect, atol=1e-6)


def test_merge_covers_union_only():
    store = SnapshotStore()
    store.put_snapshot(snap("user", 1, [1]))
    store.put_snapshot(snap("user", 2, [2]))
    store.put_snapshot(snap("user", 3, [3]))
    d = 4
    attn = AttentionParams(np.zeros((d, d)), np.zeros((d, d)), np.eye(d))
    merged = store.merge_tables("user", attn)
    assert set(merged.ids.tolist()) == {1, 2, 3}
    np.testing.assert_array_equal(merged.get(99), np.zeros(d, dtype=np.float32))


def test_merge_matches_per_id_recompute():
    rng = np.random.default_rng(1)
    store = SnapshotStore()
    d = 4
    for m in (1, 2, 3):
        ids = np.sort(rng.choice(80, size=50, replace=False))
        store.put_snapshot(snap("item", m, ids, seed=5))
    attn = AttentionParams(*(rng.normal(size=(d, d)) for _ in range(3)))
    merged = store.merge_tables("item", attn)
    for id_ in merged.ids:
        triple = np.stack(store.lookup_history("item", int(id_))).astype(np.float64)
        expect = mean_pool(self_attention(triple, attn))
        assert np.max(np.abs(merged.get(int(id_)) - expect)) < 1e-6


def test_merge_dim_mismatch():
    store = SnapshotStore()
    for m in (1, 2, 3):
        store.put_snapshot(snap("user", m, [1], d=4))
    attn = AttentionParams(np.zeros((5, 5)), np.zeros((5, 5)), np.eye(5))
    with pytest.raises(ConfigError):
        store.merge_tables("user", attn)


# -- binary format ----------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    s = snap("user", 9, [1, 5, 9], d=6, seed=3)
    p = tmp_path / "s.snap"
    save_snapshot(s, p)
    back = load_snapshot(p)
    assert back == s


def test_corrupt_magic_rejected(tmp_path):
    s = snap("user", 1, [1])
    p = tmp_path / "s.snap"
    save_snapshot(s, p)
    raw = bytearray(p.read_bytes())
    raw[:4] = b"NOPE"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_snapshot(p)


def test_truncated_file_rejected(tmp_path):
    s = snap("item", 1, [1, 2, 3])
    p = tmp_path / "s.snap"
    save_snapshot(s, p)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(FormatError, match="truncated"):
        load_snapshot(p)


def test_duplicate_id_rejected(tmp_path):
    s = snap("item", 1, [1, 2])
    p = tmp_path / "s.snap"
    save_snapshot(s, p)
    raw = bytearray(p.read_bytes())
    # overwrite second record's id with the first's
    rec = 8 + 4 * 4
    raw[21 + rec:21 + rec + 8] = raw[21:21 + 8]
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_snapshot(p)


def test_file_size_formula(tmp_path):
    d = 16
    s = snap("user", 2, list(range(100)), d=d)
    p = tmp_path / "s.snap"
    save_snapshot(s, p)
    assert p.stat().st_size == snapshot_file_size(100, d)
    # the documented layout for a million entries
    assert snapshot_file_size(1_000_000, d) == 21 + 1_000_000 * (8 + 4 * d)
