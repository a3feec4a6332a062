import random

import pytest
from hypothesis import given, settings, strategies as st

from a1lite import drstore
from a1lite.db import Database
from a1lite.drstore import (
    EDGE, VERTEX, VERTEX_V, DurableStore, FlushStatus, LogEntry, Op, gc_tombstones,
)
from a1lite.errors import CorruptTable, DurableUnavailable, MissingWatermark
from a1lite.encoding import encode_key
from a1lite.scenario import observed_state
from a1lite.simnet import ClusterConfig

from conftest import PERSON

from dr_workload import Workload, dump, replay, rows_state, superset_violations


def test_file_roundtrip_and_erase(tmp_path):
    path = tmp_path / "t.a1d"
    d = DurableStore(path)
    d.be_upsert(VERTEX, b"a", b"1", 5)
    d.be_upsert(VERTEX, b"b", None, 6)
    d.versioned_insert(VERTEX, b"a", b"1", 5)
    d.set_watermark(4)
    d.put(EDGE, b"gone", b"x", 1)
    d.erase(EDGE, b"gone")
    d.close()
    again = DurableStore(path)
    assert again.snapshot_tables() == d.snapshot_tables()
    assert again.get(VERTEX, b"b") == (6, None)
    assert again.get(EDGE, b"gone") is None
    assert again.watermark() == 4
    again.compact()
    again.close()
    assert DurableStore(path).snapshot_tables() == d.snapshot_tables()


def test_truncated_file_is_corrupt(tmp_path):
    path = tmp_path / "t.a1d"
    d = DurableStore(path)
    d.be_upsert(VERTEX, b"key", b"value", 1)
    d.close()
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CorruptTable):
        DurableStore(path)


def test_stale_upsert_is_discarded():
    d = DurableStore()
    assert d.be_upsert(VERTEX, b"k", b"new", 9)
    assert not d.be_upsert(VERTEX, b"k", b"old", 3)
    assert not d.be_upsert(VERTEX, b"k", b"same", 9)
    assert d.get(VERTEX, b"k") == (9, b"new")
    d.available = False
    with pytest.raises(DurableUnavailable):
        d.be_upsert(VERTEX, b"k", b"x", 10)


def test_log_entry_roundtrip():
    for e in (LogEntry(7, EDGE, Op.DELETE, b"\x00k", None, 3),
              LogEntry(2**40, VERTEX, Op.UPSERT, b"", b"{}", 0)):
        assert LogEntry.decode(e.encode()) == e


entries = st.lists(
    st.builds(LogEntry, st.integers(1, 30), st.sampled_from([VERTEX, EDGE]),
              st.sampled_from(list(Op)), st.sampled_from([b"a", b"b", b"c"]),
              st.sampled_from([b"x", b"y", b"z"])),
    max_size=25,
).map(lambda es: list({(e.table, e.key, e.commit_ts): e for e in es}.values()))


@settings(max_examples=150, deadline=None)
@given(entries, st.randoms(use_true_random=False))
def test_replay_is_order_independent(log, rnd):
    """Any permutation, with duplicates, lands on the same tables."""
    base = replay(log).snapshot_tables()
    shuffled = log + [rnd.choice(log) for _ in range(len(log) // 2)] if log else []
    rnd.shuffle(shuffled)
    assert replay(shuffled).snapshot_tables() == base


def test_unavailable_durable_store_defers_until_sweep(db):
    g = db.create_graph("dr", dr_mode="both")
    g.define_type(PERSON)
    durable = db.durable_for("dr")
    durable.available = False
    # the commit is acknowledged even though its flush was deferred
    g.create_vertex("Person", {"id": "a"})
    (entry,) = g.dr.pending()
    assert g.dr.flush_entry(entry.addr) is FlushStatus.DEFERRED
    assert g.dr.sweeper_run() == 0
    durable.available = True
    assert g.dr.sweeper_run() == 1
    assert g.dr.pending() == []
    assert durable.watermark() >= entry.commit_ts
    assert durable.get(VERTEX, encode_key("Person", "a"))[0] == entry.commit_ts


def test_consistent_recovery_is_prefix_at_watermark():
    w = Workload(4)
    for _ in range(120):
        w.step()
    snap = w.durable.clone()
    t_r, v, e, _ = drstore.recovered_rows(snap, "consistent")
    assert dump(rows_state(v, e)) == dump(w.state_at(t_r))
    _, bv, be, _ = drstore.recovered_rows(snap, "best-effort")
    best = rows_state(bv, be)
    assert superset_violations(snap, rows_state(v, e), best) == []
    assert all(a in best[0] and b in best[0] for a, _, b in best[1])


def test_recover_installs_graph_after_full_sweep():
    w = Workload(8)
    for _ in range(60):
        w.step()
    w.finish()
    want = w.state_at(w.durable.watermark())
    assert dump(want) == dump(w.state_at(w.shadow[-1][0]))
    for mode in ("consistent", "best-effort"):
        fresh = Database(config=ClusterConfig(rng_seed=2), dr_mode="none")
        target, report = fresh.recover(w.durable, mode, "w")
        verts, edges = observed_state(target)
        assert verts == set(want[0]) and edges == set(want[1])
        assert target.dangling_scan() == []


def test_missing_watermark():
    d = DurableStore()
    d.versioned_insert(VERTEX_V, b"k", b"{}", 3)
    with pytest.raises(MissingWatermark):
        drstore.recover_consistent(d)
    assert drstore.recover_best_effort(d).t_r is None


def test_gc_tombstones_keeps_recovery_answers():
    w = Workload(6)
    for _ in range(150):
        w.step()
    w.finish()
    before = {m: drstore.recovered_rows(w.durable, m)[1:3] for m in ("consistent", "best-effort")}
    removed = gc_tombstones(w.durable, w.durable.watermark() + 1)
    assert removed > 0
    for m, rows in before.items():
        assert drstore.recovered_rows(w.durable, m)[1:3] == rows
    assert all(val is not None for t in (VERTEX, EDGE) for _, (_, val) in w.durable.items(t))


def test_workload_replay_permutations():
    w = Workload(2)
    for _ in range(80):
        w.step()
    w.finish()
    base = replay(w.applied).snapshot_tables()
    rng = random.Random(0)
    for _ in range(5):
        log = w.applied + rng.sample(w.applied, len(w.applied) // 3)
        rng.shuffle(log)
        assert replay(log).snapshot_tables() == base
