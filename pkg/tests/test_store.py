import threading

import pytest
from hypothesis import given, settings, strategies as st

from a1lite.errors import BadSize, InvalidAddr, InvalidConfig, NodeUnreachable, StorePaused, TxnStateError
from a1lite.simnet import ClusterConfig, FaultKind, Message, spawn_cluster
from a1lite.store import Addr, FatRef, Hint, Status, Store, run_transaction


def put(store, payload: bytes, node=None) -> Addr:
    def fn(tx):
        buf = store.alloc(tx, max(64, len(payload)))
        buf.write(0, payload)
        return buf.addr
    return run_transaction(store, fn, node=node)


def get(store, addr) -> bytes:
    tx = store.create_transaction(read_only=True)
    data = bytes(store.read(tx, addr).data)
    store.commit(tx)
    return data


# -- cluster -------------------------------------------------------------------

def test_config_rejects_too_few_nodes_or_domains():
    with pytest.raises(InvalidConfig):
        spawn_cluster(node_count=2)
    with pytest.raises(InvalidConfig):
        spawn_cluster(node_count=5, fault_domain_count=2)


def test_rpc_and_partition():
    c = spawn_cluster(node_count=3)
    assert c.send_rpc(1, Message("ping", None)) == "pong"
    c.inject_fault(1, FaultKind.PARTITION)
    with pytest.raises(NodeUnreachable):
        c.send_rpc(1, Message("ping", None))
    c.inject_fault(1, FaultKind.RESTART)
    assert c.send_rpc(1, Message("ping", None)) == "pong"


def test_duplicate_request_ids_are_delivered_once():
    c = spawn_cluster(node_count=3)
    calls = []
    c.register_handler("inc", lambda node, body: calls.append(body) or len(calls))
    m = Message("inc", 1)
    assert c.send_rpc(0, m) == 1
    assert c.send_rpc(0, m) == 1
    assert calls == [1]


def test_replicas_in_distinct_fault_domains(store):
    for _ in range(20):
        put(store, b"x" * 60000)
    c = store.cluster
    for rid, reps in store.placement().items():
        assert len(reps) == 3
        assert len({c.fault_domain_of(n) for n in reps}) == 3


# -- objects and transactions -----------------------------------------------------

def test_alloc_read_write_free(store):
    a = put(store, b"hello")
    assert get(store, a)[:5] == b"hello"

    def upd(tx):
        store.open_for_write(tx, store.read(tx, a)).write(0, b"HELLO")
    run_transaction(store, upd)
    assert get(store, a)[:5] == b"HELLO"
    run_transaction(store, lambda tx: store.free(tx, a))
    with pytest.raises(InvalidAddr):
        get(store, a)


def test_bad_sizes(store):
    tx = store.create_transaction()
    with pytest.raises(BadSize):
        store.alloc(tx, 10)
    with pytest.raises(BadSize):
        store.alloc(tx, (1 << 20) + 1)
    store.abort(tx)


def test_read_only_cannot_write(store):
    a = put(store, b"x")
    tx = store.create_transaction(read_only=True)
    with pytest.raises(TxnStateError):
        store.open_for_write(tx, store.read(tx, a))


def test_fat_ref_roundtrip():
    r = FatRef(Addr(3, 128), 200)
    assert FatRef.unpack(r.pack()) == r


def test_write_write_conflict_aborts_one(store):
    a = put(store, b"\0" * 8)
    t1, t2 = store.create_transaction(), store.create_transaction()
    for t in (t1, t2):
        store.open_for_write(t, store.read(t, a)).write(0, b"\1")
    assert store.commit(t1) is Status.COMMITTED
    assert store.commit(t2) is Status.ABORTED_CONFLICT


def test_snapshot_reads_ignore_later_commits(store):
    a = put(store, b"old")
    reader = store.create_transaction(read_only=True)

    def upd(tx):
        store.open_for_write(tx, store.read(tx, a)).write(0, b"new")
    run_transaction(store, upd)
    assert bytes(store.read(reader, a).data)[:3] == b"old"
    assert get(store, a)[:3] == b"new"


def test_near_hint_colocates(store):
    a = put(store, b"a", node=2)
    b = run_transaction(store, lambda tx: store.alloc(tx, 64, Hint.near(a)).addr)
    assert b.region_id == a.region_id
    c = run_transaction(store, lambda tx: store.alloc(tx, 64, Hint.on_node(4)).addr)
    assert store.node_of(c) == 4


def test_process_crash_keeps_memory_power_loss_drops_it():
    c = spawn_cluster(node_count=3, rng_seed=2)
    s = Store(c)
    a = put(s, b"keep")
    for n in range(3):
        c.inject_fault(n, FaultKind.PROCESS_CRASH)
    for n in range(3):
        c.inject_fault(n, FaultKind.RESTART)
    assert get(s, a)[:4] == b"keep"
    for n in range(3):
        c.inject_fault(n, FaultKind.POWER_LOSS)
    assert s.region_count() == 0
    with pytest.raises(NodeUnreachable):
        s.create_transaction()


def test_retained_copy_restores_region_until_declared_lost():
    c = spawn_cluster(node_count=3, rng_seed=2)
    s = Store(c)
    put(s, b"x")
    for n in range(3):
        c.inject_fault(n, FaultKind.PROCESS_CRASH)
    c.inject_fault(0, FaultKind.RESTART)
    c.nodes[1].alive = c.nodes[2].alive = False
    # node 0's retained copy brings the region back
    assert not s.paused()
    s.declare_lost(0)
    assert s.region_count() == 0


def test_backup_takes_over_after_primary_crash(store):
    a = put(store, b"data", node=0)
    primary = store.node_of(a)
    store.cluster.inject_fault(primary, FaultKind.PROCESS_CRASH)
    assert store.node_of(a) != primary
    assert get(store, a)[:4] == b"data"
    assert store.replicas_consistent()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 7), st.binary(min_size=1, max_size=64)), max_size=40))
def test_store_matches_dict_model(writes):
    s = Store(spawn_cluster(node_count=5, rng_seed=0))
    addrs = [put(s, b"\0") for _ in range(8)]
    model = {a: b"\0" + b"\0" * 63 for a in addrs}
    for i, payload in writes:
        def fn(tx, a=addrs[i], p=payload):
            s.open_for_write(tx, s.read(tx, a)).write(0, p.ljust(64, b"\0"))
        run_transaction(s, fn)
        model[addrs[i]] = payload.ljust(64, b"\0")
    for a, want in model.items():
        assert get(s, a) == want
    assert s.replicas_consistent()


def test_concurrent_increments_are_exact(store):
    a = put(store, (0).to_bytes(8, "big"))

    def inc(tx):
        buf = store.read(tx, a)
        v = int.from_bytes(buf.data[:8], "big")
        store.open_for_write(tx, buf).write(0, (v + 1).to_bytes(8, "big"))

    threads = [threading.Thread(target=lambda: [run_transaction(store, inc) for _ in range(25)])
               for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert int.from_bytes(get(store, a)[:8], "big") == 100


def test_paused_store_refuses_transactions():
    c = spawn_cluster(node_count=3, rng_seed=2)
    s = Store(c)
    put(s, b"x")
    c.nodes[1].alive = c.nodes[2].alive = False
    for n in (0,):
        c.segments[n].clear()
    with pytest.raises(StorePaused):
        s.create_transaction(node=0)
