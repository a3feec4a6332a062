import pytest
from hypothesis import given, settings, strategies as st

from a1lite.btree import NODE_SIZE, BTreeProxy, create_tree
from a1lite.errors import DuplicateKey, NotFound
from a1lite.simnet import spawn_cluster
from a1lite.store import Store, run_transaction


def new_tree(store, **kw):
    root = run_transaction(store, lambda tx: create_tree(store, tx, "t"))
    return BTreeProxy(store, "t", root, **kw)


def k(i: int) -> bytes:
    return i.to_bytes(4, "big")


def test_insert_lookup_delete(store):
    t = new_tree(store)
    run_transaction(store, lambda tx: [t.insert(tx, k(i), b"v%d" % i) for i in range(200)])
    tx = store.create_transaction(read_only=True)
    assert t.lookup(tx, k(77)) == b"v77"
    assert t.get(tx, k(999)) is None
    assert t.height(tx) >= 2
    store.commit(tx)
    with pytest.raises(DuplicateKey):
        run_transaction(store, lambda tx: t.insert(tx, k(1), b"x"))
    run_transaction(store, lambda tx: t.insert(tx, k(1), b"x", replace=True))
    run_transaction(store, lambda tx: t.delete(tx, k(2)))
    with pytest.raises(NotFound):
        run_transaction(store, lambda tx: t.delete(tx, k(2)))
    tx = store.create_transaction(read_only=True)
    assert t.lookup(tx, k(1)) == b"x"
    assert [key for key, _ in t.range_scan(tx, k(0), k(5))] == [k(0), k(1), k(3), k(4)]
    store.commit(tx)


def test_root_reference_is_stable_across_splits(store):
    t = new_tree(store)
    root = t.root
    run_transaction(store, lambda tx: [t.insert(tx, k(i), b"") for i in range(500)])
    assert t.root == root
    tx = store.create_transaction(read_only=True)
    assert all(ref.size == NODE_SIZE for ref, _ in t.nodes(tx))
    store.commit(tx)


def test_stale_proxy_cache_still_finds_keys(store):
    a = new_tree(store)
    b = BTreeProxy(store, "t", a.root)
    run_transaction(store, lambda tx: [a.insert(tx, k(i), b"a") for i in range(0, 400, 2)])
    tx = store.create_transaction(read_only=True)
    assert b.lookup(tx, k(100)) == b"a"
    store.commit(tx)
    # splits through the other proxy invalidate b's cached leaves
    run_transaction(store, lambda tx: [a.insert(tx, k(i), b"b") for i in range(1, 400, 2)])
    tx = store.create_transaction(read_only=True)
    assert all(b.lookup(tx, k(i)) == (b"a" if i % 2 == 0 else b"b") for i in range(400))
    store.commit(tx)


def test_prefix_scan_and_drop(store):
    t = new_tree(store)
    run_transaction(store, lambda tx: [t.insert(tx, bytes([p, i]), b"") for p in range(3)
                                       for i in range(50)])
    tx = store.create_transaction(read_only=True)
    assert len(list(t.prefix_scan(tx, b"\x01"))) == 50
    assert len(list(t.range_scan(tx, limit=7))) == 7
    store.commit(tx)
    before = len(store.live_objects())
    freed = run_transaction(store, t.drop)
    assert len(store.live_objects()) == before - freed


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["put", "del"]), st.integers(0, 300),
                          st.binary(max_size=8)), max_size=300),
       st.booleans())
def test_matches_sorted_dict(ops, caching):
    store = Store(spawn_cluster(node_count=3, rng_seed=0))
    t = new_tree(store, cache=caching)
    model = {}
    for i in range(0, len(ops), 25):
        chunk = ops[i:i + 25]

        def fn(tx, chunk=chunk):
            for op, key, val in chunk:
                if op == "put":
                    t.insert(tx, k(key), val, replace=True)
                elif k(key) in local:
                    t.delete(tx, k(key))
                    del local[k(key)]
                if op == "put":
                    local[k(key)] = val

        local = dict(model)
        run_transaction(store, fn)
        model = local
    tx = store.create_transaction(read_only=True)
    assert list(t.range_scan(tx)) == sorted(model.items())
    for key, val in model.items():
        assert t.lookup(tx, key) == val
    store.commit(tx)
