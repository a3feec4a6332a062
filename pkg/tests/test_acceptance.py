"""Acceptance suite. Each test prints one PASS/FAIL line for its criterion
(visible in ``pytest -v`` output) and then asserts the same condition."""
import random
import struct
import threading
import time
from pathlib import Path

import pytest

from a1lite import drstore
from a1lite.cli import run_bench
from a1lite.db import Database
from a1lite.errors import A1Error, InvalidAddr, TokenExpired, TokenInvalid
from a1lite.graph import OUT, TREE
from a1lite.loader import load_records
from a1lite.reference import ReferenceGraph, normalize_rows
from a1lite.sample import QUERIES, SCHEMAS as FILM_SCHEMAS, film_dataset
from a1lite.scenario import observed_state, run_scenario
from a1lite.simnet import ClusterConfig, FaultKind
from a1lite.simnet import spawn_cluster
from a1lite.store import Status, Store, run_transaction

import gen
import oracle
from conftest import KNOWS, PERSON
from dr_workload import Workload, dump, replay, rows_state, superset_violations


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    return emit


def u64(b) -> int:
    return int.from_bytes(bytes(b[:8]), "big")


def put_int(store, value: int):
    def fn(tx):
        buf = store.alloc(tx, 64)
        buf.write(0, value.to_bytes(8, "big"))
        return buf.addr
    return run_transaction(store, fn)


# -- 1 -------------------------------------------------------------------------

def test_c01_atomic_counter(report):
    store = Store(spawn_cluster(ClusterConfig(rng_seed=1)))
    counter = put_int(store, 0)
    conflicts = [0] * 8

    def driver(i):
        for _ in range(100):
            while True:
                tx = store.create_transaction()
                buf = store.read(tx, counter)
                v = u64(buf.data)
                time.sleep(0)  # let other drivers interleave between read and write
                store.open_for_write(tx, buf).write(0, (v + 1).to_bytes(8, "big"))
                status = store.commit(tx)
                if status is Status.COMMITTED:
                    break
                assert status is Status.ABORTED_CONFLICT
                conflicts[i] += 1

    t0 = time.perf_counter()
    threads = [threading.Thread(target=driver, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - t0
    tx = store.create_transaction(read_only=True)
    final = u64(store.read(tx, counter).data)
    ok = final == 800 and sum(conflicts) > 0 and elapsed < 10
    report(1, ok, f"final={final} conflicts={sum(conflicts)} elapsed={elapsed:.2f}s")
    assert ok


# -- 2 -------------------------------------------------------------------------

def serializability_trial(seed: int) -> bool:
    rng = random.Random(seed)
    store = Store(spawn_cluster(ClusterConfig(node_count=3, rng_seed=seed)))
    n_obj, n_tx = rng.randint(1, 4), rng.randint(2, 6)
    objs = [put_int(store, 0) for _ in range(n_obj)]
    plans = []
    for t in range(n_tx):
        reads = rng.sample(range(n_obj), rng.randint(0, n_obj))
        writes = rng.sample(range(n_obj), rng.randint(0, n_obj))
        ops = [("r", o) for o in reads] + [("w", o) for o in writes]
        plans.append({"tx": store.create_transaction(), "ops": ops, "reads": {}, "writes": {},
                      "id": t})
    live = list(plans)
    while live:
        p = rng.choice(live)
        if not p["ops"]:
            p["status"] = store.commit(p["tx"])
            live.remove(p)
            continue
        kind, o = p["ops"].pop(0)
        tx = p["tx"]
        if kind == "r":
            if o not in p["writes"]:
                p["reads"][o] = u64(store.read(tx, objs[o]).data)
        else:
            val = 1000 * (p["id"] + 1) + o
            store.open_for_write(tx, store.read(tx, objs[o])).write(0, val.to_bytes(8, "big"))
            p["writes"][o] = val
    committed = []
    for p in plans:
        if p["status"] is not Status.COMMITTED:
            continue
        tx = p["tx"]
        # a read-only transaction serializes right after its snapshot
        ts = tx.write_ts if p["writes"] else tx.read_ts + 0.5
        committed.append({"ts": ts, "reads": p["reads"], "writes": p["writes"]})
    rtx = store.create_transaction(read_only=True)
    final = {o: u64(store.read(rtx, objs[o]).data) for o in range(n_obj)}
    return oracle.serializable({o: 0 for o in range(n_obj)}, committed, final)


def test_c02_serializability(report):
    bad = [s for s in range(200) if not serializability_trial(s)]
    report(2, not bad, f"200 trials, violations={len(bad)}")
    assert not bad


# -- 3 -------------------------------------------------------------------------

NODE = struct.Struct(">Q8s")


def opacity_trial(seed: int) -> tuple[bool, bool]:
    """Returns (consistent, aborted) for one reader racing a deleting writer."""
    rng = random.Random(seed)
    store = Store(spawn_cluster(ClusterConfig(node_count=3, rng_seed=seed)))
    gen_no = [0]

    def node_bytes(tag: int, nxt: bytes) -> bytes:
        return NODE.pack(tag, nxt) + bytes([tag % 251]) * 48

    def build(tx):
        head = store.alloc(tx, 64)
        nxt = b"\0" * 8
        tags = []
        for _ in range(rng.randint(3, 10)):
            gen_no[0] += 1
            n = store.alloc(tx, 64)
            n.write(0, node_bytes(gen_no[0], nxt))
            nxt = n.addr.pack()
            tags.append(gen_no[0])
        head.write(0, NODE.pack(0, nxt))
        return head.addr, tags[::-1]
    head, tags = run_transaction(store, build)
    history = [(0, list(tags))]

    def walk(tx, on_step=None):
        out = []
        cur = NODE.unpack(bytes(store.read(tx, head).data[:16]))[1]
        while cur != b"\0" * 8:
            if on_step:
                on_step()
            raw = bytes(store.read(tx, type(head).unpack(cur)).data)
            tag, nxt = NODE.unpack(raw[:16])
            if raw[16:64] != bytes([tag % 251]) * 48:
                raise AssertionError("torn node")
            out.append(tag)
            cur = nxt
        return out

    def writer(tx):
        # unlink and free one node, then allocate a replacement elsewhere;
        # the allocator is free to hand the freed slot straight back
        chain = [head]
        cur = NODE.unpack(bytes(store.read(tx, head).data[:16]))[1]
        while cur != b"\0" * 8:
            a = type(head).unpack(cur)
            chain.append(a)
            cur = NODE.unpack(bytes(store.read(tx, a).data[:16]))[1]
        if len(chain) > 2:
            i = rng.randrange(1, len(chain))
            victim = store.read(tx, chain[i])
            nxt = NODE.unpack(bytes(victim.data[:16]))[1]
            prev = store.read(tx, chain[i - 1])
            raw = bytearray(prev.data[:16])
            raw[8:16] = nxt
            store.open_for_write(tx, prev).write(0, bytes(raw))
            store.free(tx, chain.pop(i))
        gen_no[0] += 1
        prev = store.read(tx, rng.choice(chain))
        old = bytes(prev.data[:16])
        n = store.alloc(tx, 64)
        n.write(0, node_bytes(gen_no[0], old[8:16]))
        store.open_for_write(tx, prev).write(0, old[:8] + n.addr.pack())

    writer_commits = []

    def maybe_write():
        if rng.random() < 0.4:
            wtx = store.create_transaction()
            writer(wtx)
            if store.commit(wtx) is Status.COMMITTED:
                writer_commits.append(wtx.write_ts)
                rtx = store.create_transaction(read_only=True)
                history.append((wtx.write_ts, walk(rtx)))

    doomed = rng.random() < 0.5
    reader = store.create_transaction(read_only=not doomed)
    aborted = False
    try:
        seen = walk(reader, maybe_write)
        if doomed:
            hb = store.read(reader, head)
            store.open_for_write(reader, hb).write(0, bytes(hb.data[:16]))
            aborted = store.commit(reader) is not Status.COMMITTED
    except InvalidAddr:
        return False, False  # followed a pointer into a freed slot
    except A1Error:
        return True, True
    want = [t for ts, t in history if ts <= reader.read_ts][-1]
    return seen == want, aborted


def test_c03_opacity(report):
    results = [opacity_trial(s) for s in range(500)]
    bad = sum(1 for ok, _ in results if not ok)
    aborts = sum(1 for _, ab in results if ab)
    report(3, bad == 0, f"500 trials, inconsistent reads={bad}, aborted readers={aborts}")
    assert bad == 0


# -- 4 -------------------------------------------------------------------------

def test_c04_no_dangling_edges(report):
    rng = random.Random(4)
    db = Database(config=ClusterConfig(rng_seed=4), dr_mode="none")
    baseline = set(db.store.live_objects())
    g = db.create_graph("inv")
    g.define_type(PERSON)
    g.define_type(KNOWS)
    model = oracle.Model({"Person": "id"})
    hubs = [("Person", f"hub{i}") for i in range(3)]
    for h in hubs:
        g.create_vertex("Person", {"id": h[1]})
        model.add_vertex("Person", {"id": h[1]})
    ops, next_id, spilled = 0, 0, set()
    t0 = time.perf_counter()
    while ops < 10_000:
        batch = []

        def fn(tx):
            nonlocal next_id
            batch.clear()
            m = model
            keys = sorted(k for k in m.vertices if k not in hubs)
            for _ in range(rng.randint(1, 25)):
                r = rng.random()
                if r < 0.2 or len(keys) < 10:
                    pk = f"v{next_id}"
                    next_id += 1
                    g.create_vertex("Person", {"id": pk}, tx=tx)
                    batch.append(("cv", ("Person", pk)))
                    keys.append(("Person", pk))
                elif r < 0.22:
                    k = keys.pop(rng.randrange(len(keys)))
                    g.delete_vertex(*k, tx=tx)
                    batch.append(("dv", k))
                elif r < 0.9:
                    src = rng.choice(hubs) if r < 0.8 else rng.choice(keys)
                    dst = rng.choice(keys)
                    if (src, "knows", dst) in m.edges or any(
                            b[0] == "ce" and b[1] == (src, dst) for b in batch):
                        continue
                    g.create_edge(g.addr_of(*src, tx=tx), "knows", g.addr_of(*dst, tx=tx), tx=tx)
                    batch.append(("ce", (src, dst)))
                else:
                    live = [e for e in m.edges if e[0] not in hubs
                            and not any(b[0] == "dv" and b[1] in (e[0], e[2]) for b in batch)]
                    if live:
                        a, t, b = rng.choice(sorted(live))
                        if any(x[0] == "de" and x[1] == (a, b) for x in batch):
                            continue
                        g.delete_edge(g.addr_of(*a, tx=tx), t, g.addr_of(*b, tx=tx), tx=tx)
                        batch.append(("de", (a, b)))
        db.run(fn)
        for op, arg in batch:
            if op == "cv":
                model.add_vertex("Person", {"id": arg[1]})
            elif op == "dv":
                model.remove_vertex(arg)
            elif op == "ce":
                model.add_edge(arg[0], "knows", arg[1])
            else:
                model.remove_edge(arg[0], "knows", arg[1])
        before, ops = ops, ops + len(batch)
        if ops // 500 != before // 500:
            for h in hubs:
                mode = db.run(lambda tx, h=h: g.read_header(tx, g.addr_of(*h, tx=tx)).out.mode,
                              read_only=True)
                if mode == TREE:
                    spilled.add(h)
    dangling = g.dangling_scan()
    verts, edges = observed_state(g)
    model_ok = verts == set(model.vertices) and edges == set(model.edges)
    hub_edges = [len(g.enumerate_edges(g.addr_of(*h), OUT)) for h in hubs]
    db.delete_graph("inv")
    db.tasks.run_until_idle()
    leaked = set(db.store.live_objects()) - baseline
    task_queue = set(db.store.live_objects(tag="tasks"))
    graph_left = db.store.live_objects(tag="inv")
    leaks = len(leaked - task_queue)
    elapsed = time.perf_counter() - t0
    ok = not dangling and model_ok and len(spilled) >= 3 and leaks == 0 and not graph_left
    report(4, ok, f"ops={ops} dangling={len(dangling)} model_match={model_ok} "
                  f"spilled_hubs={len(spilled)} hub_out_edges={hub_edges} leaked_objects={leaks} "
                  f"elapsed={elapsed:.1f}s")
    assert ok


# -- 5 -------------------------------------------------------------------------

SIZES = [200, 400, 800, 1500, 300, 600, 2500, 1000, 5000, 10_000]


def engine_result(db, graph, q, **kw):
    page = db.query(graph, q, **kw)
    if page.count is not None:
        return {"count": page.count}
    return {"rows": normalize_rows(db.queries.drain(page))}


def test_c05_query_oracle(report, films):
    mismatches, total = [], 0
    for seed, size in enumerate(SIZES):
        rng = random.Random(1000 + seed)
        db = Database(config=ClusterConfig(rng_seed=seed), dr_mode="none")
        g = db.create_graph("r")
        for s in gen.SCHEMAS:
            g.define_type(s)
        recs = gen.random_records(rng, size)
        assert load_records(g, enumerate(recs, 1)).ok
        model = oracle.Model.from_records(gen.SCHEMAS, recs)
        pks = [pk for _, pk in model.vertices]
        hubs = sorted(pks, key=lambda p: -sum(1 for e in model.edges if e[0][1] == p))[:20]
        for _ in range(100):
            q = gen.random_query(rng, pks, hubs if rng.random() < 0.3 else None)
            kw = {"page_size": rng.choice([5, 50, 1000])}
            total += 1
            if engine_result(db, "r", q, **kw) != oracle.evaluate(model, q):
                mismatches.append((seed, q))
    film_model = oracle.Model.from_records(FILM_SCHEMAS, film_dataset(7))
    film_bad = []
    film_counts = {}
    for name, q in QUERIES.items():
        got, want = engine_result(films, "films", q), oracle.evaluate(film_model, q)
        film_counts[name] = got.get("count", len(got.get("rows", [])))
        if got != want:
            film_bad.append(name)
    ok = not mismatches and not film_bad
    report(5, ok, f"random queries={total} over {len(SIZES)} seeds (max {max(SIZES)} vertices), "
                  f"mismatches={len(mismatches)}; film queries {film_counts} mismatched={film_bad}")
    assert ok, mismatches[:3]


# -- 6 -------------------------------------------------------------------------

def test_c06_locality(report, films):
    page = films.query("films", QUERIES["Q1"], ship_min=4)
    frac = page.metrics["hop_local_fraction"]
    same = all(engine_result(films, "films", QUERIES[n], ship_min=4)
               == engine_result(films, "films", QUERIES[n], ship_min=10**9)
               for n in QUERIES)
    ok = frac >= 0.90 and same and films.cluster.config.node_count == 5
    report(6, ok, f"Q1 hop local fraction={frac:.3f} (threshold 0.90), shipped==unshipped={same}")
    assert ok


# -- 7 -------------------------------------------------------------------------

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"


def test_c07_recovery_scenarios(report, tmp_path):
    results = {}
    for name in ("partial_flush_vertices", "partial_flush_edge"):
        for where in (None, tmp_path / name):
            rep = run_scenario(SCENARIO_DIR / f"{name}.json", dr_dir=where)
            results[(name, where is not None)] = rep["ok"]
    ok = all(results.values())
    report(7, ok, "; ".join(f"{n}{' (file-backed)' if f else ''}={'ok' if v else 'MISMATCH'}"
                             for (n, f), v in results.items()))
    assert ok


# -- 8 -------------------------------------------------------------------------

def test_c08_recovery_properties(report):
    t0 = time.perf_counter()
    w = Workload(8)
    rng = random.Random(88)
    points = set(rng.sample(range(500), 200))
    bad_prefix, bad_superset, dangling, installed = 0, 0, 0, 0
    for i in range(500):
        w.step()
        if i not in points:
            continue
        snap = w.durable.clone()
        t_r, v, e, _ = drstore.recovered_rows(snap, "consistent")
        cons = rows_state(v, e)
        if dump(cons) != dump(w.state_at(t_r)):
            bad_prefix += 1
        _, bv, be, _ = drstore.recovered_rows(snap, "best-effort")
        best = rows_state(bv, be)
        bad_superset += len(superset_violations(snap, cons, best)) > 0
        dangling += any(a not in best[0] or b not in best[0] for a, _, b in best[1])
        if len(points & set(range(i + 1))) % 25 == 0:
            # every 25th crash point goes all the way through a graph rebuild
            fresh = Database(config=ClusterConfig(rng_seed=i), dr_mode="none")
            target, _ = fresh.recover(snap, "consistent", "w")
            installed += 1
            bad_prefix += observed_state(target) != (set(cons[0]), set(cons[1]))
            dangling += bool(target.dangling_scan())
    w.finish()
    base = replay(w.applied).snapshot_tables()
    perm_bad = 0
    for _ in range(20):
        log = w.applied + [rng.choice(w.applied) for _ in range(len(w.applied) // 2)]
        rng.shuffle(log)
        perm_bad += replay(log).snapshot_tables() != base
    elapsed = time.perf_counter() - t0
    ok = not (bad_prefix or bad_superset or dangling or perm_bad) and elapsed < 300
    report(8, ok, f"crash points=200 (graph rebuilds={installed}) prefix mismatches={bad_prefix} "
                  f"superset violations={bad_superset} dangling={dangling} "
                  f"replay permutations=20 differing={perm_bad} elapsed={elapsed:.1f}s")
    assert ok


# -- 9 -------------------------------------------------------------------------

def test_c09_fast_restart_vs_power_loss(report):
    db = Database(config=ClusterConfig(rng_seed=9), dr_mode="both")
    g = db.create_graph("p")
    g.define_type(PERSON)
    g.define_type(KNOWS)
    recs = [{"_kind": "vertex", "_type": "Person", "id": f"p{i}", "age": i} for i in range(300)]
    recs += [{"_kind": "edge", "_type": "knows", "_src": ["Person", f"p{i}"],
              "_dst": ["Person", f"p{(i * 7 + 3) % 300}"]} for i in range(300)]
    assert load_records(g, enumerate(recs, 1)).ok
    db.sweep("p")
    before_bytes = db.store.dump()
    before = observed_state(g)
    # replicas never share a fault domain and every region has one replica per
    # domain, so crashing a whole domain hits exactly one replica of each region
    domain = [n for n in range(db.cluster.config.node_count) if db.cluster.fault_domain_of(n) == 0]
    for n in domain:
        db.cluster.inject_fault(n, FaultKind.PROCESS_CRASH)
    for n in domain:
        db.cluster.inject_fault(n, FaultKind.RESTART)
    restart_ok = (db.store.dump() == before_bytes and observed_state(g) == before
                  and db.store.replicas_consistent())
    for n in range(db.cluster.config.node_count):
        db.cluster.inject_fault(n, FaultKind.POWER_LOSS)
    emptied = db.store.region_count() == 0
    durable = db.durable_for("p")
    restored = {}
    for mode in ("consistent", "best-effort"):
        fresh = Database(config=ClusterConfig(rng_seed=10), dr_mode="none")
        target, _ = fresh.recover(durable, mode, "p")
        restored[mode] = observed_state(target) == before
    ok = restart_ok and emptied and all(restored.values())
    report(9, ok, f"crash+restart of fault domain 0 lossless={restart_ok}; power loss emptied "
                  f"store={emptied}; recovered equal={restored}")
    assert ok


# -- 10 ------------------------------------------------------------------------

def test_c10_continuation_tokens(report):
    db = Database(config=ClusterConfig(rng_seed=10), dr_mode="none")
    g = db.create_graph("t")
    g.define_type(PERSON)
    db.run(lambda tx: [g.create_vertex("Person", {"id": f"p{i}", "city": "Oslo"}, tx=tx)
                       for i in range(25)])
    q = {"_type": "Person", "city": "Oslo", "_select": ["id"]}
    page = db.query("t", q, page_size=10, node=2)
    pages = [page]
    while page.token is not None:
        page = db.fetch(page.token)
        pages.append(page)
    rows = sorted(r["id"] for p in pages for r in p.rows)
    drained = len(pages) == 3 and rows == sorted(f"p{i}" for i in range(25))
    page = db.query("t", q, page_size=10, node=2)
    db.cluster.clock.advance(10**6)
    try:
        db.fetch(page.token)
        expired = False
    except TokenExpired:
        expired = True
    page = db.query("t", q, page_size=10, node=2)
    db.cluster.inject_fault(page.metrics["coordinator"], FaultKind.PROCESS_CRASH)
    try:
        db.fetch(page.token)
        invalid = False
    except TokenInvalid:
        invalid = True
    ok = drained and expired and invalid
    report(10, ok, f"pages={len(pages)} drained={drained} expired->TOKEN_EXPIRED={expired} "
                   f"coordinator crash->TOKEN_INVALID={invalid}")
    assert ok


# -- 11 ------------------------------------------------------------------------

def test_c11_smoke_benchmark(report, films):
    expected = ReferenceGraph(FILM_SCHEMAS, film_dataset(7)).evaluate(QUERIES["Q1"])
    summary, _, _ = run_bench(films, "films", QUERIES["Q1"], expected, qps=100, duration=5,
                              drivers=4, ship_min=4)
    ok = (summary["p99_ms"] < 100 and summary["incorrect_results"] == 0
          and summary["errors"] == 0 and summary["queries"] > 0)
    report(11, ok, f"Q1 at {summary['achieved_qps']:.0f} qps for 5 s: p50={summary['p50_ms']:.1f} ms "
                   f"p99={summary['p99_ms']:.1f} ms incorrect={summary['incorrect_results']} "
                   "(desk-scale smoke test, not comparable to the original cluster numbers)")
    assert ok
