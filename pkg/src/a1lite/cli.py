"""Command-line harness: boots an in-process cluster per invocation.

    a1lite load     --schema S.json --data D.ndjson
    a1lite query    '{"id": "steven.spielberg", ...}' | --named Q1 | FILE
    a1lite chaos    scenario.json ...
    a1lite recover  --dr-dir DIR --mode consistent
    a1lite bench    --query Q1 --qps 100 --duration 10
    a1lite metrics
    a1lite sample   OUT_DIR

Without ``--data`` the query, bench and metrics commands use the bundled film
sample. Exit status is 0 only when everything succeeded.
"""
from __future__ import annotations

import argparse
import gc
import json
import os
import statistics
import sys
import threading
import time
from pathlib import Path

from . import drstore, sample
from .db import Database
from .errors import A1Error
from .loader import load_files, read_records, read_schemas
from .reference import ReferenceGraph, normalize_rows
from .scenario import run_scenario
from .simnet import ClusterConfig

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


# -- plumbing ------------------------------------------------------------------

def cluster_config(args) -> ClusterConfig:
    seed = os.environ.get("A1LITE_SEED")
    cfg = ClusterConfig(node_count=args.nodes, fault_domain_count=args.fault_domains,
                        region_size_bytes=args.region_size,
                        rng_seed=int(seed) if seed is not None else args.seed)
    cfg.validate()
    return cfg


def make_db(args, dr_dir=None) -> Database:
    return Database(config=cluster_config(args), dr_dir=dr_dir, dr_mode=args.dr_mode)


def _flatten(d, prefix="") -> list[tuple[str, str]]:
    rows = []
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and v:
            rows.extend(_flatten(v, key + "."))
        else:
            rows.append((key, v if isinstance(v, str) else json.dumps(v, default=str)))
    return rows


def emit(args, doc: dict) -> None:
    if args.out == "json":
        print(json.dumps(doc, indent=2, sort_keys=True, default=str))
        return
    rows = _flatten(doc)
    width = max((len(k) for k, _ in rows), default=0)
    for k, v in rows:
        print(f"{k:<{width}}  {v}")


def fail(args, exc: A1Error) -> int:
    doc = {"error": exc.code, "message": str(exc)}
    pos = getattr(exc, "position", None)
    if pos is not None:
        doc["position"] = pos
    print(json.dumps(doc), file=sys.stderr)
    return EXIT_ERROR


def load_graph(args, db: Database):
    """Load ``--schema``/``--data`` into ``db``, or the bundled sample.
    Returns (graph, load report, reference records)."""
    if args.data or args.schema:
        g = db.create_graph(args.graph)
        report = load_files(g, args.schema or [], args.data)
        schemas = [d for p in args.schema or [] for d in read_schemas(p)]
        records = list(read_records(args.data)) if args.data else []
        return g, report, (schemas, records)
    g, report = sample.load_sample(db, seed=args.sample_seed, name=args.graph)
    return g, report, (sample.SCHEMAS, sample.film_dataset(args.sample_seed))


def allocator_stats(db: Database) -> dict:
    return {"regions": db.store.region_count(), "live_objects": len(db.store.live_objects())}


def resolve_query(text: str | None, named: str | None):
    if named:
        try:
            return named, sample.QUERIES[named]
        except KeyError:
            raise SystemExit(f"unknown named query {named!r}; choose from "
                             f"{', '.join(sample.QUERIES)}") from None
    if text is None:
        raise SystemExit("give a query: inline JSON, a file path, or --named")
    if text in sample.QUERIES:
        return text, sample.QUERIES[text]
    path = Path(text)
    if not text.lstrip().startswith(("{", "[")) and path.exists():
        return path.stem, path.read_text()
    return "query", text


# -- commands ------------------------------------------------------------------

def cmd_load(args) -> int:
    db = make_db(args, args.dr_dir)
    try:
        g = db.create_graph(args.graph)
        report = load_files(g, args.schema or [], args.data)
    except A1Error as exc:
        return fail(args, exc)
    doc = report.to_dict()
    doc["allocator"] = allocator_stats(db)
    if g.dr is not None:
        db.sweep(args.graph)
        doc["t_R"] = g.dr.durable.watermark()
    emit(args, doc)
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_query(args) -> int:
    db = make_db(args)
    _, report, _ = load_graph(args, db)
    name, query = resolve_query(args.query, args.named)
    try:
        page = db.query(args.graph, query, ship_min=args.ship_min, page_size=args.page_size)
        pages = [page]
        while page.token is not None and len(pages) < args.pages:
            page = db.fetch(page.token)
            pages.append(page)
    except A1Error as exc:
        return fail(args, exc)
    first = pages[0]
    doc = {"query": name, "metrics": first.metrics, "pages": len(pages)}
    if first.count is not None:
        doc["count"] = first.count
    else:
        doc["rows"] = [r for p in pages for r in p.rows]
        if pages[-1].token is not None:
            doc["continuation"] = pages[-1].token
    if not report.ok:
        doc["load_errors"] = report.errors
    if args.figures:
        from .figures import query_figures
        doc["figures"] = [str(p) for p in query_figures(
            [{"name": name, "metrics": first.metrics}], args.figures)]
    emit(args, doc)
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_chaos(args) -> int:
    ok = True
    out = []
    for path in args.scenario:
        try:
            rep = run_scenario(path, dr_dir=args.dr_dir,
                               seed=int(os.environ.get("A1LITE_SEED", args.seed)))
        except A1Error as exc:
            return fail(args, exc)
        rep["scenario"] = str(path)
        ok = ok and rep["ok"]
        out.append(rep)
    if args.out == "table":
        emit(args, {r["scenario"]: "ok" if r["ok"] else "FAILED" for r in out})
    else:
        emit(args, {"ok": ok, "scenarios": out} if len(out) != 1 else out[0])
    return EXIT_OK if ok else EXIT_FAIL


def cmd_recover(args) -> int:
    path = Path(args.dr_dir) / f"{args.graph}.a1d"
    if not path.exists():
        print(json.dumps({"error": "NOT_FOUND", "message": f"no durable file at {path}"}),
              file=sys.stderr)
        return EXIT_ERROR
    try:
        durable = drstore.DurableStore(path)
        db = Database(config=cluster_config(args), dr_mode="none")
        _, report = db.recover(durable, args.mode, args.graph)
    except A1Error as exc:
        return fail(args, exc)
    doc = report.to_dict()
    if not args.keys:
        doc.pop("vertex_keys")
        doc.pop("edge_keys")
    doc["allocator"] = allocator_stats(db)
    ok = True
    if args.expect:
        want = json.loads(Path(args.expect).read_text())
        want_v = {(t, pk) for t, pk in want.get("vertices", [])}
        want_e = {((a[0], a[1]), t, (b[0], b[1])) for a, t, b in want.get("edges", [])}
        doc["missing_vertices"] = sorted(map(list, want_v - report.vertices))
        doc["extra_vertices"] = sorted(map(list, report.vertices - want_v))
        doc["missing_edges"] = len(want_e - report.edges)
        doc["extra_edges"] = len(report.edges - want_e)
        ok = not (doc["missing_vertices"] or doc["extra_vertices"]
                  or doc["missing_edges"] or doc["extra_edges"])
        doc["matches_expectation"] = ok
    emit(args, doc)
    return EXIT_OK if ok else EXIT_FAIL


def _percentile(xs: list[float], q: float) -> float:
    if not xs:
        return 0.0
    s = sorted(xs)
    return s[min(len(s) - 1, max(0, int(round(q * len(s) + 0.5)) - 1))]


def run_bench(db: Database, graph: str, query, expected: dict | None, qps: float,
              duration: float, drivers: int = 4, ship_min: int | None = None) -> tuple:
    """Open-schedule driver: query i is due at ``start + i/qps``; latency is
    measured from that due time so queueing delay counts. Returns
    (summary, latencies in ms, issue offsets in s). The loaded graph is
    moved out of the collector's reach first: full collections over a heap
    of that size pause every driver for tens of milliseconds."""
    gc.collect()
    gc.freeze()
    total = int(qps * duration)
    latencies: list[float] = [0.0] * total
    offsets: list[float] = [0.0] * total
    wrong = errors = 0
    lock = threading.Lock()
    nxt = iter(range(total))
    before = db.cluster.metrics.snapshot()
    start = time.perf_counter()

    def driver():
        nonlocal wrong, errors
        while True:
            with lock:
                i = next(nxt, None)
            if i is None:
                return
            due = start + i / qps
            delay = due - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            try:
                page = db.query(graph, query, ship_min=ship_min)
                got = ({"count": page.count} if page.count is not None
                       else {"rows": normalize_rows(db.queries.drain(page))})
                bad = expected is not None and got != expected
                err = False
            except A1Error:
                bad, err = True, True
            lat = time.perf_counter() - due
            with lock:
                latencies[i] = lat * 1000
                offsets[i] = due - start
                wrong += bad and not err
                errors += err

    threads = [threading.Thread(target=driver, daemon=True) for _ in range(max(1, drivers))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - start
    after = db.cluster.metrics.snapshot()
    reads = after.total_reads - before.total_reads
    summary = {
        "queries": total,
        "target_qps": qps,
        "duration_s": duration,
        "elapsed_s": round(elapsed, 3) if total else 0.0,
        "achieved_qps": round(total / elapsed, 2) if total and elapsed else 0.0,
        "mean_ms": round(statistics.fmean(latencies), 3) if total else None,
        "p50_ms": round(_percentile(latencies, 0.50), 3) if total else None,
        "p99_ms": round(_percentile(latencies, 0.99), 3) if total else None,
        "max_ms": round(max(latencies), 3) if total else None,
        "vertex_reads_per_s": round(reads / elapsed, 1) if total and elapsed else 0.0,
        "incorrect_results": wrong,
        "errors": errors,
        "note": "in-process simulation on one machine; not comparable to hardware figures",
    }
    return summary, latencies, offsets


def cmd_bench(args) -> int:
    db = make_db(args)
    _, report, (schemas, records) = load_graph(args, db)
    name, query = resolve_query(args.query, None)
    if isinstance(query, str):
        query = json.loads(query)
    expected = ReferenceGraph(schemas, records).evaluate(query)
    try:
        summary, lat, off = run_bench(db, args.graph, query, expected, args.qps,
                                      args.duration, args.drivers, args.ship_min)
    except A1Error as exc:
        return fail(args, exc)
    summary["query"] = name
    if args.figures and summary["queries"]:
        from .figures import bench_figures
        summary["figures"] = [str(p) for p in bench_figures(summary, lat, off, args.figures)]
    emit(args, summary)
    ok = report.ok and summary["incorrect_results"] == 0 and summary["errors"] == 0
    return EXIT_OK if ok else EXIT_FAIL


def cmd_metrics(args) -> int:
    db = make_db(args)
    _, report, _ = load_graph(args, db)
    per_query = []
    try:
        for name in args.named or list(sample.QUERIES):
            page = db.query(args.graph, sample.QUERIES[name], ship_min=args.ship_min)
            per_query.append({"name": name, "metrics": page.metrics})
    except A1Error as exc:
        return fail(args, exc)
    doc = {"load": report.to_dict(), "cluster": db.cluster.metrics.snapshot().to_dict(),
           "allocator": allocator_stats(db),
           "queries": {q["name"]: q["metrics"] for q in per_query}}
    if args.figures:
        from .figures import query_figures
        doc["figures"] = [str(p) for p in query_figures(per_query, args.figures)]
    emit(args, doc)
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_sample(args) -> int:
    schema, data = sample.write_dataset(args.dir, seed=args.sample_seed)
    emit(args, {"schema": str(schema), "data": str(data)})
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--nodes", type=int, default=5)
    common.add_argument("--fault-domains", type=int, default=3)
    common.add_argument("--seed", type=int, default=0, help="overridden by A1LITE_SEED")
    common.add_argument("--region-size", type=int, default=1 << 20, help="bytes")
    common.add_argument("--dr-mode", default="both",
                        choices=["none", "best-effort", "consistent", "both"])
    common.add_argument("--dr-dir", help="directory for durable-store files")
    common.add_argument("--graph", default=sample.GRAPH)
    common.add_argument("--data", help="NDJSON records")
    common.add_argument("--schema", action="append", help="schema JSON (repeatable)")
    common.add_argument("--sample-seed", type=int, default=7)
    common.add_argument("--ship-min", type=int, default=None)
    common.add_argument("--out", choices=["json", "table"], default="json")

    p = argparse.ArgumentParser(prog="a1lite", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("load", parents=[common], help="define schemas and bulk-load records")
    s.set_defaults(fn=cmd_load)
    s = sub.add_parser("query", parents=[common], help="run one A1QL query")
    s.add_argument("query", nargs="?", help="inline JSON, a file, or Q1..Q4")
    s.add_argument("--named", help="one of the bundled queries Q1..Q4")
    s.add_argument("--pages", type=int, default=1, help="continuation pages to drain")
    s.add_argument("--page-size", type=int, default=None)
    s.add_argument("--figures", help="write locality figures to this directory")
    s.set_defaults(fn=cmd_query)
    s = sub.add_parser("chaos", parents=[common], help="replay scenario scripts")
    s.add_argument("scenario", nargs="+")
    s.set_defaults(fn=cmd_chaos)
    s = sub.add_parser("recover", parents=[common], help="rebuild a graph from durable files")
    s.add_argument("--mode", choices=["best-effort", "consistent"], required=True)
    s.add_argument("--expect", help="JSON {vertices, edges} to diff against")
    s.add_argument("--keys", action="store_true", help="list recovered identities")
    s.set_defaults(fn=cmd_recover)
    s = sub.add_parser("bench", parents=[common], help="latency smoke benchmark")
    s.add_argument("--query", default="Q1", help="Q1..Q4, inline JSON or a file")
    s.add_argument("--qps", type=float, default=100.0)
    s.add_argument("--duration", type=float, default=5.0, help="seconds")
    s.add_argument("--drivers", type=int, default=4)
    s.add_argument("--figures", help="write latency figures to this directory")
    s.set_defaults(fn=cmd_bench)
    s = sub.add_parser("metrics", parents=[common], help="run Q1..Q4 and dump counters")
    s.add_argument("--named", action="append", choices=list(sample.QUERIES))
    s.add_argument("--figures", help="write locality figures to this directory")
    s.set_defaults(fn=cmd_metrics)
    s = sub.add_parser("sample", parents=[common], help="write the bundled dataset to files")
    s.add_argument("dir")
    s.set_defaults(fn=cmd_sample)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "recover" and not args.dr_dir:
        print("recover needs --dr-dir", file=sys.stderr)
        return EXIT_ERROR
    try:
        return args.fn(args)
    except A1Error as exc:
        return fail(args, exc)


if __name__ == "__main__":
    sys.exit(main())
