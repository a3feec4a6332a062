"""A1QL: parsing, planning and distributed execution.

A query is nested JSON; each level is one traversal step. The root names an
anchor (``"id"`` or an equality predicate on a typed vertex), each level may
filter vertices, carry ``_match`` existential branches, and continue through
one ``_out_edge`` or ``_in_edge``. The innermost level selects.

Execution fixes a snapshot on the coordinator, then walks hop by hop. Each
frontier is grouped by the node that serves each vertex. Groups on the
coordinator are evaluated in place, groups of at least ``ship_min`` vertices
are shipped as one RPC to a worker that reads at the same snapshot, and small
groups are read remotely by the coordinator.
"""
from __future__ import annotations

import base64
import binascii
import itertools
import json
import operator
import random
import re
import threading
from dataclasses import dataclass, field
from typing import Any

from .errors import (
    A1Error, FastFailBudget, NodeUnreachable, NotFound, ParseError, SnapshotLost,
    TokenExpired, TokenInvalid, UnknownField, UnknownKey, UnknownType,
)
from .graph import IN, OUT, Graph, HalfEdge
from .schema import json_safe
from .simnet import Message, ReadStats
from .store import Addr, Txn

SHIP_MIN = 4
DEFAULT_BUDGET = 64 << 20
PAGE_SIZE = 1000
TOKEN_TTL = 60_000
ADDR_BYTES = 8
COUNT_STAR = "_count(*)"
_STEP_KEYS = {"id", "_type", "_out_edge", "_in_edge", "_select", "_match", "_hints"}
_EDGE_KEYS = {"_type", "_vertex"}
_OPS = {
    "=": operator.eq, "==": operator.eq, "!=": operator.ne,
    "<": operator.lt, "<=": operator.le, "≤": operator.le,
    ">": operator.gt, ">=": operator.ge, "≥": operator.ge,
}
_PATH = re.compile(r"^([A-Za-z_][\w.]*)((?:\[[^\[\]]+\])*)$")
_MISSING = object()


# -- AST -----------------------------------------------------------------------

@dataclass
class Pred:
    path: tuple
    op: str
    value: Any
    is_id: bool = False
    text: str = ""

    def test(self, attrs: dict, pk=None) -> bool:
        v = pk if self.is_id else resolve_path(attrs, self.path)
        if v is None or self.value is None:
            return False
        try:
            return bool(_OPS[self.op](v, self.value))
        except TypeError:
            return False


@dataclass
class EdgeStep:
    direction: int
    type: str
    preds: list
    vertex: "VertexStep"
    type_id: int = 0


@dataclass
class VertexStep:
    type: str | None = None
    anchor: Any = _MISSING
    preds: list = field(default_factory=list)
    edge: EdgeStep | None = None
    match: list = field(default_factory=list)
    select: list | None = None
    count: bool = False
    type_id: int | None = None

    @property
    def filters(self) -> bool:
        return bool(self.type_id is not None or self.preds or self.match
                    or self.anchor is not _MISSING)


@dataclass
class QueryAst:
    root: VertexStep
    hints: dict = field(default_factory=dict)

    def steps(self) -> list[VertexStep]:
        out, s = [], self.root
        while s is not None:
            out.append(s)
            s = s.edge.vertex if s.edge else None
        return out


def resolve_path(attrs: dict, path: tuple):
    v = attrs.get(path[0])
    for k in path[1:]:
        if v is None:
            return None
        if isinstance(v, list):
            if not isinstance(k, int) or not -len(v) <= k < len(v):
                return None
            v = v[k]
        elif isinstance(v, dict):
            v = v.get(str(k))
        else:
            return None
    return v


def parse_path(text: str, where: str) -> tuple:
    m = _PATH.match(text)
    if not m:
        raise ParseError(f"bad attribute path {text!r}", where)
    parts: list = [m.group(1)]
    for raw in re.findall(r"\[([^\[\]]+)\]", m.group(2)):
        raw = raw.strip()
        parts.append(int(raw) if re.fullmatch(r"-?\d+", raw) else raw)
    return tuple(parts)


def _pred(key: str, value, where: str) -> Pred:
    op = "="
    if isinstance(value, dict):
        if set(value) != {"_op", "_value"}:
            raise ParseError(f"predicate object needs exactly _op and _value", where)
        op, value = value["_op"], value["_value"]
        if op not in _OPS:
            raise ParseError(f"unknown operator {op!r}", where)
    elif isinstance(value, (list,)):
        raise ParseError("list literals are not supported in predicates", where)
    if key == "id":
        return Pred(("id",), op, value, True, key)
    return Pred(parse_path(key, where), op, value, False, key)


def _parse_step(doc, where: str, root: bool, branch: bool) -> VertexStep:
    if not isinstance(doc, dict):
        raise ParseError("each step must be a JSON object", where)
    step = VertexStep()
    for key, val in doc.items():
        at = f"{where}/{key}"
        if key.startswith("_") and key not in _STEP_KEYS:
            raise UnknownKey(f"unknown key {key!r}", position=at)
        if key == "_type":
            if not isinstance(val, str):
                raise ParseError("_type must be a string", at)
            step.type = val
        elif key in ("_out_edge", "_in_edge"):
            if step.edge is not None:
                raise ParseError("a step may continue through only one edge", at)
            step.edge = _parse_edge(val, OUT if key == "_out_edge" else IN, at, branch)
        elif key == "_match":
            if not isinstance(val, list) or not val:
                raise ParseError("_match must be a non-empty list", at)
            for i, b in enumerate(val):
                bat = f"{at}/{i}"
                if not isinstance(b, dict) or len(b) != 1 or next(iter(b)) not in (
                        "_out_edge", "_in_edge"):
                    raise ParseError("each _match branch is one _out_edge or _in_edge", bat)
                k = next(iter(b))
                step.match.append(_parse_edge(b[k], OUT if k == "_out_edge" else IN,
                                              f"{bat}/{k}", True))
        elif key == "_select":
            if branch:
                raise ParseError("_select is not allowed inside _match", at)
            if not isinstance(val, list) or not val or not all(isinstance(x, str) for x in val):
                raise ParseError("_select must be a non-empty list of strings", at)
            if COUNT_STAR in val:
                if len(val) != 1:
                    raise ParseError("_count(*) cannot be combined with other columns", at)
                step.count = True
            else:
                for x in val:
                    if x != "*":
                        parse_path(x, at)
            step.select = list(val)
        elif key == "_hints":
            if not root or not isinstance(val, dict):
                raise ParseError("_hints is only allowed as an object at the root", at)
        elif key == "id" and root and not (isinstance(val, dict)
                                          and val.get("_op") not in ("=", "==")):
            # only an equality on id anchors; other operators filter
            step.anchor = val["_value"] if isinstance(val, dict) else val
        else:
            step.preds.append(_pred(key, val, at))
    if step.select is not None and step.edge is not None:
        raise ParseError("_select must be at the last step of the traversal", where)
    if root and step.anchor is _MISSING:
        eq = [p for p in step.preds if p.op in ("=", "==")]
        if step.type is None or not eq:
            raise ParseError("the root step needs an anchor: id, or _type plus an equality "
                             "predicate", where)
    if step.edge is None and step.select is None and not branch:
        step.select = ["*"]
    return step


def _parse_edge(doc, direction: int, where: str, branch: bool) -> EdgeStep:
    if not isinstance(doc, dict):
        raise ParseError("edge step must be a JSON object", where)
    etype = doc.get("_type")
    if not isinstance(etype, str):
        raise ParseError("edge step needs a string _type", where)
    if "_vertex" not in doc:
        raise ParseError("edge step needs _vertex", where)
    preds = []
    for key, val in doc.items():
        if key in _EDGE_KEYS:
            continue
        if key.startswith("_"):
            raise UnknownKey(f"unknown key {key!r}", position=f"{where}/{key}")
        preds.append(_pred(key, val, f"{where}/{key}"))
    vertex = _parse_step(doc["_vertex"], f"{where}/_vertex", False, branch)
    return EdgeStep(direction, etype, preds, vertex)


def parse_a1ql(doc) -> QueryAst:
    """Parse a query from a JSON string or an already-decoded object."""
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON: {exc.msg}", exc.pos) from None
    root = _parse_step(doc, "", True, False)
    hints = doc.get("_hints", {}) if isinstance(doc, dict) else {}
    return QueryAst(root, dict(hints))


# -- planning ------------------------------------------------------------------

@dataclass
class Hop:
    index: int
    step: VertexStep
    ops: list


@dataclass
class PhysicalPlan:
    graph: str
    ast: QueryAst
    anchor: tuple
    hops: list

    @property
    def last(self) -> VertexStep:
        return self.hops[-1].step

    def describe(self) -> list[list[str]]:
        return [h.ops for h in self.hops]


def _check_preds(g: Graph, preds: list, type_name: str | None, kind: str,
                 vtypes: list) -> None:
    for p in preds:
        if p.is_id:
            continue
        if type_name is not None:
            g.type_info(type_name, kind).schema.field(p.path[0])
        elif not any(p.path[0] in {f.name for f in t.schema.fields} for t in vtypes):
            raise UnknownField(f"no vertex type has field {p.path[0]!r}")


def _compile_step(g: Graph, step: VertexStep, vtypes: list, hints: dict) -> None:
    if step.type is not None:
        try:
            step.type_id = g.type_info(step.type, "vertex").type_id
        except UnknownType:
            raise UnknownType(f"unknown vertex type {step.type!r}") from None
    _check_preds(g, step.preds, step.type, "vertex", vtypes)
    for col in step.select or ():
        if col not in ("*", COUNT_STAR) and step.type is not None:
            g.type_info(step.type).schema.field(parse_path(col, "")[0])
    order = hints.get("match_order")
    if order is not None and step.match:
        if sorted(order) != list(range(len(step.match))):
            raise ParseError("match_order must be a permutation of the _match branches", "_hints")
        step.match = [step.match[i] for i in order]
    for e in ([step.edge] if step.edge else []) + step.match:
        try:
            e.type_id = g.type_info(e.type, "edge").type_id
        except UnknownType:
            raise UnknownType(f"unknown edge type {e.type!r}") from None
        _check_preds(g, e.preds, e.type, "edge", vtypes)
        _compile_step(g, e.vertex, vtypes, {})


def plan(g: Graph, ast: QueryAst, hints: dict | None = None) -> PhysicalPlan:
    hints = {**ast.hints, **(hints or {})}
    vtypes = [t for t in g.types() if t.kind == "vertex"]
    _compile_step(g, ast.root, vtypes, hints)
    root = ast.root
    if root.anchor is not _MISSING:
        anchor = ("pk", root.type, root.anchor)
    else:
        info = g.type_info(root.type)
        eq = [p for p in root.preds if p.op in ("=", "==") and len(p.path) == 1]
        indexed = [p for p in eq if p.path[0] in info.indexes]
        anchor = (("index", root.type, indexed[0].path[0], indexed[0].value) if indexed
                  else ("scan", root.type))
    hops = []
    for i, step in enumerate(ast.steps()):
        ops = ["INDEX_LOOKUP"] if i == 0 else []
        # the anchor itself is answered by the lookup
        if step.filters and (i > 0 or step.preds or step.match or step.type_id is not None):
            ops.append("PREDICATE_EVAL")
        if step.edge is not None:
            ops.append(f"EDGE_ENUM({'OUT' if step.edge.direction == OUT else 'IN'},"
                       f"{step.edge.type})")
        else:
            ops.append("COUNT" if step.count else "PROJECT")
        hops.append(Hop(i, step, ops))
    return PhysicalPlan(g.name, ast, anchor, hops)


# -- evaluation ----------------------------------------------------------------

class Evaluator:
    """Reads vertices for one batch under one transaction; caches headers and
    records so repeated probes of the same vertex cost nothing extra."""

    def __init__(self, g: Graph, tx: Txn):
        self.g = g
        self.tx = tx
        self._headers: dict = {}
        self._attrs: dict = {}

    def header(self, addr: Addr):
        h = self._headers.get(addr)
        if h is None:
            h = self._headers[addr] = self.g.read_header(self.tx, addr)
        return h

    def record(self, addr: Addr) -> tuple:
        r = self._attrs.get(addr)
        if r is None:
            info, attrs = self.g.vertex_attrs(self.tx, self.header(addr))
            r = self._attrs[addr] = (info, attrs)
        return r

    def passes(self, addr: Addr, step: VertexStep) -> bool:
        if step.type_id is not None and self.header(addr).type_id != step.type_id:
            return False
        if step.preds or step.anchor is not _MISSING:
            info, attrs = self.record(addr)
            pk = attrs.get(info.schema.primary_key)
            if step.anchor is not _MISSING and pk != step.anchor:
                return False
            if not all(p.test(attrs, pk) for p in step.preds):
                return False
        return all(self.exists(addr, b) for b in step.match)

    def neighbors(self, addr: Addr, edge: EdgeStep) -> list[Addr]:
        halves = self.g.halves(self.tx, addr, self.header(addr), edge.direction, edge.type_id)
        if edge.preds:
            halves = [h for h in halves if self._edge_ok(h, edge)]
        return [h.peer for h in halves]

    def _edge_ok(self, half: HalfEdge, edge: EdgeStep) -> bool:
        attrs = self.g.edge_attrs(self.tx, half)
        return all(p.test(attrs) for p in edge.preds)

    def exists(self, addr: Addr, branch: EdgeStep) -> bool:
        for peer in self.neighbors(addr, branch):
            v = branch.vertex
            if not self.passes(peer, v):
                continue
            if v.edge is None or self.exists(peer, v.edge):
                return True
        return False

    def project(self, addr: Addr, step: VertexStep) -> dict:
        info, attrs = self.record(addr)
        row = {"_addr": str(addr), "_type": info.name}
        for col in step.select:
            if col == "*":
                row.update(json_safe(attrs))
            else:
                v = resolve_path(attrs, parse_path(col, ""))
                row[col] = json_safe({"v": v})["v"] if v is not None else None
        return row

    def eval_hop(self, addrs: list[Addr], step: VertexStep, last: bool, need_filter: bool) -> list:
        out = []
        for addr in addrs:
            if need_filter and not self.passes(addr, step):
                continue
            if not last:
                out.append((addr, self.neighbors(addr, step.edge)))
            elif step.count:
                out.append((addr, None))
            else:
                out.append((addr, self.project(addr, step)))
        return out


@dataclass
class ResultPage:
    rows: list | None = None
    count: int | None = None
    token: str | None = None
    metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out: dict = {"count": self.count} if self.count is not None else {"rows": self.rows}
        if self.token is not None:
            out["continuation"] = self.token
        return out


def encode_token(coordinator: int, qid: str, cursor: int, expires_at: int) -> str:
    raw = json.dumps({"c": coordinator, "q": qid, "o": cursor, "e": expires_at},
                     sort_keys=True).encode()
    return base64.urlsafe_b64encode(raw).decode("ascii")


def decode_token(token: str) -> dict:
    try:
        d = json.loads(base64.urlsafe_b64decode(token.encode("ascii")))
        return {"c": int(d["c"]), "q": str(d["q"]), "o": int(d["o"]), "e": int(d["e"])}
    except (binascii.Error, ValueError, KeyError, TypeError, UnicodeError):
        raise TokenInvalid("continuation token does not decode") from None


class QueryEngine:
    def __init__(self, db, ship_min: int = SHIP_MIN, budget: int = DEFAULT_BUDGET,
                 page_size: int = PAGE_SIZE, token_ttl: int = TOKEN_TTL):
        self.db = db
        self.store = db.store
        self.cluster = db.cluster
        self.ship_min = ship_min
        self.budget = budget
        self.page_size = page_size
        self.token_ttl = token_ttl
        self.hop_hook = None
        self._qids = itertools.count(1)
        self._rng = random.Random(self.cluster.config.rng_seed + 17)
        self._rng_lock = threading.Lock()
        self.cluster.register_handler("a1ql.eval", self._worker_eval)
        self.cluster.register_handler("a1ql.page", self._serve_page)

    # -- workers -------------------------------------------------------------
    def _worker_eval(self, node, body: dict) -> dict:
        """Evaluate one hop for co-located vertices at the coordinator's snapshot."""
        g = self.db.graph(body["graph"], allow_deleting=True)
        stats = ReadStats()
        tx = self.store.create_transaction(read_only=True, node=node.id,
                                           read_ts=body["snapshot"], stats=stats)
        try:
            out = Evaluator(g, tx).eval_hop(body["addrs"], body["step"], body["last"],
                                            body["filter"])
        finally:
            self.store.commit(tx)
        return {"out": out, "local": stats.local, "remote": stats.remote}

    def worker_eval(self, node: int, graph: str, snapshot: int, step: VertexStep,
                    addrs: list[Addr], last: bool = False) -> dict:
        return self._worker_eval(self.cluster.nodes[node], {
            "graph": graph, "snapshot": snapshot, "step": step, "addrs": addrs,
            "last": last, "filter": True})

    # -- coordinator ---------------------------------------------------------
    def pick_coordinator(self) -> int:
        with self._rng_lock:
            return self._rng.choice(self.cluster.live_nodes())

    def execute(self, graph: str, doc, node: int | None = None, ship_min: int | None = None,
                budget: int | None = None, page_size: int | None = None,
                hints: dict | None = None, snapshot: int | None = None) -> ResultPage:
        ast = doc if isinstance(doc, QueryAst) else parse_a1ql(doc)
        g = self.db.graph(graph)
        p = plan(g, ast, hints)
        return self.run_plan(p, node, ship_min, budget, page_size, snapshot)

    def run_plan(self, p: PhysicalPlan, node: int | None = None, ship_min: int | None = None,
                 budget: int | None = None, page_size: int | None = None,
                 snapshot: int | None = None) -> ResultPage:
        coord = self.pick_coordinator() if node is None else node
        ship_min = self.ship_min if ship_min is None else ship_min
        budget = self.budget if budget is None else budget
        page_size = self.page_size if page_size is None else page_size
        g = self.db.graph(p.graph, allow_deleting=True)
        qid = f"q{next(self._qids)}"
        anchor_stats, hop_stats = ReadStats(), ReadStats()
        tx = self.store.create_transaction(read_only=True, node=coord, stats=anchor_stats,
                                           read_ts=snapshot)
        rpcs = shipped = 0
        try:
            frontier = self._anchor(g, tx, p.anchor)
            tx.stats = hop_stats
            results: dict = {}
            for hop in p.hops:
                self._check_alive(coord)
                last = hop is p.hops[-1]
                step = hop.step
                need_filter = step.filters or (last and not step.count)
                if last and step.count and not need_filter:
                    results = {a: None for a in frontier}
                    break
                groups: dict[int, list[Addr]] = {}
                for a in frontier:
                    groups.setdefault(self.store.node_of(a), []).append(a)
                nxt: set = set()
                results = {}
                used = 0
                for owner in sorted(groups):
                    batch = groups[owner]
                    out = None
                    if owner != coord and len(batch) >= ship_min:
                        try:
                            reply = self.cluster.send_rpc(owner, Message("a1ql.eval", {
                                "graph": p.graph, "snapshot": tx.read_ts, "step": step,
                                "addrs": batch, "last": last, "filter": need_filter}))
                        except NodeUnreachable:
                            reply = None
                        rpcs += 1
                        if reply is not None:
                            shipped += 1
                            out = reply["out"]
                            hop_stats.local += reply["local"]
                            hop_stats.remote += reply["remote"]
                    if out is None:
                        out = Evaluator(g, tx).eval_hop(batch, step, last, need_filter)
                    self._check_alive(coord)
                    for addr, val in out:
                        if last:
                            results[addr] = val
                            used += ADDR_BYTES + (len(json.dumps(val)) if val else 0)
                        else:
                            for n in val:
                                if n not in nxt:
                                    nxt.add(n)
                                    used += ADDR_BYTES
                        if used > budget:
                            raise FastFailBudget(
                                f"intermediate state exceeds the {budget}-byte budget",
                                hop=hop.index)
                if self.hop_hook is not None:
                    self.hop_hook(hop.index, coord)
                if last:
                    break
                frontier = sorted(nxt)
            self._check_alive(coord)
        except BaseException:
            self.store.abort(tx)
            raise
        snapshot_ts = tx.read_ts
        self.store.commit(tx)
        self.cluster.metrics.record_query(qid, hop_stats)
        total = ReadStats(anchor_stats.local + hop_stats.local,
                          anchor_stats.remote + hop_stats.remote)
        metrics = {
            "query_id": qid, "coordinator": coord, "snapshot_ts": snapshot_ts,
            "hops": len(p.hops), "rpc_count": rpcs, "shipped_batches": shipped,
            "local_reads": total.local, "remote_reads": total.remote,
            "hop_local_reads": hop_stats.local, "hop_remote_reads": hop_stats.remote,
            "hop_local_fraction": hop_stats.local_fraction,
        }
        if p.last.count:
            return ResultPage(count=len(results), metrics=metrics)
        rows = [results[a] for a in sorted(results)]
        if len(rows) <= page_size:
            return ResultPage(rows=rows, metrics=metrics)
        expires = self.cluster.clock.now() + self.token_ttl
        cache = self.cluster.nodes[coord].local.setdefault("query_cache", {})
        cache[qid] = {"rows": rows, "expires_at": expires, "page_size": page_size}
        token = encode_token(coord, qid, page_size, expires)
        return ResultPage(rows=rows[:page_size], token=token, metrics=metrics)

    def _check_alive(self, coord: int) -> None:
        if not self.cluster.is_serving(coord):
            raise SnapshotLost(f"coordinator {coord} failed during the query")

    def _anchor(self, g: Graph, tx: Txn, anchor: tuple) -> list[Addr]:
        kind = anchor[0]
        if kind == "pk":
            _, tname, pk = anchor
            infos = ([g.type_info(tname)] if tname is not None
                     else [t for t in g.types(tx) if t.kind == "vertex"])
            out = []
            for info in infos:
                try:
                    out.append(g._resolve_pk(tx, info, pk))
                except (NotFound, A1Error):
                    continue
            return sorted(out)
        if kind == "index":
            _, tname, fname, value = anchor
            return sorted(set(g.lookup_by_secondary(tname, fname, value, tx=tx)))
        info = g.type_info(anchor[1])
        return [Addr.unpack(v) for _, v in g.primary_index(tx, info).range_scan(tx)]

    # -- pagination ----------------------------------------------------------
    def _serve_page(self, node, body: dict) -> dict:
        cache = node.local.get("query_cache", {})
        entry = cache.get(body["q"])
        if entry is None:
            raise TokenInvalid("no cached result for this token")
        if self.cluster.clock.now() >= entry["expires_at"]:
            cache.pop(body["q"], None)
            raise TokenExpired("continuation expired; restart the query")
        start = body["o"]
        rows = entry["rows"][start:start + entry["page_size"]]
        nxt = start + entry["page_size"]
        if nxt >= len(entry["rows"]):
            cache.pop(body["q"], None)
            nxt = None
        return {"rows": rows, "next": nxt, "expires_at": entry["expires_at"]}

    def fetch_continuation(self, token: str) -> ResultPage:
        t = decode_token(token)
        if self.cluster.clock.now() >= t["e"]:
            node = self.cluster.nodes[t["c"]] if 0 <= t["c"] < len(self.cluster.nodes) else None
            if node is not None:
                node.local.get("query_cache", {}).pop(t["q"], None)
            raise TokenExpired("continuation expired; restart the query")
        if not 0 <= t["c"] < len(self.cluster.nodes):
            raise TokenInvalid("token names an unknown coordinator")
        try:
            reply = self.cluster.send_rpc(t["c"], Message("a1ql.page", t))
        except NodeUnreachable:
            raise TokenInvalid("the coordinator holding this result is gone") from None
        token2 = None
        if reply["next"] is not None:
            token2 = encode_token(t["c"], t["q"], reply["next"], reply["expires_at"])
        return ResultPage(rows=reply["rows"], token=token2)

    def drain(self, page: ResultPage, max_pages: int | None = None) -> list:
        rows = list(page.rows or [])
        pages = 1
        while page.token is not None and (max_pages is None or pages < max_pages):
            page = self.fetch_continuation(page.token)
            rows.extend(page.rows)
            pages += 1
        return rows
