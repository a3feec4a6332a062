"""Brute-force oracles, written without the package's parser or evaluator.

``Model`` is a plain dict graph. ``evaluate`` interprets A1QL JSON directly
by nested loops over that dict. ``serializable`` checks a history by trying
every commit order.
"""
from __future__ import annotations

import itertools
import json
import re

CMP = {
    "=": lambda a, b: a == b, "==": lambda a, b: a == b, "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b, "<=": lambda a, b: a <= b, ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}


class Model:
    def __init__(self, pk: dict[str, str]):
        self.pk = pk
        self.vertices: dict[tuple, dict] = {}
        self.edges: dict[tuple, dict] = {}

    def add_vertex(self, vtype: str, attrs: dict) -> tuple:
        key = (vtype, attrs[self.pk[vtype]])
        self.vertices[key] = {k: v for k, v in attrs.items() if v is not None}
        return key

    def remove_vertex(self, key: tuple) -> None:
        del self.vertices[key]
        for e in [e for e in self.edges if e[0] == key or e[2] == key]:
            del self.edges[e]

    def add_edge(self, src: tuple, etype: str, dst: tuple, attrs: dict | None = None) -> None:
        self.edges[(src, etype, dst)] = dict(attrs or {})

    def remove_edge(self, src: tuple, etype: str, dst: tuple) -> None:
        del self.edges[(src, etype, dst)]

    @classmethod
    def from_records(cls, schemas: list[dict], records) -> "Model":
        m = cls({s["type"]: s["primary_key"] for s in schemas if s["kind"] == "vertex"})
        for rec in records:
            attrs = {k: v for k, v in rec.items() if not k.startswith("_")}
            if rec["_kind"] == "vertex":
                m.add_vertex(rec["_type"], attrs)
        for rec in records:
            if rec["_kind"] == "edge":
                src, dst = tuple(rec["_src"]), tuple(rec["_dst"])
                if src in m.vertices and dst in m.vertices:
                    m.add_edge(src, rec["_type"], dst,
                               {k: v for k, v in rec.items() if not k.startswith("_")})
        return m


def _lookup(attrs: dict, path: str):
    m = re.match(r"^([A-Za-z_][\w.]*)(.*)$", path)
    val = attrs.get(m.group(1))
    for raw in re.findall(r"\[([^\]]+)\]", m.group(2)):
        if isinstance(val, list):
            try:
                i = int(raw)
            except ValueError:
                return None
            val = val[i] if -len(val) <= i < len(val) else None
        elif isinstance(val, dict):
            val = val.get(raw)
        else:
            return None
    return val


def _holds(value, cond) -> bool:
    op, want = ("=", cond) if not isinstance(cond, dict) else (cond["_op"], cond["_value"])
    if value is None or want is None:
        return False
    try:
        return bool(CMP[op](value, want))
    except TypeError:
        return False


class _Eval:
    def __init__(self, model: Model):
        self.m = model
        self.out: dict[tuple, list] = {}
        self.inn: dict[tuple, list] = {}
        for (s, t, d), a in model.edges.items():
            self.out.setdefault(s, []).append((t, d, a))
            self.inn.setdefault(d, []).append((t, s, a))

    def vertex_ok(self, v: tuple, step: dict, root: bool) -> bool:
        attrs = self.m.vertices[v]
        for key, cond in step.items():
            if key == "_type":
                if v[0] != cond:
                    return False
            elif key == "id":
                if not _holds(v[1], cond):
                    return False
            elif key == "_match":
                for branch in cond:
                    (direction, edge), = branch.items()
                    if not self.chain_exists(v, direction, edge):
                        return False
            elif not key.startswith("_"):
                if not _holds(_lookup(attrs, key), cond):
                    return False
        return True

    def step_out(self, v: tuple, direction: str, edge: dict) -> list:
        adj = self.out if direction == "_out_edge" else self.inn
        res = []
        for etype, peer, attrs in adj.get(v, []):
            if etype != edge["_type"]:
                continue
            if all(_holds(_lookup(attrs, k), c) for k, c in edge.items() if not k.startswith("_")):
                res.append(peer)
        return res

    def chain_exists(self, v: tuple, direction: str, edge: dict) -> bool:
        inner = edge["_vertex"]
        for peer in self.step_out(v, direction, edge):
            if not self.vertex_ok(peer, inner, False):
                continue
            nxt = [k for k in ("_out_edge", "_in_edge") if k in inner]
            if not nxt or self.chain_exists(peer, nxt[0], inner[nxt[0]]):
                return True
        return False


def evaluate(model: Model, query) -> dict:
    """``{"count": n}`` or ``{"rows": sorted rows without _addr}``."""
    if isinstance(query, str):
        query = json.loads(query)
    ev = _Eval(model)
    step = query
    current = set(model.vertices)
    root = True
    while True:
        current = {v for v in current if ev.vertex_ok(v, step, root)}
        root = False
        nxt = [k for k in ("_out_edge", "_in_edge") if k in step]
        if not nxt:
            break
        edge = step[nxt[0]]
        current = {p for v in current for p in ev.step_out(v, nxt[0], edge)}
        step = edge["_vertex"]
    select = step.get("_select", ["*"])
    if select == ["_count(*)"]:
        return {"count": len(current)}
    rows = []
    for v in current:
        attrs = model.vertices[v]
        row = {"_type": v[0]}
        for col in select:
            if col == "*":
                row.update(attrs)
            else:
                row[col] = _lookup(attrs, col)
        rows.append(row)
    return {"rows": sorted(rows, key=lambda r: json.dumps(r, sort_keys=True))}


# -- serializability -----------------------------------------------------------

def serial_orders(initial: dict, txns: list[dict], final: dict) -> list[tuple]:
    """Every permutation of ``txns`` (each ``{"ts", "reads", "writes"}``)
    whose serial replay reproduces all reads and the final state, as tuples
    of timestamps."""
    found = []
    for order in itertools.permutations(txns):
        state = dict(initial)
        for t in order:
            if any(state.get(k) != v for k, v in t["reads"].items()):
                break
            state.update(t["writes"])
        else:
            if state == final:
                found.append(tuple(t["ts"] for t in order))
    return found


def serializable(initial: dict, txns: list[dict], final: dict) -> bool:
    """Some explaining serial order is the commit-timestamp order."""
    want = tuple(sorted(t["ts"] for t in txns))
    return want in serial_orders(initial, txns, final)
