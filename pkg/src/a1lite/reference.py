"""In-memory reference evaluation of A1QL over raw load records.

Used by ``bench`` to check answers under load. It walks plain dictionaries
built from the NDJSON records and knows nothing about the store, so a wrong
answer from the engine cannot be reproduced here by accident.
"""
from __future__ import annotations

import json
from collections import defaultdict

from .graph import IN, OUT
from .query import _MISSING, COUNT_STAR, EdgeStep, QueryAst, VertexStep, parse_a1ql, parse_path, resolve_path
from .schema import json_safe


class ReferenceGraph:
    def __init__(self, schemas: list[dict], records):
        self.pk = {d["type"]: d["primary_key"] for d in schemas
                   if d.get("kind", "vertex") == "vertex"}
        self.attrs: dict[tuple, dict] = {}
        self.adj = {OUT: defaultdict(list), IN: defaultdict(list)}
        edges = []
        for rec in records:
            if isinstance(rec, tuple):
                rec = rec[1]
            if not isinstance(rec, dict):
                continue
            attrs = {k: v for k, v in rec.items() if not k.startswith("_") and v is not None}
            if rec.get("_kind") == "vertex":
                key = (rec["_type"], attrs[self.pk[rec["_type"]]])
                self.attrs.setdefault(key, attrs)
            elif rec.get("_kind") == "edge":
                edges.append((tuple(rec["_src"]), rec["_type"], tuple(rec["_dst"]), attrs))
        seen = set()
        for src, etype, dst, attrs in edges:
            if src not in self.attrs or dst not in self.attrs or (src, etype, dst) in seen:
                continue
            seen.add((src, etype, dst))
            self.adj[OUT][src].append((etype, dst, attrs))
            self.adj[IN][dst].append((etype, src, attrs))

    def _passes(self, v: tuple, step: VertexStep) -> bool:
        if step.type is not None and v[0] != step.type:
            return False
        attrs, pk = self.attrs[v], v[1]
        if step.anchor is not _MISSING and pk != step.anchor:
            return False
        if not all(p.test(attrs, pk) for p in step.preds):
            return False
        return all(self._exists(v, b) for b in step.match)

    def _neighbors(self, v: tuple, edge: EdgeStep) -> list:
        return [peer for etype, peer, attrs in self.adj[edge.direction].get(v, ())
                if etype == edge.type and all(p.test(attrs) for p in edge.preds)]

    def _exists(self, v: tuple, edge: EdgeStep) -> bool:
        for peer in self._neighbors(v, edge):
            if self._passes(peer, edge.vertex) and (
                    edge.vertex.edge is None or self._exists(peer, edge.vertex.edge)):
                return True
        return False

    def evaluate(self, doc) -> dict:
        """``{"count": n}`` or ``{"rows": [...]}``; rows omit ``_addr`` and
        are sorted by their JSON form."""
        ast = doc if isinstance(doc, QueryAst) else parse_a1ql(doc)
        step = ast.root
        frontier = set(self.attrs)
        while True:
            frontier = {v for v in frontier if self._passes(v, step)}
            if step.edge is None:
                break
            frontier = {n for v in frontier for n in self._neighbors(v, step.edge)}
            step = step.edge.vertex
        if step.count or step.select == [COUNT_STAR]:
            return {"count": len(frontier)}
        return {"rows": sorted((self._project(v, step) for v in frontier), key=_row_key)}

    def _project(self, v: tuple, step: VertexStep) -> dict:
        attrs = self.attrs[v]
        row = {"_type": v[0]}
        for col in step.select:
            if col == "*":
                row.update(json_safe(attrs))
            else:
                val = resolve_path(attrs, parse_path(col, ""))
                row[col] = json_safe({"v": val})["v"] if val is not None else None
        return row


def _row_key(row: dict) -> str:
    return json.dumps(row, sort_keys=True, default=str)


def normalize_rows(rows: list) -> list:
    """Engine rows in the reference's comparable form."""
    return sorted(({k: v for k, v in r.items() if k != "_addr"} for r in rows), key=_row_key)
