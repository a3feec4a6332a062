"""Schema files and newline-delimited JSON bulk loading."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import A1Error, NotFound, ParseError, SchemaViolation
from .graph import Graph

BATCH = 100


@dataclass
class LoadReport:
    vertices: int = 0
    edges: int = 0
    types: int = 0
    errors: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_dict(self) -> dict:
        return {"types": self.types, "vertices": self.vertices, "edges": self.edges,
                "errors": self.errors}


def read_schemas(path: str | Path) -> list[dict]:
    """A schema file holds one definition object or a list of them."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", exc.pos) from None
    return doc if isinstance(doc, list) else [doc]


def read_records(path: str | Path):
    """Yield (line number, record or ParseError) from an NDJSON file."""
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield n, json.loads(line)
            except json.JSONDecodeError as exc:
                yield n, ParseError(f"line {n}: {exc.msg}", exc.pos)


def _endpoint(g: Graph, tx, ref, vtypes: list):
    """Resolve ``"pk"`` or ``[type, pk]`` to a vertex address."""
    if isinstance(ref, list) and len(ref) == 2:
        return g._resolve_pk(tx, g.type_info(ref[0], tx=tx), ref[1])
    for info in vtypes:
        try:
            return g._resolve_pk(tx, info, ref)
        except (NotFound, SchemaViolation):
            continue
    raise NotFound(f"no vertex with key {ref!r}")


def _apply(g: Graph, tx, rec: dict, vtypes: list) -> str:
    if not isinstance(rec, dict):
        raise SchemaViolation("record must be a JSON object")
    kind = rec.get("_kind")
    attrs = {k: v for k, v in rec.items() if not k.startswith("_")}
    if kind == "vertex":
        g.create_vertex(rec.get("_type"), attrs, tx=tx)
        return "vertex"
    if kind == "edge":
        src = _endpoint(g, tx, rec.get("_src"), vtypes)
        dst = _endpoint(g, tx, rec.get("_dst"), vtypes)
        g.create_edge(src, rec.get("_type"), dst, attrs or None, tx=tx)
        return "edge"
    raise SchemaViolation(f"_kind must be vertex or edge, not {kind!r}")


def load_records(g: Graph, records, batch: int = BATCH, report: LoadReport | None = None) -> LoadReport:
    """Create vertices, then edges, in batched transactions. A failing batch
    is replayed record by record so one bad row does not sink its neighbours."""
    report = report or LoadReport()
    items = list(records)
    for n, rec in items:
        if isinstance(rec, Exception):
            report.errors.append({"line": n, "error": rec.code, "message": str(rec)})
    good = [(n, r) for n, r in items if not isinstance(r, Exception)]
    vertices, rest = [], []
    for x in good:
        is_vertex = isinstance(x[1], dict) and x[1].get("_kind") == "vertex"
        (vertices if is_vertex else rest).append(x)
    vtypes = [t for t in g.types() if t.kind == "vertex"]
    for group in (vertices, rest):
        for i in range(0, len(group), batch):
            chunk = group[i:i + batch]
            try:
                kinds = g.db.run(lambda tx, c=chunk: [_apply(g, tx, r, vtypes) for _, r in c])
            except A1Error:
                kinds = []
                for n, r in chunk:
                    try:
                        kinds.append(g.db.run(lambda tx, r=r: _apply(g, tx, r, vtypes)))
                    except A1Error as exc:
                        report.errors.append({"line": n, "error": exc.code, "message": str(exc)})
            report.vertices += kinds.count("vertex")
            report.edges += kinds.count("edge")
    return report


def load_files(g: Graph, schema_paths: list, data_path: str | Path | None,
               batch: int = BATCH) -> LoadReport:
    report = LoadReport()
    for path in schema_paths:
        for doc in read_schemas(path):
            try:
                g.define_type(doc)
                report.types += 1
            except A1Error as exc:
                report.errors.append({"schema": str(path), "error": exc.code,
                                      "message": str(exc)})
    if data_path is not None:
        load_records(g, read_records(data_path), batch, report)
    return report
