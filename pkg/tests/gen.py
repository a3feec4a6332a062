"""Seeded random graphs and A1QL queries for oracle comparisons."""
from __future__ import annotations

import random

FIELDS = [
    {"id": 0, "name": "id", "type": "STRING"},
    {"id": 1, "name": "n", "type": "INT"},
    {"id": 2, "name": "s", "type": "STRING"},
    {"id": 3, "name": "l", "type": "LIST<INT>"},
    {"id": 4, "name": "m", "type": "MAP<STRING,STRING>"},
]
VTYPES = ["A", "B"]
ETYPES = ["e", "f"]
SCHEMAS = ([{"type": t, "kind": "vertex", "primary_key": "id", "fields": FIELDS} for t in VTYPES]
           + [{"type": t, "kind": "edge", "fields": [{"id": 0, "name": "w", "type": "INT"}]}
              for t in ETYPES])
WORDS = ["red", "green", "blue", "gold"]


def random_records(rng: random.Random, n_vertices: int, avg_degree: float = 3.0) -> list[dict]:
    recs, keys = [], []
    for i in range(n_vertices):
        t = rng.choice(VTYPES)
        pk = f"{t.lower()}{i}"
        rec = {"_kind": "vertex", "_type": t, "id": pk, "n": rng.randrange(10)}
        if rng.random() < 0.8:
            rec["s"] = rng.choice(WORDS)
        if rng.random() < 0.5:
            rec["l"] = [rng.randrange(5) for _ in range(rng.randrange(1, 4))]
        if rng.random() < 0.5:
            rec["m"] = {"k": rng.choice(WORDS)}
        recs.append(rec)
        keys.append([t, pk])
    seen = set()
    for _ in range(int(n_vertices * avg_degree)):
        a, b, t = rng.choice(keys), rng.choice(keys), rng.choice(ETYPES)
        k = (a[1], t, b[1])
        if k in seen:
            continue
        seen.add(k)
        rec = {"_kind": "edge", "_type": t, "_src": a, "_dst": b}
        if rng.random() < 0.7:
            rec["w"] = rng.randrange(10)
        recs.append(rec)
    return recs


def _pred(rng: random.Random, pks: list) -> tuple[str, object]:
    kind = rng.randrange(6)
    if kind == 0:
        return "n", {"_op": rng.choice(["<", "<=", ">", ">=", "!=", "="]), "_value": rng.randrange(10)}
    if kind == 1:
        return "s", rng.choice(WORDS)
    if kind == 2:
        return "m[k]", rng.choice(WORDS)
    if kind == 3:
        return "l[0]", {"_op": rng.choice(["<", ">="]), "_value": rng.randrange(5)}
    if kind == 4:
        return "id", {"_op": "!=", "_value": rng.choice(pks)}
    return "n", rng.randrange(10)


def _vertex(rng: random.Random, pks: list, depth: int, last: bool, branch: bool = False) -> dict:
    v: dict = {}
    if rng.random() < 0.3:
        v["_type"] = rng.choice(VTYPES)
    for _ in range(rng.choice([0, 0, 1, 2])):
        k, val = _pred(rng, pks)
        v[k] = val
    if not branch and rng.random() < 0.2:
        v["_match"] = [{rng.choice(["_out_edge", "_in_edge"]): _edge(rng, pks, 0, True, True)}
                       for _ in range(rng.choice([1, 2]))]
    if depth > 0:
        v[rng.choice(["_out_edge", "_in_edge"])] = _edge(rng, pks, depth - 1, last, branch)
    elif last and not branch:
        v["_select"] = rng.choice([["_count(*)"], ["*"], ["n", "s"], ["m[k]", "l[0]"]])
    return v


def _edge(rng: random.Random, pks: list, depth: int, last: bool, branch: bool) -> dict:
    e: dict = {"_type": rng.choice(ETYPES)}
    if rng.random() < 0.2:
        e["w"] = {"_op": rng.choice(["<", ">="]), "_value": rng.randrange(10)}
    e["_vertex"] = _vertex(rng, pks, depth, last, branch)
    return e


def random_query(rng: random.Random, pks: list, hubs: list | None = None) -> dict:
    """1-3 hops from an ``id`` anchor (usually) or a typed equality scan."""
    hops = rng.randint(1, 3)
    if rng.random() < 0.85:
        root = {"id": rng.choice(hubs or pks)}
    else:
        root = {"_type": rng.choice(VTYPES), "n": rng.randrange(10)}
    body = _vertex(rng, pks, hops, True)
    body.pop("_type", None)
    root.update({k: v for k, v in body.items() if k not in root})
    return root
