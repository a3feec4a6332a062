"""Bundled film/actor/director knowledge graph (about 10^4 vertices).

Everything is one weakly typed ``entity`` vertex type, as in a knowledge
graph, with a ``kind`` attribute and typed edges in both directions where a
query needs them. Generation is deterministic for a given seed.
"""
from __future__ import annotations

import json
import random
from pathlib import Path

GRAPH = "films"

ENTITY = {
    "type": "entity",
    "kind": "vertex",
    "fields": [
        {"id": 0, "name": "id", "type": "STRING"},
        {"id": 1, "name": "name", "type": "LIST<STRING>"},
        {"id": 2, "name": "str_str_map", "type": "MAP<STRING,STRING>"},
        {"id": 3, "name": "kind", "type": "STRING"},
        {"id": 4, "name": "year", "type": "INT"},
    ],
    "primary_key": "id",
}
EDGE_TYPES = ["director.film", "film.director", "film.actor", "actor.film", "film.genre",
              "character.film", "film.performance", "performance.actor"]
SCHEMAS = [ENTITY] + [{"type": t, "kind": "edge", "fields": []} for t in EDGE_TYPES]

QUERIES = {
    "Q1": {"id": "steven.spielberg",
           "_out_edge": {"_type": "director.film", "_vertex": {
               "_out_edge": {"_type": "film.actor", "_vertex": {
                   "_select": ["_count(*)"]}}}}},
    "Q2": {"id": "character.batman",
           "_out_edge": {"_type": "character.film", "_vertex": {
               "_out_edge": {"_type": "film.performance", "_vertex": {
                   "str_str_map[character]": "Batman",
                   "_out_edge": {"_type": "performance.actor", "_vertex": {
                       "_select": ["_count(*)"]}}}}}}},
    "Q3": {"id": "steven.spielberg",
           "_out_edge": {"_type": "director.film", "_vertex": {
               "_type": "entity",
               "_select": ["name[0]"],
               "_match": [
                   {"_out_edge": {"_type": "film.actor", "_vertex": {"id": "tom.hanks"}}},
                   {"_out_edge": {"_type": "film.genre", "_vertex": {"id": "action"}}}]}}},
    "Q4": {"id": "tom.hanks",
           "_out_edge": {"_type": "actor.film", "_vertex": {
               "_out_edge": {"_type": "film.actor", "_vertex": {
                   "_out_edge": {"_type": "actor.film", "_vertex": {
                       "_select": ["_count(*)"]}}}}}}},
}

GENRES = ["action", "drama", "comedy", "thriller", "horror", "romance", "sci-fi", "fantasy",
          "animation", "documentary", "western", "war", "crime", "mystery", "musical",
          "family", "adventure", "biography", "history", "sport"]


def _vertex(pk: str, kind: str, name: str, **extra) -> dict:
    rec = {"_kind": "vertex", "_type": "entity", "id": pk, "kind": kind, "name": [name]}
    rec.update(extra)
    return rec


def _edge(etype: str, src: str, dst: str) -> dict:
    return {"_kind": "edge", "_type": etype, "_src": ["entity", src], "_dst": ["entity", dst]}


def film_dataset(seed: int = 7, films: int = 1200, actors: int = 3600, directors: int = 60,
                 characters: int = 300, cast: int = 8, roles: int = 3) -> list[dict]:
    """Vertex records first, then edge records."""
    rng = random.Random(seed)
    verts, edges = [], []
    director_ids = ["steven.spielberg"] + [f"director.{i}" for i in range(1, directors)]
    actor_ids = ["tom.hanks"] + [f"actor.{i}" for i in range(1, actors)]
    char_ids = ["character.batman"] + [f"character.{i}" for i in range(1, characters)]
    film_ids = [f"film.{i}" for i in range(films)]
    for d in director_ids:
        verts.append(_vertex(d, "director", d.replace(".", " ").title()))
    for a in actor_ids:
        verts.append(_vertex(a, "actor", a.replace(".", " ").title()))
    for g in GENRES:
        verts.append(_vertex(g, "genre", g.title()))
    char_names = {c: ("Batman" if c == "character.batman" else f"Character {c.split('.')[1]}")
                  for c in char_ids}
    for c in char_ids:
        verts.append(_vertex(c, "character", char_names[c]))
    weights = [1.0 / (i + 10) for i in range(actors)]
    spielberg_films = set(film_ids[:40])
    hanks_films = set(film_ids[:6]) | set(rng.sample(film_ids[40:], 19))
    batman_films = rng.sample(film_ids, 8)
    perf = 0
    for i, f in enumerate(film_ids):
        verts.append(_vertex(f, "film", f"Film {i}", year=1950 + rng.randrange(70)))
        director = "steven.spielberg" if f in spielberg_films else rng.choice(director_ids[1:])
        edges.append(_edge("director.film", director, f))
        edges.append(_edge("film.director", f, director))
        members = set(rng.choices(actor_ids[1:], weights[1:], k=cast * 2))
        members = sorted(members)[:cast]
        if f in hanks_films:
            members = ["tom.hanks"] + members[:cast - 1]
        for a in members:
            edges.append(_edge("film.actor", f, a))
            edges.append(_edge("actor.film", a, f))
        for g in sorted(set(rng.sample(GENRES, rng.choice((1, 2))))):
            edges.append(_edge("film.genre", f, g))
        chars = rng.sample(char_ids[1:], roles)
        if f in batman_films:
            chars[0] = "character.batman"
        for c in chars:
            p = f"performance.{perf}"
            perf += 1
            verts.append({"_kind": "vertex", "_type": "entity", "id": p, "kind": "performance",
                          "str_str_map": {"character": char_names[c]}})
            edges.append(_edge("character.film", c, f))
            edges.append(_edge("film.performance", f, p))
            edges.append(_edge("performance.actor", p, rng.choice(members)))
    # action films among Spielberg's so the star pattern has answers
    for f in sorted(spielberg_films)[:3]:
        e = _edge("film.genre", f, "action")
        if e not in edges:
            edges.append(e)
    seen, unique = set(), []
    for e in edges:
        k = (e["_type"], e["_src"][1], e["_dst"][1])
        if k not in seen:
            seen.add(k)
            unique.append(e)
    return verts + unique


def write_dataset(out_dir: str | Path, seed: int = 7) -> tuple[Path, Path]:
    """Write ``schema.json`` and ``data.ndjson``; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema = out / "schema.json"
    data = out / "data.ndjson"
    schema.write_text(json.dumps(SCHEMAS, indent=2) + "\n")
    with open(data, "w", encoding="utf-8") as fh:
        for rec in film_dataset(seed):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return schema, data


def load_sample(db, seed: int = 7, name: str = GRAPH, **kwargs):
    """Create the sample graph in ``db``; returns (graph, load report)."""
    from .loader import load_records
    g = db.create_graph(name, **kwargs)
    for doc in SCHEMAS:
        g.define_type(doc)
    report = load_records(g, enumerate(film_dataset(seed), 1))
    report.types = len(SCHEMAS)
    return g, report
