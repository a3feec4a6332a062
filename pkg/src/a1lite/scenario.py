"""Deterministic chaos/recovery scenario scripts.

A scenario is JSON: cluster settings plus ordered steps. Mutation steps go
through the graph API; ``txn`` groups mutations into one transaction and can
cut the post-commit flush after chosen log entries, which is how partial
replication is staged. Fault, sweep, crash and recover steps drive the rest.
"""
from __future__ import annotations

import json
from pathlib import Path

from . import drstore
from .db import Database
from .errors import A1Error
from .simnet import ClusterConfig, FaultKind
from .store import Status

FAULTS = {k.value: k for k in FaultKind}


def _vkey(ref) -> tuple:
    return (ref[0], ref[1])


def _ekey(src, etype, dst) -> tuple:
    return (_vkey(src), etype, _vkey(dst))


class ScenarioRunner:
    def __init__(self, spec: dict, config: ClusterConfig | None = None,
                 dr_dir: str | Path | None = None):
        self.spec = spec
        self.config = config or ClusterConfig(**spec.get("cluster", {}))
        self.dr_dir = dr_dir
        self.graph_name = spec.get("graph", "g")
        self.dr_mode = spec.get("dr_mode", "both")
        self.db = Database(config=self.config, dr_dir=dr_dir, dr_mode=self.dr_mode)
        self.g = self.db.create_graph(self.graph_name)
        for doc in spec.get("schemas", []):
            self.g.define_type(doc)
        self.durable = self.db.durable_for(self.graph_name)
        self.log: list[dict] = []
        self.assertions: list[dict] = []
        self.recoveries: dict[str, dict] = {}

    # -- mutations -----------------------------------------------------------
    def _addr(self, tx, ref):
        return self.g.addr_of(ref[0], ref[1], tx=tx)

    def _mutate(self, tx, step: dict) -> None:
        op, g = step["op"], self.g
        if op == "create_vertex":
            g.create_vertex(step["type"], step["attrs"], tx=tx)
        elif op == "update_vertex":
            g.update_vertex(step["type"], step["pk"], step["attrs"], tx=tx)
        elif op == "delete_vertex":
            g.delete_vertex(step["type"], step["pk"], tx=tx)
        elif op == "create_edge":
            g.create_edge(self._addr(tx, step["src"]), step["type"], self._addr(tx, step["dst"]),
                          step.get("attrs"), tx=tx)
        elif op == "delete_edge":
            g.delete_edge(self._addr(tx, step["src"]), step["type"], self._addr(tx, step["dst"]),
                          tx=tx)
        else:
            raise ValueError(f"unknown mutation {op!r}")

    def _txn(self, step: dict) -> dict:
        """Commit several mutations at once; ``flush`` lists which of the
        transaction's log entries reach the durable store ("all" by default)."""
        store = self.db.store
        tx = store.create_transaction(node=step.get("node"))
        try:
            for m in step["steps"]:
                self._mutate(tx, m)
        except BaseException:
            store.abort(tx)
            raise
        if store.commit(tx) is not Status.COMMITTED:
            return {"txn": "aborted"}
        entries = tx.tags.get("dr_entries", [])
        chosen = step.get("flush", "all")
        idx = range(len(entries)) if chosen == "all" else chosen
        for i in idx:
            pipe, addr = entries[i]
            pipe.flush_entry(addr, sync=True)
        return {"txn": "committed", "commit_ts": tx.write_ts, "log_entries": len(entries),
                "flushed": list(idx)}

    # -- steps ---------------------------------------------------------------
    def step(self, s: dict) -> dict:
        if "op" in s:
            if s["op"] == "txn":
                return self._txn(s)
            self.db.run(lambda tx: self._mutate(tx, s), node=s.get("node"))
            return {"op": s["op"], "ok": True}
        if "fault" in s:
            kind = FAULTS[s["fault"]]
            nodes = s.get("nodes", [s.get("node", 0)])
            for n in nodes:
                self.db.cluster.inject_fault(n, kind)
            return {"fault": kind.value, "nodes": nodes}
        if s.get("sweep"):
            return {"swept": self.db.sweep(self.graph_name)}
        if "durable" in s:
            self.durable.available = s["durable"] == "up"
            return {"durable": s["durable"]}
        if "crash" in s:
            if s["crash"] != "power_loss_all":
                raise ValueError(f"unknown crash {s['crash']!r}")
            for n in range(self.config.node_count):
                self.db.cluster.inject_fault(n, FaultKind.POWER_LOSS)
            return {"crash": "power_loss_all", "regions_left": self.db.store.region_count()}
        if "recover" in s:
            return self._recover(s)
        raise ValueError(f"unrecognized step {s!r}")

    def _recover(self, s: dict) -> dict:
        mode = s["recover"]
        durable = self.durable
        if self.dr_dir is not None:
            durable = drstore.DurableStore(Path(self.dr_dir) / f"{self.graph_name}.a1d")
        fresh = Database(config=self.config, dr_mode="none")
        target, report = fresh.recover(durable, mode, self.graph_name)
        got_v, got_e = observed_state(target)
        out = {"recover": mode, "t_R": report.t_r, "vertices": sorted(map(list, got_v)),
               "edges": sorted([list(a), t, list(b)] for a, t, b in got_e),
               "skipped_edges": report.skipped_edges}
        expect = s.get("expect")
        if expect is not None:
            want_v = {_vkey(v) for v in expect.get("vertices", [])}
            want_e = {_ekey(*e) for e in expect.get("edges", [])}
            ok = want_v == got_v and want_e == got_e
            self.assertions.append({"step": f"recover {mode}", "ok": ok,
                                    "expected": expect, "got": {"vertices": out["vertices"],
                                                                "edges": out["edges"]}})
        self.recoveries[mode] = out
        return out

    def run(self) -> dict:
        for s in self.spec.get("steps", []):
            try:
                res = self.step(s)
            except A1Error as exc:
                res = {"error": exc.code, "message": str(exc)}
                if not s.get("may_fail"):
                    self.assertions.append({"step": json.dumps(s, sort_keys=True), "ok": False,
                                            "error": exc.code})
            self.log.append(res)
        return self.report()

    def report(self) -> dict:
        return {"graph": self.graph_name, "steps": self.log, "assertions": self.assertions,
                "ok": all(a["ok"] for a in self.assertions)}


def observed_state(g) -> tuple[set, set]:
    """(vertex identities, edge identities) currently in ``g``."""
    verts, edges = set(), set()
    for info in g.types():
        if info.kind != "vertex":
            continue
        for addr in g.vertices(info.name):
            v = g.vertex_at(addr)
            ident = (v.type, v.attrs[info.schema.primary_key])
            verts.add(ident)
            for half in g.enumerate_edges(addr):
                peer = g.vertex_at(half.peer)
                pinfo = g.type_info(peer.type)
                edges.add((ident, g.type_by_id(half.type_id).name,
                           (peer.type, peer.attrs[pinfo.schema.primary_key])))
    return verts, edges


def run_scenario(spec: dict | str | Path, dr_dir: str | Path | None = None,
                 seed: int | None = None) -> dict:
    if not isinstance(spec, dict):
        spec = json.loads(Path(spec).read_text())
    cfg = dict(spec.get("cluster", {}))
    if seed is not None:
        cfg["rng_seed"] = seed
    return ScenarioRunner(spec, ClusterConfig(**cfg), dr_dir).run()
