"""Database facade: one cluster, its store and catalog, graphs, workflows,
disaster-recovery pipelines and the query engine."""
from __future__ import annotations

import random
import threading
from pathlib import Path

from . import drstore
from .catalog import DEFAULT_TTL, Catalog, EntryState
from .errors import Deleting, NotFound, TypeDeleting
from .graph import Graph
from .simnet import Cluster, ClusterConfig, spawn_cluster
from .store import Status, Store, Txn
from .tasks import TaskEngine, TaskKind


class Database:
    def __init__(self, cluster: Cluster | None = None, *, config: ClusterConfig | None = None,
                 dr_dir: str | Path | None = None, dr_mode: str = "both",
                 ttl: int = DEFAULT_TTL, **cluster_kwargs):
        self.cluster = cluster or spawn_cluster(config, **cluster_kwargs)
        self.store = Store(self.cluster)
        self.catalog = Catalog(self.store, ttl)
        self.dr_dir = Path(dr_dir) if dr_dir is not None else None
        self.dr_mode = dr_mode
        self.rng = random.Random(self.cluster.config.rng_seed * 7919 + 1)
        self._rng_lock = threading.Lock()
        self.graphs: dict[str, Graph] = {}
        self.durables: dict[str, drstore.DurableStore] = {}
        self.tasks = TaskEngine(self)
        node = self.cluster.cm
        self.run(self.catalog.bootstrap, node=node)
        self.run(self.tasks.bootstrap, node=node)
        from .query import QueryEngine
        self.queries = QueryEngine(self)

    # -- transactions --------------------------------------------------------
    def pick_node(self) -> int:
        """Uniform random live node for vertex placement (seeded)."""
        live = self.cluster.live_nodes()
        with self._rng_lock:
            return self.rng.choice(live)

    def run(self, fn, read_only: bool = False, node: int | None = None,
            max_retries: int = 1000):
        """Run ``fn(tx)`` in a retry-until-commit transaction; committed
        replication-log entries are flushed before returning."""
        for _ in range(max_retries):
            tx = self.store.create_transaction(read_only=read_only, node=node)
            try:
                result = fn(tx)
            except BaseException:
                self.store.abort(tx)
                raise
            if self.commit(tx) is Status.COMMITTED:
                return result
        raise RuntimeError("transaction did not commit within the retry budget")

    def commit(self, tx: Txn) -> Status:
        status = self.store.commit(tx)
        if status is Status.COMMITTED:
            self.after_commit(tx)
        return status

    def after_commit(self, tx: Txn) -> None:
        drstore.flush_after_commit(tx)

    def begin(self, node: int | None = None, read_only: bool = False) -> Txn:
        return self.store.create_transaction(read_only=read_only, node=node)

    # -- graphs --------------------------------------------------------------
    def durable_for(self, name: str) -> drstore.DurableStore:
        d = self.durables.get(name)
        if d is None:
            path = None if self.dr_dir is None else self.dr_dir / f"{name}.a1d"
            d = self.durables[name] = drstore.DurableStore(path)
        return d

    def create_graph(self, name: str, dr_mode: str | None = None,
                     durable: drstore.DurableStore | None = None) -> Graph:
        mode = self.dr_mode if dr_mode is None else dr_mode
        g = self.run(lambda tx: Graph.create(self, tx, name, mode))
        if durable is not None:
            self.durables[name] = durable
        self._attach_dr(g, mode)
        if g.dr is not None:
            g.dr.persist_watermark()
        self.graphs[name] = g
        return g

    def _attach_dr(self, g: Graph, mode: str | None) -> None:
        if mode in (None, "none"):
            return
        g.dr = drstore.ReplicationPipeline(self, g.name, g.log_tree(), self.durable_for(g.name),
                                           drstore.Mode(mode))

    def graph(self, name: str, allow_deleting: bool = False) -> Graph:
        g = self.graphs.get(name)
        if g is None:
            g = Graph(self, name)
            state, meta = self.run(g.read_meta, read_only=True)
            self._attach_dr(g, meta.get("dr_mode"))
            self.graphs[name] = g
        if not allow_deleting:
            state, _ = self.run(g.read_meta, read_only=True)
            if state != EntryState.ACTIVE:
                raise Deleting(f"graph {name} is being deleted")
        return g

    def forget_graph(self, name: str) -> None:
        self.graphs.pop(name, None)
        for suffix in ("", "/tree/edges", "/log"):
            self.catalog.invalidate(f"default/{name}{suffix}")

    def list_graphs(self) -> list[str]:
        def run(tx):
            return sorted({e.name.split("/")[1] for e in self.catalog.list(tx, "default/")
                           if e.name.count("/") == 1 and e.name != "default/_tasks"})
        return self.run(run, read_only=True)

    def delete_graph(self, name: str) -> int:
        """Mark the graph and its types DELETING and enqueue the workflow.
        Returns at once; storage is reclaimed by task workers."""
        g = self.graph(name)

        def run(tx):
            state, meta = g.read_meta(tx)
            if state != EntryState.ACTIVE:
                raise Deleting(f"graph {name} is already being deleted")
            for t in g.types(tx):
                g.mark_type_deleting(tx, t.kind, t.name)
            g._write_doc(tx, g._meta_addr(tx), EntryState.DELETING, meta, g.entry)
            self.catalog.set_state(tx, g.entry, EntryState.DELETING)
            return self.tasks.enqueue(tx, TaskKind.DELETE_GRAPH, {"graph": name})
        task_id = self.run(run)
        g.invalidate_caches()
        return task_id

    def delete_type(self, graph: str, type_name: str, kind: str = "vertex") -> int:
        g = self.graph(graph)

        def run(tx):
            info = g._load_type(tx, kind, type_name)
            if info.state is not EntryState.ACTIVE:
                raise TypeDeleting(f"type {type_name} is already being deleted")
            g.mark_type_deleting(tx, kind, type_name)
            return self.tasks.enqueue(tx, TaskKind.DELETE_TYPE,
                                      {"graph": graph, "kind": kind, "type": type_name})
        task_id = self.run(run)
        g.invalidate_caches()
        return task_id

    # -- queries -------------------------------------------------------------
    def query(self, graph: str, doc, **kwargs):
        return self.queries.execute(graph, doc, **kwargs)

    def fetch(self, token: str):
        return self.queries.fetch_continuation(token)

    # -- disaster recovery ---------------------------------------------------
    def sweep(self, graph: str | None = None) -> int:
        names = [graph] if graph else list(self.graphs)
        n = 0
        for name in names:
            g = self.graphs.get(name)
            if g is not None and g.dr is not None:
                n += g.dr.sweeper_run()
        return n

    def recover(self, durable: drstore.DurableStore, mode: str, graph: str) -> tuple:
        """Rebuild ``graph`` in this (fresh) database from durable tables."""
        if graph in self.graphs:
            raise NotFound(f"graph {graph} already exists here")
        target = self.create_graph(graph, dr_mode="none")
        report = drstore.recover(durable, mode, target)
        return target, report
