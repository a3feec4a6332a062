"""Asynchronous workflows on a task queue kept in the store.

The queue is a B-tree keyed by ``(priority, task_id)`` whose values point at
JSON task objects. Workers on any node claim a task by taking a lease in a
transaction; each step runs one batch of work in the same transaction as the
task-state update, so a crashed worker's task is resumed from its last
committed cursor once the lease expires.
"""
from __future__ import annotations

import enum
import json
import logging
import struct
from dataclasses import dataclass, field

from .btree import BTreeProxy, create_tree
from .catalog import CatalogEntry, EntryKind, entry_name
from .errors import A1Error, ClaimLost, NotFound, StorePaused, NodeUnreachable
from .store import Addr, Hint, Status, Txn

log = logging.getLogger(__name__)

LEASE_TICKS = 500
BATCH = 100
LOW_PRIORITY = 8
QUEUE_NAME = entry_name("_tasks")
TAG = "tasks"
_LEN = struct.Struct(">I")


class TaskKind(str, enum.Enum):
    DELETE_GRAPH = "DELETE_GRAPH"
    DELETE_TYPE = "DELETE_TYPE"
    DELETE_INDEX = "DELETE_INDEX"
    BUILD_INDEX = "BUILD_INDEX"
    SWEEP_SEGMENT = "SWEEP_SEGMENT"


class TaskState(str, enum.Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    WAITING_CHILDREN = "WAITING_CHILDREN"
    DONE = "DONE"


@dataclass
class Task:
    task_id: int
    kind: TaskKind
    args: dict
    priority: int = LOW_PRIORITY
    state: TaskState = TaskState.PENDING
    parent: int | None = None
    pending_children: int = 0
    lease_expiry: int = 0
    owner: int | None = None
    steps: int = 0
    error: str | None = None
    addr: Addr | None = field(default=None, compare=False)

    @property
    def key(self) -> bytes:
        return queue_key(self.priority, self.task_id)

    def to_json(self) -> bytes:
        doc = {
            "task_id": self.task_id, "kind": self.kind.value, "args": self.args,
            "priority": self.priority, "state": self.state.value, "parent": self.parent,
            "pending_children": self.pending_children, "lease_expiry": self.lease_expiry,
            "owner": self.owner, "steps": self.steps, "error": self.error,
        }
        return json.dumps(doc, sort_keys=True).encode()

    @classmethod
    def from_bytes(cls, raw: bytes, addr: Addr) -> "Task":
        (n,) = _LEN.unpack_from(raw, 0)
        d = json.loads(raw[4:4 + n])
        return cls(d["task_id"], TaskKind(d["kind"]), d["args"], d["priority"],
                   TaskState(d["state"]), d["parent"], d["pending_children"],
                   d["lease_expiry"], d["owner"], d["steps"], d["error"], addr)


def queue_key(priority: int, task_id: int) -> bytes:
    return struct.pack(">BQ", priority, task_id)


@dataclass
class Outcome:
    """What a handler step decided: keep going, wait for children, or finish."""
    action: str
    children: list = field(default_factory=list)


CONTINUE = Outcome("continue")
DONE = Outcome("done")


def wait_for(children: list[tuple[str, dict]]) -> Outcome:
    return Outcome("wait", children) if children else Outcome("continue")


class TaskEngine:
    def __init__(self, db, lease: int = LEASE_TICKS, batch: int = BATCH):
        self.db = db
        self.store = db.store
        self.catalog = db.catalog
        self.lease = lease
        self.batch = batch
        self.completed: dict[int, Task] = {}
        self.reschedules = 0
        self._handlers = {
            TaskKind.DELETE_GRAPH: self._delete_graph,
            TaskKind.DELETE_TYPE: self._delete_type,
            TaskKind.DELETE_INDEX: self._delete_index,
            TaskKind.BUILD_INDEX: self._build_index,
            TaskKind.SWEEP_SEGMENT: self._sweep,
        }

    def bootstrap(self, tx: Txn) -> None:
        root = create_tree(self.store, tx, "tasks", Hint.on_node(self.store.cluster.cm), tag=TAG)
        self.catalog.register(tx, CatalogEntry(QUEUE_NAME, EntryKind.QUEUE, root))

    def queue(self, tx: Txn) -> BTreeProxy:
        return self.catalog.resolve(QUEUE_NAME, node=tx.node).tree

    # -- task objects --------------------------------------------------------
    def _read(self, tx: Txn, addr: Addr) -> Task:
        return Task.from_bytes(self.store.read(tx, addr).data, addr)

    def _write(self, tx: Txn, task: Task) -> None:
        raw = task.to_json()
        buf = self.store.read(tx, task.addr)
        if len(raw) + 4 <= buf.size:
            wbuf = self.store.open_for_write(tx, buf)
            wbuf.write(0, _LEN.pack(len(raw)) + raw + bytes(buf.size - 4 - len(raw)))
            return
        nbuf = self.store.alloc(tx, 2 * (len(raw) + 4), Hint.near(task.addr), tag=TAG)
        nbuf.write(0, _LEN.pack(len(raw)) + raw)
        self.store.free(tx, task.addr)
        task.addr = nbuf.addr
        self.queue(tx).insert(tx, task.key, nbuf.addr.pack(), replace=True)

    def _remove(self, tx: Txn, task: Task) -> None:
        self.queue(tx).delete(tx, task.key)
        self.store.free(tx, task.addr)

    def enqueue(self, tx: Txn, kind: str | TaskKind, args: dict, parent: int | None = None,
                priority: int = LOW_PRIORITY) -> int:
        """Add a task within the caller's transaction; returns its id."""
        task = Task(self.store.unique(), TaskKind(kind), dict(args), priority, parent=parent)
        raw = task.to_json()
        buf = self.store.alloc(tx, max(512, 2 * (len(raw) + 4)), tag=TAG)
        buf.write(0, _LEN.pack(len(raw)) + raw)
        task.addr = buf.addr
        self.queue(tx).insert(tx, task.key, buf.addr.pack())
        return task.task_id

    def tasks(self, tx: Txn | None = None) -> list[Task]:
        def run(t):
            return [self._read(t, Addr.unpack(v)) for _, v in self.queue(t).range_scan(t)]
        if tx is not None:
            return run(tx)
        return self.db.run(run, read_only=True)

    def status(self, task_id: int) -> TaskState | None:
        """Current state; DONE once the task has been retired from the queue."""
        for t in self.tasks():
            if t.task_id == task_id:
                return t.state
        if task_id in self.completed:
            return TaskState.DONE
        return None

    def idle(self) -> bool:
        return not self.tasks()

    # -- claiming ------------------------------------------------------------
    def claim(self, worker: int) -> Task | None:
        """Lease the lowest-keyed claimable task for ``worker``."""
        now = self.store.cluster.clock.now()
        tx = self.store.create_transaction(node=worker)
        try:
            chosen = None
            for _, v in self.queue(tx).range_scan(tx):
                task = self._read(tx, Addr.unpack(v))
                if task.state is TaskState.PENDING or (
                        task.state is TaskState.RUNNING and task.lease_expiry <= now):
                    chosen = task
                    break
            if chosen is None:
                self.store.abort(tx)
                return None
            chosen.state = TaskState.RUNNING
            chosen.owner = worker
            chosen.lease_expiry = now + self.lease
            self._write(tx, chosen)
        except BaseException:
            self.store.abort(tx)
            raise
        if self.store.commit(tx) is not Status.COMMITTED:
            raise ClaimLost(f"worker {worker} lost the race for task {chosen.task_id}")
        return chosen

    def run_step(self, task: Task, worker: int) -> Outcome:
        """Run one batch of ``task`` under the lease ``worker`` holds."""
        for _ in range(1000):
            tx = self.store.create_transaction(node=worker)
            try:
                try:
                    cur = self._read(tx, task.addr)
                except A1Error:
                    raise ClaimLost(f"task {task.task_id} vanished") from None
                if (cur.state is not TaskState.RUNNING or cur.owner != worker
                        or cur.lease_expiry != task.lease_expiry):
                    raise ClaimLost(f"worker {worker} no longer holds task {task.task_id}")
                try:
                    outcome = self._handlers[cur.kind](tx, cur)
                except ClaimLost:
                    raise
                except (StorePaused, NodeUnreachable):
                    raise
                except A1Error as exc:
                    log.warning("task %s failed: %s", cur.task_id, exc)
                    self.store.abort(tx)
                    self._fail(cur, worker, exc)
                    return DONE
                self._apply(tx, cur, outcome)
            except BaseException:
                self.store.abort(tx)
                raise
            if self.store.commit(tx) is Status.COMMITTED:
                if outcome.action == "done":
                    self.completed[cur.task_id] = cur
                elif outcome.action == "continue":
                    self.reschedules += 1
                self.db.after_commit(tx)
                return outcome
        raise RuntimeError(f"task {task.task_id} step kept conflicting")

    def _fail(self, task: Task, worker: int, exc: Exception) -> None:
        def run(tx):
            cur = self._read(tx, task.addr)
            cur.error = f"{getattr(exc, 'code', 'ERROR')}: {exc}"
            self._apply(tx, cur, DONE)
        self.db.run(run, node=worker)
        self.completed[task.task_id] = task

    def _apply(self, tx: Txn, task: Task, outcome: Outcome) -> None:
        task.steps += 1
        if outcome.action == "done":
            task.state = TaskState.DONE
            if task.parent is not None:
                self._child_done(tx, task.parent)
            self._remove(tx, task)
            return
        if outcome.action == "wait":
            for kind, args in outcome.children:
                self.enqueue(tx, kind, args, parent=task.task_id, priority=task.priority)
            task.pending_children += len(outcome.children)
            task.state = TaskState.WAITING_CHILDREN
        else:
            # reschedule: back to the queue so other work can interleave
            task.state = TaskState.PENDING
        task.owner = None
        task.lease_expiry = 0
        self._write(tx, task)

    def _child_done(self, tx: Txn, parent_id: int) -> None:
        for _, v in self.queue(tx).range_scan(tx):
            parent = self._read(tx, Addr.unpack(v))
            if parent.task_id == parent_id:
                parent.pending_children -= 1
                if parent.pending_children <= 0 and parent.state is TaskState.WAITING_CHILDREN:
                    parent.state = TaskState.PENDING
                self._write(tx, parent)
                return
        raise NotFound(f"parent task {parent_id} missing")

    def claim_and_run(self, worker: int) -> dict | None:
        """Claim one task and run a single step; None when nothing is claimable."""
        task = self.claim(worker)
        if task is None:
            return None
        outcome = self.run_step(task, worker)
        return {"task_id": task.task_id, "kind": task.kind.value, "action": outcome.action,
                "worker": worker}

    def run_until_idle(self, max_steps: int = 1_000_000, workers: list[int] | None = None) -> int:
        """Drive workers round-robin until the queue is empty; returns steps run."""
        steps = 0
        idle_rounds = 0
        while steps < max_steps:
            live = [w for w in (workers or self.store.cluster.live_nodes())
                    if self.store.cluster.is_serving(w)]
            progressed = False
            for w in live:
                try:
                    report = self.claim_and_run(w)
                except ClaimLost:
                    continue
                if report is not None:
                    steps += 1
                    progressed = True
            if not progressed:
                if self.idle():
                    return steps
                # only leased or waiting tasks remain: let leases run out
                idle_rounds += 1
                if idle_rounds > 10_000:
                    raise RuntimeError("task queue is stuck")
                self.store.cluster.clock.advance(self.lease)
            else:
                idle_rounds = 0
        return steps

    # -- handlers ------------------------------------------------------------
    def _graph(self, task: Task):
        return self.db.graph(task.args["graph"], allow_deleting=True)

    def _delete_graph(self, tx: Txn, task: Task) -> Outcome:
        g = self._graph(task)
        if task.args.get("phase") != "finalize":
            task.args["phase"] = "finalize"
            kids = [(TaskKind.DELETE_TYPE, {"graph": g.name, "kind": t.kind, "type": t.name,
                                            "graph_drop": True})
                    for t in g.types(tx)]
            if kids:
                return wait_for(kids)
        g.finalize_graph(tx)
        tx.on_commit.append(lambda _t, name=g.name: self.db.forget_graph(name))
        return DONE

    def _delete_type(self, tx: Txn, task: Task) -> Outcome:
        g = self._graph(task)
        a = task.args
        kind, name = a["kind"], a["type"]
        log_dr = not a.get("graph_drop", False)
        phase = a.get("phase", "scan")
        if phase == "scan":
            if kind == "vertex":
                if g.delete_type_batch(tx, kind, name, self.batch, log=log_dr) == self.batch:
                    return CONTINUE
            elif log_dr:
                a["cursor"] = g.delete_edges_batch(tx, name, a.get("cursor"), self.batch)
                if a["cursor"] is not None:
                    return CONTINUE
            a["phase"] = "indexes"
            info = g._load_type(tx, kind, name)
            kids = [(TaskKind.DELETE_INDEX, {"graph": g.name, "type": name, "field": f})
                    for f in info.indexes]
            if kids:
                return wait_for(kids)
            return CONTINUE
        g.finalize_type(tx, kind, name)
        return DONE

    def _delete_index(self, tx: Txn, task: Task) -> Outcome:
        self._graph(task).drop_index(tx, task.args["type"], task.args["field"])
        return DONE

    def _build_index(self, tx: Txn, task: Task) -> Outcome:
        a = task.args
        cursor = bytes.fromhex(a["cursor"]) if a.get("cursor") else None
        nxt = self._graph(task).build_index_batch(tx, a["type"], a["field"], cursor, self.batch)
        if nxt is None:
            return DONE
        a["cursor"] = nxt.hex()
        return CONTINUE

    def _sweep(self, tx: Txn, task: Task) -> Outcome:
        # the sweeper runs its own flush transactions; this step only retires the task
        g = self._graph(task)
        if g.dr is not None:
            g.dr.sweeper_run()
        return DONE
