"""In-process simulated cluster.

Nodes are logical: there is no latency model. A node owns a bounded worker
pool (a semaphore), process-local state that is lost on any crash, and a set
of region replicas whose memory is owned by the harness (``Cluster.segments``)
so that it survives a process crash but not a power loss.
"""
from __future__ import annotations

import enum
import itertools
import random
import threading
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import InvalidConfig, NodeUnreachable

REPLICATION_FACTOR = 3
MIN_REGION_SIZE = 64 * 1024


@dataclass(frozen=True)
class ClusterConfig:
    node_count: int = 5
    fault_domain_count: int = 3
    region_size_bytes: int = 1 << 20
    replication_factor: int = REPLICATION_FACTOR
    rng_seed: int = 0
    workers_per_node: int = 4

    def validate(self) -> None:
        if self.replication_factor != REPLICATION_FACTOR:
            raise InvalidConfig("replication factor is fixed at 3")
        if self.fault_domain_count < 3:
            raise InvalidConfig("need at least 3 fault domains")
        if self.node_count < self.replication_factor:
            raise InvalidConfig(
                f"node_count={self.node_count} is below the replication factor"
            )
        if self.region_size_bytes < MIN_REGION_SIZE:
            raise InvalidConfig("region size must be at least 64 KiB")
        if self.workers_per_node < 1:
            raise InvalidConfig("workers_per_node must be positive")


class FaultKind(enum.Enum):
    PROCESS_CRASH = "process_crash"
    POWER_LOSS = "power_loss"
    PARTITION = "partition"
    RESTART = "restart"


@dataclass
class Message:
    kind: str
    body: Any = None
    request_id: int | None = None


@dataclass
class ReadStats:
    """Scoped read counter (one per query or per measurement window)."""

    local: int = 0
    remote: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, local: bool) -> None:
        with self._lock:
            if local:
                self.local += 1
            else:
                self.remote += 1

    @property
    def total(self) -> int:
        return self.local + self.remote

    @property
    def local_fraction(self) -> float:
        return self.local / self.total if self.total else 1.0


@dataclass
class MetricsSnapshot:
    local_reads: int = 0
    remote_reads: int = 0
    rpc_count: int = 0
    tx_commits: int = 0
    tx_aborts: int = 0
    query_reads: dict = field(default_factory=dict)

    @property
    def total_reads(self) -> int:
        return self.local_reads + self.remote_reads

    @property
    def local_fraction(self) -> float:
        return self.local_reads / self.total_reads if self.total_reads else 1.0

    def to_dict(self) -> dict:
        return {
            "local_reads": self.local_reads,
            "remote_reads": self.remote_reads,
            "rpc_count": self.rpc_count,
            "tx_commits": self.tx_commits,
            "tx_aborts": self.tx_aborts,
            "local_fraction": round(self.local_fraction, 6),
        }


class Metrics:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._m = MetricsSnapshot()

    def read(self, local: bool) -> None:
        with self._lock:
            if local:
                self._m.local_reads += 1
            else:
                self._m.remote_reads += 1

    def bump(self, name: str, n: int = 1) -> None:
        with self._lock:
            setattr(self._m, name, getattr(self._m, name) + n)

    def record_query(self, query_id: str, stats: ReadStats) -> None:
        with self._lock:
            self._m.query_reads[query_id] = (stats.local, stats.remote)

    def snapshot(self) -> MetricsSnapshot:
        with self._lock:
            m = self._m
            return MetricsSnapshot(
                m.local_reads, m.remote_reads, m.rpc_count,
                m.tx_commits, m.tx_aborts, dict(m.query_reads),
            )


class LogicalClock:
    """Monotonic tick counter standing in for wall time (leases, TTLs)."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._now = 0

    def now(self) -> int:
        return self._now

    def advance(self, n: int = 1) -> int:
        with self._lock:
            self._now += n
            return self._now


class Node:
    def __init__(self, node_id: int, fault_domain: int, workers: int):
        self.id = node_id
        self.fault_domain = fault_domain
        self.alive = True
        self.reachable = True
        self.pool = threading.BoundedSemaphore(workers)
        # process memory: lost on PROCESS_CRASH and POWER_LOSS
        self.local: dict[str, Any] = {}
        self._seen: dict[int, Any] = {}
        self._seen_lock = threading.Lock()

    @property
    def serving(self) -> bool:
        return self.alive and self.reachable

    def wipe_process_state(self) -> None:
        self.local = {}
        with self._seen_lock:
            self._seen = {}

    def __repr__(self) -> str:
        state = "up" if self.serving else ("partitioned" if self.alive else "down")
        return f"Node({self.id}, fd={self.fault_domain}, {state})"


Handler = Callable[["Node", Any], Any]


class Cluster:
    """Handle to a running simulated cluster. Safe to drive from many threads."""

    def __init__(self, config: ClusterConfig):
        config.validate()
        self.config = config
        self.rng = random.Random(config.rng_seed)
        self._rng_lock = threading.Lock()
        self.nodes = [
            Node(i, i % config.fault_domain_count, config.workers_per_node)
            for i in range(config.node_count)
        ]
        # harness-owned region memory: node id -> region id -> replica
        self.segments: dict[int, dict[int, Any]] = {n.id: {} for n in self.nodes}
        self.metrics = Metrics()
        self.clock = LogicalClock()
        self._handlers: dict[str, Handler] = {"ping": lambda node, body: "pong"}
        self._fault_listeners: list[Callable[[int, FaultKind], None]] = []
        self._request_ids = itertools.count(1)

    # -- topology -----------------------------------------------------------
    def fault_domain_of(self, node_id: int) -> int:
        return self.nodes[node_id].fault_domain

    def fault_domains(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for n in self.nodes:
            out.setdefault(n.fault_domain, []).append(n.id)
        return out

    def live_nodes(self) -> list[int]:
        return [n.id for n in self.nodes if n.serving]

    def is_serving(self, node_id: int) -> bool:
        return self.nodes[node_id].serving

    @property
    def cm(self) -> int:
        """Configuration Manager: node 0, failing over to the next live node."""
        for n in self.nodes:
            if n.serving:
                return n.id
        raise NodeUnreachable("no live node to act as configuration manager")

    def choice(self, seq):
        with self._rng_lock:
            return self.rng.choice(seq)

    def sample(self, seq, k):
        with self._rng_lock:
            return self.rng.sample(seq, k)

    # -- rpc ----------------------------------------------------------------
    def register_handler(self, kind: str, handler: Handler) -> None:
        self._handlers[kind] = handler

    def send_rpc(self, dest: int, payload: Message) -> Any:
        """Deliver ``payload`` to ``dest`` and return the handler's reply.

        One call is one RPC regardless of how many operators the payload
        carries. Delivery is at-most-once per ``request_id``.
        """
        node = self.nodes[dest]
        if not node.serving:
            raise NodeUnreachable(f"node {dest} is unreachable")
        if payload.request_id is None:
            payload.request_id = next(self._request_ids)
        self.metrics.bump("rpc_count")
        with node._seen_lock:
            if payload.request_id in node._seen:
                return node._seen[payload.request_id]
        handler = self._handlers.get(payload.kind)
        if handler is None:
            raise ValueError(f"no handler for message kind {payload.kind!r}")
        with node.pool:
            reply = handler(node, payload.body)
        with node._seen_lock:
            node._seen[payload.request_id] = reply
        return reply

    # -- faults -------------------------------------------------------------
    def add_fault_listener(self, fn: Callable[[int, FaultKind], None]) -> None:
        self._fault_listeners.append(fn)

    def inject_fault(self, node_id: int, kind: FaultKind) -> None:
        node = self.nodes[node_id]
        if kind is FaultKind.PROCESS_CRASH:
            node.alive = False
            node.wipe_process_state()
        elif kind is FaultKind.POWER_LOSS:
            node.alive = False
            node.wipe_process_state()
            self.segments[node_id] = {}
        elif kind is FaultKind.PARTITION:
            node.reachable = False
        elif kind is FaultKind.RESTART:
            node.alive = True
            node.reachable = True
        for fn in list(self._fault_listeners):
            fn(node_id, kind)

    def read_metrics(self) -> MetricsSnapshot:
        return self.metrics.snapshot()


def spawn_cluster(config: ClusterConfig | None = None, **kwargs) -> Cluster:
    return Cluster(config or ClusterConfig(**kwargs))
