"""Region-based transactional object store.

Objects live in fixed-size regions replicated on three nodes in distinct fault
domains. Each object keeps a version chain of ``(commit_ts, bytes | None)``
where ``None`` marks a committed free. Read-write transactions run under
optimistic concurrency control: they read at a snapshot, buffer writes
locally, and at commit lock their write set in canonical address order,
take a write timestamp, validate their read set and install the new versions
on every live replica. Read-only transactions just read their snapshot.
"""
from __future__ import annotations

import enum
import itertools
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

from .errors import (
    BadSize, InvalidAddr, NodeUnreachable, OutOfSpace, StorePaused, TxnStateError,
)
from .simnet import Cluster, FaultKind, ReadStats

MIN_OBJECT = 64
MAX_OBJECT = 1 << 20
MAX_VERSIONS = 32
SIZE_CLASS = 64


class Addr(NamedTuple):
    region_id: int
    offset: int

    def pack(self) -> bytes:
        return struct.pack(">II", self.region_id, self.offset)

    @classmethod
    def unpack(cls, b: bytes, pos: int = 0) -> "Addr":
        return cls(*struct.unpack_from(">II", b, pos))

    def __int__(self) -> int:
        return (self.region_id << 32) | self.offset

    def __str__(self) -> str:
        return f"{self.region_id}:{self.offset}"


NULL_ADDR = Addr(0xFFFFFFFF, 0xFFFFFFFF)


class FatRef(NamedTuple):
    """Address plus exact object length, so one read fetches the object."""

    addr: Addr
    size: int

    def pack(self) -> bytes:
        return self.addr.pack() + struct.pack(">I", self.size)

    @classmethod
    def unpack(cls, b: bytes, pos: int = 0) -> "FatRef":
        return cls(Addr.unpack(b, pos), struct.unpack_from(">I", b, pos + 8)[0])

    @property
    def is_null(self) -> bool:
        return self.addr == NULL_ADDR


NULL_REF = FatRef(NULL_ADDR, 0)


@dataclass(frozen=True)
class Hint:
    kind: str = "local"
    addr: Addr | None = None
    node: int | None = None

    @classmethod
    def near(cls, addr: Addr) -> "Hint":
        return cls("near", addr=addr)

    @classmethod
    def on_node(cls, node: int) -> "Hint":
        return cls("node", node=node)


LOCAL = Hint()


class TxState(enum.Enum):
    ACTIVE = "active"
    COMMITTED = "committed"
    ABORTED = "aborted"


class Status(enum.Enum):
    COMMITTED = "COMMITTED"
    ABORTED_CONFLICT = "ABORTED_CONFLICT"


class ObjBuf:
    __slots__ = ("addr", "data", "version", "writable")

    def __init__(self, addr: Addr, data, version: int, writable: bool = False):
        self.addr = addr
        self.data = data
        self.version = version
        self.writable = writable

    @property
    def size(self) -> int:
        return len(self.data)

    @property
    def ref(self) -> FatRef:
        return FatRef(self.addr, len(self.data))

    def write(self, offset: int, payload: bytes) -> None:
        if not self.writable:
            raise TxnStateError("buffer is read-only; use open_for_write")
        if offset + len(payload) > len(self.data):
            raise BadSize("write past end of object")
        self.data[offset:offset + len(payload)] = payload

    def __repr__(self) -> str:
        return f"ObjBuf({self.addr}, {len(self.data)}B, v{self.version})"


_FREE = object()


@dataclass(eq=False)
class Txn:
    id: int
    node: int
    read_ts: int
    read_only: bool
    stats: ReadStats | None = None
    state: TxState = TxState.ACTIVE
    read_set: dict = field(default_factory=dict)
    write_set: dict = field(default_factory=dict)
    allocs: set = field(default_factory=set)
    write_ts: int | None = None
    finalizers: list = field(default_factory=list)
    on_commit: list = field(default_factory=list)
    tags: dict = field(default_factory=dict)

    @property
    def active(self) -> bool:
        return self.state is TxState.ACTIVE

    def add_finalizer(self, fn: Callable[[int], None]) -> None:
        """``fn(write_ts)`` runs after validation, before install; it may only
        patch buffers already in the write set."""
        self.finalizers.append(fn)


class RegionReplica:
    """One copy of a region. Lives in harness-owned segment memory."""

    def __init__(self, region_id: int, size: int):
        self.region_id = region_id
        self.size = size
        self.objects: dict[int, list] = {}
        self.sizes: dict[int, int] = {}
        self.tags: dict[int, str] = {}
        self.bump = 0
        self.free: dict[int, list[int]] = {}

    def clone(self) -> "RegionReplica":
        r = RegionReplica(self.region_id, self.size)
        r.objects = {k: list(v) for k, v in self.objects.items()}
        r.sizes = dict(self.sizes)
        r.tags = dict(self.tags)
        r.bump = self.bump
        r.free = {k: list(v) for k, v in self.free.items()}
        return r

    def fingerprint(self):
        return (
            {k: tuple(v) for k, v in self.objects.items()},
            self.sizes, self.bump,
        )

    def can_alloc(self, cls: int) -> bool:
        return bool(self.free.get(cls)) or self.bump + cls <= self.size

    def peek_offset(self, cls: int) -> int:
        fl = self.free.get(cls)
        return fl[-1] if fl else self.bump

    def reserve(self, offset: int, cls: int, size: int, tag: str | None) -> None:
        fl = self.free.get(cls)
        if fl and fl[-1] == offset:
            fl.pop()
        else:
            assert offset == self.bump
            self.bump += cls
        self.sizes[offset] = size
        if tag:
            self.tags[offset] = tag

    def release(self, offset: int) -> None:
        size = self.sizes.pop(offset)
        self.tags.pop(offset, None)
        self.free.setdefault(_size_class(size), []).append(offset)

    def live_objects(self):
        for off, chain in self.objects.items():
            if chain and chain[-1][1] is not None:
                yield off


def _size_class(size: int) -> int:
    return -(-size // SIZE_CLASS) * SIZE_CLASS


class Region:
    """CM metadata for a region: id and replica placement (primary first)."""

    def __init__(self, region_id: int, replicas: list[int]):
        self.id = region_id
        self.replicas = replicas
        self.lock = threading.RLock()


class TimestampOracle:
    """Global monotonic counter owned by the configuration manager."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._last = 0
        self._inflight: set[int] = set()

    def stable(self) -> int:
        with self._lock:
            return min(self._inflight) - 1 if self._inflight else self._last

    def latest(self) -> int:
        return self._last

    def begin(self) -> int:
        with self._lock:
            self._last += 1
            self._inflight.add(self._last)
            return self._last

    def end(self, ts: int) -> None:
        with self._lock:
            self._inflight.discard(ts)

    def advance_to(self, ts: int) -> None:
        with self._lock:
            self._last = max(self._last, ts)


class Store:
    def __init__(self, cluster: Cluster, max_regions: int = 1 << 16):
        self.cluster = cluster
        self.region_size = cluster.config.region_size_bytes
        self.max_object = min(MAX_OBJECT, self.region_size)
        self.max_regions = max_regions
        self.regions: dict[int, Region] = {}
        self.oracle = TimestampOracle()
        self._meta_lock = threading.RLock()
        self._next_region = 0
        self._open: dict[int, int] = {}
        self._locks: dict[Addr, int] = {}
        self._lock_mutex = threading.Lock()
        self._active: dict[int, int] = {}
        self._active_lock = threading.Lock()
        self._tx_ids = itertools.count(1)
        self._uniq = itertools.count(1)
        self._uniq_lock = threading.Lock()
        self.version_overflows = 0
        cluster.add_fault_listener(self._on_fault)
        self._new_region(cluster.cm)

    # -- metadata -----------------------------------------------------------
    def unique(self) -> int:
        with self._uniq_lock:
            return next(self._uniq)

    def region_count(self) -> int:
        return len(self.regions)

    def primary_of(self, region_id: int) -> int:
        """Map a region to the node serving it (local metadata, no reads)."""
        region = self.regions.get(region_id)
        if region is None:
            raise InvalidAddr(f"unknown region {region_id}")
        for n in region.replicas:
            if self.cluster.is_serving(n) and region_id in self.cluster.segments[n]:
                return n
        if any(region_id in self.cluster.segments[n] for n in region.replicas):
            raise StorePaused(f"region {region_id} has no live replica")
        raise InvalidAddr(f"region {region_id} was lost")

    def node_of(self, addr: Addr) -> int:
        return self.primary_of(addr.region_id)

    def paused(self) -> bool:
        for rid, region in self.regions.items():
            live = [n for n in region.replicas
                    if self.cluster.is_serving(n) and rid in self.cluster.segments[n]]
            if not live:
                return True
        return False

    def _live_replicas(self, region: Region) -> list[RegionReplica]:
        out = []
        for n in region.replicas:
            if self.cluster.is_serving(n):
                rep = self.cluster.segments[n].get(region.id)
                if rep is not None:
                    out.append(rep)
        return out

    def _primary_replica(self, region_id: int) -> tuple[int, RegionReplica]:
        node = self.primary_of(region_id)
        return node, self.cluster.segments[node][region_id]

    def _new_region(self, primary: int) -> Region:
        with self._meta_lock:
            if len(self.regions) >= self.max_regions:
                raise OutOfSpace("region limit reached")
            c = self.cluster
            used = {c.fault_domain_of(primary)}
            replicas = [primary]
            candidates = [n for n in c.live_nodes() if n != primary]
            candidates = c.sample(candidates, len(candidates))
            for n in candidates:
                if c.fault_domain_of(n) not in used:
                    replicas.append(n)
                    used.add(c.fault_domain_of(n))
                if len(replicas) == c.config.replication_factor:
                    break
            if len(replicas) < c.config.replication_factor:
                raise OutOfSpace("not enough live fault domains for a new region")
            rid = self._next_region
            self._next_region += 1
            region = Region(rid, replicas)
            for n in replicas:
                c.segments[n][rid] = RegionReplica(rid, self.region_size)
            self.regions[rid] = region
            self._open[primary] = rid
            return region

    def placement(self) -> dict[int, list[int]]:
        return {rid: list(r.replicas) for rid, r in self.regions.items()}

    # -- transactions -------------------------------------------------------
    def create_transaction(self, read_only: bool = False, node: int | None = None,
                           stats: ReadStats | None = None,
                           read_ts: int | None = None) -> Txn:
        if self.paused():
            raise StorePaused("transactions are halted until lost regions recover")
        node = self.cluster.cm if node is None else node
        if not self.cluster.is_serving(node):
            raise NodeUnreachable(f"node {node} is not serving")
        self.cluster.clock.advance()
        with self._active_lock:
            ts = self.oracle.stable() if read_ts is None else read_ts
            tx = Txn(next(self._tx_ids), node, ts, read_only, stats)
            self._active[tx.id] = ts
        return tx

    def _check_active(self, tx: Txn, writing: bool = False) -> None:
        if not tx.active:
            raise TxnStateError(f"transaction {tx.id} is {tx.state.value}")
        if writing and tx.read_only:
            raise TxnStateError("read-only transaction cannot write")

    def _end(self, tx: Txn, state: TxState) -> None:
        tx.state = state
        with self._active_lock:
            self._active.pop(tx.id, None)

    def gc_horizon(self) -> int:
        with self._active_lock:
            if self._active:
                return min(self._active.values())
        return self.oracle.stable()

    def read(self, tx: Txn, addr: Addr, size: int | None = None) -> ObjBuf:
        self._check_active(tx)
        pending = tx.write_set.get(addr)
        if pending is not None:
            if pending is _FREE:
                raise InvalidAddr(f"{addr} freed in this transaction")
            return ObjBuf(addr, bytes(pending.data), pending.version)
        region = self.regions.get(addr.region_id)
        if region is None:
            raise InvalidAddr(f"unknown region {addr.region_id}")
        node, rep = self._primary_replica(addr.region_id)
        chain = rep.objects.get(addr.offset)
        if not chain:
            raise InvalidAddr(f"no object at {addr}")
        ver, data = None, None
        for ts, d in reversed(chain):
            if ts <= tx.read_ts:
                ver, data = ts, d
                break
        if ver is None or data is None:
            raise InvalidAddr(f"no visible object at {addr} for ts {tx.read_ts}")
        if size is not None and size != len(data):
            raise InvalidAddr(f"size mismatch at {addr}: {size} != {len(data)}")
        local = node == tx.node
        self.cluster.metrics.read(local)
        if tx.stats is not None:
            tx.stats.add(local)
        tx.read_set.setdefault(addr, ver)
        return ObjBuf(addr, data, ver)

    def open_for_write(self, tx: Txn, buf: ObjBuf) -> ObjBuf:
        self._check_active(tx, writing=True)
        pending = tx.write_set.get(buf.addr)
        if pending is _FREE:
            raise InvalidAddr(f"{buf.addr} freed in this transaction")
        if pending is not None:
            return pending
        wbuf = ObjBuf(buf.addr, bytearray(buf.data), buf.version, writable=True)
        tx.write_set[buf.addr] = wbuf
        return wbuf

    def alloc(self, tx: Txn, size: int, hint: Hint = LOCAL,
              tag: str | None = None) -> ObjBuf:
        self._check_active(tx, writing=True)
        if not MIN_OBJECT <= size <= self.max_object:
            raise BadSize(f"object size {size} outside [{MIN_OBJECT}, {self.max_object}]")
        cls = _size_class(size)
        addr = self._reserve(tx, cls, size, hint, tag)
        buf = ObjBuf(addr, bytearray(size), 0, writable=True)
        tx.write_set[addr] = buf
        tx.allocs.add(addr)
        return buf

    def _reserve(self, tx: Txn, cls: int, size: int, hint: Hint, tag) -> Addr:
        tried: list[int] = []
        if hint.kind == "near" and hint.addr is not None and hint.addr.region_id in self.regions:
            rid = hint.addr.region_id
            addr = self._try_region(rid, cls, size, tag)
            if addr is not None:
                return addr
            tried.append(rid)
            try:
                node = self.primary_of(rid)
            except (InvalidAddr, StorePaused):
                node = tx.node
        elif hint.kind == "node" and hint.node is not None:
            node = hint.node
        else:
            node = tx.node
        if not self.cluster.is_serving(node):
            node = tx.node
        with self._meta_lock:
            rid = self._open.get(node)
            candidates = ([rid] if rid is not None else []) + [
                r.id for r in self.regions.values()
                if r.replicas and r.replicas[0] == node and r.id != rid
            ]
        for rid in candidates:
            if rid in tried:
                continue
            addr = self._try_region(rid, cls, size, tag)
            if addr is not None:
                with self._meta_lock:
                    self._open[node] = rid
                return addr
        region = self._new_region(node)
        addr = self._try_region(region.id, cls, size, tag)
        if addr is None:
            raise OutOfSpace("fresh region cannot hold the object")
        return addr

    def _try_region(self, rid: int, cls: int, size: int, tag) -> Addr | None:
        region = self.regions.get(rid)
        if region is None:
            return None
        with region.lock:
            reps = self._live_replicas(region)
            if not reps or not reps[0].can_alloc(cls):
                return None
            offset = reps[0].peek_offset(cls)
            for rep in reps:
                rep.reserve(offset, cls, size, tag)
            return Addr(rid, offset)

    def _unreserve(self, addr: Addr) -> None:
        region = self.regions.get(addr.region_id)
        if region is None:
            return
        with region.lock:
            for rep in self._live_replicas(region):
                if addr.offset in rep.sizes:
                    rep.release(addr.offset)

    def free(self, tx: Txn, buf: ObjBuf | Addr) -> None:
        self._check_active(tx, writing=True)
        addr = buf if isinstance(buf, Addr) else buf.addr
        if addr in tx.allocs:
            tx.allocs.discard(addr)
            tx.write_set.pop(addr, None)
            self._unreserve(addr)
            return
        tx.write_set[addr] = _FREE

    def abort(self, tx: Txn) -> None:
        if not tx.active:
            return
        for addr in tx.allocs:
            self._unreserve(addr)
        tx.write_set.clear()
        tx.allocs.clear()
        self._end(tx, TxState.ABORTED)
        if not tx.read_only:
            self.cluster.metrics.bump("tx_aborts")

    def _latest_ts(self, addr: Addr) -> int | None:
        _, rep = self._primary_replica(addr.region_id)
        chain = rep.objects.get(addr.offset)
        return chain[-1][0] if chain else None

    def commit(self, tx: Txn) -> Status:
        self._check_active(tx)
        if tx.read_only or not tx.write_set:
            self._end(tx, TxState.COMMITTED)
            for fn in tx.on_commit:
                fn(tx)
            return Status.COMMITTED
        if self.paused():
            self.abort(tx)
            raise StorePaused("transactions are halted until lost regions recover")
        order = sorted(tx.write_set)
        locked: list[Addr] = []
        ok = True
        with self._lock_mutex:
            for addr in order:
                if self._locks.get(addr, tx.id) != tx.id:
                    ok = False
                    break
                self._locks[addr] = tx.id
                locked.append(addr)
        ts = None
        try:
            if ok:
                ts = self.oracle.begin()
                ok = self._validate(tx)
            if not ok:
                self.abort(tx)
                return Status.ABORTED_CONFLICT
            tx.write_ts = ts
            for fn in tx.finalizers:
                fn(ts)
            self._install(tx, ts)
        finally:
            if ts is not None:
                self.oracle.end(ts)
            with self._lock_mutex:
                for addr in locked:
                    if self._locks.get(addr) == tx.id:
                        del self._locks[addr]
        tx.allocs.clear()
        self._end(tx, TxState.COMMITTED)
        self.cluster.metrics.bump("tx_commits")
        for fn in tx.on_commit:
            fn(tx)
        return Status.COMMITTED

    def _validate(self, tx: Txn) -> bool:
        for addr, ver in tx.read_set.items():
            with self._lock_mutex:
                holder = self._locks.get(addr)
            if holder is not None and holder != tx.id:
                return False
            try:
                if self._latest_ts(addr) != ver:
                    return False
            except InvalidAddr:
                return False
        return True

    def _install(self, tx: Txn, ts: int) -> None:
        horizon = self.gc_horizon()
        by_region: dict[int, list] = {}
        for addr, pending in tx.write_set.items():
            if pending is not _FREE and len(pending.data) != self._declared_size(addr, pending):
                raise BadSize(f"buffer for {addr} changed length")
            by_region.setdefault(addr.region_id, []).append((addr, pending))
        for rid, items in by_region.items():
            region = self.regions[rid]
            with region.lock:
                reps = self._live_replicas(region)
                if not reps:
                    raise StorePaused(f"region {rid} has no live replica")
                for rep in reps:
                    for addr, pending in items:
                        data = None if pending is _FREE else bytes(pending.data)
                        chain = rep.objects.setdefault(addr.offset, [])
                        chain.append((ts, data))
                        if data is None and addr.offset in rep.sizes:
                            rep.release(addr.offset)
                        self._gc_chain(rep, addr.offset, chain, horizon)

    def _declared_size(self, addr: Addr, pending: ObjBuf) -> int:
        _, rep = self._primary_replica(addr.region_id)
        return rep.sizes.get(addr.offset, len(pending.data))

    def _gc_chain(self, rep: RegionReplica, offset: int, chain: list, horizon: int) -> None:
        # keep every version newer than the horizon plus the newest one at or below it
        keep_from = 0
        for i in range(len(chain) - 1, -1, -1):
            if chain[i][0] <= horizon:
                keep_from = i
                break
        if keep_from:
            del chain[:keep_from]
        if len(chain) == 1 and chain[0][1] is None and chain[0][0] <= horizon:
            if offset not in rep.sizes:
                del rep.objects[offset]
        elif len(chain) > MAX_VERSIONS:
            self.version_overflows += 1

    # -- recovery -----------------------------------------------------------
    def _on_fault(self, node_id: int, kind: FaultKind) -> None:
        if kind is FaultKind.POWER_LOSS:
            self._drop_lost_regions()
        elif kind is FaultKind.RESTART:
            self._resync(node_id)

    def _drop_lost_regions(self) -> None:
        seg = self.cluster.segments
        with self._meta_lock:
            for rid in list(self.regions):
                region = self.regions[rid]
                if not any(rid in seg[n] for n in region.replicas):
                    del self.regions[rid]
                    for node, open_rid in list(self._open.items()):
                        if open_rid == rid:
                            del self._open[node]

    def _resync(self, node_id: int) -> None:
        seg = self.cluster.segments
        for rid, region in list(self.regions.items()):
            if node_id not in region.replicas:
                continue
            with region.lock:
                others = [n for n in region.replicas if n != node_id
                          and self.cluster.is_serving(n) and rid in seg[n]]
                if others:
                    seg[node_id][rid] = seg[others[0]][rid].clone()
                # otherwise the retained copy (fast restart) is authoritative
        self._drop_lost_regions()

    def declare_lost(self, region_id: int) -> None:
        """CM gives up waiting for a region whose replicas are all down."""
        region = self.regions.get(region_id)
        if region is None:
            return
        for n in region.replicas:
            self.cluster.segments[n].pop(region_id, None)
        self._drop_lost_regions()

    # -- audits ---------------------------------------------------------------
    def live_objects(self, tag: str | None = None) -> list[Addr]:
        out = []
        for rid in sorted(self.regions):
            try:
                _, rep = self._primary_replica(rid)
            except (InvalidAddr, StorePaused):
                continue
            for off in rep.live_objects():
                if tag is None or rep.tags.get(off) == tag:
                    out.append(Addr(rid, off))
        return out

    def dump(self) -> dict[Addr, bytes]:
        """Latest committed bytes of every live object (used by audits)."""
        out = {}
        for rid in sorted(self.regions):
            _, rep = self._primary_replica(rid)
            for off in rep.live_objects():
                out[Addr(rid, off)] = rep.objects[off][-1][1]
        return out

    def replicas_consistent(self) -> bool:
        seg = self.cluster.segments
        for rid, region in self.regions.items():
            prints = [seg[n][rid].fingerprint() for n in region.replicas
                      if self.cluster.is_serving(n) and rid in seg[n]]
            if any(p != prints[0] for p in prints[1:]):
                return False
        return True


def run_transaction(store: Store, fn, node: int | None = None, max_retries: int = 1000):
    """Retry ``fn(tx)`` until its transaction commits; returns ``fn``'s result."""
    for _ in range(max_retries):
        tx = store.create_transaction(node=node)
        try:
            result = fn(tx)
        except BaseException:
            store.abort(tx)
            raise
        if store.commit(tx) is Status.COMMITTED:
            return result
    raise RuntimeError("transaction did not commit within the retry budget")
