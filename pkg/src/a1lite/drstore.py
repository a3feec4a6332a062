"""Disaster recovery: a file-backed durable key-value store, the in-store
replication log, the flush/sweep pipeline, and both recovery modes.

Best-effort tables hold one row per key with the commit timestamp of the
newest applied update; writes carrying an older timestamp are discarded.
Versioned tables never overwrite: the row key is ``key || commit_ts``. The
watermark ``t_R`` is stored under a reserved key: every committed write with
a timestamp at or below it is known to be durable.
"""
from __future__ import annotations

import enum
import json
import logging
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    CorruptTable, DurableUnavailable, InvalidAddr, MissingWatermark, NotFound,
)
from .store import Addr, Status, Txn

log = logging.getLogger(__name__)

META, VERTEX, EDGE, VERTEX_V, EDGE_V = 0, 1, 2, 3, 4
TABLE_NAMES = {VERTEX: "VERTEX", EDGE: "EDGE"}
VERSIONED = {VERTEX: VERTEX_V, EDGE: EDGE_V}
WATERMARK_KEY = b"\x00t_R"
TOMBSTONE = None
_F_TOMB, _F_ERASE = 1, 2
_HDR = struct.Struct(">BI")
_MID = struct.Struct(">BQI")
TR_CADENCE = 64
DEFAULT_GC_WINDOW = 3600


class Mode(str, enum.Enum):
    BEST_EFFORT = "best-effort"
    CONSISTENT = "consistent"
    BOTH = "both"


class FlushStatus(enum.Enum):
    FLUSHED = "FLUSHED"
    DEFERRED = "DEFERRED"


class Op(enum.IntEnum):
    UPSERT = 1
    DELETE = 2


class DurableStore:
    """Append-only record file plus a sorted in-memory index per table."""

    def __init__(self, path: str | os.PathLike | None = None, fsync: bool = False):
        self.path = Path(path) if path is not None else None
        self.fsync = fsync
        self.available = True
        self._lock = threading.RLock()
        self.tables: dict[int, dict[bytes, tuple[int, bytes | None]]] = {}
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if self.path.exists():
                self._load()
            self._fh = open(self.path, "ab")

    # -- file format --------------------------------------------------------
    @staticmethod
    def encode_record(table: int, key: bytes, value: bytes | None, ts: int,
                      erase: bool = False) -> bytes:
        flags = (_F_TOMB if value is None else 0) | (_F_ERASE if erase else 0)
        val = value or b""
        return (_HDR.pack(table, len(key)) + key
                + _MID.pack(flags, ts, len(val)) + val)

    @staticmethod
    def iter_records(data: bytes):
        pos = 0
        while pos < len(data):
            try:
                table, klen = _HDR.unpack_from(data, pos)
                pos += _HDR.size
                key = data[pos:pos + klen]
                pos += klen
                flags, ts, vlen = _MID.unpack_from(data, pos)
                pos += _MID.size
                val = data[pos:pos + vlen]
                pos += vlen
            except struct.error as exc:
                raise CorruptTable(f"truncated record at byte {pos}") from exc
            if len(key) != klen or len(val) != vlen:
                raise CorruptTable(f"truncated record at byte {pos}")
            yield table, key, (None if flags & _F_TOMB else val), ts, bool(flags & _F_ERASE)

    def _load(self) -> None:
        for table, key, val, ts, erase in self.iter_records(self.path.read_bytes()):
            rows = self.tables.setdefault(table, {})
            if erase:
                rows.pop(key, None)
            else:
                rows[key] = (ts, val)

    def _append(self, table: int, key: bytes, value: bytes | None, ts: int,
                erase: bool = False) -> None:
        if not self.available:
            raise DurableUnavailable("durable store is unreachable")
        if self._fh is not None:
            self._fh.write(self.encode_record(table, key, value, ts, erase))
            self.barrier()
        rows = self.tables.setdefault(table, {})
        if erase:
            rows.pop(key, None)
        else:
            rows[key] = (ts, value)

    def barrier(self) -> None:
        """Durable barrier: nothing is acknowledged before it is staged."""
        if self._fh is not None:
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())

    def compact(self) -> None:
        if self.path is None:
            return
        with self._lock:
            tmp = self.path.with_suffix(".compact")
            with open(tmp, "wb") as fh:
                for table in sorted(self.tables):
                    for key, (ts, val) in sorted(self.tables[table].items()):
                        fh.write(self.encode_record(table, key, val, ts))
            self._fh.close()
            os.replace(tmp, self.path)
            self._fh = open(self.path, "ab")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    # -- primitives ---------------------------------------------------------
    def be_upsert(self, table: int, key: bytes, value: bytes | None, ts: int) -> bool:
        """Apply iff ``ts`` is newer than the stored row; False when stale."""
        with self._lock:
            if not self.available:
                raise DurableUnavailable("durable store is unreachable")
            row = self.tables.get(table, {}).get(key)
            if row is not None and ts <= row[0]:
                return False
            self._append(table, key, value, ts)
            return True

    def versioned_insert(self, table: int, key: bytes, value: bytes | None, ts: int) -> None:
        with self._lock:
            self._append(table, key + struct.pack(">Q", ts), value, ts)

    def put(self, table: int, key: bytes, value: bytes | None, ts: int = 0) -> None:
        with self._lock:
            self._append(table, key, value, ts)

    def erase(self, table: int, key: bytes) -> None:
        with self._lock:
            row = self.tables.get(table, {}).get(key)
            if row is not None:
                self._append(table, key, None, row[0], erase=True)

    def get(self, table: int, key: bytes):
        return self.tables.get(table, {}).get(key)

    def items(self, table: int):
        with self._lock:
            return sorted(self.tables.get(table, {}).items())

    def versions(self, table: int) -> dict[bytes, list[tuple[int, bytes | None]]]:
        out: dict[bytes, list] = {}
        for ck, (ts, val) in self.items(table):
            out.setdefault(ck[:-8], []).append((ts, val))
        for v in out.values():
            v.sort(key=lambda r: r[0])
        return out

    # -- watermark and schemas ------------------------------------------------
    def set_watermark(self, t_r: int) -> None:
        self.put(META, WATERMARK_KEY, struct.pack(">Q", t_r), t_r)

    def watermark(self) -> int | None:
        row = self.get(META, WATERMARK_KEY)
        return None if row is None else struct.unpack(">Q", row[1])[0]

    def put_schema(self, name: str, doc: dict) -> None:
        self.put(META, b"schema/" + name.encode(), json.dumps(doc, sort_keys=True).encode())

    def schemas(self) -> list[dict]:
        return [json.loads(v) for k, (_, v) in self.items(META)
                if k.startswith(b"schema/") and v is not None]

    def snapshot_tables(self) -> dict:
        """Copy of the data tables, for equality checks in tests."""
        with self._lock:
            return {t: dict(rows) for t, rows in self.tables.items() if t != META and rows}

    def clone(self) -> "DurableStore":
        other = DurableStore()
        with self._lock:
            other.tables = {t: dict(rows) for t, rows in self.tables.items()}
        return other


# -- replication log ---------------------------------------------------------

@dataclass
class LogEntry:
    commit_ts: int
    table: int
    op: Op
    key: bytes
    value: bytes | None
    seq: int = 0
    addr: Addr | None = None

    _HEAD = struct.Struct(">QBBQI")

    def encode(self) -> bytes:
        val = self.value if self.value is not None else b""
        flag = 0 if self.value is not None else 1
        return (self._HEAD.pack(self.commit_ts, self.table, self.op, self.seq, len(self.key))
                + self.key + struct.pack(">BI", flag, len(val)) + val)

    @classmethod
    def decode(cls, b: bytes, addr: Addr | None = None) -> "LogEntry":
        ts, table, op, seq, klen = cls._HEAD.unpack_from(b, 0)
        pos = cls._HEAD.size
        key = bytes(b[pos:pos + klen])
        pos += klen
        flag, vlen = struct.unpack_from(">BI", b, pos)
        pos += 5
        val = None if flag else bytes(b[pos:pos + vlen])
        return cls(ts, table, Op(op), key, val, seq, addr)


def _log_key(seq: int) -> bytes:
    # spread appends over 16 subranges to limit leaf contention
    return struct.pack(">BQ", seq % 16, seq)


class ReplicationPipeline:
    """Per-graph log + flush + sweep + watermark maintenance."""

    def __init__(self, db, graph: str, log_tree, durable: DurableStore, mode: Mode):
        self.db = db
        self.store = db.store
        self.graph = graph
        self.tree = log_tree
        self.durable = durable
        self.mode = Mode(mode)
        self._sync_flushes = 0
        self._lock = threading.Lock()

    # log_mutation ---------------------------------------------------------
    def log_mutation(self, tx: Txn, table: int, op: Op, key: bytes, value: bytes | None) -> Addr:
        # one entry per durable key per transaction: every entry of a
        # transaction shares its commit timestamp, so a second write to the
        # same key would make replay order matter
        logged = tx.tags.setdefault("dr_keys", {})
        prev = logged.pop((id(self), table, key), None)
        if prev is not None:
            old_seq, old_addr = prev
            self.tree.delete(tx, _log_key(old_seq))
            self.store.free(tx, old_addr)
            tx.tags["dr_entries"].remove((self, old_addr))
        seq = self.store.unique()
        entry = LogEntry(0, table, op, key, value, seq)
        raw = entry.encode()
        buf = self.store.alloc(tx, max(64, len(raw)), tag=self.graph)
        buf.write(0, raw)
        tx.add_finalizer(lambda ts, b=buf: b.write(0, struct.pack(">Q", ts)))
        self.tree.insert(tx, _log_key(seq), buf.addr.pack())
        tx.tags.setdefault("dr_entries", []).append((self, buf.addr))
        logged[(id(self), table, key)] = (seq, buf.addr)
        return buf.addr

    def pending(self, tx: Txn | None = None) -> list[LogEntry]:
        own = tx is None
        if own:
            tx = self.store.create_transaction(read_only=True)
        try:
            out = []
            for _, v in self.tree.range_scan(tx):
                addr = Addr.unpack(v)
                out.append(LogEntry.decode(self.store.read(tx, addr).data, addr))
            out.sort(key=lambda e: (e.commit_ts, e.seq))
            return out
        finally:
            if own:
                self.store.commit(tx)

    # durable application ----------------------------------------------------
    def apply(self, entry: LogEntry) -> None:
        value = entry.value if entry.op is Op.UPSERT else TOMBSTONE
        if self.mode in (Mode.BEST_EFFORT, Mode.BOTH):
            self.durable.be_upsert(entry.table, entry.key, value, entry.commit_ts)
        if self.mode in (Mode.CONSISTENT, Mode.BOTH):
            self.durable.versioned_insert(VERSIONED[entry.table], entry.key, value,
                                          entry.commit_ts)

    def flush_entry(self, addr: Addr, sync: bool = False) -> FlushStatus:
        tx = self.store.create_transaction(read_only=True)
        try:
            entry = LogEntry.decode(self.store.read(tx, addr).data, addr)
        except InvalidAddr:
            return FlushStatus.FLUSHED
        finally:
            self.store.commit(tx)
        try:
            self.apply(entry)
        except DurableUnavailable:
            return FlushStatus.DEFERRED
        self._delete_entry(entry)
        if sync:
            with self._lock:
                self._sync_flushes += 1
                due = self._sync_flushes % TR_CADENCE == 0
            if due:
                self.persist_watermark()
        return FlushStatus.FLUSHED

    def _delete_entry(self, entry: LogEntry) -> None:
        for _ in range(100):
            tx = self.store.create_transaction()
            try:
                self.tree.delete(tx, _log_key(entry.seq))
                self.store.free(tx, entry.addr)
            except (NotFound, InvalidAddr):
                self.store.abort(tx)
                return
            if self.store.commit(tx) is Status.COMMITTED:
                return


    # sweeper ----------------------------------------------------------------
    def sweeper_run(self) -> int:
        flushed = 0
        for entry in self.pending():
            if self.flush_entry(entry.addr) is FlushStatus.DEFERRED:
                break
            flushed += 1
        self.persist_watermark()
        return flushed

    def compute_watermark(self) -> int:
        tx = self.store.create_transaction(read_only=True)
        try:
            remaining = self.pending(tx)
            snapshot = tx.read_ts
        finally:
            self.store.commit(tx)
        if remaining:
            return min(remaining[0].commit_ts - 1, snapshot)
        return snapshot

    def persist_watermark(self) -> int | None:
        t_r = self.compute_watermark()
        try:
            self.durable.set_watermark(t_r)
        except DurableUnavailable:
            return None
        return t_r


def flush_after_commit(tx: Txn) -> list[FlushStatus]:
    """Synchronous flush of a committed transaction's log entries. The client
    is acknowledged after this attempt whatever its outcome."""
    return [p.flush_entry(a, sync=True) for p, a in tx.tags.get("dr_entries", ())]


# -- recovery ----------------------------------------------------------------

@dataclass
class RecoveryReport:
    mode: str
    t_r: int | None
    vertices: set = field(default_factory=set)
    edges: set = field(default_factory=set)
    skipped_edges: int = 0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "t_R": self.t_r,
            "vertices": len(self.vertices),
            "edges": len(self.edges),
            "skipped_edges": self.skipped_edges,
            "vertex_keys": sorted(f"{t}:{pk}" for t, pk in self.vertices),
            "edge_keys": sorted(f"{a[0]}:{a[1]}-{t}->{b[0]}:{b[1]}" for a, t, b in self.edges),
        }


def _vertex_id(doc: dict) -> tuple:
    return (doc["type"], doc["pk"])


def _edge_id(doc: dict) -> tuple:
    return (tuple(doc["src"]), doc["type"], tuple(doc["dst"]))


def recovered_rows(durable: DurableStore, mode: str):
    """Compute the (vertex docs, edge docs, skipped) a recovery would install."""
    mode = Mode(mode)
    if mode is Mode.BEST_EFFORT:
        t_r = durable.watermark()
        vrows = [v for _, (_, v) in durable.items(VERTEX) if v is not None]
        erows = [v for _, (_, v) in durable.items(EDGE) if v is not None]
    else:
        t_r = durable.watermark()
        if t_r is None:
            raise MissingWatermark("no t_R watermark in the durable store")
        vrows, erows = [], []
        for src, dst in ((VERTEX_V, vrows), (EDGE_V, erows)):
            for _, versions in sorted(durable.versions(src).items()):
                visible = [val for ts, val in versions if ts <= t_r]
                if visible and visible[-1] is not None:
                    dst.append(visible[-1])
    try:
        vdocs = [json.loads(v) for v in vrows]
        edocs = [json.loads(v) for v in erows]
    except ValueError as exc:
        raise CorruptTable(str(exc)) from exc
    present = {_vertex_id(d) for d in vdocs}
    kept, skipped = [], 0
    for d in edocs:
        if tuple(d["src"]) in present and tuple(d["dst"]) in present:
            kept.append(d)
        else:
            skipped += 1
    return t_r, vdocs, kept, skipped


def recover(durable: DurableStore, mode: str, target_graph=None, batch: int = 100) -> RecoveryReport:
    """Rebuild a graph from durable tables. ``target_graph`` is a fresh
    :class:`~a1lite.graph.Graph` (types are defined from stored schemas);
    when omitted only the report is produced."""
    t_r, vdocs, edocs, skipped = recovered_rows(durable, mode)
    report = RecoveryReport(Mode(mode).value, t_r, {_vertex_id(d) for d in vdocs},
                            {_edge_id(d) for d in edocs}, skipped)
    if target_graph is not None:
        target_graph.install_recovered(durable.schemas(), vdocs, edocs, batch)
    return report


def recover_best_effort(durable: DurableStore, target_graph=None) -> RecoveryReport:
    return recover(durable, Mode.BEST_EFFORT, target_graph)


def recover_consistent(durable: DurableStore, target_graph=None) -> RecoveryReport:
    return recover(durable, Mode.CONSISTENT, target_graph)


def gc_tombstones(durable: DurableStore, older_than: int) -> int:
    """Drop best-effort tombstones older than ``older_than`` and prune
    versioned rows below min(older_than, t_R), keeping the newest one."""
    removed = 0
    for table in (VERTEX, EDGE):
        for key, (ts, val) in durable.items(table):
            if val is None and ts < older_than:
                durable.erase(table, key)
                removed += 1
    t_r = durable.watermark()
    horizon = older_than if t_r is None else min(older_than, t_r)
    for table in (VERTEX_V, EDGE_V):
        for key, versions in durable.versions(table).items():
            old = [(ts, v) for ts, v in versions if ts <= horizon]
            newer = len(versions) - len(old)
            drop = old[:-1]
            if old and old[-1][1] is None and not newer:
                drop = old
            for ts, _ in drop:
                durable.erase(table, key + struct.pack(">Q", ts))
                removed += 1
    return removed
