"""Property graph over the object store.

A vertex is a fixed 64-byte header plus a data object. The header address
is the vertex's identity for its whole life; updates reallocate only the
data object. Each header holds two edge lists (out and in). A list starts
as an inline object of 24-byte half-edge records and moves to the graph's
shared edge tree once it would exceed ``SPILL_THRESHOLD`` entries.

Every object owned by a graph is tagged with the graph name so allocator
audits can attribute leaks.
"""
from __future__ import annotations

import functools
import json
import struct
from dataclasses import dataclass
from typing import NamedTuple

from . import drstore
from .btree import BTreeProxy, create_tree
from .catalog import CatalogEntry, EntryKind, EntryState, entry_name
from .encoding import encode_key, key_part
from .errors import (
    DuplicateEdge, DuplicateKey, NameExists, NotFound, InvalidAddr,
    SchemaViolation, TypeDeleting, UnknownType,
)
from .schema import INDEXABLE, Schema, json_safe
from .store import NULL_REF, Addr, FatRef, Hint, Txn

HEADER_SIZE = 64
SPILL_THRESHOLD = 1024
INITIAL_CAPACITY = 8
INLINE, TREE = 0, 1
OUT, IN = 0, 1
_MAGIC = 0xA1
_HDR = struct.Struct(">BI12s" + "BI12s" * 2)
_HALF = struct.Struct(">I8s12s")
_COUNT = struct.Struct(">I")
_DOC = struct.Struct(">BI")
_MAX_INDEX_PART = 112


class HalfEdge(NamedTuple):
    type_id: int
    peer: Addr
    data: FatRef = NULL_REF

    def pack(self) -> bytes:
        return _HALF.pack(self.type_id, self.peer.pack(), self.data.pack())

    @classmethod
    def unpack(cls, b: bytes, pos: int = 0) -> "HalfEdge":
        t, peer, data = _HALF.unpack_from(b, pos)
        return cls(t, Addr.unpack(peer), FatRef.unpack(data))


@dataclass
class EdgeList:
    mode: int = INLINE
    count: int = 0
    ref: FatRef = NULL_REF

    @property
    def capacity(self) -> int:
        return 0 if self.ref.is_null else (self.ref.size - _COUNT.size) // _HALF.size


@dataclass
class VertexHeader:
    type_id: int
    data: FatRef
    out: EdgeList
    inn: EdgeList

    def edges(self, direction: int) -> EdgeList:
        return self.out if direction == OUT else self.inn

    def encode(self) -> bytes:
        raw = _HDR.pack(_MAGIC, self.type_id, self.data.pack(),
                        self.out.mode, self.out.count, self.out.ref.pack(),
                        self.inn.mode, self.inn.count, self.inn.ref.pack())
        return raw + bytes(HEADER_SIZE - len(raw))

    @classmethod
    def decode(cls, b: bytes) -> "VertexHeader":
        magic, tid, data, om, oc, oref, im, ic, iref = _HDR.unpack_from(b, 0)
        if magic != _MAGIC:
            raise NotFound("object is not a vertex header")
        return cls(tid, FatRef.unpack(data),
                   EdgeList(om, oc, FatRef.unpack(oref)),
                   EdgeList(im, ic, FatRef.unpack(iref)))


class Vertex(NamedTuple):
    addr: Addr
    type: str
    attrs: dict
    header: VertexHeader


@dataclass
class TypeInfo:
    name: str
    kind: str
    type_id: int
    schema: Schema
    indexes: tuple = ()
    state: EntryState = EntryState.ACTIVE
    addr: Addr | None = None

    def doc(self) -> dict:
        return {"name": self.name, "kind": self.kind, "type_id": self.type_id,
                "schema": self.schema.to_doc(), "indexes": list(self.indexes)}


@functools.lru_cache(maxsize=256)
def _schema(doc_json: str) -> Schema:
    return Schema.from_doc(json.loads(doc_json))


def _parse_inline(raw: bytes) -> list[HalfEdge]:
    (n,) = _COUNT.unpack_from(raw, 0)
    return [HalfEdge.unpack(raw, 4 + i * _HALF.size) for i in range(n)]


def _pack_inline(halves: list[HalfEdge], size: int) -> bytes:
    raw = _COUNT.pack(len(halves)) + b"".join(h.pack() for h in halves)
    return raw + bytes(size - len(raw))


def _tree_key(vertex: Addr, direction: int, type_id: int | None = None,
              peer: Addr | None = None) -> bytes:
    k = vertex.pack() + bytes([direction])
    if type_id is not None:
        k += struct.pack(">I", type_id)
        if peer is not None:
            k += peer.pack()
    return k


def _data_bytes(record: bytes) -> bytes:
    raw = _COUNT.pack(len(record)) + record
    return raw + bytes(max(0, 64 - len(raw)))


def _index_key(value, addr: Addr) -> bytes:
    return key_part(value)[:_MAX_INDEX_PART] + addr.pack()


def _doc_bytes(state: int, doc: dict) -> bytes:
    body = json.dumps(doc, sort_keys=True).encode()
    return _DOC.pack(state, len(body)) + body


def _read_doc(raw: bytes) -> tuple[int, dict]:
    state, n = _DOC.unpack_from(raw, 0)
    return state, json.loads(raw[_DOC.size:_DOC.size + n])


class _Op:
    """Per-operation scratch: each header is read once and written back once,
    so several edits to one vertex (self loops, parallel types) compose."""

    def __init__(self, graph: "Graph", tx: Txn):
        self.g = graph
        self.tx = tx
        self.headers: dict[Addr, VertexHeader] = {}
        self.dirty: set[Addr] = set()
        self.gone: set[Addr] = set()

    def header(self, addr: Addr) -> VertexHeader:
        if addr in self.gone:
            raise NotFound(f"vertex {addr} deleted")
        h = self.headers.get(addr)
        if h is None:
            h = self.g.read_header(self.tx, addr)
            self.headers[addr] = h
        return h

    def touch(self, addr: Addr) -> None:
        self.dirty.add(addr)

    def forget(self, addr: Addr) -> None:
        self.headers.pop(addr, None)
        self.dirty.discard(addr)
        self.gone.add(addr)

    def flush(self) -> None:
        store = self.g.store
        for addr in sorted(self.dirty):
            buf = store.open_for_write(self.tx, store.read(self.tx, addr, HEADER_SIZE))
            buf.write(0, self.headers[addr].encode())
        self.dirty.clear()


class Graph:
    def __init__(self, db, name: str):
        self.db = db
        self.store = db.store
        self.catalog = db.catalog
        self.name = name
        self.tag = name
        self.dr: drstore.ReplicationPipeline | None = None
        self._by_name: dict[str, TypeInfo] = {}
        self._by_id: dict[int, TypeInfo] = {}

    def __repr__(self) -> str:
        return f"Graph({self.name!r})"

    # -- names -------------------------------------------------------------
    @property
    def entry(self) -> str:
        return entry_name(self.name)

    def type_entry(self, kind: str, type_name: str) -> str:
        return entry_name(self.name, kind, type_name)

    def index_entry(self, type_name: str, field: str) -> str:
        return entry_name(self.name, "index", type_name, field)

    @property
    def edge_tree_entry(self) -> str:
        return entry_name(self.name, "tree", "edges")

    @property
    def log_entry(self) -> str:
        return entry_name(self.name, "log")

    # -- creation ------------------------------------------------------------
    @classmethod
    def create(cls, db, tx: Txn, name: str, dr_mode: str | None = None) -> "Graph":
        if not name or "/" in name:
            raise SchemaViolation(f"bad graph name {name!r}")
        g = cls(db, name)
        cat, store = db.catalog, db.store
        meta = {"next_type_id": 1, "types": {}, "dr_mode": dr_mode}
        mbuf = store.alloc(tx, 512, tag=name)
        mbuf.write(0, _doc_bytes(EntryState.ACTIVE, meta))
        cat.register(tx, CatalogEntry(g.entry, EntryKind.GRAPH, schema_ref=mbuf.addr))
        cat.register(tx, CatalogEntry(g.edge_tree_entry, EntryKind.TREE,
                                      create_tree(store, tx, "edges", tag=name)))
        cat.register(tx, CatalogEntry(g.log_entry, EntryKind.LOG,
                                      create_tree(store, tx, "log", tag=name)))
        return g

    # -- proxies -------------------------------------------------------------
    def _tree(self, tx: Txn, name: str) -> BTreeProxy:
        return self.catalog.resolve(name, node=tx.node, allow_deleting=True).tree

    def edge_tree(self, tx: Txn) -> BTreeProxy:
        return self._tree(tx, self.edge_tree_entry)

    def primary_index(self, tx: Txn, info: TypeInfo) -> BTreeProxy:
        return self._tree(tx, self.type_entry("vertex", info.name))

    def secondary_index(self, tx: Txn, type_name: str, field: str) -> BTreeProxy:
        try:
            return self._tree(tx, self.index_entry(type_name, field))
        except NotFound:
            raise NotFound(f"no index on {type_name}.{field}") from None

    def log_tree(self) -> BTreeProxy:
        return self.catalog.resolve(self.log_entry, allow_deleting=True).tree

    # -- metadata ----------------------------------------------------------
    def _meta_addr(self, tx: Txn) -> Addr:
        return self.catalog.get_entry(tx, self.entry).schema_ref

    def read_meta(self, tx: Txn) -> tuple[int, dict]:
        return _read_doc(self.store.read(tx, self._meta_addr(tx)).data)

    def _write_doc(self, tx: Txn, addr: Addr, state: int, doc: dict, entry: str) -> Addr:
        """Rewrite a JSON metadata object, moving it when it outgrows its size."""
        tx.tags.pop("types", None)
        raw = _doc_bytes(state, doc)
        buf = self.store.read(tx, addr)
        if len(raw) <= buf.size:
            self.store.open_for_write(tx, buf).write(0, raw + bytes(buf.size - len(raw)))
            return addr
        nbuf = self.store.alloc(tx, max(256, 2 * len(raw)), Hint.near(addr), tag=self.tag)
        nbuf.write(0, raw)
        self.store.free(tx, addr)
        self.catalog.update_schema_ref(tx, entry, nbuf.addr)
        return nbuf.addr

    def _load_type(self, tx: Txn, kind: str, type_name: str) -> TypeInfo:
        # repeatable within a transaction, so memoize per transaction
        memo = tx.tags.setdefault("types", {})
        info = memo.get((self.name, kind, type_name))
        if info is not None:
            return info
        ename = self.type_entry(kind, type_name)
        entry = self.catalog.find(tx, ename)
        if entry is None:
            raise UnknownType(f"{self.name} has no {kind} type {type_name!r}")
        state, doc = _read_doc(self.store.read(tx, entry.schema_ref).data)
        info = TypeInfo(doc["name"], doc["kind"], doc["type_id"],
                        _schema(json.dumps(doc["schema"], sort_keys=True)),
                        tuple(doc["indexes"]), EntryState(state), entry.schema_ref)
        memo[(self.name, kind, type_name)] = info
        self._by_name[(kind, type_name)] = info
        self._by_id[info.type_id] = info
        return info

    def type_info(self, type_name: str, kind: str = "vertex", tx: Txn | None = None) -> TypeInfo:
        """Cached type description for read paths. Schemas never change after
        definition, so only state and index lists can be stale here."""
        info = self._by_name.get((kind, type_name))
        if info is not None:
            return info
        return self._with(lambda t: self._load_type(t, kind, type_name), tx, read_only=True)

    def type_by_id(self, type_id: int, tx: Txn | None = None) -> TypeInfo:
        info = self._by_id.get(type_id)
        if info is not None:
            return info

        def load(t):
            _, meta = self.read_meta(t)
            pair = meta["types"].get(str(type_id))
            if pair is None:
                raise UnknownType(f"unknown type id {type_id}")
            return self._load_type(t, pair[1], pair[0])
        return self._with(load, tx, read_only=True)

    def _writable_type(self, tx: Txn, kind: str, type_name: str) -> TypeInfo:
        """Read the type object inside ``tx``; the read joins the read set so
        a concurrent flip to DELETING aborts this transaction at commit."""
        info = self._load_type(tx, kind, type_name)
        if info.state is not EntryState.ACTIVE:
            raise TypeDeleting(f"type {type_name} is being deleted")
        return info

    def types(self, tx: Txn | None = None) -> list[TypeInfo]:
        def load(t):
            _, meta = self.read_meta(t)
            out = []
            for tid in sorted(meta["types"], key=int):
                name, kind = meta["types"][tid]
                try:
                    out.append(self._load_type(t, kind, name))
                except UnknownType:
                    continue
            return out
        return self._with(load, tx, read_only=True)

    def define_type(self, doc: dict, tx: Txn | None = None) -> TypeInfo:
        schema = Schema.from_doc(doc)

        def run(t):
            state, meta = self.read_meta(t)
            if state != EntryState.ACTIVE:
                raise TypeDeleting(f"graph {self.name} is being deleted")
            tid = meta["next_type_id"]
            info = TypeInfo(schema.name, schema.kind, tid, schema)
            raw = _doc_bytes(EntryState.ACTIVE, info.doc())
            buf = self.store.alloc(t, max(256, 2 * len(raw)), tag=self.tag)
            buf.write(0, raw)
            info.addr = buf.addr
            root = NULL_REF
            kind = EntryKind.VERTEX_TYPE
            if schema.kind == "vertex":
                root = create_tree(self.store, t, schema.name, tag=self.tag)
            else:
                kind = EntryKind.EDGE_TYPE
            self.catalog.register(t, CatalogEntry(
                self.type_entry(schema.kind, schema.name), kind, root, buf.addr))
            meta["next_type_id"] = tid + 1
            meta["types"][str(tid)] = [schema.name, schema.kind]
            self._write_doc(t, self._meta_addr(t), state, meta, self.entry)
            return info
        info = self._with(run, tx)
        self._by_name[(info.kind, info.name)] = info
        self._by_id[info.type_id] = info
        if self.dr is not None:
            self.dr.durable.put_schema(info.name, info.doc())
        return info

    # -- low-level reads ---------------------------------------------------
    def read_header(self, tx: Txn, addr: Addr) -> VertexHeader:
        try:
            buf = self.store.read(tx, addr, HEADER_SIZE)
        except InvalidAddr:
            raise NotFound(f"no vertex at {addr}") from None
        return VertexHeader.decode(buf.data)

    def read_data(self, tx: Txn, ref: FatRef, schema: Schema) -> dict:
        raw = self.store.read(tx, ref.addr, ref.size).data
        (n,) = _COUNT.unpack_from(raw, 0)
        return schema.decode(raw[4:4 + n])

    def vertex_attrs(self, tx: Txn, header: VertexHeader) -> tuple[TypeInfo, dict]:
        info = self.type_by_id(header.type_id, tx)
        return info, self.read_data(tx, header.data, info.schema)

    def vertex_at(self, addr: Addr, tx: Txn | None = None) -> Vertex:
        def run(t):
            h = self.read_header(t, addr)
            info, attrs = self.vertex_attrs(t, h)
            return Vertex(addr, info.name, attrs, h)
        return self._with(run, tx, read_only=True)

    def halves(self, tx: Txn, vertex: Addr, header: VertexHeader, direction: int,
               type_id: int | None = None) -> list[HalfEdge]:
        el = header.edges(direction)
        if el.mode == INLINE:
            if el.ref.is_null:
                return []
            found = _parse_inline(self.store.read(tx, el.ref.addr, el.ref.size).data)
            return [x for x in found if type_id is None or x.type_id == type_id]
        out = []
        for k, v in self.edge_tree(tx).prefix_scan(tx, _tree_key(vertex, direction, type_id)):
            (tid,) = struct.unpack_from(">I", k, 9)
            out.append(HalfEdge(tid, Addr.unpack(k, 13), FatRef.unpack(v)))
        return out

    def edge_attrs(self, tx: Txn, half: HalfEdge) -> dict:
        if half.data.is_null:
            return {}
        return self.read_data(tx, half.data, self.type_by_id(half.type_id, tx).schema)

    # -- edge-list maintenance ---------------------------------------------
    def _find_half(self, op: _Op, vertex: Addr, direction: int, type_id: int,
                   peer: Addr) -> HalfEdge | None:
        h = op.header(vertex)
        el = h.edges(direction)
        if el.mode == TREE:
            v = self.edge_tree(op.tx).get(op.tx, _tree_key(vertex, direction, type_id, peer))
            return None if v is None else HalfEdge(type_id, peer, FatRef.unpack(v))
        for x in self.halves(op.tx, vertex, h, direction, type_id):
            if x.peer == peer:
                return x
        return None

    def _add_half(self, op: _Op, vertex: Addr, direction: int, half: HalfEdge) -> None:
        tx, store = op.tx, self.store
        h = op.header(vertex)
        el = h.edges(direction)
        if el.mode == TREE:
            self.edge_tree(tx).insert(tx, _tree_key(vertex, direction, half.type_id, half.peer),
                                      half.data.pack())
        elif el.count < el.capacity:
            buf = store.open_for_write(tx, store.read(tx, el.ref.addr, el.ref.size))
            buf.write(4 + el.count * _HALF.size, half.pack())
            buf.write(0, _COUNT.pack(el.count + 1))
        elif el.count >= SPILL_THRESHOLD:
            tree = self.edge_tree(tx)
            existing = _parse_inline(store.read(tx, el.ref.addr, el.ref.size).data)
            for x in existing + [half]:
                tree.insert(tx, _tree_key(vertex, direction, x.type_id, x.peer), x.data.pack())
            store.free(tx, el.ref.addr)
            el.mode, el.ref = TREE, NULL_REF
        else:
            existing = [] if el.ref.is_null else _parse_inline(
                store.read(tx, el.ref.addr, el.ref.size).data)
            cap = INITIAL_CAPACITY if el.ref.is_null else min(2 * el.capacity, SPILL_THRESHOLD)
            size = _COUNT.size + cap * _HALF.size
            buf = store.alloc(tx, size, Hint.near(vertex), tag=self.tag)
            buf.write(0, _pack_inline(existing + [half], size))
            if not el.ref.is_null:
                store.free(tx, el.ref.addr)
            el.ref = buf.ref
        el.count += 1
        op.touch(vertex)

    def _remove_half(self, op: _Op, vertex: Addr, direction: int, type_id: int,
                     peer: Addr) -> HalfEdge:
        tx, store = op.tx, self.store
        h = op.header(vertex)
        el = h.edges(direction)
        if el.mode == TREE:
            tree = self.edge_tree(tx)
            key = _tree_key(vertex, direction, type_id, peer)
            v = tree.get(tx, key)
            if v is None:
                raise NotFound("half-edge not present")
            tree.delete(tx, key)
            found = HalfEdge(type_id, peer, FatRef.unpack(v))
        else:
            halves = self.halves(tx, vertex, h, direction)
            idx = next((i for i, x in enumerate(halves)
                        if x.type_id == type_id and x.peer == peer), None)
            if idx is None:
                raise NotFound("half-edge not present")
            found = halves.pop(idx)
            buf = store.open_for_write(tx, store.read(tx, el.ref.addr, el.ref.size))
            buf.write(0, _pack_inline(halves, el.ref.size))
        el.count -= 1
        op.touch(vertex)
        return found

    # -- vertices ----------------------------------------------------------
    def create_vertex(self, type_name: str, attrs: dict, tx: Txn | None = None,
                      node: int | None = None) -> Addr:
        def run(t):
            info = self._writable_type(t, "vertex", type_name)
            rec = info.schema.normalize(attrs)
            pk = rec[info.schema.primary_key]
            index = self.primary_index(t, info)
            pkey = encode_key(pk)
            if index.get(t, pkey) is not None:
                raise DuplicateKey(f"{type_name} {pk!r} already exists")
            hbuf = self.store.alloc(t, HEADER_SIZE, Hint.on_node(self.db.pick_node()),
                                    tag=self.tag)
            dbuf = self._alloc_data(t, info.schema.encode(rec), hbuf.addr)
            header = VertexHeader(info.type_id, dbuf.ref, EdgeList(), EdgeList())
            hbuf.write(0, header.encode())
            index.insert(t, pkey, hbuf.addr.pack())
            self._index_add(t, info, rec, hbuf.addr)
            self._log_vertex(t, info, rec)
            return hbuf.addr
        return self._with(run, tx)

    def _alloc_data(self, tx: Txn, record: bytes, near: Addr):
        raw = _data_bytes(record)
        buf = self.store.alloc(tx, len(raw), Hint.near(near), tag=self.tag)
        buf.write(0, raw)
        return buf

    def _resolve_pk(self, tx: Txn, info: TypeInfo, pk) -> Addr:
        pk = info.schema.coerce_value(info.schema.primary_key, pk)
        raw = self.primary_index(tx, info).get(tx, encode_key(pk))
        if raw is None:
            raise NotFound(f"{info.name} {pk!r} not found")
        return Addr.unpack(raw)

    def lookup_by_pk(self, type_name: str, pk, tx: Txn | None = None) -> Vertex:
        def run(t):
            info = self.type_info(type_name, tx=t)
            addr = self._resolve_pk(t, info, pk)
            h = self.read_header(t, addr)
            return Vertex(addr, type_name, self.read_data(t, h.data, info.schema), h)
        return self._with(run, tx, read_only=True)

    def addr_of(self, type_name: str, pk, tx: Txn | None = None) -> Addr:
        return self._with(lambda t: self._resolve_pk(t, self.type_info(type_name, tx=t), pk),
                          tx, read_only=True)

    def update_vertex(self, type_name: str, pk, attrs: dict, tx: Txn | None = None) -> Addr:
        """Merge ``attrs`` into the record; a None value clears a field."""
        def run(t):
            info = self._writable_type(t, "vertex", type_name)
            addr = self._resolve_pk(t, info, pk)
            op = _Op(self, t)
            h = op.header(addr)
            old = self.read_data(t, h.data, info.schema)
            merged = dict(old)
            merged.update(attrs)
            rec = info.schema.normalize(merged)
            keyf = info.schema.primary_key
            if rec[keyf] != old[keyf]:
                raise SchemaViolation("the primary key cannot change")
            dbuf = self._alloc_data(t, info.schema.encode(rec), addr)
            self.store.free(t, h.data.addr)
            h.data = dbuf.ref
            op.touch(addr)
            for f in info.indexes:
                if old.get(f) != rec.get(f):
                    self._index_remove(t, info, f, old.get(f), addr)
                    self._index_put(t, info, f, rec.get(f), addr)
            op.flush()
            self._log_vertex(t, info, rec)
            return addr
        return self._with(run, tx)

    def delete_vertex(self, type_name: str, pk, tx: Txn | None = None) -> None:
        def run(t):
            info = self._writable_type(t, "vertex", type_name)
            addr = self._resolve_pk(t, info, pk)
            op = _Op(self, t)
            self._delete_at(op, info, addr)
            op.flush()
        self._with(run, tx)

    def _delete_at(self, op: _Op, info: TypeInfo, addr: Addr, log: bool = True) -> None:
        """Remove a vertex, the mirror of each of its half-edges, edge data,
        index entries and its own objects."""
        tx, store = op.tx, self.store
        h = op.header(addr)
        rec = self.read_data(tx, h.data, info.schema)
        me = (info.name, rec[info.schema.primary_key])
        outs = self.halves(tx, addr, h, OUT)
        ins = self.halves(tx, addr, h, IN)
        for direction, halves in ((OUT, outs), (IN, ins)):
            for x in halves:
                if x.peer != addr:
                    self._remove_half(op, x.peer, 1 - direction, x.type_id, addr)
                if not x.data.is_null and (direction == OUT or x.peer != addr):
                    store.free(tx, x.data.addr)
                if log and self.dr is not None and (direction == OUT or x.peer != addr):
                    other = me if x.peer == addr else self._identity(op, x.peer)
                    src, dst = (me, other) if direction == OUT else (other, me)
                    self._log_edge(tx, src, self.type_by_id(x.type_id, tx).name, dst, None)
        for direction in (OUT, IN):
            el = h.edges(direction)
            if el.mode == INLINE and not el.ref.is_null:
                store.free(tx, el.ref.addr)
            elif el.mode == TREE:
                tree = self.edge_tree(tx)
                for k, _ in list(tree.prefix_scan(tx, _tree_key(addr, direction))):
                    tree.delete(tx, k)
        self.primary_index(tx, info).delete(tx, encode_key(me[1]))
        for f in info.indexes:
            self._index_remove(tx, info, f, rec.get(f), addr)
        store.free(tx, h.data.addr)
        store.free(tx, addr)
        op.forget(addr)
        if log and self.dr is not None:
            self.dr.log_mutation(tx, drstore.VERTEX, drstore.Op.DELETE,
                                 encode_key(*me), None)

    def vertices(self, type_name: str, tx: Txn | None = None) -> list[Addr]:
        def run(t):
            info = self.type_info(type_name, tx=t)
            return [Addr.unpack(v) for _, v in self.primary_index(t, info).range_scan(t)]
        return self._with(run, tx, read_only=True)

    # -- edges ---------------------------------------------------------------
    def create_edge(self, src: Addr, edge_type: str, dst: Addr, attrs: dict | None = None,
                    tx: Txn | None = None) -> None:
        def run(t):
            info = self._writable_type(t, "edge", edge_type)
            rec = info.schema.normalize(attrs)
            op = _Op(self, t)
            for end in {src, dst}:
                self._check_endpoint(t, op.header(end))
            if self._find_half(op, src, OUT, info.type_id, dst) is not None:
                raise DuplicateEdge(f"{edge_type} edge {src} -> {dst} exists")
            data = NULL_REF
            if attrs is not None:
                data = self._alloc_data(t, info.schema.encode(rec), src).ref
            self._add_half(op, src, OUT, HalfEdge(info.type_id, dst, data))
            self._add_half(op, dst, IN, HalfEdge(info.type_id, src, data))
            if self.dr is not None:
                self._log_edge(t, self._identity(op, src), edge_type,
                               self._identity(op, dst), rec if attrs is not None else None,
                               upsert=True)
            op.flush()
        self._with(run, tx)

    def _check_endpoint(self, tx: Txn, header: VertexHeader) -> None:
        info = self.type_by_id(header.type_id, tx)
        fresh = self._load_type(tx, info.kind, info.name)
        if fresh.state is not EntryState.ACTIVE:
            raise TypeDeleting(f"endpoint type {info.name} is being deleted")

    def delete_edge(self, src: Addr, edge_type: str, dst: Addr, tx: Txn | None = None) -> None:
        def run(t):
            info = self.type_info(edge_type, "edge", tx=t)
            op = _Op(self, t)
            half = self._remove_half(op, src, OUT, info.type_id, dst)
            self._remove_half(op, dst, IN, info.type_id, src)
            if not half.data.is_null:
                self.store.free(t, half.data.addr)
            if self.dr is not None:
                self._log_edge(t, self._identity(op, src), edge_type,
                               self._identity(op, dst), None)
            op.flush()
        self._with(run, tx)

    def enumerate_edges(self, vertex: Addr, direction: int = OUT, edge_type: str | None = None,
                        tx: Txn | None = None) -> list[HalfEdge]:
        def run(t):
            tid = None if edge_type is None else self.type_info(edge_type, "edge", tx=t).type_id
            return self.halves(t, vertex, self.read_header(t, vertex), direction, tid)
        return self._with(run, tx, read_only=True)

    def edge_data(self, half: HalfEdge, tx: Txn | None = None) -> dict:
        return self._with(lambda t: self.edge_attrs(t, half), tx, read_only=True)

    # -- secondary indexes ---------------------------------------------------
    def _index_put(self, tx: Txn, info: TypeInfo, field: str, value, addr: Addr) -> None:
        if value is None:
            return
        tree = self.secondary_index(tx, info.name, field)
        tree.insert(tx, _index_key(value, addr), addr.pack(), replace=True)

    def _index_remove(self, tx: Txn, info: TypeInfo, field: str, value, addr: Addr) -> None:
        if value is None:
            return
        tree = self.secondary_index(tx, info.name, field)
        key = _index_key(value, addr)
        if tree.get(tx, key) is not None:
            tree.delete(tx, key)

    def _index_add(self, tx: Txn, info: TypeInfo, rec: dict, addr: Addr) -> None:
        for f in info.indexes:
            self._index_put(tx, info, f, rec.get(f), addr)

    def create_secondary_index(self, type_name: str, field: str, tx: Txn | None = None) -> int:
        """Declare an index and enqueue its build; returns the build task id.
        Writes after this commit maintain the index synchronously."""
        def run(t):
            info = self._writable_type(t, "vertex", type_name)
            f = info.schema.field(field)
            if f.kind not in INDEXABLE:
                raise SchemaViolation(f"cannot index {f.type} field {field}")
            if field in info.indexes:
                raise NameExists(f"index on {type_name}.{field} exists")
            root = create_tree(self.store, t, f"{type_name}.{field}", tag=self.tag)
            self.catalog.register(t, CatalogEntry(self.index_entry(type_name, field),
                                                  EntryKind.INDEX, root))
            info.indexes = info.indexes + (field,)
            self._write_doc(t, info.addr, info.state, info.doc(),
                            self.type_entry("vertex", type_name))
            return self.db.tasks.enqueue(t, "BUILD_INDEX", {
                "graph": self.name, "type": type_name, "field": field})
        task_id = self._with(run, tx)
        self._by_name.pop(("vertex", type_name), None)
        if self.dr is not None:
            self.dr.durable.put_schema(type_name, self.type_info(type_name).doc())
        return task_id

    def lookup_by_secondary(self, type_name: str, field: str, value,
                            tx: Txn | None = None) -> list[Addr]:
        def run(t):
            info = self.type_info(type_name, tx=t)
            v = info.schema.coerce_value(field, value)
            part = key_part(v)
            tree = self.secondary_index(t, type_name, field)
            addrs = [Addr.unpack(raw) for _, raw in tree.prefix_scan(t, part[:_MAX_INDEX_PART])]
            if len(part) > _MAX_INDEX_PART:
                addrs = [a for a in addrs
                         if self.read_data(t, self.read_header(t, a).data, info.schema).get(field) == v]
            return addrs
        return self._with(run, tx, read_only=True)

    def build_index_batch(self, tx: Txn, type_name: str, field: str, cursor: bytes | None,
                          batch: int = 100) -> bytes | None:
        """Index one batch of vertices; returns the next cursor or None when done."""
        info = self._load_type(tx, "vertex", type_name)
        rows = list(self.primary_index(tx, info).range_scan(tx, cursor, None, batch))
        for _, raw in rows:
            addr = Addr.unpack(raw)
            rec = self.read_data(tx, self.read_header(tx, addr).data, info.schema)
            self._index_put(tx, info, field, rec.get(field), addr)
        if len(rows) < batch:
            return None
        return rows[-1][0] + b"\x00"

    # -- bulk deletion (workflow hooks) ---------------------------------------
    def delete_type_batch(self, tx: Txn, kind: str, type_name: str, batch: int = 100,
                          log: bool = True) -> int:
        """Delete up to ``batch`` vertices of a DELETING vertex type; returns
        how many were removed."""
        info = self._load_type(tx, kind, type_name)
        rows = list(self.primary_index(tx, info).range_scan(tx, None, None, batch))
        op = _Op(self, tx)
        for _, raw in rows:
            self._delete_at(op, info, Addr.unpack(raw), log=log)
        op.flush()
        return len(rows)

    def delete_edges_batch(self, tx: Txn, edge_type: str, cursor: list | None,
                           batch: int = 100, log: bool = True) -> list | None:
        """Remove edges of one type by scanning every vertex type; the cursor
        is ``[type_name, next_key_hex]``. Returns None when finished."""
        info = self._load_type(tx, "edge", edge_type)
        vtypes = sorted(t.name for t in self.types(tx) if t.kind == "vertex")
        if cursor is None:
            if not vtypes:
                return None
            cursor = [vtypes[0], ""]
        tname, start = cursor
        vinfo = self._load_type(tx, "vertex", tname)
        rows = list(self.primary_index(tx, vinfo).range_scan(
            tx, bytes.fromhex(start) or None, None, batch))
        op = _Op(self, tx)
        for _, raw in rows:
            addr = Addr.unpack(raw)
            for x in self.halves(tx, addr, op.header(addr), OUT, info.type_id):
                self._remove_half(op, addr, OUT, info.type_id, x.peer)
                self._remove_half(op, x.peer, IN, info.type_id, addr)
                if not x.data.is_null:
                    self.store.free(tx, x.data.addr)
                if log and self.dr is not None:
                    self._log_edge(tx, self._identity(op, addr), edge_type,
                                   self._identity(op, x.peer), None)
        op.flush()
        if len(rows) == batch:
            return [tname, (rows[-1][0] + b"\x00").hex()]
        later = [n for n in vtypes if n > tname]
        return [later[0], ""] if later else None

    def mark_type_deleting(self, tx: Txn, kind: str, type_name: str) -> TypeInfo:
        info = self._load_type(tx, kind, type_name)
        if info.state is EntryState.ACTIVE:
            info.state = EntryState.DELETING
            self._write_doc(tx, info.addr, info.state, info.doc(), self.type_entry(kind, type_name))
            self.catalog.set_state(tx, self.type_entry(kind, type_name), EntryState.DELETING)
        return info

    def finalize_type(self, tx: Txn, kind: str, type_name: str) -> None:
        """Drop index trees, the type object and catalog entries."""
        info = self._load_type(tx, kind, type_name)
        ename = self.type_entry(kind, type_name)
        for f in info.indexes:
            self.drop_index(tx, type_name, f)
        if kind == "vertex":
            self.primary_index(tx, info).drop(tx)
        self.store.free(tx, info.addr)
        self.catalog.set_state(tx, ename, EntryState.DELETING)
        self.catalog.remove(tx, ename)
        state, meta = self.read_meta(tx)
        meta["types"].pop(str(info.type_id), None)
        self._write_doc(tx, self._meta_addr(tx), state, meta, self.entry)
        tx.on_commit.append(lambda _t: self.invalidate_caches())

    def drop_index(self, tx: Txn, type_name: str, field: str) -> None:
        name = self.index_entry(type_name, field)
        if self.catalog.find(tx, name) is None:
            return
        self.secondary_index(tx, type_name, field).drop(tx)
        self.catalog.set_state(tx, name, EntryState.DELETING)
        self.catalog.remove(tx, name)

    def finalize_graph(self, tx: Txn) -> None:
        """Free the edge tree, pending log entries, the log tree and metadata."""
        self.edge_tree(tx).drop(tx)
        log_tree = self._tree(tx, self.log_entry)
        for _, raw in log_tree.range_scan(tx):
            self.store.free(tx, Addr.unpack(raw))
        log_tree.drop(tx)
        self.store.free(tx, self._meta_addr(tx))
        for name in (self.edge_tree_entry, self.log_entry, self.entry):
            self.catalog.set_state(tx, name, EntryState.DELETING)
            self.catalog.remove(tx, name)

    def invalidate_caches(self) -> None:
        self._by_name.clear()
        self._by_id.clear()

    # -- audits --------------------------------------------------------------
    def dangling_scan(self, tx: Txn | None = None) -> list[tuple]:
        """Half-edges with no matching mirror: (vertex, direction, half)."""
        def run(t):
            outs, ins = {}, {}
            for info in self.types(t):
                if info.kind != "vertex":
                    continue
                for _, raw in self.primary_index(t, info).range_scan(t):
                    addr = Addr.unpack(raw)
                    h = self.read_header(t, addr)
                    for x in self.halves(t, addr, h, OUT):
                        outs[(addr, x.type_id, x.peer)] = x
                    for x in self.halves(t, addr, h, IN):
                        ins[(x.peer, x.type_id, addr)] = x
                    for d in (OUT, IN):
                        el = h.edges(d)
                        if el.count != len(self.halves(t, addr, h, d)):
                            raise AssertionError(f"edge count drift at {addr}")
            bad = []
            for k, x in outs.items():
                m = ins.get(k)
                if m is None or m.data != x.data:
                    bad.append((k[0], OUT, x))
            for k, x in ins.items():
                if k not in outs:
                    bad.append((k[2], IN, x))
            return bad
        return self._with(run, tx, read_only=True)

    # -- disaster recovery ---------------------------------------------------
    def _identity(self, op: _Op, addr: Addr) -> tuple:
        h = op.header(addr)
        info, rec = self.vertex_attrs(op.tx, h)
        return (info.name, rec[info.schema.primary_key])

    def _log_vertex(self, tx: Txn, info: TypeInfo, rec: dict) -> None:
        if self.dr is None:
            return
        pk = rec[info.schema.primary_key]
        doc = {"type": info.name, "pk": pk, "attrs": json_safe(rec)}
        self.dr.log_mutation(tx, drstore.VERTEX, drstore.Op.UPSERT, encode_key(info.name, pk),
                             json.dumps(doc, sort_keys=True).encode())

    def _log_edge(self, tx: Txn, src: tuple, etype: str, dst: tuple, rec: dict | None,
                  upsert: bool = False) -> None:
        key = encode_key(src[0], src[1], etype, dst[0], dst[1])
        if not upsert:
            self.dr.log_mutation(tx, drstore.EDGE, drstore.Op.DELETE, key, None)
            return
        doc = {"src": list(src), "type": etype, "dst": list(dst),
               "attrs": None if rec is None else json_safe(rec)}
        self.dr.log_mutation(tx, drstore.EDGE, drstore.Op.UPSERT, key,
                             json.dumps(doc, sort_keys=True).encode())

    def install_recovered(self, schemas: list[dict], vdocs: list[dict], edocs: list[dict],
                          batch: int = 100) -> None:
        """Recreate types, vertices and edges from recovered durable rows."""
        existing = {(t.kind, t.name) for t in self.types()}
        ordered = sorted(schemas, key=lambda d: d["type_id"])
        for d in ordered:
            if (d["kind"], d["name"]) not in existing:
                self.define_type(d["schema"])
        for i in range(0, len(vdocs), batch):
            chunk = vdocs[i:i + batch]
            self.db.run(lambda t, c=chunk: [self.create_vertex(d["type"], d["attrs"], tx=t)
                                            for d in c])
        for i in range(0, len(edocs), batch):
            chunk = edocs[i:i + batch]

            def add(t, c=chunk):
                for d in c:
                    src = self._resolve_pk(t, self.type_info(d["src"][0], tx=t), d["src"][1])
                    dst = self._resolve_pk(t, self.type_info(d["dst"][0], tx=t), d["dst"][1])
                    self.create_edge(src, d["type"], dst, d["attrs"], tx=t)
            self.db.run(add)
        for d in ordered:
            for f in d.get("indexes", ()):
                if d["kind"] == "vertex" and f not in self.type_info(d["name"]).indexes:
                    self.create_secondary_index(d["name"], f)
        self.db.tasks.run_until_idle()

    # -- transactions --------------------------------------------------------
    def _with(self, fn, tx: Txn | None, read_only: bool = False):
        if tx is not None:
            return fn(tx)
        return self.db.run(fn, read_only=read_only)

