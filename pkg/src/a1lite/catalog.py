"""Catalog: names -> metadata needed to build proxies.

The catalog is itself a B-tree rooted at the reserved address (region 0,
offset 0). Each node keeps a proxy cache in its process memory; cached
proxies are served without any catalog reads until their TTL (in logical
ticks) expires, at which point the entry is re-read and either the TTL is
extended or the proxy rebuilt.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace

from .btree import NODE_SIZE, BTreeProxy, create_tree
from .errors import BadTransition, Deleting, NameExists, NotFound
from .store import NULL_ADDR, NULL_REF, Addr, FatRef, Hint, Store, Txn

CATALOG_ROOT = FatRef(Addr(0, 0), NODE_SIZE)
DEFAULT_TTL = 1000
TENANT = "default"


class EntryKind(enum.IntEnum):
    GRAPH = 1
    VERTEX_TYPE = 2
    EDGE_TYPE = 3
    INDEX = 4
    TREE = 5
    QUEUE = 6
    LOG = 7


class EntryState(enum.IntEnum):
    ACTIVE = 1
    DELETING = 2


_ENTRY = struct.Struct(">B12s8sBQ")


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    kind: EntryKind
    root: FatRef = NULL_REF
    schema_ref: Addr | None = None
    state: EntryState = EntryState.ACTIVE
    version: int = 0

    def encode(self) -> bytes:
        return _ENTRY.pack(
            self.kind, self.root.pack(),
            (self.schema_ref or NULL_ADDR).pack(), self.state, self.version,
        )

    @classmethod
    def decode(cls, name: str, b: bytes) -> "CatalogEntry":
        kind, root, schema, state, version = _ENTRY.unpack(b)
        schema_ref = Addr.unpack(schema)
        return cls(
            name, EntryKind(kind), FatRef.unpack(root),
            None if schema_ref == NULL_ADDR else schema_ref,
            EntryState(state), version,
        )


@dataclass
class Proxy:
    entry: CatalogEntry
    tree: BTreeProxy | None


@dataclass
class ProxyCacheEntry:
    entry: CatalogEntry
    proxy: Proxy
    expires_at: int


def entry_name(*parts: str) -> str:
    return "/".join((TENANT,) + parts)


class Catalog:
    def __init__(self, store: Store, ttl: int = DEFAULT_TTL):
        self.store = store
        self.ttl = ttl

    def bootstrap(self, tx: Txn) -> None:
        ref = create_tree(self.store, tx, "catalog",
                          Hint.on_node(self.store.cluster.cm), tag="catalog")
        if ref != CATALOG_ROOT:
            raise RuntimeError(f"catalog root landed at {ref}, expected {CATALOG_ROOT}")

    def _tree(self, node: int) -> BTreeProxy:
        local = self.store.cluster.nodes[node].local
        tree = local.get("catalog_tree")
        if tree is None:
            tree = local["catalog_tree"] = BTreeProxy(
                self.store, "catalog", CATALOG_ROOT, tag="catalog")
        return tree

    def _cache(self, node: int) -> dict:
        return self.store.cluster.nodes[node].local.setdefault("proxy_cache", {})

    # -- transactional operations -----------------------------------------
    def get_entry(self, tx: Txn, name: str) -> CatalogEntry:
        raw = self._tree(tx.node).lookup(tx, name.encode())
        return CatalogEntry.decode(name, raw)

    def find(self, tx: Txn, name: str) -> CatalogEntry | None:
        try:
            return self.get_entry(tx, name)
        except NotFound:
            return None

    def register(self, tx: Txn, entry: CatalogEntry) -> None:
        tree = self._tree(tx.node)
        if tree.get(tx, entry.name.encode()) is not None:
            raise NameExists(entry.name)
        tree.insert(tx, entry.name.encode(), entry.encode())

    def _put(self, tx: Txn, entry: CatalogEntry) -> CatalogEntry:
        entry = replace(entry, version=entry.version + 1)
        self._tree(tx.node).insert(tx, entry.name.encode(), entry.encode(), replace=True)
        return entry

    def update_root(self, tx: Txn, name: str, root: FatRef) -> CatalogEntry:
        return self._put(tx, replace(self.get_entry(tx, name), root=root))

    def update_schema_ref(self, tx: Txn, name: str, schema_ref: Addr) -> CatalogEntry:
        return self._put(tx, replace(self.get_entry(tx, name), schema_ref=schema_ref))

    def set_state(self, tx: Txn, name: str, state: EntryState) -> CatalogEntry:
        entry = self.get_entry(tx, name)
        if entry.state == state:
            return entry
        if not (entry.state is EntryState.ACTIVE and state is EntryState.DELETING):
            raise BadTransition(f"{name}: {entry.state.name} -> {state.name}")
        return self._put(tx, replace(entry, state=state))

    def remove(self, tx: Txn, name: str) -> None:
        entry = self.get_entry(tx, name)
        if entry.state is not EntryState.DELETING:
            raise BadTransition(f"{name} must be DELETING before removal")
        self._tree(tx.node).delete(tx, name.encode())

    def list(self, tx: Txn, prefix: str) -> list[CatalogEntry]:
        p = prefix.encode()
        return [
            CatalogEntry.decode(k.decode(), v)
            for k, v in self._tree(tx.node).prefix_scan(tx, p)
        ]

    # -- proxy resolution -------------------------------------------------
    def resolve(self, name: str, node: int | None = None, allow_deleting: bool = False) -> Proxy:
        node = self.store.cluster.cm if node is None else node
        cache = self._cache(node)
        now = self.store.cluster.clock.now()
        cached = cache.get(name)
        if cached is not None and now < cached.expires_at:
            return self._checked(cached.entry, cached.proxy, allow_deleting)
        tx = self.store.create_transaction(read_only=True, node=node)
        try:
            entry = self.get_entry(tx, name)
            if cached is not None and cached.entry == entry:
                cached.expires_at = now + self.ttl
                return self._checked(entry, cached.proxy, allow_deleting)
            tree = None
            if not entry.root.is_null:
                tree = BTreeProxy(self.store, name, entry.root, tag=_owner_tag(name))
                # materialization reads the root node
                self.store.read(tx, entry.root.addr, entry.root.size)
            proxy = Proxy(entry, tree)
        except NotFound:
            cache.pop(name, None)
            raise
        finally:
            self.store.commit(tx)
        cache[name] = ProxyCacheEntry(entry, proxy, now + self.ttl)
        return self._checked(entry, proxy, allow_deleting)

    @staticmethod
    def _checked(entry: CatalogEntry, proxy: Proxy, allow_deleting: bool) -> Proxy:
        if entry.state is EntryState.DELETING and not allow_deleting:
            raise Deleting(f"{entry.name} is being deleted")
        return proxy

    def invalidate(self, name: str | None = None) -> None:
        for n in self.store.cluster.nodes:
            cache = n.local.get("proxy_cache")
            if cache is None:
                continue
            if name is None:
                cache.clear()
            else:
                cache.pop(name, None)


def _owner_tag(name: str) -> str:
    parts = name.split("/")
    return parts[1] if len(parts) > 1 else name
