"""B-tree over store objects linked by fat references.

Nodes are fixed-size objects (``NODE_SIZE``). The root never moves: a root
split copies the root's contents into two fresh children and turns the root
into an internal node, so catalog entries keep a stable root reference.

Each proxy caches internal nodes. A cached path is trusted only through the
leaf it reaches: the proxy remembers, per leaf, the ``node_version`` and the
key range observed on the last full walk. Leaves only change range when they
split, and every split bumps their version, so a matching version plus a key
inside the recorded range proves the leaf is the right one. Otherwise the
lookup falls back to a walk from the root.
"""
from __future__ import annotations

import bisect
import struct
import threading
from dataclasses import dataclass, field

from .errors import BadSize, DuplicateKey, InvalidAddr, NotFound
from .store import LOCAL, FatRef, Hint, Store, Txn

NODE_SIZE = 4096
MAX_KEY = 128
MAX_VALUE = 96
FANOUT = 16
LEAF, INTERNAL = 0, 1
_DECODE_CACHE = 8192


@dataclass
class BTreeNode:
    kind: int
    keys: list = field(default_factory=list)
    children: list = field(default_factory=list)
    values: list = field(default_factory=list)
    node_version: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.kind == LEAF

    def encode(self, size: int = NODE_SIZE) -> bytes:
        out = bytearray()
        out += struct.pack(">BH", self.kind, len(self.keys))
        for k in self.keys:
            out += struct.pack(">H", len(k)) + k
        if self.kind == INTERNAL:
            for c in self.children:
                out += c.pack()
        else:
            for v in self.values:
                out += struct.pack(">I", len(v)) + v
        out += struct.pack(">Q", self.node_version)
        if len(out) > size:
            raise BadSize(f"encoded node is {len(out)} bytes, object is {size}")
        out += bytes(size - len(out))
        return bytes(out)

    @classmethod
    def decode(cls, b: bytes) -> "BTreeNode":
        kind, n = struct.unpack_from(">BH", b, 0)
        pos = 3
        keys = []
        for _ in range(n):
            (kl,) = struct.unpack_from(">H", b, pos)
            keys.append(bytes(b[pos + 2:pos + 2 + kl]))
            pos += 2 + kl
        children, values = [], []
        if kind == INTERNAL:
            for _ in range(n + 1):
                children.append(FatRef.unpack(b, pos))
                pos += 12
        else:
            for _ in range(n):
                (vl,) = struct.unpack_from(">I", b, pos)
                values.append(bytes(b[pos + 4:pos + 4 + vl]))
                pos += 4 + vl
        (ver,) = struct.unpack_from(">Q", b, pos)
        return cls(kind, keys, children, values, ver)


def create_tree(store: Store, tx: Txn, name: str = "", hint: Hint = LOCAL,
                tag: str | None = None) -> FatRef:
    """Allocate an empty leaf root and return its reference."""
    buf = store.alloc(tx, NODE_SIZE, hint, tag=tag)
    node = BTreeNode(LEAF, node_version=store.unique())
    buf.write(0, node.encode())
    return buf.ref


class BTreeProxy:
    def __init__(self, store: Store, name: str, root: FatRef, tag: str | None = None,
                 fanout: int = FANOUT, cache: bool = True):
        self.store = store
        self.name = name
        self.root = root
        self.tag = tag
        self.fanout = fanout
        self.caching = cache
        self._internal: dict = {}
        self._leaves: dict = {}
        self._lock = threading.Lock()

    def __repr__(self) -> str:
        return f"BTreeProxy({self.name!r}, root={self.root.addr})"

    # -- node io ----------------------------------------------------------
    def _read(self, tx: Txn, ref: FatRef) -> BTreeNode:
        buf = self.store.read(tx, ref.addr, ref.size)
        if ref.addr in tx.write_set:
            return BTreeNode.decode(buf.data)
        # committed versions are immutable, so decoded nodes can be shared
        cache = self.store.__dict__.setdefault("_btree_decoded", {})
        key = (ref.addr, buf.version)
        node = cache.get(key)
        if node is None:
            if len(cache) >= _DECODE_CACHE:
                cache.clear()
            node = cache[key] = BTreeNode.decode(buf.data)
        return BTreeNode(node.kind, list(node.keys), list(node.children),
                         list(node.values), node.node_version)

    def _write(self, tx: Txn, ref: FatRef, node: BTreeNode) -> None:
        node.node_version = self.store.unique()
        buf = self.store.read(tx, ref.addr, ref.size)
        wbuf = self.store.open_for_write(tx, buf)
        wbuf.write(0, node.encode(ref.size))

    def _alloc(self, tx: Txn, node: BTreeNode, near) -> FatRef:
        buf = self.store.alloc(tx, NODE_SIZE, Hint.near(near), tag=self.tag)
        node.node_version = self.store.unique()
        buf.write(0, node.encode())
        return buf.ref

    @staticmethod
    def _check_kv(key: bytes, value: bytes | None = None) -> None:
        if not key:
            raise BadSize("empty key")
        if len(key) > MAX_KEY:
            raise BadSize(f"key of {len(key)} bytes exceeds {MAX_KEY}")
        if value is not None and len(value) > MAX_VALUE:
            raise BadSize(f"value of {len(value)} bytes exceeds {MAX_VALUE}")

    # -- walks ------------------------------------------------------------
    def _walk(self, tx: Txn, key: bytes):
        """Full walk from the root. Returns (path, leaf_ref, leaf, lo, hi)
        where path holds (ref, node, child_index) for each internal level."""
        path = []
        ref = self.root
        node = self._read(tx, ref)
        lo, hi = None, None
        while not node.is_leaf:
            i = bisect.bisect_right(node.keys, key)
            if i > 0:
                lo = node.keys[i - 1]
            if i < len(node.keys):
                hi = node.keys[i]
            path.append((ref, node, i))
            self._remember_internal(tx, ref, node)
            ref = node.children[i]
            node = self._read(tx, ref)
        self._remember_leaf(tx, ref, node, lo, hi)
        return path, ref, node, lo, hi

    def _remember_internal(self, tx: Txn, ref: FatRef, node: BTreeNode) -> None:
        if self.caching and ref.addr not in tx.write_set:
            with self._lock:
                self._internal[ref.addr] = node

    def _remember_leaf(self, tx, ref, node, lo, hi) -> None:
        if self.caching and ref.addr not in tx.write_set:
            with self._lock:
                self._leaves[ref.addr] = (node.node_version, lo, hi)

    def _warm_leaf(self, tx: Txn, key: bytes):
        """Descend through cached internal nodes; return the leaf if the
        cache can vouch for it, else None."""
        with self._lock:
            node = self._internal.get(self.root.addr)
            if node is None:
                return None
            ref = self.root
            while node is not None and not node.is_leaf:
                ref = node.children[bisect.bisect_right(node.keys, key)]
                node = self._internal.get(ref.addr)
            info = self._leaves.get(ref.addr)
        if info is None:
            return None
        try:
            leaf = self._read(tx, ref)
        except InvalidAddr:
            return None
        ver, lo, hi = info
        if (leaf.is_leaf and leaf.node_version == ver
                and (lo is None or key >= lo) and (hi is None or key < hi)):
            return leaf
        return None

    def invalidate(self) -> None:
        with self._lock:
            self._internal.clear()
            self._leaves.clear()

    # -- operations -------------------------------------------------------
    def lookup(self, tx: Txn, key: bytes) -> bytes:
        leaf = self._warm_leaf(tx, key) if self.caching else None
        if leaf is None:
            _, _, leaf, _, _ = self._walk(tx, key)
        i = bisect.bisect_left(leaf.keys, key)
        if i < len(leaf.keys) and leaf.keys[i] == key:
            return leaf.values[i]
        raise NotFound(f"key not in {self.name}")

    def get(self, tx: Txn, key: bytes, default=None):
        try:
            return self.lookup(tx, key)
        except NotFound:
            return default

    def insert(self, tx: Txn, key: bytes, value: bytes, replace: bool = False) -> None:
        self._check_kv(key, value)
        path, ref, leaf, _, _ = self._walk(tx, key)
        i = bisect.bisect_left(leaf.keys, key)
        if i < len(leaf.keys) and leaf.keys[i] == key:
            if not replace:
                raise DuplicateKey(f"key already present in {self.name}")
            leaf.values[i] = value
            self._write(tx, ref, leaf)
            return
        leaf.keys.insert(i, key)
        leaf.values.insert(i, value)
        if len(leaf.keys) <= self.fanout:
            self._write(tx, ref, leaf)
            return
        self._split(tx, path, ref, leaf)

    def _split(self, tx: Txn, path: list, ref: FatRef, node: BTreeNode) -> None:
        while True:
            if node.is_leaf:
                mid = len(node.keys) // 2
                sep = node.keys[mid]
                left = BTreeNode(LEAF, node.keys[:mid], values=node.values[:mid])
                right = BTreeNode(LEAF, node.keys[mid:], values=node.values[mid:])
            else:
                mid = len(node.keys) // 2
                sep = node.keys[mid]
                left = BTreeNode(INTERNAL, node.keys[:mid], node.children[:mid + 1])
                right = BTreeNode(INTERNAL, node.keys[mid + 1:], node.children[mid + 1:])
            if not path:
                # root split in place keeps the root address stable
                lref = self._alloc(tx, left, ref.addr)
                rref = self._alloc(tx, right, ref.addr)
                self._write(tx, ref, BTreeNode(INTERNAL, [sep], [lref, rref]))
                return
            pref, parent, idx = path.pop()
            self._write(tx, ref, left)
            rref = self._alloc(tx, right, pref.addr)
            parent.keys.insert(idx, sep)
            parent.children.insert(idx + 1, rref)
            if len(parent.children) <= self.fanout:
                self._write(tx, pref, parent)
                return
            ref, node = pref, parent

    def delete(self, tx: Txn, key: bytes) -> None:
        _, ref, leaf, _, _ = self._walk(tx, key)
        i = bisect.bisect_left(leaf.keys, key)
        if i >= len(leaf.keys) or leaf.keys[i] != key:
            raise NotFound(f"key not in {self.name}")
        del leaf.keys[i]
        del leaf.values[i]
        self._write(tx, ref, leaf)

    def range_scan(self, tx: Txn, lo: bytes | None = None, hi: bytes | None = None,
                   limit: int | None = None):
        """Yield (key, value) for lo <= key < hi in key order."""
        if lo is not None and hi is not None and lo > hi:
            raise ValueError("lo must not exceed hi")
        count = 0
        stack = [self.root]
        while stack:
            ref = stack.pop()
            node = self._read(tx, ref)
            if node.is_leaf:
                start = 0 if lo is None else bisect.bisect_left(node.keys, lo)
                for k, v in zip(node.keys[start:], node.values[start:]):
                    if hi is not None and k >= hi:
                        return
                    yield k, v
                    count += 1
                    if limit is not None and count >= limit:
                        return
                continue
            first = 0 if lo is None else bisect.bisect_right(node.keys, lo)
            last = len(node.children) - 1
            if hi is not None:
                last = bisect.bisect_left(node.keys, hi)
            stack.extend(reversed(node.children[first:last + 1]))

    def prefix_scan(self, tx: Txn, prefix: bytes, limit: int | None = None):
        return self.range_scan(tx, prefix, _prefix_end(prefix), limit)

    def nodes(self, tx: Txn):
        """Yield (ref, node) for every node, depth first."""
        stack = [self.root]
        while stack:
            ref = stack.pop()
            node = self._read(tx, ref)
            yield ref, node
            if not node.is_leaf:
                stack.extend(node.children)

    def height(self, tx: Txn) -> int:
        h, node = 1, self._read(tx, self.root)
        while not node.is_leaf:
            node = self._read(tx, node.children[0])
            h += 1
        return h

    def drop(self, tx: Txn) -> int:
        """Free every node including the root; returns the count freed."""
        refs = [ref for ref, _ in self.nodes(tx)]
        for ref in refs:
            self.store.free(tx, ref.addr)
        self.invalidate()
        return len(refs)


def _prefix_end(prefix: bytes) -> bytes | None:
    b = bytearray(prefix)
    while b:
        if b[-1] < 0xFF:
            b[-1] += 1
            return bytes(b)
        b.pop()
    return None
