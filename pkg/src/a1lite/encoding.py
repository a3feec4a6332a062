"""Order-preserving key encoding and the deterministic record encoding.

Keys compare bytewise. Integers are big-endian with the sign bit flipped,
floats use the usual IEEE sign trick, strings are UTF-8 with ``0x00`` escaped
as ``0x00 0xFF`` and terminated by ``0x00 0x01`` so composite keys stay
prefix-free and ordered component by component.
"""
from __future__ import annotations

import base64
import datetime as _dt
import struct

from .store import Addr

_STR_END = b"\x00\x01"


def _enc_str(b: bytes) -> bytes:
    return b.replace(b"\x00", b"\x00\xff") + _STR_END


def key_part(v) -> bytes:
    if isinstance(v, bool):
        return b"\x01" if v else b"\x00"
    if isinstance(v, Addr):
        return v.pack()
    if isinstance(v, int):
        return struct.pack(">Q", (v + (1 << 63)) & 0xFFFFFFFFFFFFFFFF)
    if isinstance(v, float):
        (bits,) = struct.unpack(">Q", struct.pack(">d", v))
        bits = bits ^ 0xFFFFFFFFFFFFFFFF if bits >> 63 else bits | (1 << 63)
        return struct.pack(">Q", bits)
    if isinstance(v, str):
        return _enc_str(v.encode("utf-8"))
    if isinstance(v, (bytes, bytearray)):
        return _enc_str(bytes(v))
    raise TypeError(f"cannot encode {type(v).__name__} as a key")


def encode_key(*parts) -> bytes:
    return b"".join(key_part(p) for p in parts)


def decode_str_part(b: bytes, pos: int = 0) -> tuple[str, int]:
    out = bytearray()
    while True:
        i = b.index(b"\x00", pos)
        out += b[pos:i]
        if b[i + 1] == 0xFF:
            out += b"\x00"
            pos = i + 2
        else:
            return out.decode("utf-8"), i + 2


def decode_int_part(b: bytes, pos: int = 0) -> tuple[int, int]:
    (u,) = struct.unpack_from(">Q", b, pos)
    return u - (1 << 63), pos + 8


# -- record encoding ---------------------------------------------------------

SCALARS = ("INT", "FLOAT", "STRING", "BOOL", "DATE", "BLOB")


def parse_type(t: str) -> tuple[str, str | None]:
    t = t.strip().upper()
    if t.startswith("LIST<") and t.endswith(">"):
        inner = t[5:-1].strip()
        if inner not in SCALARS:
            raise ValueError(f"unsupported list element type {inner}")
        return "LIST", inner
    if t.replace(" ", "") == "MAP<STRING,STRING>":
        return "MAP", None
    if t in SCALARS:
        return t, None
    raise ValueError(f"unsupported field type {t}")


def coerce(kind: str, inner: str | None, v):
    """Normalize a JSON-ish value into the canonical Python value for a type."""
    if kind == "INT":
        if isinstance(v, bool) or not isinstance(v, int):
            raise TypeError("expected INT")
        return v
    if kind == "FLOAT":
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise TypeError("expected FLOAT")
        return float(v)
    if kind == "STRING":
        if not isinstance(v, str):
            raise TypeError("expected STRING")
        return v
    if kind == "BOOL":
        if not isinstance(v, bool):
            raise TypeError("expected BOOL")
        return v
    if kind == "DATE":
        if isinstance(v, _dt.date):
            return v.isoformat()
        _dt.date.fromisoformat(v)
        return v
    if kind == "BLOB":
        if isinstance(v, (bytes, bytearray)):
            return bytes(v)
        return base64.b64decode(v, validate=True)
    if kind == "LIST":
        if not isinstance(v, list):
            raise TypeError("expected LIST")
        return [coerce(inner, None, x) for x in v]
    if kind == "MAP":
        if not isinstance(v, dict) or not all(
            isinstance(k, str) and isinstance(x, str) for k, x in v.items()
        ):
            raise TypeError("expected MAP<string,string>")
        return dict(sorted(v.items()))
    raise TypeError(kind)


def _pack_value(kind: str, inner: str | None, v, out: bytearray) -> None:
    if kind == "INT":
        out += struct.pack(">q", v)
    elif kind == "FLOAT":
        out += struct.pack(">d", v)
    elif kind == "STRING":
        b = v.encode("utf-8")
        out += struct.pack(">I", len(b)) + b
    elif kind == "BOOL":
        out += b"\x01" if v else b"\x00"
    elif kind == "DATE":
        out += struct.pack(">i", _dt.date.fromisoformat(v).toordinal())
    elif kind == "BLOB":
        out += struct.pack(">I", len(v)) + v
    elif kind == "LIST":
        out += struct.pack(">I", len(v))
        for x in v:
            _pack_value(inner, None, x, out)
    elif kind == "MAP":
        out += struct.pack(">I", len(v))
        for k in sorted(v):
            _pack_value("STRING", None, k, out)
            _pack_value("STRING", None, v[k], out)


def _unpack_value(kind: str, inner: str | None, b: bytes, pos: int):
    if kind == "INT":
        return struct.unpack_from(">q", b, pos)[0], pos + 8
    if kind == "FLOAT":
        return struct.unpack_from(">d", b, pos)[0], pos + 8
    if kind in ("STRING", "BLOB"):
        (n,) = struct.unpack_from(">I", b, pos)
        raw = bytes(b[pos + 4:pos + 4 + n])
        return (raw.decode("utf-8") if kind == "STRING" else raw), pos + 4 + n
    if kind == "BOOL":
        return b[pos] == 1, pos + 1
    if kind == "DATE":
        (o,) = struct.unpack_from(">i", b, pos)
        return _dt.date.fromordinal(o).isoformat(), pos + 4
    if kind == "LIST":
        (n,) = struct.unpack_from(">I", b, pos)
        pos += 4
        items = []
        for _ in range(n):
            x, pos = _unpack_value(inner, None, b, pos)
            items.append(x)
        return items, pos
    if kind == "MAP":
        (n,) = struct.unpack_from(">I", b, pos)
        pos += 4
        d = {}
        for _ in range(n):
            k, pos = _unpack_value("STRING", None, b, pos)
            d[k], pos = _unpack_value("STRING", None, b, pos)
        return d, pos
    raise TypeError(kind)


def encode_record(fields, record: dict) -> bytes:
    """``fields``: iterable of (field_id, name, kind, inner) in id order."""
    out = bytearray()
    present = [f for f in fields if record.get(f[1]) is not None]
    out += struct.pack(">H", len(present))
    for fid, name, kind, inner in present:
        out += struct.pack(">H", fid)
        _pack_value(kind, inner, record[name], out)
    return bytes(out)


def decode_record(fields, b: bytes, pos: int = 0) -> dict:
    by_id = {f[0]: f for f in fields}
    (n,) = struct.unpack_from(">H", b, pos)
    pos += 2
    rec = {}
    for _ in range(n):
        (fid,) = struct.unpack_from(">H", b, pos)
        pos += 2
        _, name, kind, inner = by_id[fid]
        rec[name], pos = _unpack_value(kind, inner, b, pos)
    return rec
