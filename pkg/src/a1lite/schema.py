"""Type schemas: parsing the JSON definition and validating records."""
from __future__ import annotations

import base64
from dataclasses import dataclass

from .encoding import coerce, decode_record, encode_record, parse_type
from .errors import SchemaViolation, UnknownField

INDEXABLE = ("INT", "FLOAT", "STRING", "BOOL", "DATE")


@dataclass(frozen=True)
class Field:
    id: int
    name: str
    type: str
    kind: str
    inner: str | None = None

    @property
    def spec(self) -> tuple:
        return (self.id, self.name, self.kind, self.inner)


@dataclass(frozen=True)
class Schema:
    name: str
    kind: str
    fields: tuple
    primary_key: str | None = None

    @classmethod
    def from_doc(cls, doc: dict) -> "Schema":
        try:
            name, kind = doc["type"], doc.get("kind", "vertex")
            raw = doc.get("fields", [])
        except (KeyError, TypeError) as exc:
            raise SchemaViolation(f"schema document missing {exc}") from exc
        if kind not in ("vertex", "edge"):
            raise SchemaViolation(f"kind must be vertex or edge, not {kind!r}")
        if not isinstance(name, str) or not name or "/" in name:
            raise SchemaViolation(f"bad type name {name!r}")
        fields, ids, names = [], set(), set()
        for f in raw:
            try:
                fid, fname, ftype = int(f["id"]), f["name"], f["type"]
                k, inner = parse_type(ftype)
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaViolation(f"bad field definition {f!r}: {exc}") from exc
            if fid in ids or fname in names or not 0 <= fid < 1 << 16:
                raise SchemaViolation(f"duplicate or out-of-range field {fname!r}/{fid}")
            ids.add(fid)
            names.add(fname)
            fields.append(Field(fid, fname, ftype.upper().replace(" ", ""), k, inner))
        fields.sort(key=lambda f: f.id)
        pk = doc.get("primary_key")
        if kind == "vertex":
            pkf = next((f for f in fields if f.name == pk), None)
            if pkf is None or pkf.kind not in ("STRING", "INT"):
                raise SchemaViolation("vertex types need a STRING or INT primary_key field")
        elif pk is not None:
            raise SchemaViolation("edge types have no primary key")
        return cls(name, kind, tuple(fields), pk)

    def to_doc(self) -> dict:
        doc = {
            "type": self.name,
            "kind": self.kind,
            "fields": [{"id": f.id, "name": f.name, "type": f.type} for f in self.fields],
        }
        if self.primary_key is not None:
            doc["primary_key"] = self.primary_key
        return doc

    def field(self, name: str) -> Field:
        for f in self.fields:
            if f.name == name:
                return f
        raise UnknownField(f"{self.name} has no field {name!r}")

    @property
    def specs(self) -> list:
        return [f.spec for f in self.fields]

    def normalize(self, attrs: dict | None) -> dict:
        """Validate and coerce a record; absent or None fields are dropped."""
        attrs = attrs or {}
        if not isinstance(attrs, dict):
            raise SchemaViolation("attributes must be an object")
        known = {f.name: f for f in self.fields}
        out = {}
        for k, v in attrs.items():
            f = known.get(k)
            if f is None:
                raise SchemaViolation(f"{self.name} has no field {k!r}")
            if v is None:
                continue
            try:
                out[k] = coerce(f.kind, f.inner, v)
            except (TypeError, ValueError) as exc:
                raise SchemaViolation(f"{self.name}.{k}: {exc}") from exc
        if self.primary_key is not None and out.get(self.primary_key) is None:
            raise SchemaViolation(f"{self.name} requires primary key {self.primary_key!r}")
        return out

    def encode(self, record: dict) -> bytes:
        return encode_record(self.specs, record)

    def decode(self, b: bytes, pos: int = 0) -> dict:
        return decode_record(self.specs, b, pos)

    def coerce_value(self, name: str, v):
        f = self.field(name)
        try:
            return coerce(f.kind, f.inner, v)
        except (TypeError, ValueError) as exc:
            raise SchemaViolation(f"{self.name}.{name}: {exc}") from exc


def json_safe(record: dict) -> dict:
    """Record with BLOBs base64-encoded, suitable for JSON output."""
    out = {}
    for k, v in record.items():
        if isinstance(v, bytes):
            v = base64.b64encode(v).decode("ascii")
        elif isinstance(v, list):
            v = [base64.b64encode(x).decode("ascii") if isinstance(x, bytes) else x for x in v]
        out[k] = v
    return out
