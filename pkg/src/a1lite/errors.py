"""Exception hierarchy. Every error carries a stable ``code`` string that the
CLI and the JSON responses surface verbatim."""


class A1Error(Exception):
    code = "ERROR"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.details = details

    def to_dict(self) -> dict:
        out = {"error": self.code, "message": str(self)}
        out.update(self.details)
        return out


def _make(name: str, code: str, base=A1Error):
    return type(name, (base,), {"code": code})


InvalidConfig = _make("InvalidConfig", "INVALID_CONFIG")
NodeUnreachable = _make("NodeUnreachable", "NODE_UNREACHABLE")
StorePaused = _make("StorePaused", "STORE_PAUSED")
InvalidAddr = _make("InvalidAddr", "INVALID_ADDR")
OutOfSpace = _make("OutOfSpace", "OUT_OF_SPACE")
BadSize = _make("BadSize", "BAD_SIZE")
TxnStateError = _make("TxnStateError", "TXN_NOT_ACTIVE")
NotFound = _make("NotFound", "NOT_FOUND")
DuplicateKey = _make("DuplicateKey", "DUPLICATE_KEY")
NameExists = _make("NameExists", "NAME_EXISTS")
Deleting = _make("Deleting", "DELETING")
BadTransition = _make("BadTransition", "BAD_TRANSITION")
SchemaViolation = _make("SchemaViolation", "SCHEMA_VIOLATION")
TypeDeleting = _make("TypeDeleting", "TYPE_DELETING", Deleting)
DuplicateEdge = _make("DuplicateEdge", "DUPLICATE_EDGE")
UnknownKey = _make("UnknownKey", "UNKNOWN_KEY")
UnknownType = _make("UnknownType", "UNKNOWN_TYPE")
UnknownField = _make("UnknownField", "UNKNOWN_FIELD")
FastFailBudget = _make("FastFailBudget", "FAST_FAIL_BUDGET")
SnapshotLost = _make("SnapshotLost", "SNAPSHOT_LOST")
TokenExpired = _make("TokenExpired", "TOKEN_EXPIRED")
TokenInvalid = _make("TokenInvalid", "TOKEN_INVALID")
ClaimLost = _make("ClaimLost", "CLAIM_LOST")
CorruptTable = _make("CorruptTable", "CORRUPT_TABLE")
MissingWatermark = _make("MissingWatermark", "MISSING_WATERMARK")
DurableUnavailable = _make("DurableUnavailable", "DURABLE_UNAVAILABLE")


class ParseError(A1Error):
    code = "PARSE_ERROR"

    def __init__(self, message: str = "", position=None):
        super().__init__(message, position=position)
        self.position = position


class ConflictAbort(A1Error):
    """Raised by helpers that turn ABORTED_CONFLICT into control flow."""

    code = "ABORTED_CONFLICT"
