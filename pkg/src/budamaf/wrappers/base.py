"""Wrapper wire types and the shared request pipeline.

A wrapper fronts one kind of native engine. Requests pass through a bounded
queue (observable as ``queue_depth``), can be stalled for fault injection,
and every native failure is normalized to a :class:`WrapperResponse` error
code; raw engine messages never leave the wrapper.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Optional

from ..enforcement import FLAG_ENCRYPTED, body_of, flags_of, is_enforced
from ..protocol import b64decode, b64encode

logger = logging.getLogger(__name__)

KINDS = ("key_value", "document", "tabular")
DATA_OPS = ("read", "write", "update", "delete")
TXN_OPS = ("begin", "commit", "abort")

# Normalized error codes.
NOT_FOUND = "NOT_FOUND"
BAD_SELECTOR = "BAD_SELECTOR"
BAD_REQUEST = "BAD_REQUEST"
TXN_UNKNOWN = "TXN_UNKNOWN"
TXN_CONFLICT = "TXN_CONFLICT"
DEADLINE_EXCEEDED = "DEADLINE_EXCEEDED"
QUEUE_FULL = "QUEUE_FULL"
UNKNOWN_STORE = "UNKNOWN_STORE"
UNKNOWN_COLLECTION = "UNKNOWN_COLLECTION"
CAPABILITY_MISSING = "CAPABILITY_MISSING"
UNENFORCED = "UNENFORCED"
INTERNAL = "INTERNAL"

ERROR_CODES = frozenset({
    NOT_FOUND, BAD_SELECTOR, BAD_REQUEST, TXN_UNKNOWN, TXN_CONFLICT, DEADLINE_EXCEEDED,
    QUEUE_FULL, UNKNOWN_STORE, UNKNOWN_COLLECTION, CAPABILITY_MISSING, UNENFORCED, INTERNAL,
})


class NativeError(Exception):
    """Raised by engines with a normalized code."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


def digest_hex(value: bytes) -> str:
    return hashlib.sha256(value).hexdigest()


def shard_of(key: str, shards: int) -> int:
    return zlib.crc32(key.encode("utf-8")) % shards


@dataclass(frozen=True)
class CapabilitySet:
    transactions: bool = False
    scan: bool = False
    stream: bool = False

    def to_dict(self) -> dict:
        return {"transactions": self.transactions, "scan": self.scan, "stream": self.stream}

    @classmethod
    def from_dict(cls, doc: dict) -> "CapabilitySet":
        return cls(bool(doc.get("transactions")), bool(doc.get("scan")), bool(doc.get("stream")))


@dataclass(frozen=True)
class UniformQuery:
    op: str
    store_id: str
    collection: str = "default"
    key: Optional[str] = None
    selector: Optional[dict] = None
    payload: Optional[bytes] = None
    txn_id: Optional[str] = None

    def __post_init__(self):
        if self.op not in DATA_OPS + TXN_OPS:
            raise ValueError(f"unknown op {self.op!r}")
        if self.op in DATA_OPS:
            if (self.key is None) == (self.selector is None):
                raise ValueError("exactly one of key and selector is required")
            if (self.payload is not None) != (self.op in ("write", "update")):
                raise ValueError("payload is required for write/update and only for them")
        elif self.op in ("commit", "abort") and not self.txn_id:
            raise ValueError(f"{self.op} needs a txn_id")

    def to_dict(self) -> dict:
        doc = {"op": self.op, "store_id": self.store_id, "collection": self.collection}
        if self.key is not None:
            doc["key"] = self.key
        if self.selector is not None:
            doc["selector"] = self.selector
        if self.payload is not None:
            doc["payload_b64"] = b64encode(self.payload)
        if self.txn_id is not None:
            doc["txn_id"] = self.txn_id
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "UniformQuery":
        payload = doc.get("payload_b64")
        return cls(
            op=doc["op"],
            store_id=doc["store_id"],
            collection=doc.get("collection", "default"),
            key=doc.get("key"),
            selector=doc.get("selector"),
            payload=b64decode(payload) if payload is not None else None,
            txn_id=doc.get("txn_id"),
        )


@dataclass(frozen=True)
class QueryResult:
    """Normalized outcome of one query: exactly one of the four is set."""

    ok: bool
    payload: Optional[bytes] = None
    rows: Optional[list] = None
    count: Optional[int] = None
    error: Optional[dict] = None

    def __post_init__(self):
        present = sum(x is not None for x in (self.payload, self.rows, self.count, self.error))
        if present != 1:
            raise ValueError("exactly one of payload/rows/count/error must be present")
        if self.ok == (self.error is not None):
            raise ValueError("error is present iff ok is false")

    @classmethod
    def failure(cls, code: str, message: str = "") -> "QueryResult":
        return cls(False, error={"code": code, "message": message or code})

    @property
    def error_code(self) -> Optional[str]:
        return self.error["code"] if self.error else None

    def to_dict(self) -> dict:
        doc = {"ok": self.ok}
        if self.payload is not None:
            doc["payload_b64"] = b64encode(self.payload)
        if self.rows is not None:
            doc["rows"] = [{"key": r["key"], "payload_b64": b64encode(r["payload"])} for r in self.rows]
        if self.count is not None:
            doc["count"] = self.count
        if self.error is not None:
            doc["error"] = dict(self.error)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "QueryResult":
        rows = doc.get("rows")
        return cls(
            ok=doc["ok"],
            payload=b64decode(doc["payload_b64"]) if "payload_b64" in doc else None,
            rows=[{"key": r["key"], "payload": b64decode(r["payload_b64"])} for r in rows] if rows is not None else None,
            count=doc.get("count"),
            error=doc.get("error"),
        )


_request_ids = itertools.count(1)


@dataclass(frozen=True)
class WrapperRequest:
    query: UniformQuery
    request_id: str = field(default_factory=lambda: f"r{next(_request_ids)}")
    deadline: float = 5.0

    def to_dict(self) -> dict:
        return {"request_id": self.request_id, "query": self.query.to_dict(), "deadline": self.deadline}

    @classmethod
    def from_dict(cls, doc: dict) -> "WrapperRequest":
        return cls(UniformQuery.from_dict(doc["query"]), doc["request_id"], float(doc.get("deadline", 5.0)))


@dataclass(frozen=True)
class WrapperResponse:
    request_id: str
    result: QueryResult

    @property
    def ok(self) -> bool:
        return self.result.ok

    def to_dict(self) -> dict:
        return {"request_id": self.request_id, **self.result.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "WrapperResponse":
        body = {k: v for k, v in doc.items() if k != "request_id"}
        return cls(doc["request_id"], QueryResult.from_dict(body))


def parse_document(raw: bytes):
    """The JSON object stored in ``raw``, or None when it is opaque bytes.

    Enveloped payloads are parsed from their body unless it is encrypted.
    """
    if is_enforced(raw):
        if flags_of(raw) & FLAG_ENCRYPTED:
            return None
        raw = body_of(raw)
    try:
        doc = json.loads(bytes(raw).decode("utf-8"))
    except (UnicodeDecodeError, ValueError):
        return None
    return doc if isinstance(doc, dict) else None


def match_selector(doc, selector: dict) -> bool:
    """Conjunctive equality on top-level fields."""
    return isinstance(doc, dict) and all(k in doc and doc[k] == v for k, v in selector.items())


def check_selector(selector) -> None:
    if not isinstance(selector, dict) or not selector:
        raise NativeError(BAD_SELECTOR, "selector must be a non-empty object")
    for k in selector:
        if not isinstance(k, str) or k.startswith("$"):
            raise NativeError(BAD_SELECTOR, "only top-level equality predicates are supported")


class Engine:
    """One native data store: named collections of key -> bytes."""

    capabilities = CapabilitySet()

    def __init__(self, instances: int = 1):
        self.instances = max(1, instances)
        self.lock = threading.RLock()

    def execute(self, q: UniformQuery) -> QueryResult:
        raise NotImplementedError

    def items(self, collection: str) -> list:
        """Sorted ``(key, value)`` pairs; raises UNKNOWN_COLLECTION."""
        raise NotImplementedError

    def record_count(self) -> int:
        raise NotImplementedError

    def resize(self, instances: int) -> None:
        self.instances = max(1, instances)


class Backend:
    """Engines of one kind, by store id. Shared by every local wrapper of that kind."""

    def __init__(self, engine_factory, autocreate: bool = False):
        self.engine_factory = engine_factory
        self.autocreate = autocreate
        self.engines: dict[str, Engine] = {}
        self._lock = threading.Lock()

    def get(self, store_id: str, create: bool = False) -> Engine:
        with self._lock:
            engine = self.engines.get(store_id)
            if engine is None:
                if not (create and self.autocreate):
                    raise NativeError(UNKNOWN_STORE, "store not provisioned on this wrapper")
                engine = self.engines[store_id] = self.engine_factory(1)
            return engine

    def provision(self, store_id: str, instances: int = 1) -> None:
        with self._lock:
            if store_id not in self.engines:
                self.engines[store_id] = self.engine_factory(instances)

    def drop(self, store_id: str) -> None:
        with self._lock:
            self.engines.pop(store_id, None)

    def record_count(self) -> int:
        with self._lock:
            engines = list(self.engines.values())
        return sum(e.record_count() for e in engines)


class Wrapper:
    """Request pipeline shared by all wrapper kinds."""

    kind = ""
    engine_class = Engine

    def __init__(self, wrapper_id: Optional[str] = None, backend: Optional[Backend] = None,
                 max_queue: int = 1024, require_envelope: bool = False, autocreate: bool = False):
        self.wrapper_id = wrapper_id or f"{self.kind}-wrapper"
        self.backend = backend or Backend(self.engine_class, autocreate=autocreate)
        self.max_queue = max_queue
        self.require_envelope = require_envelope
        self.handled = 0
        self._queued = 0
        self._stalled = False
        self._cond = threading.Condition()

    # -- fault injection ---------------------------------------------------

    def stall(self) -> None:
        with self._cond:
            self._stalled = True

    def drain(self) -> None:
        with self._cond:
            self._stalled = False
            self._cond.notify_all()

    # -- wire operations ---------------------------------------------------

    def capabilities(self) -> CapabilitySet:
        return self.engine_class.capabilities

    def health(self) -> dict:
        with self._cond:
            depth = self._queued
        return {
            "status": "stalled" if self._stalled else "ok",
            "stored_records": self.backend.record_count(),
            "queue_depth": depth,
        }

    def handle(self, req: WrapperRequest) -> WrapperResponse:
        enqueued = time.monotonic()
        with self._cond:
            if self._queued >= self.max_queue:
                return WrapperResponse(req.request_id, QueryResult.failure(QUEUE_FULL, "wrapper queue is full"))
            self._queued += 1
            try:
                while self._stalled:
                    self._cond.wait()
            finally:
                self._queued -= 1
            self.handled += 1
        if time.monotonic() - enqueued > req.deadline:
            return WrapperResponse(req.request_id, QueryResult.failure(DEADLINE_EXCEEDED, "request waited past its deadline"))
        return WrapperResponse(req.request_id, self._run(req.query))

    def _run(self, q: UniformQuery) -> QueryResult:
        try:
            if q.txn_id is not None or q.op in TXN_OPS:
                if not self.capabilities().transactions:
                    raise NativeError(CAPABILITY_MISSING, f"{self.kind} stores do not support transactions")
            if self.require_envelope and q.payload is not None and not is_enforced(q.payload):
                raise NativeError(UNENFORCED, "payload did not pass protocol enforcement")
            if q.selector is not None:
                if not self.capabilities().scan:
                    raise NativeError(BAD_SELECTOR, f"{self.kind} stores do not support selectors")
                check_selector(q.selector)
            engine = self.backend.get(q.store_id, create=q.op in ("write", "begin"))
            return engine.execute(q)
        except NativeError as exc:
            return QueryResult.failure(exc.code, str(exc))
        except Exception:  # native faults must not leak upward
            logger.exception("wrapper %s: native failure", self.wrapper_id)
            return QueryResult.failure(INTERNAL, "native engine failure")

    def snapshot(self, store_id: str, collection: str) -> Iterator[tuple]:
        """Point-in-time ``(key, value, digest)`` stream ordered by key.

        The entries are copied when this is called, so writes made while the
        caller iterates never appear.
        """
        entries = self.backend.get(store_id).items(collection)
        return iter([(k, v, digest_hex(v)) for k, v in entries])

    # -- provisioning (in-process only) --------------------------------------

    def provision(self, store_id: str, instances: int = 1) -> None:
        self.backend.provision(store_id, instances)

    def resize(self, store_id: str, instances: int) -> None:
        self.backend.get(store_id).resize(instances)

    def drop(self, store_id: str) -> None:
        self.backend.drop(store_id)
