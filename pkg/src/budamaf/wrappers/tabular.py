"""Tabular wrapper: versioned rows with BEGIN/COMMIT/ABORT.

Transactions buffer their writes and are validated at commit under a
single-writer commit lock: a transaction commits only if every row it read
or wrote still has the version it first observed. Committed transactions
therefore take effect as if run one at a time in commit order.
"""

from __future__ import annotations

import itertools
import uuid
from dataclasses import dataclass, field

from .base import (
    NOT_FOUND,
    TXN_CONFLICT,
    TXN_UNKNOWN,
    UNKNOWN_COLLECTION,
    CapabilitySet,
    Engine,
    NativeError,
    QueryResult,
    UniformQuery,
    Wrapper,
    match_selector,
    parse_document,
)
from .key_value import MISSING_KEY

_DELETED = object()


@dataclass
class Row:
    value: bytes
    version: int

    def columns(self):
        return parse_document(self.value) or {}


@dataclass
class Transaction:
    txn_id: str
    # (table, key) -> version seen when first touched (0 = absent)
    observed: dict = field(default_factory=dict)
    # (table, key) -> bytes or _DELETED, in write order
    writes: dict = field(default_factory=dict)


class TabularEngine(Engine):
    capabilities = CapabilitySet(transactions=True, scan=True, stream=False)

    def __init__(self, instances: int = 1):
        super().__init__(instances)
        self.tables: dict[str, dict[str, Row]] = {}
        self.txns: dict[str, Transaction] = {}
        # (table, key) -> version of the last committed change; deletes bump it
        # too, so a write-then-delete between two reads is still a conflict.
        self.versions: dict[tuple, int] = {}
        self._versions = itertools.count(1)

    # -- committed state -----------------------------------------------------

    def _version(self, table: str, key: str) -> int:
        return self.versions.get((table, key), 0)

    def _apply(self, table: str, key: str, value) -> None:
        rows = self.tables.setdefault(table, {})
        version = self.versions[(table, key)] = next(self._versions)
        if value is _DELETED:
            rows.pop(key, None)
        else:
            rows[key] = Row(value, version)

    # -- transactional view ----------------------------------------------------

    def _txn(self, txn_id: str) -> Transaction:
        txn = self.txns.get(txn_id)
        if txn is None:
            raise NativeError(TXN_UNKNOWN, "unknown transaction")
        return txn

    def _observe(self, txn: Transaction, table: str, key: str) -> None:
        txn.observed.setdefault((table, key), self._version(table, key))

    def _visible(self, txn, table: str, key: str):
        """Value visible to ``txn`` (or committed state), None when absent."""
        if txn is not None:
            self._observe(txn, table, key)
            if (table, key) in txn.writes:
                value = txn.writes[(table, key)]
                return None if value is _DELETED else value
        row = self.tables.get(table, {}).get(key)
        return row.value if row else None

    def _write(self, txn, table: str, key: str, value) -> None:
        if txn is None:
            self._apply(table, key, value)
        else:
            self._observe(txn, table, key)
            txn.writes[(table, key)] = value

    def execute(self, q: UniformQuery) -> QueryResult:
        with self.lock:
            if q.op == "begin":
                txn_id = uuid.uuid4().hex
                self.txns[txn_id] = Transaction(txn_id)
                return QueryResult(True, payload=txn_id.encode("ascii"))
            if q.op == "commit":
                return self._commit(self._txn(q.txn_id))
            if q.op == "abort":
                del self.txns[self._txn(q.txn_id).txn_id]
                return QueryResult(True, count=0)
            txn = self._txn(q.txn_id) if q.txn_id else None
            if q.selector is not None:
                return self._select(q, txn)
            current = self._visible(txn, q.collection, q.key)
            if q.op == "read":
                if current is None:
                    raise NativeError(NOT_FOUND, MISSING_KEY)
                return QueryResult(True, payload=current)
            if q.op == "write":
                self.tables.setdefault(q.collection, {})
                self._write(txn, q.collection, q.key, q.payload)
                return QueryResult(True, count=1)
            if current is None:
                raise NativeError(NOT_FOUND, MISSING_KEY)
            self._write(txn, q.collection, q.key, q.payload if q.op == "update" else _DELETED)
            return QueryResult(True, count=1)

    def _commit(self, txn: Transaction) -> QueryResult:
        del self.txns[txn.txn_id]
        for (table, key), seen in txn.observed.items():
            if self._version(table, key) != seen:
                raise NativeError(TXN_CONFLICT, "transaction conflicts with a committed write")
        for (table, key), value in txn.writes.items():
            self._apply(table, key, value)
        return QueryResult(True, count=len(txn.writes))

    def _select(self, q: UniformQuery, txn) -> QueryResult:
        keys = set(self.tables.get(q.collection, {}))
        if txn is not None:
            keys |= {k for (t, k) in txn.writes if t == q.collection}
        matches = []
        for key in sorted(keys):
            value = self._visible(txn, q.collection, key)
            if value is not None and match_selector(Row(value, 0).columns(), q.selector):
                matches.append((key, value))
        if q.op == "read":
            return QueryResult(True, rows=[{"key": k, "payload": v} for k, v in matches])
        if q.op == "delete":
            for key, _ in matches:
                self._write(txn, q.collection, key, _DELETED)
            return QueryResult(True, count=len(matches))
        raise NativeError("BAD_SELECTOR", f"{q.op} by selector is not supported")

    def items(self, collection: str) -> list:
        with self.lock:
            if collection not in self.tables:
                raise NativeError(UNKNOWN_COLLECTION, "unknown collection")
            return sorted((k, r.value) for k, r in self.tables[collection].items())

    def record_count(self) -> int:
        with self.lock:
            return sum(len(t) for t in self.tables.values())


class TabularWrapper(Wrapper):
    kind = "tabular"
    engine_class = TabularEngine
