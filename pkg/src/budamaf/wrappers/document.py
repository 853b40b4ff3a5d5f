"""Document wrapper: JSON documents with conjunctive equality selectors."""

from __future__ import annotations

from .base import CapabilitySet, NativeError, QueryResult, UniformQuery, Wrapper, match_selector, parse_document
from .key_value import ShardedEngine


class DocumentEngine(ShardedEngine):
    capabilities = CapabilitySet(transactions=False, scan=True, stream=True)

    # Stored form keeps the raw bytes next to the parsed document so reads
    # return exactly what was written.
    def encode(self, payload: bytes):
        return (payload, parse_document(payload))

    def decode(self, stored) -> bytes:
        return stored[0]

    def execute_selector(self, q: UniformQuery) -> QueryResult:
        try:
            shards = self._shards(q.collection)
        except NativeError:
            shards = []
        matches = sorted(
            (k, v) for shard in shards for k, v in shard.items() if match_selector(v[1], q.selector)
        )
        if q.op == "read":
            return QueryResult(True, rows=[{"key": k, "payload": v[0]} for k, v in matches])
        if q.op == "delete":
            for k, _ in matches:
                for shard in shards:
                    shard.pop(k, None)
            return QueryResult(True, count=len(matches))
        raise NativeError("BAD_SELECTOR", f"{q.op} by selector is not supported")


class DocumentWrapper(Wrapper):
    kind = "document"
    engine_class = DocumentEngine
