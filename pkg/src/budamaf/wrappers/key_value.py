"""Key-value wrapper: a hash-partitioned byte map."""

from __future__ import annotations

from .base import (
    NOT_FOUND,
    UNKNOWN_COLLECTION,
    CapabilitySet,
    Engine,
    NativeError,
    QueryResult,
    UniformQuery,
    Wrapper,
    shard_of,
)

MISSING_KEY = "key not found"


class ShardedEngine(Engine):
    """Collections split across ``instances`` hash partitions."""

    def __init__(self, instances: int = 1):
        super().__init__(instances)
        self.collections: dict[str, list[dict]] = {}

    def _shards(self, collection: str, create: bool = False) -> list:
        shards = self.collections.get(collection)
        if shards is None:
            if not create:
                raise NativeError(UNKNOWN_COLLECTION, "unknown collection")
            shards = self.collections[collection] = [{} for _ in range(self.instances)]
        return shards

    def _shard(self, collection: str, key: str, create: bool = False) -> dict:
        shards = self._shards(collection, create)
        return shards[shard_of(key, len(shards))]

    def encode(self, payload: bytes):
        return payload

    def decode(self, stored) -> bytes:
        return stored

    def get(self, collection: str, key: str) -> bytes:
        try:
            shard = self._shard(collection, key)
        except NativeError:
            raise NativeError(NOT_FOUND, MISSING_KEY) from None
        if key not in shard:
            raise NativeError(NOT_FOUND, MISSING_KEY)
        return self.decode(shard[key])

    def execute(self, q: UniformQuery) -> QueryResult:
        with self.lock:
            if q.selector is not None:
                return self.execute_selector(q)
            if q.op == "read":
                return QueryResult(True, payload=self.get(q.collection, q.key))
            if q.op == "write":
                self._shard(q.collection, q.key, create=True)[q.key] = self.encode(q.payload)
                return QueryResult(True, count=1)
            try:
                shard = self._shard(q.collection, q.key)
            except NativeError:
                raise NativeError(NOT_FOUND, MISSING_KEY) from None
            if q.key not in shard:
                raise NativeError(NOT_FOUND, MISSING_KEY)
            if q.op == "update":
                shard[q.key] = self.encode(q.payload)
            else:
                del shard[q.key]
            return QueryResult(True, count=1)

    def execute_selector(self, q: UniformQuery) -> QueryResult:
        raise NativeError("BAD_SELECTOR", "selectors are not supported")

    def items(self, collection: str) -> list:
        with self.lock:
            shards = self._shards(collection)
            return sorted((k, self.decode(v)) for shard in shards for k, v in shard.items())

    def record_count(self) -> int:
        with self.lock:
            return sum(len(s) for shards in self.collections.values() for s in shards)

    def resize(self, instances: int) -> None:
        """Repartition every collection over ``instances`` shards."""
        with self.lock:
            super().resize(instances)
            for name, shards in self.collections.items():
                fresh = [{} for _ in range(self.instances)]
                for shard in shards:
                    for k, v in shard.items():
                        fresh[shard_of(k, self.instances)][k] = v
                self.collections[name] = fresh


class KeyValueEngine(ShardedEngine):
    capabilities = CapabilitySet(transactions=False, scan=False, stream=True)


class KeyValueWrapper(Wrapper):
    kind = "key_value"
    engine_class = KeyValueEngine
