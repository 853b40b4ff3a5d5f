"""Off-loading APIs: uniform data access, store lifecycle and federation data jobs.

Stores are addressed by a logical ``store_id``; each is pinned to a wrapper
pool (wrappers that front the same native engines) under a physical id that
changes when the store is relocated. A ``(store_id, collection)`` pair is a
*location*; cutover after a migration re-points a location at its new home.
"""

from __future__ import annotations

import collections
import dataclasses
import itertools
import logging
import math
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from . import enforcement
from .errors import (
    AccessDenied,
    BudamafError,
    CapabilityMissing,
    CapacityExceeded,
    DuplicateId,
    LinkExists,
    MigrationFailed,
    NoFeasiblePlacement,
    NoRemedy,
    NoWrapperForKind,
    SchemaViolation,
    StoreNotFound,
    StoreNotReady,
    TransformFailure,
    UnknownDataset,
    Unreachable,
    VerificationFailed,
    WrapperError,
)
from .federation import Federation, PlacementRequest, choose_placement
from .protocol import Credentials, JobKind, b64encode, payload_of
from .security import AccessDecision, ProtocolSet, SecurityEngine, classify
from .wrappers.base import (
    CAPABILITY_MISSING,
    TXN_OPS,
    UNKNOWN_COLLECTION,
    CapabilitySet,
    NativeError,
    QueryResult,
    UniformQuery,
    WrapperRequest,
)

logger = logging.getLogger(__name__)

Q_HIGH = 64
OBSERVATION_WINDOW_S = 2.0
WRITE_QUEUE_BOUND = 256
REPLICATION_BATCH = 256

STATES = ("creating", "ready", "scaling", "relocating", "destroyed")


def loc(doc) -> tuple:
    """Location tuple from ``{"store_id", "collection"}`` or a tuple."""
    if isinstance(doc, dict):
        return (doc["store_id"], doc.get("collection", "default"))
    return (doc[0], doc[1] if len(doc) > 1 else "default")


@dataclass(frozen=True)
class WrapperRegistration:
    wrapper_id: str
    kind: str
    endpoint: str
    capabilities: CapabilitySet = CapabilitySet()
    pool: str = ""

    def to_dict(self) -> dict:
        return {"wrapper_id": self.wrapper_id, "kind": self.kind, "endpoint": self.endpoint,
                "capabilities": self.capabilities.to_dict(), "pool": self.pool or self.wrapper_id}


@dataclass
class DataStoreDescriptor:
    store_id: str
    kind: str
    provider_id: str
    access_point: str
    instances: list
    state: str = "creating"
    acid: bool = False
    pool: str = ""
    physical_id: str = ""
    collections: set = field(default_factory=set)

    def to_dict(self) -> dict:
        return {
            "store_id": self.store_id,
            "kind": self.kind,
            "provider_id": self.provider_id,
            "access_point": self.access_point,
            "instances": [m.to_dict() for m in self.instances],
            "state": self.state,
            "acid": self.acid,
            "collections": sorted(self.collections),
        }


@dataclass
class ReplicationLink:
    link_id: str
    source: tuple
    dest: tuple
    mode: str
    last_seq: int = 0
    job_id: Optional[str] = None

    def to_dict(self) -> dict:
        return {"link_id": self.link_id, "source": list(self.source), "dest": list(self.dest),
                "mode": self.mode, "last_seq": self.last_seq}


@dataclass(frozen=True)
class OffloadPlan:
    store_id: str
    trigger: int
    action: str                      # redirect | scale | none
    target: dict = field(default_factory=dict)
    created_at: float = 0.0

    def to_dict(self) -> dict:
        return {"store_id": self.store_id, "trigger": self.trigger, "action": self.action,
                "target": self.target, "created_at": self.created_at}


@dataclass(frozen=True)
class MigrationReport:
    source: tuple
    dest: tuple
    records: int
    bytes: int
    duration_s: float
    epochs_reapplied: int
    fenced_writes: int

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["source"], d["dest"] = list(self.source), list(self.dest)
        return d


@dataclass(frozen=True)
class Change:
    epoch: int
    seq: int
    op: str            # write | delete
    key: str
    value: Optional[bytes] = None


@dataclass
class _Fence:
    epoch: int
    captured: list = field(default_factory=list)
    closing: bool = False


class OffloadingAPIs:
    def __init__(
        self,
        federation: Federation,
        security: SecurityEngine,
        q_high: int = Q_HIGH,
        write_queue_bound: int = WRITE_QUEUE_BOUND,
        replication_batch: int = REPLICATION_BATCH,
        deadline: float = 5.0,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.federation = federation
        self.security = security
        self.q_high = q_high
        self.write_queue_bound = write_queue_bound
        self.replication_batch = replication_batch
        self.deadline = deadline
        self.clock = clock

        self.registrations: dict[str, WrapperRegistration] = {}
        self.clients: dict[str, object] = {}
        self.request_counts: collections.Counter = collections.Counter()
        self.reads_by_store: collections.Counter = collections.Counter()
        self.catalog: dict[str, DataStoreDescriptor] = {}
        self.routes: dict[tuple, tuple] = {}
        self.read_redirects: dict[tuple, tuple] = {}
        self.links: dict[str, ReplicationLink] = {}
        self.plans: list[OffloadPlan] = []

        self._changelog: dict[tuple, list] = collections.defaultdict(list)
        self._seq = itertools.count(1)
        self._epochs: collections.Counter = collections.Counter()
        self._fences: dict[tuple, _Fence] = {}
        self._applied: dict[tuple, tuple] = {}   # (dest loc, key) -> (epoch, seq)
        self._txn_changes: dict[str, list] = {}
        self._inflight: collections.Counter = collections.Counter()
        self._inflight_writes: collections.Counter = collections.Counter()   # by location
        self._observed_depth: dict[str, int] = {}
        self._cursors: dict[str, itertools.count] = collections.defaultdict(itertools.count)
        self._pool_cursor = itertools.count()
        self._leases: dict[str, threading.Lock] = collections.defaultdict(threading.Lock)
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._waiting_writes = 0

    # -- wrappers ------------------------------------------------------------

    def register_wrapper(self, reg: WrapperRegistration, client) -> str:
        """Add a wrapper after probing it; ``client`` speaks the wrapper protocol."""
        with self._lock:
            if reg.wrapper_id in self.registrations:
                raise DuplicateId(f"wrapper {reg.wrapper_id} already registered")
        try:
            client.health()
            caps = client.capabilities()
        except Exception as exc:
            raise Unreachable(f"wrapper {reg.wrapper_id} at {reg.endpoint} did not answer: {exc}") from None
        reg = dataclasses.replace(reg, capabilities=caps, pool=reg.pool or reg.wrapper_id)
        with self._lock:
            self.registrations[reg.wrapper_id] = reg
            self.clients[reg.wrapper_id] = client
        return reg.wrapper_id

    def _pool_members(self, pool: str) -> list:
        return sorted(w for w, r in self.registrations.items() if r.pool == pool)

    def _pools_for(self, kind: str) -> list:
        return sorted({r.pool for r in self.registrations.values() if r.kind == kind})

    def _pick_wrapper(self, desc: DataStoreDescriptor) -> str:
        with self._lock:
            members = self._pool_members(desc.pool)
            if not members:
                raise NoWrapperForKind(f"no wrapper serves pool {desc.pool}")
            wrapper_id = members[next(self._cursors[desc.pool]) % len(members)]
            self.request_counts[wrapper_id] += 1
            return wrapper_id

    def _capabilities(self, pool: str) -> CapabilitySet:
        members = self._pool_members(pool)
        return self.registrations[members[0]].capabilities if members else CapabilitySet()

    # -- catalog ---------------------------------------------------------------

    def store(self, store_id: str) -> DataStoreDescriptor:
        desc = self.catalog.get(store_id)
        if desc is None or desc.state == "destroyed":
            raise StoreNotFound(store_id)
        return desc

    def list_stores(self) -> list:
        with self._lock:
            return [d.to_dict() for _, d in sorted(self.catalog.items())]

    def resolve(self, location: tuple) -> tuple:
        seen = set()
        while location in self.routes and location not in seen:
            seen.add(location)
            location = self.routes[location]
        return location

    # -- dispatch --------------------------------------------------------------

    def _send(self, desc: DataStoreDescriptor, q: UniformQuery) -> QueryResult:
        """Forward one query to a wrapper of the store's pool, no routing."""
        wrapper_id = self._pick_wrapper(desc)
        client = self.clients[wrapper_id]
        physical = dataclasses.replace(q, store_id=desc.physical_id)
        req = WrapperRequest(physical, deadline=self.deadline)
        try:
            resp = client.handle(req)
        except Exception as exc:
            raise WrapperError(f"wrapper {wrapper_id} failed: {exc}", "UNREACHABLE") from None
        if resp.request_id != req.request_id:
            raise WrapperError(f"wrapper {wrapper_id} answered another request", "BAD_RESPONSE")
        return resp.result

    def _writable(self, desc: DataStoreDescriptor, location: tuple) -> bool:
        """True when a write may go ahead now; False after waiting (caller re-routes).

        Caller holds self._cond.
        """
        if desc.state == "destroyed":
            raise StoreNotFound(desc.store_id)
        fence = self._fences.get(location)
        if desc.state in ("scaling", "relocating") or (fence is not None and fence.closing):
            if self._waiting_writes >= self.write_queue_bound:
                raise StoreNotReady(f"{desc.store_id} is {desc.state}; write queue is full")
            self._waiting_writes += 1
            try:
                self._cond.wait()
            finally:
                self._waiting_writes -= 1
            return False
        if desc.state != "ready":
            raise StoreNotReady(f"{desc.store_id} is {desc.state}")
        return True

    def dispatch(self, q: UniformQuery) -> QueryResult:
        """Route a uniform query to its store and return the normalized result."""
        mutating = q.op in ("write", "update", "delete") or q.op in TXN_OPS
        with self._cond:
            while True:
                # routes may change while a write waits, so resolve on every pass
                location = self.resolve((q.store_id, q.collection))
                if q.op == "read" and location in self.read_redirects:
                    location = self.resolve(self.read_redirects[location])
                desc = self.store(location[0])
                if not mutating or self._writable(desc, location):
                    break
            if not mutating and desc.state not in ("ready", "scaling", "relocating"):
                raise StoreNotReady(f"{desc.store_id} is {desc.state}")
            if (q.txn_id is not None or q.op in TXN_OPS) and not desc.acid:
                raise CapabilityMissing(f"{desc.kind} stores do not provide transactions")
            self._inflight[desc.store_id] += 1
            if mutating:
                self._inflight_writes[location] += 1
        q = dataclasses.replace(q, store_id=location[0], collection=location[1])
        try:
            result = self._send(desc, q)
            if result.ok:
                self._after(desc, location, q, result)
        finally:
            with self._cond:
                self._inflight[desc.store_id] -= 1
                if mutating:
                    self._inflight_writes[location] -= 1
                    self._cond.notify_all()
        if result.error_code == CAPABILITY_MISSING:
            raise CapabilityMissing(result.error["message"])
        return result

    def _drain_writes(self, store_id: str, collection: Optional[str] = None) -> None:
        """Wait for writes admitted before a state change to land (caller holds _cond)."""
        while any(n for (s, c), n in self._inflight_writes.items()
                  if s == store_id and (collection is None or c == collection)):
            self._cond.wait()

    def _after(self, desc: DataStoreDescriptor, location: tuple, q: UniformQuery, result: QueryResult) -> None:
        with self._lock:
            if q.op == "read":
                self.reads_by_store[desc.store_id] += 1
                return
            if q.op in ("write", "update"):
                desc.collections.add(location[1])
            if q.op == "begin":
                self._txn_changes[result.payload.decode("ascii")] = []
                return
            if q.op == "abort":
                self._txn_changes.pop(q.txn_id, None)
                return
            if q.op == "commit":
                for change_loc, op, key, value in self._txn_changes.pop(q.txn_id, []):
                    self._record(change_loc, op, key, value)
                return
            if q.key is None:
                return  # selector deletes are not replicated key by key
            op = "delete" if q.op == "delete" else "write"
            if q.txn_id is not None:
                self._txn_changes.setdefault(q.txn_id, []).append((location, op, q.key, q.payload))
            else:
                self._record(location, op, q.key, q.payload)

    def _watched(self, location: tuple) -> bool:
        return location in self._fences or any(
            l.source == location and l.mode == "continuous" for l in self.links.values())

    def _record(self, location: tuple, op: str, key: str, value: Optional[bytes]) -> None:
        # caller holds self._lock
        if not self._watched(location):
            return
        change = Change(self._epochs[location], next(self._seq), op, key, value)
        fence = self._fences.get(location)
        if fence is not None:
            fence.captured.append(change)
        if any(l.source == location and l.mode == "continuous" for l in self.links.values()):
            self._changelog[location].append(change)

    # -- monitoring --------------------------------------------------------------

    def observe_queue_depth(self, store_id: str, depth: int) -> None:
        with self._lock:
            self._observed_depth[store_id] = depth

    def queue_depth(self, store_id: str) -> int:
        with self._lock:
            return max(self._inflight[store_id], self._observed_depth.get(store_id, 0))

    # -- lifecycle ---------------------------------------------------------------

    def _access_point(self, provider_id: str, kind: str, physical_id: str) -> str:
        return f"sim://{provider_id}/{kind}/{physical_id}"

    def _provision(self, pool: str, physical_id: str, instances: int) -> None:
        for wrapper_id in self._pool_members(pool):
            provision = getattr(self.clients[wrapper_id], "provision", None)
            if provision is not None:
                provision(physical_id, instances)

    def _pool_call(self, pool: str, method: str, *args) -> None:
        for wrapper_id in self._pool_members(pool):
            fn = getattr(self.clients[wrapper_id], method, None)
            if fn is not None:
                fn(*args)

    def create_store(self, kind: str, provider_id: str, machines: int, store_id: Optional[str] = None,
                     owner: Optional[str] = None, metadata: Optional[dict] = None) -> DataStoreDescriptor:
        pools = self._pools_for(kind)
        if not pools:
            raise NoWrapperForKind(f"no wrapper registered for {kind}")
        store_id = store_id or f"{kind}-{uuid.uuid4().hex[:8]}"
        with self._lock:
            if store_id in self.catalog and self.catalog[store_id].state != "destroyed":
                raise DuplicateId(f"store {store_id} exists")
        if owner is not None and self.security.dataset(store_id) is not None \
                and self.security.owner_of(store_id) != owner:
            raise AccessDenied(f"dataset {store_id} belongs to another principal")
        allocated = self.federation.allocate(provider_id, machines)
        pool = pools[next(self._pool_cursor) % len(pools)]
        physical = f"{store_id}.{uuid.uuid4().hex[:6]}"
        desc = DataStoreDescriptor(
            store_id, kind, provider_id, self._access_point(provider_id, kind, physical),
            allocated, "creating", self._capabilities(pool).transactions, pool, physical,
        )
        with self._lock:
            self.catalog[store_id] = desc
        self._provision(pool, physical, len(allocated))
        if owner is not None:
            self.security.register_dataset(Credentials(owner), store_id, classify(metadata))
        with self._cond:
            desc.state = "ready"
            self._cond.notify_all()
        logger.info("created %s store %s on %s (%d machines)", kind, store_id, provider_id, machines)
        return desc

    def destroy_store(self, store_id: str) -> dict:
        with self._leases[store_id]:
            with self._cond:
                desc = self.store(store_id)
                desc.state = "destroyed"
                for link_id in [l for l, v in self.links.items()
                                if v.source[0] == store_id or v.dest[0] == store_id]:
                    self._drop_link(link_id)
                self.routes = {k: v for k, v in self.routes.items() if v[0] != store_id}
                self.read_redirects = {k: v for k, v in self.read_redirects.items()
                                       if v[0] != store_id and k[0] != store_id}
                self._cond.notify_all()
            self._pool_call(desc.pool, "drop", desc.physical_id)
            self.federation.release(desc.instances)
            with self._lock:
                del self.catalog[store_id]
        if self.security.dataset(store_id) is not None:
            self.security.drop_dataset(Credentials("core", roles=frozenset({"admin"})), store_id)
        return {"store_id": store_id, "state": "destroyed"}

    @staticmethod
    def _group(machines: Iterable[dict]) -> collections.Counter:
        counts = collections.Counter()
        for m in machines:
            if "provider_id" not in m:
                raise SchemaViolation("scale-out machines need a provider_id")
            counts[m["provider_id"]] += 1
        return counts

    def scale_store(self, store_id: str, machines: list, direction: str = "out") -> DataStoreDescriptor:
        """Add (``out``) or release (``in``) instances of a store."""
        if not machines:
            raise SchemaViolation("scale_store needs a non-empty list of machines")
        with self._leases[store_id]:
            desc = self.store(store_id)
            if direction == "out":
                allocated = []
                try:
                    for provider_id, count in sorted(self._group(machines).items()):
                        allocated += self.federation.allocate(provider_id, count)
                except CapacityExceeded:
                    self.federation.release(allocated)
                    raise
                new_instances = desc.instances + allocated
                released = []
            else:
                ids = {m.get("machine_id") for m in machines}
                released = [m for m in desc.instances if m.machine_id in ids]
                if len(released) != len(ids):
                    raise SchemaViolation("scale-in names machines the store does not own")
                new_instances = [m for m in desc.instances if m.machine_id not in ids]
                if not new_instances:
                    raise SchemaViolation("a store keeps at least one instance")
            with self._cond:
                desc.state = "scaling"
                self._drain_writes(store_id)
            try:
                self._pool_call(desc.pool, "resize", desc.physical_id, len(new_instances))
                desc.instances = new_instances
                self.federation.release(released)
            finally:
                with self._cond:
                    desc.state = "ready"
                    self._cond.notify_all()
            logger.info("scaled %s %s to %d instances", store_id, direction, len(desc.instances))
            return desc

    def relocate_store(self, store_id: str, new_provider: str) -> DataStoreDescriptor:
        """Move a store to another provider keeping its id: create, copy, verify, switch, drop."""
        with self._leases[store_id]:
            desc = self.store(store_id)
            allocated = self.federation.allocate(new_provider, len(desc.instances))
            with self._cond:
                desc.state = "relocating"
                self._drain_writes(store_id)
            target = dataclasses.replace(desc, physical_id=f"{store_id}.{uuid.uuid4().hex[:6]}",
                                         collections=set(desc.collections))
            try:
                self._provision(desc.pool, target.physical_id, len(allocated))
                for collection in sorted(desc.collections):
                    digests = self._copy(desc, collection, target, collection)
                    if self._digests(target, collection) != digests:
                        raise MigrationFailed(f"relocation copy of {store_id}/{collection} did not verify")
            except Exception:
                self._pool_call(desc.pool, "drop", target.physical_id)
                self.federation.release(allocated)
                with self._cond:
                    desc.state = "ready"
                    self._cond.notify_all()
                raise
            old_physical, old_instances = desc.physical_id, desc.instances
            with self._cond:
                desc.physical_id = target.physical_id
                desc.provider_id = new_provider
                desc.instances = allocated
                desc.access_point = self._access_point(new_provider, desc.kind, target.physical_id)
                desc.state = "ready"
                self._cond.notify_all()
            self._pool_call(desc.pool, "drop", old_physical)
            self.federation.release(old_instances)
            logger.info("relocated %s to %s", store_id, new_provider)
            return desc

    # -- copying and digests -------------------------------------------------

    def _snapshot(self, desc: DataStoreDescriptor, collection: str) -> list:
        client = self.clients[self._pick_wrapper(desc)]
        try:
            return list(client.snapshot(desc.physical_id, collection))
        except NativeError as exc:
            if exc.code == UNKNOWN_COLLECTION:
                return []
            raise WrapperError(str(exc), exc.code) from None

    def snapshot(self, location) -> list:
        """Point-in-time ``(key, value, digest)`` entries of a location, by key."""
        location = self.resolve(loc(location))
        return self._snapshot(self.store(location[0]), location[1])

    def _digests(self, desc: DataStoreDescriptor, collection: str) -> dict:
        return {k: d for k, _, d in self._snapshot(desc, collection)}

    def _put(self, desc, collection, key, value) -> None:
        op = "write" if value is not None else "delete"
        result = self._send(desc, UniformQuery(op, desc.store_id, collection, key=key, payload=value))
        if not result.ok and not (op == "delete" and result.error_code == "NOT_FOUND"):
            raise WrapperError(result.error["message"], result.error_code)
        if op == "write":
            desc.collections.add(collection)

    def _copy(self, src: DataStoreDescriptor, src_coll: str, dst: DataStoreDescriptor, dst_coll: str,
              corrupt: Optional[Callable] = None) -> dict:
        """Copy a snapshot; return the source digests by key."""
        digests = {}
        for key, value, digest in self._snapshot(src, src_coll):
            digests[key] = digest
            self._put(dst, dst_coll, key, corrupt(key, value) if corrupt else value)
        return digests

    # -- migration ---------------------------------------------------------------

    def migrate(self, src, dst, corrupt: Optional[Callable] = None,
                on_phase: Optional[Callable[[str], None]] = None) -> MigrationReport:
        """Copy with digests, verify, replay fenced writes, cut over, then clear the source.

        ``corrupt(key, value) -> bytes`` and ``on_phase(name)`` are fault and
        interleaving hooks for tests.
        """
        started = self.clock()
        src, dst = self.resolve(loc(src)), self.resolve(loc(dst))
        src_desc, dst_desc = self.store(src[0]), self.store(dst[0])
        for d in (src_desc, dst_desc):
            if d.state != "ready":
                raise StoreNotReady(f"{d.store_id} is {d.state}")
        if self._snapshot(dst_desc, dst[1]):
            raise MigrationFailed(f"destination {dst[0]}/{dst[1]} is not empty")
        leases = [self._leases[s] for s in sorted({src[0], dst[0]})]
        for lease in leases:
            lease.acquire()
        try:
            with self._lock:
                self._epochs[src] += 1
                fence = self._fences[src] = _Fence(self._epochs[src])
            try:
                digests = self._copy(src_desc, src[1], dst_desc, dst[1], corrupt)
                if on_phase:
                    on_phase("copied")
                if self._digests(dst_desc, dst[1]) != digests:
                    self._rollback(dst_desc, dst[1], digests)
                    raise VerificationFailed(f"digest mismatch migrating {src} -> {dst}")
                if on_phase:
                    on_phase("verified")
                with self._cond:
                    fence.closing = True
                    self._drain_writes(*src)
                captured = list(fence.captured)
                for change in captured:
                    self._put(dst_desc, dst[1], change.key, change.value if change.op == "write" else None)
                final = self._digests(src_desc, src[1])
                if self._digests(dst_desc, dst[1]) != final:
                    self._rollback(dst_desc, dst[1], final)
                    raise VerificationFailed(f"replayed writes did not converge {src} -> {dst}")
                with self._cond:
                    self.routes[src] = dst
                    for link in self.links.values():
                        if link.source == src:
                            link.source = dst
                for key in final:
                    self._put(src_desc, src[1], key, None)
            finally:
                with self._cond:
                    self._fences.pop(src, None)
                    self._cond.notify_all()
        finally:
            for lease in reversed(leases):
                lease.release()
        size = sum(len(v) for _, v, _ in self._snapshot(dst_desc, dst[1]))
        return MigrationReport(src, dst, len(final), size, self.clock() - started,
                               1 if captured else 0, len(captured))

    def _rollback(self, desc, collection, keys) -> None:
        for key in keys:
            self._put(desc, collection, key, None)

    # -- replication ---------------------------------------------------------------

    def replicate(self, src, dst, mode: str, job_id: Optional[str] = None) -> ReplicationLink:
        src, dst = self.resolve(loc(src)), self.resolve(loc(dst))
        src_desc, dst_desc = self.store(src[0]), self.store(dst[0])
        for d in (src_desc, dst_desc):
            if d.state != "ready":
                raise StoreNotReady(f"{d.store_id} is {d.state}")
        with self._lock:
            if any(l.source == src and l.dest == dst for l in self.links.values()):
                raise LinkExists(f"{src} -> {dst}")
            link = ReplicationLink(uuid.uuid4().hex[:12], src, dst, mode, 0, job_id)
            if mode == "continuous":
                self.links[link.link_id] = link
                start = Change(self._epochs[src], next(self._seq), "mark", "")
                link.last_seq = start.seq
        digests = self._copy(src_desc, src[1], dst_desc, dst[1])
        if self._digests(dst_desc, dst[1]) != {**self._digests(dst_desc, dst[1]), **digests} \
                and mode == "one_shot":
            raise VerificationFailed(f"replica {dst} does not match {src}")
        with self._lock:
            for key in digests:
                self._applied[(dst, key)] = (self._epochs[src], link.last_seq)
        return link

    def sync_cycle(self, link_id: Optional[str] = None) -> int:
        """Ship pending changes for one link (or all); returns changes applied."""
        with self._lock:
            links = [self.links[link_id]] if link_id else list(self.links.values())
        shipped = 0
        for link in links:
            with self._lock:
                log = self._changelog.get(link.source, [])
                pending = [c for c in log if c.seq > link.last_seq][: self.replication_batch]
            if not pending:
                continue
            dst_desc = self.store(link.dest[0])
            for change in pending:
                version = (change.epoch, change.seq)
                if self._applied.get((link.dest, change.key), (-1, -1)) < version:
                    self._put(dst_desc, link.dest[1], change.key, change.value if change.op == "write" else None)
                    self._applied[(link.dest, change.key)] = version
                shipped += 1
            with self._lock:
                link.last_seq = pending[-1].seq
                self._trim(link.source)
        return shipped

    def _trim(self, source: tuple) -> None:
        floor = min((l.last_seq for l in self.links.values() if l.source == source), default=None)
        log = self._changelog.get(source)
        if log is None:
            return
        if floor is None:
            del self._changelog[source]
        else:
            self._changelog[source] = [c for c in log if c.seq > floor]

    def replication_lag(self, link_id: str) -> int:
        with self._lock:
            link = self.links[link_id]
            return sum(1 for c in self._changelog.get(link.source, []) if c.seq > link.last_seq)

    def _drop_link(self, link_id: str) -> None:
        # caller holds self._lock
        link = self.links.pop(link_id, None)
        if link is not None:
            self.read_redirects = {k: v for k, v in self.read_redirects.items() if v != link.dest}
            self._trim(link.source)

    def cancel(self, job_id: str) -> None:
        """Cancellation signal from the Core: tear down what the job owns."""
        with self._lock:
            for link_id in [l for l, v in self.links.items() if v.job_id == job_id]:
                self._drop_link(link_id)

    # -- off-loading ---------------------------------------------------------------

    def offload(self, store_id: str, queue_depth: Optional[int] = None) -> OffloadPlan:
        desc = self.store(store_id)
        depth = self.queue_depth(store_id) if queue_depth is None else queue_depth
        now = self.clock()
        if depth <= self.q_high:
            plan = OffloadPlan(store_id, depth, "none", {}, now)
        else:
            with self._lock:
                replicas = sorted(
                    (l for l in self.links.values() if l.source[0] == store_id and l.mode == "continuous"),
                    key=lambda l: l.link_id)
            if replicas:
                with self._lock:
                    for link in replicas:
                        self.read_redirects[link.source] = link.dest
                target = {"replicas": [{"store_id": l.dest[0], "collection": l.dest[1]} for l in replicas]}
                plan = OffloadPlan(store_id, depth, "redirect", target, now)
            else:
                count = max(1, math.ceil(depth / self.q_high) - 1)
                region = self.federation.provider(desc.provider_id).region
                try:
                    decision = choose_placement(self.federation.free_view(),
                                                PlacementRequest(machines=count, user_region=region))
                except NoFeasiblePlacement:
                    raise NoRemedy(f"{store_id}: no replica and no free capacity for {count} machine(s)") from None
                provider_id = decision.primary.provider_id
                self.scale_store(store_id, [{"provider_id": provider_id}] * count, "out")
                plan = OffloadPlan(store_id, depth, "scale",
                                   {"provider_id": provider_id, "machines": count,
                                    "score": decision.primary.score}, now)
        with self._lock:
            self.plans.append(plan)
        return plan

    def clear_redirects(self, store_id: str) -> None:
        with self._lock:
            self.read_redirects = {k: v for k, v in self.read_redirects.items() if k[0] != store_id}

    # -- publication and transforms -----------------------------------------

    def publish(self, dataset_id: str, audience: Iterable[str], principal_id: str) -> dict:
        owner = self.security.owner_of(dataset_id)
        if principal_id != owner:
            raise AccessDenied("only the dataset owner may publish it")
        audience = sorted(set(audience))
        if audience:
            self.security.grant(Credentials(owner), dataset_id, "read", audience)
        return {"dataset_id": dataset_id, "audience": audience}

    def apply_transform(self, dataset_id: str, which: str, principal_id: str,
                        roles: Iterable[str] = ()) -> dict:
        """Rewrite every record of a store dataset with ``which`` applied."""
        entry = self.security.dataset(dataset_id)
        if entry is None:
            raise UnknownDataset(dataset_id)
        if principal_id != entry.owner and "security_admin" not in set(roles):
            raise AccessDenied("only the owner or a security admin may transform a dataset")
        if dataset_id not in self.catalog:
            raise UnknownDataset(f"{dataset_id} is not a store dataset")
        policy = self.security.protocol_query(entry.data_class, entry.owner, Credentials(principal_id))
        if which not in ("anonymize", "encrypt") or not getattr(policy, which):
            raise TransformFailure(f"{entry.data_class.value} protocols do not permit {which}")
        current = AccessDecision(True, policy, "owner", dataset_id, entry.owner, entry.data_class)
        with self._leases[dataset_id]:
            desc = self.store(dataset_id)
            rewritten = []
            try:
                for collection in sorted(desc.collections):
                    for key, blob, _ in self._snapshot(desc, collection):
                        flags = enforcement.flags_of(blob)
                        target = ProtocolSet(
                            integrity=True,
                            anonymize=which == "anonymize" or bool(flags & enforcement.FLAG_ANONYMIZED),
                            encrypt=which == "encrypt" or bool(flags & enforcement.FLAG_ENCRYPTED),
                            anonymize_fields=policy.anonymize_fields,
                        )
                        plain = enforcement.invert(blob, current, self.security)
                        new = enforcement.enforce(plain, dataclasses.replace(current, protocols=target), self.security)
                        rewritten.append((collection, key, new))
            except BudamafError as exc:
                raise TransformFailure(f"{which} of {dataset_id} failed: {exc}") from None
            with self._lock:
                for collection in desc.collections:
                    self._epochs[(dataset_id, collection)] += 1
            for collection, key, new in rewritten:
                self._put(desc, collection, key, new)
        return {"dataset_id": dataset_id, "transform": which, "records": len(rewritten)}

    # -- job entry point -------------------------------------------------------

    def handle_job(self, kind, details: dict):
        """POST /off_loading_apis/: a job forwarded by the Core (``job_id`` inside details)."""
        kind = JobKind(kind)
        principal = details.get("initiator_id", "")
        if kind in (JobKind.READ, JobKind.WRITE, JobKind.UPDATE, JobKind.DELETE):
            return self._data_job(kind, details)
        if kind is JobKind.CREATE_STORE:
            return self.create_store(details["kind"], details["provider_id"], details["machines"],
                                     details.get("store_id"), principal or None, details.get("metadata")).to_dict()
        if kind is JobKind.DESTROY_STORE:
            return self.destroy_store(details["store_id"])
        if kind is JobKind.SCALE_STORE:
            return self.scale_store(details["store_id"], details["machines"],
                                    details.get("direction", "out")).to_dict()
        if kind is JobKind.RELOCATE_STORE:
            return self.relocate_store(details["store_id"], details["provider_id"]).to_dict()
        if kind is JobKind.MIGRATE:
            return self.migrate(details["src"], details["dst"]).to_dict()
        if kind is JobKind.REPLICATE:
            return self.replicate(details["src"], details["dst"], details["mode"], details.get("job_id")).to_dict()
        if kind is JobKind.OFFLOAD:
            return self.offload(details["store_id"], details.get("queue_depth")).to_dict()
        if kind is JobKind.PUBLISH:
            return self.publish(details["dataset_id"], details["audience"], principal)
        if kind in (JobKind.ANONYMIZE, JobKind.ENCRYPT):
            return self.apply_transform(details["dataset_id"], kind.value, principal,
                                        details.get("initiator_roles", ()))
        raise SchemaViolation(f"{kind.value} is not an off-loading job")

    def _data_job(self, kind: JobKind, details: dict):
        store_id = details["store_id"]
        collection = details.get("collection", "default")
        if "txn_control" in details:
            q = UniformQuery(details["txn_control"], store_id, collection, txn_id=details.get("txn_id"))
        else:
            q = UniformQuery(kind.value, store_id, collection, key=details.get("key"),
                             selector=details.get("selector"), payload=payload_of(details),
                             txn_id=details.get("txn_id"))
        result = self.dispatch(q)
        if not result.ok:
            raise WrapperError(result.error["message"], result.error_code)
        if q.op == "begin":
            return {"txn_id": result.payload.decode("ascii")}
        if result.payload is not None:
            return result.payload
        if result.rows is not None:
            return {"rows": [{"key": r["key"], "payload_b64": b64encode(r["payload"])} for r in result.rows]}
        return {"count": result.count}
