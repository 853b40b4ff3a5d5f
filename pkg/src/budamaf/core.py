"""The Core: single entry point that authenticates, authorizes, enforces and routes jobs."""

from __future__ import annotations

import dataclasses
import enum
import hmac
import itertools
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import enforcement
from .errors import (
    AccessDenied,
    AuthenticationFailed,
    BudamafError,
    ChannelClosed,
    NoRemedy,
    NotFound,
    Overloaded,
    SchemaViolation,
    UnknownDataset,
)
from .protocol import (
    RETRIEVAL,
    STREAMABLE,
    Component,
    Credentials,
    ErrorDescription,
    JobEvent,
    JobKind,
    JobRecord,
    JobStatus,
    b64decode,
    b64encode,
    parse_job_request,
    payload_of,
    record_bytes,
    route_table,
)
from .security import AccessDecision, SecurityEngine, classify

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 5.0
MAX_ATTEMPTS = 2

# Jobs whose target dataset is a store, and the action they need on it.
_STORE_ACTIONS = {
    JobKind.READ: "read",
    JobKind.WRITE: "write",
    JobKind.UPDATE: "write",
    JobKind.DELETE: "write",
    JobKind.DESTROY_STORE: "admin",
    JobKind.SCALE_STORE: "admin",
    JobKind.RELOCATE_STORE: "admin",
    JobKind.OFFLOAD: "admin",
}


class Health(str, enum.Enum):
    HEALTHY = "healthy"
    SUSPECT = "suspect"
    DOWN = "down"


@dataclass
class ComponentInstance:
    component: Component
    instance_id: str
    endpoint: str
    target: object = None          # speaks call / cancel / probe
    health: Health = Health.HEALTHY
    inflight: int = 0

    def to_dict(self) -> dict:
        return {"component": self.component.value, "instance_id": self.instance_id,
                "endpoint": self.endpoint, "health": self.health.value, "inflight": self.inflight}


class _Timeout(Exception):
    pass


# -- principals ----------------------------------------------------------------


class PrincipalRegistry:
    """Token match against a JSON file ``{"principals": [{principal_id, token, roles}]}``."""

    def __init__(self, principals: Optional[dict] = None):
        self.principals: dict[str, Credentials] = dict(principals or {})

    @classmethod
    def load(cls, path: str) -> "PrincipalRegistry":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls({p["principal_id"]: Credentials.from_dict(p) for p in doc.get("principals", [])})

    def add(self, creds: Credentials) -> None:
        self.principals[creds.principal_id] = creds

    def authenticate(self, creds: Credentials) -> Credentials:
        known = self.principals.get(creds.principal_id)
        if known is None or not hmac.compare_digest(known.token.encode(), creds.token.encode()):
            raise AuthenticationFailed(f"bad credentials for {creds.principal_id}")
        return known


# -- registry ------------------------------------------------------------------


class JobRegistry:
    """In-memory jobs plus an append-only NDJSON log kept for inspection."""

    def __init__(self, wal_path: Optional[str] = None):
        self.entries: dict[str, JobRecord] = {}
        self.open_channels: set = set()
        self.wal_path = wal_path
        self._lock = threading.Lock()
        self._changed = threading.Condition(self._lock)

    def _log(self, event: str, record: JobRecord) -> None:
        if not self.wal_path:
            return
        line = json.dumps({"event": event, "job_id": record.job_id, "status": record.status.value,
                           "kind": record.job_description.value, "at": time.time()}, sort_keys=True)
        with open(self.wal_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def add(self, record: JobRecord) -> None:
        with self._lock:
            self.entries[record.job_id] = record
            self._log("add", record)

    def get(self, job_id: str) -> JobRecord:
        with self._lock:
            try:
                return self.entries[job_id]
            except KeyError:
                raise NotFound(f"job {job_id}") from None

    def advance(self, job_id: str, event: JobEvent, data=None, keep_data: bool = False) -> JobRecord:
        """Atomic transition; raises IllegalTransition for the loser of a race."""
        with self._lock:
            record = self.entries.get(job_id)
            if record is None:
                raise NotFound(f"job {job_id}")
            record = record.advance(event, data, keep_data)
            self.entries[job_id] = record
            if record.status.terminal:
                self.open_channels.discard(job_id)
            self._log(event.value, record)
            self._changed.notify_all()
            return record

    def attach(self, job_id: str, data) -> bool:
        """Set the data of a running job without a transition; False if it is gone."""
        with self._lock:
            record = self.entries.get(job_id)
            if record is None or record.status is not JobStatus.RUNNING:
                return False
            self.entries[job_id] = dataclasses.replace(record, data=data)
            self._changed.notify_all()
            return True

    def open(self, job_id: str) -> None:
        with self._lock:
            self.open_channels.add(job_id)

    def close(self, job_id: str) -> bool:
        with self._lock:
            if job_id not in self.open_channels:
                return False
            self.open_channels.discard(job_id)
            return True

    def remove(self, job_id: str) -> None:
        with self._lock:
            record = self.entries.pop(job_id, None)
            self.open_channels.discard(job_id)
            if record is not None:
                self._log("delete", record)
            self._changed.notify_all()

    def wait(self, job_id: str, timeout: Optional[float], predicate: Callable[[JobRecord], bool]) -> JobRecord:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._lock:
            while True:
                record = self.entries.get(job_id)
                if record is None:
                    raise NotFound(f"job {job_id}")
                if predicate(record):
                    return record
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return record
                self._changed.wait(remaining)


# -- the gateway -----------------------------------------------------------------


@dataclass
class _Pending:
    """Per-job dispatch context kept outside the immutable record."""

    decision: Optional[AccessDecision] = None
    chunks: list = field(default_factory=list)
    attempts: int = 0
    instances: list = field(default_factory=list)


class Core:
    def __init__(
        self,
        security: SecurityEngine,
        principals: Optional[PrincipalRegistry] = None,
        timeout: float = DEFAULT_TIMEOUT_S,
        workers: int = 16,
        wal_path: Optional[str] = None,
    ):
        self.security = security
        self.principals = principals
        self.timeout = timeout
        self.registry = JobRegistry(wal_path)
        self.instances: dict[Component, list] = {c: [] for c in Component}
        self.overload_events = 0
        self._cursor = itertools.count()
        self._pending: dict[str, _Pending] = {}
        self._lock = threading.Lock()
        self._executor = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="core-dispatch")

    def close(self) -> None:
        self._executor.shutdown(wait=False, cancel_futures=True)

    # -- instances ---------------------------------------------------------------

    def register_instance(self, component, instance_id: str, target, endpoint: str = "local") -> ComponentInstance:
        inst = ComponentInstance(Component(component), instance_id, endpoint, target)
        with self._lock:
            self.instances[inst.component].append(inst)
        return inst

    def balance(self, component: Component, exclude=()) -> ComponentInstance:
        """Round-robin over healthy instances."""
        with self._lock:
            healthy = [i for i in self.instances[Component(component)]
                       if i.health is Health.HEALTHY and i.instance_id not in exclude]
            if healthy:
                return healthy[next(self._cursor) % len(healthy)]
            self.overload_events += 1
        logger.warning("high load: no healthy %s instance; request refused, retry later", Component(component).value)
        raise Overloaded(f"no healthy {Component(component).value} instance; retry later")

    def probe_health(self) -> dict:
        """Probe every instance not known healthy; a passing probe restores it."""
        with self._lock:
            candidates = [i for insts in self.instances.values() for i in insts if i.health is not Health.HEALTHY]
        for inst in candidates:
            try:
                inst.target.probe()
            except Exception:
                continue
            with self._lock:
                inst.health = Health.HEALTHY
        with self._lock:
            return {i.instance_id: i.health.value for insts in self.instances.values() for i in insts}

    # -- authentication and authorization -------------------------------------

    def authenticate(self, creds: Credentials) -> Credentials:
        if self.principals is None:
            return creds
        return self.principals.authenticate(creds)

    def _decide(self, creds: Credentials, dataset_id: str, action: str, admin_ok: bool = False) -> AccessDecision:
        decision = self.security.check_access(creds, dataset_id, action)
        if not decision.allowed and not (admin_ok and creds.has_role("admin")):
            raise AccessDenied(f"{creds.principal_id} may not {action} {dataset_id}")
        return decision

    def _authorize(self, record: JobRecord) -> Optional[AccessDecision]:
        """Security engine verdict for this job; returns the decision used for enforcement."""
        kind, d, creds = record.job_description, record.job_details, record.initiator
        if kind in _STORE_ACTIONS:
            action = _STORE_ACTIONS[kind]
            return self._decide(creds, d["store_id"], action, admin_ok=action == "admin")
        if kind in (JobKind.MIGRATE, JobKind.REPLICATE):
            self._decide(creds, d["src"]["store_id"], "read")
            return self._decide(creds, d["dst"]["store_id"], "write")
        if kind in (JobKind.PUBLISH, JobKind.ANONYMIZE, JobKind.ENCRYPT):
            return self._decide(creds, d["dataset_id"], "admin")
        if kind is JobKind.ANALYTICS_SAVE:
            dataset_id = d["descriptor"]["dataset_id"]
            if self.security.dataset(dataset_id) is not None:
                return self._decide(creds, dataset_id, "write")
            return self.security.decision_for(classify(d["descriptor"].get("description")),
                                              creds.principal_id, creds, dataset_id)
        if kind is JobKind.STATUS_QUERY:
            target = self.registry.get(d["job_id"])
            if target.initiator.principal_id != creds.principal_id and not creds.has_role("admin"):
                raise AccessDenied("status of another principal's job")
        return None

    # -- submission ----------------------------------------------------------------

    def submit_job(self, raw) -> str:
        record = parse_job_request(raw)
        creds = self.authenticate(record.initiator)
        record = JobRecord(record.job_id, creds, record.job_description, record.job_details)
        self.registry.add(record)
        job_id = record.job_id
        try:
            decision = self._authorize(record)
        except (AccessDenied, UnknownDataset) as exc:
            self._crash(job_id, exc)
            raise
        ctx = _Pending(decision)
        with self._lock:
            self._pending[job_id] = ctx
        kind = record.job_description
        component = route_table(kind)
        if component is not Component.CORE:
            try:
                ctx.instances.append(self.balance(component))
            except Overloaded as exc:
                self._crash(job_id, exc)
                raise
        self.registry.advance(job_id, JobEvent.START)
        if kind in STREAMABLE and record.job_details.get("stream"):
            self.registry.open(job_id)
            return job_id
        try:
            details = self._prepare(record, ctx)
        except BudamafError as exc:
            self._crash(job_id, exc)
            return job_id
        self._executor.submit(self._run, job_id, kind, details, ctx)
        return job_id

    def _prepare(self, record: JobRecord, ctx: _Pending, streamed: Optional[bytes] = None) -> dict:
        """Enforce protocols on payloads and inject the job id."""
        kind, creds = record.job_description, record.initiator
        details = {k: v for k, v in record.job_details.items() if k not in ("value", "value_b64", "stream")}
        details.update(job_id=record.job_id, initiator_id=creds.principal_id,
                       initiator_roles=sorted(creds.roles))
        if kind in (JobKind.WRITE, JobKind.UPDATE) and "txn_control" not in details:
            if kind is JobKind.UPDATE and "payload" in details:
                payload = json.dumps(details.pop("payload"), sort_keys=True).encode("utf-8")
            else:
                payload = streamed if streamed is not None else payload_of(record.job_details)
            details["value_b64"] = b64encode(enforcement.enforce(payload, ctx.decision, self.security))
        elif kind is JobKind.ANALYTICS_SAVE:
            if streamed is not None:
                records = [json.loads(line) for line in streamed.decode("utf-8").splitlines() if line.strip()]
                raw = [record_bytes(r) for r in records]
            elif "records_b64" in record.job_details:
                raw = [b64decode(r) for r in record.job_details["records_b64"]]
            else:
                raw = [record_bytes(r) for r in record.job_details.get("records", [])]
            details.pop("records", None)
            details["records_b64"] = [b64encode(enforcement.enforce(r, ctx.decision, self.security)) for r in raw]
            details["data_class"] = ctx.decision.data_class.value
        return details

    # -- dispatch ----------------------------------------------------------------

    def _call(self, inst: ComponentInstance, kind: JobKind, details: dict, creds: Credentials):
        """Run one dispatch attempt on its own thread, bounded by the timeout."""
        outcome: dict = {}
        abandoned = threading.Event()

        def attempt():
            try:
                outcome["value"] = inst.target.call(kind, details, creds, abandoned)
            except BaseException as exc:  # noqa: BLE001 - carried back to the waiter
                outcome["error"] = exc

        with self._lock:
            inst.inflight += 1
        worker = threading.Thread(target=attempt, daemon=True, name=f"call-{inst.instance_id}")
        worker.start()
        worker.join(self.timeout)
        with self._lock:
            inst.inflight -= 1
        if worker.is_alive():
            abandoned.set()
            raise _Timeout(inst.instance_id)
        if "error" in outcome:
            raise outcome["error"]
        return outcome.get("value")

    def _run(self, job_id: str, kind: JobKind, details: dict, ctx: _Pending) -> None:
        try:
            record = self.registry.get(job_id)
        except NotFound:
            return
        if kind is JobKind.STATUS_QUERY:
            # details["job_id"] is this job's own id after injection; the target is in the record
            target_id = record.job_details["job_id"]
            try:
                status = self.registry.get(target_id).status.value
            except NotFound:
                status = "deleted"
            data = {"job_id": target_id, "status": status}
            self._finish(job_id, data)
            return
        component = route_table(kind)
        inst = ctx.instances[-1]
        while True:
            ctx.attempts += 1
            try:
                result = self._call(inst, kind, details, record.initiator)
            except _Timeout:
                self.redirect_on_timeout(record, inst)
                if ctx.attempts >= MAX_ATTEMPTS:
                    self._crash(job_id, ErrorDescription("Timeout", "dispatch timed out after redirect"))
                    return
                try:
                    inst = self.balance(component, exclude={i.instance_id for i in ctx.instances})
                except Overloaded:
                    self._crash(job_id, ErrorDescription("Timeout", f"{inst.instance_id} timed out; no alternate instance"))
                    return
                ctx.instances.append(inst)
                continue
            except NoRemedy as exc:
                with self._lock:
                    self.overload_events += 1
                logger.warning("high load on %s with no remedy: %s", details.get("store_id"), exc)
                self._crash(job_id, Overloaded(str(exc)))
                return
            except BudamafError as exc:
                self._crash(job_id, exc)
                return
            except Exception as exc:
                logger.exception("job %s failed in %s", job_id, inst.instance_id)
                self._crash(job_id, ErrorDescription("InternalError", type(exc).__name__))
                return
            break
        try:
            data = self._postprocess(record, result, ctx)
        except BudamafError as exc:
            self._crash(job_id, exc)
            return
        if kind is JobKind.REPLICATE and details.get("mode") == "continuous":
            # stays running until the job is deleted; a delete that raced the
            # dispatch has already cancelled, so tear the new link down here
            if not self.registry.attach(job_id, data):
                inst.target.cancel(job_id)
            return
        self._finish(job_id, data)

    def redirect_on_timeout(self, record: JobRecord, failed: ComponentInstance) -> None:
        with self._lock:
            failed.health = Health.SUSPECT
        logger.warning("job %s: %s timed out after %.2fs; marked suspect",
                       record.job_id, failed.instance_id, self.timeout)

    def _postprocess(self, record: JobRecord, result, ctx: _Pending):
        kind = record.job_description
        if kind is JobKind.READ:
            if isinstance(result, (bytes, bytearray)):
                return enforcement.invert(result, ctx.decision, self.security)
            if isinstance(result, dict) and "rows" in result:
                rows = [{"key": r["key"], "value_b64": b64encode(
                    enforcement.invert(b64decode(r["payload_b64"]), ctx.decision, self.security))}
                    for r in result["rows"]]
                return {"rows": rows}
        if kind is JobKind.ANALYTICS_RETRIEVE and isinstance(result, dict):
            decisions: dict = {}
            out = []
            for item in result.get("records", []):
                ds = item["dataset_id"]
                if ds not in decisions:
                    decisions[ds] = self.security.check_access(record.initiator, ds, "read")
                plain = enforcement.invert(b64decode(item["payload_b64"]), decisions[ds], self.security)
                try:
                    out.append(json.loads(plain))
                except ValueError:
                    out.append(plain.decode("utf-8", "replace"))
            return {"request_id": result.get("request_id"), "records": out}
        return result

    def _finish(self, job_id: str, data) -> None:
        try:
            self.registry.advance(job_id, JobEvent.SUCCEED, data)
        except (BudamafError, ValueError):
            pass  # deleted or already terminal

    def _crash(self, job_id: str, exc) -> None:
        if isinstance(exc, BudamafError):
            err = ErrorDescription(exc.code, str(exc))
        elif isinstance(exc, ErrorDescription):
            err = exc
        else:
            err = ErrorDescription(type(exc).__name__, str(exc))
        try:
            if self.registry.get(job_id).status is JobStatus.PENDING:
                self.registry.advance(job_id, JobEvent.START)
            self.registry.advance(job_id, JobEvent.FAIL, err)
        except BudamafError:
            pass

    # -- the rest of the job surface ----------------------------------------------

    def _owned(self, job_id: str, creds: Credentials) -> JobRecord:
        record = self.registry.get(job_id)
        if record.initiator.principal_id != creds.principal_id and not creds.has_role("admin"):
            raise AccessDenied(f"job {job_id} belongs to another principal")
        return record

    def get_job(self, job_id: str, creds: Credentials) -> dict:
        record = self._owned(job_id, self.authenticate(creds))
        view = record.to_dict(redact=True)
        if record.status is JobStatus.RUNNING or (record.status is JobStatus.FINISHED
                                                 and record.job_description not in RETRIEVAL
                                                 and record.data is None):
            view["data"] = None
        return view

    def record(self, job_id: str) -> JobRecord:
        return self.registry.get(job_id)

    def attempts(self, job_id: str) -> int:
        ctx = self._pending.get(job_id)
        return ctx.attempts if ctx else 0

    def stream_put(self, job_id: str, chunk: bytes, creds: Credentials, final: bool = False) -> dict:
        record = self._owned(job_id, self.authenticate(creds))
        if job_id not in self.registry.open_channels:
            raise ChannelClosed(f"job {job_id} has no open channel")
        ctx = self._pending[job_id]
        ctx.chunks.append(bytes(chunk))
        if not final:
            return {"job_id": job_id, "received": len(ctx.chunks)}
        if not self.registry.close(job_id):
            raise ChannelClosed(f"job {job_id} has no open channel")
        payload = b"".join(ctx.chunks)
        ctx.chunks = []
        try:
            details = self._prepare(record, ctx, streamed=payload)
        except (BudamafError, ValueError) as exc:
            self._crash(job_id, exc if isinstance(exc, BudamafError) else SchemaViolation(str(exc)))
            return {"job_id": job_id, "closed": True}
        self._executor.submit(self._run, job_id, record.job_description, details, ctx)
        return {"job_id": job_id, "closed": True}

    def delete_job(self, job_id: str, creds: Credentials) -> dict:
        record = self._owned(job_id, self.authenticate(creds))
        component = route_table(record.job_description)
        if component is not Component.CORE:
            for inst in list(self.instances[component]):
                try:
                    inst.target.cancel(job_id)
                except Exception:
                    logger.warning("cancel of %s on %s failed", job_id, inst.instance_id)
        if record.status is JobStatus.RUNNING:
            self._crash(job_id, ErrorDescription("Cancelled", "cancelled"))
        self.registry.remove(job_id)
        with self._lock:
            self._pending.pop(job_id, None)
        return {"job_id": job_id, "deleted": True}

    def wait(self, job_id: str, timeout: Optional[float] = None) -> JobRecord:
        """Block until the job is terminal (or a continuous job is dispatched)."""
        return self.registry.wait(job_id, timeout, lambda r: r.status.terminal or (
            r.job_description is JobKind.REPLICATE and r.data is not None))

    def run(self, raw, timeout: Optional[float] = 30.0) -> JobRecord:
        """Submit and wait; convenience for in-process callers."""
        job_id = self.submit_job(raw)
        return self.wait(job_id, timeout)


# -- in-process component adapters ---------------------------------------------


class LocalComponent:
    """Adapter exposing an in-process component to the Core.

    ``stall()`` holds calls until ``drain()``; an attempt abandoned by the
    Core while held is dropped instead of executed.
    """

    def __init__(self, component: Component, service):
        self.component = Component(component)
        self.service = service
        self.calls = 0
        self._gate = threading.Event()
        self._gate.set()

    def stall(self) -> None:
        self._gate.clear()

    def drain(self) -> None:
        self._gate.set()

    def probe(self) -> dict:
        if not self._gate.is_set():
            raise TimeoutError("instance is stalled")
        return {"status": "ok"}

    def call(self, kind: JobKind, details: dict, creds: Credentials, abandoned: Optional[threading.Event] = None):
        self.calls += 1
        self._gate.wait()
        if abandoned is not None and abandoned.is_set():
            raise TimeoutError("attempt abandoned by the caller")
        if self.component is Component.OFF_LOADING_APIS:
            return self.service.handle_job(kind, details)
        return self.service.handle_job(kind, details, creds)

    def cancel(self, job_id: str) -> None:
        cancel = getattr(self.service, "cancel", None)
        if cancel is not None:
            cancel(job_id)
