"""Analytics access point: described datasets saved and retrieved across stores.

The engine never looks inside records. Descriptors live in a reserved
collection of a federation-owned key_value store; each save appends a
segment ``{start, count, locations}`` so the key of record ``seq`` and its
location can be recomputed without scanning.
"""

from __future__ import annotations

import collections
import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from . import enforcement
from .errors import AccessDenied, DuplicateId, StoreNotFound, StoreNotReady, Unreachable, WrapperError
from .offloading import OffloadingAPIs, loc
from .protocol import Credentials, JobKind, b64decode, b64encode
from .security import AccessDecision, DataClass, SecurityEngine, classify
from .wrappers.base import UniformQuery

logger = logging.getLogger(__name__)

CATALOG_COLLECTION = "_datasets"


@dataclass
class DatasetDescriptor:
    dataset_id: str
    description: dict
    locations: list
    segments: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return sum(s["count"] for s in self.segments)

    def keys(self):
        """``(key, location)`` for every saved record."""
        for seg in self.segments:
            locs = seg["locations"]
            for i in range(seg["count"]):
                seq = seg["start"] + i
                yield f"{self.dataset_id}/{seq:09d}", tuple(locs[i % len(locs)])

    def to_dict(self) -> dict:
        return {"dataset_id": self.dataset_id, "description": self.description,
                "locations": [list(l) for l in self.locations], "segments": self.segments}

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetDescriptor":
        return cls(doc["dataset_id"], doc.get("description", {}),
                   [tuple(l) for l in doc.get("locations", [])], doc.get("segments", []))


def _window(value):
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return float(value[0]), float(value[1])
    return None


def matches(query: dict, descriptor: DatasetDescriptor) -> bool:
    """Attribute filters: equality per key; ``window`` pairs match on overlap."""
    for key, want in (query or {}).items():
        if key == "dataset_id":
            if descriptor.dataset_id != want:
                return False
            continue
        have = descriptor.description.get(key)
        if key == "window":
            a, b = _window(want), _window(have)
            if a is None or b is None or a[1] < b[0] or b[1] < a[0]:
                return False
        elif have != want:
            return False
    return True


class AnalyticsEngine:
    def __init__(self, offloading: OffloadingAPIs, security: SecurityEngine, catalog_store: str):
        self.offloading = offloading
        self.security = security
        self.catalog_store = catalog_store
        self.modules: dict[str, dict] = {}
        self._dataset_locks: dict[str, threading.Lock] = collections.defaultdict(threading.Lock)
        self._lock = threading.Lock()
        self._catalog_decision = AccessDecision(True, security.policy.class_protocols[DataClass.FEDERATION],
                                                "system", catalog_store, "core", DataClass.FEDERATION)

    # -- catalog -------------------------------------------------------------

    def _catalog_read(self, dataset_id: str) -> Optional[DatasetDescriptor]:
        result = self.offloading.dispatch(UniformQuery("read", self.catalog_store, CATALOG_COLLECTION, key=dataset_id))
        if not result.ok:
            if result.error_code == "NOT_FOUND":
                return None
            raise WrapperError(result.error["message"], result.error_code)
        raw = enforcement.invert(result.payload, self._catalog_decision, self.security)
        return DatasetDescriptor.from_dict(json.loads(raw))

    def _catalog_write(self, desc: DatasetDescriptor) -> None:
        raw = json.dumps(desc.to_dict(), sort_keys=True).encode("utf-8")
        blob = enforcement.enforce(raw, self._catalog_decision, self.security)
        result = self.offloading.dispatch(UniformQuery("write", self.catalog_store, CATALOG_COLLECTION,
                                                       key=desc.dataset_id, payload=blob))
        if not result.ok:
            raise WrapperError(result.error["message"], result.error_code)

    def catalog(self) -> list:
        out = []
        for _, blob, _ in self.offloading.snapshot((self.catalog_store, CATALOG_COLLECTION)):
            raw = enforcement.invert(blob, self._catalog_decision, self.security)
            out.append(DatasetDescriptor.from_dict(json.loads(raw)))
        return out

    # -- access --------------------------------------------------------------

    def _check_module(self, creds: Credentials) -> None:
        if creds.roles == frozenset({"analytics_module"}) and creds.principal_id not in self.modules:
            raise AccessDenied(f"analytics module {creds.principal_id} is not registered")

    def _allowed(self, creds: Credentials, dataset_id: str, action: str) -> None:
        if not self.security.check_access(creds, dataset_id, action).allowed:
            raise AccessDenied(f"{creds.principal_id} may not {action} dataset {dataset_id}")

    # -- operations ------------------------------------------------------------

    def save(self, creds: Credentials, descriptor: dict, records: Iterable[bytes],
             data_class: Optional[str] = None) -> dict:
        """Write records round-robin over the descriptor's locations."""
        self._check_module(creds)
        dataset_id = descriptor["dataset_id"]
        locations = [loc(l) for l in descriptor["locations"]]
        for store_id, _ in locations:
            if store_id == self.catalog_store:
                raise AccessDenied("the dataset catalog store is reserved")
            state = self.offloading.store(store_id).state
            if state != "ready":
                raise StoreNotReady(f"{store_id} is {state}")
            if self.security.dataset(store_id) is not None:
                self._allowed(creds, store_id, "write")
        records = list(records)
        with self._dataset_locks[dataset_id]:
            if self.security.dataset(dataset_id) is None:
                cls = DataClass(data_class) if data_class else classify(descriptor.get("description"))
                self.security.register_dataset(creds, dataset_id, cls)
            else:
                self._allowed(creds, dataset_id, "write")
            desc = self._catalog_read(dataset_id) or DatasetDescriptor(
                dataset_id, descriptor.get("description", {}), locations)
            start = desc.count
            for i, payload in enumerate(records):
                store_id, collection = locations[i % len(locations)]
                q = UniformQuery("write", store_id, collection, key=f"{dataset_id}/{start + i:09d}", payload=payload)
                result = self.offloading.dispatch(q)
                if not result.ok:
                    raise WrapperError(result.error["message"], result.error_code)
            desc.segments.append({"start": start, "count": len(records), "locations": [list(l) for l in locations]})
            desc.locations = sorted(set(desc.locations) | set(locations))
            self._catalog_write(desc)
        return {"dataset_id": dataset_id, "count": len(records)}

    def retrieve(self, creds: Credentials, description: dict, request_id: Optional[str] = None) -> dict:
        """Records of every dataset matching ``description``; any denial denies all."""
        self._check_module(creds)
        matched = sorted((d for d in self.catalog() if matches(description, d)), key=lambda d: d.dataset_id)
        for d in matched:
            self._allowed(creds, d.dataset_id, "read")
        records = []
        for d in matched:
            for key, (store_id, collection) in d.keys():
                try:
                    result = self.offloading.dispatch(UniformQuery("read", store_id, collection, key=key))
                except StoreNotFound:
                    continue
                if result.ok:
                    records.append({"dataset_id": d.dataset_id, "payload_b64": b64encode(result.payload)})
        return {"request_id": request_id, "records": records}

    def register_module(self, creds: Credentials, module_id: str, endpoint: str,
                        probe: Optional[Callable[[], object]] = None) -> dict:
        if not creds.has_role("admin"):
            raise AccessDenied("registering analytics modules needs the admin role")
        with self._lock:
            if module_id in self.modules:
                raise DuplicateId(f"module {module_id} already registered")
        if probe is not None:
            try:
                probe()
            except Exception as exc:
                raise Unreachable(f"module {module_id} at {endpoint} did not answer: {exc}") from None
        with self._lock:
            self.modules[module_id] = {"module_id": module_id, "endpoint": endpoint}
        return {"module_id": module_id, "registered": True}

    def handle_job(self, kind, details: dict, creds: Credentials):
        kind = JobKind(kind)
        if kind is JobKind.ANALYTICS_SAVE:
            records = [b64decode(r) for r in details.get("records_b64", [])]
            return self.save(creds, details["descriptor"], records, details.get("data_class"))
        if kind is JobKind.ANALYTICS_RETRIEVE:
            return self.retrieve(creds, details.get("description", {}), details.get("job_id"))
        raise ValueError(f"{kind.value} is not an analytics job")


class SampleModule:
    """Per-store request counts and mean queue depth from monitoring records.

    Records are JSON objects ``{"store_id", "queue_depth", "ts"}``. ``gateway``
    is anything with ``run(raw_job, timeout) -> JobRecord`` (the in-process
    Core or the HTTP client).
    """

    def __init__(self, gateway, creds: Credentials, report_location: tuple, module_id: Optional[str] = None):
        self.gateway = gateway
        self.creds = creds
        self.report_location = loc(report_location)
        self.module_id = module_id or creds.principal_id
        self.runs = 0

    def _job(self, kind: str, details: dict) -> dict:
        return {"initiator": self.creds.to_dict(), "job_description": kind, "job_details": details}

    def run(self, window: tuple, description: Optional[dict] = None) -> dict:
        t0, t1 = window
        query = dict(description or {"class": "monitoring"})
        record = self.gateway.run(self._job("analytics_retrieve", {"description": query}), timeout=60)
        if record.status.value != "finished":
            raise AccessDenied(str(record.data)) if getattr(record.data, "code", "") == "AccessDenied" \
                else RuntimeError(f"retrieve failed: {record.data}")
        per_store: dict = collections.defaultdict(list)
        for r in record.data["records"]:
            if isinstance(r, dict) and "store_id" in r and t0 <= r.get("ts", t0) <= t1:
                per_store[r["store_id"]].append(float(r.get("queue_depth", 0)))
        report = {
            "window": [t0, t1],
            "stores": {s: {"requests": len(d), "mean_queue_depth": sum(d) / len(d)}
                       for s, d in sorted(per_store.items())},
        }
        self.runs += 1
        if report["stores"]:
            report_id = f"{self.module_id}-report-{self.runs}"
            save = self._job("analytics_save", {
                "descriptor": {"dataset_id": report_id,
                               "description": {"class": "federation", "kind": "report", "window": [t0, t1]},
                               "locations": [{"store_id": self.report_location[0],
                                              "collection": self.report_location[1]}]},
                "records": [report],
            })
            saved = self.gateway.run(save, timeout=60)
            report["dataset_id"] = report_id if saved.status.value == "finished" else None
        return report
