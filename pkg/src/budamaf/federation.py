"""Simulated cloud providers, cost quotes and placement.

Cost model (a tunable, not a standard)::

    monetary        = storage_gb * price_storage
                      + egress_gb_per_h * price_egress
                      + requests_per_h / 1000 * price_request
    latency_penalty = latency_ms[user_region] / 100
    score           = monetary + lam * latency_penalty
"""

from __future__ import annotations

import dataclasses
import enum
import itertools
import threading
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .errors import CapacityExceeded, NoFeasiblePlacement

LATENCY_UNIT_MS = 100.0
DEFAULT_LAMBDA = {"cost_first": 1.0, "availability_first": 4.0}


class PlacementMode(str, enum.Enum):
    COST_FIRST = "cost_first"
    AVAILABILITY_FIRST = "availability_first"


@dataclass(frozen=True)
class ProviderDescriptor:
    provider_id: str
    region: str
    capacity_machines: int
    price_storage: float = 0.0    # per GB-hour
    price_egress: float = 0.0     # per GB
    price_request: float = 0.0    # per 1000 requests
    latency_ms: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.price_storage, self.price_egress, self.price_request) < 0:
            raise ValueError(f"{self.provider_id}: prices must be non-negative")
        if self.capacity_machines < 0:
            raise ValueError(f"{self.provider_id}: capacity must be non-negative")

    def latency_to(self, region: str) -> float:
        if region in self.latency_ms:
            return float(self.latency_ms[region])
        if region == self.region:
            return 0.0
        raise KeyError(f"{self.provider_id} has no latency figure for region {region}")

    def scaled(self, factor: float) -> "ProviderDescriptor":
        return dataclasses.replace(
            self,
            price_storage=self.price_storage * factor,
            price_egress=self.price_egress * factor,
            price_request=self.price_request * factor,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ProviderDescriptor":
        return cls(**doc)


@dataclass(frozen=True)
class PlacementRequest:
    machines: int = 1
    expected_storage_gb: float = 0.0
    expected_egress_gb_per_h: float = 0.0
    expected_requests_per_h: float = 0.0
    user_region: str = ""
    mode: PlacementMode = PlacementMode.COST_FIRST


@dataclass(frozen=True)
class CostQuote:
    provider_id: str
    monetary: float
    latency_penalty: float
    score: float


@dataclass(frozen=True)
class PlacementDecision:
    primary: CostQuote
    replicas: tuple = ()
    mode: PlacementMode = PlacementMode.COST_FIRST
    lam: float = 1.0

    @property
    def providers(self) -> list:
        return [self.primary.provider_id] + [q.provider_id for q in self.replicas]


def quote(p: ProviderDescriptor, r: PlacementRequest, lam: float) -> CostQuote:
    if p.capacity_machines < r.machines:
        raise CapacityExceeded(f"{p.provider_id} has {p.capacity_machines} machines, {r.machines} requested")
    monetary = (
        r.expected_storage_gb * p.price_storage
        + r.expected_egress_gb_per_h * p.price_egress
        + (r.expected_requests_per_h / 1000.0) * p.price_request
    )
    penalty = p.latency_to(r.user_region) / LATENCY_UNIT_MS if r.user_region else 0.0
    return CostQuote(p.provider_id, monetary, penalty, monetary + lam * penalty)


def choose_placement(providers: Iterable[ProviderDescriptor], r: PlacementRequest,
                     lam: Optional[float] = None) -> PlacementDecision:
    """Lowest-score feasible provider; ties go to the smaller provider id.

    ``availability_first`` also needs a second provider as replica target.
    """
    mode = PlacementMode(r.mode)
    if lam is None:
        lam = DEFAULT_LAMBDA[mode.value]
    quotes = []
    for p in providers:
        try:
            quotes.append(quote(p, r, lam))
        except CapacityExceeded:
            continue
    quotes.sort(key=lambda q: (q.score, q.provider_id))
    needed = 2 if mode is PlacementMode.AVAILABILITY_FIRST else 1
    if len(quotes) < needed:
        raise NoFeasiblePlacement(f"{len(quotes)} feasible provider(s), {mode.value} needs {needed}")
    return PlacementDecision(quotes[0], tuple(quotes[1:needed]), mode, lam)


@dataclass(frozen=True)
class Machine:
    machine_id: str
    provider_id: str

    def to_dict(self) -> dict:
        return {"machine_id": self.machine_id, "provider_id": self.provider_id}


class Federation:
    """The pool of providers and the machines allocated on them."""

    def __init__(self, providers: Iterable[ProviderDescriptor] = ()):
        self.providers: dict[str, ProviderDescriptor] = {}
        self.allocated: dict[str, set] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        for p in providers:
            self.add_provider(p)

    def add_provider(self, p: ProviderDescriptor) -> None:
        with self._lock:
            self.providers[p.provider_id] = p
            self.allocated.setdefault(p.provider_id, set())

    def provider(self, provider_id: str) -> ProviderDescriptor:
        try:
            return self.providers[provider_id]
        except KeyError:
            raise CapacityExceeded(f"unknown provider {provider_id}") from None

    def free(self, provider_id: str) -> int:
        with self._lock:
            return self.provider(provider_id).capacity_machines - len(self.allocated[provider_id])

    def free_view(self) -> list:
        """Providers as descriptors whose capacity is what is still free."""
        with self._lock:
            return [
                dataclasses.replace(p, capacity_machines=p.capacity_machines - len(self.allocated[pid]))
                for pid, p in sorted(self.providers.items())
            ]

    def allocate(self, provider_id: str, count: int) -> list:
        with self._lock:
            p = self.provider(provider_id)
            used = self.allocated[provider_id]
            if p.capacity_machines - len(used) < count:
                raise CapacityExceeded(
                    f"{provider_id}: {p.capacity_machines - len(used)} free, {count} requested")
            machines = [Machine(f"{provider_id}-m{next(self._ids)}", provider_id) for _ in range(count)]
            used.update(m.machine_id for m in machines)
            return machines

    def release(self, machines: Iterable[Machine]) -> None:
        with self._lock:
            for m in machines:
                self.allocated.get(m.provider_id, set()).discard(m.machine_id)

    def accounting(self) -> dict:
        """provider -> (allocated, free, capacity)."""
        with self._lock:
            return {
                pid: (len(self.allocated[pid]), p.capacity_machines - len(self.allocated[pid]), p.capacity_machines)
                for pid, p in sorted(self.providers.items())
            }
