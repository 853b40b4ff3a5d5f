"""Deterministic federation simulation and the scenario harness.

One logical clock drives everything: load arrivals, queue service, health
probes and replication cycles are heap events fired by ``advance_clock``.
Jobs submitted to the gateway are awaited before the clock moves on, so a
trace is a pure function of ``(seed, config)``.

Scenario config (JSON, every key optional; see ``DEFAULTS``)::

    {"seed": 7, "providers": [...], "tick_s": 1.0, "service_rate": 4.0, "q_high": 8,
     "visitors": 300000, "scale_factor": 1000, "ramp_factor": 2.0,
     "phases_s": {"warm": 10, "up": 10, "plateau": 20, "down": 10, "tail": 30}}
"""

from __future__ import annotations

import copy
import heapq
import itertools
import json
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import ScenarioAssertionFailed
from .federation import PlacementRequest, choose_placement
from .protocol import JobStatus
from .stack import StackConfig, build_stack
from .wrappers.base import UniformQuery

logger = logging.getLogger(__name__)

SCENARIOS = ("das_fest", "traveling_user", "overload_no_remedy")


def _provider(pid, region, capacity, price, latency):
    return {"provider_id": pid, "region": region, "capacity_machines": capacity, "price_storage": price,
            "price_egress": price * 2, "price_request": price / 10, "latency_ms": latency}


DEFAULTS = {
    "das_fest": {
        "seed": 7,
        "providers": [
            _provider("EU-1", "eu", 8, 0.020, {"eu": 10, "kr": 250}),
            _provider("EU-2", "eu", 8, 0.030, {"eu": 15, "kr": 240}),
            _provider("KR-1", "kr", 8, 0.018, {"eu": 250, "kr": 8}),
        ],
        "home_provider": "EU-1",
        "user_region": "eu",
        "tick_s": 1.0,
        "service_rate": 4.0,
        "q_high": 8,
        "release_utilization": 0.8,
        "visitors": 300000,
        "scale_factor": 1000,
        "ramp_factor": 2.0,
        "phases_s": {"warm": 10, "up": 10, "plateau": 20, "down": 10, "tail": 30},
    },
    "traveling_user": {
        "seed": 7,
        "providers": [
            _provider("KR-1", "kr", 4, 0.018, {"kr": 8, "eu": 250}),
            _provider("EU-1", "eu", 4, 0.020, {"eu": 10, "kr": 250}),
            _provider("EU-2", "eu", 4, 0.030, {"eu": 14, "kr": 240}),
        ],
        "home_provider": "KR-1",
        "origin_region": "kr",
        "destination_region": "eu",
        "records": 50,
        "tick_s": 1.0,
        "read_rate": 2.0,
        "announce_at_s": 10,
        "arrive_at_s": 30,
        "duration_s": 45,
    },
    "overload_no_remedy": {
        "seed": 7,
        "providers": [_provider("ONLY-1", "eu", 2, 0.020, {"eu": 10})],
        "home_provider": "ONLY-1",
        "tick_s": 1.0,
        "service_rate": 4.0,
        "q_high": 8,
        "burst_rate": 20.0,
        "duration_s": 10,
    },
}


@dataclass
class ScenarioTrace:
    name: str
    seed: int
    events: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def record(self, t: float, event: str, **info) -> None:
        self.events.append({"t": round(t, 6), "event": event, **info})

    def of(self, event: str) -> list:
        return [e for e in self.events if e["event"] == event]

    def to_ndjson(self) -> str:
        lines = [json.dumps(e, sort_keys=True) for e in self.events]
        lines.append(json.dumps({"event": "summary", "name": self.name, "seed": self.seed, **self.summary},
                                sort_keys=True))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"name": self.name, "seed": self.seed, "events": self.events, "summary": self.summary}

    def human_summary(self) -> str:
        out = [f"scenario {self.name} (seed {self.seed}): {len(self.events)} events"]
        out += [f"  {k}: {v}" for k, v in sorted(self.summary.items())]
        return "\n".join(out)


class SimClock:
    """Seeded event heap on a logical timeline."""

    def __init__(self, seed: int):
        self.now = 0.0
        self.rng = random.Random(seed)
        self._heap: list = []
        self._seq = itertools.count()

    def schedule(self, at: float, name: str, fn: Callable[[float], None]) -> None:
        heapq.heappush(self._heap, (at, next(self._seq), name, fn))

    def every(self, interval: float, name: str, fn: Callable[[float], None], start: Optional[float] = None,
              until: float = math.inf) -> None:
        def tick(t):
            fn(t)
            if t + interval <= until:
                self.schedule(t + interval, name, tick)
        self.schedule(self.now + interval if start is None else start, name, tick)

    def poisson(self, rate: Callable[[float], float], peak: float, name: str, fn: Callable[[float], None],
                start: float = 0.0, until: float = math.inf) -> None:
        """Non-homogeneous arrivals by thinning a rate-``peak`` process."""
        if peak <= 0:
            return

        def candidate(t):
            if self.rng.random() * peak <= rate(t):
                fn(t)
            nxt = t + self.rng.expovariate(peak)
            if nxt <= until:
                self.schedule(nxt, name, candidate)

        first = start + self.rng.expovariate(peak)
        if first <= until:
            self.schedule(first, name, candidate)

    def advance_clock(self, dt: float) -> list:
        """Fire every event due within ``dt``; returns ``[(t, name)]`` in order."""
        if dt <= 0:
            return []
        target = self.now + dt
        fired = []
        while self._heap and self._heap[0][0] <= target:
            at, _, name, fn = heapq.heappop(self._heap)
            self.now = at
            fn(at)
            fired.append((at, name))
        self.now = target
        return fired


class _LogCapture(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.records = []

    def emit(self, record):
        self.records.append(record)


class Simulation:
    """A gateway stack under a simulated clock, with a queue model per store."""

    principal = {"principal_id": "sim-app", "token": "sim", "roles": ["application"]}

    def __init__(self, name: str, config: dict):
        self.name = name
        self.cfg = config
        self.seed = int(config["seed"])
        self.clock = SimClock(self.seed)
        self.trace = ScenarioTrace(name, self.seed)
        self.stack = build_stack(StackConfig(providers=copy.deepcopy(config["providers"]),
                                             q_high=config.get("q_high", 64),
                                             catalog_provider=config["home_provider"]))
        self.core = self.stack.core
        self.backlog: dict[str, float] = {}
        self.jobs = {"submitted": 0, "finished": 0, "crashed": 0}
        self._keys = itertools.count()
        self.written: list = []

    def close(self) -> None:
        self.stack.close()

    # -- gateway plumbing -------------------------------------------------

    def job(self, kind: str, details: dict):
        self.jobs["submitted"] += 1
        try:
            record = self.core.run({"initiator": self.principal, "job_description": kind,
                                    "job_details": details}, timeout=30)
        except Exception as exc:
            self.jobs["crashed"] += 1
            return None, exc
        self.jobs["finished" if record.status is JobStatus.FINISHED else "crashed"] += 1
        return record, None

    def instances(self, store_id: str) -> list:
        return list(self.stack.offloading.store(store_id).instances)

    def background(self, until: float, every: float = 5.0) -> None:
        """Periodic replication cycles and health probes."""
        self.clock.every(every, "replication", lambda t: self.stack.offloading.sync_cycle(), until=until)
        self.clock.every(every, "health", lambda t: self.core.probe_health(), until=until)

    def check_capacity(self, t: float) -> None:
        for pid, (used, free, cap) in self.stack.federation.accounting().items():
            if used + free != cap or used > cap:
                raise ScenarioAssertionFailed(f"t={t}: capacity accounting broken on {pid}")

    def serve(self, store_id: str, dt: float) -> float:
        capacity = len(self.instances(store_id)) * self.cfg["service_rate"] * dt
        self.backlog[store_id] = max(0.0, self.backlog.get(store_id, 0.0) - capacity)
        return self.backlog[store_id]

    def arrive_write(self, store_id: str, t: float) -> bool:
        key = f"req-{next(self._keys):06d}"
        record, _ = self.job("write", {"store_id": store_id, "key": key, "value": json.dumps({"t": round(t, 6)})})
        self.backlog[store_id] = self.backlog.get(store_id, 0.0) + 1
        ok = record is not None and record.status is JobStatus.FINISHED
        if ok:
            self.written.append(key)
        return ok

    def create_store(self, store_id: str, kind: str, provider_id: str, machines: int = 1) -> dict:
        record, exc = self.job("create_store", {"kind": kind, "provider_id": provider_id, "machines": machines,
                                                "store_id": store_id, "metadata": {"data_class": "application"}})
        if record is None or record.status is not JobStatus.FINISHED:
            raise ScenarioAssertionFailed(f"could not create {store_id}: {exc or record.data}")
        self.trace.record(self.clock.now, "store_created", store_id=store_id, provider_id=provider_id,
                          machines=machines)
        return record.data


# -- scenarios --------------------------------------------------------------


def _das_fest(sim: Simulation) -> None:
    cfg, trace, clock = sim.cfg, sim.trace, sim.clock
    ph = cfg["phases_s"]
    warm, up, plateau, down, tail = ph["warm"], ph["up"], ph["plateau"], ph["down"], ph["tail"]
    ramp_end = warm + up + plateau + down
    horizon = ramp_end + tail
    total = cfg["visitors"] / cfg["scale_factor"]
    k = cfg["ramp_factor"]
    # area under the unit-base shape, used to hit the requested request total
    area = warm + (1 + k) / 2 * up + k * plateau + (1 + k) / 2 * down + tail
    base = total / area
    peak = base * k

    def rate(t):
        if t < warm:
            return base
        if t < warm + up:
            return base + (peak - base) * (t - warm) / up
        if t < warm + up + plateau:
            return peak
        if t < ramp_end:
            return peak - (peak - base) * (t - warm - up - plateau) / down
        return base

    store = "festival"
    sim.create_store(store, "key_value", cfg["home_provider"])
    baseline = len(sim.instances(store))
    arrivals = {"n": 0, "ok": 0}
    added: list = []

    def arrival(t):
        arrivals["n"] += 1
        arrivals["ok"] += sim.arrive_write(store, t)

    def probe(t):
        depth = sim.serve(store, cfg["tick_s"])
        sim.stack.offloading.observe_queue_depth(store, int(math.ceil(depth)))
        n_inst = len(sim.instances(store))
        trace.record(t, "queue", depth=round(depth, 3), instances=n_inst, rate=round(rate(t), 4))
        if depth > cfg["q_high"]:
            before = {m.machine_id for m in sim.instances(store)}
            record, exc = sim.job("offload", {"store_id": store, "queue_depth": int(math.ceil(depth))})
            if record is not None and record.status is JobStatus.FINISHED and record.data["action"] == "scale":
                new = [m for m in sim.instances(store) if m.machine_id not in before]
                added.extend(new)
                trace.record(t, "scale", delta=len(new), provider_id=record.data["target"]["provider_id"],
                             depth=round(depth, 3))
            else:
                trace.record(t, "offload_failed", error=str(exc or record.data))
        elif depth == 0 and added and rate(t) <= (n_inst - 1) * cfg["service_rate"] * cfg["release_utilization"]:
            machine = added.pop()
            record, exc = sim.job("scale_store", {"store_id": store, "direction": "in",
                                                  "machines": [{"machine_id": machine.machine_id}]})
            if record is not None and record.status is JobStatus.FINISHED:
                trace.record(t, "release", delta=-1, machine_id=machine.machine_id)
            else:
                added.append(machine)
                trace.record(t, "release_failed", error=str(exc or record.data))
        sim.check_capacity(t)

    clock.poisson(rate, peak, "arrival", arrival, until=horizon)
    clock.every(cfg["tick_s"], "probe", probe, until=horizon)
    sim.background(horizon)
    clock.advance_clock(horizon + cfg["tick_s"])

    readable = sum(1 for key in sim.written
                   if sim.stack.offloading.dispatch(UniformQuery("read", store, key=key)).ok)
    scaled = sum(e["delta"] for e in trace.of("scale"))
    released = -sum(e["delta"] for e in trace.of("release"))
    trace.summary.update(
        requests=arrivals["n"], finished_writes=arrivals["ok"], readable=readable,
        lost=arrivals["n"] - readable, scaled_up=scaled, released=released,
        final_instances=len(sim.instances(store)), baseline_instances=baseline,
        expected_requests=round(total, 3),
    )
    # bursts at base load may add a scale outside the ramp; the ramp itself must trigger one
    scale_ts = [e["t"] for e in trace.of("scale")]
    if not any(warm <= t <= ramp_end for t in scale_ts):
        raise ScenarioAssertionFailed(f"das_fest: expected scale-up during the ramp, got {scale_ts}")
    release_ts = [e["t"] for e in trace.of("release")]
    if not release_ts or max(release_ts) <= max(scale_ts) or max(release_ts) <= warm + up + plateau:
        raise ScenarioAssertionFailed("das_fest: expected instance release after the ramp")
    if released != scaled or len(sim.instances(store)) != baseline:
        raise ScenarioAssertionFailed(f"das_fest: released {released} of {scaled} added machines")
    if readable != arrivals["n"]:
        raise ScenarioAssertionFailed(f"das_fest: {arrivals['n'] - readable} requests lost")


def _traveling_user(sim: Simulation) -> None:
    cfg, trace, clock = sim.cfg, sim.trace, sim.clock
    fed = sim.stack.federation
    store = "user-data"
    sim.create_store(store, "document", cfg["home_provider"])
    for i in range(cfg["records"]):
        record, _ = sim.job("write", {"store_id": store, "key": f"item-{i:04d}",
                                      "value": json.dumps({"item": i})})
        if record is None or record.status is not JobStatus.FINISHED:
            raise ScenarioAssertionFailed(f"traveling_user: seeding write {i} failed")
    state = {"region": cfg["origin_region"], "migrated": None, "reads": 0}

    def serving_provider():
        location = sim.stack.offloading.resolve((store, "default"))
        return fed.provider(sim.stack.offloading.store(location[0]).provider_id)

    def read(t):
        key = f"item-{sim.clock.rng.randrange(cfg['records']):04d}"
        record, _ = sim.job("read", {"store_id": store, "key": key})
        provider = serving_provider()
        ok = record is not None and record.status is JobStatus.FINISHED
        state["reads"] += 1
        trace.record(t, "read", ok=ok, provider_id=provider.provider_id, user_region=state["region"],
                     latency_ms=provider.latency_to(state["region"]))

    def announce(t):
        dest = cfg["destination_region"]
        candidates = [p for p in fed.free_view() if p.region == dest] or fed.free_view()
        decision = choose_placement(candidates, PlacementRequest(machines=1, user_region=dest))
        target = decision.primary.provider_id
        trace.record(t, "location_change", from_region=state["region"], to_region=dest,
                     arrive_at=cfg["arrive_at_s"])
        new_store = f"{store}-{dest}"
        sim.create_store(new_store, "document", target)
        trace.record(t, "migrate_started", src=store, dst=new_store, provider_id=target,
                     region=fed.provider(target).region)
        record, exc = sim.job("migrate", {"src": {"store_id": store}, "dst": {"store_id": new_store}})
        if record is None or record.status is not JobStatus.FINISHED:
            raise ScenarioAssertionFailed(f"traveling_user: migrate failed: {exc or record.data}")
        trace.record(t, "migrate_finished", records=record.data["records"])
        state["migrated"] = t

    def arrive(t):
        state["region"] = cfg["destination_region"]
        trace.record(t, "user_arrived", region=state["region"])

    sim.background(cfg["duration_s"])
    clock.schedule(cfg["announce_at_s"], "announce", announce)
    clock.schedule(cfg["arrive_at_s"], "arrive", arrive)
    clock.poisson(lambda t: cfg["read_rate"], cfg["read_rate"], "read", read, until=cfg["duration_s"])
    clock.advance_clock(cfg["duration_s"] + cfg["tick_s"])

    old = fed.provider(cfg["home_provider"])
    dest = cfg["destination_region"]
    post = [e["latency_ms"] for e in trace.of("read") if e["t"] >= cfg["arrive_at_s"]]
    before_move = old.latency_to(dest)
    started = trace.of("migrate_started")
    trace.summary.update(reads=state["reads"], migrated_at=state["migrated"],
                         unmigrated_latency_ms=before_move,
                         post_move_mean_latency_ms=(sum(post) / len(post)) if post else None,
                         all_reads_ok=all(e["ok"] for e in trace.of("read")))
    if not started or started[0]["t"] >= cfg["arrive_at_s"]:
        raise ScenarioAssertionFailed("traveling_user: no migration started before arrival")
    if started[0]["region"] != dest:
        raise ScenarioAssertionFailed(f"traveling_user: migration targets region {started[0]['region']}")
    if not post or max(post) >= before_move:
        raise ScenarioAssertionFailed("traveling_user: post-move read latency did not drop")
    if not all(e["ok"] for e in trace.of("read")):
        raise ScenarioAssertionFailed("traveling_user: a read failed")
    # the source copy is gone after cutover
    if sim.stack.offloading.snapshot((store, "default")) != sim.stack.offloading.snapshot((f"{store}-{dest}", "default")):
        raise ScenarioAssertionFailed("traveling_user: catalog does not point readers at the new copy")


def _overload_no_remedy(sim: Simulation) -> None:
    cfg, trace, clock = sim.cfg, sim.trace, sim.clock
    store = "hot"
    free = sim.stack.federation.free(cfg["home_provider"])
    sim.create_store(store, "key_value", cfg["home_provider"], machines=free)
    capture = _LogCapture()
    logging.getLogger("budamaf").addHandler(capture)
    overloaded = {"n": 0}

    def arrival(t):
        sim.arrive_write(store, t)

    def probe(t):
        depth = sim.serve(store, cfg["tick_s"])
        trace.record(t, "queue", depth=round(depth, 3), instances=len(sim.instances(store)))
        if depth > cfg["q_high"]:
            record, exc = sim.job("offload", {"store_id": store, "queue_depth": int(math.ceil(depth))})
            code = getattr(record.data, "code", None) if record is not None else getattr(exc, "code", None)
            if code == "Overloaded":
                overloaded["n"] += 1
                trace.record(t, "overloaded", depth=round(depth, 3))
            else:
                trace.record(t, "offload", result=str(record.data if record else exc))
        sim.check_capacity(t)

    try:
        clock.poisson(lambda t: cfg["burst_rate"], cfg["burst_rate"], "arrival", arrival, until=cfg["duration_s"])
        clock.every(cfg["tick_s"], "probe", probe, until=cfg["duration_s"])
        sim.background(cfg["duration_s"])
        clock.advance_clock(cfg["duration_s"] + cfg["tick_s"])
    finally:
        logging.getLogger("budamaf").removeHandler(capture)
    logged = sum(1 for r in capture.records if "high load" in r.getMessage())
    trace.summary.update(overloaded_events=overloaded["n"], overload_log_records=logged,
                         free_machines=sum(f for _, f, _ in sim.stack.federation.accounting().values()))
    if overloaded["n"] < 1:
        raise ScenarioAssertionFailed("overload_no_remedy: Overloaded never surfaced")
    if logged < 1:
        raise ScenarioAssertionFailed("overload_no_remedy: no log record for the overload")


_RUNNERS = {"das_fest": _das_fest, "traveling_user": _traveling_user, "overload_no_remedy": _overload_no_remedy}


def scenario_config(name: str, overrides: Optional[dict] = None, seed: Optional[int] = None) -> dict:
    if name not in _RUNNERS:
        raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    cfg = copy.deepcopy(DEFAULTS[name])
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def run_scenario(name: str, config: Optional[dict] = None, seed: Optional[int] = None) -> ScenarioTrace:
    """Run one scenario; raises ScenarioAssertionFailed on the first violated check."""
    cfg = scenario_config(name, config, seed)
    sim = Simulation(name, cfg)
    try:
        _RUNNERS[name](sim)
        sim.trace.summary["jobs"] = dict(sim.jobs)
    finally:
        sim.close()
    return sim.trace
