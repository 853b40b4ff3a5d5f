"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines.
"""

import itertools
import random
import threading

import pytest

from budamaf import enforcement
from budamaf.errors import CapabilityMissing, IllegalTransition, MethodNotAllowed, NoFeasiblePlacement, \
    VerificationFailed
from budamaf.federation import (
    DEFAULT_LAMBDA,
    Federation,
    PlacementMode,
    PlacementRequest,
    ProviderDescriptor,
    choose_placement,
)
from budamaf.offloading import OffloadingAPIs, WrapperRegistration
from budamaf.protocol import (
    TRANSITIONS,
    ErrorDescription,
    JobEvent,
    JobRecord,
    JobStatus,
    parse_job_request,
    transition,
)
from budamaf.security import ACTIONS, DataClass, SecurityEngine
from budamaf.server import GatewayApp, _request, serve
from budamaf.simulation import SCENARIOS, run_scenario
from budamaf.wrappers import KINDS, UniformQuery, make_wrapper
from budamaf.wrappers.base import Backend

from conftest import Gate, creds, make_stack
from oracles import AclOracle, KeyModel, brute_force_argmin, digest_set, quote_score
from scripts import crud_script, fresh, model_crud, run_crud, run_txn_script, txn_script

pytestmark = pytest.mark.acceptance


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {title}: {detail}")
    assert ok, f"criterion {n} failed: {detail}"


def federated_apis(capacity=64):
    fed = Federation([ProviderDescriptor("EU-1", "eu", capacity, 1.0, 1.0, 1.0, {"eu": 10, "kr": 250}),
                      ProviderDescriptor("KR-1", "kr", capacity, 1.5, 1.0, 1.0, {"eu": 250, "kr": 8})])
    apis = OffloadingAPIs(fed, SecurityEngine())
    for kind in KINDS:
        backend = Backend(make_wrapper(kind).engine_class)
        w = make_wrapper(kind, wrapper_id=f"{kind}-0", backend=backend)
        apis.register_wrapper(WrapperRegistration(w.wrapper_id, kind, "local", pool=f"p-{kind}"), w)
    return apis


def snapshot_digests(apis, location):
    return {(k, d) for k, _, d in apis.snapshot(location)}


# 1 ---------------------------------------------------------------------------------------


def test_criterion_1_state_machine():
    legal = {}
    for s, e in itertools.product(JobStatus, JobEvent):
        try:
            legal[(s, e)] = transition(s, e)
        except IllegalTransition:
            pass
    pairs = len(JobStatus) * len(JobEvent)
    table_ok = pairs == 12 and legal == {
        (JobStatus.PENDING, JobEvent.START): JobStatus.RUNNING,
        (JobStatus.RUNNING, JobEvent.SUCCEED): JobStatus.FINISHED,
        (JobStatus.RUNNING, JobEvent.FAIL): JobStatus.CRASHED,
    } and legal == dict(TRANSITIONS)

    rng = random.Random(1)
    illegal_reached = 0
    raw = {"initiator": {"principal_id": "app1", "token": "t", "roles": ["application"]},
           "job_description": "read", "job_details": {"store_id": "s", "key": "k"}}
    for _ in range(1000):
        job = parse_job_request(raw)
        for _ in range(rng.randint(1, 10)):
            event = rng.choice(list(JobEvent))
            before = job.status
            try:
                job = job.advance(event, ErrorDescription("E", "x") if event is JobEvent.FAIL else None)
            except IllegalTransition:
                if (before, event) in TRANSITIONS:
                    illegal_reached += 1
                continue
            if TRANSITIONS.get((before, event)) is not job.status:
                illegal_reached += 1
            # every reachable record must survive a schema round trip
            if JobRecord.from_dict(job.to_dict()).status is not job.status:
                illegal_reached += 1
    verdict(1, "state machine", table_ok and illegal_reached == 0,
            f"{len(legal)} legal edges of {pairs} pairs; 1000 random lifecycles, {illegal_reached} illegal states")


# 2 ---------------------------------------------------------------------------------------


def test_criterion_2_polyglot_crud():
    script = crud_script(random.Random(2), 200)
    want = model_crud(script)
    results = {kind: run_crud(fresh(kind), script) for kind in KINDS}
    divergences = sum(1 for i in range(len(script)) if len({repr(results[k][i]) for k in KINDS}) != 1)
    vs_model = sum(1 for k in KINDS for i in range(len(script)) if results[k][i] != want[i])
    verdict(2, "polyglot CRUD", divergences == 0 and vs_model == 0,
            f"{len(script)} ops x {len(KINDS)} kinds; {divergences} cross-kind divergences, "
            f"{vs_model} disagreements with the reference model")


# 3 ---------------------------------------------------------------------------------------


def test_criterion_3_migration_safety():
    rng = random.Random(3)
    pairs = [(a, b) for a in KINDS for b in KINDS]
    equal = intact = 0
    covered = set()
    for i in range(100):
        src_kind, dst_kind = pairs[i % len(pairs)]
        covered.add((src_kind, dst_kind))
        n = rng.randint(10, 1000)
        data = {f"r{j:05d}": rng.randbytes(rng.randint(1, 64)) for j in range(n)}

        apis = federated_apis()
        apis.create_store(src_kind, "EU-1", 1, "a")
        apis.create_store(dst_kind, "KR-1", 1, "b")
        for k, v in data.items():
            assert apis.dispatch(UniformQuery("write", "a", "c", key=k, payload=v)).ok
        report = apis.migrate(("a", "c"), ("b", "c"))
        if (report.records == n and snapshot_digests(apis, ("b", "c")) == digest_set(data.items())
                and apis._snapshot(apis.store("a"), "c") == []):
            equal += 1

        apis = federated_apis()
        apis.create_store(src_kind, "EU-1", 1, "a")
        apis.create_store(dst_kind, "KR-1", 1, "b")
        for k, v in data.items():
            apis.dispatch(UniformQuery("write", "a", "c", key=k, payload=v))
        victim = rng.choice(sorted(data))
        try:
            apis.migrate(("a", "c"), ("b", "c"), corrupt=lambda k, v: v + b"\x00" if k == victim else v)
        except VerificationFailed:
            if (snapshot_digests(apis, ("a", "c")) == digest_set(data.items())
                    and apis._snapshot(apis.store("b"), "c") == []
                    and apis.resolve(("a", "c")) == ("a", "c")):
                intact += 1
    verdict(3, "migration safety", equal == 100 and intact == 100 and len(covered) == 9,
            f"digest equality {equal}/100, corruption caught with source intact {intact}/100, "
            f"{len(covered)} ordered kind pairs")


# 4 ---------------------------------------------------------------------------------------


def test_criterion_4_replication_convergence():
    converged, worst = 0, 0
    for seed in range(20):
        rng = random.Random(400 + seed)
        apis = federated_apis()
        src_kind, dst_kind = rng.choice(KINDS), rng.choice(KINDS)
        apis.create_store(src_kind, "EU-1", 1, "a")
        apis.create_store(dst_kind, "KR-1", 1, "b")
        for j in range(20):
            apis.dispatch(UniformQuery("write", "a", "c", key=f"k{j}", payload=b"seed"))
        link = apis.replicate(("a", "c"), ("b", "c"), "continuous")
        model = KeyModel()
        for j in range(20):
            model.apply("write", f"k{j}", b"seed")
        ops = []
        for j in range(500):
            op = rng.choice(["write", "write", "update", "delete"])
            ops.append((op, f"k{rng.randrange(40)}", b"v%d" % j if op != "delete" else None))
        done = threading.Event()

        def writer():
            for op, key, value in ops:
                apis.dispatch(UniformQuery(op, "a", "c", key=key, payload=value))
                model.apply(op, key, value)
            done.set()

        t = threading.Thread(target=writer)
        t.start()
        while not done.is_set():
            apis.sync_cycle()
        t.join()
        cycles = None
        for k in range(1, 6):
            apis.sync_cycle(link.link_id)
            if snapshot_digests(apis, ("b", "c")) == snapshot_digests(apis, ("a", "c")):
                cycles = k
                break
        source_right = snapshot_digests(apis, ("a", "c")) == digest_set(model.data.items())
        if cycles is not None and source_right:
            converged += 1
            worst = max(worst, cycles)
    verdict(4, "replication convergence", converged == 20,
            f"{converged}/20 seeds reached digest equality within 5 cycles after writes stopped "
            f"(worst case {worst} cycles)")


# 5 ---------------------------------------------------------------------------------------


def test_criterion_5_security_enforcement():
    rng = random.Random(5)
    stack = make_stack()
    gate = Gate(stack)
    plain_hits = checked = 0
    digest_bad = digest_checked = 0
    try:
        for kind in KINDS:
            gate.store("app1", kind, f"app-{kind}", data_class="application")
            gate.store("app1", kind, f"mon-{kind}", data_class="monitoring")
            gate.store("admin", kind, f"fed-{kind}", data_class="federation")
        for i in range(60):
            kind = KINDS[i % 3]
            value = '{"email": "u%d@example.org", "n": %d, "pad": "%s"}' % (i, i, "x" * rng.randint(0, 40))
            gate.ok("app1", "write", {"store_id": f"app-{kind}", "key": f"k{i}", "value": value})
            gate.ok("app1", "write", {"store_id": f"mon-{kind}", "key": f"k{i}", "value": value})
            gate.ok("admin", "write", {"store_id": f"fed-{kind}", "key": f"k{i}", "value": value})
            for prefix in ("app", "mon", "fed"):
                (blob,) = [b for k, b, _ in stack.offloading.snapshot((f"{prefix}-{kind}", "default"))
                           if k == f"k{i}"]
                raw = value.encode()
                if prefix == "app":
                    checked += 1
                    plain_hits += blob == raw or raw in blob
                else:
                    digest_checked += 1
                    ok = (enforcement.flags_of(blob) & enforcement.FLAG_INTEGRITY
                          and enforcement.attached_digest(blob) == enforcement.sha256(raw)
                          and enforcement.sha256(enforcement.body_of(blob)) == enforcement.attached_digest(blob))
                    digest_bad += not ok
    finally:
        stack.close()

    eng = SecurityEngine()
    datasets = ["ds0", "ds1", "ds2"]
    for d in datasets:
        eng.register_dataset(creds("app1"), d, DataClass.APPLICATION)
    base, ops = len(eng.audit), 0
    for _ in range(500):
        op = rng.choice(["protocol_query", "check", "grant", "policy_update", "revoke", "view", "register"])
        who = creds(rng.choice(["app1", "app2", "sec", "admin"]))
        ds = rng.choice(datasets + ["ghost"])
        ops += 1
        try:
            if op == "protocol_query":
                eng.protocol_query(rng.choice(list(DataClass)), creds=who)
            elif op == "check":
                eng.check_access(who, ds, rng.choice(ACTIONS))
            elif op == "grant":
                eng.grant(who, ds, rng.choice(ACTIONS), ["app3"])
            elif op == "policy_update":
                eng.policy_update(who, {"grants": [{"dataset_id": ds, "action": "read", "principals": ["app2"]}]})
            elif op == "revoke":
                eng.revoke(who, ds)
            elif op == "view":
                eng.policy_view(who)
            else:
                eng.register_dataset(who, rng.choice(datasets + ["fresh"]), DataClass.MONITORING)
        except Exception:
            pass
    audited = len(eng.audit) - base

    stack = make_stack()
    httpd = serve(GatewayApp(stack), port=0)
    url = "http://%s:%d" % httpd.server_address[:2]
    headers = {"X-Principal": "sec", "X-Token": "tok-sec"}
    statuses = []
    try:
        for path in ["", "policy", "ds0", "a/b/c", "?x=1"] * 10:
            statuses.append(_request("PUT", f"{url}/security_engine/{path}", {"update": {}}, headers)[0])
        try:
            stack.security.handle_put()
            direct = False
        except MethodNotAllowed:
            direct = True
    finally:
        httpd.shutdown()
        stack.close()
    ok = (plain_hits == 0 and digest_bad == 0 and audited == ops
          and set(statuses) == {405} and direct)
    verdict(5, "security enforcement", ok,
            f"application plaintext at rest {plain_hits}/{checked}; digest failures {digest_bad}/{digest_checked}; "
            f"audit entries {audited} for {ops} security ops; PUT statuses {sorted(set(statuses))}")


# 6 ---------------------------------------------------------------------------------------


def test_criterion_6_access_control():
    principals = ["app1", "app2", "app3", "sec"]
    mismatches = checks = 0
    for fixture in range(50):
        rng = random.Random(600 + fixture)
        apis = federated_apis()
        sec = apis.security
        oracle = AclOracle()
        datasets = [f"d{i}" for i in range(rng.randint(1, 5))]
        for d in datasets:
            owner = rng.choice(principals[:3])
            sec.register_dataset(creds(owner), d, rng.choice(list(DataClass)))
            oracle.register(d, owner)

        def compare():
            nonlocal mismatches, checks
            for p, d, a in itertools.product(principals, datasets, ACTIONS):
                checks += 1
                mismatches += sec.check_access(creds(p), d, a).allowed != oracle.allowed(p, d, a)

        compare()
        for _ in range(rng.randint(1, 6)):
            d = rng.choice(datasets)
            audience = rng.sample(principals, rng.randint(0, len(principals)))
            apis.publish(d, audience, oracle.owner[d])
            oracle.publish(d, audience)
            compare()
            if rng.random() < 0.6:
                sec.revoke(creds(oracle.owner[d]), d)
                oracle.revoke(d)
                compare()
    verdict(6, "access control", mismatches == 0,
            f"50 fixtures, {checks} checks against the set-membership oracle, {mismatches} mismatches")


# 7 ---------------------------------------------------------------------------------------


def test_criterion_7_acid_pass_through():
    failing = []
    for seed in range(200):
        initial, steps = txn_script(random.Random(700 + seed))
        problems = run_txn_script(initial, steps)
        if problems:
            failing.append((seed, problems[0]))
    apis = federated_apis()
    attempts = refused = 0
    for kind in ("key_value", "document"):
        apis.create_store(kind, "EU-1", 1, kind)
        for q in (UniformQuery("begin", kind, "c"),
                  UniformQuery("read", kind, "c", key="k", txn_id="t1"),
                  UniformQuery("write", kind, "c", key="k", payload=b"v", txn_id="t1"),
                  UniformQuery("commit", kind, "c", txn_id="t1"),
                  UniformQuery("abort", kind, "c", txn_id="t1")) * 10:
            attempts += 1
            try:
                apis.dispatch(q)
            except CapabilityMissing:
                refused += 1
    verdict(7, "ACID pass-through", not failing and refused == attempts,
            f"{200 - len(failing)}/200 scripts match the serial oracle; "
            f"CapabilityMissing {refused}/{attempts} on non-transactional kinds"
            + (f"; first failure seed {failing[0][0]}: {failing[0][1]}" if failing else ""))


# 8 ---------------------------------------------------------------------------------------


def test_criterion_8_placement_optimality():
    rng = random.Random(8)
    regions = ["eu", "kr", "us"]
    agree = ties = infeasible = invariant = 0
    for _ in range(1000):
        n = rng.randint(4, 16)
        # coarse price grids make exact ties common
        ps = [ProviderDescriptor(f"P{i:02d}", rng.choice(regions), rng.randint(0, 4),
                                 rng.choice([0.0, 0.5, 1.0, 2.0]), rng.choice([0.0, 1.0]), rng.choice([0.0, 1.0]),
                                 {r: rng.choice([0.0, 50.0, 100.0, 200.0]) for r in regions})
              for i in rng.sample(range(40), n)]
        mode = rng.choice(list(PlacementMode))
        r = PlacementRequest(rng.randint(1, 3), float(rng.randint(0, 8)), float(rng.randint(0, 4)),
                             float(rng.choice([0, 1000, 4000])), rng.choice(regions + [""]), mode)
        lam = DEFAULT_LAMBDA[mode.value]
        needed = 2 if mode is PlacementMode.AVAILABILITY_FIRST else 1
        rd = {"machines": r.machines, "storage": r.expected_storage_gb, "egress": r.expected_egress_gb_per_h,
              "requests": r.expected_requests_per_h, "region": r.user_region}
        want = brute_force_argmin([p.to_dict() for p in ps], rd, lam, needed)
        scores = [quote_score(p.to_dict(), rd, lam) for p in ps]
        feasible = sorted(s for s in scores if s is not None)
        if len(feasible) > 1 and feasible[0] == feasible[1]:
            ties += 1
        try:
            got = choose_placement(ps, r).providers
        except NoFeasiblePlacement:
            got = None
            infeasible += 1
        agree += got == want
        k = rng.choice([0.5, 2.0, 4.0])     # powers of two scale scores exactly
        try:
            scaled = choose_placement([p.scaled(k) for p in ps], r, lam=lam * k).providers
        except NoFeasiblePlacement:
            scaled = None
        invariant += scaled == got
    verdict(8, "placement optimality", agree == 1000 and invariant == 1000 and ties > 0,
            f"{agree}/1000 equal the brute-force argmin ({ties} with tied best scores, {infeasible} infeasible); "
            f"price scaling invariant {invariant}/1000")


# 9 ---------------------------------------------------------------------------------------


def test_criterion_9_scenarios():
    results = []
    for name in SCENARIOS:
        for seed in (7, 19):
            first, second = run_scenario(name, seed=seed), run_scenario(name, seed=seed)
            results.append((name, seed, first.to_ndjson() == second.to_ndjson(), first))
    det = all(r[2] for r in results)
    das = [t for n, _, _, t in results if n == "das_fest"]
    das_ok = all(t.summary["lost"] == 0 and t.summary["scaled_up"] > 0
                 and t.summary["released"] == t.summary["scaled_up"] for t in das)
    travel_ok = all(t.of("migrate_started")[0]["t"] < t.of("user_arrived")[0]["t"]
                    for n, _, _, t in results if n == "traveling_user")
    overload_ok = all(t.of("overloaded") and t.summary["overload_log_records"] >= 1
                      for n, _, _, t in results if n == "overload_no_remedy")
    verdict(9, "scenarios", det and das_ok and travel_ok and overload_ok,
            f"{len(results)} runs; deterministic={det}; das_fest scale-up then full release, zero lost={das_ok}; "
            f"traveling_user migrates before arrival={travel_ok}; overload surfaced and logged={overload_ok}")


# 10 --------------------------------------------------------------------------------------


def test_criterion_10_resilience():
    stack = make_stack(offloading_instances=2, timeout_s=0.25, workers=32)
    gate = Gate(stack)
    try:
        gate.store("app1", "key_value", "s")
        stalled = stack.components["off_loading_apis-1"]
        stalled.stall()
        ids = [gate.submit("app1", "write", {"store_id": "s", "key": f"k{i:04d}", "value": "v"})
               for i in range(1000)]
        good = 0
        redirected = 0
        for job_id in ids:
            record = stack.core.wait(job_id, 30)
            attempts = stack.core.attempts(job_id)
            if record.status is JobStatus.FINISHED and attempts <= 2:
                good += 1
            redirected += attempts == 2
        stored = len(stack.offloading.snapshot(("s", "default")))
        stalled.drain()
    finally:
        stack.close()
    verdict(10, "resilience", good >= 990 and stored == good,
            f"{good}/1000 finished with at most 2 attempts ({redirected} redirected after a timeout); "
            f"{stored} records stored")
