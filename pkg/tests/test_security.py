import json
import random
import threading

import pytest
from hypothesis import given, strategies as st

from budamaf.errors import AccessDenied, InvalidPolicy, MethodNotAllowed, UnknownDataset
from budamaf.security import AuditAction, DataClass, SecurityEngine, classify

from conftest import creds


@pytest.fixture
def eng():
    e = SecurityEngine()
    e.register_dataset(creds("app1"), "ds1", DataClass.APPLICATION)
    return e


def test_class_protocols_defaults(eng):
    fed = eng.protocol_query(DataClass.FEDERATION)
    mon = eng.protocol_query(DataClass.MONITORING)
    app = eng.protocol_query(DataClass.APPLICATION)
    assert (fed.integrity, fed.anonymize, fed.encrypt) == (True, False, False)
    assert mon == fed
    assert (app.integrity, app.anonymize, app.encrypt) == (True, True, True)


def test_query_update_query_sequence(eng):
    before = eng.protocol_query(DataClass.APPLICATION)
    eng.policy_update(creds("sec"), {"class_protocols": {"application": {"add_anonymize_fields": ["user_name"]}}})
    after = eng.protocol_query(DataClass.APPLICATION)
    assert before != after and "user_name" in after.anonymize_fields
    actions = [e.action for e in eng.audit.entries()][-3:]
    assert actions == [AuditAction.READ_POLICY, AuditAction.MODIFY_POLICY, AuditAction.READ_POLICY]


def test_owner_and_no_grant(eng):
    assert eng.check_access(creds("app1"), "ds1", "read").allowed
    d = eng.check_access(creds("app2"), "ds1", "write")
    assert not d.allowed and d.reason == "no grant"
    assert d.protocols.encrypt


def test_grant_then_check_then_revoke(eng):
    eng.grant(creds("app1"), "ds1", "read", ["app2"])
    assert eng.check_access(creds("app2"), "ds1", "read").allowed
    assert not eng.check_access(creds("app2"), "ds1", "write").allowed
    eng.revoke(creds("app1"), "ds1")
    assert not eng.check_access(creds("app2"), "ds1", "read").allowed
    assert eng.check_access(creds("app1"), "ds1", "admin").allowed


def test_unknown_dataset(eng):
    with pytest.raises(UnknownDataset):
        eng.check_access(creds("app1"), "nope", "read")
    with pytest.raises(UnknownDataset):
        eng.revoke(creds("sec"), "nope")


def test_revoke_needs_owner_or_security_admin(eng):
    with pytest.raises(AccessDenied):
        eng.revoke(creds("app2"), "ds1")
    eng.revoke(creds("sec"), "ds1")


def test_policy_update_role_and_invariants(eng):
    v = eng.version
    with pytest.raises(AccessDenied):
        eng.policy_update(creds("app1"), {"class_protocols": {}})
    assert eng.audit.entries()[-1].outcome == "denied"
    with pytest.raises(InvalidPolicy):
        eng.policy_update(creds("sec"), {"class_protocols": {"federation": {"integrity": False}}})
    with pytest.raises(InvalidPolicy):
        eng.policy_update(creds("sec"), {"class_protocols": {"application": {"integrity": False}}})
    assert eng.version == v
    assert eng.policy_update(creds("sec"), {"class_protocols": {"application": {"add_anonymize_fields": ["x"]}}}) == v + 1


def test_put_is_rejected(eng):
    with pytest.raises(MethodNotAllowed):
        eng.handle_put(creds("sec"), {})


@given(st.one_of(st.none(), st.dictionaries(st.text(max_size=10), st.text(max_size=10), max_size=3)))
def test_classify_fail_closed(meta):
    if not meta or meta.get("data_class") not in ("federation", "monitoring", "application"):
        assert classify(meta) is DataClass.APPLICATION


def test_classify_examples():
    assert classify({"data_class": "monitoring"}) is DataClass.MONITORING
    assert classify({}) is DataClass.APPLICATION
    assert classify({"data_class": "bogus"}) is DataClass.APPLICATION


def test_audit_completeness_randomized():
    eng = SecurityEngine()
    eng.register_dataset(creds("app1"), "ds1", DataClass.APPLICATION)
    rng = random.Random(7)
    base = len(eng.audit)
    calls = 0
    for _ in range(300):
        op = rng.choice(["pq", "ca", "pu", "rv"])
        who = creds(rng.choice(["app1", "app2", "sec"]))
        calls += 1
        try:
            if op == "pq":
                eng.protocol_query(rng.choice(list(DataClass)), creds=who)
            elif op == "ca":
                eng.check_access(who, rng.choice(["ds1", "ghost"]), rng.choice(["read", "write", "admin"]))
            elif op == "pu":
                eng.policy_update(who, {"class_protocols": {"application": {"add_anonymize_fields": ["f"]}}})
            else:
                eng.revoke(who, rng.choice(["ds1", "ghost"]))
        except (AccessDenied, UnknownDataset, InvalidPolicy):
            pass
    assert len(eng.audit) - base == calls


def test_audit_redacts_tokens(tmp_path):
    path = tmp_path / "audit.ndjson"
    eng = SecurityEngine(audit_path=str(path))
    eng.protocol_query(DataClass.FEDERATION, creds=creds("app1"))
    lines = path.read_text().splitlines()
    assert len(lines) == 1
    entry = json.loads(lines[0])
    assert entry["action"] == "read_policy" and "tok-app1" not in lines[0]


def test_policy_file_persists_and_reloads(tmp_path):
    path = str(tmp_path / "policy.json")
    key = b"k" * 32
    eng = SecurityEngine(policy_path=path, master_key=key)
    eng.register_dataset(creds("app1"), "ds1", DataClass.MONITORING)
    eng.grant(creds("app1"), "ds1", "read", ["app2"])
    again = SecurityEngine(policy_path=path, master_key=key)
    assert again.version == eng.version
    assert again.check_access(creds("app2"), "ds1", "read").allowed


def test_versions_monotone_under_concurrency(eng):
    seen = []
    stop = threading.Event()

    def reader():
        while not stop.is_set():
            seen.append(eng.version)

    t = threading.Thread(target=reader)
    t.start()
    for _ in range(50):
        eng.policy_update(creds("sec"), {"class_protocols": {"application": {"add_anonymize_fields": ["f"]}}})
    stop.set()
    t.join()
    assert seen == sorted(seen)


def test_mask_is_irreversible_and_stable(eng):
    raw = json.dumps({"email": "a@b", "x": 1}).encode()
    masked = eng.mask(raw, ["email"])
    doc = json.loads(masked)
    assert doc["x"] == 1 and doc["email"] != "a@b"
    assert eng.mask(raw, ["email"]) == masked


def test_seal_is_per_owner(eng):
    blob = eng.seal("app1", b"secret")
    assert eng.unseal("app1", blob) == b"secret"
    with pytest.raises(Exception):
        eng.unseal("app2", blob)


def test_audit_view_is_admin_only_and_audited(eng):
    eng.check_access(creds("app1"), "ds1", "read")
    with pytest.raises(AccessDenied):
        eng.audit_view(creds("app1"))
    before = len(eng.audit)
    entries = eng.audit_view(creds("sec"))
    assert len(entries) == before and len(eng.audit) == before + 1
    assert entries[-1]["subject"] == "audit" and entries[-1]["outcome"] == "denied"
    assert all(e["initiator"]["token"] in ("***", "") for e in entries)
    assert len(eng.audit_view(creds("sec"), limit=2)) == 2
    assert eng.audit_view(creds("sec"), limit=0) == []
