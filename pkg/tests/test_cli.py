import io
import json

import pytest

from budamaf import cli
from budamaf.protocol import JobKind
from budamaf.server import GatewayApp, serve

from conftest import PRINCIPALS, make_stack


@pytest.fixture
def env(tmp_path):
    stack = make_stack()
    httpd = serve(GatewayApp(stack), port=0)
    url = "http://%s:%d" % httpd.server_address[:2]
    paths = {}
    for who in ("app1", "app2", "sec"):
        p = tmp_path / f"{who}.json"
        p.write_text(json.dumps({"principal_id": who, "token": f"tok-{who}", "roles": PRINCIPALS[who]}))
        paths[who] = str(p)
    config = tmp_path / "cli.json"
    config.write_text(json.dumps({"gateway_url": url, "credentials_path": paths["app1"], "output": "plain"}))

    def run(*argv, who=None):
        out, err = io.StringIO(), io.StringIO()
        args = ["--config", str(config)] + (["--credentials", paths[who]] if who else []) + list(argv)
        code = cli.main(args, stdout=out, stderr=err)
        return code, out.getvalue(), err.getvalue()

    run.stack, run.url, run.tmp = stack, url, tmp_path
    yield run
    httpd.shutdown()
    stack.close()


def test_every_job_kind_is_reachable():
    assert set(cli.COMMAND_KINDS.values()) == set(JobKind)
    # the generic submitter accepts every kind as well
    args = cli.build_parser().parse_args(["job", "submit", "--kind", "status_query"])
    assert args.kind == "status_query"


def test_store_and_data_session(env):
    assert env("store", "create", "--kind", "key_value", "--provider", "EU-1", "--store", "kv")[0] == 0
    code, out, _ = env("data", "write", "--store", "kv", "--key", "k", "--value", "hello")
    assert code == 0
    code, out, _ = env("data", "read", "--store", "kv", "--key", "k")
    assert (code, out) == (0, "hello\n")
    assert env("data", "update", "--store", "kv", "--key", "k", "--value", "bye")[0] == 0
    assert env("data", "read", "--store", "kv", "--key", "k")[1] == "bye\n"
    assert env("data", "delete", "--store", "kv", "--key", "k")[0] == 0
    code, _, err = env("data", "read", "--store", "kv", "--key", "k")
    assert code == 1 and err.startswith("WrapperError") and "not found" in err
    code, out, _ = env("--output", "json", "store", "list")
    assert code == 0 and "kv" in {s["store_id"] for s in json.loads(out)["stores"]}


def test_store_lifecycle_commands(env):
    env("store", "create", "--kind", "document", "--provider", "EU-1", "--store", "d")
    env("data", "write", "--store", "d", "--key", "k", "--value", '{"a": 1}')
    assert env("store", "scale", "--store", "d", "--provider", "EU-1")[0] == 0
    machines = env.stack.offloading.store("d").instances
    assert len(machines) == 2
    assert env("store", "scale", "--store", "d", "--machine", machines[-1].machine_id)[0] == 0
    assert env("store", "relocate", "--store", "d", "--provider", "EU-1")[0] == 0
    assert env("data", "offload", "--store", "d", "--queue-depth", "1")[0] == 0
    env("store", "create", "--kind", "key_value", "--provider", "EU-1", "--store", "d2")
    assert env("data", "migrate", "--src", "d", "--dst", "d2")[0] == 0
    env("store", "create", "--kind", "key_value", "--provider", "EU-1", "--store", "d3")
    assert env("data", "replicate", "--src", "d2", "--dst", "d3")[0] == 0
    assert env("data", "read", "--store", "d3", "--key", "k")[1] == '{"a": 1}\n'
    assert env("store", "destroy", "--store", "d3")[0] == 0


def test_txn_and_streaming(env):
    env("store", "create", "--kind", "tabular", "--provider", "EU-1", "--store", "t")
    code, out, _ = env("--output", "json", "data", "write", "--store", "t", "--txn-control", "begin")
    txn = json.loads(out)["txn_id"] if out.strip().startswith("{") else out.strip()
    assert code == 0 and txn
    assert env("data", "write", "--store", "t", "--key", "k", "--value", "v", "--txn", txn)[0] == 0
    assert env("data", "write", "--store", "t", "--txn-control", "commit", "--txn", txn)[0] == 0
    assert env("data", "read", "--store", "t", "--key", "k")[1] == "v\n"
    code, out, _ = env("--output", "json", "data", "write", "--store", "t", "--key", "s", "--stream")
    job_id = json.loads(out)["job_id"]
    assert env("job", "put", job_id, "--data", "ab")[0] == 0
    assert env("job", "put", job_id, "--data", "cd", "--final")[0] == 0
    env.stack.core.wait(job_id, 10)
    assert env("data", "read", "--store", "t", "--key", "s")[1] == "abcd\n"


def test_policy_and_publication_commands(env):
    env("store", "create", "--kind", "key_value", "--provider", "EU-1", "--store", "kv")
    code, out, _ = env("--output", "json", "policy", "check", "--dataset", "kv", "--action", "read", who="app2")
    assert code == 0 and json.loads(out)["allowed"] is False
    assert env("data", "publish", "--dataset", "kv", "--audience", "app2")[0] == 0
    assert json.loads(env("--output", "json", "policy", "check", "--dataset", "kv", who="app2")[1])["allowed"]
    update = json.dumps({"grants": [{"dataset_id": "kv", "action": "write", "principals": ["app2"]}]})
    assert env("policy", "set", "--update", update, who="sec")[0] == 0
    code, _, err = env("policy", "set", "--update", update)
    assert code == 1 and err.startswith("AccessDenied")
    assert env("policy", "revoke", "--dataset", "kv")[0] == 0
    assert not json.loads(env("--output", "json", "policy", "check", "--dataset", "kv", who="app2")[1])["allowed"]
    code, out, _ = env("--output", "json", "policy", "protocols", "--class", "application")
    assert code == 0 and json.loads(out)["encrypt"] is True
    assert env("--output", "json", "policy", "get", who="sec")[0] == 0
    assert env("data", "anonymize", "--dataset", "kv")[0] == 0
    assert env("data", "encrypt", "--dataset", "kv")[0] == 0


def test_audit_rendering(env):
    env("store", "create", "--kind", "key_value", "--provider", "EU-1", "--store", "kv")
    env("policy", "check", "--dataset", "kv")
    code, out, _ = env("policy", "audit", "--limit", "1", who="sec")
    lines = out.splitlines()
    assert code == 0 and len(lines) == 1
    assert lines[0].endswith(" app1 access_check kv:read allowed")
    code, out, _ = env("--output", "json", "policy", "audit", who="sec")
    assert code == 0 and json.loads(out)["entries"][-1]["subject"] == "audit"
    assert "tok-" not in out
    code, _, err = env("policy", "audit")
    assert code == 1 and err.startswith("AccessDenied")


def test_analytics_commands(env):
    env("store", "create", "--kind", "key_value", "--provider", "EU-1", "--store", "m")
    records = env.tmp / "records.ndjson"
    records.write_text('{"n": 1}\n{"n": 2}\n')
    code, _, _ = env("analytics", "save", "--dataset", "ds", "--locations", "m/c",
                     "--description", '{"class": "monitoring"}', "--records-file", str(records))
    assert code == 0
    code, out, _ = env("--output", "json", "analytics", "retrieve", "--description", '{"dataset_id": "ds"}')
    assert json.loads(out)["records"] == [{"n": 1}, {"n": 2}]


def test_job_commands(env):
    code, out, _ = env("--output", "json", "job", "submit", "--kind", "create_store", "--no-wait",
                       "--details", '{"kind": "key_value", "provider_id": "EU-1", "machines": 1}')
    job_id = json.loads(out)["job_id"]
    env.stack.core.wait(job_id, 10)
    assert json.loads(env("--output", "json", "job", "get", job_id)[1])["status"] == "finished"
    code, out, _ = env("--output", "json", "job", "status", job_id)
    assert code == 0 and json.loads(out)["status"] == "finished"
    assert env("job", "delete", job_id)[0] == 0
    assert env("job", "get", job_id)[0] == 1


def test_exit_codes(env, tmp_path):
    assert env("store", "destroy", "--store", "nope")[0] == 1
    assert env("data", "frobnicate")[0] == 2
    assert env("store", "scale", "--store", "x")[0] == 2
    assert env("data", "write", "--store", "x", "--key", "k")[0] == 2
    code, _, err = env("--gateway", "http://127.0.0.1:9", "store", "list")
    assert code == 3 and "transport error" in err
    missing = tmp_path / "none.json"
    code, _, err = env("--credentials", str(missing), "store", "list")
    assert code == 2


def test_json_output_is_byte_stable(env):
    env("store", "create", "--kind", "key_value", "--provider", "EU-1", "--store", "kv")
    env("data", "write", "--store", "kv", "--key", "k", "--value", "v")
    runs = {env("--output", "json", "policy", "check", "--dataset", "kv")[1] for _ in range(3)}
    assert len(runs) == 1
    reads = {env("--output", "json", "data", "read", "--store", "kv", "--key", "k")[1] for _ in range(3)}
    assert reads == {'"v"\n'}


def test_token_is_never_printed(env):
    outputs = [env("--output", "json", "job", "submit", "--kind", "create_store",
                   "--details", '{"kind": "key_value", "provider_id": "EU-1", "machines": 1}'),
               env("--output", "json", "store", "list"),
               env("store", "destroy", "--store", "nope")]
    job_id = json.loads(env("--output", "json", "job", "submit", "--kind", "create_store", "--no-wait",
                            "--details", '{"kind": "key_value", "provider_id": "EU-1", "machines": 1}')[1])["job_id"]
    env.stack.core.wait(job_id, 10)
    outputs.append(env("--output", "json", "job", "get", job_id))
    for _, out, err in outputs:
        assert "tok-app1" not in out and "tok-app1" not in err


def test_sim_run_is_deterministic(tmp_path):
    a, b = io.StringIO(), io.StringIO()
    assert cli.main(["--output", "json", "sim", "run", "das_fest", "--seed", "7",
                     "--trace", str(tmp_path / "t.ndjson")], stdout=a) == 0
    assert cli.main(["--output", "json", "sim", "run", "das_fest", "--seed", "7"], stdout=b) == 0
    assert a.getvalue() == b.getvalue()
    assert (tmp_path / "t.ndjson").read_text().splitlines()[-1].startswith('{"baseline_instances"')
    plain = io.StringIO()
    assert cli.main(["sim", "run", "overload_no_remedy"], stdout=plain) == 0
    assert plain.getvalue().startswith("scenario overload_no_remedy (seed 7)")


def test_sim_failure_exit_code(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"announce_at_s": 35, "arrive_at_s": 30}))
    err = io.StringIO()
    assert cli.main(["sim", "run", "traveling_user", "--scenario-config", str(cfg)], stderr=err) == 1
    assert "ScenarioAssertionFailed" in err.getvalue()
