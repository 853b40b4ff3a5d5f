"""``budamaf`` command-line client.

Config file (JSON) at ``~/.config/budamaf/cli.json`` or ``$BUDAMAF_CLI_CONFIG``::

    {"gateway_url": "http://127.0.0.1:8080", "credentials_path": "~/.config/budamaf/creds.json",
     "output": "plain"}

The credentials file holds ``{"principal_id", "token", "roles"}``; its token is
never printed. Exit codes: 0 ok, 1 gateway error, 2 usage error, 3 transport.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

from .errors import BudamafError, UsageError
from .protocol import Credentials, JobKind, b64decode, b64encode

DEFAULT_CONFIG = os.path.join("~", ".config", "budamaf", "cli.json")

EXIT_OK, EXIT_GATEWAY, EXIT_USAGE, EXIT_TRANSPORT = 0, 1, 2, 3

# Which job kind each subcommand submits; every kind is reachable.
COMMAND_KINDS = {
    ("job", "status"): JobKind.STATUS_QUERY,
    ("store", "create"): JobKind.CREATE_STORE,
    ("store", "scale"): JobKind.SCALE_STORE,
    ("store", "relocate"): JobKind.RELOCATE_STORE,
    ("store", "destroy"): JobKind.DESTROY_STORE,
    ("data", "read"): JobKind.READ,
    ("data", "write"): JobKind.WRITE,
    ("data", "update"): JobKind.UPDATE,
    ("data", "delete"): JobKind.DELETE,
    ("data", "migrate"): JobKind.MIGRATE,
    ("data", "replicate"): JobKind.REPLICATE,
    ("data", "offload"): JobKind.OFFLOAD,
    ("data", "publish"): JobKind.PUBLISH,
    ("data", "anonymize"): JobKind.ANONYMIZE,
    ("data", "encrypt"): JobKind.ENCRYPT,
    ("policy", "set"): JobKind.POLICY_UPDATE,
    ("policy", "revoke"): JobKind.POLICY_UPDATE,
    ("policy", "check"): JobKind.ACCESS_CHECK,
    ("policy", "protocols"): JobKind.PROTOCOL_QUERY,
    ("analytics", "save"): JobKind.ANALYTICS_SAVE,
    ("analytics", "retrieve"): JobKind.ANALYTICS_RETRIEVE,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _location(text: str) -> dict:
    store, _, collection = text.partition("/")
    if not store:
        raise UsageError(f"bad location {text!r}; use STORE[/COLLECTION]")
    return {"store_id": store, "collection": collection or "default"}


def _json_arg(text: str):
    try:
        return json.loads(text)
    except ValueError as exc:
        raise UsageError(f"not JSON: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="budamaf", description="Administer a data-management gateway.")
    p.add_argument("--gateway", help="gateway URL")
    p.add_argument("--credentials", help="credentials file")
    p.add_argument("--output", choices=("plain", "json"))
    p.add_argument("--config", help="CLI config file")
    p.add_argument("--wait", type=float, default=60.0, help="seconds to wait for job completion")
    top = p.add_subparsers(dest="group", required=True, parser_class=_Parser)

    job = top.add_parser("job").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    s = job.add_parser("submit")
    s.add_argument("--kind", required=True, choices=[k.value for k in JobKind])
    s.add_argument("--details", type=_json_arg, default={})
    s.add_argument("--no-wait", action="store_true")
    job.add_parser("get").add_argument("job_id")
    s = job.add_parser("put")
    s.add_argument("job_id")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--data")
    g.add_argument("--file")
    s.add_argument("--final", action="store_true")
    job.add_parser("delete").add_argument("job_id")
    job.add_parser("status").add_argument("job_id")

    store = top.add_parser("store").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    s = store.add_parser("create")
    s.add_argument("--kind", required=True, choices=("key_value", "document", "tabular"))
    s.add_argument("--provider", required=True)
    s.add_argument("--machines", type=int, default=1)
    s.add_argument("--store")
    s.add_argument("--class", dest="data_class", choices=("federation", "monitoring", "application"))
    s = store.add_parser("scale")
    s.add_argument("--store", required=True)
    s.add_argument("--provider", action="append", default=[], help="add one machine on PROVIDER (repeatable)")
    s.add_argument("--machine", action="append", default=[], help="release MACHINE_ID (repeatable)")
    s = store.add_parser("relocate")
    s.add_argument("--store", required=True)
    s.add_argument("--provider", required=True)
    store.add_parser("destroy").add_argument("--store", required=True)
    store.add_parser("list")

    data = top.add_parser("data").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    for name in ("read", "write", "update", "delete"):
        s = data.add_parser(name)
        s.add_argument("--store", required=True)
        s.add_argument("--collection", default="default")
        s.add_argument("--key")
        s.add_argument("--txn")
        if name in ("read", "delete"):
            s.add_argument("--selector", type=_json_arg)
        if name in ("write", "update"):
            s.add_argument("--value")
            s.add_argument("--value-file")
            s.add_argument("--stream", action="store_true", help="open a PUT channel instead of sending a value")
        if name == "write":
            s.add_argument("--txn-control", choices=("begin", "commit", "abort"))
    for name in ("migrate", "replicate"):
        s = data.add_parser(name)
        s.add_argument("--src", required=True, type=_location)
        s.add_argument("--dst", required=True, type=_location)
        if name == "replicate":
            s.add_argument("--mode", choices=("one_shot", "continuous"), default="one_shot")
    s = data.add_parser("offload")
    s.add_argument("--store", required=True)
    s.add_argument("--queue-depth", type=int)
    s = data.add_parser("publish")
    s.add_argument("--dataset", required=True)
    s.add_argument("--audience", default="", help="comma-separated principal ids")
    data.add_parser("anonymize").add_argument("--dataset", required=True)
    data.add_parser("encrypt").add_argument("--dataset", required=True)

    pol = top.add_parser("policy").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    pol.add_parser("get")
    pol.add_parser("audit").add_argument("--limit", type=int, help="only the most recent N entries")
    pol.add_parser("set").add_argument("--update", type=_json_arg, required=True)
    pol.add_parser("revoke").add_argument("--dataset", required=True)
    s = pol.add_parser("check")
    s.add_argument("--dataset", required=True)
    s.add_argument("--action", choices=("read", "write", "admin"), default="read")
    pol.add_parser("protocols").add_argument("--class", dest="data_class", required=True,
                                             choices=("federation", "monitoring", "application"))

    ana = top.add_parser("analytics").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    s = ana.add_parser("save")
    s.add_argument("--dataset", required=True)
    s.add_argument("--locations", required=True, help="comma-separated STORE[/COLLECTION]")
    s.add_argument("--description", type=_json_arg, default={})
    s.add_argument("--records-file", required=True, help="newline-delimited JSON records")
    ana.add_parser("retrieve").add_argument("--description", type=_json_arg, default={})

    sim = top.add_parser("sim").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    s = sim.add_parser("run")
    s.add_argument("name", choices=("das_fest", "traveling_user", "overload_no_remedy"))
    s.add_argument("--seed", type=int)
    s.add_argument("--scenario-config", help="JSON scenario config overrides")
    s.add_argument("--trace", help="write the NDJSON trace here")
    return p


def _details(args) -> dict:
    """job_details for a data/store/policy/analytics subcommand."""
    g, c = args.group, args.cmd
    if g == "store":
        if c == "create":
            d = {"kind": args.kind, "provider_id": args.provider, "machines": args.machines}
            if args.store:
                d["store_id"] = args.store
            if args.data_class:
                d["metadata"] = {"data_class": args.data_class}
            return d
        if c == "scale":
            if bool(args.provider) == bool(args.machine):
                raise UsageError("give --provider to scale out or --machine to scale in")
            if args.provider:
                return {"store_id": args.store, "direction": "out",
                        "machines": [{"provider_id": p} for p in args.provider]}
            return {"store_id": args.store, "direction": "in",
                    "machines": [{"machine_id": m} for m in args.machine]}
        if c == "relocate":
            return {"store_id": args.store, "provider_id": args.provider}
        return {"store_id": args.store}
    if g == "data":
        if c in ("read", "write", "update", "delete"):
            d = {"store_id": args.store, "collection": args.collection}
            if getattr(args, "txn_control", None):
                d["txn_control"] = args.txn_control
                if args.txn:
                    d["txn_id"] = args.txn
                return d
            if args.key is not None:
                d["key"] = args.key
            if getattr(args, "selector", None) is not None:
                d["selector"] = args.selector
            if args.txn:
                d["txn_id"] = args.txn
            if c in ("write", "update"):
                if args.stream:
                    d["stream"] = True
                elif args.value_file:
                    with open(args.value_file, "rb") as fh:
                        d["value_b64"] = b64encode(fh.read())
                elif args.value is not None:
                    d["value"] = args.value
                else:
                    raise UsageError("give --value, --value-file or --stream")
            return d
        if c in ("migrate", "replicate"):
            d = {"src": args.src, "dst": args.dst}
            if c == "replicate":
                d["mode"] = args.mode
            return d
        if c == "offload":
            d = {"store_id": args.store}
            if args.queue_depth is not None:
                d["queue_depth"] = args.queue_depth
            return d
        if c == "publish":
            return {"dataset_id": args.dataset, "audience": [a for a in args.audience.split(",") if a]}
        return {"dataset_id": args.dataset}
    if g == "policy":
        if c == "set":
            return {"update": args.update}
        if c == "revoke":
            return {"revoke": args.dataset}
        if c == "check":
            return {"dataset_id": args.dataset, "action": args.action}
        return {"data_class": args.data_class}
    if g == "analytics":
        if c == "save":
            with open(args.records_file, encoding="utf-8") as fh:
                records = [json.loads(line) for line in fh if line.strip()]
            return {"descriptor": {"dataset_id": args.dataset, "description": args.description,
                                   "locations": [_location(l) for l in args.locations.split(",") if l]},
                    "records": records}
        return {"description": args.description}
    if g == "job" and c == "status":
        return {"job_id": args.job_id}
    raise UsageError(f"no job for {g} {c}")


def _load_config(path: Optional[str]) -> dict:
    path = os.path.expanduser(path or os.environ.get("BUDAMAF_CLI_CONFIG") or DEFAULT_CONFIG)
    if not os.path.exists(path):
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _load_creds(path: Optional[str]) -> Credentials:
    if not path:
        raise UsageError("no credentials file configured")
    try:
        with open(os.path.expanduser(path), encoding="utf-8") as fh:
            return Credentials.from_dict(json.load(fh))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read credentials: {exc}") from None


def _render(doc, output: str, out) -> None:
    if output == "json":
        out.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")
        return
    if isinstance(doc, dict):
        for key in sorted(doc):
            value = doc[key]
            text = value if isinstance(value, str) else json.dumps(value, sort_keys=True)
            out.write(f"{key}: {text}\n")
    else:
        out.write(f"{doc}\n")


def _audit_lines(entries: list) -> str:
    return "".join(f"{e['timestamp']:.3f} {e['initiator']['principal_id']} {e['action']} {e['subject']} "
                   f"{e['outcome']}\n" for e in entries)


def _job_output(view: dict, cmd: tuple):
    """What a finished job prints: the read value for reads, else the data or status."""
    data = view.get("data")
    if view["status"] == "crashed":
        err = data["error"]
        raise _Failure(err["code"], err["message"])
    if cmd == ("data", "read") and data and "bytes_b64" in data:
        return b64decode(data["bytes_b64"]).decode("utf-8", "replace")
    if data is None:
        return {"job_id": view["job_id"], "status": view["status"]}
    return data.get("document", data)


class _Failure(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def main(argv=None, stdout=None, stderr=None) -> int:
    from .server import GatewayClient, TransportError

    out, err = stdout or sys.stdout, stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        cfg = _load_config(args.config)
        output = args.output or cfg.get("output", "plain")
        if args.group == "sim":
            return _sim(args, output, out)
        url = args.gateway or os.environ.get("BUDAMAF_GATEWAY") or cfg.get("gateway_url")
        if not url:
            raise UsageError("no gateway URL configured")
        creds = _load_creds(args.credentials or cfg.get("credentials_path"))
        client = GatewayClient(url, creds, timeout=args.wait + 10)
        cmd = (args.group, args.cmd)
        if cmd == ("job", "submit"):
            if args.no_wait:
                result = client.submit(client.job(args.kind, args.details))
            else:
                result = _job_output(client.submit(client.job(args.kind, args.details), wait=args.wait), cmd)
        elif cmd == ("job", "get"):
            result = client.get(args.job_id)
        elif cmd == ("job", "put"):
            chunk = args.data.encode("utf-8") if args.data is not None else open(args.file, "rb").read()
            result = client.put(args.job_id, chunk, final=args.final)
        elif cmd == ("job", "delete"):
            result = client.delete(args.job_id)
        elif cmd == ("store", "list"):
            result = client.catalog()
        elif cmd == ("policy", "get"):
            result = client.policy()
        elif cmd == ("policy", "audit"):
            result = client.audit(args.limit)
            if output == "plain":
                out.write(_audit_lines(result["entries"]))
                return EXIT_OK
        elif cmd in COMMAND_KINDS:
            details = _details(args)
            raw = client.job(COMMAND_KINDS[cmd].value, details)
            if details.get("stream"):
                result = client.submit(raw)
            else:
                result = _job_output(client.submit(raw, wait=args.wait), cmd)
        else:
            raise UsageError(f"unknown command {' '.join(cmd)}")
        _render(result, output, out)
        return EXIT_OK
    except UsageError as exc:
        err.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except TransportError as exc:
        err.write(f"transport error: {exc}\n")
        return EXIT_TRANSPORT
    except (_Failure, BudamafError) as exc:
        err.write(f"{exc.code}: {exc}\n")
        return EXIT_GATEWAY
    except OSError as exc:
        err.write(f"usage error: {exc}\n")
        return EXIT_USAGE


def _sim(args, output: str, out) -> int:
    from .simulation import run_scenario

    overrides = None
    if args.scenario_config:
        with open(args.scenario_config, encoding="utf-8") as fh:
            overrides = json.load(fh)
    trace = run_scenario(args.name, overrides, args.seed)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            fh.write(trace.to_ndjson())
    if output == "json":
        _render(trace.to_dict(), "json", out)
    else:
        out.write(trace.human_summary() + "\n")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
