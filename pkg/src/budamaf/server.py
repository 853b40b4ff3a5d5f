"""HTTP surfaces (stdlib only) and their clients.

Gateway app (one process hosts the Core and the components):

    POST   /core/[?wait=S]              submit a job request
    GET    /core/catalog                store catalog
    GET    /core/{job_id}               job view
    PUT    /core/{job_id}[?final=1]     stream a chunk (raw body)
    DELETE /core/{job_id}
    POST   /security_engine/            {"initiator", "query", ...}
    GET    /security_engine/policy
    GET    /security_engine/audit[?limit=N]   security_admin only
    PUT    /security_engine/...         always 405
    DELETE /security_engine/{dataset_id}
    POST   /off_loading_apis/           Core-forwarded job (needs X-Internal-Token)
    POST   /off_loading_apis/cancel     {"job_id"} (needs X-Internal-Token)
    POST   /analytics_engine/[?wait=S]  analytics job request, submitted through the Core
    POST   /analytics_engine/modules    {"module_id", "endpoint"}
    GET    /analytics_engine/{request_id}
    DELETE /analytics_engine/{request_id}   no further access to that result
    GET    /health

Credentials for GET/PUT/DELETE travel in ``X-Principal`` / ``X-Token``.
Wrappers have no authentication of their own and belong on a trusted network.
Wrapper app: ``POST /query``, ``GET /health``, ``GET /capabilities``,
``GET /snapshot?store_id=&collection=``, ``POST /provision|/resize|/drop``.
"""

from __future__ import annotations

import argparse
import hmac
import json
import logging
import os
import threading
import urllib.error
import urllib.parse
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

from .errors import AuthenticationFailed, BudamafError, MalformedRequest, MethodNotAllowed, NotFound, from_dict
from .protocol import (
    Component,
    Credentials,
    JobKind,
    JobRecord,
    b64decode,
    b64encode,
    decode_data,
    encode_data,
)
from .wrappers import WRAPPER_CLASSES
from .wrappers.base import CapabilitySet, NativeError, WrapperRequest, WrapperResponse

logger = logging.getLogger(__name__)

DEFAULT_PORT = 8080


class _Handler(BaseHTTPRequestHandler):
    """Dispatches to ``self.server.app.route(method, path, query, headers, body)``."""

    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        logger.debug("%s %s", self.address_string(), fmt % args)

    def _serve(self, method: str):
        parsed = urllib.parse.urlsplit(self.path)
        query = dict(urllib.parse.parse_qsl(parsed.query))
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        try:
            status, payload = self.server.app.route(method, parsed.path, query, self.headers, body)
        except BudamafError as exc:
            status, payload = exc.http_status, {"error": exc.to_dict()}
        except (KeyError, ValueError, TypeError) as exc:
            status, payload = 400, {"error": {"code": "MalformedRequest", "message": str(exc)}}
        except Exception as exc:
            logger.exception("unhandled error on %s %s", method, self.path)
            status, payload = 500, {"error": {"code": "InternalError", "message": type(exc).__name__}}
        raw = json.dumps(payload, sort_keys=True).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def do_GET(self):
        self._serve("GET")

    def do_POST(self):
        self._serve("POST")

    def do_PUT(self):
        self._serve("PUT")

    def do_DELETE(self):
        self._serve("DELETE")


def _json(body: bytes):
    try:
        return json.loads(body.decode("utf-8")) if body else {}
    except ValueError as exc:
        raise MalformedRequest(f"body is not JSON: {exc}") from None


def _creds(headers, doc: Optional[dict] = None) -> Credentials:
    if doc and "initiator" in doc:
        return Credentials.from_dict(doc["initiator"])
    principal = headers.get("X-Principal")
    if not principal:
        raise MalformedRequest("missing X-Principal header")
    roles = [r for r in (headers.get("X-Roles") or "").split(",") if r]
    return Credentials(principal, headers.get("X-Token", ""), frozenset(roles))


class GatewayApp:
    def __init__(self, stack):
        self.stack = stack
        self.core = stack.core

    def _authed(self, headers, doc=None) -> Credentials:
        return self.core.authenticate(_creds(headers, doc))

    def route(self, method: str, path: str, query: dict, headers, body: bytes):
        parts = [p for p in path.split("/") if p]
        if not parts:
            raise NotFound(path)
        head, rest = parts[0], parts[1:]
        if head == "health":
            return 200, {"status": "ok"}
        if head == "core":
            return self._core(method, rest, query, headers, body)
        if head == "security_engine":
            return self._security(method, rest, query, headers, body)
        if head == "off_loading_apis":
            return self._offloading(method, rest, headers, body)
        if head == "analytics_engine":
            return self._analytics(method, rest, query, headers, body)
        raise NotFound(path)

    def _core(self, method, rest, query, headers, body):
        core = self.core
        if method == "POST" and not rest:
            job_id = core.submit_job(_json(body))
            if "wait" in query:
                record = core.wait(job_id, float(query["wait"]))
                creds = record.initiator
                return 200, core.get_job(job_id, creds)
            return 201, {"job_id": job_id}
        if method == "GET" and rest == ["catalog"]:
            self._authed(headers)
            return 200, {"stores": self.stack.offloading.list_stores()}
        if len(rest) != 1:
            raise NotFound("/core/" + "/".join(rest))
        job_id = rest[0]
        creds = self._authed(headers)
        if method == "GET":
            return 200, core.get_job(job_id, creds)
        if method == "PUT":
            final = query.get("final", "0") in ("1", "true", "yes")
            return 200, core.stream_put(job_id, body, creds, final=final)
        if method == "DELETE":
            return 200, core.delete_job(job_id, creds)
        raise MethodNotAllowed(method)

    def _security(self, method, rest, query, headers, body):
        security = self.stack.security
        if method == "PUT":
            security.handle_put()
        if method == "POST" and not rest:
            doc = _json(body)
            return 200, security.handle_post(self._authed(headers, doc), doc)
        if method == "GET" and rest == ["policy"]:
            return 200, security.policy_view(self._authed(headers))
        if method == "GET" and rest == ["audit"]:
            limit = int(query["limit"]) if "limit" in query else None
            return 200, {"entries": security.audit_view(self._authed(headers), limit)}
        if method == "DELETE" and len(rest) == 1:
            return 200, security.handle_delete(self._authed(headers), rest[0])
        raise MethodNotAllowed(f"{method} /security_engine/{'/'.join(rest)}")

    def _offloading(self, method, rest, headers, body):
        token = (headers.get("X-Internal-Token") or "").encode()
        if not hmac.compare_digest(token, self.stack.config.internal_token.encode()):
            raise AuthenticationFailed("component endpoints need the internal token")
        doc = _json(body)
        if method == "POST" and not rest:
            result = self.stack.offloading.handle_job(JobKind(doc["job_description"]), doc["job_details"])
            return 200, {"data": encode_data(result)}
        if method == "POST" and rest == ["cancel"]:
            self.stack.offloading.cancel(doc["job_id"])
            return 200, {"job_id": doc["job_id"], "cancelled": True}
        raise MethodNotAllowed(f"{method} /off_loading_apis/{'/'.join(rest)}")

    def _analytics(self, method, rest, query, headers, body):
        analytics = self.stack.analytics
        if method == "POST" and rest == ["modules"]:
            doc = _json(body)
            endpoint = doc["endpoint"]
            probe = (lambda: _checked(*_request("GET", endpoint.rstrip("/") + "/health", timeout=2.0))) \
                if endpoint.startswith("http") else None
            return 201, analytics.register_module(self._authed(headers, doc), doc["module_id"], endpoint, probe)
        if method == "POST" and not rest:
            doc = _json(body)
            if doc.get("job_description") not in (JobKind.ANALYTICS_SAVE.value, JobKind.ANALYTICS_RETRIEVE.value):
                raise MalformedRequest("the analytics engine accepts analytics_save and analytics_retrieve jobs")
            job_id = self.core.submit_job(doc)
            record = self.core.wait(job_id, float(query.get("wait", 60)))
            return 200, self.core.get_job(job_id, record.initiator)
        if len(rest) == 1 and method in ("GET", "DELETE"):
            creds = self._authed(headers)
            record = self.core.record(rest[0])
            if record.job_description not in (JobKind.ANALYTICS_SAVE, JobKind.ANALYTICS_RETRIEVE):
                raise NotFound(f"analytics request {rest[0]}")
            if method == "GET":
                return 200, self.core.get_job(rest[0], creds)
            return 200, self.core.delete_job(rest[0], creds)
        raise MethodNotAllowed(f"{method} /analytics_engine/{'/'.join(rest)}")


class WrapperApp:
    def __init__(self, wrapper):
        self.wrapper = wrapper

    def route(self, method: str, path: str, query: dict, headers, body: bytes):
        w = self.wrapper
        if method == "GET" and path == "/health":
            return 200, w.health()
        if method == "GET" and path == "/capabilities":
            return 200, w.capabilities().to_dict()
        if method == "POST" and path == "/query":
            return 200, w.handle(WrapperRequest.from_dict(_json(body))).to_dict()
        if method == "GET" and path == "/snapshot":
            try:
                entries = w.snapshot(query["store_id"], query.get("collection", "default"))
            except NativeError as exc:
                return 404, {"error": {"code": exc.code, "message": str(exc)}}
            return 200, {"entries": [[k, b64encode(v), d] for k, v, d in entries]}
        if method == "POST" and path in ("/provision", "/resize", "/drop"):
            doc = _json(body)
            if path == "/drop":
                w.drop(doc["store_id"])
            else:
                getattr(w, path[1:])(doc["store_id"], int(doc.get("instances", 1)))
            return 200, {"store_id": doc["store_id"], "ok": True}
        raise NotFound(path)


def serve(app, host: str = "127.0.0.1", port: int = DEFAULT_PORT) -> ThreadingHTTPServer:
    """Start ``app`` on a daemon thread; ``port=0`` picks a free port."""
    httpd = ThreadingHTTPServer((host, port), _Handler)
    httpd.daemon_threads = True
    httpd.app = app
    threading.Thread(target=httpd.serve_forever, daemon=True, name="http").start()
    return httpd


# -- clients -----------------------------------------------------------------------


class TransportError(Exception):
    """The remote end could not be reached (distinct from an error it returned)."""


def _request(method: str, url: str, doc=None, headers: Optional[dict] = None, raw: Optional[bytes] = None,
             timeout: float = 30.0):
    data = raw if raw is not None else (json.dumps(doc).encode("utf-8") if doc is not None else None)
    req = urllib.request.Request(url, data=data, method=method, headers=dict(headers or {}))
    if doc is not None:
        req.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, json.loads(resp.read() or b"{}")
    except urllib.error.HTTPError as exc:
        try:
            return exc.code, json.loads(exc.read() or b"{}")
        except ValueError:
            return exc.code, {"error": {"code": "InternalError", "message": str(exc)}}
    except (urllib.error.URLError, OSError) as exc:
        raise TransportError(f"{method} {url}: {exc}") from None


def _checked(status: int, doc: dict) -> dict:
    if status >= 400:
        err = doc.get("error", {})
        raise from_dict(err) if err.get("code") else BudamafError(f"HTTP {status}")
    return doc


class HttpWrapperClient:
    """Wrapper wire protocol over HTTP, same surface as an in-process wrapper."""

    def __init__(self, endpoint: str, timeout: float = 10.0):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout

    def _call(self, method, path, doc=None):
        status, body = _request(method, self.endpoint + path, doc, timeout=self.timeout)
        if status >= 400:
            raise TransportError(f"{path}: HTTP {status}")
        return body

    def health(self) -> dict:
        return self._call("GET", "/health")

    def capabilities(self) -> CapabilitySet:
        return CapabilitySet.from_dict(self._call("GET", "/capabilities"))

    def handle(self, req: WrapperRequest) -> WrapperResponse:
        return WrapperResponse.from_dict(self._call("POST", "/query", req.to_dict()))

    def snapshot(self, store_id: str, collection: str):
        q = urllib.parse.urlencode({"store_id": store_id, "collection": collection})
        status, body = _request("GET", f"{self.endpoint}/snapshot?{q}", timeout=self.timeout)
        if status == 404:
            err = body.get("error", {})
            raise NativeError(err.get("code", "UNKNOWN_STORE"), err.get("message", ""))
        return iter([(k, b64decode(v), d) for k, v, d in body["entries"]])

    def provision(self, store_id: str, instances: int = 1) -> None:
        self._call("POST", "/provision", {"store_id": store_id, "instances": instances})

    def resize(self, store_id: str, instances: int) -> None:
        self._call("POST", "/resize", {"store_id": store_id, "instances": instances})

    def drop(self, store_id: str) -> None:
        self._call("POST", "/drop", {"store_id": store_id})


class HttpComponent:
    """A remote off-loading instance as seen by the Core."""

    def __init__(self, endpoint: str, internal_token: str, component=Component.OFF_LOADING_APIS):
        self.endpoint = endpoint.rstrip("/")
        self.headers = {"X-Internal-Token": internal_token}
        self.component = Component(component)

    def probe(self):
        return _checked(*_request("GET", self.endpoint + "/health", timeout=2.0))

    def call(self, kind, details: dict, creds: Credentials, abandoned=None):
        if self.component is not Component.OFF_LOADING_APIS:
            raise NotImplementedError("only off-loading instances are remote")
        doc = {"job_description": JobKind(kind).value, "job_details": details}
        body = _checked(*_request("POST", self.endpoint + "/off_loading_apis/", doc, self.headers))
        return decode_data(body.get("data"))

    def cancel(self, job_id: str) -> None:
        _checked(*_request("POST", self.endpoint + "/off_loading_apis/cancel", {"job_id": job_id}, self.headers))


class GatewayClient:
    """Client for the gateway surface used by the CLI and remote modules."""

    def __init__(self, url: str, creds: Credentials, timeout: float = 60.0):
        self.url = url.rstrip("/")
        self.creds = creds
        self.timeout = timeout

    @property
    def headers(self) -> dict:
        h = {"X-Principal": self.creds.principal_id, "X-Token": self.creds.token}
        if self.creds.roles:
            h["X-Roles"] = ",".join(sorted(self.creds.roles))
        return h

    def _call(self, method, path, doc=None, raw=None):
        return _checked(*_request(method, self.url + path, doc, self.headers, raw, self.timeout))

    def job(self, kind: str, details: dict) -> dict:
        return {"initiator": self.creds.to_dict(), "job_description": kind, "job_details": details}

    def submit(self, raw: dict, wait: Optional[float] = None) -> dict:
        path = "/core/" + (f"?wait={wait}" if wait is not None else "")
        return self._call("POST", path, raw)

    def run(self, raw: dict, timeout: float = 60.0) -> JobRecord:
        return JobRecord.from_dict(self.submit(raw, wait=timeout))

    def get(self, job_id: str) -> dict:
        return self._call("GET", f"/core/{job_id}")

    def put(self, job_id: str, chunk: bytes, final: bool = False) -> dict:
        return self._call("PUT", f"/core/{job_id}" + ("?final=1" if final else ""), raw=chunk)

    def delete(self, job_id: str) -> dict:
        return self._call("DELETE", f"/core/{job_id}")

    def catalog(self) -> dict:
        return self._call("GET", "/core/catalog")

    def policy(self) -> dict:
        return self._call("GET", "/security_engine/policy")

    def audit(self, limit: Optional[int] = None) -> dict:
        return self._call("GET", "/security_engine/audit" + (f"?limit={limit}" if limit is not None else ""))

    def security(self, method: str, path: str = "", doc=None) -> dict:
        return self._call(method, "/security_engine/" + path, doc)


# -- entry points ------------------------------------------------------------------


def main(argv=None) -> int:
    from .stack import StackConfig, build_stack

    parser = argparse.ArgumentParser(prog="budamaf-gateway", description="Run the gateway and its components.")
    parser.add_argument("--config", default=os.environ.get("BUDAMAF_CONFIG"))
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=int(os.environ.get("BUDAMAF_PORT", DEFAULT_PORT)))
    parser.add_argument("--open", action="store_true",
                        help="accept any asserted credentials (no principals configured); local testing only")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    config = StackConfig.load(args.config) if args.config else StackConfig()
    if not (config.principals or config.principals_path):
        if not args.open:
            parser.error("no principals configured; set principals or principals_path, or pass --open")
        logger.warning("no principals configured: every asserted credential is accepted")
    stack = build_stack(config, remote_client=HttpWrapperClient)
    httpd = serve(GatewayApp(stack), args.host, args.port)
    logger.info("gateway listening on %s:%d", *httpd.server_address[:2])
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        httpd.shutdown()
        stack.close()
    return 0


def wrapper_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="budamaf-wrapper", description="Run one reference wrapper over HTTP.")
    parser.add_argument("--kind", choices=sorted(WRAPPER_CLASSES), required=True)
    parser.add_argument("--wrapper-id")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=int(os.environ.get("BUDAMAF_PORT", 8090)))
    parser.add_argument("--require-envelope", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO)
    wrapper = WRAPPER_CLASSES[args.kind](args.wrapper_id, require_envelope=args.require_envelope)
    httpd = serve(WrapperApp(wrapper), args.host, args.port)
    logger.info("%s wrapper listening on %s:%d", args.kind, *httpd.server_address[:2])
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        httpd.shutdown()
    return 0
