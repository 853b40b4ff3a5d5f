"""Job glossary, job state machine and routing table.

Every request entering the gateway becomes a :class:`JobRecord`. The
``job_details`` schema for each :class:`JobKind` lives in
``schemas/jobs.schema.json`` and is enforced by :func:`parse_job_request`.
"""

from __future__ import annotations

import base64
import dataclasses
import enum
import functools
import json
import time
import uuid
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Optional, Union

import jsonschema

from .errors import IllegalTransition, MalformedRequest, SchemaViolation, UnknownJobType


class JobKind(str, enum.Enum):
    READ = "read"
    WRITE = "write"
    UPDATE = "update"
    DELETE = "delete"
    CREATE_STORE = "create_store"
    DESTROY_STORE = "destroy_store"
    SCALE_STORE = "scale_store"
    RELOCATE_STORE = "relocate_store"
    MIGRATE = "migrate"
    REPLICATE = "replicate"
    OFFLOAD = "offload"
    PUBLISH = "publish"
    ANONYMIZE = "anonymize"
    ENCRYPT = "encrypt"
    POLICY_UPDATE = "policy_update"
    ACCESS_CHECK = "access_check"
    PROTOCOL_QUERY = "protocol_query"
    ANALYTICS_SAVE = "analytics_save"
    ANALYTICS_RETRIEVE = "analytics_retrieve"
    STATUS_QUERY = "status_query"


class JobStatus(str, enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    FINISHED = "finished"
    CRASHED = "crashed"

    @property
    def terminal(self) -> bool:
        return self in (JobStatus.FINISHED, JobStatus.CRASHED)


class JobEvent(str, enum.Enum):
    START = "start"
    SUCCEED = "succeed"
    FAIL = "fail"


class Component(str, enum.Enum):
    CORE = "core"
    SECURITY_ENGINE = "security_engine"
    OFF_LOADING_APIS = "off_loading_apis"
    ANALYTICS_ENGINE = "analytics_engine"


ROLES = frozenset({"application", "admin", "security_admin", "analytics_module"})

# The complete transition relation; anything else is illegal.
TRANSITIONS = {
    (JobStatus.PENDING, JobEvent.START): JobStatus.RUNNING,
    (JobStatus.RUNNING, JobEvent.SUCCEED): JobStatus.FINISHED,
    (JobStatus.RUNNING, JobEvent.FAIL): JobStatus.CRASHED,
}

_ROUTES = {
    JobKind.POLICY_UPDATE: Component.SECURITY_ENGINE,
    JobKind.ACCESS_CHECK: Component.SECURITY_ENGINE,
    JobKind.PROTOCOL_QUERY: Component.SECURITY_ENGINE,
    JobKind.ANALYTICS_SAVE: Component.ANALYTICS_ENGINE,
    JobKind.ANALYTICS_RETRIEVE: Component.ANALYTICS_ENGINE,
    JobKind.STATUS_QUERY: Component.CORE,
}

# Jobs that may keep an open PUT channel.
STREAMABLE = frozenset({JobKind.WRITE, JobKind.UPDATE, JobKind.ANALYTICS_SAVE})

# Jobs whose finished record carries retrieved data.
RETRIEVAL = frozenset({JobKind.READ, JobKind.ANALYTICS_RETRIEVE, JobKind.PROTOCOL_QUERY,
                       JobKind.ACCESS_CHECK, JobKind.STATUS_QUERY})


def transition(current: JobStatus, event: JobEvent) -> JobStatus:
    try:
        return TRANSITIONS[(JobStatus(current), JobEvent(event))]
    except (KeyError, ValueError):
        raise IllegalTransition(f"{getattr(current, 'value', current)} + {getattr(event, 'value', event)}") from None


def route_table(kind: JobKind) -> Component:
    return _ROUTES.get(JobKind(kind), Component.OFF_LOADING_APIS)


@dataclass(frozen=True)
class Credentials:
    principal_id: str
    token: str = ""
    roles: frozenset = frozenset()

    def __post_init__(self):
        if not self.principal_id:
            raise MalformedRequest("initiator.principal_id must be non-empty")
        object.__setattr__(self, "roles", frozenset(self.roles))
        unknown = self.roles - ROLES
        if unknown:
            raise MalformedRequest(f"unknown roles: {sorted(unknown)}")

    def has_role(self, role: str) -> bool:
        return role in self.roles

    def to_dict(self, redact: bool = False) -> dict:
        return {
            "principal_id": self.principal_id,
            "token": "***" if redact else self.token,
            "roles": sorted(self.roles),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Credentials":
        if not isinstance(doc, dict) or not doc.get("principal_id"):
            raise MalformedRequest("initiator must carry a principal_id")
        return cls(doc["principal_id"], doc.get("token", ""), frozenset(doc.get("roles", ())))


@dataclass(frozen=True)
class ErrorDescription:
    code: str
    message: str

    def __str__(self):
        return f"{self.code}: {self.message}"


JobData = Union[None, bytes, ErrorDescription, dict, list, str, int, float, bool]


def _now() -> float:
    return time.monotonic()


@dataclass(frozen=True)
class JobRecord:
    job_id: str
    initiator: Credentials
    job_description: JobKind
    job_details: dict
    status: JobStatus = JobStatus.PENDING
    data: JobData = None
    created_at: float = field(default_factory=_now)
    updated_at: float = field(default_factory=_now)

    def __post_init__(self):
        crashed = self.status is JobStatus.CRASHED
        if crashed != isinstance(self.data, ErrorDescription):
            raise ValueError("data holds an error description iff status is crashed")

    def advance(self, event: JobEvent, data: JobData = None, keep_data: bool = False) -> "JobRecord":
        """Return the record after ``event``; ``data`` replaces the payload."""
        status = transition(self.status, event)
        return dataclasses.replace(
            self,
            status=status,
            data=self.data if keep_data else data,
            updated_at=max(_now(), self.updated_at),
        )

    def with_details(self, **extra: Any) -> "JobRecord":
        return dataclasses.replace(self, job_details={**self.job_details, **extra})

    def to_dict(self, redact: bool = False) -> dict:
        return {
            "job_id": self.job_id,
            "initiator": self.initiator.to_dict(redact=redact),
            "job_description": self.job_description.value,
            "job_details": self.job_details,
            "status": self.status.value,
            "data": encode_data(self.data),
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "JobRecord":
        validate_document(doc, "job_record")
        return cls(
            job_id=doc["job_id"],
            initiator=Credentials.from_dict(doc["initiator"]),
            job_description=JobKind(doc["job_description"]),
            job_details=doc["job_details"],
            status=JobStatus(doc["status"]),
            data=decode_data(doc["data"]),
            created_at=doc["created_at"],
            updated_at=doc["updated_at"],
        )


def encode_data(data: JobData) -> Optional[dict]:
    if data is None:
        return None
    if isinstance(data, ErrorDescription):
        return {"error": {"code": data.code, "message": data.message}}
    if isinstance(data, (bytes, bytearray)):
        return {"bytes_b64": b64encode(data)}
    return {"document": data}


def decode_data(doc: Optional[dict]) -> JobData:
    if doc is None:
        return None
    if "error" in doc:
        return ErrorDescription(doc["error"]["code"], doc["error"]["message"])
    if "bytes_b64" in doc:
        return b64decode(doc["bytes_b64"])
    return doc["document"]


def b64encode(raw: bytes) -> str:
    return base64.b64encode(bytes(raw)).decode("ascii")


def b64decode(text: str) -> bytes:
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError) as exc:
        raise SchemaViolation(f"invalid base64 payload: {exc}") from None


def payload_of(details: dict, text_key: str = "value", b64_key: str = "value_b64") -> Optional[bytes]:
    """Raw payload bytes carried by a job_details document, if any."""
    if b64_key in details:
        return b64decode(details[b64_key])
    if text_key in details:
        return details[text_key].encode("utf-8")
    return None


def record_bytes(record: Any) -> bytes:
    """Canonical byte form of one analytics record given as a JSON value."""
    if isinstance(record, str):
        return record.encode("utf-8")
    return json.dumps(record, sort_keys=True, separators=(",", ":")).encode("utf-8")


# -- schema ------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def schema_document() -> dict:
    text = resources.files("budamaf").joinpath("schemas/jobs.schema.json").read_text("utf-8")
    return json.loads(text)


@functools.lru_cache(maxsize=None)
def _validator(section: str, kind: Optional[str] = None):
    doc = schema_document()
    body = doc[section][kind] if kind else doc[section]
    schema = {"definitions": doc["definitions"], **body}
    return jsonschema.Draft7Validator(schema)


def validate_document(doc: Any, section: str, kind: Optional[str] = None) -> None:
    errors = sorted(_validator(section, kind).iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.path) or "<root>"
        raise SchemaViolation(f"{kind or section}: {where}: {err.message}")


def validate_details(kind: JobKind, details: dict) -> None:
    validate_document(details, "job_details", JobKind(kind).value)


def new_job_id() -> str:
    return uuid.uuid4().hex


def parse_job_request(raw: Any) -> JobRecord:
    """Validate a raw job request and build a pending :class:`JobRecord`.

    Any ``job_id`` supplied by the initiator is discarded (except as the
    target of a status_query); the gateway assigns its own.
    """
    if not isinstance(raw, dict):
        raise MalformedRequest("job request must be a JSON object")
    if "initiator" not in raw or "job_description" not in raw:
        raise MalformedRequest("job request needs initiator and job_description")
    try:
        kind = JobKind(raw["job_description"])
    except ValueError:
        raise UnknownJobType(f"unknown job type {raw['job_description']!r}") from None
    try:
        validate_document(raw, "job_request")
    except SchemaViolation as exc:
        raise MalformedRequest(str(exc)) from None
    initiator = Credentials.from_dict(raw["initiator"])
    details = dict(raw.get("job_details") or {})
    if kind is not JobKind.STATUS_QUERY:
        details.pop("job_id", None)
    validate_details(kind, details)
    return JobRecord(job_id=new_job_id(), initiator=initiator, job_description=kind, job_details=details)
