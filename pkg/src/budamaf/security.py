"""Security and anonymization engine.

Holds the single versioned policy document (per-class protocol sets, the
dataset registry and the ACL), answers protocol queries and access checks,
and appends one audit entry for every call that reads or modifies policy.

Policy updates build a new immutable :class:`SecurityPolicy` and swap the
reference under the writer lock, so readers always see a whole version.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import hmac
import json
import logging
import os
import secrets
import tempfile
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Protocol

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import (
    AccessDenied,
    IntegrityViolation,
    InvalidPolicy,
    MethodNotAllowed,
    UnknownDataset,
)
from .protocol import Credentials, JobKind

logger = logging.getLogger(__name__)

ACTIONS = ("read", "write", "admin")
SYSTEM = Credentials("core", "", frozenset({"admin"}))


class DataClass(str, enum.Enum):
    FEDERATION = "federation"
    MONITORING = "monitoring"
    APPLICATION = "application"


class AuditAction(str, enum.Enum):
    READ_POLICY = "read_policy"
    MODIFY_POLICY = "modify_policy"
    ACCESS_CHECK = "access_check"
    REVOKE = "revoke"


@dataclass(frozen=True)
class ProtocolSet:
    integrity: bool = True
    anonymize: bool = False
    encrypt: bool = False
    anonymize_fields: tuple = ()

    def to_dict(self) -> dict:
        return {
            "integrity": self.integrity,
            "anonymize": self.anonymize,
            "encrypt": self.encrypt,
            "anonymize_fields": list(self.anonymize_fields),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ProtocolSet":
        return cls(
            bool(doc.get("integrity", True)),
            bool(doc.get("anonymize", False)),
            bool(doc.get("encrypt", False)),
            tuple(doc.get("anonymize_fields", ())),
        )


INTEGRITY_ONLY = ProtocolSet(integrity=True)

DEFAULT_CLASS_PROTOCOLS = {
    DataClass.FEDERATION: INTEGRITY_ONLY,
    DataClass.MONITORING: INTEGRITY_ONLY,
    DataClass.APPLICATION: ProtocolSet(True, True, True, ("email", "phone")),
}


@dataclass(frozen=True)
class DatasetEntry:
    owner: str
    data_class: DataClass


@dataclass(frozen=True)
class SecurityPolicy:
    class_protocols: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_PROTOCOLS))
    datasets: dict = field(default_factory=dict)
    # (dataset_id, action) -> frozenset of principal ids
    acl: dict = field(default_factory=dict)
    version: int = 0

    def grants(self, dataset_id: str, action: str) -> frozenset:
        return self.acl.get((dataset_id, action), frozenset())

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "class_protocols": {c.value: p.to_dict() for c, p in self.class_protocols.items()},
            "datasets": {d: {"owner": e.owner, "data_class": e.data_class.value}
                         for d, e in sorted(self.datasets.items())},
            "acl": [
                {"dataset_id": d, "action": a, "principals": sorted(p)}
                for (d, a), p in sorted(self.acl.items()) if p
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SecurityPolicy":
        return cls(
            class_protocols={DataClass(c): ProtocolSet.from_dict(p)
                             for c, p in doc.get("class_protocols", {}).items()}
            or dict(DEFAULT_CLASS_PROTOCOLS),
            datasets={d: DatasetEntry(e["owner"], DataClass(e["data_class"]))
                      for d, e in doc.get("datasets", {}).items()},
            acl={(g["dataset_id"], g["action"]): frozenset(g["principals"]) for g in doc.get("acl", [])},
            version=int(doc.get("version", 0)),
        )


@dataclass(frozen=True)
class AuditLogEntry:
    initiator: Credentials
    action: AuditAction
    subject: str
    timestamp: float
    outcome: str = "ok"

    def to_dict(self) -> dict:
        return {
            "initiator": self.initiator.to_dict(redact=True),
            "action": self.action.value,
            "subject": self.subject,
            "timestamp": self.timestamp,
            "outcome": self.outcome,
        }


@dataclass(frozen=True)
class AccessDecision:
    allowed: bool
    protocols: ProtocolSet
    reason: str
    dataset_id: Optional[str] = None
    owner: Optional[str] = None
    data_class: Optional[DataClass] = None


class AuditLog:
    """Append-only audit trail, optionally mirrored to an NDJSON file."""

    def __init__(self, path: Optional[str] = None):
        self._entries: list[AuditLogEntry] = []
        self._lock = threading.Lock()
        self.path = path

    def append(self, entry: AuditLogEntry) -> None:
        redacted = dataclasses.replace(
            entry, initiator=dataclasses.replace(entry.initiator, token="***" if entry.initiator.token else "")
        )
        with self._lock:
            self._entries.append(redacted)
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(redacted.to_dict(), sort_keys=True) + "\n")

    def entries(self) -> tuple:
        with self._lock:
            return tuple(self._entries)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


# -- transforms --------------------------------------------------------------

class Masker(Protocol):
    def mask(self, payload: bytes, fields: Iterable[str]) -> bytes: ...


class Cipher(Protocol):
    def seal(self, key: bytes, data: bytes, context: bytes) -> bytes: ...
    def open(self, key: bytes, data: bytes, context: bytes) -> bytes: ...


class SaltedDigestMasker:
    """Replace listed top-level fields of a JSON object with salted digests.

    Payloads that are not JSON objects pass through unchanged.
    """

    def __init__(self, salt: bytes):
        self.salt = salt

    def token(self, value) -> str:
        raw = json.dumps(value, sort_keys=True).encode("utf-8")
        return "anon:" + hmac.new(self.salt, raw, hashlib.sha256).hexdigest()[:32]

    def mask(self, payload: bytes, fields: Iterable[str]) -> bytes:
        fields = [f for f in fields]
        if not fields:
            return payload
        try:
            doc = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            return payload
        if not isinstance(doc, dict) or not any(f in doc for f in fields):
            return payload
        for f in fields:
            if f in doc and not (isinstance(doc[f], str) and doc[f].startswith("anon:")):
                doc[f] = self.token(doc[f])
        return json.dumps(doc, separators=(",", ":")).encode("utf-8")


class AesGcmCipher:
    NONCE = 12

    def seal(self, key: bytes, data: bytes, context: bytes) -> bytes:
        nonce = os.urandom(self.NONCE)
        return nonce + AESGCM(key).encrypt(nonce, data, context)

    def open(self, key: bytes, data: bytes, context: bytes) -> bytes:
        try:
            return AESGCM(key).decrypt(data[: self.NONCE], data[self.NONCE:], context)
        except (InvalidTag, ValueError):
            raise IntegrityViolation("ciphertext failed authentication") from None


def classify(metadata: Optional[dict]) -> DataClass:
    """Data class declared in ``metadata``; application when absent or invalid."""
    if isinstance(metadata, dict):
        declared = metadata.get("data_class", metadata.get("class"))
        try:
            return DataClass(declared)
        except ValueError:
            pass
    return DataClass.APPLICATION


class SecurityEngine:
    def __init__(
        self,
        policy_path: Optional[str] = None,
        audit_path: Optional[str] = None,
        master_key: Optional[bytes] = None,
        masker: Optional[Masker] = None,
        cipher: Optional[Cipher] = None,
    ):
        self.policy_path = policy_path
        self.audit = AuditLog(audit_path)
        self._master = master_key or secrets.token_bytes(32)
        self.masker = masker or SaltedDigestMasker(hmac.new(self._master, b"mask", hashlib.sha256).digest())
        self.cipher = cipher or AesGcmCipher()
        self._write_lock = threading.Lock()
        if policy_path and os.path.exists(policy_path):
            with open(policy_path, encoding="utf-8") as fh:
                self._policy = SecurityPolicy.from_dict(json.load(fh))
        else:
            self._policy = SecurityPolicy()

    # -- snapshot access ---------------------------------------------------

    @property
    def policy(self) -> SecurityPolicy:
        return self._policy

    @property
    def version(self) -> int:
        return self._policy.version

    def dataset(self, dataset_id: str) -> Optional[DatasetEntry]:
        return self._policy.datasets.get(dataset_id)

    def owner_of(self, dataset_id: str) -> str:
        entry = self.dataset(dataset_id)
        if entry is None:
            raise UnknownDataset(dataset_id)
        return entry.owner

    def _log(self, creds: Credentials, action: AuditAction, subject: str, outcome: str = "ok") -> None:
        self.audit.append(AuditLogEntry(creds, action, subject, time.time(), outcome))

    def _swap(self, new: SecurityPolicy) -> int:
        # caller holds _write_lock
        new = dataclasses.replace(new, version=self._policy.version + 1)
        if self.policy_path:
            directory = os.path.dirname(os.path.abspath(self.policy_path))
            fd, tmp = tempfile.mkstemp(dir=directory, prefix=".policy-")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(new.to_dict(), fh, indent=2, sort_keys=True)
            os.replace(tmp, self.policy_path)
        self._policy = new
        return new.version

    # -- queries -----------------------------------------------------------

    def protocol_query(self, data_class: DataClass, owner: Optional[str] = None,
                       creds: Credentials = SYSTEM) -> ProtocolSet:
        data_class = DataClass(data_class)
        protocols = self._policy.class_protocols[data_class]
        self._log(creds, AuditAction.READ_POLICY, f"class:{data_class.value}" + (f" owner:{owner}" if owner else ""))
        return protocols

    def policy_view(self, creds: Credentials = SYSTEM) -> dict:
        self._log(creds, AuditAction.READ_POLICY, "policy")
        return self._policy.to_dict()

    def audit_view(self, creds: Credentials, limit: Optional[int] = None) -> list:
        """Most recent audit entries, oldest first; reading the trail is itself audited."""
        if not creds.has_role("security_admin"):
            self._log(creds, AuditAction.READ_POLICY, "audit", "denied")
            raise AccessDenied("reading the audit log requires the security_admin role")
        entries = self.audit.entries()
        self._log(creds, AuditAction.READ_POLICY, "audit")
        if limit is not None:
            entries = entries[-limit:] if limit > 0 else ()
        return [e.to_dict() for e in entries]

    def check_access(self, creds: Credentials, dataset_id: str, action: str) -> AccessDecision:
        policy = self._policy
        entry = policy.datasets.get(dataset_id)
        if entry is None or action not in ACTIONS:
            self._log(creds, AuditAction.ACCESS_CHECK, f"{dataset_id}:{action}", "unknown")
            if entry is None:
                raise UnknownDataset(dataset_id)
            raise InvalidPolicy(f"unknown action {action!r}")
        protocols = policy.class_protocols[entry.data_class]
        if creds.principal_id == entry.owner:
            allowed, reason = True, "owner"
        elif creds.principal_id in policy.grants(dataset_id, action):
            allowed, reason = True, "granted"
        else:
            allowed, reason = False, "no grant"
        self._log(creds, AuditAction.ACCESS_CHECK, f"{dataset_id}:{action}", "allowed" if allowed else "denied")
        return AccessDecision(allowed, protocols, reason, dataset_id, entry.owner, entry.data_class)

    def decision_for(self, data_class: DataClass, owner: str, creds: Credentials = SYSTEM,
                     dataset_id: Optional[str] = None) -> AccessDecision:
        """Decision for data whose dataset is being created by ``owner``."""
        protocols = self.protocol_query(data_class, owner, creds)
        return AccessDecision(True, protocols, "owner", dataset_id, owner, DataClass(data_class))

    # -- modifications -----------------------------------------------------

    def register_dataset(self, creds: Credentials, dataset_id: str, data_class: DataClass,
                         owner: Optional[str] = None) -> int:
        owner = owner or creds.principal_id
        with self._write_lock:
            policy = self._policy
            existing = policy.datasets.get(dataset_id)
            if existing is not None and existing.owner != owner:
                self._log(creds, AuditAction.MODIFY_POLICY, f"register:{dataset_id}", "denied")
                raise AccessDenied(f"dataset {dataset_id} is owned by another principal")
            datasets = {**policy.datasets, dataset_id: DatasetEntry(owner, DataClass(data_class))}
            version = self._swap(dataclasses.replace(policy, datasets=datasets))
            self._log(creds, AuditAction.MODIFY_POLICY, f"register:{dataset_id}")
            return version

    def drop_dataset(self, creds: Credentials, dataset_id: str) -> int:
        """Forget a dataset and every grant on it (the owner axiom ends here)."""
        with self._write_lock:
            policy = self._policy
            if dataset_id not in policy.datasets:
                self._log(creds, AuditAction.MODIFY_POLICY, f"drop:{dataset_id}", "unknown")
                raise UnknownDataset(dataset_id)
            datasets = {d: e for d, e in policy.datasets.items() if d != dataset_id}
            acl = {k: v for k, v in policy.acl.items() if k[0] != dataset_id}
            version = self._swap(dataclasses.replace(policy, datasets=datasets, acl=acl))
            self._log(creds, AuditAction.MODIFY_POLICY, f"drop:{dataset_id}")
            return version

    def grant(self, creds: Credentials, dataset_id: str, action: str, principals: Iterable[str]) -> int:
        principals = frozenset(principals)
        with self._write_lock:
            policy = self._policy
            entry = policy.datasets.get(dataset_id)
            if entry is None:
                self._log(creds, AuditAction.MODIFY_POLICY, f"grant:{dataset_id}", "unknown")
                raise UnknownDataset(dataset_id)
            if creds.principal_id != entry.owner and not creds.has_role("security_admin"):
                self._log(creds, AuditAction.MODIFY_POLICY, f"grant:{dataset_id}", "denied")
                raise AccessDenied("only the owner or a security admin may grant access")
            if action not in ACTIONS:
                self._log(creds, AuditAction.MODIFY_POLICY, f"grant:{dataset_id}", "invalid")
                raise InvalidPolicy(f"unknown action {action!r}")
            acl = dict(policy.acl)
            acl[(dataset_id, action)] = policy.grants(dataset_id, action) | principals
            version = self._swap(dataclasses.replace(policy, acl=acl))
            self._log(creds, AuditAction.MODIFY_POLICY, f"grant:{dataset_id}:{action}")
            return version

    def policy_update(self, creds: Credentials, update: dict) -> int:
        with self._write_lock:
            if not creds.has_role("security_admin"):
                self._log(creds, AuditAction.MODIFY_POLICY, "policy", "denied")
                raise AccessDenied("policy_update requires the security_admin role")
            try:
                new = self._merged(self._policy, update)
            except (InvalidPolicy, UnknownDataset):
                self._log(creds, AuditAction.MODIFY_POLICY, "policy", "invalid")
                raise
            version = self._swap(new)
            self._log(creds, AuditAction.MODIFY_POLICY, "policy")
            return version

    @staticmethod
    def _merged(policy: SecurityPolicy, update: dict) -> SecurityPolicy:
        if not isinstance(update, dict):
            raise InvalidPolicy("policy update must be a document")
        unknown = set(update) - {"class_protocols", "grants", "revokes"}
        if unknown:
            raise InvalidPolicy(f"unknown policy sections: {sorted(unknown)}")
        protocols = dict(policy.class_protocols)
        for name, changes in update.get("class_protocols", {}).items():
            try:
                data_class = DataClass(name)
            except ValueError:
                raise InvalidPolicy(f"unknown data class {name!r}") from None
            current = protocols[data_class].to_dict()
            fields = list(current["anonymize_fields"])
            for f in changes.get("add_anonymize_fields", ()):
                if f not in fields:
                    fields.append(f)
            merged = {**current, **{k: v for k, v in changes.items() if k != "add_anonymize_fields"}}
            if "anonymize_fields" not in changes:
                merged["anonymize_fields"] = fields
            bad = set(merged) - {"integrity", "anonymize", "encrypt", "anonymize_fields"}
            if bad:
                raise InvalidPolicy(f"unknown protocol fields: {sorted(bad)}")
            candidate = ProtocolSet.from_dict(merged)
            if not candidate.integrity:
                raise InvalidPolicy(f"integrity cannot be disabled for {name}")
            if data_class is not DataClass.APPLICATION and candidate != DEFAULT_CLASS_PROTOCOLS[data_class]:
                raise InvalidPolicy(f"protocols of the {name} class are fixed")
            protocols[data_class] = candidate
        acl = dict(policy.acl)
        for section, op in (("grants", frozenset.union), ("revokes", frozenset.difference)):
            for g in update.get(section, ()):
                dataset_id, action = g.get("dataset_id"), g.get("action")
                if dataset_id not in policy.datasets:
                    raise UnknownDataset(dataset_id)
                if action not in ACTIONS:
                    raise InvalidPolicy(f"unknown action {action!r}")
                acl[(dataset_id, action)] = op(acl.get((dataset_id, action), frozenset()),
                                               frozenset(g.get("principals", ())))
        return dataclasses.replace(policy, class_protocols=protocols, acl=acl)

    def revoke(self, creds: Credentials, dataset_id: str) -> int:
        """Strip every non-owner grant on ``dataset_id``."""
        with self._write_lock:
            policy = self._policy
            entry = policy.datasets.get(dataset_id)
            if entry is None:
                self._log(creds, AuditAction.REVOKE, dataset_id, "unknown")
                raise UnknownDataset(dataset_id)
            if creds.principal_id != entry.owner and not creds.has_role("security_admin"):
                self._log(creds, AuditAction.REVOKE, dataset_id, "denied")
                raise AccessDenied("only the owner or a security admin may revoke")
            acl = {k: v for k, v in policy.acl.items() if k[0] != dataset_id}
            version = self._swap(dataclasses.replace(policy, acl=acl))
            self._log(creds, AuditAction.REVOKE, dataset_id)
            return version

    classify = staticmethod(classify)

    # -- transform keys ----------------------------------------------------

    def _key(self, owner: str) -> bytes:
        return hmac.new(self._master, b"enc:" + owner.encode("utf-8"), hashlib.sha256).digest()

    def seal(self, owner: str, data: bytes) -> bytes:
        return self.cipher.seal(self._key(owner), data, owner.encode("utf-8"))

    def unseal(self, owner: str, data: bytes) -> bytes:
        return self.cipher.open(self._key(owner), data, owner.encode("utf-8"))

    def mask(self, payload: bytes, fields: Iterable[str]) -> bytes:
        return self.masker.mask(payload, fields)

    # -- REST surface ------------------------------------------------------

    def handle_post(self, creds: Credentials, body: dict):
        """POST /security_engine/: ``body["query"]`` selects the job."""
        query = body.get("query")
        if query == "protocol_query":
            data_class = body.get("data_class") or classify(body.get("metadata")).value
            return self.protocol_query(DataClass(data_class), body.get("owner"), creds).to_dict()
        if query == "access_check":
            d = self.check_access(creds, body["dataset_id"], body["action"])
            return {"allowed": d.allowed, "reason": d.reason, "protocols": d.protocols.to_dict()}
        if query == "policy_update":
            return {"version": self.policy_update(creds, body.get("update", {}))}
        raise InvalidPolicy(f"unknown security query {query!r}")

    def handle_put(self, *args, **kwargs):
        raise MethodNotAllowed("PUT is disabled on the security engine interface")

    def handle_delete(self, creds: Credentials, dataset_id: str) -> dict:
        return {"version": self.revoke(creds, dataset_id)}

    def handle_job(self, kind: JobKind, details: dict, creds: Credentials):
        """Entry point for jobs routed here by the Core."""
        kind = JobKind(kind)
        if kind is JobKind.POLICY_UPDATE:
            if "revoke" in details:
                return {"version": self.revoke(creds, details["revoke"])}
            return {"version": self.policy_update(creds, details["update"])}
        if kind is JobKind.ACCESS_CHECK:
            return self.handle_post(creds, {"query": "access_check", **details})
        if kind is JobKind.PROTOCOL_QUERY:
            return self.handle_post(creds, {"query": "protocol_query", **details})
        raise InvalidPolicy(f"{kind.value} is not a security job")
