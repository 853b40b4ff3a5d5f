"""Protocol enforcement on payloads in transit.

Every payload handed to a wrapper is wrapped in an envelope::

    MAGIC (5) | version (1) | flags (1) | sha256 digest (32) | body

The digest covers the plaintext after masking; the body is that plaintext,
sealed with the owner's key when the encrypt flag is set. The header is the
tamper-evident marker wrappers can check for at their boundary.
"""

from __future__ import annotations

import hashlib

from .errors import IntegrityViolation, TransformFailure
from .security import AccessDecision, SecurityEngine

MAGIC = b"\x89BDMF"
VERSION = 1
FLAG_INTEGRITY = 0x01
FLAG_ANONYMIZED = 0x02
FLAG_ENCRYPTED = 0x04
_KNOWN_FLAGS = FLAG_INTEGRITY | FLAG_ANONYMIZED | FLAG_ENCRYPTED
DIGEST_SIZE = 32
HEADER_SIZE = len(MAGIC) + 2 + DIGEST_SIZE


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def is_enforced(blob: bytes) -> bool:
    return (
        isinstance(blob, (bytes, bytearray))
        and len(blob) >= HEADER_SIZE
        and blob[: len(MAGIC)] == MAGIC
        and blob[len(MAGIC)] == VERSION
        and blob[len(MAGIC) + 1] & ~_KNOWN_FLAGS == 0
    )


def flags_of(blob: bytes) -> int:
    if not is_enforced(blob):
        raise IntegrityViolation("payload carries no enforcement envelope")
    return blob[len(MAGIC) + 1]


def attached_digest(blob: bytes) -> bytes:
    flags_of(blob)
    start = len(MAGIC) + 2
    return bytes(blob[start: start + DIGEST_SIZE])


def body_of(blob: bytes) -> bytes:
    flags_of(blob)
    return bytes(blob[HEADER_SIZE:])


def enforce(payload: bytes, decision: AccessDecision, engine: SecurityEngine) -> bytes:
    """Apply the transforms ``decision.protocols`` requires; return the stored form."""
    if is_enforced(payload):
        raise TransformFailure("payload already carries an enforcement envelope")
    protocols = decision.protocols
    flags = 0
    body = bytes(payload)
    try:
        if protocols.anonymize:
            body = engine.mask(body, protocols.anonymize_fields)
            flags |= FLAG_ANONYMIZED
        digest = bytes(DIGEST_SIZE)
        if protocols.integrity:
            digest = sha256(body)
            flags |= FLAG_INTEGRITY
        if protocols.encrypt:
            if not decision.owner:
                raise TransformFailure("encryption needs the dataset owner")
            body = engine.seal(decision.owner, body)
            flags |= FLAG_ENCRYPTED
    except TransformFailure:
        raise
    except Exception as exc:  # plug-in transforms may raise anything
        raise TransformFailure(f"{type(exc).__name__} while enforcing protocols") from exc
    return MAGIC + bytes([VERSION, flags]) + digest + body


def invert(blob: bytes, decision: AccessDecision, engine: SecurityEngine) -> bytes:
    """Verify and undo the invertible transforms for an authorized reader."""
    flags = flags_of(blob)
    digest = attached_digest(blob)
    body = body_of(blob)
    if flags & FLAG_ENCRYPTED:
        if not decision.owner:
            raise TransformFailure("decryption needs the dataset owner")
        body = engine.unseal(decision.owner, body)
    if flags & FLAG_INTEGRITY and sha256(body) != digest:
        raise IntegrityViolation("content digest mismatch")
    return body


def reenforce(blob: bytes, decision: AccessDecision, engine: SecurityEngine) -> bytes:
    """Open a stored envelope and enforce ``decision`` on its plaintext again."""
    return enforce(invert(blob, decision, engine), decision, engine)
