"""Exception hierarchy shared by every gateway component.

Each error carries a stable ``code`` (its class name) and the HTTP status
used when it crosses one of the REST interfaces.
"""

from __future__ import annotations


class BudamafError(Exception):
    """Base class. ``code`` is the wire name of the error."""

    http_status = 500

    @property
    def code(self) -> str:
        return type(self).__name__

    def to_dict(self) -> dict:
        return {"code": self.code, "message": str(self)}


# -- request shape -----------------------------------------------------------

class MalformedRequest(BudamafError):
    http_status = 400


class UnknownJobType(BudamafError):
    http_status = 400


class SchemaViolation(BudamafError):
    http_status = 400


class UsageError(BudamafError):
    http_status = 400


# -- job lifecycle -----------------------------------------------------------

class IllegalTransition(BudamafError):
    http_status = 409


class NotFound(BudamafError):
    http_status = 404


class ChannelClosed(BudamafError):
    http_status = 409


class MethodNotAllowed(BudamafError):
    http_status = 405


# -- security ----------------------------------------------------------------

class AuthenticationFailed(BudamafError):
    http_status = 401


class AccessDenied(BudamafError):
    http_status = 403


class UnknownDataset(BudamafError):
    http_status = 404


class InvalidPolicy(BudamafError):
    http_status = 400


class IntegrityViolation(BudamafError):
    http_status = 500


class TransformFailure(BudamafError):
    http_status = 422


# -- load / availability -----------------------------------------------------

class Overloaded(BudamafError):
    """No healthy component instance: the framework is under high load."""

    http_status = 503


class Unreachable(BudamafError):
    http_status = 502


class DuplicateId(BudamafError):
    http_status = 409


# -- data stores -------------------------------------------------------------

class StoreNotFound(BudamafError):
    http_status = 404


class StoreNotReady(BudamafError):
    http_status = 409


class WrapperError(BudamafError):
    """A wrapper answered ``ok: false``; ``wrapper_code`` is its error code."""

    http_status = 502

    def __init__(self, message: str, wrapper_code: str = "INTERNAL"):
        super().__init__(message)
        self.wrapper_code = wrapper_code

    def to_dict(self) -> dict:
        return {"code": self.code, "message": str(self), "wrapper_code": self.wrapper_code}


class CapabilityMissing(BudamafError):
    http_status = 422


class CapacityExceeded(BudamafError):
    http_status = 409


class NoWrapperForKind(BudamafError):
    http_status = 422


class MigrationFailed(BudamafError):
    http_status = 500


class VerificationFailed(BudamafError):
    http_status = 500


class LinkExists(BudamafError):
    http_status = 409


class NoRemedy(BudamafError):
    http_status = 503


class NoFeasiblePlacement(BudamafError):
    http_status = 409


class ScenarioAssertionFailed(BudamafError):
    pass


class RemoteError(BudamafError):
    """An error received over the wire whose code has no local class."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(message)
        self._code = code

    @property
    def code(self) -> str:
        return self._code


ERRORS_BY_CODE = {
    cls.__name__: cls
    for cls in list(BudamafError.__subclasses__()) + [BudamafError]
}


def from_dict(doc: dict) -> BudamafError:
    """Rebuild an error received over the wire."""
    cls = ERRORS_BY_CODE.get(doc.get("code", ""))
    if cls is None or cls is RemoteError:
        return RemoteError(doc.get("code") or "BudamafError", doc.get("message", ""))
    if cls is WrapperError:
        return WrapperError(doc.get("message", ""), doc.get("wrapper_code", "INTERNAL"))
    return cls(doc.get("message", ""))
