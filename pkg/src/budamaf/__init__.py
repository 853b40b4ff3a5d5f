"""Unified data-management gateway for a simulated multi-cloud federation."""

from .errors import BudamafError
from .protocol import Component, Credentials, JobKind, JobRecord, JobStatus

__version__ = "0.1.0"

__all__ = ["BudamafError", "Component", "Credentials", "JobKind", "JobRecord", "JobStatus", "__version__"]
