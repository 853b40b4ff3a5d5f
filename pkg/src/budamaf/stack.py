"""Assemble a gateway stack from a JSON config.

Config format (all keys optional)::

    {
      "providers": [{"provider_id": "EU-1", "region": "eu", "capacity_machines": 16,
                     "price_storage": 0.02, "price_egress": 0.05, "price_request": 0.004,
                     "latency_ms": {"eu": 10, "kr": 250}}],
      "principals": [{"principal_id": "app1", "token": "t1", "roles": ["application"]}],
      "principals_path": "principals.json",
      "timeout_s": 5.0, "workers": 16, "q_high": 64,
      "offloading_instances": 1, "wrappers_per_kind": 1, "strict_envelopes": true,
      "policy_path": null, "audit_path": null, "wal_path": null, "master_key_hex": null,
      "catalog_provider": "EU-1",
      "remote_wrappers": [{"wrapper_id": "kv-remote", "kind": "key_value", "endpoint": "http://..."}],
      "internal_token": "shared secret for /off_loading_apis/ calls between Core and components"
    }
"""

from __future__ import annotations

import json
import secrets
from dataclasses import dataclass, field, fields
from typing import Optional

from .analytics import AnalyticsEngine
from .core import Core, LocalComponent, PrincipalRegistry
from .federation import Federation, ProviderDescriptor
from .offloading import OffloadingAPIs, WrapperRegistration
from .protocol import Component, Credentials
from .security import SecurityEngine
from .wrappers import KINDS, WRAPPER_CLASSES
from .wrappers.base import Backend

CATALOG_STORE = "analytics-catalog"

DEFAULT_PROVIDERS = [
    {"provider_id": "EU-1", "region": "eu", "capacity_machines": 16, "price_storage": 0.023,
     "price_egress": 0.09, "price_request": 0.004, "latency_ms": {"eu": 12, "kr": 260, "us": 90}},
    {"provider_id": "KR-1", "region": "kr", "capacity_machines": 16, "price_storage": 0.025,
     "price_egress": 0.12, "price_request": 0.0045, "latency_ms": {"eu": 260, "kr": 8, "us": 140}},
    {"provider_id": "US-1", "region": "us", "capacity_machines": 16, "price_storage": 0.021,
     "price_egress": 0.09, "price_request": 0.004, "latency_ms": {"eu": 90, "kr": 140, "us": 10}},
]


@dataclass
class StackConfig:
    providers: list = field(default_factory=lambda: [dict(p) for p in DEFAULT_PROVIDERS])
    principals: list = field(default_factory=list)
    principals_path: Optional[str] = None
    timeout_s: float = 5.0
    workers: int = 16
    q_high: int = 64
    offloading_instances: int = 1
    wrappers_per_kind: int = 1
    strict_envelopes: bool = True
    policy_path: Optional[str] = None
    audit_path: Optional[str] = None
    wal_path: Optional[str] = None
    master_key_hex: Optional[str] = None
    catalog_provider: Optional[str] = None
    remote_wrappers: list = field(default_factory=list)
    # shared secret for component endpoints; generated per process when unset
    internal_token: Optional[str] = None

    @classmethod
    def from_dict(cls, doc: dict) -> "StackConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str) -> "StackConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Stack:
    config: StackConfig
    federation: Federation
    security: SecurityEngine
    offloading: OffloadingAPIs
    analytics: AnalyticsEngine
    core: Core
    wrappers: dict
    components: dict

    def close(self) -> None:
        self.core.close()


def build_stack(config: Optional[StackConfig] = None, remote_client=None) -> Stack:
    """Everything in one process; ``remote_client(endpoint)`` builds clients for remote wrappers."""
    config = config or StackConfig()
    if not config.internal_token:
        config.internal_token = secrets.token_hex(16)
    federation = Federation(ProviderDescriptor.from_dict(p) for p in config.providers)
    key = bytes.fromhex(config.master_key_hex) if config.master_key_hex else None
    security = SecurityEngine(config.policy_path, config.audit_path, key)
    offloading = OffloadingAPIs(federation, security, q_high=config.q_high, deadline=config.timeout_s)

    wrappers = {}
    for kind in KINDS:
        backend = Backend(WRAPPER_CLASSES[kind].engine_class)
        for i in range(config.wrappers_per_kind):
            wrapper = WRAPPER_CLASSES[kind](f"{kind}-{i + 1}", backend, require_envelope=config.strict_envelopes)
            offloading.register_wrapper(WrapperRegistration(wrapper.wrapper_id, kind, "local", pool=f"local-{kind}"), wrapper)
            wrappers[wrapper.wrapper_id] = wrapper
    for doc in config.remote_wrappers:
        if remote_client is None:
            raise ValueError("remote wrappers need a client factory")
        client = remote_client(doc["endpoint"])
        offloading.register_wrapper(WrapperRegistration(doc["wrapper_id"], doc["kind"], doc["endpoint"]), client)

    catalog_provider = config.catalog_provider or sorted(federation.providers)[0]
    offloading.create_store("key_value", catalog_provider, 1, store_id=CATALOG_STORE)
    analytics = AnalyticsEngine(offloading, security, CATALOG_STORE)

    if config.principals_path:
        principals = PrincipalRegistry.load(config.principals_path)
    elif config.principals:
        principals = PrincipalRegistry({p["principal_id"]: Credentials.from_dict(p) for p in config.principals})
    else:
        principals = None
    core = Core(security, principals, timeout=config.timeout_s, workers=config.workers, wal_path=config.wal_path)

    components = {}
    for name, service, count in (
        (Component.SECURITY_ENGINE, security, 1),
        (Component.OFF_LOADING_APIS, offloading, config.offloading_instances),
        (Component.ANALYTICS_ENGINE, analytics, 1),
    ):
        for i in range(count):
            instance_id = f"{name.value}-{i + 1}"
            components[instance_id] = LocalComponent(name, service)
            core.register_instance(name, instance_id, components[instance_id])
    return Stack(config, federation, security, offloading, analytics, core, wrappers, components)
