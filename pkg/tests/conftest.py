import pytest

from budamaf.errors import BudamafError
from budamaf.protocol import Credentials
from budamaf.stack import StackConfig, build_stack

PRINCIPALS = {
    "app1": ["application"],
    "app2": ["application"],
    "app3": ["application"],
    "admin": ["admin"],
    "sec": ["security_admin"],
    "mod": ["analytics_module"],
}


def creds(name: str) -> Credentials:
    return Credentials(name, f"tok-{name}", frozenset(PRINCIPALS[name]))


class Gate:
    """Submit jobs to a stack's Core as a named principal and wait for them."""

    def __init__(self, stack):
        self.stack = stack
        self.core = stack.core

    def raw(self, who, kind, details):
        return {"initiator": creds(who).to_dict(), "job_description": kind, "job_details": details}

    def submit(self, who, kind, details):
        return self.core.submit_job(self.raw(who, kind, details))

    def run(self, who, kind, details, timeout=30):
        return self.core.wait(self.submit(who, kind, details), timeout)

    def outcome(self, who, kind, details):
        """``data`` of a finished job, else the error code (raised at submit or recorded)."""
        try:
            record = self.run(who, kind, details)
        except BudamafError as exc:
            return exc.code
        return record.data if record.status.value == "finished" else record.data.code

    def ok(self, who, kind, details):
        record = self.run(who, kind, details)
        assert record.status.value == "finished", record.data
        return record.data

    def store(self, who, kind, store_id, provider="EU-1", machines=1, data_class="application"):
        return self.ok(who, "create_store", {"kind": kind, "provider_id": provider, "machines": machines,
                                             "store_id": store_id, "metadata": {"data_class": data_class}})


def make_stack(remote_client=None, **overrides):
    principals = [{"principal_id": n, "token": f"tok-{n}", "roles": r} for n, r in PRINCIPALS.items()]
    cfg = {"principals": principals, "timeout_s": 2.0, "workers": 8}
    cfg.update(overrides)
    return build_stack(StackConfig(**cfg), remote_client=remote_client)


@pytest.fixture
def stack():
    s = make_stack()
    yield s
    s.close()


@pytest.fixture
def gate(stack):
    return Gate(stack)
