"""Reference wrappers for the three store kinds."""

from .base import (
    KINDS,
    Backend,
    CapabilitySet,
    NativeError,
    QueryResult,
    UniformQuery,
    Wrapper,
    WrapperRequest,
    WrapperResponse,
    digest_hex,
)
from .document import DocumentWrapper
from .key_value import KeyValueWrapper
from .tabular import TabularWrapper

WRAPPER_CLASSES = {
    "key_value": KeyValueWrapper,
    "document": DocumentWrapper,
    "tabular": TabularWrapper,
}


def make_wrapper(kind: str, **kwargs) -> Wrapper:
    return WRAPPER_CLASSES[kind](**kwargs)


__all__ = [
    "KINDS", "Backend", "CapabilitySet", "NativeError", "QueryResult", "UniformQuery", "Wrapper",
    "WrapperRequest", "WrapperResponse", "digest_hex", "DocumentWrapper", "KeyValueWrapper",
    "TabularWrapper", "WRAPPER_CLASSES", "make_wrapper",
]
