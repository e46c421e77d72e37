"""Commercial face-comparison API clients and a local mock server."""

from .client import (
    BatchError,
    BatchResult,
    CompareResult,
    CredentialError,
    ProviderConfig,
    ProviderContractError,
    TransportError,
    batch_confidence,
    compare,
    encode_png,
)

__all__ = [
    "BatchError",
    "BatchResult",
    "CompareResult",
    "CredentialError",
    "ProviderConfig",
    "ProviderContractError",
    "TransportError",
    "batch_confidence",
    "compare",
    "encode_png",
]
