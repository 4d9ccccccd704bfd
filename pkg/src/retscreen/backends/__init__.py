"""Model backends: deterministic in-process reference scorers, a wire-protocol
client for external backends, and the protocol server used for loopback."""

from __future__ import annotations

from .base import (
    ALL_CAPABILITIES,
    CLASSIFY_TASKS,
    EDD_LABELS,
    TASK_EDD,
    TASK_PVI,
    TASK_QUALITY,
    Backend,
    BackendDescriptor,
    BackendError,
    BackendTimeoutError,
    BackendUnavailableError,
    MalformedResponseError,
    ProbabilityMask,
    ScoreMap,
    UnsupportedError,
    classify,
    segment,
)
from .client import ExternalBackend
from .reference import ReferenceBackend, ReferenceConfig
from .server import BackendServer

__all__ = [
    "ALL_CAPABILITIES",
    "CLASSIFY_TASKS",
    "EDD_LABELS",
    "TASK_EDD",
    "TASK_PVI",
    "TASK_QUALITY",
    "Backend",
    "BackendDescriptor",
    "BackendError",
    "BackendServer",
    "BackendTimeoutError",
    "BackendUnavailableError",
    "ExternalBackend",
    "MalformedResponseError",
    "ProbabilityMask",
    "ReferenceBackend",
    "ReferenceConfig",
    "ScoreMap",
    "UnsupportedError",
    "build_backend",
    "classify",
    "segment",
]


def build_backend(
    descriptor: BackendDescriptor,
    reference_config: ReferenceConfig | None = None,
    timeout_s: float = 5.0,
) -> Backend:
    """Instantiate a backend from its descriptor."""
    if descriptor.kind == "reference":
        return ReferenceBackend(config=reference_config, model_id=descriptor.model_id)
    return ExternalBackend(descriptor, timeout_s=timeout_s)
