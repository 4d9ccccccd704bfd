"""Model-backend abstraction shared by the in-process reference scorers and the
external wire-protocol client."""

from __future__ import annotations

import math
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from ..core import PixelGrid

TASK_QUALITY = "quality"
TASK_PVI = "pvi"
TASK_EDD = "edd"
CLASSIFY_TASKS = (TASK_QUALITY, TASK_PVI, TASK_EDD)

# the five named disease categories plus the catch-all, fixed by contract
EDD_LABELS = ("AMD", "Cataract", "DR", "Glaucoma", "MMD", "Others")

TASK_SCORE_LABELS = {TASK_QUALITY: ("gradable",), TASK_PVI: ("pvi",), TASK_EDD: EDD_LABELS}

ALL_CAPABILITIES = frozenset({"classify-quality", "classify-pvi", "classify-edd", "segment"})


class BackendError(Exception):
    """Base for backend failures."""


class UnsupportedError(BackendError):
    """Backend does not support the requested task or operation."""


class BackendUnavailableError(BackendError):
    """Backend could not be reached."""


class BackendTimeoutError(BackendError):
    """Backend did not answer within the configured timeout."""


class MalformedResponseError(BackendError):
    """Backend reply violated the task schema or the wire protocol."""


@dataclass(frozen=True)
class ScoreMap:
    """Classifier output: label -> score in [0, 1], plus provenance."""

    entries: dict[str, float]
    model_id: str
    latency_ms: float

    def __post_init__(self) -> None:
        for label, score in self.entries.items():
            if not (isinstance(score, float) and math.isfinite(score) and 0.0 <= score <= 1.0):
                raise ValueError(f"score for {label!r} must be finite in [0, 1], got {score!r}")


@dataclass(frozen=True, eq=False)
class ProbabilityMask:
    """Raw segmentation output: row-major float32 probabilities in [0, 1]."""

    width: int
    height: int
    probs: np.ndarray

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"geometry must be positive, got {self.width}x{self.height}")
        p = np.asarray(self.probs, dtype=np.float32)
        if p.shape != (self.height, self.width):
            raise ValueError(f"probs shape {p.shape} != {(self.height, self.width)}")
        if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
            raise ValueError("probabilities must be finite in [0, 1]")
        object.__setattr__(self, "probs", p)


@dataclass(frozen=True)
class BackendDescriptor:
    """Where a model lives and what it can do; external backends need an endpoint."""

    kind: str  # "reference" | "external"
    model_id: str
    capabilities: frozenset[str] = field(default_factory=lambda: ALL_CAPABILITIES)
    endpoint: tuple[str, int] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("reference", "external"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        unknown = set(self.capabilities) - ALL_CAPABILITIES
        if unknown:
            raise ValueError(f"unknown capabilities {sorted(unknown)}")
        if self.kind == "external" and self.endpoint is None:
            raise ValueError("external backend requires an endpoint")


class Backend(ABC):
    """A scoring provider. Implementations must be pure functions of the image
    and their configuration so repeated calls are bit-identical."""

    descriptor: BackendDescriptor

    @abstractmethod
    def classify(self, image: PixelGrid, task: str) -> dict[str, float]:
        """Raw label->score mapping for one classification task."""

    @abstractmethod
    def segment(self, image: PixelGrid) -> ProbabilityMask:
        """Per-pixel lesion probability at the input geometry."""

    def close(self) -> None:
        pass


def _validate_entries(task: str, entries: dict[str, float], source: str) -> dict[str, float]:
    expected = TASK_SCORE_LABELS[task]
    if set(entries) != set(expected):
        raise MalformedResponseError(
            f"{source}: task {task!r} must return labels {sorted(expected)}, got {sorted(entries)}"
        )
    clean = {}
    for label in expected:
        score = float(entries[label])
        if not (math.isfinite(score) and 0.0 <= score <= 1.0):
            raise MalformedResponseError(f"{source}: score for {label!r} out of range: {score!r}")
        clean[label] = score
    return clean


def classify(backend: Backend, image: PixelGrid, task: str) -> ScoreMap:
    """Run one classification task and validate the reply shape.

    quality/pvi return a single score under "gradable"/"pvi"; edd returns
    exactly the six disease labels.
    """
    if task not in CLASSIFY_TASKS:
        raise UnsupportedError(f"unknown classification task {task!r}")
    cap = f"classify-{task}"
    if cap not in backend.descriptor.capabilities:
        raise UnsupportedError(f"backend {backend.descriptor.model_id!r} does not support {cap}")
    t0 = time.perf_counter()
    entries = backend.classify(image, task)
    latency_ms = (time.perf_counter() - t0) * 1000.0
    clean = _validate_entries(task, entries, backend.descriptor.model_id)
    return ScoreMap(entries=clean, model_id=backend.descriptor.model_id, latency_ms=latency_ms)


def segment(backend: Backend, image: PixelGrid) -> ProbabilityMask:
    """Run segmentation; the mask must come back at the input geometry."""
    if "segment" not in backend.descriptor.capabilities:
        raise UnsupportedError(f"backend {backend.descriptor.model_id!r} does not support segment")
    mask = backend.segment(image)
    if (mask.width, mask.height) != (image.width, image.height):
        raise MalformedResponseError(
            f"{backend.descriptor.model_id}: mask geometry {mask.width}x{mask.height}"
            f" != image {image.width}x{image.height}"
        )
    return mask
