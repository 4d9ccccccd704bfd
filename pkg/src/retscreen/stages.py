"""The four screening stages: quality gate with re-capture policy, impairment
detection at a calibrated operating point, gated multi-label diagnosis, and
lesion-region visualization (segmentation refined by mask morphology)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Sequence

from .backends import (
    Backend,
    BackendError,
    EDD_LABELS,
    TASK_EDD,
    TASK_PVI,
    TASK_QUALITY,
    ProbabilityMask,
    classify,
    segment,
)
from .backends.reference import quality_features
from .core import AllOneClassError, BinaryMask, LabeledScore, PixelGrid, confusion_at
from .imaging import (
    NoFovError,
    connected_components,
    disc,
    erode,
    extract_fov,
    overlay,
    refine_lesion_mask,
    resize_mask_nearest,
)

if TYPE_CHECKING:
    from .config import PipelineConfig


class NotGatedError(RuntimeError):
    """Diagnosis/visualization called without a positive impairment decision."""


class StageFailureError(RuntimeError):
    """A backend failure, tagged with the screening stage it happened in."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


POLICY_TARGET_SENSITIVITY = "target-sensitivity"
POLICY_TARGET_SPECIFICITY = "target-specificity"
POLICY_YOUDEN = "youden"
POLICIES = (POLICY_TARGET_SENSITIVITY, POLICY_TARGET_SPECIFICITY, POLICY_YOUDEN)

# classifies nothing positive; sits just above any legal score
THRESHOLD_SENTINEL = math.nextafter(1.0, math.inf)

UNATTAINED_FLAG = "target-unattained"


@dataclass(frozen=True)
class OperatingPoint:
    """A chosen threshold with its calibration-set provenance."""

    threshold: float
    policy: str
    target: float | None
    achieved_sensitivity: float
    achieved_specificity: float
    calibration_set_id: str = ""

    def to_json_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "policy": self.policy,
            "target": self.target,
            "achieved_sensitivity": self.achieved_sensitivity,
            "achieved_specificity": self.achieved_specificity,
            "calibration_set_id": self.calibration_set_id,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "OperatingPoint":
        try:
            return cls(
                threshold=float(data["threshold"]),
                policy=str(data["policy"]),
                target=None if data.get("target") is None else float(data["target"]),
                achieved_sensitivity=float(data["achieved_sensitivity"]),
                achieved_specificity=float(data["achieved_specificity"]),
                calibration_set_id=str(data.get("calibration_set_id", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"operating point document malformed: {exc}") from exc


def calibrate_operating_point(
    samples: Sequence[LabeledScore],
    policy: str,
    target: float | None = None,
    calibration_set_id: str = "",
) -> OperatingPoint:
    """Pick a threshold from the calibration scores (plus the above-everything
    sentinel) under one of three policies.

    target-sensitivity: among thresholds with sensitivity >= target, maximize
    specificity (ties -> higher threshold). target-specificity is symmetric.
    youden: maximize sensitivity + specificity - 1 (ties -> higher threshold).
    An unattainable target falls back to the best achievable point and flags
    the calibration id with "target-unattained".
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if policy != POLICY_YOUDEN:
        if target is None or not (0.0 <= target <= 1.0):
            raise ValueError(f"policy {policy} requires a target in [0, 1], got {target!r}")
    if not any(s.label for s in samples) or not any(not s.label for s in samples):
        raise AllOneClassError("calibration set needs both classes")

    candidates = sorted({s.score for s in samples}) + [THRESHOLD_SENTINEL]
    sweep = []
    for t in candidates:
        counts = confusion_at(samples, t)
        sweep.append((t, counts.sensitivity, counts.specificity))

    unattained = False
    if policy == POLICY_TARGET_SENSITIVITY:
        feasible = [row for row in sweep if row[1] >= target]
        if feasible:
            best = max(feasible, key=lambda r: (r[2], r[0]))
        else:
            unattained = True
            best = max(sweep, key=lambda r: (r[1], r[2], r[0]))
    elif policy == POLICY_TARGET_SPECIFICITY:
        feasible = [row for row in sweep if row[2] >= target]
        if feasible:
            best = max(feasible, key=lambda r: (r[1], r[0]))
        else:
            unattained = True
            best = max(sweep, key=lambda r: (r[2], r[1], r[0]))
    else:
        best = max(sweep, key=lambda r: (r[1] + r[2] - 1.0, r[0]))

    set_id = calibration_set_id
    if unattained:
        set_id = f"{set_id}#{UNATTAINED_FLAG}" if set_id else f"#{UNATTAINED_FLAG}"
    return OperatingPoint(
        threshold=best[0],
        policy=policy,
        target=target,
        achieved_sensitivity=best[1],
        achieved_specificity=best[2],
        calibration_set_id=set_id,
    )


# ---------------------------------------------------------------------------
# stage 1: quality gate

@dataclass(frozen=True)
class QualityVerdict:
    gradable: bool
    score: float
    reasons: tuple[str, ...]
    attempt: int


class RecaptureAction(str, Enum):
    PROCEED = "proceed"
    PROMPT_RECAPTURE = "prompt-recapture"
    ABANDON_UNGRADABLE = "abandon-ungradable"


_REASON_NAMES = {
    "fov_coverage": "low-fov-coverage",
    "sharpness": "low-sharpness",
    "illumination_uniformity": "low-illumination-uniformity",
    "contrast": "low-contrast",
}


def _failure_reasons(image: PixelGrid, cfg: "PipelineConfig") -> tuple[str, ...]:
    """Name the weakest local features; independent of which backend scored."""
    try:
        feats = quality_features(image, cfg.reference)
    except NoFovError:
        return ("no-fov",)
    weak = sorted(
        (v, name) for name, v in feats.items() if v < cfg.reason_cutoff
    )
    if not weak:
        return ("low-overall-quality",)
    return tuple(_REASON_NAMES[name] for _, name in weak)


def assess_quality(
    image: PixelGrid, backend: Backend, cfg: "PipelineConfig", attempt: int = 1
) -> QualityVerdict:
    """Gradability verdict; reasons are populated when the image fails the gate."""
    try:
        scores = classify(backend, image, TASK_QUALITY)
    except BackendError as exc:
        raise StageFailureError("quality", exc) from exc
    score = scores.entries["gradable"]
    gradable = score >= cfg.quality_threshold
    reasons = () if gradable else _failure_reasons(image, cfg)
    return QualityVerdict(gradable=gradable, score=score, reasons=reasons, attempt=attempt)


def recapture_decision(verdict: QualityVerdict, cfg: "PipelineConfig") -> RecaptureAction:
    """Proceed on a gradable capture; otherwise prompt until attempts run out."""
    if verdict.attempt < 1:
        raise ValueError("attempt must be >= 1")
    if verdict.gradable:
        return RecaptureAction.PROCEED
    if verdict.attempt < cfg.max_attempts:
        return RecaptureAction.PROMPT_RECAPTURE
    return RecaptureAction.ABANDON_UNGRADABLE


# ---------------------------------------------------------------------------
# stage 2: impairment detection

@dataclass(frozen=True)
class PVIResult:
    score: float
    decision: bool
    operating_point: OperatingPoint


def detect_pvi(image: PixelGrid, backend: Backend, operating_point: OperatingPoint) -> PVIResult:
    """Impairment possibility score judged against the calibrated threshold."""
    try:
        scores = classify(backend, image, TASK_PVI)
    except BackendError as exc:
        raise StageFailureError("pvi", exc) from exc
    score = scores.entries["pvi"]
    return PVIResult(
        score=score, decision=score >= operating_point.threshold, operating_point=operating_point
    )


# ---------------------------------------------------------------------------
# stage 3: gated multi-label diagnosis

@dataclass(frozen=True)
class DiagnosisVector:
    probs: dict[str, float]
    positives: tuple[str, ...]
    per_label_thresholds: dict[str, float]


def _require_gate(pvi: PVIResult | None, stage: str) -> None:
    if pvi is None or not pvi.decision:
        raise NotGatedError(f"{stage} requires a positive impairment decision")


def diagnose(
    image: PixelGrid, backend: Backend, cfg: "PipelineConfig", pvi: PVIResult | None
) -> DiagnosisVector:
    """Multi-label initial diagnosis; only reachable from a positive PVI result.

    Positives may be empty (report then points at the Others score) or contain
    several labels at once.
    """
    _require_gate(pvi, "diagnose")
    try:
        scores = classify(backend, image, TASK_EDD)
    except BackendError as exc:
        raise StageFailureError("edd", exc) from exc
    thresholds = {label: cfg.edd_thresholds.get(label, 0.5) for label in EDD_LABELS}
    positives = tuple(
        label for label in EDD_LABELS if scores.entries[label] >= thresholds[label]
    )
    return DiagnosisVector(
        probs=dict(scores.entries), positives=positives, per_label_thresholds=thresholds
    )


# ---------------------------------------------------------------------------
# stage 4: lesion-region visualization

@dataclass(frozen=True, eq=False)
class LesionVisualization:
    raw: ProbabilityMask
    refined: BinaryMask
    overlay: PixelGrid
    components: tuple


def visualize_lesions(
    image: PixelGrid,
    backend: Backend,
    cfg: "PipelineConfig",
    pvi: PVIResult | None,
    original: PixelGrid | None = None,
) -> LesionVisualization:
    """Segment, then refine: binarize, clip to the field of view, open, drop
    under-sized components. The overlay is rendered at the original frame with a
    translucent fill plus a solid contour."""
    _require_gate(pvi, "visualize_lesions")
    try:
        raw = segment(backend, image)
    except BackendError as exc:
        raise StageFailureError("vlr", exc) from exc

    fov = extract_fov(
        image,
        threshold_fraction=cfg.reference.fov_threshold_fraction,
        erosion_margin_px=cfg.reference.fov_erosion_px,
        min_coverage=cfg.reference.fov_min_coverage,
    )
    binarized = BinaryMask.from_array(raw.probs >= cfg.vlr_binarize_threshold)
    refined = refine_lesion_mask(
        binarized,
        fov.mask,
        open_radius=cfg.vlr_open_radius,
        min_area_fraction=cfg.vlr_min_area_fraction,
    )
    components = tuple(connected_components(refined))

    target = original if original is not None else image
    if (refined.width, refined.height) != (target.width, target.height):
        render_mask = resize_mask_nearest(refined, target.width, target.height)
    else:
        render_mask = refined
    rendered = overlay(target, render_mask, cfg.overlay_color, cfg.overlay_alpha)
    if render_mask.count:
        contour = BinaryMask(
            render_mask.width,
            render_mask.height,
            render_mask.bits & ~erode(render_mask, disc(1)).bits,
        )
        rendered = overlay(rendered, contour, cfg.overlay_color, 0.9)
    return LesionVisualization(
        raw=raw, refined=refined, overlay=rendered, components=components
    )
