"""Pipeline configuration: one JSON document holding thresholds, the operating
point (inline or by path), backend descriptors, and the working resolution."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .backends import (
    ALL_CAPABILITIES,
    Backend,
    BackendDescriptor,
    ReferenceConfig,
    build_backend,
)
from .backends.base import CLASSIFY_TASKS, EDD_LABELS
from .stages import OperatingPoint

STAGE_TASKS = ("quality", "pvi", "edd", "segment")

EYES = ("left", "right")


class ConfigInvalidError(ValueError):
    """The pipeline configuration is unusable; the message names what is wrong."""


def _default_edd_thresholds() -> dict[str, float]:
    return {label: 0.5 for label in EDD_LABELS}


def _default_descriptors() -> dict[str, BackendDescriptor]:
    shared = BackendDescriptor(kind="reference", model_id="ref-features-v1")
    return {task: shared for task in STAGE_TASKS}


@dataclass(frozen=True)
class PipelineConfig:
    operating_point: OperatingPoint
    working_resolution: int = 512
    eyes: tuple[str, ...] = EYES
    quality_threshold: float = 0.5
    max_attempts: int = 3
    reason_cutoff: float = 0.45
    edd_thresholds: Mapping[str, float] = field(default_factory=_default_edd_thresholds)
    vlr_binarize_threshold: float = 0.5
    vlr_open_radius: int = 2
    vlr_min_area_fraction: float = 0.0005
    overlay_alpha: float = 0.35
    overlay_color: tuple[float, float, float] = (0.86, 0.08, 0.24)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    backend_descriptors: Mapping[str, BackendDescriptor] = field(
        default_factory=_default_descriptors
    )
    backend_timeout_s: float = 5.0
    fsync_events: bool = True

    def __post_init__(self) -> None:
        if self.working_resolution < 32:
            raise ConfigInvalidError("working_resolution must be >= 32")
        if not self.eyes or any(e not in EYES for e in self.eyes):
            raise ConfigInvalidError(f"eyes must be a non-empty subset of {EYES}")
        if len(set(self.eyes)) != len(self.eyes):
            raise ConfigInvalidError("eyes must not repeat")
        if self.max_attempts < 1:
            raise ConfigInvalidError("max_attempts must be >= 1")
        if not 0.0 <= self.quality_threshold <= 1.0:
            raise ConfigInvalidError("quality_threshold must be in [0, 1]")
        missing = set(STAGE_TASKS) - set(self.backend_descriptors)
        if missing:
            raise ConfigInvalidError(f"backend descriptors missing for {sorted(missing)}")
        for task, desc in self.backend_descriptors.items():
            needed = "segment" if task == "segment" else f"classify-{task}"
            if needed not in desc.capabilities:
                raise ConfigInvalidError(
                    f"backend {desc.model_id!r} configured for {task} lacks capability {needed}"
                )


def _parse_endpoint(raw: object, where: str) -> tuple[str, int]:
    if isinstance(raw, str) and ":" in raw:
        host, _, port = raw.rpartition(":")
        try:
            return host, int(port)
        except ValueError:
            pass
    if isinstance(raw, (list, tuple)) and len(raw) == 2:
        return str(raw[0]), int(raw[1])
    raise ConfigInvalidError(f"{where}: endpoint must be 'host:port' or [host, port], got {raw!r}")


def _parse_descriptor(raw: object, where: str) -> BackendDescriptor:
    if not isinstance(raw, dict):
        raise ConfigInvalidError(f"{where}: backend descriptor must be an object")
    kind = raw.get("kind", "reference")
    model_id = raw.get("model_id", "ref-features-v1")
    capabilities = frozenset(raw.get("capabilities", sorted(ALL_CAPABILITIES)))
    endpoint = None
    if kind == "external":
        if "endpoint" not in raw:
            raise ConfigInvalidError(f"{where}: external backend needs an endpoint")
        endpoint = _parse_endpoint(raw["endpoint"], where)
    try:
        return BackendDescriptor(
            kind=kind, model_id=model_id, capabilities=capabilities, endpoint=endpoint
        )
    except ValueError as exc:
        raise ConfigInvalidError(f"{where}: {exc}") from exc


def load_operating_point(path: str | Path) -> OperatingPoint:
    p = Path(path)
    if not p.is_file():
        raise ConfigInvalidError(f"operating point file not found: {p}")
    try:
        return OperatingPoint.from_json_dict(json.loads(p.read_text()))
    except (json.JSONDecodeError, ValueError) as exc:
        raise ConfigInvalidError(f"operating point file {p} unusable: {exc}") from exc


def load_config(path: str | Path) -> PipelineConfig:
    """Parse and validate a config document; relative operating-point paths
    resolve against the config file's directory."""
    p = Path(path)
    if not p.is_file():
        raise ConfigInvalidError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigInvalidError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigInvalidError(f"config file {p} must hold a JSON object")
    return config_from_dict(doc, base_dir=p.parent)


def config_from_dict(doc: dict, base_dir: Path | None = None) -> PipelineConfig:
    base = base_dir or Path.cwd()
    if "operating_point" in doc:
        op = OperatingPoint.from_json_dict(doc["operating_point"])
    elif "operating_point_path" in doc:
        raw_path = Path(doc["operating_point_path"])
        op = load_operating_point(raw_path if raw_path.is_absolute() else base / raw_path)
    else:
        raise ConfigInvalidError("config needs operating_point or operating_point_path")

    kwargs: dict = {"operating_point": op}
    for key in (
        "working_resolution",
        "quality_threshold",
        "max_attempts",
        "reason_cutoff",
        "backend_timeout_s",
        "fsync_events",
    ):
        if key in doc:
            kwargs[key] = doc[key]
    if "eyes" in doc:
        kwargs["eyes"] = tuple(doc["eyes"])
    if "edd_thresholds" in doc:
        thresholds = _default_edd_thresholds()
        thresholds.update({str(k): float(v) for k, v in doc["edd_thresholds"].items()})
        kwargs["edd_thresholds"] = thresholds
    vlr = doc.get("vlr", {})
    if "binarize_threshold" in vlr:
        kwargs["vlr_binarize_threshold"] = float(vlr["binarize_threshold"])
    if "open_radius" in vlr:
        kwargs["vlr_open_radius"] = int(vlr["open_radius"])
    if "min_area_fraction" in vlr:
        kwargs["vlr_min_area_fraction"] = float(vlr["min_area_fraction"])
    if "overlay_alpha" in vlr:
        kwargs["overlay_alpha"] = float(vlr["overlay_alpha"])
    if "overlay_color" in vlr:
        kwargs["overlay_color"] = tuple(float(c) for c in vlr["overlay_color"])
    if "reference" in doc:
        try:
            kwargs["reference"] = ReferenceConfig(**doc["reference"])
        except TypeError as exc:
            raise ConfigInvalidError(f"reference config malformed: {exc}") from exc
    if "backends" in doc:
        raw = doc["backends"]
        if not isinstance(raw, dict):
            raise ConfigInvalidError("backends must map stage tasks to descriptors")
        descriptors = dict(_default_descriptors())
        for task, desc in raw.items():
            if task not in STAGE_TASKS:
                raise ConfigInvalidError(f"unknown backend task {task!r}")
            descriptors[task] = _parse_descriptor(desc, f"backends.{task}")
        kwargs["backend_descriptors"] = descriptors

    try:
        return PipelineConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigInvalidError):
            raise
        raise ConfigInvalidError(str(exc)) from exc


def default_config(operating_point: OperatingPoint | None = None, **overrides) -> PipelineConfig:
    """All-reference config; without a calibrated operating point it falls back
    to an uncalibrated 0.5 threshold, flagged as such in the provenance id."""
    op = operating_point or OperatingPoint(
        threshold=0.5,
        policy="youden",
        target=None,
        achieved_sensitivity=0.0,
        achieved_specificity=0.0,
        calibration_set_id="uncalibrated-default",
    )
    return PipelineConfig(operating_point=op, **overrides)


def build_backend_set(cfg: PipelineConfig) -> dict[str, Backend]:
    """One Backend per stage task; identical descriptors share an instance."""
    instances: dict[BackendDescriptor, Backend] = {}
    out = {}
    for task in STAGE_TASKS:
        desc = cfg.backend_descriptors[task]
        if desc not in instances:
            instances[desc] = build_backend(
                desc, reference_config=cfg.reference, timeout_s=cfg.backend_timeout_s
            )
        out[task] = instances[desc]
    return out
