"""Deterministic in-process reference backends.

These are feature-based scorers, not neural networks, and are NOT clinical
models. They exist so the full pipeline is testable and benchmarkable at desk
scale with label-controlled synthetic corpora. Every score is a pure function
of the pixel values and the configuration; repeated calls are bit-identical,
which is what the wire-protocol bit-exactness suite leans on.

Scoring recipe, all in double precision on the Rec.601 luminance:

* field of view via `imaging.extract_fov`;
* a local background estimate from a FOV-normalized box filter;
* the residual (luminance minus background) inside the FOV drives everything:
  lesion probability is |residual| scaled by `residual_full_scale`, and the
  anomaly masks are the refined binarizations of that map;
* quality is a weighted sum of FOV coverage, Laplacian-variance sharpness,
  illumination uniformity over a block grid, and luminance percentile spread.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from ..core import BinaryMask, PixelGrid
from ..imaging import NoFovError, disc, erode, extract_fov, luminance, refine_lesion_mask
from .base import (
    ALL_CAPABILITIES,
    EDD_LABELS,
    TASK_EDD,
    TASK_PVI,
    TASK_QUALITY,
    Backend,
    BackendDescriptor,
    ProbabilityMask,
    UnsupportedError,
)

QUALITY_FEATURE_ORDER = ("fov_coverage", "sharpness", "illumination_uniformity", "contrast")

_LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)


@dataclass(frozen=True)
class ReferenceConfig:
    """Knobs for the reference scorers; defaults are tuned on the synthetic
    fixture family, not on any clinical data."""

    fov_threshold_fraction: float = 0.06
    fov_erosion_px: int = 3
    fov_min_coverage: float = 0.05
    sharpness_kappa: float = 0.005
    quality_weights: tuple[float, float, float, float] = (0.35, 0.30, 0.20, 0.15)
    uniformity_blocks: int = 8
    background_radius: int = 56
    residual_full_scale: float = 0.30
    refine_open_radius: int = 2
    refine_min_area_fraction: float = 0.0005
    pvi_area_kappa: float = 0.002
    edd_area_kappa: float = 0.001
    # anomaly measurements skip this rim band: the box background cannot track
    # the luminance ramp at a defocused FOV edge and would hallucinate a ring
    anomaly_rim_margin_px: int = 10


class ResidualAnalysis(NamedTuple):
    lum: np.ndarray  # float64 (h, w)
    fov: BinaryMask
    anomaly_fov: BinaryMask  # fov minus the rim band
    background: np.ndarray
    residual: np.ndarray  # zero outside the FOV


def _fov(grid: PixelGrid, cfg: ReferenceConfig):
    return extract_fov(
        grid,
        threshold_fraction=cfg.fov_threshold_fraction,
        erosion_margin_px=cfg.fov_erosion_px,
        min_coverage=cfg.fov_min_coverage,
    )


def residual_analysis(grid: PixelGrid, cfg: ReferenceConfig) -> ResidualAnalysis:
    """Luminance residual against a FOV-normalized local background."""
    lum = luminance(grid)
    fov = _fov(grid, cfg).mask
    inside = fov.bits.astype(np.float64)
    size = 2 * cfg.background_radius + 1
    num = ndimage.uniform_filter(lum * inside, size=size, mode="constant", cval=0.0)
    den = ndimage.uniform_filter(inside, size=size, mode="constant", cval=0.0)
    background = np.where(den > 1e-12, num / np.maximum(den, 1e-12), 0.0)
    residual = (lum - background) * inside
    anomaly_fov = erode(fov, disc(cfg.anomaly_rim_margin_px))
    return ResidualAnalysis(
        lum=lum, fov=fov, anomaly_fov=anomaly_fov, background=background, residual=residual
    )


def segment_probabilities(grid: PixelGrid, cfg: ReferenceConfig) -> ProbabilityMask:
    """Residual magnitude mapped to [0, 1]; zero when there is no usable FOV."""
    try:
        analysis = residual_analysis(grid, cfg)
    except NoFovError:
        return ProbabilityMask(grid.width, grid.height, np.zeros((grid.height, grid.width), np.float32))
    probs = np.clip(np.abs(analysis.residual) / cfg.residual_full_scale, 0.0, 1.0)
    return ProbabilityMask(grid.width, grid.height, probs.astype(np.float32))


def _refined_fraction(candidate: np.ndarray, fov: BinaryMask, cfg: ReferenceConfig) -> float:
    refined = refine_lesion_mask(
        BinaryMask.from_array(candidate),
        fov,
        open_radius=cfg.refine_open_radius,
        min_area_fraction=cfg.refine_min_area_fraction,
    )
    return refined.count / fov.count if fov.count else 0.0


def _squash(area_fraction: float, kappa: float) -> float:
    return area_fraction / (area_fraction + kappa)


def pvi_score(grid: PixelGrid, cfg: ReferenceConfig) -> float:
    """Fraction of the FOV occupied by refined residual anomalies, squashed."""
    try:
        analysis = residual_analysis(grid, cfg)
    except NoFovError:
        return 0.0
    half = cfg.residual_full_scale / 2.0
    candidate = np.abs(analysis.residual) >= half
    return _squash(_refined_fraction(candidate, analysis.anomaly_fov, cfg), cfg.pvi_area_kappa)


def edd_scores(grid: PixelGrid, cfg: ReferenceConfig) -> dict[str, float]:
    """Per-category probabilities from the direction and extent of anomalies.

    Bright deposits drive AMD, dark patches drive DR, broad dark area drives
    MMD, haze (low sharpness + contrast) drives Cataract; Glaucoma and Others
    are weak correlates. A junior-reader stand-in, nothing more.
    """
    try:
        analysis = residual_analysis(grid, cfg)
    except NoFovError:
        return {label: 0.0 for label in EDD_LABELS}
    half = cfg.residual_full_scale / 2.0
    bright = _refined_fraction(analysis.residual >= half, analysis.anomaly_fov, cfg)
    dark = _refined_fraction(analysis.residual <= -half, analysis.anomaly_fov, cfg)
    feats = quality_features(grid, cfg)
    haze = max(0.0, 1.0 - (feats["sharpness"] + feats["contrast"]))
    kappa = cfg.edd_area_kappa
    return {
        "AMD": _squash(bright, kappa),
        "Cataract": min(1.0, haze),
        "DR": _squash(dark, kappa),
        "Glaucoma": 0.5 * _squash(bright, 4 * kappa),
        "MMD": _squash(dark, 8 * kappa),
        "Others": 0.8 * _squash(bright + dark, 2 * kappa),
    }


def quality_features(grid: PixelGrid, cfg: ReferenceConfig) -> dict[str, float]:
    """The four gradability features, each in [0, 1]. Raises NoFovError when the
    frame has no usable field of view."""
    lum = luminance(grid)
    fov = _fov(grid, cfg)
    inside = fov.mask.bits

    lap = ndimage.convolve(lum, _LAPLACIAN, mode="constant", cval=0.0)
    s = float(lap[inside].var())
    sharpness = s / (s + cfg.sharpness_kappa)

    samples = lum[inside]
    p5, p95 = np.percentile(samples, [5, 95])
    contrast = float(np.clip(p95 - p5, 0.0, 1.0))

    means = []
    n = cfg.uniformity_blocks
    ih = grid.height / n
    iw = grid.width / n
    for by in range(n):
        for bx in range(n):
            y0, y1 = int(by * ih), int((by + 1) * ih)
            x0, x1 = int(bx * iw), int((bx + 1) * iw)
            block = inside[y0:y1, x0:x1]
            if block.sum() >= 0.25 * block.size and block.size > 0:
                means.append(float(lum[y0:y1, x0:x1][block].mean()))
    if len(means) >= 2 and np.mean(means) > 1e-9:
        dispersion = float(np.std(means) / np.mean(means))
    else:
        dispersion = 0.0
    uniformity = float(1.0 - np.clip(dispersion, 0.0, 1.0))

    return {
        "fov_coverage": float(fov.coverage),
        "sharpness": float(sharpness),
        "illumination_uniformity": uniformity,
        "contrast": contrast,
    }


def quality_score(grid: PixelGrid, cfg: ReferenceConfig) -> float:
    """Weighted feature sum; 0.0 when there is no field of view."""
    try:
        feats = quality_features(grid, cfg)
    except NoFovError:
        return 0.0
    return float(
        sum(w * feats[name] for w, name in zip(cfg.quality_weights, QUALITY_FEATURE_ORDER))
    )


class ReferenceBackend(Backend):
    """In-process deterministic backend covering all four tasks."""

    def __init__(self, config: ReferenceConfig | None = None, model_id: str = "ref-features-v1"):
        self.config = config or ReferenceConfig()
        self.descriptor = BackendDescriptor(
            kind="reference", model_id=model_id, capabilities=ALL_CAPABILITIES
        )

    def classify(self, image: PixelGrid, task: str) -> dict[str, float]:
        if task == TASK_QUALITY:
            return {"gradable": quality_score(image, self.config)}
        if task == TASK_PVI:
            return {"pvi": pvi_score(image, self.config)}
        if task == TASK_EDD:
            return edd_scores(image, self.config)
        raise UnsupportedError(f"unknown task {task!r}")

    def segment(self, image: PixelGrid) -> ProbabilityMask:
        return segment_probabilities(image, self.config)
