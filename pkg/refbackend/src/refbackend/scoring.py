"""Deterministic stub scorers, numerically identical to the pipeline's
in-process reference backends.

This package deliberately does not import the pipeline: it talks to it only
over the wire protocol. The formulas below therefore mirror the published
reference-scoring recipe operation for operation (same dtypes, same expression
order), and the shared byte-level conformance fixtures pin the two
implementations together — any drift fails the suite.

A real neural model plugs in by implementing the same two-method surface as
ReferenceStub (classify/segment over a float32 (h, w, c) array) and
registering it under its model id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

EDD_LABELS = ("AMD", "Cataract", "DR", "Glaucoma", "MMD", "Others")
QUALITY_FEATURE_ORDER = ("fov_coverage", "sharpness", "illumination_uniformity", "contrast")

_LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)


class NoFovError(ValueError):
    """No usable field of view in the frame."""


@dataclass(frozen=True)
class StubConfig:
    """Mirror of the pipeline's reference-scorer configuration defaults."""

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
    anomaly_rim_margin_px: int = 10


# -- binary morphology (outside of frame is background) ----------------------

def _disc_offsets(radius: int) -> tuple[tuple[int, int], ...]:
    return tuple(
        (dy, dx)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if dy * dy + dx * dx <= radius * radius
    )


def _shifted(bits: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = bits.shape
    out = np.zeros_like(bits)
    y0, y1 = max(dy, 0), min(h + dy, h)
    x0, x1 = max(dx, 0), min(w + dx, w)
    if y0 < y1 and x0 < x1:
        out[y0:y1, x0:x1] = bits[y0 - dy:y1 - dy, x0 - dx:x1 - dx]
    return out


def _erode(bits: np.ndarray, radius: int) -> np.ndarray:
    acc = np.ones_like(bits)
    for dy, dx in _disc_offsets(radius):
        acc &= _shifted(bits, -dy, -dx)
    return acc


def _dilate(bits: np.ndarray, radius: int) -> np.ndarray:
    acc = np.zeros_like(bits)
    for dy, dx in _disc_offsets(radius):
        acc |= _shifted(bits, dy, dx)
    return acc


_EIGHT = np.ones((3, 3), dtype=bool)


def _remove_small(bits: np.ndarray, min_area: float) -> np.ndarray:
    labels, n = ndimage.label(bits, structure=_EIGHT)
    if n == 0:
        return bits
    areas = np.bincount(labels.ravel())
    keep = areas >= min_area
    keep[0] = False
    return keep[labels]


def _refine(candidate: np.ndarray, fov: np.ndarray, cfg: StubConfig) -> np.ndarray:
    clipped = candidate & fov
    opened = _dilate(_erode(clipped, cfg.refine_open_radius), cfg.refine_open_radius)
    min_area = cfg.refine_min_area_fraction * int(fov.sum())
    return _remove_small(opened, min_area)


# -- field of view and residual analysis --------------------------------------

def luminance(values: np.ndarray) -> np.ndarray:
    v = values.astype(np.float64)
    if v.shape[2] == 1:
        return v[:, :, 0]
    return 0.299 * v[:, :, 0] + 0.587 * v[:, :, 1] + 0.114 * v[:, :, 2]


def extract_fov_bits(lum: np.ndarray, cfg: StubConfig) -> np.ndarray:
    tau = cfg.fov_threshold_fraction * float(np.percentile(lum, 99))
    cand = lum > tau
    if not cand.any():
        raise NoFovError("frame is entirely dark")

    def largest_filled(bits: np.ndarray) -> np.ndarray:
        labels, n = ndimage.label(bits)  # 4-connectivity
        if n == 0:
            return bits
        areas = np.bincount(labels.ravel())
        areas[0] = 0
        return ndimage.binary_fill_holes(labels == int(areas.argmax()))

    kept = largest_filled(cand)
    eroded = _erode(kept, cfg.fov_erosion_px)
    if eroded.any():
        eroded = largest_filled(eroded)
    coverage = float(eroded.sum()) / (lum.shape[1] * lum.shape[0])
    if coverage < cfg.fov_min_coverage:
        raise NoFovError(f"field-of-view coverage {coverage:.4f} below {cfg.fov_min_coverage}")
    return eroded


def _residual(values: np.ndarray, cfg: StubConfig):
    lum = luminance(values)
    fov = extract_fov_bits(lum, cfg)
    inside = fov.astype(np.float64)
    size = 2 * cfg.background_radius + 1
    num = ndimage.uniform_filter(lum * inside, size=size, mode="constant", cval=0.0)
    den = ndimage.uniform_filter(inside, size=size, mode="constant", cval=0.0)
    background = np.where(den > 1e-12, num / np.maximum(den, 1e-12), 0.0)
    residual = (lum - background) * inside
    anomaly_fov = _erode(fov, cfg.anomaly_rim_margin_px)
    return lum, fov, anomaly_fov, residual


def _squash(area_fraction: float, kappa: float) -> float:
    return area_fraction / (area_fraction + kappa)


def _refined_fraction(candidate: np.ndarray, fov: np.ndarray, cfg: StubConfig) -> float:
    refined = _refine(candidate, fov, cfg)
    count = int(fov.sum())
    return int(refined.sum()) / count if count else 0.0


# -- the four task scorers -----------------------------------------------------

def segment_probabilities(values: np.ndarray, cfg: StubConfig) -> np.ndarray:
    try:
        _, _, _, residual = _residual(values, cfg)
    except NoFovError:
        return np.zeros(values.shape[:2], np.float32)
    return np.clip(np.abs(residual) / cfg.residual_full_scale, 0.0, 1.0).astype(np.float32)


def pvi_score(values: np.ndarray, cfg: StubConfig) -> float:
    try:
        _, _, anomaly_fov, residual = _residual(values, cfg)
    except NoFovError:
        return 0.0
    half = cfg.residual_full_scale / 2.0
    candidate = np.abs(residual) >= half
    return _squash(_refined_fraction(candidate, anomaly_fov, cfg), cfg.pvi_area_kappa)


def quality_features(values: np.ndarray, cfg: StubConfig) -> dict[str, float]:
    lum = luminance(values)
    inside = extract_fov_bits(lum, cfg)
    coverage = float(inside.sum()) / (lum.shape[1] * lum.shape[0])

    lap = ndimage.convolve(lum, _LAPLACIAN, mode="constant", cval=0.0)
    s = float(lap[inside].var())
    sharpness = s / (s + cfg.sharpness_kappa)

    samples = lum[inside]
    p5, p95 = np.percentile(samples, [5, 95])
    contrast = float(np.clip(p95 - p5, 0.0, 1.0))

    means = []
    n = cfg.uniformity_blocks
    ih = lum.shape[0] / n
    iw = lum.shape[1] / n
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
        "fov_coverage": coverage,
        "sharpness": float(sharpness),
        "illumination_uniformity": uniformity,
        "contrast": contrast,
    }


def quality_score(values: np.ndarray, cfg: StubConfig) -> float:
    try:
        feats = quality_features(values, cfg)
    except NoFovError:
        return 0.0
    return float(
        sum(w * feats[name] for w, name in zip(cfg.quality_weights, QUALITY_FEATURE_ORDER))
    )


def edd_scores(values: np.ndarray, cfg: StubConfig) -> dict[str, float]:
    try:
        _, _, anomaly_fov, residual = _residual(values, cfg)
    except NoFovError:
        return {label: 0.0 for label in EDD_LABELS}
    half = cfg.residual_full_scale / 2.0
    bright = _refined_fraction(residual >= half, anomaly_fov, cfg)
    dark = _refined_fraction(residual <= -half, anomaly_fov, cfg)
    feats = quality_features(values, cfg)
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


class ReferenceStub:
    """The deterministic stub model. classify/segment take a float32 (h, w, c)
    array in [0, 1]; replace this class with a real model to serve weights."""

    capabilities = frozenset({"classify-quality", "classify-pvi", "classify-edd", "segment"})

    def __init__(self, config: StubConfig | None = None):
        self.config = config or StubConfig()

    def classify(self, values: np.ndarray, task: str) -> dict[str, float]:
        if task == "quality":
            return {"gradable": quality_score(values, self.config)}
        if task == "pvi":
            return {"pvi": pvi_score(values, self.config)}
        if task == "edd":
            return edd_scores(values, self.config)
        raise ValueError(f"unknown task {task!r}")

    def segment(self, values: np.ndarray) -> np.ndarray:
        return segment_probabilities(values, self.config)
