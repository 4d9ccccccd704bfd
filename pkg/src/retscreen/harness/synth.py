"""Synthetic fundus corpus generator with exact ground truth.

Stands in for private clinical datasets: every image is rendered from a seeded
recipe (dark frame, vignetted bright disc, curved vessel strokes, optional
planted lesion blobs), so gradability, impairment labels, and lesion masks are
known by construction rather than by annotation. Output is a pure function of
the SynthSpec: the same recipe and seed produce byte-identical files.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..core import BinaryMask, PixelGrid
from ..imaging import encode_png

# channel mix applied to the luminance plan; keeps a fundus-like orange cast
# while staying clear of the 1.0 ceiling
_MIX = (1.12, 0.93, 0.50)
_LUM_CAP = 0.88

ROLE_NEGATIVE = "negative"
ROLE_POSITIVE = "positive"
ROLE_BLURRED = "ungradable-blur"
ROLE_DIM = "ungradable-dim"

_KIND_LABELS = {"bright-blob": "AMD", "dark-blob": "DR"}


@dataclass(frozen=True)
class SynthSpec:
    """Corpus recipe. Fractions are exact counts by construction, not sampling."""

    count: int
    seed: int = 42
    prevalence: float = 0.4
    lesion_kinds: tuple[str, ...] = ("bright-blob", "dark-blob")
    salt_fraction: float = 0.002
    blur_radius: int = 5
    fraction_ungradable: float = 0.1
    size: int = 512

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError("count must be >= 1")
        for name in ("prevalence", "salt_fraction", "fraction_ungradable"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        unknown = set(self.lesion_kinds) - set(_KIND_LABELS)
        if unknown:
            raise ValueError(f"unknown lesion kinds {sorted(unknown)}")
        if not self.lesion_kinds:
            raise ValueError("need at least one lesion kind")
        if round(self.prevalence * self.count) + round(self.fraction_ungradable * self.count) > self.count:
            raise ValueError("prevalence and fraction_ungradable together exceed the corpus")


@dataclass(frozen=True)
class TruthRow:
    file: str
    gradable: bool
    pvi: bool
    labels: tuple[str, ...]
    mask_file: str


@dataclass
class RenderedSample:
    image: PixelGrid
    lesion_mask: BinaryMask | None
    labels: tuple[str, ...]
    role: str


def _colorize(lum_plan: np.ndarray) -> PixelGrid:
    lum = np.clip(lum_plan, 0.0, _LUM_CAP)
    rgb = np.stack([np.clip(lum * m, 0.0, 1.0) for m in _MIX], axis=-1)
    return PixelGrid.from_array(rgb.astype(np.float32))


def _stamp_vessels(lum: np.ndarray, rng: np.random.Generator, center, fov_radius: float) -> None:
    size = lum.shape[0]
    cx, cy = center
    # accumulate with max so crossings do not stack into lesion-deep darkness
    strength_map = np.zeros_like(lum)
    n_vessels = int(rng.integers(7, 11))
    for _ in range(n_vessels):
        angle = rng.uniform(0, 2 * np.pi)
        x, y = cx + rng.uniform(-10, 10), cy + rng.uniform(-10, 10)
        heading = angle
        width = rng.uniform(1.2, 2.6)
        strength = rng.uniform(0.10, 0.16)
        steps = int(fov_radius * rng.uniform(0.75, 0.95))
        for _step in range(steps):
            heading += rng.normal(0.0, 0.08)
            x += np.cos(heading)
            y += np.sin(heading)
            if (x - cx) ** 2 + (y - cy) ** 2 > (0.96 * fov_radius) ** 2:
                break
            xi, yi = int(round(x)), int(round(y))
            r = int(np.ceil(width))
            x0, x1 = max(xi - r, 0), min(xi + r + 1, size)
            y0, y1 = max(yi - r, 0), min(yi + r + 1, size)
            if x0 >= x1 or y0 >= y1:
                continue
            yy, xx = np.mgrid[y0:y1, x0:x1]
            d2 = (xx - x) ** 2 + (yy - y) ** 2
            profile = strength * np.exp(-d2 / (2 * (width / 1.6) ** 2))
            np.maximum(strength_map[y0:y1, x0:x1], profile, out=strength_map[y0:y1, x0:x1])
    lum *= 1.0 - np.minimum(strength_map, 0.18)


def _plant_lesions(
    lum: np.ndarray,
    rng: np.random.Generator,
    center,
    fov_radius: float,
    kinds: tuple[str, ...],
    avoid: tuple[float, float, float],
) -> tuple[np.ndarray, tuple[str, ...]]:
    size = lum.shape[0]
    ys, xs = np.mgrid[0:size, 0:size]
    truth = np.zeros((size, size), dtype=bool)
    labels: set[str] = set()
    ax, ay, avoid_r = avoid
    n_lesions = int(rng.integers(1, 4))
    for _ in range(n_lesions):
        kind = kinds[int(rng.integers(0, len(kinds)))]
        labels.add(_KIND_LABELS[kind])
        radius = rng.uniform(9.0, 18.0)
        lx = ly = 0.0
        for _try in range(20):
            theta = rng.uniform(0, 2 * np.pi)
            rho = rng.uniform(0.15, 0.62) * fov_radius
            lx, ly = center[0] + rho * np.cos(theta), center[1] + rho * np.sin(theta)
            # keep bright deposits off the optic-disc patch, or their planned
            # contrast gets flattened by the highlight cap
            if (lx - ax) ** 2 + (ly - ay) ** 2 > (avoid_r + radius) ** 2:
                break
        amplitude = rng.uniform(0.25, 0.38)
        sigma = radius / np.sqrt(2.0 * np.log(2.0))  # half amplitude at the truth rim
        d2 = (xs - lx) ** 2 + (ys - ly) ** 2
        bump = amplitude * np.exp(-d2 / (2 * sigma**2))
        if kind == "bright-blob":
            lum += bump
        else:
            lum -= bump
        truth |= d2 <= radius**2
    return truth, tuple(sorted(labels))


def render_sample(spec: SynthSpec, rng: np.random.Generator, role: str) -> RenderedSample:
    """Render one frame. The rng is consumed in a fixed order, so a corpus walk
    is reproducible end to end."""
    size = spec.size
    ys, xs = np.mgrid[0:size, 0:size]
    cx = size / 2 + rng.uniform(-5, 5)
    cy = size / 2 + rng.uniform(-5, 5)
    fov_radius = rng.uniform(0.42, 0.47) * size
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    inside = d2 <= fov_radius**2

    base = rng.uniform(0.52, 0.62)
    lum = np.where(inside, base * (1.0 - 0.25 * d2 / fov_radius**2), 0.01)

    # optic-disc-like mild bright patch for texture; kept below the anomaly band
    od_theta = rng.uniform(0, 2 * np.pi)
    od_rho = rng.uniform(0.35, 0.5) * fov_radius
    od_x, od_y = cx + od_rho * np.cos(od_theta), cy + od_rho * np.sin(od_theta)
    od_sigma = 0.09 * fov_radius
    lum += 0.07 * np.exp(-((xs - od_x) ** 2 + (ys - od_y) ** 2) / (2 * od_sigma**2))

    _stamp_vessels(lum, rng, (cx, cy), fov_radius)

    lesion_mask = None
    labels: tuple[str, ...] = ()
    if role == ROLE_POSITIVE:
        avoid = (od_x, od_y, 2.2 * od_sigma)
        truth, labels = _plant_lesions(lum, rng, (cx, cy), fov_radius, spec.lesion_kinds, avoid)
        lesion_mask = BinaryMask.from_array(truth)

    lum += rng.normal(0.0, 0.015, lum.shape) * inside

    if role in (ROLE_NEGATIVE, ROLE_POSITIVE) and spec.salt_fraction > 0:
        iy, ix = np.nonzero(inside)
        k = int(round(spec.salt_fraction * len(iy)))
        if k > 0:
            pick = rng.choice(len(iy), size=k, replace=False)
            lum[iy[pick], ix[pick]] = 0.92

    if role == ROLE_BLURRED:
        lum = ndimage.uniform_filter(lum, size=2 * spec.blur_radius + 1, mode="nearest")
    elif role == ROLE_DIM:
        lum = lum * rng.uniform(0.10, 0.16)

    return RenderedSample(image=_colorize(lum), lesion_mask=lesion_mask, labels=labels, role=role)


def _roles(spec: SynthSpec, rng: np.random.Generator) -> list[str]:
    n_ungradable = round(spec.fraction_ungradable * spec.count)
    n_positive = round(spec.prevalence * spec.count)
    roles = []
    for i in range(n_ungradable):
        roles.append(ROLE_BLURRED if i % 2 == 0 else ROLE_DIM)
    roles += [ROLE_POSITIVE] * n_positive
    roles += [ROLE_NEGATIVE] * (spec.count - len(roles))
    rng.shuffle(roles)
    return roles


def synth_generate(spec: SynthSpec, out_dir: str | Path) -> Path:
    """Write images/, masks/ and truth.csv under out_dir; returns out_dir."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    roles = _roles(spec, rng)

    rows: list[TruthRow] = []
    for i, role in enumerate(roles):
        sample = render_sample(spec, rng, role)
        name = f"img_{i:04d}.png"
        (out / "images" / name).write_bytes(encode_png(sample.image))
        mask_file = ""
        if sample.lesion_mask is not None:
            mask_file = f"msk_{i:04d}.png"
            mask_grid = PixelGrid.from_array(sample.lesion_mask.bits.astype(np.float32))
            (out / "masks" / mask_file).write_bytes(encode_png(mask_grid))
        rows.append(
            TruthRow(
                file=name,
                gradable=role in (ROLE_NEGATIVE, ROLE_POSITIVE),
                pvi=role == ROLE_POSITIVE,
                labels=sample.labels,
                mask_file=mask_file,
            )
        )

    with (out / "truth.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "gradable", "pvi", "labels", "mask_file"])
        for row in rows:
            writer.writerow(
                [row.file, int(row.gradable), int(row.pvi), "|".join(row.labels), row.mask_file]
            )
    return out


def load_truth(corpus_dir: str | Path) -> list[TruthRow]:
    rows = []
    with (Path(corpus_dir) / "truth.csv").open(newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                TruthRow(
                    file=rec["file"],
                    gradable=rec["gradable"] == "1",
                    pvi=rec["pvi"] == "1",
                    labels=tuple(rec["labels"].split("|")) if rec["labels"] else (),
                    mask_file=rec["mask_file"],
                )
            )
    return rows
