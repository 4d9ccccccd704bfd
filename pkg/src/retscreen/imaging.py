"""Raster operations: codecs, resampling, photometric transforms, field-of-view
extraction, binary morphology, connected components, and mask overlay rendering.

Conventions: pixel (x, y) has its center at integer coordinates; resampling uses
bilinear weights with edge clamp for resize and zero fill for rotate/scale.
Morphology treats everything outside the frame as background (False).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .core import BinaryMask, GeometryMismatchError, PixelGrid


class DecodeError(ValueError):
    """Image bytes could not be decoded (or did not match the declared format)."""


class BadGammaError(ValueError):
    """Gamma must be finite and > 0."""


class NoFovError(ValueError):
    """No usable field of view: frame is dark or coverage below the minimum."""


# ---------------------------------------------------------------------------
# codecs

def decode(data: bytes, expected_format: str | None = None) -> PixelGrid:
    """Decode PNG or JPEG bytes; 8-bit value v maps to v/255."""
    try:
        im = Image.open(io.BytesIO(data))
        fmt = (im.format or "").lower()
        if im.mode != "L":
            im = im.convert("RGB")
        im.load()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode image: {exc}") from exc
    if expected_format is not None and fmt != expected_format.lower():
        raise DecodeError(f"expected {expected_format} data, got {fmt or 'unknown'}")
    arr = np.asarray(im, dtype=np.uint8).astype(np.float32) / 255.0
    return PixelGrid.from_array(arr)


def encode_png(grid: PixelGrid) -> bytes:
    """8-bit PNG encode; decode(encode_png(g)) is lossless at 8-bit quantization."""
    arr = np.round(grid.values.astype(np.float64) * 255.0).astype(np.uint8)
    if grid.channels == 1:
        im = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        im = Image.fromarray(arr, mode="RGB")
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue()


def luminance(grid: PixelGrid) -> np.ndarray:
    """Rec.601 luminance as a float64 (h, w) array; identity for gray images."""
    v = grid.values.astype(np.float64)
    if grid.channels == 1:
        return v[:, :, 0]
    return 0.299 * v[:, :, 0] + 0.587 * v[:, :, 1] + 0.114 * v[:, :, 2]


# ---------------------------------------------------------------------------
# resampling and photometric transforms

def resize(grid: PixelGrid, width: int, height: int) -> PixelGrid:
    """Bilinear resize with edge clamp. Same-size resize is the identity."""
    if width < 1 or height < 1:
        raise ValueError("target geometry must be positive")
    sx = np.clip((np.arange(width) + 0.5) * grid.width / width - 0.5, 0, grid.width - 1)
    sy = np.clip((np.arange(height) + 0.5) * grid.height / height - 0.5, 0, grid.height - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, grid.width - 1)
    y1 = np.minimum(y0 + 1, grid.height - 1)
    fx = (sx - x0)[np.newaxis, :, np.newaxis]
    fy = (sy - y0)[:, np.newaxis, np.newaxis]
    v = grid.values.astype(np.float64)
    top = v[y0[:, None], x0[None, :]] * (1 - fx) + v[y0[:, None], x1[None, :]] * fx
    bot = v[y1[:, None], x0[None, :]] * (1 - fx) + v[y1[:, None], x1[None, :]] * fx
    out = top * (1 - fy) + bot * fy
    return PixelGrid.from_array(out.astype(np.float32))


def resize_mask_nearest(mask: BinaryMask, width: int, height: int) -> BinaryMask:
    """Nearest-neighbor mask resize (used to lift working-resolution masks back
    to the original frame for rendering)."""
    if width < 1 or height < 1:
        raise ValueError("target geometry must be positive")
    sx = np.clip(((np.arange(width) + 0.5) * mask.width / width - 0.5).round().astype(int), 0, mask.width - 1)
    sy = np.clip(((np.arange(height) + 0.5) * mask.height / height - 0.5).round().astype(int), 0, mask.height - 1)
    return BinaryMask.from_array(mask.bits[sy[:, None], sx[None, :]])


def gamma_correct(grid: PixelGrid, gamma: float) -> PixelGrid:
    """Pointwise v -> v**gamma; preserves [0, 1] and pixel ordering."""
    if not (isinstance(gamma, (int, float)) and math.isfinite(gamma) and gamma > 0):
        raise BadGammaError(f"gamma must be finite and > 0, got {gamma!r}")
    out = grid.values.astype(np.float64) ** float(gamma)
    return PixelGrid.from_array(out.astype(np.float32))


def flip_h(grid: PixelGrid) -> PixelGrid:
    """Horizontal mirror; applying it twice is a bit-exact identity."""
    return PixelGrid(grid.width, grid.height, grid.channels, grid.values[:, ::-1, :].copy())


def _right_angle_trig(degrees: float) -> tuple[float, float] | None:
    if degrees % 90.0 == 0.0:
        quarter = int(degrees / 90.0) % 4
        return ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[quarter]
    return None


def _sample_bilinear_zero(values: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Bilinear sample at float coords; contributions outside the frame are 0."""
    h, w = values.shape[:2]
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    out = np.zeros(sx.shape + (values.shape[2],), dtype=np.float64)
    for dx, dy, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        pix = values[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)].astype(np.float64)
        out += pix * (wgt * valid)[..., np.newaxis]
    return out


def rotate(grid: PixelGrid, degrees: float) -> PixelGrid:
    """Rotate content counterclockwise about the image center, resampling into the
    same frame; uncovered pixels are filled with 0."""
    trig = _right_angle_trig(float(degrees))
    if trig is not None:
        cos_t, sin_t = trig
    else:
        theta = math.radians(float(degrees))
        cos_t, sin_t = math.cos(theta), math.sin(theta)
    cx, cy = (grid.width - 1) / 2.0, (grid.height - 1) / 2.0
    ys, xs = np.mgrid[0:grid.height, 0:grid.width]
    dx, dy = xs - cx, ys - cy
    # inverse map; y axis points down, so this makes positive angles look CCW
    sx = cx + cos_t * dx - sin_t * dy
    sy = cy + sin_t * dx + cos_t * dy
    out = _sample_bilinear_zero(grid.values, sx, sy)
    return PixelGrid.from_array(np.clip(out, 0.0, 1.0).astype(np.float32))


def scale_about_center(grid: PixelGrid, factor: float) -> PixelGrid:
    """Zoom by `factor` about the center into the same frame, zero-filled."""
    if not (math.isfinite(factor) and factor > 0):
        raise ValueError(f"scale factor must be finite and > 0, got {factor!r}")
    cx, cy = (grid.width - 1) / 2.0, (grid.height - 1) / 2.0
    ys, xs = np.mgrid[0:grid.height, 0:grid.width]
    sx = cx + (xs - cx) / factor
    sy = cy + (ys - cy) / factor
    out = _sample_bilinear_zero(grid.values, sx, sy)
    return PixelGrid.from_array(np.clip(out, 0.0, 1.0).astype(np.float32))


# ---------------------------------------------------------------------------
# binary morphology

@dataclass(frozen=True)
class StructuringElement:
    """Centered disc: offsets (dy, dx) with dy^2 + dx^2 <= radius^2.

    radius 1 is the 4-neighborhood plus center.
    """

    radius: int
    shape: str = "disc"
    offsets: tuple[tuple[int, int], ...] = field(init=False, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.shape != "disc":
            raise ValueError(f"unsupported element shape {self.shape!r}")
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        r = self.radius
        offs = tuple(
            (dy, dx)
            for dy in range(-r, r + 1)
            for dx in range(-r, r + 1)
            if dy * dy + dx * dx <= r * r
        )
        object.__setattr__(self, "offsets", offs)


def disc(radius: int) -> StructuringElement:
    return StructuringElement(radius=radius)


def _shifted(bits: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """bits translated by (dy, dx); vacated cells are False."""
    h, w = bits.shape
    out = np.zeros_like(bits)
    y0, y1 = max(dy, 0), min(h + dy, h)
    x0, x1 = max(dx, 0), min(w + dx, w)
    if y0 < y1 and x0 < x1:
        out[y0:y1, x0:x1] = bits[y0 - dy:y1 - dy, x0 - dx:x1 - dx]
    return out


def dilate(mask: BinaryMask, se: StructuringElement) -> BinaryMask:
    acc = np.zeros_like(mask.bits)
    for dy, dx in se.offsets:
        acc |= _shifted(mask.bits, dy, dx)
    return BinaryMask(mask.width, mask.height, acc)


def erode(mask: BinaryMask, se: StructuringElement) -> BinaryMask:
    acc = np.ones_like(mask.bits)
    for dy, dx in se.offsets:
        acc &= _shifted(mask.bits, -dy, -dx)
    return BinaryMask(mask.width, mask.height, acc)


def opening(mask: BinaryMask, se: StructuringElement) -> BinaryMask:
    return dilate(erode(mask, se), se)


def closing(mask: BinaryMask, se: StructuringElement) -> BinaryMask:
    # pad so the erosion can see dilated mass beyond the frame; otherwise
    # closing would not be extensive near the border
    r = se.radius
    padded = BinaryMask.from_array(np.pad(mask.bits, r, constant_values=False))
    out = erode(dilate(padded, se), se).bits[r:-r, r:-r]
    return BinaryMask(mask.width, mask.height, out)


EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class Component:
    """One 8-connected foreground component; bbox is (x0, y0, x1, y1), half-open."""

    id: int
    area: int
    bbox: tuple[int, int, int, int]


def connected_components(mask: BinaryMask) -> list[Component]:
    """8-connected components; component areas sum to the mask population."""
    labels, n = ndimage.label(mask.bits, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    areas = np.bincount(labels.ravel())
    slices = ndimage.find_objects(labels)
    out = []
    for i, sl in enumerate(slices, start=1):
        ys, xs = sl
        out.append(Component(id=i, area=int(areas[i]), bbox=(xs.start, ys.start, xs.stop, ys.stop)))
    return out


def remove_small_components(mask: BinaryMask, min_area: float) -> BinaryMask:
    """Drop 8-connected components with area < min_area."""
    labels, n = ndimage.label(mask.bits, structure=EIGHT_CONNECTED)
    if n == 0:
        return mask
    areas = np.bincount(labels.ravel())
    keep = areas >= min_area
    keep[0] = False
    return BinaryMask(mask.width, mask.height, keep[labels])


# ---------------------------------------------------------------------------
# field of view

@dataclass(frozen=True, eq=False)
class FovInfo:
    """Illuminated field of view: a single filled 4-connected mask plus its
    centroid-anchored bounding circle and frame coverage."""

    mask: BinaryMask
    center: tuple[float, float]
    radius: float
    coverage: float


def extract_fov(
    grid: PixelGrid,
    threshold_fraction: float = 0.06,
    erosion_margin_px: int = 3,
    min_coverage: float = 0.05,
) -> FovInfo:
    """Locate the illuminated disc of a retinal photo inside its dark frame.

    Luminance is thresholded at `threshold_fraction` of its 99th percentile, the
    largest 4-connected component is kept, holes are filled, and the rim is
    eroded by `erosion_margin_px`. This recipe is a deterministic stand-in for
    whatever camera-specific photo processing produced the frame; the thresholds
    are deliberately config-exposed.
    """
    lum = luminance(grid)
    tau = threshold_fraction * float(np.percentile(lum, 99))
    cand = lum > tau
    if not cand.any():
        raise NoFovError("frame is entirely dark")

    def largest_filled(bits: np.ndarray) -> np.ndarray:
        labels, n = ndimage.label(bits)  # default structure = 4-connectivity
        if n == 0:
            return bits
        areas = np.bincount(labels.ravel())
        areas[0] = 0
        return ndimage.binary_fill_holes(labels == int(areas.argmax()))

    kept = largest_filled(cand)
    eroded = erode(BinaryMask.from_array(kept), disc(erosion_margin_px)).bits
    if eroded.any():
        eroded = largest_filled(eroded)  # erosion may split thin waists
    coverage = float(eroded.sum()) / (grid.width * grid.height)
    if coverage < min_coverage:
        raise NoFovError(f"field-of-view coverage {coverage:.4f} below {min_coverage}")

    ys, xs = np.nonzero(eroded)
    cx, cy = float(xs.mean()), float(ys.mean())
    radius = float(np.sqrt(((xs - cx) ** 2 + (ys - cy) ** 2).max()))
    return FovInfo(
        mask=BinaryMask.from_array(eroded),
        center=(cx, cy),
        radius=radius,
        coverage=coverage,
    )


def refine_lesion_mask(
    candidate: BinaryMask,
    fov_mask: BinaryMask,
    open_radius: int = 2,
    min_area_fraction: float = 0.0005,
) -> BinaryMask:
    """Clean a binarized lesion mask: clip to the field of view, open to kill
    speckle and thin strokes, then drop components smaller than
    `min_area_fraction` of the FOV area. Contractive and idempotent."""
    if not candidate.same_geometry(fov_mask):
        raise GeometryMismatchError(
            f"candidate {candidate.width}x{candidate.height} vs fov {fov_mask.width}x{fov_mask.height}"
        )
    clipped = BinaryMask(candidate.width, candidate.height, candidate.bits & fov_mask.bits)
    opened = opening(clipped, disc(open_radius))
    min_area = min_area_fraction * fov_mask.count
    return remove_small_components(opened, min_area)


# ---------------------------------------------------------------------------
# rendering

def overlay(grid: PixelGrid, mask: BinaryMask, color: tuple[float, float, float], alpha: float) -> PixelGrid:
    """Blend `color` over masked pixels: v' = (1-alpha)*v + alpha*color.

    Output is always 3-channel; unmasked pixels are untouched.
    """
    if (grid.width, grid.height) != (mask.width, mask.height):
        raise GeometryMismatchError(
            f"image {grid.width}x{grid.height} vs mask {mask.width}x{mask.height}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    v = grid.values.astype(np.float64)
    if grid.channels == 1:
        v = np.repeat(v, 3, axis=2)
    else:
        v = v.copy()
    c = np.clip(np.asarray(color, dtype=np.float64), 0.0, 1.0)
    v[mask.bits] = (1.0 - alpha) * v[mask.bits] + alpha * c
    return PixelGrid.from_array(v.astype(np.float32))
