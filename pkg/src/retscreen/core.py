"""Shared domain types and the evaluation metrics used for calibration and testing.

Decision rule everywhere: ``score >= threshold`` means positive. Tied scores get
half credit in concordance counting, and the ROC places one point per distinct
score value; both conventions are required for the two AUC paths to agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple, Sequence

import numpy as np


class AllOneClassError(ValueError):
    """A metric needed both positive and negative samples but got only one class."""


class GeometryMismatchError(ValueError):
    """Two rasters that must share width/height do not."""


@dataclass(frozen=True, eq=False)
class PixelGrid:
    """Raster image: row-major float32 intensities in [0, 1].

    ``values`` has shape (height, width, channels) with channels 1 (gray)
    or 3 (RGB). float32 storage is deliberate: it makes the raw-f32 wire
    encoding lossless, which is what the backend bit-exactness tests rely on.
    """

    width: int
    height: int
    channels: int
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"geometry must be positive, got {self.width}x{self.height}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        v = np.asarray(self.values, dtype=np.float32)
        expected = (self.height, self.width, self.channels)
        if v.shape != expected:
            raise ValueError(f"values shape {v.shape} != {expected}")
        if not np.all(np.isfinite(v)):
            raise ValueError("pixel values must be finite")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "PixelGrid":
        """Build a grid from a (h, w) or (h, w, c) array, clipping to [0, 1]."""
        a = np.asarray(arr, dtype=np.float32)
        if a.ndim == 2:
            a = a[:, :, np.newaxis]
        a = np.clip(a, 0.0, 1.0)
        h, w, c = a.shape
        return cls(width=w, height=h, channels=c, values=a)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Boolean raster, row-major, same geometry conventions as PixelGrid."""

    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"geometry must be positive, got {self.width}x{self.height}")
        b = np.asarray(self.bits, dtype=bool)
        if b.shape != (self.height, self.width):
            raise ValueError(f"bits shape {b.shape} != {(self.height, self.width)}")
        object.__setattr__(self, "bits", b)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "BinaryMask":
        a = np.asarray(arr, dtype=bool)
        if a.ndim != 2:
            raise ValueError("mask array must be 2-D")
        return cls(width=a.shape[1], height=a.shape[0], bits=a)

    @property
    def count(self) -> int:
        """Number of set pixels."""
        return int(self.bits.sum())

    def same_geometry(self, other: "BinaryMask") -> bool:
        return self.width == other.width and self.height == other.height


@dataclass(frozen=True)
class LabeledScore:
    """A score in [0, 1] paired with its ground-truth label (True = positive)."""

    score: float
    label: bool

    def __post_init__(self) -> None:
        if not math.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be finite in [0, 1], got {self.score}")


class ROCPoint(NamedTuple):
    threshold: float
    tpr: float
    fpr: float


@dataclass(frozen=True)
class ROCCurve:
    """ROC curve ordered by decreasing threshold, plus its trapezoidal AUC.

    The first point is the all-negative operating point (fpr=0, tpr=0, threshold
    just above the maximum score); the last classifies everything positive
    (fpr=1, tpr=1). tpr/fpr are non-increasing in the threshold.
    """

    points: tuple[ROCPoint, ...]
    auc: float


def _split_classes(samples: Sequence[LabeledScore]) -> tuple[list[float], list[float]]:
    pos = [s.score for s in samples if s.label]
    neg = [s.score for s in samples if not s.label]
    if not pos or not neg:
        raise AllOneClassError(
            f"need both classes: {len(pos)} positive, {len(neg)} negative"
        )
    return pos, neg


def compute_roc(samples: Sequence[LabeledScore]) -> ROCCurve:
    """ROC curve for the rule score >= threshold -> positive.

    One point per distinct score value, bracketed by the (0,0) and (1,1)
    extremes. AUC is the trapezoidal integral of tpr over fpr, computed in
    double precision.
    """
    pos, neg = _split_classes(samples)
    n_pos, n_neg = len(pos), len(neg)

    scores = np.array([s.score for s in samples], dtype=np.float64)
    labels = np.array([s.label for s in samples], dtype=bool)
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]

    points = [ROCPoint(math.nextafter(float(scores[0]), math.inf), 0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = len(scores)
    while i < n:
        t = scores[i]
        # consume the whole tie group: threshold t classifies all of it positive
        while i < n and scores[i] == t:
            if labels[i]:
                tp += 1
            else:
                fp += 1
            i += 1
        points.append(ROCPoint(float(t), tp / n_pos, fp / n_neg))

    auc = 0.0
    for a, b in zip(points, points[1:]):
        auc += (b.fpr - a.fpr) * (b.tpr + a.tpr) / 2.0
    return ROCCurve(points=tuple(points), auc=auc)


def auc_concordance_oracle(samples: Sequence[LabeledScore]) -> Fraction:
    """Exact pairwise concordance: P(score+ > score-) + half the tie mass.

    Counts every positive/negative pair with integer arithmetic and returns the
    exact rational. This is the independent test oracle for compute_roc().auc;
    it shares no code with the curve construction.
    """
    pos, neg = _split_classes(samples)
    p = np.array(pos, dtype=np.float64)[:, np.newaxis]
    n = np.array(neg, dtype=np.float64)[np.newaxis, :]
    greater = int(np.count_nonzero(p > n))
    ties = int(np.count_nonzero(p == n))
    return Fraction(2 * greater + ties, 2 * len(pos) * len(neg))


def dice(a: BinaryMask, b: BinaryMask) -> float:
    """Overlap coefficient 2|A∩B| / (|A|+|B|); 1.0 when both masks are empty.

    The empty/empty convention makes an all-negative prediction that matches an
    all-negative truth a perfect score instead of a 0/0.
    """
    if not a.same_geometry(b):
        raise GeometryMismatchError(
            f"mask geometry {a.width}x{a.height} != {b.width}x{b.height}"
        )
    ca, cb = a.count, b.count
    if ca == 0 and cb == 0:
        return 1.0
    inter = int(np.count_nonzero(a.bits & b.bits))
    return 2.0 * inter / (ca + cb)


@dataclass(frozen=True)
class ConfusionCounts:
    """Raw confusion counts; sensitivity/specificity are None when undefined."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def sensitivity(self) -> float | None:
        d = self.tp + self.fn
        return self.tp / d if d else None

    @property
    def specificity(self) -> float | None:
        d = self.tn + self.fp
        return self.tn / d if d else None


def confusion_at(samples: Sequence[LabeledScore], threshold: float) -> ConfusionCounts:
    """Counts under the rule score >= threshold -> positive."""
    tp = fp = tn = fn = 0
    for s in samples:
        predicted = s.score >= threshold
        if predicted and s.label:
            tp += 1
        elif predicted:
            fp += 1
        elif s.label:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)
