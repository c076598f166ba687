"""Shared domain types and closed-form metrics.

Nothing in here depends on torch; every function is a pure function of its
arguments.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

CLASS_LABELS: tuple[str, ...] = ("MEL", "NV", "BCC", "AKIEC", "BKL", "DF", "VASC")
SIMPLEX_TOL = 1e-6


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


@dataclass(frozen=True)
class Image:
    """H×W×C float raster with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValidationError(f"image must be H×W×C with C in (1, 3), got shape {px.shape}")
        if not np.issubdtype(px.dtype, np.floating):
            raise ValidationError("image pixels must be floating point; run preprocess() first")
        if px.size and (px.min() < 0.0 or px.max() > 1.0 or not np.isfinite(px).all()):
            raise ValidationError("image values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


@dataclass(frozen=True)
class BinaryMask:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ValidationError(f"mask must be 2-D, got shape {px.shape}")
        if px.dtype != bool:
            if not np.isin(px, (0, 1)).all():
                raise ValidationError("mask values must be strictly binary")
            px = px.astype(bool)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def positive_count(self) -> int:
        return int(self.pixels.sum())

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    __hash__ = None


@dataclass(frozen=True)
class ProbabilityVector:
    probs: np.ndarray
    class_labels: tuple[str, ...] = CLASS_LABELS

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        validate_simplex(p)
        if len(self.class_labels) != p.shape[0]:
            raise ValidationError(
                f"{p.shape[0]} probabilities but {len(self.class_labels)} class labels"
            )
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "class_labels", tuple(self.class_labels))

    @property
    def argmax(self) -> int:
        # np.argmax already returns the first (smallest) index on ties
        return int(np.argmax(self.probs))

    @property
    def label(self) -> str:
        return self.class_labels[self.argmax]

    def __eq__(self, other):
        if not isinstance(other, ProbabilityVector):
            return NotImplemented
        return self.class_labels == other.class_labels and np.array_equal(self.probs, other.probs)

    __hash__ = None


@dataclass(frozen=True)
class UncertaintyRecord:
    phi: float
    phi_norm: float
    phi_min: float
    phi_max: float
    threshold: float
    is_certain: bool

    @classmethod
    def from_phi(cls, phi: float, phi_min: float, phi_max: float, threshold: float):
        phi_norm = normalize_uncertainty(phi, phi_min, phi_max)
        return cls(
            phi=float(phi),
            phi_norm=phi_norm,
            phi_min=float(phi_min),
            phi_max=float(phi_max),
            threshold=float(threshold),
            is_certain=phi_norm < threshold,
        )

    def to_dict(self) -> dict:
        return {
            "phi": self.phi,
            "phi_norm": self.phi_norm,
            "phi_min": self.phi_min,
            "phi_max": self.phi_max,
            "threshold": self.threshold,
            "is_certain": self.is_certain,
        }


@dataclass
class TriageCounts:
    cc: int = 0
    cu: int = 0
    ic: int = 0
    iu: int = 0

    def __post_init__(self):
        for name in ("cc", "cu", "ic", "iu"):
            if getattr(self, name) < 0:
                raise ValidationError(f"triage count {name} must be non-negative")

    @property
    def total(self) -> int:
        return self.cc + self.cu + self.ic + self.iu

    def add(self, category: str) -> None:
        if category not in ("cc", "cu", "ic", "iu"):
            raise ValidationError(f"unknown triage category {category!r}")
        setattr(self, category, getattr(self, category) + 1)

    def to_dict(self) -> dict:
        return {"cc": self.cc, "cu": self.cu, "ic": self.ic, "iu": self.iu}


def validate_simplex(p: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    if p.ndim != 1 or p.shape[0] < 1:
        raise ValidationError(f"probability vector must be 1-D and non-empty, got shape {p.shape}")
    if not np.isfinite(p).all() or (p < 0).any():
        raise ValidationError("probability vector has negative or non-finite entries")
    if abs(p.sum() - 1.0) > tol:
        raise ValidationError(f"probability vector sums to {p.sum():.9f}, not 1")


def entropy(p) -> float:
    """Shannon entropy in nats, with 0·ln 0 taken as 0."""
    probs = p.probs if isinstance(p, ProbabilityVector) else np.asarray(p, dtype=np.float64)
    validate_simplex(probs)
    nz = probs[probs > 0]
    h = float(-(nz * np.log(nz)).sum())
    # rounding can push a one-hot slightly negative or a uniform slightly over ln N
    return min(max(h, 0.0), math.log(probs.shape[0]))


def binary_entropy(q: np.ndarray) -> np.ndarray:
    """Elementwise entropy (nats) of Bernoulli(q)."""
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(q > 0, q * np.log(q), 0.0) + np.where(q < 1, (1 - q) * np.log1p(-q), 0.0))
    return np.clip(h, 0.0, math.log(2))


def normalize_uncertainty(phi: float, phi_min: float, phi_max: float) -> float:
    if not phi_max > phi_min:
        raise ValidationError(f"degenerate normalization range [{phi_min}, {phi_max}]")
    return float(min(max((phi - phi_min) / (phi_max - phi_min), 0.0), 1.0))


def analytic_bounds(num_classes: int) -> tuple[float, float]:
    return 0.0, math.log(num_classes)


def empirical_bounds(phis) -> tuple[float, float]:
    """Batch min/max of raw entropies, for the empirical normalization mode."""
    phis = np.asarray(phis, dtype=np.float64)
    if phis.size < 2 or phis.max() <= phis.min():
        raise ValidationError("empirical bounds need at least two distinct entropy values")
    return float(phis.min()), float(phis.max())


def _mask_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    pa = a.pixels if isinstance(a, BinaryMask) else np.asarray(a, dtype=bool)
    pb = b.pixels if isinstance(b, BinaryMask) else np.asarray(b, dtype=bool)
    if pa.shape != pb.shape:
        raise ValidationError(f"mask shapes differ: {pa.shape} vs {pb.shape}")
    return pa, pb


def dice(a, b) -> float:
    pa, pb = _mask_pair(a, b)
    denom = int(pa.sum()) + int(pb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pa, pb).sum()) / denom


def jaccard(a, b) -> float:
    pa, pb = _mask_pair(a, b)
    union = int(np.logical_or(pa, pb).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pa, pb).sum()) / union


def binarize(prob_map, threshold: float = 0.5) -> BinaryMask:
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must be in (0, 1), got {threshold}")
    m = np.asarray(prob_map, dtype=np.float64)
    if m.ndim == 3 and m.shape[-1] == 1:
        m = m[..., 0]
    if m.size and (m.min() < 0.0 or m.max() > 1.0 or not np.isfinite(m).all()):
        raise ValidationError("probability map values must lie in [0, 1]")
    return BinaryMask(m >= threshold)


@dataclass
class RunningMetrics:
    """Accumulates mean Dice/Jaccard over a stream of mask pairs."""

    dice_sum: float = 0.0
    jaccard_sum: float = 0.0
    n: int = 0
    per_item: list = field(default_factory=list)

    def update(self, pred, truth) -> None:
        d, j = dice(pred, truth), jaccard(pred, truth)
        self.dice_sum += d
        self.jaccard_sum += j
        self.n += 1
        self.per_item.append((d, j))

    @property
    def dice(self) -> float:
        return self.dice_sum / self.n if self.n else float("nan")

    @property
    def jaccard(self) -> float:
        return self.jaccard_sum / self.n if self.n else float("nan")


def subseed(seed: int, name: str) -> int:
    """Independent named sub-stream of a root seed."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])
