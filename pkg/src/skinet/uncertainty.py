"""Monte Carlo sampling engine for predictive uncertainty.

Three estimators share one loop: dropout-only (epistemic), augmentation-only
(aleatoric) and both at once (combined). Per-sample dropout seeds and
augmentation draws come from fixed sub-streams of the caller's seed, so the
combined estimator collapses exactly onto either single-source estimator when
the other source is switched off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    CLASS_LABELS,
    Image,
    ProbabilityVector,
    TriageCounts,
    UncertaintyRecord,
    ValidationError,
    analytic_bounds,
    binary_entropy,
    entropy,
)
from .data import AugmentationSpec, Transform, tta_transforms

DEFAULT_SAMPLES = 30
DEFAULT_CLF_THRESHOLD = 0.35
DEFAULT_SEG_THRESHOLD = 0.25
MODES = ("epistemic", "aleatoric", "combined")


@dataclass(frozen=True)
class SampleSet:
    samples: np.ndarray  # count×N probability vectors or count×H×W probability maps
    mode: str
    seeds: tuple[int, ...]

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown sampling mode {self.mode!r}")
        if len(self.samples) < 2:
            raise ValidationError("a sample set needs at least two samples")

    @property
    def count(self) -> int:
        return len(self.samples)

    def mean(self) -> np.ndarray:
        # sequential reduction in sample order keeps the result bit-stable
        acc = np.zeros_like(self.samples[0], dtype=np.float64)
        for s in self.samples:
            acc += s
        return acc / len(self.samples)


@dataclass(frozen=True)
class Prediction:
    mean: ProbabilityVector
    predicted_class: str
    uncertainty: UncertaintyRecord
    samples: SampleSet | None = None

    @property
    def predicted_index(self) -> int:
        return self.mean.class_labels.index(self.predicted_class)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.probs.tolist(),
            "class_labels": list(self.mean.class_labels),
            "predicted_class": self.predicted_class,
            "uncertainty": self.uncertainty.to_dict(),
            "mode": self.samples.mode if self.samples is not None else None,
            "count": self.samples.count if self.samples is not None else None,
        }


@dataclass(frozen=True)
class SegUncertainty:
    mean_map: np.ndarray
    pixel_entropy_map: np.ndarray
    scalar_phi_norm: float


# --------------------------------------------------------------------------- seeds and aggregation


def dropout_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence([seed, 0xD50]).generate_state(count)]


def _check_count(n: int, name: str) -> None:
    if n < 2:
        raise ValidationError(f"{name} must be at least 2, got {n}")


def predict_from_samples(
    samples,
    mode: str = "combined",
    seeds=(),
    threshold: float = DEFAULT_CLF_THRESHOLD,
    bounds: tuple[float, float] | None = None,
    class_labels: tuple[str, ...] | None = None,
) -> Prediction:
    """Average probability vectors and score the entropy of the mean."""
    arr = np.asarray(samples, dtype=np.float64)
    labels = tuple(class_labels) if class_labels is not None else CLASS_LABELS[: arr.shape[1]]
    sset = SampleSet(arr, mode, tuple(int(s) for s in seeds))
    mean = ProbabilityVector(sset.mean(), labels)
    lo, hi = bounds if bounds is not None else analytic_bounds(len(labels))
    record = UncertaintyRecord.from_phi(entropy(mean), lo, hi, threshold)
    return Prediction(mean, mean.label, record, sset)


def _forward_clf(model, images, seeds, batch_size):
    from .classifier import clf_probs_batch

    out = []
    for start in range(0, len(images), batch_size):
        chunk_seeds = None if seeds is None else seeds[start : start + batch_size]
        out.append(clf_probs_batch(model, images[start : start + batch_size], chunk_seeds))
    return np.concatenate(out)


def _forward_seg(model, images, seeds, batch_size):
    from .segnet import seg_forward_batch

    out = []
    for start in range(0, len(images), batch_size):
        chunk_seeds = None if seeds is None else seeds[start : start + batch_size]
        out.append(seg_forward_batch(model, images[start : start + batch_size], chunk_seeds))
    return np.concatenate(out)


def _plan(img: Image, count: int, seed: int, mode: str, aug: AugmentationSpec | None):
    """Inputs, transforms and dropout seeds for one sampling run."""
    if mode in ("aleatoric", "combined"):
        transforms = tta_transforms(count, seed, aug)
    else:
        transforms = [Transform()] * count
    images = [img if t.is_identity else Image(t.apply(img.pixels)) for t in transforms]
    seeds = dropout_seeds(seed, count) if mode in ("epistemic", "combined") else None
    return images, transforms, seeds


def sample_classifier(model, img: Image, count: int, seed: int, mode: str, aug=None, batch_size: int = 32) -> SampleSet:
    if mode not in MODES:
        raise ValidationError(f"unknown sampling mode {mode!r}")
    images, _, seeds = _plan(img, count, seed, mode, aug)
    probs = _forward_clf(model, images, seeds, batch_size)
    return SampleSet(probs, mode, tuple(seeds or ()))


def _labels_of(model):
    cfg = getattr(model, "cfg", None)
    return tuple(cfg.class_labels) if cfg is not None and hasattr(cfg, "class_labels") else None


def _predict(model, img, count, seed, mode, aug, threshold, bounds, batch_size):
    sset = sample_classifier(model, img, count, seed, mode, aug, batch_size)
    return predict_from_samples(sset.samples, mode, sset.seeds, threshold, bounds, _labels_of(model))


def mc_dropout_predict(model, img: Image, O: int = DEFAULT_SAMPLES, seed: int = 0,
                       threshold: float = DEFAULT_CLF_THRESHOLD, bounds=None, batch_size: int = 32) -> Prediction:
    """Average O dropout-sampled forwards of the unaugmented input."""
    _check_count(O, "O")
    return _predict(model, img, O, seed, "epistemic", None, threshold, bounds, batch_size)


def tta_predict(model, img: Image, V: int = DEFAULT_SAMPLES, seed: int = 0, aug: AugmentationSpec | None = None,
                threshold: float = DEFAULT_CLF_THRESHOLD, bounds=None, batch_size: int = 32) -> Prediction:
    """Average deterministic forwards over the test-time augmentation family."""
    _check_count(V, "V")
    return _predict(model, img, V, seed, "aleatoric", aug, threshold, bounds, batch_size)


def combined_predict(model, img: Image, M: int = DEFAULT_SAMPLES, seed: int = 0, aug: AugmentationSpec | None = None,
                     threshold: float = DEFAULT_CLF_THRESHOLD, bounds=None, batch_size: int = 32) -> Prediction:
    """Each of M iterations pairs one augmentation draw with one dropout draw."""
    _check_count(M, "M")
    return _predict(model, img, M, seed, "combined", aug, threshold, bounds, batch_size)


# --------------------------------------------------------------------------- segmentation


def seg_uncertainty_from_maps(maps, region: str = "frame", lesion_threshold: float = 0.5) -> SegUncertainty:
    """Pixelwise mean, binary entropy per pixel, and the scalar normalized uncertainty.

    ``region="frame"`` averages the normalized entropy over every pixel;
    ``region="lesion"`` averages over pixels whose mean is at least
    ``lesion_threshold`` (whole frame if there are none).
    """
    arr = np.asarray(maps, dtype=np.float64)
    if arr.ndim != 3 or len(arr) < 2:
        raise ValidationError("need at least two H×W probability maps")
    acc = np.zeros(arr.shape[1:])
    for m in arr:
        acc += m
    mean_map = np.clip(acc / len(arr), 0.0, 1.0)
    ent = binary_entropy(mean_map)
    norm = ent / math.log(2)
    if region == "lesion":
        sel = mean_map >= lesion_threshold
        scalar = float(norm[sel].mean()) if sel.any() else float(norm.mean())
    elif region == "frame":
        scalar = float(norm.mean())
    else:
        raise ValidationError(f"unknown aggregation region {region!r}")
    return SegUncertainty(mean_map, ent, min(max(scalar, 0.0), 1.0))


def sample_segmenter(model, img: Image, count: int, seed: int, mode: str = "combined", aug=None,
                     batch_size: int = 8) -> SampleSet:
    if mode not in MODES:
        raise ValidationError(f"unknown sampling mode {mode!r}")
    images, transforms, seeds = _plan(img, count, seed, mode, aug)
    maps = _forward_seg(model, images, seeds, batch_size)
    maps = np.stack([m if t.is_identity else t.invert_map(m) for m, t in zip(maps, transforms)])
    return SampleSet(maps, mode, tuple(seeds or ()))


def seg_uncertainty(model, img: Image, M: int = DEFAULT_SAMPLES, seed: int = 0, aug=None,
                    mode: str = "combined", region: str = "frame", batch_size: int = 8) -> SegUncertainty:
    _check_count(M, "M")
    sset = sample_segmenter(model, img, M, seed, mode, aug, batch_size)
    return seg_uncertainty_from_maps(sset.samples, region)


# --------------------------------------------------------------------------- triage


def triage(pred: Prediction, truth=None, threshold: float | None = None) -> str:
    """Return cc/cu/ic/iu when the true label is known, else certain/refer-to-expert."""
    t = pred.uncertainty.threshold if threshold is None else threshold
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"threshold must be in [0, 1], got {t}")
    certain = pred.uncertainty.phi_norm < t
    if truth is None:
        return "certain" if certain else "refer-to-expert"
    if isinstance(truth, (int, np.integer)):
        truth = pred.mean.class_labels[int(truth)]
    correct = truth == pred.predicted_class
    return ("c" if correct else "i") + ("c" if certain else "u")


def diagnostic_accuracy(counts: TriageCounts) -> float:
    """(cc + iu) / total: the share of outcomes where confidence matched correctness."""
    if counts.total <= 0:
        raise ValidationError("diagnostic accuracy needs at least one counted prediction")
    return (counts.cc + counts.iu) / counts.total


def prediction_accuracy(counts: TriageCounts) -> float:
    if counts.total <= 0:
        raise ValidationError("prediction accuracy needs at least one counted prediction")
    return (counts.cc + counts.cu) / counts.total
