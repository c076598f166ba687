"""Two-stage diagnosis: segment, gate the mask on its uncertainty, classify the
routed image, gate the diagnosis, and explain certain predictions."""

from __future__ import annotations

import contextlib
import hashlib
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import (
    BinaryMask,
    Image,
    TriageCounts,
    UncertaintyRecord,
    ValidationError,
    binarize,
    empirical_bounds,
    subseed,
)
from .data import AugmentationSpec, preprocess
from .saliency import AttributionMap, XraiParams, explain
from .segnet import seg_forward
from .uncertainty import (
    DEFAULT_CLF_THRESHOLD,
    DEFAULT_SAMPLES,
    DEFAULT_SEG_THRESHOLD,
    Prediction,
    SegUncertainty,
    combined_predict,
    diagnostic_accuracy,
    prediction_accuracy,
    seg_uncertainty,
    triage,
)

SCHEMA_VERSION = "1.0"
MASK_MODES = ("crop_bbox_margin", "multiply", "multiply_then_crop")
EXPLAINERS = ("guided_backprop", "grad_cam", "guided_grad_cam", "xrai", "gb", "gradcam", "ggc", "none")


class EmptyMaskWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    seg_threshold: float = DEFAULT_SEG_THRESHOLD
    clf_threshold: float = DEFAULT_CLF_THRESHOLD
    mask_apply_mode: str = "multiply_then_crop"
    margin: float = 0.10
    samples: int = DEFAULT_SAMPLES
    explainer: str = "xrai"
    mask_threshold: float = 0.5
    seg_region: str = "frame"
    bounds: str = "analytic"

    def __post_init__(self):
        for name in ("seg_threshold", "clf_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {getattr(self, name)}")
        if self.mask_apply_mode not in MASK_MODES:
            raise ValidationError(f"mask_apply_mode must be one of {MASK_MODES}")
        if self.margin < 0:
            raise ValidationError("margin must be non-negative")
        if self.samples < 2:
            raise ValidationError("samples must be at least 2")
        if self.explainer not in EXPLAINERS:
            raise ValidationError(f"explainer must be one of {EXPLAINERS}")
        if self.bounds not in ("analytic", "empirical"):
            raise ValidationError("bounds must be 'analytic' or 'empirical'")


# --------------------------------------------------------------------------- mask application


def crop_window(mask: BinaryMask, margin: float) -> tuple[int, int, int, int]:
    """Bounding box of the mask grown by ``margin`` × box size on every side, clipped to the frame."""
    rows = np.flatnonzero(mask.pixels.any(axis=1))
    cols = np.flatnonzero(mask.pixels.any(axis=0))
    if rows.size == 0:
        raise ValidationError("empty mask has no bounding box")
    r0, r1 = int(rows[0]), int(rows[-1]) + 1
    c0, c1 = int(cols[0]), int(cols[-1]) + 1
    dr = math.floor(margin * (r1 - r0) + 0.5)
    dc = math.floor(margin * (c1 - c0) + 0.5)
    H, W = mask.shape
    return max(0, r0 - dr), max(0, c0 - dc), min(H, r1 + dr), min(W, c1 + dc)


def apply_mask(img: Image, mask: BinaryMask, mode: str = "multiply_then_crop", margin: float = 0.10,
               size: int | None = None) -> Image:
    """Remove background and/or zoom onto the lesion, then re-preprocess to ``size``.

    An empty mask makes the crop modes fall back to the original image (with
    an ``EmptyMaskWarning``); ``multiply`` then yields an all-zero image.
    """
    if mask.shape != img.shape[:2]:
        raise ValidationError(f"mask shape {mask.shape} does not match image {img.shape[:2]}")
    if mode not in MASK_MODES:
        raise ValidationError(f"unknown mask mode {mode!r}")
    size = size or img.height
    empty = mask.positive_count == 0
    if empty:
        warnings.warn("segmentation mask is empty", EmptyMaskWarning, stacklevel=2)
        if mode != "multiply":
            return preprocess(img, size)
    px = img.pixels
    if mode in ("multiply", "multiply_then_crop"):
        px = px * mask.pixels[:, :, None].astype(px.dtype)
    if mode in ("crop_bbox_margin", "multiply_then_crop"):
        r0, c0, r1, c1 = crop_window(mask, margin)
        px = px[r0:r1, c0:c1]
    return preprocess(np.ascontiguousarray(px), size)


# --------------------------------------------------------------------------- reports


def _sha(arr: np.ndarray) -> str:
    a = np.ascontiguousarray(arr)
    return hashlib.sha256(str(a.dtype).encode() + str(a.shape).encode() + a.tobytes()).hexdigest()


@dataclass
class DiagnosisReport:
    input_id: str
    seg_mean_map: np.ndarray | None
    seg_mask: BinaryMask | None
    seg_uncertainty: SegUncertainty | None
    seg_used: bool
    clf: Prediction
    verdict: str
    routed_input: Image
    saliency: AttributionMap | None = None
    warnings: list[str] = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def to_dict(self, include_timings: bool = False) -> dict:
        seg = None
        if self.seg_uncertainty is not None:
            seg = {
                "used": self.seg_used,
                "scalar_phi_norm": self.seg_uncertainty.scalar_phi_norm,
                "mask_positive_count": self.seg_mask.positive_count,
                "mask_sha256": _sha(self.seg_mask.pixels),
                "mean_map_sha256": _sha(self.seg_mean_map),
            }
        saliency = None
        if self.saliency is not None:
            saliency = {
                "method": self.saliency.method,
                "target_class": self.saliency.target_class,
                "sha256": _sha(self.saliency.values),
            }
        out = {
            "schema_version": SCHEMA_VERSION,
            "input_id": self.input_id,
            "seg": seg,
            "clf": self.clf.to_dict(),
            "verdict": self.verdict,
            "refer_to_expert": self.verdict == "refer-to-expert",
            "routed_input_sha256": _sha(self.routed_input.pixels),
            "saliency": saliency,
            "warnings": list(self.warnings),
        }
        if include_timings:
            out["timings_ms"] = dict(self.timings)
        return out


_UNCERTAINTY_SCHEMA = {
    "type": "object",
    "required": ["phi", "phi_norm", "phi_min", "phi_max", "threshold", "is_certain"],
    "properties": {
        "phi": {"type": "number", "minimum": 0},
        "phi_norm": {"type": "number", "minimum": 0, "maximum": 1},
        "phi_min": {"type": "number"},
        "phi_max": {"type": "number"},
        "threshold": {"type": "number", "minimum": 0, "maximum": 1},
        "is_certain": {"type": "boolean"},
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "DiagnosisReport",
    "type": "object",
    "required": ["schema_version", "input_id", "seg", "clf", "verdict", "refer_to_expert",
                 "routed_input_sha256", "saliency", "warnings"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "input_id": {"type": "string"},
        "seg": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "required": ["used", "scalar_phi_norm", "mask_positive_count"],
                    "properties": {
                        "used": {"type": "boolean"},
                        "scalar_phi_norm": {"type": "number", "minimum": 0, "maximum": 1},
                        "mask_positive_count": {"type": "integer", "minimum": 0},
                        "mask_sha256": {"type": "string"},
                        "mean_map_sha256": {"type": "string"},
                    },
                },
            ]
        },
        "clf": {
            "type": "object",
            "required": ["mean", "class_labels", "predicted_class", "uncertainty"],
            "properties": {
                "mean": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                "class_labels": {"type": "array", "items": {"type": "string"}},
                "predicted_class": {"type": "string"},
                "uncertainty": _UNCERTAINTY_SCHEMA,
                "mode": {"type": ["string", "null"]},
                "count": {"type": ["integer", "null"]},
            },
        },
        "verdict": {"enum": ["certain", "refer-to-expert"]},
        "refer_to_expert": {"type": "boolean"},
        "routed_input_sha256": {"type": "string"},
        "saliency": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "required": ["method", "target_class"],
                    "properties": {"method": {"type": "string"}, "target_class": {"type": "integer"}},
                },
            ]
        },
        "warnings": {"type": "array", "items": {"type": "string"}},
        "timings_ms": {"type": "object", "additionalProperties": {"type": "number"}},
    },
}


# --------------------------------------------------------------------------- inference


def _input_size(model, default: int) -> int:
    cfg = getattr(model, "cfg", None)
    return cfg.input_shape[0] if cfg is not None else default


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except PipelineStageError:
        raise
    except Exception as exc:
        raise PipelineStageError(name, exc) from exc


def skinet_infer(seg, clf, img, cfg: PipelineConfig = PipelineConfig(), seed: int = 0,
                 input_id: str = "input", aug: AugmentationSpec | None = None,
                 xrai_params: XraiParams = XraiParams()) -> DiagnosisReport:
    """Run one image through the full pipeline.

    ``seg`` may be ``None`` for the stand-alone classifier baseline, in which
    case the original image is always routed to the classifier.
    """
    timings = {}
    notes: list[str] = []
    clf_size = _input_size(clf, img.height if isinstance(img, Image) else 224)
    mean_map = mask = su = None
    used = False

    t0 = time.perf_counter()
    with _stage("segmentation"):
        if seg is not None:
            seg_input = preprocess(img, _input_size(seg, clf_size))
            su = seg_uncertainty(seg, seg_input, cfg.samples, subseed(seed, "seg"), aug, region=cfg.seg_region)
            mean_map = su.mean_map
            mask = binarize(mean_map, cfg.mask_threshold)
            used = su.scalar_phi_norm < cfg.seg_threshold
    timings["segmentation"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    with _stage("routing"):
        if used and mask.positive_count > 0:
            routed = apply_mask(seg_input, mask, cfg.mask_apply_mode, cfg.margin, clf_size)
        else:
            if used:
                notes.append("certain segmentation produced an empty mask; original image routed")
            routed = preprocess(img, clf_size)
    timings["routing"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    with _stage("classification"):
        pred = combined_predict(clf, routed, cfg.samples, subseed(seed, "clf"), aug, threshold=cfg.clf_threshold)
        verdict = triage(pred)
    timings["classification"] = (time.perf_counter() - t0) * 1e3

    saliency = None
    t0 = time.perf_counter()
    with _stage("explanation"):
        if verdict == "certain" and cfg.explainer != "none":
            saliency = explain(clf, routed, pred.predicted_index, cfg.explainer, xrai_params, seed=seed)
    timings["explanation"] = (time.perf_counter() - t0) * 1e3

    return DiagnosisReport(
        input_id=input_id,
        seg_mean_map=mean_map,
        seg_mask=mask,
        seg_uncertainty=su,
        seg_used=used,
        clf=pred,
        verdict=verdict,
        routed_input=routed,
        saliency=saliency,
        warnings=notes,
        timings=timings,
    )


def masked_inputs(seg, images, cfg: PipelineConfig = PipelineConfig(), size: int | None = None) -> np.ndarray:
    """Classifier inputs built from the deterministic segmentation of each image.

    Used to train a classifier on the same kind of masked crops it sees at
    inference. Images whose mask comes out empty are passed through unmasked.
    """
    out = []
    for pixels in np.asarray(images):
        img = Image(pixels)
        clf_size = size or img.height
        seg_input = preprocess(img, _input_size(seg, clf_size))
        mask = binarize(seg_forward(seg, seg_input), cfg.mask_threshold)
        if mask.positive_count > 0:
            out.append(apply_mask(seg_input, mask, cfg.mask_apply_mode, cfg.margin, clf_size).pixels)
        else:
            out.append(preprocess(img, clf_size).pixels)
    return np.stack(out).astype(np.float32)


# --------------------------------------------------------------------------- evaluation


@dataclass
class EvaluationResult:
    counts: TriageCounts
    diagnostic_accuracy: float
    prediction_accuracy: float
    records: list[dict]

    def to_dict(self) -> dict:
        return {
            "counts": self.counts.to_dict(),
            "total": self.counts.total,
            "diagnostic_accuracy": self.diagnostic_accuracy,
            "prediction_accuracy": self.prediction_accuracy,
            "records": self.records,
        }


def summarize_counts(counts: TriageCounts) -> dict:
    return {
        **counts.to_dict(),
        "total": counts.total,
        "diagnostic_accuracy": diagnostic_accuracy(counts),
        "prediction_accuracy": prediction_accuracy(counts),
    }


def _renormalize(pred: Prediction, bounds) -> Prediction:
    u = pred.uncertainty
    rec = UncertaintyRecord.from_phi(u.phi, bounds[0], bounds[1], u.threshold)
    return Prediction(pred.mean, pred.predicted_class, rec, pred.samples)


def evaluate_pipeline(seg, clf, data, cfg: PipelineConfig = PipelineConfig(), seed: int = 0,
                      aug: AugmentationSpec | None = None) -> EvaluationResult:
    """Triage every labelled image and accumulate cc/cu/ic/iu counts.

    ``data`` is a classification manifest or ``(images, labels[, ids])``.
    Explanations are skipped; they do not affect the counts.
    """
    from .data import DatasetManifest, decode_image

    if isinstance(data, DatasetManifest):
        items = [(e.image.name, decode_image(e.image), data.class_labels.index(e.target)) for e in data.entries]
    else:
        ids = data[2] if len(data) > 2 else [str(i) for i in range(len(data[0]))]
        items = list(zip(ids, data[0], data[1]))
    if not items:
        raise ValidationError("cannot evaluate on an empty dataset")
    run_cfg = PipelineConfig(**{**cfg.__dict__, "explainer": "none"})
    reports = [
        skinet_infer(seg, clf, raw, run_cfg, subseed(seed, f"item{i}"), str(name), aug)
        for i, (name, raw, _) in enumerate(items)
    ]
    preds = [r.clf for r in reports]
    if cfg.bounds == "empirical":
        bounds = empirical_bounds([p.uncertainty.phi for p in preds])
        preds = [_renormalize(p, bounds) for p in preds]
    counts = TriageCounts()
    records = []
    for (name, _, truth), report, pred in zip(items, reports, preds):
        category = triage(pred, int(truth))
        counts.add(category)
        records.append({
            "image": str(name),
            "truth": pred.mean.class_labels[int(truth)],
            "predicted": pred.predicted_class,
            "phi_norm": pred.uncertainty.phi_norm,
            "seg_used": report.seg_used,
            "category": category,
        })
    return EvaluationResult(counts, diagnostic_accuracy(counts), prediction_accuracy(counts), records)
