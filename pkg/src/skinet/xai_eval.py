"""Bokeh benchmark for explainers: keep the top-attributed pixels sharp over a
blurred copy of the image and measure how often the classifier still gets it right."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .classifier import clf_probs_batch
from .core import BinaryMask, Image, ValidationError
from .saliency import XraiParams, explain, top_fraction_mask

CSV_FIELDS = ("image", "explainer", "fraction", "predicted_before", "predicted_after", "correct_after")


class UntrainedModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class BokehParams:
    blur_kernel_sigma: float = 8.0
    keep_fraction: float = 0.10

    def __post_init__(self):
        if not self.blur_kernel_sigma > 0:
            raise ValidationError(f"blur sigma must be positive, got {self.blur_kernel_sigma}")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ValidationError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")


def blur(img: Image, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(img.pixels.astype(np.float64), sigma=(sigma, sigma, 0), mode="reflect")


def bokeh_reconstruct(img: Image, keep: BinaryMask, params: BokehParams = BokehParams()) -> Image:
    if keep.shape != img.shape[:2]:
        raise ValidationError(f"mask shape {keep.shape} does not match image {img.shape[:2]}")
    if keep.pixels.all():
        return Image(img.pixels.copy())
    background = blur(img, params.blur_kernel_sigma).astype(img.pixels.dtype)
    out = np.where(keep.pixels[:, :, None], img.pixels, background)
    return Image(np.clip(out, 0.0, 1.0))


@dataclass
class BenchmarkResult:
    explainer: str
    fraction: float
    accuracy: float
    baseline_accuracy: float
    records: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.records)
        return buf.getvalue()


def _materialize(data, model):
    from .data import DatasetManifest, load_arrays

    if isinstance(data, DatasetManifest):
        images, labels = load_arrays(data, model.cfg.input_shape[0])
        ids = [e.image.name for e in data.entries]
    else:
        images, labels = data[0], data[1]
        ids = list(data[2]) if len(data) > 2 else [str(i) for i in range(len(images))]
    if len(images) == 0:
        raise ValidationError("cannot evaluate an explainer on an empty dataset")
    return [im if isinstance(im, Image) else Image(np.asarray(im)) for im in images], np.asarray(labels), ids


def evaluate_explainer(model, data, explainer: str, fraction: float | None = None,
                       params: BokehParams = BokehParams(), seed: int = 0,
                       xrai_params: XraiParams = XraiParams()) -> BenchmarkResult:
    """Retained accuracy of ``model`` on bokeh reconstructions driven by ``explainer``.

    Attributions target the model's own predicted class. ``data`` is a labelled
    manifest or an ``(images, labels[, ids])`` tuple.
    """
    if getattr(model, "trained", True) is False:
        raise UntrainedModelError("explainer benchmark needs a trained classifier")
    fraction = params.keep_fraction if fraction is None else fraction
    images, labels, ids = _materialize(data, model)
    labels_out = model.cfg.class_labels
    records = []
    correct_before = 0
    for i, (img, truth) in enumerate(zip(images, labels)):
        before = int(clf_probs_batch(model, [img]).argmax())
        correct_before += before == int(truth)
        attr = explain(model, img, before, explainer, xrai_params, seed=seed + i)
        recon = bokeh_reconstruct(img, top_fraction_mask(attr, fraction), params)
        after = int(clf_probs_batch(model, [recon]).argmax())
        records.append({
            "image": ids[i],
            "explainer": explainer,
            "fraction": fraction,
            "predicted_before": labels_out[before],
            "predicted_after": labels_out[after],
            "correct_after": int(after == int(truth)),
        })
    acc = sum(r["correct_after"] for r in records) / len(records)
    return BenchmarkResult(explainer, fraction, acc, correct_before / len(records), records)
