import csv
import io

import numpy as np
import pytest
import torch
from scipy import ndimage

from skinet.classifier import ClassifierConfig, build_classifier
from skinet.core import BinaryMask, Image, ValidationError
from skinet.xai_eval import (
    CSV_FIELDS,
    BokehParams,
    UntrainedModelError,
    blur,
    bokeh_reconstruct,
    evaluate_explainer,
)
from synthetic import clf_arrays

DESK = ClassifierConfig(backbone="desk_cnn", input_shape=(16, 16, 3), desk_widths=(4, 8, 8, 8))


def _model():
    torch.manual_seed(0)
    m = build_classifier(DESK).eval()
    m.trained = True
    return m


def test_blur_matches_per_channel_gaussian():
    img = Image(np.random.default_rng(0).random((12, 12, 3)))
    ref = np.stack([ndimage.gaussian_filter(img.pixels[:, :, c], 2.0, mode="reflect") for c in range(3)], axis=2)
    np.testing.assert_allclose(blur(img, 2.0), ref, atol=1e-12)


def test_bokeh_keeps_selected_pixels_and_blurs_the_rest():
    img = Image(np.random.default_rng(1).random((12, 12, 3)))
    keep = np.zeros((12, 12), bool)
    keep[3:6, 3:6] = True
    out = bokeh_reconstruct(img, BinaryMask(keep), BokehParams(blur_kernel_sigma=3.0))
    np.testing.assert_array_equal(out.pixels[keep], img.pixels[keep])
    np.testing.assert_allclose(out.pixels[~keep], blur(img, 3.0)[~keep], atol=1e-6)


def test_bokeh_full_mask_is_identity():
    img = Image(np.random.default_rng(2).random((8, 8, 3)))
    out = bokeh_reconstruct(img, BinaryMask(np.ones((8, 8), bool)))
    assert out == img and out.pixels is not img.pixels


def test_bokeh_params_validation():
    with pytest.raises(ValidationError):
        BokehParams(blur_kernel_sigma=0)
    with pytest.raises(ValidationError):
        BokehParams(keep_fraction=1.5)


def test_fraction_one_reproduces_baseline_accuracy():
    images, labels = clf_arrays(7, 16)
    res = evaluate_explainer(_model(), (images, labels), "grad_cam", fraction=1.0)
    assert res.accuracy == res.baseline_accuracy
    assert all(r["predicted_before"] == r["predicted_after"] for r in res.records)


def test_benchmark_csv_layout():
    images, labels = clf_arrays(3, 16)
    res = evaluate_explainer(_model(), (images, labels, ["a", "b", "c"]), "random", fraction=0.1, seed=1)
    rows = list(csv.DictReader(io.StringIO(res.to_csv())))
    assert tuple(rows[0]) == CSV_FIELDS
    assert [r["image"] for r in rows] == ["a", "b", "c"]
    assert 0.0 <= res.accuracy <= 1.0


def test_untrained_model_refused():
    m = build_classifier(DESK)
    images, labels = clf_arrays(2, 16)
    with pytest.raises(UntrainedModelError):
        evaluate_explainer(m, (images, labels), "grad_cam")
    with pytest.raises(ValidationError):
        evaluate_explainer(_model(), (images[:0], labels[:0]), "grad_cam")
