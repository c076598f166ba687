import json
import warnings

import jsonschema
import numpy as np
import pytest
import torch

from skinet.classifier import ClassifierConfig, build_classifier
from skinet.core import BinaryMask, Image, TriageCounts, ValidationError
from skinet.data import preprocess
from skinet.pipeline import (
    REPORT_SCHEMA,
    EmptyMaskWarning,
    PipelineConfig,
    PipelineStageError,
    apply_mask,
    crop_window,
    evaluate_pipeline,
    masked_inputs,
    skinet_infer,
    summarize_counts,
)
from stubs import certain_segmenter, uncertain_segmenter
from synthetic import clf_arrays

SIZE = 32
DESK = ClassifierConfig(backbone="desk_cnn", input_shape=(SIZE, SIZE, 3), desk_widths=(4, 8, 8, 8))
FAST = PipelineConfig(samples=3, explainer="grad_cam")


def _clf():
    torch.manual_seed(0)
    m = build_classifier(DESK).eval()
    m.trained = True
    return m


def _img(seed=0, size=SIZE):
    return Image(np.random.default_rng(seed).random((size, size, 3)).astype(np.float32))


def test_crop_window_adds_margin():
    m = np.zeros((224, 224), bool)
    m[87:137, 87:137] = True  # centred 50×50
    r0, c0, r1, c1 = crop_window(BinaryMask(m), 0.10)
    assert (r1 - r0, c1 - c0) == (60, 60)
    assert (r0, c0) == (82, 82)


def test_crop_window_clips_to_frame():
    m = np.zeros((20, 20), bool)
    m[0:10, 15:20] = True
    assert crop_window(BinaryMask(m), 0.5) == (0, 12, 15, 20)


def test_apply_mask_full_frame_crop_equals_preprocess():
    img = _img()
    full = BinaryMask(np.ones((SIZE, SIZE), bool))
    for mode in ("crop_bbox_margin", "multiply_then_crop", "multiply"):
        assert apply_mask(img, full, mode, 0.1) == preprocess(img, SIZE)


def test_apply_mask_multiply_with_empty_mask_is_zero_and_warns():
    with pytest.warns(EmptyMaskWarning):
        out = apply_mask(_img(), BinaryMask(np.zeros((SIZE, SIZE), bool)), "multiply")
    assert not out.pixels.any()


def test_apply_mask_empty_mask_crop_mode_falls_back_to_original():
    img = _img(1)
    with pytest.warns(EmptyMaskWarning):
        out = apply_mask(img, BinaryMask(np.zeros((SIZE, SIZE), bool)), "crop_bbox_margin")
    assert out == preprocess(img, SIZE)


def test_apply_mask_multiply_then_crop_zeroes_background_inside_window():
    img = Image(np.full((SIZE, SIZE, 3), 0.8, dtype=np.float32))
    m = np.zeros((SIZE, SIZE), bool)
    m[8:24, 8:24] = True
    m[8:12, 8:12] = False  # notch inside the bounding box
    out = apply_mask(img, BinaryMask(m), "multiply_then_crop", 0.0, size=16)
    assert out.shape == (16, 16, 3)
    assert out.pixels[0, 0].max() < 0.05 and out.pixels[-1, -1].min() > 0.75


def test_apply_mask_shape_mismatch():
    with pytest.raises(ValidationError):
        apply_mask(_img(), BinaryMask(np.ones((8, 8), bool)))


def test_routing_uncertain_segment_passes_original():
    img = _img(2)
    report = skinet_infer(uncertain_segmenter(SIZE), _clf(), img, FAST, seed=1)
    assert report.seg_uncertainty.scalar_phi_norm >= 0.25 and not report.seg_used
    assert np.array_equal(report.routed_input.pixels, preprocess(img, SIZE).pixels)


def test_routing_certain_segment_passes_masked_image():
    img = _img(3)
    seg = certain_segmenter(SIZE)
    cfg = PipelineConfig(samples=3, explainer="none")
    report = skinet_infer(seg, _clf(), img, cfg, seed=1)
    assert report.seg_used and report.seg_uncertainty.scalar_phi_norm < cfg.seg_threshold
    expected = apply_mask(preprocess(img, SIZE), report.seg_mask, cfg.mask_apply_mode, cfg.margin, SIZE)
    assert np.array_equal(report.routed_input.pixels, expected.pixels)


def test_certain_empty_mask_routes_original_with_note():
    img = _img(4)
    seg = certain_segmenter(SIZE, box=(0, 0, 0, 0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        report = skinet_infer(seg, _clf(), img, PipelineConfig(samples=3, explainer="none"))
    assert report.seg_used and report.warnings
    assert report.routed_input == preprocess(img, SIZE)


def test_verdict_consistency_and_saliency_only_when_certain():
    img = _img(5)
    certain = skinet_infer(None, _clf(), img, PipelineConfig(samples=3, clf_threshold=1.0, explainer="grad_cam"))
    assert certain.verdict == "certain" and certain.saliency is not None
    refer = skinet_infer(None, _clf(), img, PipelineConfig(samples=3, clf_threshold=0.0, explainer="grad_cam"))
    assert refer.verdict == "refer-to-expert" and refer.saliency is None
    assert refer.to_dict()["refer_to_expert"] is True


def test_uncertain_to_certain_flip_mechanics():
    # the same prediction flips from referral to certain once its φ_norm drops below φ_T
    img = _img(6)
    base = skinet_infer(None, _clf(), img, PipelineConfig(samples=3, explainer="none"))
    phi = base.clf.uncertainty.phi_norm
    above = PipelineConfig(samples=3, explainer="none", clf_threshold=min(1.0, phi + 1e-6))
    below = PipelineConfig(samples=3, explainer="none", clf_threshold=max(0.0, phi - 1e-6))
    assert skinet_infer(None, _clf(), img, above).verdict == "certain"
    assert skinet_infer(None, _clf(), img, below).verdict == "refer-to-expert"


def test_report_json_validates_and_is_deterministic():
    img = _img(7)
    a = skinet_infer(certain_segmenter(SIZE), _clf(), img, FAST, seed=3, input_id="x")
    b = skinet_infer(certain_segmenter(SIZE), _clf(), img, FAST, seed=3, input_id="x")
    da, db = a.to_dict(), b.to_dict()
    jsonschema.validate(da, REPORT_SCHEMA)
    assert json.dumps(da, sort_keys=True) == json.dumps(db, sort_keys=True)
    assert set(a.timings) == {"segmentation", "routing", "classification", "explanation"}
    assert "timings_ms" not in da and "timings_ms" in a.to_dict(include_timings=True)


def test_stage_errors_name_the_stage():
    class Broken(torch.nn.Module):
        def forward(self, x):
            raise RuntimeError("weights missing")

    with pytest.raises(PipelineStageError) as info:
        skinet_infer(Broken(), _clf(), _img(), FAST)
    assert info.value.stage == "segmentation" and "weights missing" in str(info.value)
    with pytest.raises(PipelineStageError) as info:
        skinet_infer(None, Broken(), _img(), FAST)
    assert info.value.stage == "classification"


def test_evaluate_pipeline_conservation_and_accuracy():
    images, labels = clf_arrays(6, SIZE, seed=1)
    res = evaluate_pipeline(uncertain_segmenter(SIZE), _clf(), (images, labels), PipelineConfig(samples=3))
    assert res.counts.total == 6 and len(res.records) == 6
    assert res.diagnostic_accuracy == pytest.approx((res.counts.cc + res.counts.iu) / 6)


def test_evaluate_pipeline_all_correct_and_certain():
    class Oracle(torch.nn.Module):
        """Predicts class 0 with probability ~1 for every input."""

        cfg = DESK

        def forward(self, x):
            out = torch.full((x.shape[0], 7), -50.0, dtype=x.dtype)
            out[:, 0] = 50.0
            return out

    images = np.stack([_img(i).pixels for i in range(4)])
    res = evaluate_pipeline(None, Oracle(), (images, np.zeros(4, int)), PipelineConfig(samples=2))
    assert res.counts == TriageCounts(4, 0, 0, 0) and res.diagnostic_accuracy == 1.0


def test_evaluate_pipeline_empirical_bounds_and_empty():
    images, labels = clf_arrays(4, SIZE, seed=2)
    res = evaluate_pipeline(None, _clf(), (images, labels), PipelineConfig(samples=3, bounds="empirical"))
    phis = [r["phi_norm"] for r in res.records]
    assert min(phis) == 0.0 and max(phis) == 1.0
    with pytest.raises(ValidationError):
        evaluate_pipeline(None, _clf(), (images[:0], labels[:0]))


def test_summarize_counts_replays_reference_tables():
    assert summarize_counts(TriageCounts(1727, 627, 74, 233))["diagnostic_accuracy"] == pytest.approx(0.7365, abs=1e-4)
    assert summarize_counts(TriageCounts(1602, 722, 76, 261))["diagnostic_accuracy"] == pytest.approx(0.7001, abs=1e-4)


def test_pipeline_config_validation():
    with pytest.raises(ValidationError):
        PipelineConfig(seg_threshold=1.5)
    with pytest.raises(ValidationError):
        PipelineConfig(mask_apply_mode="blur")
    with pytest.raises(ValidationError):
        PipelineConfig(samples=1)


def test_masked_inputs_match_apply_mask_and_pass_empty_masks_through():
    images = np.stack([_img(20).pixels, _img(21).pixels])
    cfg = PipelineConfig()
    out = masked_inputs(certain_segmenter(SIZE), images, cfg)
    box = np.zeros((SIZE, SIZE), bool)
    box[8:24, 8:24] = True
    expected = apply_mask(Image(images[0]), BinaryMask(box), cfg.mask_apply_mode, cfg.margin, SIZE)
    np.testing.assert_array_equal(out[0], expected.pixels)
    empty = masked_inputs(certain_segmenter(SIZE, box=(0, 0, 0, 0)), images, cfg)
    np.testing.assert_array_equal(empty, images)
