import math

import numpy as np
import pytest
import torch
from torch import nn

from skinet.classifier import ClassifierConfig, build_classifier
from skinet.core import Image, ValidationError
from skinet.felzenszwalb import SegmentMap
from skinet.layers import ReLU
from skinet.saliency import (
    AttributionMap,
    UnsupportedModelError,
    XraiParams,
    explain,
    grad_cam,
    grad_cam_from_activations,
    guided_backprop,
    guided_grad_cam,
    integrated_gradients,
    rank_regions,
    top_fraction_mask,
    xrai,
)

DESK = ClassifierConfig(backbone="desk_cnn", input_shape=(16, 16, 3), desk_widths=(4, 8, 8, 8))


def _desk(seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    model = build_classifier(DESK).to(dtype)
    # give batch norm non-trivial running statistics
    for m in model.modules():
        if isinstance(m, nn.BatchNorm2d):
            m.running_mean.uniform_(-0.2, 0.2)
            m.running_var.uniform_(0.5, 1.5)
    return model.eval()


def _img(seed=0, size=16):
    return Image(np.random.default_rng(seed).random((size, size, 3)))


class TwoLayer(nn.Module):
    """x (flattened) -> W1 -> ReLU -> W2 -> logits."""

    def __init__(self, w1, w2, relu=ReLU):
        super().__init__()
        self.l1 = nn.Linear(w1.shape[1], w1.shape[0], bias=False).double()
        self.l2 = nn.Linear(w2.shape[1], w2.shape[0], bias=False).double()
        with torch.no_grad():
            self.l1.weight.copy_(torch.from_numpy(w1))
            self.l2.weight.copy_(torch.from_numpy(w2))
        self.act = relu()

    def forward(self, x):
        return self.l2(self.act(self.l1(x.flatten(1))))


def test_guided_backprop_matches_hand_computed_two_layer_oracle():
    rng = np.random.default_rng(3)
    w1 = rng.normal(size=(6, 12))
    w2 = rng.normal(size=(2, 6))
    img = Image(rng.random((2, 2, 3)))
    x = img.pixels.transpose(2, 0, 1).ravel()  # the model flattens C×H×W
    pre = w1 @ x
    g = w2[1].copy()  # d logit_1 / d hidden
    g_in = np.where((pre > 0) & (g > 0), g, 0.0)
    expected = (w1.T @ g_in).reshape(3, 2, 2).transpose(1, 2, 0)
    got = guided_backprop(TwoLayer(w1, w2), img, 1).values
    np.testing.assert_allclose(got, expected, atol=1e-12)
    # the plain gradient differs whenever a negative gradient is suppressed
    plain = (w1.T @ np.where(pre > 0, g, 0.0)).reshape(3, 2, 2).transpose(1, 2, 0)
    if ((pre > 0) & (g < 0)).any():
        assert not np.allclose(got, plain)


def test_guided_backprop_requires_package_relu():
    rng = np.random.default_rng(0)
    model = TwoLayer(rng.normal(size=(3, 12)), rng.normal(size=(2, 3)), relu=nn.ReLU)
    with pytest.raises(UnsupportedModelError):
        guided_backprop(model, Image(rng.random((2, 2, 3))), 0)


def test_guided_backprop_does_not_leak_guided_mode():
    model = _desk()
    guided_backprop(model, _img(), 0)
    x = torch.from_numpy(_img().pixels.transpose(2, 0, 1)[None].copy()).requires_grad_(True)
    model(x)[0, 0].backward()
    ref = x.grad.clone()
    x.grad = None
    model(x)[0, 0].backward()
    assert torch.equal(ref, x.grad)


def test_grad_cam_from_activations_oracle():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(3, 4, 5))
    grads = rng.normal(size=(3, 4, 5))
    beta = grads.mean(axis=(1, 2))
    expected = np.maximum(sum(beta[a] * feats[a] for a in range(3)), 0)
    np.testing.assert_allclose(grad_cam_from_activations(feats, grads), expected, atol=1e-12)
    up = grad_cam_from_activations(feats, grads, (8, 10))
    assert up.shape == (8, 10) and up.min() >= 0


def test_grad_cam_matches_manual_hook_computation():
    model = _desk()
    img = _img(2)
    cam = grad_cam(model, img, 3)
    acts = {}
    layer = dict(model.named_modules())["features.stage4"]
    h = layer.register_forward_hook(lambda m, i, o: acts.setdefault("a", o))
    x = torch.from_numpy(img.pixels.transpose(2, 0, 1)[None].copy())
    out = model(x)
    h.remove()
    (g,) = torch.autograd.grad(out[0, 3], acts["a"])
    expected = grad_cam_from_activations(acts["a"][0].detach().numpy(), g[0].numpy(), (16, 16))
    np.testing.assert_allclose(cam.values, expected, atol=1e-12)
    assert cam.values.shape == (16, 16) and cam.values.min() >= 0


def test_grad_cam_unknown_layer():
    with pytest.raises(ValidationError):
        grad_cam(_desk(), _img(), 0, layer="features.nope")


def test_guided_grad_cam_is_exact_product():
    model = _desk()
    img = _img(4)
    ggc = guided_grad_cam(model, img, 2)
    expected = grad_cam(model, img, 2).values[:, :, None] * guided_backprop(model, img, 2).values
    assert np.array_equal(ggc.values, expected)


def test_integrated_gradients_exact_on_linear_probe():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(2, 27))
    probe = nn.Linear(27, 2).double()
    with torch.no_grad():
        probe.weight.copy_(torch.from_numpy(w))
    model = nn.Sequential(nn.Flatten(), probe)
    img = Image(rng.random((3, 3, 3)))
    base = Image(np.full((3, 3, 3), 0.5))
    ig = integrated_gradients(model, img, 1, base, steps=16)
    expected = ((img.pixels - 0.5).transpose(2, 0, 1).ravel() * w[1]).reshape(3, 3, 3).transpose(1, 2, 0)
    np.testing.assert_allclose(ig.values, expected, atol=1e-14)


def test_integrated_gradients_completeness_on_desk_model():
    model = _desk()
    img = _img(6)
    ig = integrated_gradients(model, img, 0, steps=128)
    x = torch.from_numpy(img.pixels.transpose(2, 0, 1)[None].copy())
    with torch.no_grad():
        delta = (model(x)[0, 0] - model(torch.zeros_like(x))[0, 0]).item()
    assert abs(ig.values.sum() - delta) <= 0.05 * abs(delta)


def test_integrated_gradients_validation():
    with pytest.raises(ValidationError):
        integrated_gradients(_desk(), _img(), 0, steps=4)
    with pytest.raises(ValidationError):
        integrated_gradients(_desk(), _img(), 0, baseline=Image(np.zeros((8, 8, 3))))


def test_rank_regions_admits_by_density():
    labels = np.zeros((4, 4), dtype=int)
    labels[:, 2:] = 1
    labels[3, :] = 2
    seg = SegmentMap(labels, 3)
    attr = np.zeros((4, 4))
    attr[:3, 2:] = 1.0  # region 1 is the densest
    attr[3, :] = 0.5
    score, order = rank_regions(attr, [seg])
    assert order == [1, 2, 0]
    assert score[:3, 2:].min() > score[3].max() and score[3].min() > score[:3, :2].max()


def test_rank_regions_overlapping_segmentations_cover_everything_once():
    rng = np.random.default_rng(0)
    segs = [SegmentMap(rng.integers(0, k, (6, 6)), k) for k in (2, 3)]
    # relabel so every id is used
    segs = [SegmentMap(np.unique(s.labels, return_inverse=True)[1].reshape(6, 6),
                       len(np.unique(s.labels))) for s in segs]
    attr = rng.random((6, 6))
    score, order = rank_regions(attr, segs)
    assert score.min() >= 1 and np.isfinite(score).all()
    assert len(order) == len(set(order))
    # every step's score level marks a disjoint set of pixels
    assert len(np.unique(score)) == len(order)
    assert rank_regions(attr, segs)[1] == order


def test_top_fraction_mask_sizes_and_nesting():
    attr = AttributionMap(np.random.default_rng(0).random((20, 30)), "random", 0)
    masks = [top_fraction_mask(attr, f) for f in (0.05, 0.1, 0.2, 1.0)]
    assert [m.positive_count for m in masks] == [30, 60, 120, 600]
    for small, big in zip(masks, masks[1:]):
        assert not (small.pixels & ~big.pixels).any()
    with pytest.raises(ValidationError):
        top_fraction_mask(attr, 0.0)


def test_top_fraction_mask_breaks_ties_with_pixel_scores_then_raster():
    primary = np.ones((2, 3))
    secondary = np.array([[0.1, 0.9, 0.2], [0.3, 0.9, 0.0]])
    m = top_fraction_mask(AttributionMap(primary, "xrai", 0, pixel_scores=secondary), 2 / 6)
    assert m.pixels.tolist() == [[False, True, False], [False, True, False]]
    flat = top_fraction_mask(AttributionMap(primary, "x", 0), 0.5)
    assert flat.pixels.ravel().tolist() == [True, True, True, False, False, False]


def test_xrai_returns_ranked_map_with_pixel_scores():
    params = XraiParams(ig_steps=8, scales=(50, 200), min_size=8)
    att = xrai(_desk(), _img(7), 1, params)
    assert att.values.shape == (16, 16) and att.pixel_scores.shape == (16, 16)
    assert att.values.min() >= 1
    again = xrai(_desk(), _img(7), 1, params)
    assert np.array_equal(att.values, again.values)


def test_explain_dispatch_and_aliases():
    model, img = _desk(), _img()
    assert explain(model, img, 0, "gb").method == "guided_backprop"
    assert explain(model, img, 0, "gradcam").method == "grad_cam"
    assert explain(model, img, 0, "ggc").method == "guided_grad_cam"
    assert explain(model, img, 0, "ig", XraiParams(ig_steps=8)).method == "integrated_gradients"
    r = explain(model, img, 0, "random", seed=3)
    assert np.array_equal(r.values, explain(model, img, 0, "random", seed=3).values)
    with pytest.raises(ValidationError):
        explain(model, img, 0, "lime")


def test_attribution_map_rejects_nan():
    with pytest.raises(ValidationError):
        AttributionMap(np.array([[math.nan]]), "x", 0)


def test_xrai_params_validation():
    with pytest.raises(ValidationError):
        XraiParams(baselines=("black",))
    with pytest.raises(ValidationError):
        XraiParams(ig_steps=2)
