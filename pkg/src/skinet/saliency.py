"""Gradient-based attribution: Guided Backprop, Grad-CAM, Guided Grad-CAM,
Integrated Gradients and XRAI region ranking.

Every explainer differentiates the pre-softmax logit of the target class and
runs the model in inference mode (batch-norm running statistics, dropout off).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import sparse
from torch import nn
from torch.nn import functional as F

from .core import BinaryMask, Image, ValidationError
from .felzenszwalb import SegmentMap, felzenszwalb_segments
from .layers import guided_relu, has_guided_relu

METHODS = ("guided_backprop", "grad_cam", "guided_grad_cam", "integrated_gradients", "xrai", "random")


class UnsupportedModelError(ValueError):
    pass


@dataclass(frozen=True)
class AttributionMap:
    values: np.ndarray  # H×W or H×W×C
    method: str
    target_class: int
    pixel_scores: np.ndarray | None = None  # XRAI only: per-pixel IG used to truncate the last region

    def __post_init__(self):
        if not np.isfinite(self.values).all():
            raise ValidationError(f"{self.method} attribution contains non-finite values")

    def scores(self) -> np.ndarray:
        """H×W ranking scores; channel maps collapse to the per-pixel absolute sum."""
        v = self.values
        return np.abs(v).sum(axis=2) if v.ndim == 3 else v


@dataclass(frozen=True)
class XraiParams:
    ig_steps: int = 50
    baselines: tuple[str, ...] = ("black", "white")
    scales: tuple[float, ...] = (50, 100, 150, 250, 500, 1200)
    sigma: float = 0.8
    min_size: int = 150
    batch_size: int = 32

    def __post_init__(self):
        if self.ig_steps < 8:
            raise ValidationError(f"ig_steps must be >= 8, got {self.ig_steps}")
        if set(self.baselines) != {"black", "white"}:
            raise ValidationError("XRAI uses both the black and the white baseline")
        if not self.scales:
            raise ValidationError("at least one segmentation scale is required")


# --------------------------------------------------------------------------- helpers


def _dtype(model: nn.Module):
    for p in model.parameters():
        return p.dtype
    return torch.float64


def _input_tensor(img, dtype) -> torch.Tensor:
    px = img.pixels if isinstance(img, Image) else np.asarray(img)
    return torch.from_numpy(np.ascontiguousarray(px.transpose(2, 0, 1)))[None].to(dtype)


def _to_hwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().double().numpy().transpose(0, 2, 3, 1)


class _InferenceMode:
    """Temporarily put a model in eval mode, restoring its previous mode after."""

    def __init__(self, model):
        self.model = model

    def __enter__(self):
        self.was_training = self.model.training
        self.model.eval()

    def __exit__(self, *exc):
        self.model.train(self.was_training)


def input_gradients(model: nn.Module, x: torch.Tensor, target: int) -> torch.Tensor:
    """d(logit_target)/d(input) for every row of ``x``."""
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        logits = model(x)
        (grad,) = torch.autograd.grad(logits[:, target].sum(), x)
    return grad


# --------------------------------------------------------------------------- guided backprop


def guided_backprop(model: nn.Module, img, target: int) -> AttributionMap:
    if not has_guided_relu(model):
        raise UnsupportedModelError("guided backprop needs a model built from skinet.layers.ReLU units")
    with _InferenceMode(model), guided_relu():
        grad = input_gradients(model, _input_tensor(img, _dtype(model)), target)
    return AttributionMap(_to_hwc(grad)[0], "guided_backprop", target)


# --------------------------------------------------------------------------- grad-cam


def grad_cam_from_activations(features: np.ndarray, grads: np.ndarray, out_size=None) -> np.ndarray:
    """ReLU(Σ_a β_a F_a) with β_a the spatial mean of the gradient on map a.

    ``features`` and ``grads`` are A×h×w; the heatmap is bilinearly upsampled to
    ``out_size`` (rows, cols) when given.
    """
    features = np.asarray(features, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    beta = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(beta, features, axes=1), 0.0)
    if out_size is not None and tuple(out_size) != cam.shape:
        t = torch.from_numpy(cam)[None, None]
        cam = F.interpolate(t, size=tuple(out_size), mode="bilinear", align_corners=False)[0, 0].numpy()
        cam = np.maximum(cam, 0.0)
    return cam


def _find_layer(model: nn.Module, layer: str | None) -> nn.Module:
    name = layer or getattr(model, "default_cam_layer", None)
    if name is None:
        convs = [n for n, m in model.named_modules() if isinstance(m, nn.Conv2d)]
        if not convs:
            raise ValidationError("model has no convolutional layer for Grad-CAM")
        name = convs[-1]
    modules = dict(model.named_modules())
    if name not in modules:
        raise ValidationError(f"unknown layer {name!r}")
    return modules[name]


def grad_cam(model: nn.Module, img, target: int, layer: str | None = None) -> AttributionMap:
    module = _find_layer(model, layer)
    captured = {}

    def hook(_m, _inp, out):
        out.retain_grad()
        captured["act"] = out

    x = _input_tensor(img, _dtype(model))
    handle = module.register_forward_hook(hook)
    try:
        with _InferenceMode(model), torch.enable_grad():
            logits = model(x)
            logits[0, target].backward()
    finally:
        handle.remove()
    act = captured["act"]
    if act.grad is None:
        # the target logit does not depend on this layer
        grads = np.zeros(act.shape[1:])
    else:
        grads = act.grad[0].double().numpy()
    cam = grad_cam_from_activations(act[0].detach().double().numpy(), grads, x.shape[2:])
    return AttributionMap(cam, "grad_cam", target)


def guided_grad_cam(model: nn.Module, img, target: int, layer: str | None = None) -> AttributionMap:
    cam = grad_cam(model, img, target, layer)
    gb = guided_backprop(model, img, target)
    return AttributionMap(cam.values[:, :, None] * gb.values, "guided_grad_cam", target)


# --------------------------------------------------------------------------- integrated gradients


def integrated_gradients(model: nn.Module, img, target: int, baseline=None, steps: int = 50,
                         batch_size: int = 32) -> AttributionMap:
    """(x − baseline) ⊙ path-averaged gradient, midpoint rule with ``steps`` nodes."""
    if steps < 8:
        raise ValidationError(f"steps must be >= 8, got {steps}")
    dtype = _dtype(model)
    x = _input_tensor(img, dtype)
    if baseline is None:
        b = torch.zeros_like(x)
    else:
        b = _input_tensor(baseline, dtype)
        if b.shape != x.shape:
            raise ValidationError(f"baseline shape {tuple(b.shape)} does not match input {tuple(x.shape)}")
    diff = x - b
    alphas = (torch.arange(steps, dtype=torch.float64) + 0.5) / steps
    total = torch.zeros_like(x, dtype=torch.float64)
    with _InferenceMode(model):
        for start in range(0, steps, batch_size):
            a = alphas[start : start + batch_size].to(dtype)[:, None, None, None]
            grads = input_gradients(model, b + a * diff, target)
            total += grads.double().sum(dim=0, keepdim=True)
    attr = diff.double() * total / steps
    return AttributionMap(_to_hwc(attr)[0], "integrated_gradients", target)


def baseline_image(kind: str, shape) -> Image:
    if kind == "black":
        return Image(np.zeros(shape))
    if kind == "white":
        return Image(np.ones(shape))
    raise ValidationError(f"unknown baseline {kind!r}")


# --------------------------------------------------------------------------- xrai


def xrai_segments(img, params: XraiParams) -> list[SegmentMap]:
    return [felzenszwalb_segments(img, s, params.sigma, params.min_size) for s in params.scales]


def rank_regions(pixel_attr: np.ndarray, segmentations) -> tuple[np.ndarray, list[int]]:
    """Greedy region admission by attribution density.

    Candidate regions are all segments of all segmentations. At each step the
    region with the highest mean attribution over its not-yet-covered pixels
    is admitted (first candidate wins ties). Returns an H×W score map where
    earlier admission means a higher score, and the admission order.
    """
    H, W = pixel_attr.shape
    P = H * W
    rows, cols = [], []
    offset = 0
    for seg in segmentations:
        flat = seg.labels.ravel()
        rows.append(flat + offset)
        cols.append(np.arange(P))
        offset += seg.region_count
    A = sparse.csr_matrix(
        (np.ones(P * len(segmentations)), (np.concatenate(rows), np.concatenate(cols))), shape=(offset, P)
    )
    attr = pixel_attr.ravel().astype(np.float64)
    uncovered = np.ones(P, dtype=bool)
    alive = np.ones(offset, dtype=bool)
    score = np.zeros(P)
    order: list[int] = []
    while uncovered.any():
        new_counts = A @ uncovered.astype(np.float64)
        new_sums = A @ np.where(uncovered, attr, 0.0)
        alive &= new_counts > 0
        density = np.full(offset, -np.inf)
        density[alive] = new_sums[alive] / new_counts[alive]
        best = int(np.argmax(density))
        order.append(best)
        added = uncovered & (A.getrow(best).toarray()[0] > 0)
        score[added] = -len(order)
        uncovered &= ~added
        alive[best] = False
    # map admission steps to positive scores: first region highest
    score = score + len(order) + 1
    return score.reshape(H, W), order


def xrai(model: nn.Module, img, target: int, params: XraiParams = XraiParams()) -> AttributionMap:
    shape = img.shape if isinstance(img, Image) else np.asarray(img).shape
    maps = [
        integrated_gradients(model, img, target, baseline_image(b, shape), params.ig_steps, params.batch_size).values
        for b in params.baselines
    ]
    pixel_attr = np.mean(maps, axis=0).sum(axis=2)
    rank, _ = rank_regions(pixel_attr, xrai_segments(img, params))
    return AttributionMap(rank, "xrai", target, pixel_scores=pixel_attr)


# --------------------------------------------------------------------------- selection


def random_attribution(shape, seed: int = 0, target: int = -1) -> AttributionMap:
    return AttributionMap(np.random.default_rng(seed).random(shape[:2]), "random", target)


def top_fraction_mask(attr: AttributionMap, fraction: float) -> BinaryMask:
    """The ⌈fraction·H·W⌉ highest-scoring pixels.

    Ties in the primary score are broken by ``pixel_scores`` when present (so an
    XRAI region that overflows the budget keeps its strongest pixels), then by
    raster index, giving one total order and hence nested masks.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"fraction must be in (0, 1], got {fraction}")
    primary = attr.scores()
    H, W = primary.shape
    n = H * W
    k = min(n, math.ceil(fraction * n - 1e-9))
    secondary = attr.pixel_scores if attr.pixel_scores is not None else np.zeros_like(primary)
    order = np.lexsort((np.arange(n), -secondary.ravel(), -primary.ravel()))
    mask = np.zeros(n, dtype=bool)
    mask[order[:k]] = True
    return BinaryMask(mask.reshape(H, W))


def explain(model: nn.Module, img, target: int, method: str, params: XraiParams = XraiParams(),
            seed: int = 0, layer: str | None = None) -> AttributionMap:
    """Dispatch by method name (short CLI aliases gb/gradcam/ggc/ig accepted)."""
    method = {"gb": "guided_backprop", "gradcam": "grad_cam", "ggc": "guided_grad_cam",
              "ig": "integrated_gradients"}.get(method, method)
    if method == "guided_backprop":
        return guided_backprop(model, img, target)
    if method == "grad_cam":
        return grad_cam(model, img, target, layer)
    if method == "guided_grad_cam":
        return guided_grad_cam(model, img, target, layer)
    if method == "integrated_gradients":
        return integrated_gradients(model, img, target, None, params.ig_steps, params.batch_size)
    if method == "xrai":
        return xrai(model, img, target, params)
    if method == "random":
        shape = img.shape if isinstance(img, Image) else np.asarray(img).shape
        return random_attribution(shape, seed, target)
    raise ValidationError(f"unknown explainer {method!r}; expected one of {METHODS}")
