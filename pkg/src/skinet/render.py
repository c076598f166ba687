"""PNG artifacts for reports: heatmaps, overlays and posterior bar charts."""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import LinearSegmentedColormap  # noqa: E402
from PIL import Image as PILImage  # noqa: E402

from .checkpoint import atomic_write_bytes  # noqa: E402

OVERLAY_ALPHA = 0.45
UNCERTAINTY_CMAP = LinearSegmentedColormap.from_list("uncertainty", ["#000000", "#3fb6c8", "#b8f3ff"])


def minmax(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 3:
        v = np.abs(v).sum(axis=2)
    lo, hi = v.min(), v.max()
    return np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)


def _png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _to_rgb8(pixels: np.ndarray) -> np.ndarray:
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim == 2:
        px = px[:, :, None]
    if px.shape[2] == 1:
        px = np.repeat(px, 3, axis=2)
    return np.round(np.clip(px, 0, 1) * 255).astype(np.uint8)


def save_heatmap(values: np.ndarray, path) -> Path:
    """Single-channel PNG, min-max scaled to 0-255."""
    atomic_write_bytes(path, _png_bytes(np.round(minmax(values) * 255).astype(np.uint8)))
    return Path(path)


def overlay(image: np.ndarray, values: np.ndarray, cmap="jet", alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    cm = plt.get_cmap(cmap) if isinstance(cmap, str) else cmap
    heat = cm(minmax(values))[:, :, :3]
    base = _to_rgb8(image).astype(np.float64) / 255
    return _to_rgb8((1 - alpha) * base + alpha * heat)


def save_overlay(image, values, path, cmap="jet") -> Path:
    atomic_write_bytes(path, _png_bytes(overlay(image, values, cmap)))
    return Path(path)


def save_uncertainty_map(entropy_map: np.ndarray, path) -> Path:
    rgb = UNCERTAINTY_CMAP(np.clip(entropy_map / np.log(2), 0, 1))[:, :, :3]
    atomic_write_bytes(path, _png_bytes(_to_rgb8(rgb)))
    return Path(path)


def save_mask_overlay(image, mask: np.ndarray, path) -> Path:
    base = _to_rgb8(image).astype(np.float64) / 255
    tint = np.array([0.1, 0.9, 0.2])
    out = np.where(mask[:, :, None], (1 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * tint, base)
    atomic_write_bytes(path, _png_bytes(_to_rgb8(out)))
    return Path(path)


def save_posterior_chart(probs, labels, path, highlight: int | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3), dpi=100)
    colors = ["#9e9e9e"] * len(labels)
    if highlight is not None:
        colors[highlight] = "#2e7d32"
    ax.bar(range(len(labels)), probs, color=colors)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels)
    ax.set_ylim(0, 1)
    ax.set_ylabel("posterior")
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())
    return Path(path)
