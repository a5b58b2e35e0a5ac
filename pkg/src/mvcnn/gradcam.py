"""Grad-CAM heatmaps over a conv layer, and overlay rendering."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .data import resize_bilinear
from .errors import ConfigurationError, DimensionError, ParameterError
from .model import Model, backward, forward
from .views import ViewStack


@dataclass
class HeatMap:
    raw: np.ndarray  # (h', w') at the target layer's resolution, >= 0
    upsampled: np.ndarray  # (H, W) in [0, 1]
    target_class: int
    layer_name: str


def _upsample(field: np.ndarray, h: int, w: int) -> np.ndarray:
    if field.shape == (h, w):
        return field.copy()
    if min(field.shape) < 2:
        # a single row or column has nothing to interpolate between
        field = np.repeat(np.repeat(field, 2 if field.shape[0] < 2 else 1, 0), 2 if field.shape[1] < 2 else 1, 1)
    return resize_bilinear(field, h, w)


def gradcam(model: Model, stack, target_class: int, layer: Optional[str] = None) -> HeatMap:
    """Class activation map for ``target_class`` at conv ``layer`` (default: the last conv).

    Uses the gradient of the pre-softmax logit, averaged spatially per channel,
    to weight the layer's post-ReLU activations.
    """
    data = stack.data if isinstance(stack, ViewStack) else np.asarray(stack)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4 or data.shape[0] != 1:
        raise DimensionError(f"gradcam takes one (c, h, w) stack, got shape {data.shape}")
    k = model.config.class_count
    if not 0 <= target_class < k:
        raise ParameterError(f"target_class {target_class} outside [0, {k})")
    if layer is None:
        layer = model.conv_layers[-1][0].name
    spec, _ = model.layer(layer)
    if spec.kind != "conv":
        raise ConfigurationError(f"layer {layer!r} is not a conv layer")

    _, cache = forward(model, data, "infer")
    seed = np.zeros((1, k), dtype=cache.logits.dtype)
    seed[0, target_class] = 1.0
    _, act_grads = backward(model, cache, seed)
    acts = cache.activations[layer][0]
    alpha = act_grads[layer][0].mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(alpha, acts, axes=1), 0.0)
    up = np.maximum(_upsample(raw.astype(np.float64), *data.shape[2:]), 0.0)
    peak = up.max()
    up = up / peak if peak > 0 else np.zeros_like(up)
    return HeatMap(raw, up, target_class, layer)


def _build_colormap() -> np.ndarray:
    t = np.linspace(0.0, 1.0, 256)
    lut = np.zeros((256, 3))
    lo = t < 0.5
    lut[lo] = np.stack([np.zeros(lo.sum()), 2 * t[lo], 1 - 2 * t[lo]], axis=1)
    hi = ~lo
    lut[hi] = np.stack([2 * t[hi] - 1, 2 - 2 * t[hi], np.zeros(hi.sum())], axis=1)
    return lut


# 256 entries, blue (0) -> green (127/128) -> red (255), linear between
COLORMAP = _build_colormap()


def colorize(heat: np.ndarray) -> np.ndarray:
    idx = np.clip(np.rint(np.asarray(heat) * 255), 0, 255).astype(np.int64)
    return COLORMAP[idx]


def overlay(heatmap, rgb: np.ndarray, alpha: float = 0.4) -> np.ndarray:
    """Blend ``(1 - alpha) * rgb + alpha * colormap(heat)``; only RGB is used."""
    if not 0 <= alpha <= 1:
        raise ParameterError(f"alpha must be in [0, 1], got {alpha}")
    heat = heatmap.upsampled if isinstance(heatmap, HeatMap) else np.asarray(heatmap)
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] < 3:
        raise DimensionError(f"expected an H x W x 3 image, got shape {rgb.shape}")
    rgb = rgb[..., :3]
    if heat.shape != rgb.shape[:2]:
        raise DimensionError(f"heatmap {heat.shape} and image {rgb.shape[:2]} differ in size")
    if alpha == 0:
        return rgb.copy()
    out = (1.0 - alpha) * rgb.astype(np.float64) + alpha * colorize(heat)
    return np.clip(out, 0.0, 1.0).astype(rgb.dtype)


def save_png(rgb: np.ndarray, path: "str | Path") -> None:
    arr = np.clip(np.rint(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)
