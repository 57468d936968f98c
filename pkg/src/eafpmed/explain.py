"""Grad-CAM++, guided backpropagation and their product (CAM-GB).

Grad-CAM++ needs second and third derivatives of the class score Y with
respect to the target activations A. Treating Y as the exponential of the
logit S makes them powers of the first derivative g = dS/dA, so

    alpha = g^2 / (2 g^2 + sum_ab(A_ab) g^3)      (0 where the denominator is 0)
    w_c   = sum_ij alpha_ijc relu(g_ijc)
    map   = relu(sum_c w_c A_c)

The positive factor exp(S) is dropped; it disappears in the normalization.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import netpbm
from .data import resize_bilinear
from .model import ClassifierModel
from .tensor import Tensor, backward, guided_backprop as guided_mode, pick


@dataclass
class CamResult:
    heatmap: np.ndarray  # (H, W), values in [0, 1]
    category: int
    layer: str


def normalize(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; an all-zero input stays all zero."""
    v = np.nan_to_num(np.asarray(values, dtype=np.float64), nan=0.0, posinf=0.0, neginf=0.0)
    lo, hi = float(v.min()), float(v.max())
    if hi - lo > 0:
        return (v - lo) / (hi - lo)
    if hi > 0:
        return np.ones_like(v)
    return np.zeros_like(v)


def _batch(image) -> np.ndarray:
    x = np.asarray(image, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"expected one image shaped (C, H, W), got {np.shape(image)}")
    return x


def _clear_grads(model: ClassifierModel) -> None:
    params = model.backbone.parameters() + (model.eafp.parameters() if model.eafp is not None else [])
    for p in params:
        p.grad = None


def campp_weights(activations: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Per-channel Grad-CAM++ weights for (C, h, w) activations and gradients."""
    a = activations.astype(np.float64)
    g = grads.astype(np.float64)
    g2 = g * g
    denom = 2 * g2 + a.sum(axis=(1, 2), keepdims=True) * g2 * g
    alpha = np.divide(g2, denom, out=np.zeros_like(g2), where=denom != 0)
    return (alpha * np.maximum(g, 0)).sum(axis=(1, 2))


def grad_campp(model: ClassifierModel, image, category: int, target_layer: str | None = None) -> CamResult:
    layer = target_layer or model.default_cam_layer
    x = _batch(image)
    model.eval()
    logits, acts = model.trace(Tensor(x))
    if layer not in acts:
        raise KeyError(f"unknown layer {layer!r}; available: {', '.join(acts)}")
    a = acts[layer]
    if a.ndim != 4 or a.shape[2] * a.shape[3] < 1:
        raise ValueError(f"layer {layer!r} has no spatial extent")
    if not 0 <= category < logits.shape[1]:
        raise IndexError(f"category {category} out of range")
    if not a.requires_grad:
        raise ValueError(f"layer {layer!r} is not connected to any trainable parameter")
    a.retain_grad()
    backward(pick(logits, category))
    grads = a.grad[0]
    _clear_grads(model)
    a.grad = None
    w = campp_weights(a.data[0], grads)
    raw = np.maximum(np.tensordot(w, a.data[0].astype(np.float64), axes=1), 0)
    h, wd = x.shape[2:]
    up = resize_bilinear(raw[None], h, wd)[0] if raw.shape != (h, wd) else raw
    return CamResult(normalize(np.maximum(up, 0)), category, layer)


def guided_backprop(model: ClassifierModel, image, category: int) -> np.ndarray:
    """Signed input gradient of one logit under the guided rectifier rule, (C, H, W)."""
    x = Tensor(_batch(image), requires_grad=True)
    model.eval()
    with guided_mode():
        logits = model(x)
        backward(pick(logits, category))
    _clear_grads(model)
    return x.grad[0].astype(np.float64)


def cam_gb(cam: CamResult | np.ndarray, gb: np.ndarray) -> np.ndarray:
    heat = cam.heatmap if isinstance(cam, CamResult) else np.asarray(cam, dtype=np.float64)
    gb = np.asarray(gb, dtype=np.float64)
    mag = np.abs(gb).sum(axis=0) if gb.ndim == 3 else np.abs(gb)
    if mag.shape != heat.shape:
        raise ValueError(f"heatmap {heat.shape} and gradient image {mag.shape} differ in size")
    return normalize(heat * mag)


def gb_gray(gb: np.ndarray) -> np.ndarray:
    """Signed gradient image as grayscale around 0.5, summed over channels."""
    g = np.asarray(gb, dtype=np.float64)
    if g.ndim == 3:
        g = g.sum(axis=0)
    m = np.abs(g).max()
    return np.full_like(g, 0.5) if m == 0 else 0.5 + 0.5 * g / m


def argmax_in_box(heatmap: np.ndarray, box) -> bool:
    r, c = np.unravel_index(int(np.argmax(heatmap)), heatmap.shape)
    r0, c0, r1, c1 = box
    return bool(r0 <= r <= r1 and c0 <= c <= c1)


# --------------------------------------------------------------------------
# rendering


def colormap(values) -> np.ndarray:
    """Piecewise-linear blue -> green -> red, returned as uint8 (..., 3)."""
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)) or v.min(initial=0) < 0 or v.max(initial=0) > 1:
        raise ValueError("heatmap values must lie in [0, 1]")
    lo = np.clip(2 * v, 0, 1)
    hi = np.clip(2 * v - 1, 0, 1)
    rgb = np.stack([hi, np.where(v <= 0.5, lo, 1 - hi), 1 - lo], axis=-1)
    return np.rint(rgb * 255).astype(np.uint8)


def render_heatmap(values, source=None, alpha: float = 0.5) -> np.ndarray:
    """Colour a [0, 1] map; with ``source`` (C, H, W) blend it over the image."""
    rgb = colormap(values).astype(np.float64)
    if source is not None:
        src = np.asarray(source, dtype=np.float64)
        if src.ndim == 3:
            src = np.moveaxis(src, 0, -1)
        if src.ndim == 2:
            src = src[..., None]
        if src.shape[:2] != rgb.shape[:2]:
            raise ValueError("overlay source and heatmap differ in size")
        if not 0 <= alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        base = np.broadcast_to(np.clip(src, 0, 1) * 255, rgb.shape)
        rgb = alpha * rgb + (1 - alpha) * base
    return np.rint(rgb).astype(np.uint8)


def write_heatmap(path: str | os.PathLike, values, source=None, alpha: float = 0.5) -> Path:
    return netpbm.write_u8(path, render_heatmap(values, source, alpha))


def write_gray(path: str | os.PathLike, values) -> Path:
    return netpbm.write(path, np.clip(np.asarray(values, dtype=np.float64), 0, 1))
