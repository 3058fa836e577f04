"""Gradient saliency maps: per-pixel importance of an image for the
pre-sigmoid click score, for one specific impression context.

The gradient is taken at the raw score (not the probability); the two
differ only by the positive factor p*(1-p), which cannot change which
pixels dominate the map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import netpbm
from .model import DeepCtrNet
from .nn import Array
from .sparse import csr_from_arrays


@dataclass
class SaliencyMap:
    """Nonnegative per-pixel importance, with the impression context it
    was computed for."""

    values: Array  # (h, w), >= 0
    image_id: str
    impression_row: int


def input_gradient(net: DeepCtrNet, image: Array, basic_idx, basic_val) -> Array:
    """d(score)/d(image) at the given image, evaluated in eval mode
    (running BN statistics, no dropout) for one basic-feature row.

    Parameter gradients scribbled during the backward pass are zeroed
    before returning; only the image gradient is kept.
    """
    if image.shape != net.cfg.image_shape:
        raise ValueError(f"image {image.shape} != network input {net.cfg.image_shape}")
    feats = csr_from_arrays([np.asarray(basic_idx, dtype=np.int64)],
                            [np.asarray(basic_val, dtype=np.float64)],
                            dim=net.cfg.basic_dim)
    _, _, cache = net.forward(image[None], feats, k=1, mode="eval", rng=None)
    grad_images = net.backward(cache, np.ones(1), grad_mode="exact")
    net.zero_grads()
    return grad_images[0]


def saliency_from_gradient(w: Array) -> Array:
    """Per-pixel map: maximum absolute gradient across channels."""
    if w.ndim == 2:
        return np.abs(w)
    return np.abs(w).max(axis=0)


def compute_saliency(net: DeepCtrNet, image: Array, impression, image_id: str = "", row: int = -1) -> SaliencyMap:
    """Saliency of ``image`` for the click score under ``impression``'s
    basic features."""
    grad = input_gradient(net, image, impression.idx, impression.val)
    return SaliencyMap(values=saliency_from_gradient(grad), image_id=image_id or impression.image_id,
                       impression_row=row)


def export_heatmap(m: SaliencyMap, path) -> None:
    """Write the map as binary P5, linearly rescaled so the maximum maps
    to 255; an all-zero map produces all-zero bytes."""
    values = m.values
    if not np.all(np.isfinite(values)):
        raise ValueError("saliency map contains non-finite values")
    peak = values.max()
    if peak > 0:
        scaled = np.rint(values / peak * 255.0)
    else:
        scaled = np.zeros_like(values)
    netpbm.write_pgm(path, scaled.astype(np.uint8))
