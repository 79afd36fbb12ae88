"""Airway lumen masks from rendered frames.

Under headlight shading the lumen — the region farthest from the camera —
is the darkest part of the image, so a simple intensity threshold
recovers it: a pixel belongs to the mask when its gray value is strictly
below the threshold. The threshold can be fixed or picked per-frame by
Otsu's method. Masks are boolean arrays, stored on disk as 8-bit PNGs
with 255 marking lumen.
"""

from __future__ import annotations

import logging

import numpy as np
from PIL import Image

from .errors import IngestionError, ParameterError

log = logging.getLogger(__name__)

LumenMask = np.ndarray  # boolean (H, W), True = lumen

DEFAULT_THRESHOLD = 0.15
_LUMA = (0.299, 0.587, 0.114)


def luminance(image: np.ndarray) -> np.ndarray:
    """Grayscale view of an image in [0, 1].

    Grayscale input passes through; RGB collapses with the classic luma
    weights 0.299/0.587/0.114.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] == 3:
        return arr @ np.array(_LUMA)
    raise ParameterError("image", f"expected (H, W) or (H, W, 3), got {arr.shape}")


def otsu_threshold(gray: np.ndarray) -> float:
    """Otsu's threshold on a 256-bin histogram of values in [0, 1].

    Returns the upper edge of the bin that maximizes between-class
    variance, so thresholding with strict ``<`` keeps the whole dark
    class. Degenerate (constant) images get their single value back.
    """
    g = np.clip(np.asarray(gray, dtype=np.float64), 0.0, 1.0)
    hist, edges = np.histogram(g, bins=256, range=(0.0, 1.0))
    total = hist.sum()
    if total == 0:
        raise ParameterError("gray", "cannot threshold an empty image")
    w = np.cumsum(hist)
    centers = (edges[:-1] + edges[1:]) / 2.0
    mass = np.cumsum(hist * centers)
    w0 = w[:-1]
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        return float(g.flat[0])
    mu0 = np.where(w0 > 0, mass[:-1] / np.maximum(w0, 1), 0.0)
    mu1 = np.where(w1 > 0, (mass[-1] - mass[:-1]) / np.maximum(w1, 1), 0.0)
    between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -1.0)
    k = int(np.argmax(between))
    return float(edges[k + 1])


def airway_mask(
    image: np.ndarray,
    threshold: float = DEFAULT_THRESHOLD,
    mode: str = "fixed",
) -> LumenMask:
    """Dark-region lumen mask: ``gray < threshold``, strictly.

    ``mode='otsu'`` ignores ``threshold`` and picks it per-frame. The mask
    is monotone in the threshold: a larger threshold never removes pixels.
    """
    gray = luminance(image)
    if mode == "otsu":
        threshold = otsu_threshold(gray)
    elif mode != "fixed":
        raise ParameterError("mode", "must be 'fixed' or 'otsu'")
    if not (0.0 <= threshold <= 1.0):
        raise ParameterError("threshold", "must be in [0, 1]")
    return gray < threshold


def save_mask(path, mask: LumenMask) -> None:
    """Write a boolean mask as an 8-bit PNG (lumen = 255)."""
    arr = np.asarray(mask)
    if arr.dtype != bool or arr.ndim != 2:
        raise ParameterError("mask", "expected a boolean (H, W) array")
    Image.fromarray(np.where(arr, 255, 0).astype(np.uint8), mode="L").save(path)


def load_external_mask(path, expected_shape: tuple[int, int] | None = None) -> LumenMask:
    """Read an 8-bit PNG mask: any nonzero pixel counts as lumen.

    ``expected_shape`` (H, W), when given, must match the stored mask —
    a silently resized mask would corrupt every region statistic downstream.
    """
    with Image.open(path) as im:
        if im.mode not in ("L", "1"):
            im = im.convert("L")
        arr = np.asarray(im)
    mask = arr > 0
    if expected_shape is not None and mask.shape != tuple(expected_shape):
        raise IngestionError(
            f"mask {path} has shape {mask.shape}, expected {tuple(expected_shape)}"
        )
    return mask


def mask_fraction(mask: LumenMask) -> float:
    """Fraction of pixels marked as lumen."""
    arr = np.asarray(mask)
    return float(arr.mean()) if arr.size else 0.0
