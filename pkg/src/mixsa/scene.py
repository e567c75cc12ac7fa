"""Foreground decomposition: salient-object masks and white compositing.

Masking runs on the color image before contour extraction and before
inversion, so both query banks see the foreground-only scene.  Saliency
models (U2-Net and friends) are adapters; a couple of deterministic mocks
ship for tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import AdapterError, DimensionMismatchError, DuplicateKeyError
from .images import ImageBuffer, quantize

SegmenterAdapter = Callable[[ImageBuffer], np.ndarray]


@dataclass(frozen=True)
class ForegroundMask:
    """Per-pixel foreground confidence in [0, 1], same size as the image."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise DimensionMismatchError(f"mask must be 2-D, got shape {vals.shape}")
        if vals.min() < 0.0 or vals.max() > 1.0:
            raise ValueError("mask values must lie in [0, 1]")
        object.__setattr__(self, "values", vals)

    def hardened(self, threshold: float = 0.5) -> "ForegroundMask":
        return ForegroundMask((self.values >= threshold).astype(np.float64))


_registry: dict[str, SegmenterAdapter] = {}


def register_segmenter(name: str, adapter: SegmenterAdapter) -> None:
    if name in _registry:
        raise DuplicateKeyError(f"segmenter {name!r} already registered")
    _registry[name] = adapter


def registered_segmenters() -> tuple[str, ...]:
    return tuple(sorted(_registry))


def segmenter_available(name: str) -> bool:
    return name in _registry


def extract_foreground_mask(img: ImageBuffer, adapter: str | SegmenterAdapter) -> ForegroundMask:
    if isinstance(adapter, str):
        fn = _registry.get(adapter)
        if fn is None:
            raise AdapterError(
                f"no segmenter named {adapter!r}; available: {', '.join(registered_segmenters()) or '(none)'}"
            )
    else:
        fn = adapter
    try:
        raw = np.asarray(fn(img), dtype=np.float64)
    except Exception as exc:
        raise AdapterError(f"segmenter failed: {exc}") from exc
    if raw.shape != (img.height, img.width):
        raise DimensionMismatchError(
            f"segmenter returned mask {raw.shape}, image is {(img.height, img.width)}"
        )
    return ForegroundMask(np.clip(raw, 0.0, 1.0))


def composite_on_white(img: ImageBuffer, mask: ForegroundMask) -> ImageBuffer:
    """out = mask * img + (1 - mask) * white, per channel."""
    if mask.values.shape != (img.height, img.width):
        raise DimensionMismatchError(
            f"mask {mask.values.shape} does not match image {(img.height, img.width)}"
        )
    m = mask.values if img.is_grayscale() else mask.values[:, :, None]
    blended = m * img.pixels.astype(np.float64) + (1.0 - m) * 255.0
    return ImageBuffer(quantize(blended))
