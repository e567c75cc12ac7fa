"""Initial-sketch extraction: edge detection with a sparsity control.

The built-in detector is a native Canny (Gaussian blur sigma=1.4, Sobel
gradients, non-maximum suppression, hysteresis).  The sparse-threshold alpha
maps linearly onto the hysteresis pair (low, high) = (alpha*0.4*255,
alpha*255) over the max-normalized gradient magnitude, so larger alpha always
means sparser strokes.  Learned detectors (teed, hed, ...) plug in as
adapters; they receive alpha as their confidence cutoff.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .errors import AdapterError, DuplicateKeyError, MixsaError
from .images import ImageBuffer, quantize, to_grayscale

DEFAULT_METHOD = "teed"
DEFAULT_ALPHA = 0.55

DetectorAdapter = Callable[[ImageBuffer, float], ImageBuffer]

_GAUSSIAN_SIGMA = 1.4
_STROKE_BLUR_SIGMA = 0.5
_STROKE_GAIN = 1.36  # soft stroke core of a 1-px line maps back to full darkness


@dataclass(frozen=True)
class ContourParams:
    method: str = DEFAULT_METHOD
    alpha: float = DEFAULT_ALPHA
    invert_polarity: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise MixsaError(f"alpha must lie in (0, 1), got {self.alpha}")


def _canny_edges(gray: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Binary edge map plus the max-normalized gradient magnitude (0..1)."""
    blurred = ndimage.gaussian_filter(gray.astype(np.float64), _GAUSSIAN_SIGMA)
    gx = ndimage.sobel(blurred, axis=1)
    gy = ndimage.sobel(blurred, axis=0)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0.0:
        return np.zeros_like(gray, dtype=bool), np.zeros_like(mag)
    mag_norm = mag / peak

    # Quantize gradient direction to 4 bins and suppress non-maxima along it.
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.floor((angle + np.pi / 8) / (np.pi / 4)).astype(int) % 4
    offsets = {0: (0, 1), 1: (-1, 1), 2: (-1, 0), 3: (-1, -1)}  # E, NE, N, NW
    padded = np.pad(mag_norm, 1, mode="constant")
    keep = np.zeros_like(mag_norm, dtype=bool)
    for b, (dy, dx) in offsets.items():
        sel = bins == b
        ahead = padded[1 + dy : padded.shape[0] - 1 + dy, 1 + dx : padded.shape[1] - 1 + dx]
        behind = padded[1 - dy : padded.shape[0] - 1 - dy, 1 - dx : padded.shape[1] - 1 - dx]
        keep |= sel & (mag_norm >= behind) & (mag_norm > ahead)
    nms = np.where(keep, mag_norm, 0.0)

    low, high = alpha * 0.4, alpha
    strong = nms >= high
    weak = nms >= low
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros_like(gray, dtype=bool), mag_norm
    anchored = np.zeros(n + 1, dtype=bool)
    anchored[np.unique(labels[strong])] = True
    anchored[0] = False
    return anchored[labels], mag_norm


def _canny_adapter(img: ImageBuffer, alpha: float) -> ImageBuffer:
    gray = to_grayscale(img).pixels
    edges, mag_norm = _canny_edges(gray, alpha)
    strength = edges * (0.35 + 0.65 * mag_norm)
    soft = np.clip(ndimage.gaussian_filter(strength, _STROKE_BLUR_SIGMA) * _STROKE_GAIN, 0.0, 1.0)
    return ImageBuffer(quantize(255.0 * (1.0 - soft)))


_BUILTIN: dict[str, DetectorAdapter] = {"canny": _canny_adapter}
_registry: dict[str, DetectorAdapter] = dict(_BUILTIN)


def register_detector(name: str, adapter: DetectorAdapter) -> None:
    if name in _registry:
        raise DuplicateKeyError(f"detector {name!r} already registered")
    _registry[name] = adapter


def registered_detectors() -> tuple[str, ...]:
    return tuple(sorted(_registry))


def detector_available(name: str) -> bool:
    return name in _registry


def extract_contours(img: ImageBuffer, p: Optional[ContourParams] = None) -> ImageBuffer:
    """Produce the initial sketch: dark strokes on a white background."""
    p = p or ContourParams()
    adapter = _registry.get(p.method)
    if adapter is None:
        raise AdapterError(
            f"no detector named {p.method!r}; available: {', '.join(registered_detectors())}"
        )
    try:
        out = adapter(img, p.alpha)
    except MixsaError:
        raise
    except Exception as exc:
        raise AdapterError(f"detector {p.method!r} failed: {exc}") from exc
    out = to_grayscale(out)
    if p.invert_polarity:
        out = invert_polarity(out)
    return out


def invert_polarity(img: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(255 - img.pixels)


def stroke_pixel_count(img: ImageBuffer) -> int:
    """Number of non-white pixels; the sparsity measure alpha controls."""
    return int(np.count_nonzero(to_grayscale(img).pixels < 255))
