"""8-bit image buffers, file I/O, and pixel/signal range conversions.

Pixels live in [0, 255]; the "signal" representation used by the diffusion
machinery maps that range linearly onto [-1, 1], so signal 0 sits at pixel
127.5.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionMismatchError

# ITU-R 601 luma weights.
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ImageBuffer:
    """A grayscale (H, W) or RGB (H, W, 3) array of uint8 pixels."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim not in (2, 3) or (px.ndim == 3 and px.shape[2] != 3):
            raise DimensionMismatchError(
                f"expected (H, W) or (H, W, 3) pixels, got shape {px.shape}"
            )
        if px.size == 0:
            raise DimensionMismatchError("empty image")
        if px.dtype != np.uint8:
            if px.min() < 0 or px.max() > 255:
                raise ValueError("pixel values outside [0, 255]")
            px = px.astype(np.uint8)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    def is_grayscale(self) -> bool:
        return self.pixels.ndim == 2


def to_grayscale(img: ImageBuffer) -> ImageBuffer:
    if img.is_grayscale():
        return img
    return ImageBuffer(quantize(img.pixels @ _LUMA))


def to_rgb(img: ImageBuffer) -> ImageBuffer:
    if not img.is_grayscale():
        return img
    return ImageBuffer(np.repeat(img.pixels[:, :, None], 3, axis=2))


def quantize(values: np.ndarray) -> np.ndarray:
    """Round half-up to uint8, clamping out-of-range values."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


def pixels_to_signal(img: ImageBuffer) -> np.ndarray:
    """Map [0, 255] pixels onto the [-1, 1] signal range, channel-first."""
    px = img.pixels.astype(np.float64) / 127.5 - 1.0
    if px.ndim == 2:
        return px[None, :, :]
    return np.moveaxis(px, 2, 0)


def signal_to_pixels(signal: np.ndarray) -> ImageBuffer:
    """Inverse of :func:`pixels_to_signal`; clamps decoder overshoot."""
    arr = np.asarray(signal, dtype=np.float64)
    if arr.ndim != 3:
        raise DimensionMismatchError(f"expected (C, H, W) signal, got shape {arr.shape}")
    px = (arr + 1.0) * 127.5
    if arr.shape[0] == 1:
        return ImageBuffer(quantize(px[0]))
    if arr.shape[0] == 3:
        return ImageBuffer(quantize(np.moveaxis(px, 0, 2)))
    raise DimensionMismatchError(f"cannot render {arr.shape[0]}-channel signal as an image")


def load_image(path: str | Path) -> ImageBuffer:
    """Read a PNG or JPEG file as grayscale or RGB."""
    with Image.open(path) as im:
        if im.mode in ("L", "1", "I;16", "I"):
            return ImageBuffer(np.asarray(im.convert("L")))
        return ImageBuffer(np.asarray(im.convert("RGB")))


def save_png(img: ImageBuffer, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img.pixels).save(path, format="PNG")


def png_bytes(img: ImageBuffer) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(img.pixels).save(buf, format="PNG")
    return buf.getvalue()


def center_crop_resize(img: ImageBuffer, size: int) -> ImageBuffer:
    """Center-crop to a square, then resize to size x size (bicubic)."""
    h, w = img.height, img.width
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    cropped = img.pixels[top : top + side, left : left + side]
    if side == size:
        return ImageBuffer(cropped)
    resized = Image.fromarray(cropped).resize((size, size), Image.BICUBIC)
    return ImageBuffer(np.asarray(resized))


def content_hash(img: ImageBuffer) -> str:
    import hashlib

    h = hashlib.sha256()
    h.update(str(img.pixels.shape).encode())
    h.update(img.pixels.tobytes())
    return h.hexdigest()
