"""Post-processing against the diffusion color-averaging drift, plus the
desk-scale diagnostics that demonstrate why it is needed.

Order of operations is fixed: grayscale -> bilateral smoothing -> optional
contrast stretch -> extreme-brightness binarization.  Binarizing last
guarantees the output histogram holds no pixels strictly between the
threshold and white.  Only the bright side is binarized; dark stroke weight
stays continuous.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .ddim import NoiseSchedule
from .errors import DimensionMismatchError, MixsaError
from .images import ImageBuffer, pixels_to_signal, quantize, to_grayscale

DEFAULT_BINARIZE_THRESHOLD = 230

ToyDenoiser = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class BilateralParams:
    enabled: bool = True
    spatial_sigma: float = 2.0
    range_sigma: float = 25.0


@dataclass(frozen=True)
class ContrastParams:
    enabled: bool = False
    strength: float = 0.5


@dataclass(frozen=True)
class RcdParams:
    binarize_threshold: int = DEFAULT_BINARIZE_THRESHOLD
    white_value: int = 255
    bilateral: BilateralParams = field(default_factory=BilateralParams)
    contrast: ContrastParams = field(default_factory=ContrastParams)

    def __post_init__(self):
        if not 1 <= self.binarize_threshold <= 254:
            raise MixsaError(f"binarize_threshold must be in [1, 254], got {self.binarize_threshold}")


def _require_grayscale(img: ImageBuffer, op: str) -> np.ndarray:
    if not img.is_grayscale():
        raise DimensionMismatchError(f"{op} expects a grayscale image")
    return img.pixels


def binarize_extremes(img: ImageBuffer, p: RcdParams) -> ImageBuffer:
    """Pixels brighter than the threshold snap to white; the rest stay put."""
    px = _require_grayscale(img, "binarize_extremes")
    return ImageBuffer(np.where(px > p.binarize_threshold, np.uint8(p.white_value), px))


def bilateral_smooth(img: ImageBuffer, p: RcdParams) -> ImageBuffer:
    """Edge-preserving smoothing; identity when disabled, and constant images
    are exact fixed points."""
    px = _require_grayscale(img, "bilateral_smooth").astype(np.float64)
    if not p.bilateral.enabled:
        return img
    sigma_s, sigma_r = p.bilateral.spatial_sigma, p.bilateral.range_sigma
    radius = max(1, int(np.ceil(2.0 * sigma_s)))
    padded = np.pad(px, radius, mode="edge")
    num = np.zeros_like(px)
    den = np.zeros_like(px)
    h, w = px.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = padded[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
            weight = np.exp(
                -(dy * dy + dx * dx) / (2.0 * sigma_s * sigma_s)
                - (shifted - px) ** 2 / (2.0 * sigma_r * sigma_r)
            )
            num += weight * shifted
            den += weight
    return ImageBuffer(quantize(num / den))


def contrast_stretch(img: ImageBuffer, p: RcdParams) -> ImageBuffer:
    """Percentile 1..99 linear stretch, blended in by ``strength``."""
    px = _require_grayscale(img, "contrast_stretch").astype(np.float64)
    if not p.contrast.enabled:
        return img
    lo, hi = np.percentile(px, [1.0, 99.0])
    if hi <= lo:
        return img
    stretched = np.clip((px - lo) / (hi - lo) * 255.0, 0.0, 255.0)
    s = min(max(p.contrast.strength, 0.0), 1.0)
    return ImageBuffer(quantize((1.0 - s) * px + s * stretched))


def apply_rcd(img: ImageBuffer, p: Optional[RcdParams] = None) -> ImageBuffer:
    p = p or RcdParams()
    out = to_grayscale(img)
    out = bilateral_smooth(out, p)
    out = contrast_stretch(out, p)
    return binarize_extremes(out, p)


def forward_noise(
    signal: np.ndarray, t: int, schedule: NoiseSchedule, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """One-shot forward noising: sqrt(abar_t) x + sqrt(1 - abar_t) eps."""
    abar = schedule.alpha_bars[t]
    eps = np.zeros_like(signal) if rng is None else rng.standard_normal(signal.shape)
    return np.sqrt(abar) * signal + np.sqrt(1.0 - abar) * eps


def mean_drift_diagnostic(
    start: ImageBuffer, steps: int, rng: Optional[np.random.Generator] = None
) -> list[float]:
    """Iterate x <- x/2 + eps/2 in signal space and report the mean per step.

    With the deterministic variant (rng None, eps = 0) the mean halves each
    step, converging geometrically to the mid-tone.
    """
    if steps < 1:
        raise MixsaError("steps must be >= 1")
    x = pixels_to_signal(to_grayscale(start))[0]
    means = []
    for _ in range(steps):
        eps = np.zeros_like(x) if rng is None else rng.standard_normal(x.shape)
        x = x / 2.0 + eps / 2.0
        means.append(float(x.mean()))
    return means


@dataclass(frozen=True)
class BandError:
    timestep: int
    high_band_error: float
    low_band_error: float


def _band_masks(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    fy = np.fft.fftfreq(shape[0])[:, None]
    fx = np.fft.fftfreq(shape[1])[None, :]
    radius = np.hypot(fy, fx)
    high = radius >= 0.25  # half of the Nyquist radius
    return high, ~high


def make_wiener_denoiser(clean_signal: np.ndarray, schedule: NoiseSchedule) -> ToyDenoiser:
    """Frequency-shrinkage toy denoiser built from the clean image's own
    power spectrum: bins carrying more signal power accumulate more
    reconstruction error as the noise level rises."""
    spectrum = np.fft.fft2(clean_signal, norm="ortho")
    power = np.abs(spectrum) ** 2

    def denoise(x_t: np.ndarray, t: int) -> np.ndarray:
        abar = schedule.alpha_bars[t]
        denom = abar * power + (1.0 - abar)
        gain = np.divide(
            np.sqrt(abar) * power, denom, out=np.zeros_like(power), where=denom > 0.0
        )
        return np.real(np.fft.ifft2(gain * np.fft.fft2(x_t, norm="ortho"), norm="ortho"))

    return denoise


def band_reconstruction_error(
    img: ImageBuffer,
    schedule: NoiseSchedule,
    toy_denoiser: Optional[ToyDenoiser] = None,
    timesteps: Optional[Sequence[int]] = None,
    rng: Optional[np.random.Generator] = None,
) -> list[BandError]:
    """Noise the image at each timestep, reconstruct with the toy denoiser,
    and split the reconstruction error into frequency half-bands."""
    px = to_grayscale(img).pixels
    if px.shape[0] != px.shape[1]:
        raise DimensionMismatchError("band diagnostic expects a square image")
    x0 = pixels_to_signal(to_grayscale(img))[0]
    if toy_denoiser is None:
        toy_denoiser = make_wiener_denoiser(x0, schedule)
    if timesteps is None:
        T = schedule.num_steps
        timesteps = sorted({max(1, T // 4), T // 2, 3 * T // 4, T})
    high_mask, low_mask = _band_masks(x0.shape)
    results = []
    for t in timesteps:
        x_t = forward_noise(x0, t, schedule, rng)
        err = toy_denoiser(x_t, t) - x0
        err_spec = np.abs(np.fft.fft2(err, norm="ortho")) ** 2
        results.append(
            BandError(
                timestep=int(t),
                high_band_error=float(err_spec[high_mask].mean()),
                low_band_error=float(err_spec[low_mask].mean()),
            )
        )
    return results
