"""Image-quality metrics: exact PSNR/SSIM, Fréchet and kernel distances over
pluggable feature extractors, and an adapter-based perceptual distance.

Feature-dependent metrics record their extractor id in every report so
numbers are never compared across silently different feature spaces.  A
deterministic mock extractor ships for weight-free testing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg, ndimage

from .errors import AdapterError, DimensionMismatchError
from .images import ImageBuffer, to_grayscale, to_rgb

PSNR_CAP_DB = 99.0

FeatureExtractor = Callable[[ImageBuffer], np.ndarray]
LayerExtractor = Callable[[ImageBuffer], Sequence[np.ndarray]]


def _check_same_size(a: ImageBuffer, b: ImageBuffer, op: str) -> None:
    if (a.height, a.width) != (b.height, b.width):
        raise DimensionMismatchError(
            f"{op}: image sizes differ ({a.height}x{a.width} vs {b.height}x{b.width})"
        )


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    """10 log10(255^2 / MSE), capped at 99 dB for identical images."""
    _check_same_size(a, b, "psnr")
    pa = to_rgb(a).pixels.astype(np.float64) if a.channels != b.channels else a.pixels.astype(np.float64)
    pb = to_rgb(b).pixels.astype(np.float64) if a.channels != b.channels else b.pixels.astype(np.float64)
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(255.0**2 / mse))


_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 5.0 / _SSIM_SIGMA  # 11x11 Gaussian window
_SSIM_K1, _SSIM_K2, _SSIM_L = 0.01, 0.03, 255.0


def ssim(a: ImageBuffer, b: ImageBuffer) -> float:
    """Mean local SSIM over an 11x11 Gaussian window, standard constants."""
    _check_same_size(a, b, "ssim")
    x = to_grayscale(a).pixels.astype(np.float64)
    y = to_grayscale(b).pixels.astype(np.float64)

    def smooth(arr):
        return ndimage.gaussian_filter(arr, _SSIM_SIGMA, truncate=_SSIM_TRUNCATE)

    c1 = (_SSIM_K1 * _SSIM_L) ** 2
    c2 = (_SSIM_K2 * _SSIM_L) ** 2
    mu_x, mu_y = smooth(x), smooth(y)
    var_x = smooth(x * x) - mu_x * mu_x
    var_y = smooth(y * y) - mu_y * mu_y
    cov = smooth(x * y) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    return float(ssim_map.mean())


def _gaussian_moments(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise DimensionMismatchError("feature sets need >= 2 vectors of equal dimension")
    return feats.mean(axis=0), np.cov(feats, rowvar=False)


def fid(feats_a: np.ndarray, feats_b: np.ndarray, jitter: float = 1e-6) -> float:
    """Fréchet distance between Gaussians fitted to the two feature sets.

    Singular covariances get a diagonal jitter; callers see this in the
    report notes via :func:`fid_with_notes`.
    """
    value, _ = fid_with_notes(feats_a, feats_b, jitter)
    return value


def fid_with_notes(feats_a: np.ndarray, feats_b: np.ndarray, jitter: float = 1e-6) -> tuple[float, list[str]]:
    import warnings

    mu_a, cov_a = _gaussian_moments(feats_a)
    mu_b, cov_b = _gaussian_moments(feats_b)
    if np.asarray(feats_a).shape[1] != np.asarray(feats_b).shape[1]:
        raise DimensionMismatchError("feature dimensions differ between sets")
    notes: list[str] = []
    diff = mu_a - mu_b
    with warnings.catch_warnings():
        # singular products make sqrtm grumble before we apply the jitter
        warnings.simplefilter("ignore", RuntimeWarning)
        covmean, _ = linalg.sqrtm(cov_a @ cov_b, disp=False)
        if not np.isfinite(covmean).all():
            notes.append(f"singular covariance; added diagonal jitter {jitter:g}")
            eye = jitter * np.eye(cov_a.shape[0])
            covmean, _ = linalg.sqrtm((cov_a + eye) @ (cov_b + eye), disp=False)
    covmean = np.real(covmean)
    value = float(diff @ diff + np.trace(cov_a + cov_b - 2.0 * covmean))
    return max(value, 0.0), notes


def kid(feats_a: np.ndarray, feats_b: np.ndarray, degree: int = 3) -> float:
    """Unbiased squared MMD with the polynomial kernel (x.y/d + 1)^degree."""
    x = np.asarray(feats_a, dtype=np.float64)
    y = np.asarray(feats_b, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise DimensionMismatchError("feature sets need >= 2 vectors of equal dimension")
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise DimensionMismatchError("kid needs at least 2 vectors per set")
    d = x.shape[1]

    def kernel(u, v):
        return (u @ v.T / d + 1.0) ** degree

    k_xx = kernel(x, x)
    k_yy = kernel(y, y)
    k_xy = kernel(x, y)
    sum_xx = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
    sum_yy = (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
    return float(sum_xx + sum_yy - 2.0 * k_xy.mean())


def lpips(a: ImageBuffer, b: ImageBuffer, extractor: LayerExtractor) -> float:
    """Perceptual distance: per layer, channel-unit-normalize the features,
    take squared differences summed over channels, average spatially, and sum
    across layers.  Identical inputs give exactly 0."""
    _check_same_size(a, b, "lpips")
    if extractor is None:
        raise AdapterError("lpips requires a feature-extractor adapter")
    total = 0.0
    layers_a, layers_b = extractor(a), extractor(b)
    if len(layers_a) != len(layers_b):
        raise AdapterError("extractor returned differing layer counts")
    for fa, fb in zip(layers_a, layers_b):
        fa = np.asarray(fa, dtype=np.float64)
        fb = np.asarray(fb, dtype=np.float64)
        if fa.shape != fb.shape:
            raise DimensionMismatchError(f"feature shapes differ: {fa.shape} vs {fb.shape}")

        def unit(f):
            norm = np.sqrt((f * f).sum(axis=0, keepdims=True))
            return np.divide(f, norm, out=np.zeros_like(f), where=norm > 0)

        diff = unit(fa) - unit(fb)
        total += float((diff * diff).sum(axis=0).mean())
    return total


# --- deterministic mock extractors -----------------------------------------


def mock_feature_extractor(img: ImageBuffer, dim: int = 16) -> np.ndarray:
    """Weight-free stand-in for an inception-style embedding: a fixed seeded
    projection of the 8x8-pooled grayscale image plus coarse histogram bins."""
    gray = to_grayscale(img).pixels.astype(np.float64) / 255.0
    pooled = np.stack(
        [c.mean(axis=1) for c in np.array_split(np.stack([r.mean(axis=0) for r in np.array_split(gray, 8, axis=0)]), 8, axis=1)]
    ).ravel()
    hist, _ = np.histogram(gray, bins=8, range=(0.0, 1.0))
    base = np.concatenate([pooled, hist / gray.size])
    rng = np.random.default_rng(1234)
    proj = rng.standard_normal((base.size, dim)) / np.sqrt(base.size)
    return base @ proj


def identity_layer_extractor(img: ImageBuffer) -> list[np.ndarray]:
    """LPIPS mock: the image itself as a single (C, H, W) feature layer."""
    rgb = to_rgb(img).pixels.astype(np.float64) / 255.0
    return [np.moveaxis(rgb, 2, 0)]


def extract_feature_set(images: Sequence[ImageBuffer], extractor: FeatureExtractor) -> np.ndarray:
    return np.stack([np.asarray(extractor(img), dtype=np.float64) for img in images])


# --- reporting ---------------------------------------------------------------


@dataclass
class MetricReport:
    extractor_id: str
    item_count: int
    per_item: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "extractor_id": self.extractor_id,
            "item_count": self.item_count,
            "per_item": self.per_item,
            "aggregate": self.aggregate,
            "notes": self.notes,
        }

    def to_table(self) -> str:
        if not self.per_item:
            return "(no successful items)"
        columns = ["item"] + [k for k in self.per_item[0] if k != "item"]
        lines = ["\t".join(columns)]
        for row in self.per_item:
            lines.append("\t".join(str(row.get(c, "")) for c in columns))
        agg = ", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in self.aggregate.items())
        lines.append(f"aggregate\t{agg}")
        return "\n".join(lines)


def evaluate_pairs(
    pairs: Sequence[tuple[ImageBuffer, ImageBuffer]],
    which: Sequence[str] = ("psnr", "ssim"),
    feature_extractor: Optional[FeatureExtractor] = None,
    lpips_extractor: Optional[LayerExtractor] = None,
    extractor_id: str = "none",
    item_names: Optional[Sequence[str]] = None,
) -> MetricReport:
    """Score (candidate, ground-truth) pairs and aggregate set-level metrics."""
    report = MetricReport(extractor_id=extractor_id, item_count=len(pairs))
    wants = set(which)
    for i, (cand, truth) in enumerate(pairs):
        row: dict = {"item": item_names[i] if item_names else str(i)}
        if "psnr" in wants:
            row["psnr"] = psnr(cand, truth)
        if "ssim" in wants:
            row["ssim"] = ssim(cand, truth)
        if "lpips" in wants:
            if lpips_extractor is None:
                if "lpips unavailable: no extractor adapter" not in report.notes:
                    report.notes.append("lpips unavailable: no extractor adapter")
            else:
                row["lpips"] = lpips(cand, truth, lpips_extractor)
        report.per_item.append(row)
    for key in ("psnr", "ssim", "lpips"):
        vals = [r[key] for r in report.per_item if key in r]
        if vals:
            report.aggregate[f"{key}_mean"] = float(np.mean(vals))
            report.aggregate[f"{key}_std"] = float(np.std(vals))
    if wants & {"fid", "kid"}:
        if feature_extractor is None:
            report.notes.append("fid/kid unavailable: no feature extractor")
        elif len(pairs) < 2:
            report.notes.append("fid/kid unavailable: need >= 2 items")
        else:
            feats_cand = extract_feature_set([c for c, _ in pairs], feature_extractor)
            feats_truth = extract_feature_set([t for _, t in pairs], feature_extractor)
            if "fid" in wants:
                value, notes = fid_with_notes(feats_cand, feats_truth)
                report.aggregate["fid"] = value
                report.notes.extend(notes)
            if "kid" in wants:
                report.aggregate["kid"] = kid(feats_cand, feats_truth)
    return report
