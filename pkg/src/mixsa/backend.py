"""Denoiser backends: the narrow interface over a latent-diffusion model.

A backend owns an autoencoder (image <-> latent) and a noise predictor whose
self-attention sites can be intercepted by a controller callback.  The mock
backends below run the whole toolkit without GPU weights:

* ``ZeroBackend``   -- identity autoencoder, predicts zero noise.  Attention
  sites still fabricate Q/K/V so capture controllers are exercised.
* ``LinearBackend`` -- identity autoencoder, predicts ``c * z``.  A Lipschitz
  toy for transport-error measurements.
* ``EchoBackend``   -- block-averaging autoencoder and a denoiser that runs
  genuine softmax attention over fixed seeded projections, so controllers
  change the prediction end-to-end.

Controller contract: a callable ``(site, timestep, q, k, v)`` where q/k/v are
``(heads, tokens, head_dim)`` arrays.  It returns either a ``(q, k, v)`` tuple
(the backend computes attention over the replacements) or a single array of
shape ``(heads, tokens, head_dim)`` used directly as the attention output.
It is invoked exactly once per registered self-attention site per forward
pass.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import (
    BackendUnavailableError,
    DimensionMismatchError,
    GenerationError,
    NonFiniteLatentError,
)
from .images import ImageBuffer, pixels_to_signal, signal_to_pixels, to_rgb

log = logging.getLogger("mixsa.backend")

ENCODER, MIDDLE, DECODER = "encoder", "middle", "decoder"

# Feature-injection default: the two late decoder self-attention layers that
# govern local stroke texture.
DEFAULT_TARGET_SITES = frozenset({10, 11})


@dataclass(frozen=True)
class AttentionSiteId:
    """One self-attention layer, indexed in forward order."""

    index: int
    stage: str

    def __post_init__(self):
        if self.stage not in (ENCODER, MIDDLE, DECODER):
            raise ValueError(f"unknown stage {self.stage!r}")


@dataclass(frozen=True)
class LatentGrid:
    """A (C, H, W) latent tensor tagged with its diffusion timestep."""

    values: np.ndarray
    timestep_tag: int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 3:
            raise DimensionMismatchError(f"latent must be (C, H, W), got {vals.shape}")
        object.__setattr__(self, "values", vals)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def with_values(self, values: np.ndarray, timestep_tag: Optional[int] = None) -> "LatentGrid":
        tag = self.timestep_tag if timestep_tag is None else timestep_tag
        return LatentGrid(values, tag)


ControllerResult = Union[np.ndarray, tuple]
AttentionController = Callable[[AttentionSiteId, int, np.ndarray, np.ndarray, np.ndarray], ControllerResult]


def softmax_weights(q: np.ndarray, k: np.ndarray, scale_dim: Optional[int] = None) -> np.ndarray:
    """Row-stochastic attention weights Softmax(q k^T / sqrt(d)) per head."""
    d = q.shape[-1] if scale_dim is None else scale_dim
    logits = q @ np.swapaxes(k, -1, -2) / np.sqrt(float(d))
    logits -= logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    return weights


def softmax_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale_dim: Optional[int] = None) -> np.ndarray:
    """Per-head Softmax(q k^T / sqrt(d)) v for (heads, tokens, d) arrays."""
    return softmax_weights(q, k, scale_dim) @ v


def _apply_controller(
    controller: Optional[AttentionController],
    site: AttentionSiteId,
    timestep: int,
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
) -> np.ndarray:
    """Run one attention site through the controller and return its output."""
    if controller is None:
        return softmax_attention(q, k, v)
    try:
        result = controller(site, timestep, q, k, v)
    except Exception as exc:
        raise GenerationError(f"controller failed at site {site.index} (t={timestep}): {exc}") from exc
    if isinstance(result, tuple):
        if len(result) != 3:
            raise GenerationError(f"controller at site {site.index} returned a {len(result)}-tuple, expected (q, k, v)")
        return softmax_attention(*result)
    out = np.asarray(result, dtype=np.float64)
    if out.shape != q.shape:
        raise GenerationError(
            f"controller output at site {site.index} has shape {out.shape}, expected {q.shape}"
        )
    return out


def _sinusoidal_embedding(t: int, dim: int, period: float = 10000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(period) * np.arange(half) / max(half - 1, 1))
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])[:dim]


class DenoiserBackend(ABC):
    """Exclusive-access facade over an autoencoder plus noise predictor."""

    #: spatial downsampling factor f of the autoencoder
    downsample_factor: int = 1
    #: latent channel count C
    latent_channels: int = 3
    #: native diffusion step count T
    native_steps: int = 1000
    #: side length jobs are resized to by default
    preferred_resolution: int = 64
    #: whether a text/guidance pathway exists
    supports_guidance: bool = False
    #: short identifier echoed in provenance
    name: str = "backend"

    @abstractmethod
    def list_self_attention_sites(self) -> tuple[AttentionSiteId, ...]: ...

    @abstractmethod
    def encode_image(self, img: ImageBuffer) -> LatentGrid: ...

    @abstractmethod
    def decode_latent(self, z: LatentGrid) -> ImageBuffer: ...

    @abstractmethod
    def predict_noise(
        self,
        z: LatentGrid,
        t: int,
        controller: Optional[AttentionController] = None,
        guidance_scale: Optional[float] = None,
    ) -> LatentGrid: ...

    def decoder_sites(self) -> tuple[AttentionSiteId, ...]:
        return tuple(s for s in self.list_self_attention_sites() if s.stage == DECODER)

    def _check_encodable(self, img: ImageBuffer) -> None:
        f = self.downsample_factor
        if img.width % f or img.height % f:
            raise DimensionMismatchError(
                f"image {img.width}x{img.height} not divisible by downsample factor {f}"
            )

    def _check_finite(self, z: LatentGrid) -> None:
        if not np.all(np.isfinite(z.values)):
            raise NonFiniteLatentError("latent contains NaN or infinite values")

    def _warn_guidance(self, guidance_scale: Optional[float]) -> None:
        if guidance_scale is not None and guidance_scale != 1.0 and not self.supports_guidance:
            if not getattr(self, "_guidance_notice_emitted", False):
                log.info(
                    "backend %s has no text pathway; guidance_scale=%s is ignored",
                    self.name,
                    guidance_scale,
                )
                self._guidance_notice_emitted = True


def _default_sites(count: int = 16) -> tuple[AttentionSiteId, ...]:
    """16 sites laid out like a standard U-Net: 6 encoder, 1 middle, 9 decoder."""
    sites = []
    for i in range(count):
        if i < 6 * count // 16:
            stage = ENCODER
        elif i < 7 * count // 16:
            stage = MIDDLE
        else:
            stage = DECODER
        sites.append(AttentionSiteId(i, stage))
    return tuple(sites)


def _block_mean(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Mean-pool the trailing two axes onto an (out_h, out_w) grid."""
    rows = np.stack([chunk.mean(axis=-2) for chunk in np.array_split(arr, out_h, axis=-2)], axis=-2)
    return np.stack([chunk.mean(axis=-1) for chunk in np.array_split(rows, out_w, axis=-1)], axis=-1)


class _MockSiteProjections:
    """Fixed seeded Q/K/V projections shared by the mock backends."""

    def __init__(self, rng: np.random.Generator, n_sites: int, model_dim: int, heads: int, head_dim: int):
        self.heads = heads
        self.head_dim = head_dim
        inner = heads * head_dim
        scale = 1.0 / np.sqrt(model_dim)
        self.w_q = rng.standard_normal((n_sites, model_dim, inner)) * scale
        self.w_k = rng.standard_normal((n_sites, model_dim, inner)) * scale
        self.w_v = rng.standard_normal((n_sites, model_dim, inner)) * scale
        self.w_o = rng.standard_normal((n_sites, inner, model_dim)) / np.sqrt(inner)

    def qkv(self, site_index: int, tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        def split(mat):
            proj = tokens @ mat  # (N, heads*d)
            return np.moveaxis(proj.reshape(tokens.shape[0], self.heads, self.head_dim), 1, 0)

        return split(self.w_q[site_index]), split(self.w_k[site_index]), split(self.w_v[site_index])

    def merge(self, site_index: int, out: np.ndarray) -> np.ndarray:
        flat = np.moveaxis(out, 0, 1).reshape(out.shape[1], self.heads * self.head_dim)
        return flat @ self.w_o[site_index]


class ZeroBackend(DenoiserBackend):
    """Identity autoencoder plus a zero noise predictor.

    Predictions ignore the attention outputs, but Q/K/V are still fabricated
    per site (from an 8x8 pooled token grid) so capture controllers record
    real tensors during inversion.
    """

    name = "mock-zero"
    downsample_factor = 1
    latent_channels = 3
    preferred_resolution = 64

    def __init__(self, n_sites: int = 16, seed: int = 0, token_grid: int = 8, heads: int = 2, head_dim: int = 8):
        self._sites = _default_sites(n_sites)
        self._token_grid = token_grid
        self._seed = seed
        rng = np.random.default_rng(seed)
        self._model_dim = heads * head_dim
        self._w_in_cache: dict[int, np.ndarray] = {}
        self._proj = _MockSiteProjections(rng, n_sites, self._model_dim, heads, head_dim)

    def list_self_attention_sites(self) -> tuple[AttentionSiteId, ...]:
        return self._sites

    def encode_image(self, img: ImageBuffer) -> LatentGrid:
        self._check_encodable(img)
        return LatentGrid(pixels_to_signal(to_rgb(img)), timestep_tag=0)

    def decode_latent(self, z: LatentGrid) -> ImageBuffer:
        self._check_finite(z)
        return signal_to_pixels(z.values)

    def _tokens(self, z: LatentGrid, t: int) -> np.ndarray:
        g = min(self._token_grid, z.shape[1], z.shape[2])
        channels = z.shape[0]
        w_in = self._w_in_cache.get(channels)
        if w_in is None:
            rng = np.random.default_rng((self._seed, channels))
            w_in = rng.standard_normal((channels, self._model_dim)) / np.sqrt(channels)
            self._w_in_cache[channels] = w_in
        pooled = _block_mean(z.values, g, g)  # (C, g, g)
        tokens = pooled.reshape(channels, g * g).T @ w_in
        return tokens + _sinusoidal_embedding(t, self._model_dim)

    def predict_noise(self, z, t, controller=None, guidance_scale=None) -> LatentGrid:
        self._check_finite(z)
        self._warn_guidance(guidance_scale)
        tokens = self._tokens(z, t)
        for site in self._sites:
            q, k, v = self._proj.qkv(site.index, tokens)
            _apply_controller(controller, site, t, q, k, v)
        return z.with_values(np.zeros_like(z.values), timestep_tag=t)


class LinearBackend(ZeroBackend):
    """Identity autoencoder with the fixed linear denoiser ``eps = c * z``."""

    name = "mock-linear"

    def __init__(self, coefficient: float = 0.1, **kwargs):
        super().__init__(**kwargs)
        self.coefficient = coefficient

    def predict_noise(self, z, t, controller=None, guidance_scale=None) -> LatentGrid:
        super().predict_noise(z, t, controller, guidance_scale)
        return z.with_values(self.coefficient * z.values, timestep_tag=t)


class EchoBackend(DenoiserBackend):
    """Mock whose prediction genuinely flows through its attention sites.

    Encode block-averages the image by ``f`` and lifts 3 channels to 4 via a
    fixed full-rank map; decode pseudo-inverts and nearest-upsamples.  The
    denoiser is a residual stack of softmax-attention layers over fixed
    seeded projections, so substituting K/V at any site changes the output.
    """

    name = "mock"
    downsample_factor = 8
    latent_channels = 4
    preferred_resolution = 64
    residual_gain = 0.5
    output_gain = 0.2

    def __init__(self, n_sites: int = 16, seed: int = 0, heads: int = 2, head_dim: int = 8):
        self._sites = _default_sites(n_sites)
        rng = np.random.default_rng(seed)
        self._model_dim = heads * head_dim
        # Fixed channel lift: orthonormal-ish columns so decode is exact on
        # encode's range.
        lift = np.array(
            [
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
                [1.0 / 3, 1.0 / 3, 1.0 / 3],
            ]
        )
        self._lift = lift
        self._unlift = np.linalg.pinv(lift)
        self._w_in = rng.standard_normal((self.latent_channels, self._model_dim)) / np.sqrt(self.latent_channels)
        self._w_eps = rng.standard_normal((self._model_dim, self.latent_channels)) / np.sqrt(self._model_dim)
        self._proj = _MockSiteProjections(rng, n_sites, self._model_dim, heads, head_dim)

    def list_self_attention_sites(self) -> tuple[AttentionSiteId, ...]:
        return self._sites

    def encode_image(self, img: ImageBuffer) -> LatentGrid:
        self._check_encodable(img)
        f = self.downsample_factor
        signal = pixels_to_signal(to_rgb(img))  # (3, H, W)
        h, w = signal.shape[1] // f, signal.shape[2] // f
        pooled = _block_mean(signal, h, w)
        lifted = np.einsum("ck,khw->chw", self._lift, pooled)
        return LatentGrid(lifted, timestep_tag=0)

    def decode_latent(self, z: LatentGrid) -> ImageBuffer:
        self._check_finite(z)
        f = self.downsample_factor
        rgb = np.einsum("kc,chw->khw", self._unlift, z.values)
        up = np.repeat(np.repeat(rgb, f, axis=1), f, axis=2)
        return signal_to_pixels(up)

    def predict_noise(self, z, t, controller=None, guidance_scale=None) -> LatentGrid:
        self._check_finite(z)
        self._warn_guidance(guidance_scale)
        c, h, w = z.shape
        hidden = z.values.reshape(c, h * w).T @ self._w_in
        hidden = hidden + _sinusoidal_embedding(t, self._model_dim)
        for site in self._sites:
            q, k, v = self._proj.qkv(site.index, hidden)
            out = _apply_controller(controller, site, t, q, k, v)
            hidden = hidden + self.residual_gain * self._proj.merge(site.index, out)
        eps = (hidden @ self._w_eps).T.reshape(c, h, w) * self.output_gain
        return z.with_values(eps, timestep_tag=t)


_FACTORIES = {
    "mock": lambda **kw: EchoBackend(**kw),
    "mock-echo": lambda **kw: EchoBackend(**kw),
    "mock-zero": lambda **kw: ZeroBackend(**kw),
    "mock-linear": lambda **kw: LinearBackend(**kw),
}


def create_backend(name: str, **options) -> DenoiserBackend:
    """Instantiate a backend by identifier (``mock``, ``mock-zero``, ``sd``...)."""
    if name in _FACTORIES:
        return _FACTORIES[name](**options)
    if name == "sd":
        from .sd_backend import StableDiffusionBackend

        return StableDiffusionBackend(**options)
    raise BackendUnavailableError(f"unknown backend {name!r}; available: {sorted(_FACTORIES) + ['sd']}")


def available_backends() -> Sequence[str]:
    return sorted(_FACTORIES) + ["sd"]
