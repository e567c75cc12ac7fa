"""Adapter over Stable Diffusion v1.x checkpoints (optional, GPU-friendly).

Weights are consumed opaquely through diffusers; nothing here is needed for
the mock-backend test suite.  Install the ``sd`` extra and point
``weights`` at a local checkout or hub id (e.g. CompVis/stable-diffusion-v1-4).
A second adapter slot accepts a black-and-white fine-tuned checkpoint the
same way.
"""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from .backend import (
    DECODER,
    ENCODER,
    MIDDLE,
    AttentionController,
    AttentionSiteId,
    DenoiserBackend,
    LatentGrid,
    softmax_attention,
)
from .errors import BackendUnavailableError
from .images import ImageBuffer, pixels_to_signal, signal_to_pixels, to_rgb

log = logging.getLogger("mixsa.sd")


def _import_stack():
    try:
        import torch
        from diffusers import AutoencoderKL, UNet2DConditionModel
    except ImportError as exc:
        raise BackendUnavailableError(
            "the 'sd' backend needs torch and diffusers; install the [sd] extra"
        ) from exc
    return torch, AutoencoderKL, UNet2DConditionModel


class StableDiffusionBackend(DenoiserBackend):
    """v1.x UNet + VAE with self-attention interception.

    Self-attention sites are enumerated in forward order over the UNet's
    ``attn1`` processors; cross-attention runs against a fixed empty-prompt
    embedding (the text pathway is otherwise unused).
    """

    name = "sd"
    native_steps = 1000
    preferred_resolution = 512
    supports_guidance = True

    def __init__(self, weights: str = "CompVis/stable-diffusion-v1-4", device: str = "cpu", seed: int = 0):
        torch, AutoencoderKL, UNet2DConditionModel = _import_stack()
        self._torch = torch
        self._device = device
        self._seed = seed
        try:
            self.vae = AutoencoderKL.from_pretrained(weights, subfolder="vae").to(device).eval()
            self.unet = UNet2DConditionModel.from_pretrained(weights, subfolder="unet").to(device).eval()
        except Exception as exc:
            raise BackendUnavailableError(f"could not load weights from {weights!r}: {exc}") from exc
        self.downsample_factor = 2 ** (len(self.vae.config.block_out_channels) - 1)
        self.latent_channels = self.unet.config.in_channels
        self._scaling = self.vae.config.scaling_factor
        self._sites = self._enumerate_sites()
        self._controller: Optional[AttentionController] = None
        self._timestep: int = 0
        # Empty-prompt conditioning: the cross-attention pathway still needs a
        # (1, 77, dim) tensor; zeros keep the run text-free.
        dim = self.unet.config.cross_attention_dim
        self._empty_cond = torch.zeros((1, 77, dim), device=device)

    # -- site plumbing ---------------------------------------------------

    def _named_self_attentions(self):
        for name, module in self.unet.named_modules():
            if name.endswith("attn1"):
                yield name, module

    def _enumerate_sites(self) -> tuple[AttentionSiteId, ...]:
        sites = []
        for index, (name, _) in enumerate(self._named_self_attentions()):
            if name.startswith("down_blocks"):
                stage = ENCODER
            elif name.startswith("mid_block"):
                stage = MIDDLE
            else:
                stage = DECODER
            sites.append(AttentionSiteId(index, stage))
        return tuple(sites)

    def list_self_attention_sites(self) -> tuple[AttentionSiteId, ...]:
        return self._sites

    # -- autoencoder -------------------------------------------------------

    def encode_image(self, img: ImageBuffer) -> LatentGrid:
        self._check_encodable(img)
        torch = self._torch
        signal = pixels_to_signal(to_rgb(img))
        with torch.no_grad():
            x = torch.as_tensor(signal[None], dtype=torch.float32, device=self._device)
            posterior = self.vae.encode(x).latent_dist
            z = posterior.mode() * self._scaling
        return LatentGrid(z[0].cpu().numpy().astype(np.float64), timestep_tag=0)

    def decode_latent(self, z: LatentGrid) -> ImageBuffer:
        self._check_finite(z)
        torch = self._torch
        with torch.no_grad():
            latents = torch.as_tensor(z.values[None], dtype=torch.float32, device=self._device)
            img = self.vae.decode(latents / self._scaling).sample
        return signal_to_pixels(np.clip(img[0].cpu().numpy().astype(np.float64), -1.0, 1.0))

    # -- denoiser -----------------------------------------------------------

    def _hook_processors(self):
        torch = self._torch
        backend = self

        class InterceptProcessor:
            def __init__(self, site: AttentionSiteId):
                self.site = site

            def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, **kwargs):
                residual = hidden_states
                query = attn.to_q(hidden_states)
                context = hidden_states if encoder_hidden_states is None else encoder_hidden_states
                key = attn.to_k(context)
                value = attn.to_v(context)
                heads = attn.heads
                batch, tokens, inner = query.shape
                head_dim = inner // heads

                def split(t):
                    return t.reshape(batch, tokens, heads, head_dim).permute(0, 2, 1, 3)

                q, k, v = split(query), split(key), split(value)
                controller = backend._controller
                if controller is not None and batch == 1:
                    q_np = q[0].detach().cpu().numpy().astype(np.float64)
                    k_np = k[0].detach().cpu().numpy().astype(np.float64)
                    v_np = v[0].detach().cpu().numpy().astype(np.float64)
                    result = controller(self.site, backend._timestep, q_np, k_np, v_np)
                    if isinstance(result, tuple):
                        out_np = softmax_attention(*result)
                    else:
                        out_np = np.asarray(result, dtype=np.float64)
                    out = torch.as_tensor(out_np[None], dtype=q.dtype, device=q.device)
                else:
                    scale = 1.0 / float(np.sqrt(head_dim))
                    weights = torch.softmax(q @ k.transpose(-1, -2) * scale, dim=-1)
                    out = weights @ v
                out = out.permute(0, 2, 1, 3).reshape(batch, tokens, inner)
                out = attn.to_out[0](out)
                out = attn.to_out[1](out)
                if attn.residual_connection:
                    out = out + residual
                return out / attn.rescale_output_factor

        processors = {}
        index = 0
        for name, proc_name in ((n, f"{n.removesuffix('attn1')}attn1.processor") for n, _ in self._named_self_attentions()):
            processors[proc_name] = InterceptProcessor(self._sites[index])
            index += 1
        # Untouched cross-attention processors keep their defaults.
        current = self.unet.attn_processors
        for key in current:
            if key not in processors:
                processors[key] = current[key]
        self.unet.set_attn_processor(processors)

    def predict_noise(self, z, t, controller=None, guidance_scale=None) -> LatentGrid:
        self._check_finite(z)
        torch = self._torch
        if not hasattr(self, "_hooked"):
            self._hook_processors()
            self._hooked = True
        self._controller = controller
        self._timestep = int(t)
        if guidance_scale not in (None, 1.0):
            # With an empty prompt the conditional and unconditional branches
            # coincide, so guidance is a single-pass no-op; echoed only.
            log.debug("guidance_scale=%s with empty prompt: single-pass prediction", guidance_scale)
        try:
            with torch.no_grad():
                latents = torch.as_tensor(z.values[None], dtype=torch.float32, device=self._device)
                eps = self.unet(latents, t, encoder_hidden_states=self._empty_cond).sample
        finally:
            self._controller = None
        return z.with_values(eps[0].cpu().numpy().astype(np.float64), timestep_tag=int(t))
