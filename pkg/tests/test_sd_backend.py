"""Real-weights adapter checks; everything here skips without torch+diffusers
and a checkpoint (set MIXSA_SD_WEIGHTS to run them)."""

import os

import numpy as np
import pytest

from mixsa.errors import BackendUnavailableError

diffusers = pytest.importorskip("diffusers")
torch = pytest.importorskip("torch")

WEIGHTS = os.environ.get("MIXSA_SD_WEIGHTS")
needs_weights = pytest.mark.skipif(not WEIGHTS, reason="MIXSA_SD_WEIGHTS not set")


@pytest.fixture(scope="module")
def backend():
    from mixsa.sd_backend import StableDiffusionBackend

    try:
        return StableDiffusionBackend(weights=WEIGHTS)
    except BackendUnavailableError as exc:
        pytest.skip(f"weights unavailable: {exc}")


@needs_weights
def test_latent_geometry_read_from_weights(backend):
    from mixsa.images import ImageBuffer

    img = ImageBuffer(np.zeros((512, 512, 3), dtype=np.uint8))
    z = backend.encode_image(img)
    assert z.shape == (4, 64, 64)
    assert backend.downsample_factor == 8


@needs_weights
def test_decoder_site_subset_nonempty(backend):
    sites = backend.list_self_attention_sites()
    assert len(sites) == 16
    assert backend.decoder_sites()
    assert sites == backend.list_self_attention_sites()


@needs_weights
def test_roundtrip_within_autoencoder_error(backend):
    from mixsa.images import ImageBuffer

    rng = np.random.default_rng(0)
    img = ImageBuffer(rng.integers(0, 256, (512, 512, 3)).astype(np.uint8))
    out = backend.decode_latent(backend.encode_image(img))
    assert np.mean(np.abs(out.pixels.astype(float) - img.pixels.astype(float))) < 40.0


@needs_weights
def test_identity_controller_near_neutral(backend):
    from mixsa.images import ImageBuffer

    img = ImageBuffer(np.full((512, 512, 3), 128, dtype=np.uint8))
    z = backend.encode_image(img)
    plain = backend.predict_noise(z, 500)
    steered = backend.predict_noise(z, 500, lambda s, t, q, k, v: (q, k, v))
    assert np.max(np.abs(plain.values - steered.values)) <= 1e-6
