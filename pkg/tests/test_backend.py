import numpy as np
import pytest

from mixsa.backend import (
    DEFAULT_TARGET_SITES,
    DECODER,
    EchoBackend,
    LatentGrid,
    LinearBackend,
    ZeroBackend,
    available_backends,
    create_backend,
    softmax_weights,
)
from mixsa.errors import (
    BackendUnavailableError,
    DimensionMismatchError,
    GenerationError,
    NonFiniteLatentError,
)
from mixsa.images import ImageBuffer, to_rgb


def _rand_image(rng, size=64, channels=3):
    shape = (size, size, channels) if channels == 3 else (size, size)
    return ImageBuffer(rng.integers(0, 256, shape).astype(np.uint8))


def test_zero_backend_identity_autoencoder():
    rng = np.random.default_rng(0)
    img = _rand_image(rng)
    b = ZeroBackend()
    z = b.encode_image(img)
    assert z.timestep_tag == 0
    out = b.decode_latent(z)
    assert np.array_equal(out.pixels, img.pixels)


def test_zero_latent_decodes_to_mid_gray(zero_backend):
    img = zero_backend.decode_latent(LatentGrid(np.zeros((3, 8, 8)), 0))
    assert np.all(img.pixels == 128)


def test_zero_backend_grayscale_roundtrip_via_rgb(zero_backend):
    gray = ImageBuffer(np.arange(64, dtype=np.uint8).reshape(8, 8))
    out = zero_backend.decode_latent(zero_backend.encode_image(gray))
    assert np.array_equal(out.pixels, to_rgb(gray).pixels)


def test_non_finite_latent_rejected(zero_backend):
    bad = LatentGrid(np.full((3, 4, 4), np.nan), 0)
    with pytest.raises(NonFiniteLatentError):
        zero_backend.decode_latent(bad)
    with pytest.raises(NonFiniteLatentError):
        zero_backend.predict_noise(bad, 10)


def test_echo_backend_divisibility_precondition():
    b = EchoBackend()  # f = 8
    with pytest.raises(DimensionMismatchError):
        b.encode_image(ImageBuffer(np.zeros((64, 60, 3), dtype=np.uint8)))


def test_echo_backend_latent_contract():
    b = EchoBackend()
    z = b.encode_image(ImageBuffer(np.zeros((64, 64, 3), dtype=np.uint8)))
    assert z.shape == (b.latent_channels, 64 // b.downsample_factor, 64 // b.downsample_factor)


def test_echo_decode_inverts_encode_range():
    # pure-white image survives the lift/unlift exactly
    b = EchoBackend()
    img = ImageBuffer(np.full((64, 64, 3), 255, dtype=np.uint8))
    out = b.decode_latent(b.encode_image(img))
    assert np.all(out.pixels == 255)


def test_zero_denoiser_predicts_zero(zero_backend):
    rng = np.random.default_rng(1)
    z = LatentGrid(rng.standard_normal((3, 8, 8)), 0)
    eps = zero_backend.predict_noise(z, 500)
    assert not eps.values.any()
    assert eps.shape == z.shape


def test_linear_denoiser_is_scaled_input(linear_backend):
    rng = np.random.default_rng(2)
    z = LatentGrid(rng.standard_normal((3, 8, 8)), 0)
    eps = linear_backend.predict_noise(z, 100)
    assert np.allclose(eps.values, 0.1 * z.values)


def test_site_listing_stable_and_staged():
    b = EchoBackend(n_sites=16)
    sites = b.list_self_attention_sites()
    assert [s.index for s in sites] == list(range(16))
    assert sites == b.list_self_attention_sites()
    assert b.decoder_sites()
    for idx in DEFAULT_TARGET_SITES:
        assert sites[idx].stage == DECODER


def test_controller_called_once_per_site():
    b = EchoBackend(n_sites=2)
    z = b.encode_image(ImageBuffer(np.zeros((64, 64, 3), dtype=np.uint8)))
    calls = []

    def ctrl(site, t, q, k, v):
        calls.append((site.index, t))
        return q, k, v

    b.predict_noise(z, 40, ctrl)
    assert calls == [(0, 40), (1, 40)]


def test_identity_controller_is_neutral(echo_backend):
    rng = np.random.default_rng(3)
    z = echo_backend.encode_image(_rand_image(rng))
    plain = echo_backend.predict_noise(z, 700)
    steered = echo_backend.predict_noise(z, 700, lambda s, t, q, k, v: (q, k, v))
    assert np.array_equal(plain.values, steered.values)


def test_prediction_independent_of_original_v_after_substitution(echo_backend):
    rng = np.random.default_rng(4)
    z = echo_backend.encode_image(_rand_image(rng))

    def zero_v(site, t, q, k, v):
        return q, k, np.zeros_like(v)

    def scramble_then_zero_v(site, t, q, k, v):
        return q, k, np.zeros_like(v * 17.0 + 3.0)

    a = echo_backend.predict_noise(z, 300, zero_v)
    b = echo_backend.predict_noise(z, 300, scramble_then_zero_v)
    plain = echo_backend.predict_noise(z, 300)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, plain.values)


def test_controller_may_return_attention_output(echo_backend):
    rng = np.random.default_rng(5)
    z = echo_backend.encode_image(_rand_image(rng))

    def passthrough_output(site, t, q, k, v):
        return softmax_weights(q, k) @ v

    a = echo_backend.predict_noise(z, 250, passthrough_output)
    plain = echo_backend.predict_noise(z, 250)
    assert np.allclose(a.values, plain.values, atol=1e-12)


def test_controller_errors_wrapped_with_site_context(echo_backend):
    z = echo_backend.encode_image(ImageBuffer(np.zeros((64, 64, 3), dtype=np.uint8)))

    def boom(site, t, q, k, v):
        raise RuntimeError("nope")

    with pytest.raises(GenerationError, match="site 0"):
        echo_backend.predict_noise(z, 10, boom)


def test_bad_controller_result_shape_rejected(echo_backend):
    z = echo_backend.encode_image(ImageBuffer(np.zeros((64, 64, 3), dtype=np.uint8)))
    with pytest.raises(GenerationError, match="shape"):
        echo_backend.predict_noise(z, 10, lambda s, t, q, k, v: np.zeros((1, 2)))


def test_shape_preserved_across_timesteps(echo_backend):
    rng = np.random.default_rng(12)
    z = echo_backend.encode_image(_rand_image(rng))
    for t in (1, 250, 500, 999, 1000):
        assert echo_backend.predict_noise(z, t).shape == z.shape


def test_determinism_bit_identical(echo_backend):
    rng = np.random.default_rng(6)
    z = echo_backend.encode_image(_rand_image(rng))
    a = echo_backend.predict_noise(z, 123)
    b = EchoBackend().predict_noise(z, 123)
    assert np.array_equal(a.values, b.values)


def test_guidance_ignored_with_notice(echo_backend, caplog):
    z = echo_backend.encode_image(ImageBuffer(np.zeros((64, 64, 3), dtype=np.uint8)))
    with caplog.at_level("INFO", logger="mixsa.backend"):
        a = echo_backend.predict_noise(z, 10, guidance_scale=7.5)
        b = echo_backend.predict_noise(z, 10, guidance_scale=None)
    assert np.array_equal(a.values, b.values)
    assert any("guidance" in rec.message for rec in caplog.records)


def test_factory_and_unknown_backend():
    assert "mock" in available_backends()
    assert isinstance(create_backend("mock"), EchoBackend)
    assert isinstance(create_backend("mock-linear", coefficient=0.2), LinearBackend)
    with pytest.raises(BackendUnavailableError):
        create_backend("does-not-exist")
