import numpy as np
import pytest

from mixsa import attnbank, ddim
from mixsa.attnbank import (
    AttentionBank,
    BankKey,
    bank_fingerprint,
    deserialize,
    load_cache,
    lookup,
    record,
    save_cache,
    serialize,
    validate_complete,
)
from mixsa.errors import (
    CacheFormatError,
    DuplicateKeyError,
    MissingKeyError,
    ScheduleMismatchError,
)


def _bank(schedule_hash="a" * 64):
    return AttentionBank(schedule_hash, timesteps=(0, 50, 100), site_list=(10, 11), source_hash="s")


def test_record_then_lookup_identity():
    bank = _bank()
    tensor = np.random.default_rng(0).standard_normal((2, 8, 4)).astype(np.float32)
    key = BankKey(50, 10, "K", "reference")
    record(bank, key, tensor)
    assert np.array_equal(lookup(bank, key), tensor)


def test_duplicate_key_rejected():
    bank = _bank()
    key = BankKey(50, 10, "K", "reference")
    record(bank, key, np.zeros((1, 2, 2)))
    with pytest.raises(DuplicateKeyError):
        record(bank, key, np.ones((1, 2, 2)))


def test_missing_key_error_carries_key():
    bank = _bank()
    with pytest.raises(MissingKeyError, match="timestep=50"):
        lookup(bank, BankKey(50, 10, "Q", "color"))


def test_bad_kind_and_source_rejected():
    with pytest.raises(ValueError):
        BankKey(1, 1, "X", "reference")
    with pytest.raises(ValueError):
        BankKey(1, 1, "Q", "style")


def test_counting_two_sites_fifty_steps_kv():
    bank = _bank()
    for t in range(1, 51):
        for site in (10, 11):
            for kind in ("K", "V"):
                record(bank, BankKey(t, site, kind, "reference"), np.zeros((1, 4, 2)))
    assert len(bank) == 200


def test_cache_roundtrip_structural_and_byte_exact(tmp_path):
    rng = np.random.default_rng(1)
    bank = _bank()
    for t in (50, 100):
        for site in (10, 11):
            for kind, source in (("K", "reference"), ("V", "reference"), ("Q", "color")):
                record(bank, BankKey(t, site, kind, source), rng.standard_normal((2, 6, 4)))
    path = tmp_path / "bank.msab"
    save_cache(bank, path)
    loaded = load_cache(path)
    assert loaded.schedule_hash == bank.schedule_hash
    assert loaded.timesteps == bank.timesteps
    assert set(loaded.entries) == set(bank.entries)
    for key in bank.entries:
        assert np.array_equal(loaded.entries[key], bank.entries[key])
    # serialize(load(save(bank))) is byte-identical to the original file
    assert serialize(loaded) == path.read_bytes()


def test_truncated_cache_detected(tmp_path):
    bank = _bank()
    record(bank, BankKey(50, 10, "K", "reference"), np.zeros((2, 4, 4)))
    blob = serialize(bank)
    for cut in (3, 7, len(blob) - 5):
        with pytest.raises(CacheFormatError):
            deserialize(blob[:cut])


def test_bad_magic_detected():
    with pytest.raises(CacheFormatError, match="magic"):
        deserialize(b"NOPE" + b"\x00" * 32)


def test_schedule_hash_mismatch_on_load(tmp_path):
    bank = _bank(schedule_hash="a" * 64)
    record(bank, BankKey(50, 10, "K", "reference"), np.zeros((1, 2, 2)))
    path = tmp_path / "bank.msab"
    save_cache(bank, path)
    with pytest.raises(ScheduleMismatchError):
        load_cache(path, expected_schedule_hash="b" * 64)


def test_float32_storage_even_for_float64_input():
    bank = _bank()
    record(bank, BankKey(50, 10, "Q", "contour"), np.full((1, 1, 1), 1.0 / 3.0, dtype=np.float64))
    assert bank.entries[BankKey(50, 10, "Q", "contour")].dtype == np.float32


def test_consumption_never_mutates_bank(echo_backend):
    from mixsa.images import ImageBuffer
    from mixsa.mixer import MixParams, make_controller

    rng = np.random.default_rng(2)
    s = ddim.make_schedule(1000)
    ts = ddim.sampling_timesteps(s, 5)
    shash = ddim.schedule_hash(s)
    banks = {}
    img = ImageBuffer(rng.integers(0, 256, (64, 64, 3)).astype(np.uint8))
    for source in attnbank.SOURCES:
        bank = AttentionBank(shash, ts, (10, 11))
        ctrl = attnbank.make_capture_controller(
            bank, source, attnbank.REQUIRED_KINDS[source] if source == "reference" else ("Q",), (10, 11)
        )
        ddim.invert(echo_backend.encode_image(img), echo_backend, s, ctrl, ts)
        banks[source] = bank
    before = {src: bank_fingerprint(b) for src, b in banks.items()}
    controller = make_controller(banks, MixParams(target_sites=frozenset({10, 11})))
    traj = ddim.invert(echo_backend.encode_image(img), echo_backend, s, timesteps=ts)
    ddim.sample(traj.endpoint, echo_backend, s, controller, ts)
    assert before == {src: bank_fingerprint(b) for src, b in banks.items()}


def test_validate_complete_reports_gaps():
    shash = "c" * 64
    ts = (0, 50, 100)
    banks = {}
    for source in attnbank.SOURCES:
        bank = AttentionBank(shash, ts, (10,))
        for t in (50, 100):
            for kind in attnbank.REQUIRED_KINDS[source]:
                record(bank, BankKey(t, 10, kind, source), np.zeros((1, 2, 2)))
        banks[source] = bank
    validate_complete(banks, (10,), ts, shash)  # complete
    with pytest.raises(MissingKeyError):
        validate_complete(banks, (10, 11), ts, shash)  # site 11 missing
    with pytest.raises(ScheduleMismatchError):
        validate_complete(banks, (10,), ts, "d" * 64)
    del banks["color"]
    with pytest.raises(MissingKeyError):
        validate_complete(banks, (10,), ts, shash)
