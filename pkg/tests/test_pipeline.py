import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from mixsa import attnbank, ddim, mixer, pipeline
from mixsa.attnbank import AttentionBank, make_capture_controller
from mixsa.backend import EchoBackend, ZeroBackend
from mixsa.contour import ContourParams, extract_contours
from mixsa.errors import ScheduleMismatchError, StageError
from mixsa.images import ImageBuffer, png_bytes, save_png, to_rgb
from mixsa.mixer import MixParams
from mixsa.pipeline import (
    AblationFlags,
    GridSpec,
    SketchJob,
    batch_run,
    extract_sketch,
    interpolation_grid,
    job_hash,
    read_manifest,
    save_result,
    write_4skst_manifest,
)


class CountingEcho(EchoBackend):
    def __init__(self, **kw):
        super().__init__(**kw)
        self.forward_calls = 0

    def predict_noise(self, z, t, controller=None, guidance_scale=None):
        self.forward_calls += 1
        return super().predict_noise(z, t, controller, guidance_scale)


def test_job_defaults_match_published_settings():
    job = SketchJob(
        color_image=ImageBuffer(np.zeros((8, 8), dtype=np.uint8)),
        reference_image=ImageBuffer(np.zeros((8, 8), dtype=np.uint8)),
    )
    assert job.mix.zeta == 0.4
    assert job.mix.beta == 0.5
    assert job.contour.alpha == 0.55
    assert job.contour.method == "teed"
    assert job.steps == 50
    assert job.guidance_scale == 7.5
    assert job.mix.target_sites == frozenset({10, 11})


def test_zero_backend_rcd_off_returns_contour_map(base_job):
    job = replace(base_job, backend_id="mock-zero", ablation=AblationFlags(rcd=False))
    result = extract_sketch(job, ZeroBackend())
    expected = extract_contours(job.color_image, job.contour)
    assert np.array_equal(result.sketch.pixels, expected.pixels)


def test_extract_is_byte_deterministic(base_job):
    a = extract_sketch(base_job, EchoBackend())
    b = extract_sketch(base_job, EchoBackend())
    assert png_bytes(a.sketch) == png_bytes(b.sketch)
    assert a.provenance["output_hash"] == b.provenance["output_hash"]


def test_provenance_carries_reproduction_context(base_job):
    result = extract_sketch(base_job, EchoBackend())
    prov = result.provenance
    assert prov["n_inversions"] == 3
    assert set(prov["bank_fingerprints"]) == {"reference", "color", "contour"}
    assert prov["job"]["seed"] == base_job.seed
    assert prov["schedule"]["timesteps"][-1] == 1000
    assert prov["backend"]["name"] == "mock"
    assert "contour" in result.intermediates and "pre_rcd" in result.intermediates
    json.dumps(prov)  # must be serializable


def test_target_sites_validated_against_backend(base_job):
    job = replace(base_job, mix=MixParams(target_sites=frozenset({40})))
    with pytest.raises(StageError, match="target sites"):
        extract_sketch(job, EchoBackend())


def test_stage_errors_carry_stage_name(base_job):
    job = replace(base_job, contour=ContourParams(method="teed"), strict=True)
    with pytest.raises(StageError, match="contour"):
        extract_sketch(job, EchoBackend())


def test_detector_fallback_warning_unless_strict(base_job):
    job = replace(base_job, contour=ContourParams(method="teed", alpha=0.55))
    result = extract_sketch(job, EchoBackend())
    assert any("canny" in w for w in result.provenance["warnings"])
    canny_result = extract_sketch(base_job, EchoBackend())
    assert result.provenance["output_hash"] == canny_result.provenance["output_hash"]


def test_foreground_composite_changes_output_and_fallback(base_job):
    from mixsa import scene as scene_mod

    name = "test-left-half"
    scene_mod.register_segmenter(name, lambda im: (np.indices((im.height, im.width))[1] < im.width // 2).astype(float))
    try:
        job = replace(base_job, foreground=name)
        with_fg = extract_sketch(job, EchoBackend())
        without_fg = extract_sketch(base_job, EchoBackend())
        assert with_fg.provenance["output_hash"] != without_fg.provenance["output_hash"]
    finally:
        scene_mod._registry.pop(name, None)

    missing = replace(base_job, foreground="not-registered")
    res = extract_sketch(missing, EchoBackend())
    assert any("foreground" in w for w in res.provenance["warnings"])
    strict = replace(missing, strict=True)
    with pytest.raises(StageError, match="foreground"):
        extract_sketch(strict, EchoBackend())


def test_ablation_initial_contour_off_uses_color_trajectory(base_job):
    job = replace(base_job, ablation=AblationFlags(initial_contour=False))
    result = extract_sketch(job, EchoBackend())
    assert result.provenance["n_inversions"] == 2
    assert "contour" not in result.intermediates


def test_bank_all_sites_flag_widens_banks_without_changing_output(base_job):
    default = extract_sketch(base_job, EchoBackend())
    wide = extract_sketch(replace(base_job, bank_all_sites=True), EchoBackend())
    # the mixer reads only the target sites, so the sketch is unchanged...
    assert default.provenance["output_hash"] == wide.provenance["output_hash"]
    # ...but the banks hold strictly more material
    assert default.provenance["bank_fingerprints"] != wide.provenance["bank_fingerprints"]


def test_foreground_hard_threshold_flag(base_job):
    from mixsa import scene as scene_mod

    name = "test-grad-mask"
    scene_mod.register_segmenter(
        name, lambda im: np.indices((im.height, im.width))[1] / (im.width - 1.0)
    )
    try:
        soft = extract_sketch(replace(base_job, foreground=name), EchoBackend())
        hard = extract_sketch(replace(base_job, foreground=name, foreground_hard=True), EchoBackend())
        assert soft.provenance["output_hash"] != hard.provenance["output_hash"]
    finally:
        scene_mod._registry.pop(name, None)


def test_zeta_zero_generation_attention_is_reference_self_reconstruction(base_job):
    """Replicates the capture+generate flow and dumps the controller's
    target-site outputs: at zeta=0 each must equal softmax attention of the
    reference bank against itself."""
    backend = EchoBackend()
    schedule = ddim.make_schedule(backend.native_steps)
    ts = ddim.sampling_timesteps(schedule, 10)
    shash = ddim.schedule_hash(schedule)
    sites = (10, 11)

    banks = {}
    trajs = {}
    images = {
        "reference": to_rgb(base_job.reference_image),
        "color": base_job.color_image,
        "contour": extract_contours(base_job.color_image, base_job.contour),
    }
    for source, img in images.items():
        bank = AttentionBank(shash, ts, sites)
        ctrl = make_capture_controller(bank, source, attnbank.REQUIRED_KINDS[source], sites)
        trajs[source] = ddim.invert(backend.encode_image(img), backend, schedule, ctrl, ts)
        banks[source] = bank

    params = MixParams(zeta=0.0, target_sites=frozenset(sites))
    inner = mixer.make_controller(banks, params)
    dumps = []

    def dumping_controller(site, t, q, k, v):
        out = inner(site, t, q, k, v)
        if site.index in sites:
            dumps.append((site.index, t, out))
        return out

    ddim.sample(trajs["contour"].endpoint, backend, schedule, dumping_controller, ts)
    assert len(dumps) == len(sites) * 10
    ref = banks["reference"]
    for site_index, t, out in dumps:
        expected = mixer.mixed_attention(
            ref.entries[attnbank.BankKey(t, site_index, "Q", "reference")],
            ref.entries[attnbank.BankKey(t, site_index, "K", "reference")],
            ref.entries[attnbank.BankKey(t, site_index, "V", "reference")],
            params,
        )
        assert np.allclose(out, expected, atol=1e-12)


def test_schedule_hash_mismatch_blocks_generation(base_job):
    backend = EchoBackend()
    schedule_a = ddim.make_schedule(backend.native_steps)
    ts = ddim.sampling_timesteps(schedule_a, 5)
    banks = {}
    for source in attnbank.SOURCES:
        bank = AttentionBank(ddim.schedule_hash(schedule_a), ts, (10, 11))
        ctrl = make_capture_controller(bank, source, attnbank.REQUIRED_KINDS[source], (10, 11))
        ddim.invert(backend.encode_image(base_job.color_image), backend, schedule_a, ctrl, ts)
        banks[source] = bank
    schedule_b = ddim.make_schedule(backend.native_steps, {"kind": "constant", "value": 0.001})
    with pytest.raises(ScheduleMismatchError):
        mixer.validate_banks(banks, MixParams(), ts, ddim.schedule_hash(schedule_b))


# --- grids -------------------------------------------------------------------------


def test_grid_matches_standalone_and_reuses_banks(base_job):
    backend = CountingEcho()
    spec = GridSpec(zeta_values=(0.0, 0.5, 1.0), beta_values=(0.0, 0.5, 1.0), job=base_job)
    grid = interpolation_grid(spec, backend)
    assert len(grid.cells) == 9 and not grid.failures
    assert grid.provenance["n_inversions"] == 3
    # 3 inversions + 9 generations, each walking `steps` forward passes
    assert backend.forward_calls == (3 + 9) * base_job.steps

    for i, j in ((0, 0), (0, 2), (2, 0), (2, 2)):
        mix = replace(base_job.mix, zeta=spec.zeta_values[i], beta=spec.beta_values[j])
        standalone = extract_sketch(replace(base_job, mix=mix), EchoBackend())
        assert png_bytes(grid.cells[(i, j)].sketch) == png_bytes(standalone.sketch)


def test_grid_cell_failure_isolation(base_job, monkeypatch):
    real = mixer.mixed_attention

    def sometimes_broken(qm, kr, vr, p):
        if p.zeta == 0.77:
            raise RuntimeError("injected cell failure")
        return real(qm, kr, vr, p)

    monkeypatch.setattr(mixer, "mixed_attention", sometimes_broken)
    spec = GridSpec(zeta_values=(0.0, 0.77), beta_values=(0.5,), job=base_job)
    grid = interpolation_grid(spec, EchoBackend())
    assert set(grid.cells) == {(0, 0)}
    assert set(grid.failures) == {(1, 0)}
    assert "injected cell failure" in grid.failures[(1, 0)]


def test_grid_spec_validation(base_job):
    with pytest.raises(Exception):
        GridSpec(zeta_values=(), beta_values=(0.5,), job=base_job)
    with pytest.raises(Exception):
        GridSpec(zeta_values=(0.5,), beta_values=(1.5,), job=base_job)


# --- persistence ---------------------------------------------------------------------


def test_save_result_content_addressed(tmp_path, base_job):
    result = extract_sketch(base_job, EchoBackend())
    out_dir = save_result(result, tmp_path)
    assert out_dir.name == result.provenance["job_hash"][:16]
    assert (out_dir / "result.png").exists()
    assert (out_dir / "provenance.json").exists()
    stored = json.loads((out_dir / "provenance.json").read_text())
    assert stored["output_hash"] == result.provenance["output_hash"]


def test_job_hash_sensitive_to_params_and_images(base_job):
    base = job_hash(base_job)
    assert job_hash(replace(base_job, mix=replace(base_job.mix, zeta=0.9))) != base
    other_img = ImageBuffer(np.full((64, 64, 3), 3, dtype=np.uint8))
    assert job_hash(replace(base_job, color_image=other_img)) != base
    assert job_hash(base_job) == base


# --- batch -------------------------------------------------------------------------


def _write_manifest_fixture(tmp_path, shapes_color, stripes_reference, rows):
    save_png(shapes_color, tmp_path / "c.png")
    save_png(stripes_reference, tmp_path / "r.png")
    manifest = tmp_path / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "color", "reference", "ground_truth"])
        writer.writerows(rows)
    return manifest


def test_batch_two_items_with_metrics(tmp_path, base_job, shapes_color, stripes_reference):
    manifest = _write_manifest_fixture(
        tmp_path,
        shapes_color,
        stripes_reference,
        [["a", "c.png", "r.png", "r.png"], ["b", "c.png", "r.png", "r.png"]],
    )
    batch = batch_run(manifest, base_job, EchoBackend())
    assert batch.n_ok == 2
    assert batch.metric_report["item_count"] == 2
    assert len(batch.metric_report["per_item"]) == 2
    assert "psnr_mean" in batch.metric_report["aggregate"]


def test_batch_isolates_unreadable_item(tmp_path, base_job, shapes_color, stripes_reference):
    manifest = _write_manifest_fixture(
        tmp_path,
        shapes_color,
        stripes_reference,
        [["good", "c.png", "r.png", ""], ["bad", "missing.png", "r.png", ""]],
    )
    batch = batch_run(manifest, base_job, EchoBackend())
    assert batch.n_ok == 1
    statuses = {item.name: item.status for item in batch.items}
    assert statuses == {"good": "ok", "bad": "failed"}


def test_manifest_requires_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a.png,b.png\n")
    with pytest.raises(Exception):
        read_manifest(path)


def test_4skst_layout_manifest(tmp_path):
    px = np.zeros((8, 8), dtype=np.uint8)
    (tmp_path / "color").mkdir()
    for i in range(25):
        save_png(ImageBuffer(px + i), tmp_path / "color" / f"img{i:02d}.png")
    for style in range(1, 5):
        d = tmp_path / f"style{style}"
        d.mkdir()
        for i in range(25):
            save_png(ImageBuffer(px + style), d / f"img{i:02d}.png")
    out = tmp_path / "manifest.csv"
    count = write_4skst_manifest(tmp_path, out)
    assert count == 25 * 4
    rows = read_manifest(out)
    assert len(rows) == 100
    assert rows[0]["color"].startswith("color/")
