"""End-to-end orchestration: three inversions with capture, mixed-attention
generation from the contour endpoint, post-processing, grids, and batches.

A job runs as: optional foreground composite -> contour extraction -> invert
reference (banking K/V), color and contour (banking Q) -> sample from the
contour trajectory's noise endpoint under the mixing controller -> decode ->
color-distribution cleanup.  Grids reuse one bank set across every cell, so
an NxM grid still performs exactly three inversions.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import attnbank, contour, ddim, mixer, scene
from .attnbank import AttentionBank, bank_fingerprint, make_capture_controller
from .backend import DenoiserBackend, create_backend
from .contour import ContourParams, extract_contours
from .ddim import NoiseSchedule, Trajectory, sampling_timesteps, schedule_hash
from .errors import AdapterError, MixsaError, StageError
from .images import ImageBuffer, center_crop_resize, content_hash, load_image, save_png, to_grayscale
from .mixer import MixParams
from .rcd import RcdParams, apply_rcd
from .scene import composite_on_white, extract_foreground_mask

log = logging.getLogger("mixsa.pipeline")

DEFAULT_GUIDANCE_SCALE = 7.5
DEFAULT_STEPS = 50


@dataclass(frozen=True)
class AblationFlags:
    """Structural switches for the four pipeline components."""

    initial_contour: bool = True
    msa: bool = True
    dct: bool = True
    rcd: bool = True


@dataclass(frozen=True)
class SketchJob:
    color_image: ImageBuffer
    reference_image: ImageBuffer
    mix: MixParams = field(default_factory=MixParams)
    contour: ContourParams = field(default_factory=ContourParams)
    rcd: RcdParams = field(default_factory=RcdParams)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    foreground: Optional[str] = None  # segmenter adapter name, None = off
    foreground_hard: bool = False  # threshold the saliency map at 0.5
    seed: int = 0
    backend_id: str = "mock"
    steps: int = DEFAULT_STEPS
    guidance_scale: float = DEFAULT_GUIDANCE_SCALE
    resolution: Optional[int] = None  # None = backend preference
    schedule_spec: Optional[dict] = None
    bank_all_sites: bool = False
    strict: bool = False
    keep_intermediates: bool = True


@dataclass
class SketchResult:
    sketch: ImageBuffer
    provenance: dict
    intermediates: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GridSpec:
    zeta_values: tuple[float, ...]
    beta_values: tuple[float, ...]
    job: SketchJob

    def __post_init__(self):
        zetas = tuple(float(z) for z in self.zeta_values)
        betas = tuple(float(b) for b in self.beta_values)
        if not zetas or not betas:
            raise MixsaError("grid axes must be non-empty")
        if any(not 0.0 <= v <= 1.0 for v in zetas + betas):
            raise MixsaError("grid zeta/beta values must lie in [0, 1]")
        object.__setattr__(self, "zeta_values", zetas)
        object.__setattr__(self, "beta_values", betas)


@dataclass
class GridResult:
    spec: GridSpec
    cells: dict[tuple[int, int], SketchResult]
    failures: dict[tuple[int, int], str]
    provenance: dict


def job_descriptor(job: SketchJob) -> dict:
    """Canonical, JSON-stable description of a job (used for hashing)."""
    desc = asdict(job)
    desc["color_image"] = content_hash(job.color_image)
    desc["reference_image"] = content_hash(job.reference_image)
    desc["mix"]["target_sites"] = sorted(job.mix.target_sites)
    return desc


def job_hash(job: SketchJob) -> str:
    blob = json.dumps(job_descriptor(job), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


class _StageClock:
    def __init__(self):
        self.timings: dict[str, float] = {}

    def run(self, stage: str, fn: Callable, *args, **kwargs):
        start = time.perf_counter()
        try:
            result = fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc
        self.timings[stage] = time.perf_counter() - start
        return result


def _resize_inputs(job: SketchJob, backend: DenoiserBackend) -> tuple[ImageBuffer, ImageBuffer, int]:
    resolution = job.resolution or backend.preferred_resolution
    if resolution % backend.downsample_factor:
        raise MixsaError(
            f"resolution {resolution} not divisible by backend factor {backend.downsample_factor}"
        )
    return (
        center_crop_resize(job.color_image, resolution),
        center_crop_resize(job.reference_image, resolution),
        resolution,
    )


def _apply_foreground(job: SketchJob, color: ImageBuffer, warnings: list[str]) -> ImageBuffer:
    if not job.foreground:
        return color
    try:
        mask = extract_foreground_mask(color, job.foreground)
    except AdapterError as exc:
        if job.strict:
            raise
        warnings.append(f"foreground adapter unavailable, proceeding without decomposition: {exc}")
        log.warning("%s", warnings[-1])
        return color
    if job.foreground_hard:
        mask = mask.hardened()
    return composite_on_white(color, mask)


def _make_contour(job: SketchJob, color: ImageBuffer, warnings: list[str]) -> ImageBuffer:
    params = job.contour
    if not contour.detector_available(params.method):
        if job.strict:
            raise AdapterError(
                f"detector {params.method!r} not registered and strict mode is on"
            )
        warnings.append(f"detector {params.method!r} unavailable; falling back to built-in canny")
        log.warning("%s", warnings[-1])
        params = replace(params, method="canny")
    return extract_contours(color, params)


def _rekey(bank: AttentionBank, new_source: str) -> AttentionBank:
    out = AttentionBank(
        schedule_hash=bank.schedule_hash,
        timesteps=bank.timesteps,
        site_list=bank.site_list,
        source_hash=bank.source_hash,
    )
    for key, tensor in bank.entries.items():
        kind_ok = attnbank.REQUIRED_KINDS[new_source]
        if key.kind in kind_ok:
            attnbank.record(out, attnbank.BankKey(key.timestep, key.site, key.kind, new_source), tensor)
    return out


@dataclass
class _Prepared:
    """Everything shared between a standalone run and all grid cells."""

    backend: DenoiserBackend
    schedule: NoiseSchedule
    timesteps: tuple[int, ...]
    banks: dict[str, AttentionBank]
    start_latent: object
    contour_img: Optional[ImageBuffer]
    color_img: ImageBuffer
    reference_img: ImageBuffer
    resolution: int
    n_inversions: int
    warnings: list[str]
    clock: _StageClock


def _capture_inversion(
    backend: DenoiserBackend,
    schedule: NoiseSchedule,
    timesteps: Sequence[int],
    img: ImageBuffer,
    source: str,
    kinds: Sequence[str],
    target_sites: Optional[Sequence[int]],
    guidance_scale: float,
) -> tuple[AttentionBank, Trajectory]:
    bank = AttentionBank(
        schedule_hash=schedule_hash(schedule),
        timesteps=tuple(timesteps),
        site_list=tuple(sorted(target_sites)) if target_sites is not None else tuple(
            s.index for s in backend.list_self_attention_sites()
        ),
        source_hash=content_hash(img),
    )
    controller = make_capture_controller(bank, source, kinds, target_sites)
    z0 = backend.encode_image(img)
    traj = ddim.invert(z0, backend, schedule, controller, timesteps, guidance_scale)
    return bank, traj


def _prepare(job: SketchJob, backend: Optional[DenoiserBackend] = None) -> _Prepared:
    clock = _StageClock()
    warnings: list[str] = []
    backend = backend or create_backend(job.backend_id)

    site_indices = {s.index for s in backend.list_self_attention_sites()}
    if not set(job.mix.target_sites) <= site_indices:
        raise StageError(
            "validate",
            MixsaError(f"target sites {sorted(job.mix.target_sites)} not all present in backend"),
        )

    color, reference, resolution = clock.run("preprocess", _resize_inputs, job, backend)
    color = clock.run("foreground", _apply_foreground, job, color, warnings)

    contour_img: Optional[ImageBuffer] = None
    if job.ablation.initial_contour:
        contour_img = clock.run("contour", _make_contour, job, color, warnings)

    schedule = ddim.make_schedule(backend.native_steps, job.schedule_spec)
    timesteps = sampling_timesteps(schedule, job.steps)
    capture_sites = None if job.bank_all_sites else sorted(job.mix.target_sites)

    def _invert_all():
        banks: dict[str, AttentionBank] = {}
        n = 0
        ref_bank, _ = _capture_inversion(
            backend, schedule, timesteps, reference, attnbank.SOURCE_REFERENCE,
            attnbank.REQUIRED_KINDS[attnbank.SOURCE_REFERENCE], capture_sites, job.guidance_scale,
        )
        banks[attnbank.SOURCE_REFERENCE] = ref_bank
        n += 1
        color_bank, color_traj = _capture_inversion(
            backend, schedule, timesteps, color, attnbank.SOURCE_COLOR,
            attnbank.REQUIRED_KINDS[attnbank.SOURCE_COLOR], capture_sites, job.guidance_scale,
        )
        banks[attnbank.SOURCE_COLOR] = color_bank
        n += 1
        if job.ablation.initial_contour:
            contour_bank, contour_traj = _capture_inversion(
                backend, schedule, timesteps, contour_img, attnbank.SOURCE_CONTOUR,
                attnbank.REQUIRED_KINDS[attnbank.SOURCE_CONTOUR], capture_sites, job.guidance_scale,
            )
            banks[attnbank.SOURCE_CONTOUR] = contour_bank
            n += 1
            start = contour_traj.endpoint
        else:
            # No initial sketch: generation starts from the color trajectory
            # and the contour-role queries are the color queries.
            banks[attnbank.SOURCE_CONTOUR] = _rekey(color_bank, attnbank.SOURCE_CONTOUR)
            start = color_traj.endpoint
        if not job.ablation.dct:
            # No contour/texture decomposition: the color-role query falls
            # back to the generating (contour) trajectory's own query.
            banks[attnbank.SOURCE_COLOR] = _rekey(
                banks[attnbank.SOURCE_CONTOUR], attnbank.SOURCE_COLOR
            )
        return banks, start, n

    banks, start_latent, n_inversions = clock.run("invert", _invert_all)

    if job.ablation.msa:
        clock.run(
            "validate-banks",
            mixer.validate_banks,
            banks,
            job.mix,
            timesteps,
            schedule_hash(schedule),
        )

    return _Prepared(
        backend=backend,
        schedule=schedule,
        timesteps=timesteps,
        banks=banks,
        start_latent=start_latent,
        contour_img=contour_img,
        color_img=color,
        reference_img=reference,
        resolution=resolution,
        n_inversions=n_inversions,
        warnings=warnings,
        clock=clock,
    )


def _generate(prep: _Prepared, job: SketchJob, mix: MixParams) -> tuple[ImageBuffer, ImageBuffer]:
    """Sample under the mixing controller and post-process; returns
    (final sketch, pre-cleanup decode)."""
    controller = mixer.make_controller(prep.banks, mix) if job.ablation.msa else None
    z0 = ddim.sample(
        prep.start_latent, prep.backend, prep.schedule, controller, prep.timesteps, job.guidance_scale
    )
    decoded = prep.backend.decode_latent(z0)
    if job.ablation.rcd:
        sketch = apply_rcd(decoded, job.rcd)
    else:
        sketch = to_grayscale(decoded)
    return sketch, decoded


def _provenance(prep: _Prepared, job: SketchJob, mix: MixParams, extra: Optional[dict] = None) -> dict:
    prov = {
        "job": job_descriptor(replace(job, mix=mix)),
        "job_hash": job_hash(replace(job, mix=mix)),
        "backend": {
            "name": prep.backend.name,
            "downsample_factor": prep.backend.downsample_factor,
            "latent_channels": prep.backend.latent_channels,
            "resolution": prep.resolution,
        },
        "schedule": json.loads(ddim.schedule_descriptor_json(prep.schedule, prep.timesteps)),
        "bank_fingerprints": {src: bank_fingerprint(b) for src, b in prep.banks.items()},
        "n_inversions": prep.n_inversions,
        "timings_s": dict(prep.clock.timings),
        "warnings": list(prep.warnings),
    }
    if extra:
        prov.update(extra)
    return prov


def extract_sketch(job: SketchJob, backend: Optional[DenoiserBackend] = None) -> SketchResult:
    """Run the full procedure for one (color, reference) pair."""
    prep = _prepare(job, backend)
    t0 = time.perf_counter()
    try:
        sketch, decoded = _generate(prep, job, job.mix)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("generate", exc) from exc
    prep.clock.timings["generate"] = time.perf_counter() - t0
    result = SketchResult(
        sketch=sketch,
        provenance=_provenance(prep, job, job.mix, {"output_hash": content_hash(sketch)}),
    )
    if job.keep_intermediates:
        if prep.contour_img is not None:
            result.intermediates["contour"] = prep.contour_img
        result.intermediates["pre_rcd"] = decoded
    return result


def interpolation_grid(spec: GridSpec, backend: Optional[DenoiserBackend] = None) -> GridResult:
    """Evaluate a zeta x beta matrix, reusing one bank set for every cell."""
    prep = _prepare(spec.job, backend)
    cells: dict[tuple[int, int], SketchResult] = {}
    failures: dict[tuple[int, int], str] = {}
    for i, zeta in enumerate(spec.zeta_values):
        for j, beta in enumerate(spec.beta_values):
            mix = replace(spec.job.mix, zeta=zeta, beta=beta)
            try:
                sketch, decoded = _generate(prep, spec.job, mix)
            except Exception as exc:  # cell isolation: record and continue
                failures[(i, j)] = f"{type(exc).__name__}: {exc}"
                log.warning("grid cell (%d, %d) failed: %s", i, j, exc)
                continue
            result = SketchResult(
                sketch=sketch,
                provenance=_provenance(
                    prep, spec.job, mix, {"grid_cell": [i, j], "output_hash": content_hash(sketch)}
                ),
            )
            if spec.job.keep_intermediates:
                result.intermediates["pre_rcd"] = decoded
            cells[(i, j)] = result
    provenance = _provenance(prep, spec.job, spec.job.mix)
    provenance["grid"] = {
        "zeta_values": list(spec.zeta_values),
        "beta_values": list(spec.beta_values),
        "n_cells": len(spec.zeta_values) * len(spec.beta_values),
        "n_failures": len(failures),
    }
    return GridResult(spec=spec, cells=cells, failures=failures, provenance=provenance)


# --- persistence ------------------------------------------------------------


def save_result(result: SketchResult, out_root: str | Path) -> Path:
    """Write result.png + provenance.json under a directory named by the job
    descriptor hash."""
    digest = result.provenance.get("job_hash", content_hash(result.sketch))
    out_dir = Path(out_root) / digest[:16]
    out_dir.mkdir(parents=True, exist_ok=True)
    save_png(result.sketch, out_dir / "result.png")
    for name, img in result.intermediates.items():
        save_png(to_grayscale(img) if name == "contour" else img, out_dir / f"{name}.png")
    (out_dir / "provenance.json").write_text(json.dumps(result.provenance, indent=2, sort_keys=True))
    return out_dir


# --- batch evaluation --------------------------------------------------------


@dataclass
class BatchItem:
    name: str
    status: str  # "ok" | "failed"
    detail: str = ""
    result: Optional[SketchResult] = None
    ground_truth: Optional[ImageBuffer] = None


@dataclass
class BatchResult:
    items: list[BatchItem]
    metric_report: Optional[dict] = None

    @property
    def n_ok(self) -> int:
        return sum(1 for it in self.items if it.status == "ok")


def read_manifest(path: str | Path) -> list[dict]:
    """CSV manifest with header: color,reference[,ground_truth]."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "color" not in reader.fieldnames or "reference" not in reader.fieldnames:
            raise MixsaError(f"manifest {path} needs a header with at least color,reference")
        for row in reader:
            rows.append({k: (v or "").strip() for k, v in row.items()})
    return rows


def batch_run(
    manifest_path: str | Path,
    job_template: SketchJob,
    backend: Optional[DenoiserBackend] = None,
    metric_names: Sequence[str] = ("psnr", "ssim"),
    feature_extractor=None,
    lpips_extractor=None,
    extractor_id: str = "none",
) -> BatchResult:
    """Run every manifest row in order; one failure never aborts the batch."""
    from .metrics import evaluate_pairs

    backend = backend or create_backend(job_template.backend_id)
    rows = read_manifest(manifest_path)
    base = Path(manifest_path).parent
    items: list[BatchItem] = []
    for idx, row in enumerate(rows):
        name = row.get("name") or f"item-{idx:04d}"
        try:
            color = load_image(base / row["color"] if not Path(row["color"]).is_absolute() else row["color"])
            reference = load_image(
                base / row["reference"] if not Path(row["reference"]).is_absolute() else row["reference"]
            )
            job = replace(job_template, color_image=color, reference_image=reference)
            result = extract_sketch(job, backend)
            truth = None
            if row.get("ground_truth"):
                gt_path = row["ground_truth"]
                truth = load_image(base / gt_path if not Path(gt_path).is_absolute() else gt_path)
                truth = center_crop_resize(truth, result.sketch.width)
            items.append(BatchItem(name=name, status="ok", result=result, ground_truth=truth))
        except Exception as exc:
            items.append(BatchItem(name=name, status="failed", detail=f"{type(exc).__name__}: {exc}"))
            log.warning("batch item %s failed: %s", name, exc)
    pairs = [
        (it.result.sketch, it.ground_truth)
        for it in items
        if it.status == "ok" and it.ground_truth is not None
    ]
    report = None
    if pairs:
        report = evaluate_pairs(
            pairs,
            which=metric_names,
            feature_extractor=feature_extractor,
            lpips_extractor=lpips_extractor,
            extractor_id=extractor_id,
            item_names=[it.name for it in items if it.status == "ok" and it.ground_truth is not None],
        ).to_dict()
    return BatchResult(items=items, metric_report=report)


def write_4skst_manifest(root: str | Path, out_path: str | Path) -> int:
    """Build a manifest for the 25-color x 4-style pairing layout: color/*.png
    matched against style directories style1..style4."""
    root = Path(root)
    colors = sorted((root / "color").glob("*.png")) + sorted((root / "color").glob("*.jpg"))
    styles = sorted(d for d in root.iterdir() if d.is_dir() and d.name.startswith("style"))
    if not colors or not styles:
        raise MixsaError(f"{root} does not look like a color/ + styleN/ layout")
    count = 0
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "color", "reference", "ground_truth"])
        for color_path in colors:
            for style_dir in styles:
                match = style_dir / color_path.name
                if not match.exists():
                    continue
                writer.writerow(
                    [
                        f"{color_path.stem}-{style_dir.name}",
                        str(color_path.relative_to(root)),
                        str(match.relative_to(root)),
                        str(match.relative_to(root)),
                    ]
                )
                count += 1
    return count
