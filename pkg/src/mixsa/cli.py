"""Command-line front door: extract, grid, eval, diagnose, serve.

Flag names mirror the steering knobs (--zeta, --beta, --alpha) with longer
aliases for readability.  Every run prints the fully resolved parameter set;
usage errors exit 2, runtime errors exit 1 with a categorized message.
"""

from __future__ import annotations

import argparse
import importlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import contour as contour_mod
from . import mixer, pipeline, rcd as rcd_mod, scene
from .backend import available_backends, create_backend
from .contour import ContourParams
from .ddim import make_schedule
from .errors import MixsaError
from .images import ImageBuffer, load_image, save_png
from .metrics import identity_layer_extractor, mock_feature_extractor
from .mixer import MixParams
from .pipeline import AblationFlags, GridSpec, SketchJob
from .rcd import BilateralParams, ContrastParams, RcdParams

log = logging.getLogger("mixsa.cli")

ENV_CONFIG = "MIXSA_CONFIG"
ENV_SD_WEIGHTS = "MIXSA_SD_WEIGHTS"


def load_config(path: str | Path) -> dict[str, str]:
    """Plain KEY=VALUE lines; '#' starts a comment."""
    conf: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise MixsaError(f"{path}:{lineno}: expected KEY=VALUE, got {line!r}")
        key, value = stripped.split("=", 1)
        conf[key.strip()] = value.strip()
    return conf


def _load_callable(spec: str):
    module_name, _, attr = spec.partition(":")
    if not attr:
        raise MixsaError(f"adapter spec {spec!r} must look like module:callable")
    module = importlib.import_module(module_name)
    return getattr(module, attr)


def _register_config_adapters(conf: dict[str, str]) -> None:
    for key, value in conf.items():
        if key.startswith("detector.") and not contour_mod.detector_available(key[9:]):
            contour_mod.register_detector(key[9:], _load_callable(value))
        elif key.startswith("segmenter.") and not scene.segmenter_available(key[10:]):
            scene.register_segmenter(key[10:], _load_callable(value))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixsa",
        description="Re-render a color image in the brushstroke style of a reference sketch.",
    )
    parser.add_argument("--config", help=f"KEY=VALUE config file (or ${ENV_CONFIG})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_images=True):
        if with_images:
            p.add_argument("--color", required=True, help="color input image (png/jpeg)")
            p.add_argument("--reference", required=True, help="reference sketch image")
        p.add_argument("--backend", default=None, help=f"one of {', '.join(available_backends())}")
        p.add_argument("--weights", default=None, help=f"sd checkpoint path/id (or ${ENV_SD_WEIGHTS})")
        p.add_argument("--alpha", "--sparse-threshold", type=float, default=contour_mod.DEFAULT_ALPHA,
                       dest="alpha", help="strokes sparse threshold in (0,1)")
        p.add_argument("--method", default=contour_mod.DEFAULT_METHOD,
                       help="edge detector (teed|canny|hed|registered name)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--steps", type=int, default=pipeline.DEFAULT_STEPS)
        p.add_argument("--guidance", type=float, default=pipeline.DEFAULT_GUIDANCE_SCALE)
        p.add_argument("--resolution", type=int, default=None)
        p.add_argument("--no-rcd", action="store_true", help="skip color-distribution cleanup")
        p.add_argument("--binarize-threshold", type=int, default=rcd_mod.DEFAULT_BINARIZE_THRESHOLD)
        p.add_argument("--bilateral", default=None, metavar="off|SPATIAL,RANGE",
                       help="bilateral smoothing, e.g. 'off' or '2.0,25'")
        p.add_argument("--contrast", type=float, default=None, metavar="STRENGTH",
                       help="enable percentile contrast stretch with this strength")
        p.add_argument("--foreground", default=None, help="segmenter adapter name")
        p.add_argument("--foreground-hard", action="store_true", help="binarize the saliency mask at 0.5")
        p.add_argument("--strict", action="store_true", help="fail instead of falling back on adapters")
        p.add_argument("--no-initial-contour", action="store_true")
        p.add_argument("--no-msa", action="store_true")
        p.add_argument("--no-dct", action="store_true")
        p.add_argument("--bank-all-sites", action="store_true")
        p.add_argument("--out", default="out", help="output root directory")

    p_extract = sub.add_parser("extract", help="extract one sketch")
    add_common(p_extract)
    p_extract.add_argument("--zeta", "--style-strength", type=float, default=mixer.DEFAULT_ZETA,
                           dest="zeta", help="style adherence in [0,1]")
    p_extract.add_argument("--beta", "--texture", type=float, default=mixer.DEFAULT_BETA,
                           dest="beta", help="texture retention in [0,1]")

    p_grid = sub.add_parser("grid", help="zeta x beta interpolation grid")
    add_common(p_grid)
    p_grid.add_argument("--zeta", "--style-strength", default="0,0.5,1", dest="zeta",
                        help="comma-separated zeta values")
    p_grid.add_argument("--beta", "--texture", default="0,0.5,1", dest="beta",
                        help="comma-separated beta values")

    p_eval = sub.add_parser("eval", help="batch evaluation over a manifest")
    add_common(p_eval, with_images=False)
    p_eval.add_argument("--manifest", required=True, help="CSV: color,reference[,ground_truth]")
    p_eval.add_argument("--metrics", default="psnr,ssim", help="comma list: psnr,ssim,lpips,fid,kid")
    p_eval.add_argument("--extractor", default="mock",
                        help="feature extractor for fid/kid/lpips: 'mock' or module:callable")
    p_eval.add_argument("--zeta", type=float, default=mixer.DEFAULT_ZETA)
    p_eval.add_argument("--beta", type=float, default=mixer.DEFAULT_BETA)

    p_diag = sub.add_parser("diagnose", help="print mean-drift and band-error tables")
    p_diag.add_argument("--image", default=None, help="optional grayscale image; default checkerboard")
    p_diag.add_argument("--steps", type=int, default=10, help="mean-drift steps")
    p_diag.add_argument("--size", type=int, default=64)

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8787)
    p_serve.add_argument("--backend", default=None)
    p_serve.add_argument("--weights", default=None)
    p_serve.add_argument("--out", default=None)

    return parser


def _resolve_backend(args, conf: dict[str, str]):
    backend_id = args.backend or conf.get("backend") or "mock"
    options = {}
    if backend_id == "sd":
        weights = getattr(args, "weights", None) or conf.get("sd_weights") or os.environ.get(ENV_SD_WEIGHTS)
        if weights:
            options["weights"] = weights
    return backend_id, create_backend(backend_id, **options)


def _rcd_params(args) -> RcdParams:
    bilateral = BilateralParams()
    if args.bilateral is not None:
        if args.bilateral.strip().lower() == "off":
            bilateral = BilateralParams(enabled=False)
        else:
            try:
                spatial, rng = (float(v) for v in args.bilateral.split(","))
            except ValueError:
                raise MixsaError(f"--bilateral expects 'off' or 'SPATIAL,RANGE', got {args.bilateral!r}")
            bilateral = BilateralParams(enabled=True, spatial_sigma=spatial, range_sigma=rng)
    contrast = ContrastParams()
    if args.contrast is not None:
        contrast = ContrastParams(enabled=True, strength=args.contrast)
    return RcdParams(
        binarize_threshold=args.binarize_threshold, bilateral=bilateral, contrast=contrast
    )


def _job_from_args(args, backend_id: str, zeta: float, beta: float) -> SketchJob:
    return SketchJob(
        color_image=load_image(args.color),
        reference_image=load_image(args.reference),
        mix=MixParams(zeta=zeta, beta=beta),
        contour=ContourParams(method=args.method, alpha=args.alpha),
        rcd=_rcd_params(args),
        ablation=AblationFlags(
            initial_contour=not args.no_initial_contour,
            msa=not args.no_msa,
            dct=not args.no_dct,
            rcd=not args.no_rcd,
        ),
        foreground=args.foreground,
        foreground_hard=args.foreground_hard,
        seed=args.seed,
        backend_id=backend_id,
        steps=args.steps,
        guidance_scale=args.guidance,
        resolution=args.resolution,
        bank_all_sites=args.bank_all_sites,
        strict=args.strict,
    )


def _print_resolved(job: SketchJob) -> None:
    resolved = {
        "zeta": job.mix.zeta,
        "beta": job.mix.beta,
        "alpha": job.contour.alpha,
        "method": job.contour.method,
        "steps": job.steps,
        "guidance": job.guidance_scale,
        "seed": job.seed,
        "backend": job.backend_id,
        "binarize_threshold": job.rcd.binarize_threshold,
        "bilateral": job.rcd.bilateral.enabled,
        "rcd": job.ablation.rcd,
        "msa": job.ablation.msa,
        "dct": job.ablation.dct,
        "initial_contour": job.ablation.initial_contour,
        "foreground": job.foreground,
    }
    print("resolved parameters: " + json.dumps(resolved, sort_keys=True))


def _cmd_extract(args, conf) -> int:
    backend_id, backend = _resolve_backend(args, conf)
    job = _job_from_args(args, backend_id, args.zeta, args.beta)
    _print_resolved(job)
    result = pipeline.extract_sketch(job, backend)
    out_dir = pipeline.save_result(result, args.out)
    print(f"wrote {out_dir / 'result.png'}")
    return 0


def _cmd_grid(args, conf) -> int:
    backend_id, backend = _resolve_backend(args, conf)
    zetas = tuple(float(v) for v in str(args.zeta).split(","))
    betas = tuple(float(v) for v in str(args.beta).split(","))
    job = _job_from_args(args, backend_id, zetas[0], betas[0])
    _print_resolved(job)
    spec = GridSpec(zeta_values=zetas, beta_values=betas, job=job)
    grid = pipeline.interpolation_grid(spec, backend)
    out_root = Path(args.out) / grid.provenance["job_hash"][:16]
    out_root.mkdir(parents=True, exist_ok=True)
    for (i, j), cell in grid.cells.items():
        save_png(cell.sketch, out_root / f"cell_{i}_{j}.png")
    (out_root / "grid.json").write_text(json.dumps(grid.provenance, indent=2, sort_keys=True))
    print(f"wrote {len(grid.cells)} cells to {out_root} ({len(grid.failures)} failures)")
    return 0 if not grid.failures else 1


def _cmd_eval(args, conf) -> int:
    backend_id, backend = _resolve_backend(args, conf)
    metric_names = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    feature_extractor = None
    lpips_extractor = None
    extractor_id = "none"
    if set(metric_names) & {"fid", "kid", "lpips"}:
        if args.extractor == "mock":
            feature_extractor = mock_feature_extractor
            lpips_extractor = identity_layer_extractor
            extractor_id = "mock-pooled-v1"
        else:
            feature_extractor = _load_callable(args.extractor)
            lpips_extractor = feature_extractor
            extractor_id = args.extractor
    template = SketchJob(
        color_image=ImageBuffer(np.zeros((8, 8), dtype=np.uint8)),
        reference_image=ImageBuffer(np.zeros((8, 8), dtype=np.uint8)),
        mix=MixParams(zeta=args.zeta, beta=args.beta),
        contour=ContourParams(method=args.method, alpha=args.alpha),
        rcd=_rcd_params(args),
        ablation=AblationFlags(rcd=not args.no_rcd),
        seed=args.seed,
        backend_id=backend_id,
        steps=args.steps,
        guidance_scale=args.guidance,
        resolution=args.resolution,
        strict=args.strict,
    )
    batch = pipeline.batch_run(
        args.manifest,
        template,
        backend,
        metric_names=metric_names,
        feature_extractor=feature_extractor,
        lpips_extractor=lpips_extractor,
        extractor_id=extractor_id,
    )
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    for item in batch.items:
        status = item.status if item.status == "ok" else f"failed ({item.detail})"
        print(f"{item.name}\t{status}")
        if item.result is not None:
            pipeline.save_result(item.result, out_root)
    if batch.metric_report:
        report_path = out_root / "metrics.json"
        report_path.write_text(json.dumps(batch.metric_report, indent=2, sort_keys=True))
        rep = batch.metric_report
        print(f"extractor: {rep['extractor_id']}  items: {rep['item_count']}")
        for key, value in sorted(rep["aggregate"].items()):
            print(f"{key}\t{value:.6g}")
        print(f"wrote {report_path}")
    print(f"{batch.n_ok}/{len(batch.items)} items succeeded")
    return 0 if batch.n_ok == len(batch.items) else 1


def _checkerboard(size: int) -> ImageBuffer:
    yy, xx = np.indices((size, size))
    return ImageBuffer(np.where((yy + xx) % 2 == 0, 255, 0).astype(np.uint8))


def _cmd_diagnose(args, conf) -> int:
    img = load_image(args.image) if args.image else _checkerboard(args.size)
    schedule = make_schedule(1000)

    black = ImageBuffer(np.zeros((args.size, args.size), dtype="uint8"))
    means = rcd_mod.mean_drift_diagnostic(black, args.steps)
    print("mean drift from black (deterministic, signal space):")
    print("step\tmean")
    for i, m in enumerate(means, 1):
        print(f"{i}\t{m:+.6f}")

    print("\nband reconstruction error (wiener toy denoiser):")
    print("timestep\thigh_band\tlow_band")
    for row in rcd_mod.band_reconstruction_error(img, schedule, rng=np.random.default_rng(0)):
        print(f"{row.timestep}\t{row.high_band_error:.6e}\t{row.low_band_error:.6e}")
    return 0


def _cmd_serve(args, conf) -> int:
    from .server import serve

    backend_id = args.backend or conf.get("backend") or "mock"
    serve(host=args.host, port=args.port, backend_id=backend_id, out_dir=args.out)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    conf: dict[str, str] = {}
    config_path = args.config or os.environ.get(ENV_CONFIG)
    try:
        if config_path:
            conf = load_config(config_path)
            _register_config_adapters(conf)
        handlers = {
            "extract": _cmd_extract,
            "grid": _cmd_grid,
            "eval": _cmd_eval,
            "diagnose": _cmd_diagnose,
            "serve": _cmd_serve,
        }
        return handlers[args.command](args, conf)
    except MixsaError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error[missing-file]: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive catch-all
        log.exception("unhandled failure")
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
