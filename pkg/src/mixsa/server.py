"""HTTP service exposing the pipeline to the browser studio.

One worker thread owns the backend and drains a FIFO queue, so inversions and
generations never interleave on a single backend instance.  Results are kept
in memory (and optionally persisted) at desk scale; every response echoes the
fully resolved parameter set.
"""

from __future__ import annotations

import io
import itertools
import logging
import queue
import threading
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, Form, HTTPException, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response
from PIL import Image

from . import contour, mixer, pipeline, rcd, scene
from .backend import available_backends, create_backend
from .contour import ContourParams
from .errors import MixsaError
from .images import ImageBuffer, png_bytes
from .mixer import MixParams
from .pipeline import AblationFlags, GridSpec, SketchJob
from .rcd import BilateralParams, RcdParams

log = logging.getLogger("mixsa.server")


def _parse_bool(value, default: bool) -> bool:
    if value is None:
        return default
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def _image_from_upload(data: bytes, label: str) -> ImageBuffer:
    try:
        with Image.open(io.BytesIO(data)) as im:
            if im.mode in ("L", "1"):
                return ImageBuffer(np.asarray(im.convert("L")))
            return ImageBuffer(np.asarray(im.convert("RGB")))
    except Exception as exc:
        raise HTTPException(status_code=422, detail=f"could not decode {label} image: {exc}") from exc


def _job_from_params(color: ImageBuffer, reference: ImageBuffer, params: dict, backend_id: str) -> SketchJob:
    def fget(key, cast, default):
        raw = params.get(key)
        if raw is None or raw == "":
            return default
        try:
            return cast(raw)
        except (TypeError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=f"bad value for {key!r}: {raw!r}") from exc

    mix = MixParams(
        zeta=fget("zeta", float, mixer.DEFAULT_ZETA),
        beta=fget("beta", float, mixer.DEFAULT_BETA),
    )
    contour_params = ContourParams(
        method=str(params.get("method") or contour.DEFAULT_METHOD),
        alpha=fget("alpha", float, contour.DEFAULT_ALPHA),
    )
    rcd_params = RcdParams(
        binarize_threshold=fget("binarize_threshold", int, rcd.DEFAULT_BINARIZE_THRESHOLD),
        bilateral=BilateralParams(enabled=_parse_bool(params.get("bilateral"), True)),
    )
    ablation = AblationFlags(
        initial_contour=_parse_bool(params.get("initial_contour"), True),
        msa=_parse_bool(params.get("msa"), True),
        dct=_parse_bool(params.get("dct"), True),
        rcd=_parse_bool(params.get("rcd"), True),
    )
    return SketchJob(
        color_image=color,
        reference_image=reference,
        mix=mix,
        contour=contour_params,
        rcd=rcd_params,
        ablation=ablation,
        foreground=(str(params["foreground"]) or None) if params.get("foreground") else None,
        foreground_hard=_parse_bool(params.get("foreground_hard"), False),
        seed=fget("seed", int, 0),
        backend_id=backend_id,
        steps=fget("steps", int, pipeline.DEFAULT_STEPS),
        guidance_scale=fget("guidance", float, pipeline.DEFAULT_GUIDANCE_SCALE),
        strict=_parse_bool(params.get("strict"), False),
    )


def _echo_params(job: SketchJob) -> dict:
    return {
        "zeta": job.mix.zeta,
        "beta": job.mix.beta,
        "alpha": job.contour.alpha,
        "method": job.contour.method,
        "seed": job.seed,
        "steps": job.steps,
        "guidance": job.guidance_scale,
        "binarize_threshold": job.rcd.binarize_threshold,
        "bilateral": job.rcd.bilateral.enabled,
        "initial_contour": job.ablation.initial_contour,
        "msa": job.ablation.msa,
        "dct": job.ablation.dct,
        "rcd": job.ablation.rcd,
        "foreground": job.foreground,
        "backend": job.backend_id,
        "strict": job.strict,
    }


class _JobStore:
    def __init__(self):
        self.records: dict[str, dict] = {}
        self.lock = threading.Lock()
        self.counter = itertools.count(1)

    def new(self, kind: str, payload) -> str:
        with self.lock:
            ident = f"{kind}-{next(self.counter):06d}"
            self.records[ident] = {"status": "pending", "payload": payload, "kind": kind}
            return ident

    def get(self, ident: str) -> dict:
        with self.lock:
            rec = self.records.get(ident)
        if rec is None:
            raise HTTPException(status_code=404, detail=f"unknown id {ident!r}")
        return rec


def create_app(backend_id: str = "mock", out_dir: Optional[str | Path] = None, backend=None) -> FastAPI:
    app = FastAPI(title="mixsa", version="0.1.0")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    store = _JobStore()
    work: queue.Queue = queue.Queue()
    backend = backend or create_backend(backend_id)

    def worker():
        while True:
            ident = work.get()
            if ident is None:
                return
            rec = store.records[ident]
            rec["status"] = "running"
            try:
                if rec["kind"] == "job":
                    result = pipeline.extract_sketch(rec["payload"], backend)
                    rec["provenance"] = result.provenance
                    rec["png"] = png_bytes(result.sketch)
                    if out_dir is not None:
                        pipeline.save_result(result, out_dir)
                else:
                    grid = pipeline.interpolation_grid(rec["payload"], backend)
                    rec["provenance"] = grid.provenance
                    rec["cells"] = {f"{i}/{j}": png_bytes(res.sketch) for (i, j), res in grid.cells.items()}
                    rec["failures"] = {f"{i}/{j}": msg for (i, j), msg in grid.failures.items()}
                rec["status"] = "done"
            except Exception as exc:
                log.exception("work item %s failed", ident)
                rec["status"] = "failed"
                rec["error"] = f"{type(exc).__name__}: {exc}"
            finally:
                work.task_done()

    thread = threading.Thread(target=worker, daemon=True, name="mixsa-worker")
    thread.start()
    app.state.worker = thread
    app.state.queue = work

    @app.get("/api/capabilities")
    def capabilities():
        return {
            "backend": {
                "name": backend.name,
                "downsample_factor": backend.downsample_factor,
                "latent_channels": backend.latent_channels,
                "preferred_resolution": backend.preferred_resolution,
                "sites": [
                    {"index": s.index, "stage": s.stage} for s in backend.list_self_attention_sites()
                ],
            },
            "backends": list(available_backends()),
            "detectors": list(contour.registered_detectors()),
            "segmenters": list(scene.registered_segmenters()),
            "defaults": {
                "zeta": mixer.DEFAULT_ZETA,
                "beta": mixer.DEFAULT_BETA,
                "alpha": contour.DEFAULT_ALPHA,
                "steps": pipeline.DEFAULT_STEPS,
                "guidance": pipeline.DEFAULT_GUIDANCE_SCALE,
                "method": contour.DEFAULT_METHOD,
            },
        }

    @app.post("/api/jobs")
    async def submit_job(
        color: UploadFile,
        reference: UploadFile,
        zeta: Optional[str] = Form(None),
        beta: Optional[str] = Form(None),
        alpha: Optional[str] = Form(None),
        method: Optional[str] = Form(None),
        seed: Optional[str] = Form(None),
        steps: Optional[str] = Form(None),
        guidance: Optional[str] = Form(None),
        binarize_threshold: Optional[str] = Form(None),
        bilateral: Optional[str] = Form(None),
        initial_contour: Optional[str] = Form(None),
        msa: Optional[str] = Form(None),
        dct: Optional[str] = Form(None),
        rcd: Optional[str] = Form(None),
        foreground: Optional[str] = Form(None),
        foreground_hard: Optional[str] = Form(None),
        strict: Optional[str] = Form(None),
    ):
        params = {
            k: v
            for k, v in {
                "zeta": zeta, "beta": beta, "alpha": alpha, "method": method, "seed": seed,
                "steps": steps, "guidance": guidance, "binarize_threshold": binarize_threshold,
                "bilateral": bilateral, "initial_contour": initial_contour, "msa": msa,
                "dct": dct, "rcd": rcd, "foreground": foreground,
                "foreground_hard": foreground_hard, "strict": strict,
            }.items()
            if v is not None
        }
        job = _job_from_params(
            _image_from_upload(await color.read(), "color"),
            _image_from_upload(await reference.read(), "reference"),
            params,
            backend_id,
        )
        ident = store.new("job", job)
        work.put(ident)
        return {"job_id": ident, "params": _echo_params(job)}

    @app.get("/api/jobs/{ident}")
    def job_status(ident: str):
        rec = store.get(ident)
        if rec["kind"] != "job":
            raise HTTPException(status_code=404, detail=f"{ident!r} is not a job id")
        body = {"job_id": ident, "status": rec["status"], "params": _echo_params(rec["payload"])}
        if rec["status"] == "done":
            body["provenance"] = rec["provenance"]
        if rec["status"] == "failed":
            body["error"] = rec.get("error", "unknown error")
        return JSONResponse(body)

    @app.get("/api/jobs/{ident}/result.png")
    def job_result(ident: str):
        rec = store.get(ident)
        if rec["status"] != "done" or "png" not in rec:
            raise HTTPException(status_code=409, detail=f"job {ident!r} is {rec['status']}")
        return Response(content=rec["png"], media_type="image/png")

    @app.post("/api/grids")
    async def submit_grid(
        color: UploadFile,
        reference: UploadFile,
        zeta_values: str = Form(...),
        beta_values: str = Form(...),
        alpha: Optional[str] = Form(None),
        method: Optional[str] = Form(None),
        seed: Optional[str] = Form(None),
        steps: Optional[str] = Form(None),
        guidance: Optional[str] = Form(None),
        binarize_threshold: Optional[str] = Form(None),
        bilateral: Optional[str] = Form(None),
        rcd: Optional[str] = Form(None),
        foreground: Optional[str] = Form(None),
        strict: Optional[str] = Form(None),
    ):
        params = {
            k: v
            for k, v in {
                "alpha": alpha, "method": method, "seed": seed, "steps": steps,
                "guidance": guidance, "binarize_threshold": binarize_threshold,
                "bilateral": bilateral, "rcd": rcd, "foreground": foreground, "strict": strict,
            }.items()
            if v is not None
        }
        job = _job_from_params(
            _image_from_upload(await color.read(), "color"),
            _image_from_upload(await reference.read(), "reference"),
            params,
            backend_id,
        )
        try:
            zetas = tuple(float(v) for v in zeta_values.split(",") if v.strip() != "")
            betas = tuple(float(v) for v in beta_values.split(",") if v.strip() != "")
            spec = GridSpec(zeta_values=zetas, beta_values=betas, job=job)
        except (ValueError, MixsaError) as exc:
            raise HTTPException(status_code=422, detail=f"bad grid spec: {exc}") from exc
        ident = store.new("grid", spec)
        work.put(ident)
        return {
            "grid_id": ident,
            "params": _echo_params(job),
            "zeta_values": list(spec.zeta_values),
            "beta_values": list(spec.beta_values),
        }

    @app.get("/api/grids/{ident}")
    def grid_status(ident: str):
        rec = store.get(ident)
        if rec["kind"] != "grid":
            raise HTTPException(status_code=404, detail=f"{ident!r} is not a grid id")
        spec: GridSpec = rec["payload"]
        body = {
            "grid_id": ident,
            "status": rec["status"],
            "params": _echo_params(spec.job),
            "zeta_values": list(spec.zeta_values),
            "beta_values": list(spec.beta_values),
        }
        if rec["status"] == "done":
            body["provenance"] = rec["provenance"]
            body["failures"] = rec.get("failures", {})
        if rec["status"] == "failed":
            body["error"] = rec.get("error", "unknown error")
        return JSONResponse(body)

    @app.get("/api/grids/{ident}/cell/{i}/{j}.png")
    def grid_cell(ident: str, i: int, j: int):
        rec = store.get(ident)
        if rec["status"] != "done":
            raise HTTPException(status_code=409, detail=f"grid {ident!r} is {rec['status']}")
        png = rec.get("cells", {}).get(f"{i}/{j}")
        if png is None:
            detail = rec.get("failures", {}).get(f"{i}/{j}", "no such cell")
            raise HTTPException(status_code=404, detail=detail)
        return Response(content=png, media_type="image/png")

    return app


def serve(host: str = "127.0.0.1", port: int = 8787, backend_id: str = "mock", out_dir=None) -> None:
    import uvicorn

    uvicorn.run(create_app(backend_id=backend_id, out_dir=out_dir), host=host, port=port)
