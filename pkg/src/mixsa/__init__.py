"""Reference-based sketch extraction by steering self-attention in a latent
diffusion model, with deterministic mock backends for weight-free use."""

__version__ = "0.1.0"

from .backend import (
    AttentionSiteId,
    DenoiserBackend,
    EchoBackend,
    LatentGrid,
    LinearBackend,
    ZeroBackend,
    create_backend,
)
from .contour import ContourParams, extract_contours
from .ddim import NoiseSchedule, Trajectory, invert, make_schedule, sample, sampling_timesteps
from .images import ImageBuffer, load_image, save_png
from .mixer import MixParams, blend_queries, mixed_attention
from .pipeline import (
    AblationFlags,
    GridSpec,
    SketchJob,
    SketchResult,
    batch_run,
    extract_sketch,
    interpolation_grid,
)
from .rcd import RcdParams, apply_rcd
from .scene import ForegroundMask, composite_on_white, extract_foreground_mask

__all__ = [
    "AblationFlags",
    "AttentionSiteId",
    "ContourParams",
    "DenoiserBackend",
    "EchoBackend",
    "ForegroundMask",
    "GridSpec",
    "ImageBuffer",
    "LatentGrid",
    "LinearBackend",
    "MixParams",
    "NoiseSchedule",
    "RcdParams",
    "SketchJob",
    "SketchResult",
    "Trajectory",
    "ZeroBackend",
    "apply_rcd",
    "batch_run",
    "blend_queries",
    "composite_on_white",
    "create_backend",
    "extract_contours",
    "extract_foreground_mask",
    "extract_sketch",
    "interpolation_grid",
    "invert",
    "load_image",
    "make_schedule",
    "mixed_attention",
    "sample",
    "sampling_timesteps",
    "save_png",
]
