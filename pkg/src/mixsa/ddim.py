"""Deterministic DDIM transport: noise schedules, inversion, and sampling.

Everything here is noise-free (eta = 0): inversion applies the algebraic
inverse of the sampling recurrence with the noise prediction evaluated at the
current (cleaner) latent, and sampling walks the same timestep subsequence
back down.  No random draws occur anywhere in this module.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .backend import AttentionController, DenoiserBackend, LatentGrid
from .errors import CacheFormatError, GenerationError, MixsaError, ScheduleMismatchError

DEFAULT_SAMPLING_STEPS = 50

_TRAJ_MAGIC = b"MSTJ"
_TRAJ_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep noise constants: betas (length T) and their cumulative
    alpha-bar products (length T+1, with alpha_bars[0] = 1)."""

    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        abars = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise MixsaError("betas must be a non-empty 1-D array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise MixsaError("betas must lie in the open interval (0, 1)")
        if abars.shape != (betas.size + 1,):
            raise MixsaError("alpha_bars must have length T + 1")
        if abars[0] != 1.0:
            raise MixsaError("alpha_bars[0] must be exactly 1")
        if np.any(np.diff(abars) >= 0.0):
            raise MixsaError("alpha_bars must be strictly decreasing")
        expected = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        if np.max(np.abs(expected - abars)) > 1e-12:
            raise MixsaError("alpha_bars inconsistent with cumulative product of (1 - beta)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", abars)

    @property
    def num_steps(self) -> int:
        return self.betas.size


def make_schedule(num_steps: int, beta_spec=None) -> NoiseSchedule:
    """Build a schedule from a descriptor.

    ``beta_spec`` may be a mapping with ``kind`` in {"linear", "scaled_linear",
    "constant"}, an explicit beta array, or None for the stable-diffusion
    default (scaled_linear 0.00085..0.012).
    """
    if num_steps < 1:
        raise MixsaError("num_steps must be >= 1")
    if beta_spec is None:
        beta_spec = {"kind": "scaled_linear", "start": 0.00085, "end": 0.012}
    if isinstance(beta_spec, dict):
        kind = beta_spec.get("kind", "linear")
        if kind == "constant":
            betas = np.full(num_steps, float(beta_spec["value"]))
        elif kind == "linear":
            betas = np.linspace(float(beta_spec.get("start", 1e-4)), float(beta_spec.get("end", 0.02)), num_steps)
        elif kind == "scaled_linear":
            betas = (
                np.linspace(
                    float(beta_spec.get("start", 0.00085)) ** 0.5,
                    float(beta_spec.get("end", 0.012)) ** 0.5,
                    num_steps,
                )
                ** 2
            )
        else:
            raise MixsaError(f"unknown schedule kind {kind!r}")
    else:
        betas = np.asarray(beta_spec, dtype=np.float64)
        if betas.shape != (num_steps,):
            raise MixsaError(f"explicit betas must have shape ({num_steps},)")
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(betas, alpha_bars)


def schedule_hash(schedule: NoiseSchedule) -> str:
    h = hashlib.sha256()
    h.update(struct.pack("<I", schedule.num_steps))
    h.update(schedule.betas.astype("<f8").tobytes())
    return h.hexdigest()


def sampling_timesteps(schedule: NoiseSchedule, steps: int = DEFAULT_SAMPLING_STEPS) -> tuple[int, ...]:
    """Uniformly spaced timestep subsequence 0 = t_0 < ... < t_S = T."""
    T = schedule.num_steps
    if not 1 <= steps <= T:
        raise MixsaError(f"steps must be in [1, {T}]")
    ts = [round(i * T / steps) for i in range(steps + 1)]
    ts[-1] = T
    if len(set(ts)) != len(ts):
        raise MixsaError(f"cannot place {steps} distinct steps over T={T}")
    return tuple(ts)


@dataclass(frozen=True)
class Trajectory:
    """Latents along the timestep subsequence, from clean (t=0) to noise (t=T)."""

    latents: tuple[LatentGrid, ...]
    timesteps: tuple[int, ...]
    schedule_hash: str

    def __post_init__(self):
        if len(self.latents) != len(self.timesteps):
            raise MixsaError("latents and timesteps must have equal length")
        if self.timesteps[0] != 0 or any(b <= a for a, b in zip(self.timesteps, self.timesteps[1:])):
            raise MixsaError("timesteps must start at 0 and increase strictly")

    @property
    def endpoint(self) -> LatentGrid:
        return self.latents[-1]

    @property
    def initial(self) -> LatentGrid:
        return self.latents[0]


def _step_coefficients(schedule: NoiseSchedule, t_from: int, t_to: int) -> tuple[float, float, float, float]:
    a_from = schedule.alpha_bars[t_from]
    a_to = schedule.alpha_bars[t_to]
    return np.sqrt(a_from), np.sqrt(1.0 - a_from), np.sqrt(a_to), np.sqrt(1.0 - a_to)


def invert(
    z0: LatentGrid,
    backend: DenoiserBackend,
    schedule: NoiseSchedule,
    controller: Optional[AttentionController] = None,
    timesteps: Optional[Sequence[int]] = None,
    guidance_scale: Optional[float] = None,
) -> Trajectory:
    """Map a clean latent to its noise-space counterpart, keeping the full
    trajectory.  The noise prediction at each step is evaluated at the current
    (cleaner) latent with the *target* timestep, so a later sampling run hits
    identical (site, timestep) keys."""
    if z0.timestep_tag != 0:
        raise MixsaError(f"invert expects a clean latent (timestep_tag 0), got {z0.timestep_tag}")
    ts = tuple(timesteps) if timesteps is not None else sampling_timesteps(schedule)
    latents = [z0]
    current = z0
    for t_prev, t in zip(ts, ts[1:]):
        try:
            eps = backend.predict_noise(current, t, controller, guidance_scale)
        except GenerationError:
            raise
        except Exception as exc:
            raise GenerationError(f"noise prediction failed during inversion at t={t}: {exc}") from exc
        sa_prev, sb_prev, sa_t, sb_t = _step_coefficients(schedule, t_prev, t)
        x0_pred = (current.values - sb_prev * eps.values) / sa_prev
        nxt = sa_t * x0_pred + sb_t * eps.values
        current = LatentGrid(nxt, timestep_tag=t)
        latents.append(current)
    return Trajectory(tuple(latents), ts, schedule_hash(schedule))


def sample(
    zT: LatentGrid,
    backend: DenoiserBackend,
    schedule: NoiseSchedule,
    controller: Optional[AttentionController] = None,
    timesteps: Optional[Sequence[int]] = None,
    guidance_scale: Optional[float] = None,
) -> LatentGrid:
    """Deterministically denoise from t=T back to a clean latent."""
    ts = tuple(timesteps) if timesteps is not None else sampling_timesteps(schedule)
    if zT.timestep_tag != ts[-1]:
        raise MixsaError(f"sample expects timestep_tag {ts[-1]}, got {zT.timestep_tag}")
    current = zT
    for t, t_prev in zip(ts[::-1], ts[-2::-1]):
        try:
            eps = backend.predict_noise(current, t, controller, guidance_scale)
        except GenerationError:
            raise
        except Exception as exc:
            raise GenerationError(f"noise prediction failed during sampling at t={t}: {exc}") from exc
        sa_prev, sb_prev, sa_t, sb_t = _step_coefficients(schedule, t_prev, t)
        x0_pred = (current.values - sb_t * eps.values) / sa_t
        current = LatentGrid(sa_prev * x0_pred + sb_prev * eps.values, timestep_tag=t_prev)
    return current


def save_trajectory(traj: Trajectory, path: str | Path) -> None:
    """Write the spill-to-disk cache: header then raw float32 LE planes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    shape = traj.latents[0].shape
    with open(path, "wb") as fh:
        fh.write(_TRAJ_MAGIC)
        fh.write(struct.pack("<B", _TRAJ_VERSION))
        fh.write(bytes.fromhex(traj.schedule_hash))
        fh.write(struct.pack("<3I", *shape))
        fh.write(struct.pack("<I", len(traj.timesteps) - 1))
        fh.write(struct.pack(f"<{len(traj.timesteps)}I", *traj.timesteps))
        for latent in traj.latents:
            fh.write(latent.values.astype("<f4").tobytes())


def load_trajectory(path: str | Path, expected_schedule: Optional[NoiseSchedule] = None) -> Trajectory:
    path = Path(path)
    raw = path.read_bytes()
    header = struct.calcsize("<4sB32s3II")
    if len(raw) < header:
        raise CacheFormatError(f"{path}: truncated header")
    magic, version, shash, c, h, w, steps = struct.unpack_from("<4sB32s3II", raw)
    if magic != _TRAJ_MAGIC:
        raise CacheFormatError(f"{path}: bad magic {magic!r}")
    if version != _TRAJ_VERSION:
        raise CacheFormatError(f"{path}: unsupported version {version}")
    offset = header
    count = steps + 1
    need = offset + 4 * count
    if len(raw) < need:
        raise CacheFormatError(f"{path}: truncated timestep table")
    timesteps = struct.unpack_from(f"<{count}I", raw, offset)
    offset = need
    plane = c * h * w * 4
    if len(raw) != offset + plane * count:
        raise CacheFormatError(f"{path}: expected {plane * count} bytes of planes")
    stored_hash = shash.hex()
    if expected_schedule is not None and schedule_hash(expected_schedule) != stored_hash:
        raise ScheduleMismatchError(f"{path}: trajectory was cached under a different schedule")
    latents = []
    for i, t in enumerate(timesteps):
        vals = np.frombuffer(raw, dtype="<f4", count=c * h * w, offset=offset + i * plane)
        latents.append(LatentGrid(vals.reshape(c, h, w).astype(np.float64), timestep_tag=int(t)))
    return Trajectory(tuple(latents), tuple(int(t) for t in timesteps), stored_hash)


def schedule_descriptor_json(schedule: NoiseSchedule, timesteps: Sequence[int]) -> str:
    """Stable JSON echo used in provenance records."""
    return json.dumps(
        {"T": schedule.num_steps, "hash": schedule_hash(schedule), "timesteps": list(timesteps)},
        sort_keys=True,
    )
