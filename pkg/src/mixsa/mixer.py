"""Query blending and reference-keyed attention, packaged as a controller.

The generating trajectory starts from the contour image's noise endpoint; at
each injection site its live K/V are discarded in favor of the reference
sketch's banked K/V, and the query becomes

    Q_mix = zeta * (beta * Q_color + (1 - beta) * Q_contour) + (1 - zeta) * Q_ref

with all three query sources read from the banks at the same (site, timestep)
so the blend is exactly reproducible.  zeta steers style adherence, beta
steers texture retention.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import attnbank
from .attnbank import AttentionBank, BankKey
from .backend import DEFAULT_TARGET_SITES, AttentionController, AttentionSiteId, softmax_attention
from .errors import DimensionMismatchError, MissingKeyError

log = logging.getLogger("mixsa.mixer")

DEFAULT_ZETA = 0.4
DEFAULT_BETA = 0.5


def _clamp01(value: float, name: str) -> float:
    if 0.0 <= value <= 1.0:
        return float(value)
    clamped = min(max(float(value), 0.0), 1.0)
    log.warning("%s=%s outside [0, 1]; clamped to %s", name, value, clamped)
    return clamped


@dataclass(frozen=True)
class MixParams:
    """Control knobs: zeta (style adherence), beta (texture retention),
    the injection site set, and an optional softmax scale dimension."""

    zeta: float = DEFAULT_ZETA
    beta: float = DEFAULT_BETA
    target_sites: frozenset[int] = field(default_factory=lambda: frozenset(DEFAULT_TARGET_SITES))
    scale_d: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "zeta", _clamp01(self.zeta, "zeta"))
        object.__setattr__(self, "beta", _clamp01(self.beta, "beta"))
        object.__setattr__(self, "target_sites", frozenset(self.target_sites))


def blend_queries(qc: np.ndarray, qs: np.ndarray, qr: np.ndarray, p: MixParams) -> np.ndarray:
    """Affine query mixture with coefficients (zeta*beta, zeta*(1-beta), 1-zeta)."""
    qc, qs, qr = (np.asarray(a, dtype=np.float64) for a in (qc, qs, qr))
    if not (qc.shape == qs.shape == qr.shape):
        raise DimensionMismatchError(
            f"query shapes differ: color {qc.shape}, contour {qs.shape}, reference {qr.shape}"
        )
    q_cs = p.beta * qc + (1.0 - p.beta) * qs
    return p.zeta * q_cs + (1.0 - p.zeta) * qr


def mixed_attention(qm: np.ndarray, kr: np.ndarray, vr: np.ndarray, p: MixParams) -> np.ndarray:
    """Softmax(qm kr^T / sqrt(d)) vr, applied independently per head."""
    qm, kr, vr = (np.asarray(a, dtype=np.float64) for a in (qm, kr, vr))
    if kr.shape[-2] != vr.shape[-2]:
        raise DimensionMismatchError(f"key/value token counts differ: {kr.shape} vs {vr.shape}")
    if qm.shape[-1] != kr.shape[-1]:
        raise DimensionMismatchError(f"query head-dim {qm.shape[-1]} != key head-dim {kr.shape[-1]}")
    if qm.shape[:-2] != kr.shape[:-2]:
        raise DimensionMismatchError(f"head layouts differ: {qm.shape} vs {kr.shape}")
    return softmax_attention(qm, kr, vr, scale_dim=p.scale_d)


def make_controller(banks: Mapping[str, AttentionBank], p: MixParams) -> AttentionController:
    """Build the attention controller applied during sketch generation.

    At injection sites the live tensors are ignored entirely: Q_color and
    Q_contour come from their banks, Q_ref/K_ref/V_ref from the reference
    bank, all at the invocation's (site, timestep).  Every other site passes
    through untouched.
    """
    reference = banks[attnbank.SOURCE_REFERENCE]
    color = banks[attnbank.SOURCE_COLOR]
    contour = banks[attnbank.SOURCE_CONTOUR]
    targets = p.target_sites

    def controller(site: AttentionSiteId, timestep: int, q, k, v):
        if site.index not in targets:
            return q, k, v
        qc = attnbank.lookup(color, BankKey(timestep, site.index, attnbank.KIND_Q, attnbank.SOURCE_COLOR))
        qs = attnbank.lookup(contour, BankKey(timestep, site.index, attnbank.KIND_Q, attnbank.SOURCE_CONTOUR))
        qr = attnbank.lookup(reference, BankKey(timestep, site.index, attnbank.KIND_Q, attnbank.SOURCE_REFERENCE))
        kr = attnbank.lookup(reference, BankKey(timestep, site.index, attnbank.KIND_K, attnbank.SOURCE_REFERENCE))
        vr = attnbank.lookup(reference, BankKey(timestep, site.index, attnbank.KIND_V, attnbank.SOURCE_REFERENCE))
        qm = blend_queries(qc, qs, qr, p)
        return mixed_attention(qm, kr, vr, p)

    return controller


def validate_banks(banks: Mapping[str, AttentionBank], p: MixParams, timesteps, schedule_hash: str) -> None:
    """Pipeline-facing completeness check; raises before generation starts."""
    missing = [s for s in attnbank.SOURCES if s not in banks]
    if missing:
        raise MissingKeyError(f"bank set lacks sources: {missing}")
    attnbank.validate_complete(banks, sorted(p.target_sites), timesteps, schedule_hash)
