"""Per-timestep, per-site storage for captured self-attention tensors.

Three inversions feed one bank set: the reference sketch contributes K and V
(plus its own Q), the color image and the contour image contribute Q.  Banks
are written once during inversion and treated as read-only afterwards.

Cache file format (little-endian): magic ``MSAB``, version byte, a
length-prefixed JSON metadata block (schedule hash, site list, timesteps,
source hashes), a record count, then per record the key (timestep u32,
site u32, kind u8, source u8) followed by ndim/dims and raw float32 data.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .backend import AttentionController, AttentionSiteId
from .errors import CacheFormatError, DuplicateKeyError, MissingKeyError, ScheduleMismatchError

KIND_Q, KIND_K, KIND_V = "Q", "K", "V"
KINDS = (KIND_Q, KIND_K, KIND_V)

SOURCE_REFERENCE, SOURCE_COLOR, SOURCE_CONTOUR = "reference", "color", "contour"
SOURCES = (SOURCE_REFERENCE, SOURCE_COLOR, SOURCE_CONTOUR)

_MAGIC = b"MSAB"
_VERSION = 1
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}
_SOURCE_CODE = {s: i for i, s in enumerate(SOURCES)}


@dataclass(frozen=True, order=True)
class BankKey:
    """Identifies one stored tensor: (timestep, site index, kind, source)."""

    timestep: int
    site: int
    kind: str
    source: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")


@dataclass
class AttentionBank:
    """Tensor store plus the metadata that binds it to one inversion run."""

    schedule_hash: str
    timesteps: tuple[int, ...] = ()
    site_list: tuple[int, ...] = ()
    source_hash: str = ""
    entries: dict[BankKey, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)


def record(bank: AttentionBank, key: BankKey, tensor: np.ndarray) -> None:
    if key in bank.entries:
        raise DuplicateKeyError(f"bank already holds {key}")
    bank.entries[key] = np.ascontiguousarray(tensor, dtype=np.float32)


def lookup(bank: AttentionBank, key: BankKey) -> np.ndarray:
    try:
        return bank.entries[key]
    except KeyError:
        raise MissingKeyError(f"bank has no entry for {key}") from None


def save_cache(bank: AttentionBank, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(serialize(bank))


def serialize(bank: AttentionBank) -> bytes:
    meta = json.dumps(
        {
            "schedule_hash": bank.schedule_hash,
            "timesteps": list(bank.timesteps),
            "site_list": list(bank.site_list),
            "source_hash": bank.source_hash,
        },
        sort_keys=True,
    ).encode()
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<B", _VERSION)
    out += struct.pack("<I", len(meta))
    out += meta
    out += struct.pack("<I", len(bank.entries))
    for key in sorted(bank.entries):
        tensor = bank.entries[key]
        out += struct.pack(
            "<IIBB", key.timestep, key.site, _KIND_CODE[key.kind], _SOURCE_CODE[key.source]
        )
        out += struct.pack("<B", tensor.ndim)
        out += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
        out += tensor.astype("<f4").tobytes()
    return bytes(out)


def load_cache(path: str | Path, expected_schedule_hash: Optional[str] = None) -> AttentionBank:
    raw = Path(path).read_bytes()
    return deserialize(raw, expected_schedule_hash, origin=str(path))


def deserialize(raw: bytes, expected_schedule_hash: Optional[str] = None, origin: str = "<bytes>") -> AttentionBank:
    view = memoryview(raw)
    offset = 0

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(view):
            raise CacheFormatError(f"{origin}: truncated at byte {offset}")
        vals = struct.unpack_from(fmt, view, offset)
        offset += size
        return vals

    magic, version, meta_len = take("<4sBI")
    if magic != _MAGIC:
        raise CacheFormatError(f"{origin}: bad magic {magic!r}")
    if version != _VERSION:
        raise CacheFormatError(f"{origin}: unsupported version {version}")
    if offset + meta_len > len(view):
        raise CacheFormatError(f"{origin}: truncated metadata block")
    try:
        meta = json.loads(bytes(view[offset : offset + meta_len]))
    except ValueError as exc:
        raise CacheFormatError(f"{origin}: corrupt metadata block: {exc}") from exc
    offset += meta_len
    if expected_schedule_hash is not None and meta.get("schedule_hash") != expected_schedule_hash:
        raise ScheduleMismatchError(
            f"{origin}: bank schedule hash {meta.get('schedule_hash')!r} does not match consumer"
        )
    bank = AttentionBank(
        schedule_hash=meta["schedule_hash"],
        timesteps=tuple(meta["timesteps"]),
        site_list=tuple(meta["site_list"]),
        source_hash=meta.get("source_hash", ""),
    )
    kinds = {v: k for k, v in _KIND_CODE.items()}
    sources = {v: s for s, v in _SOURCE_CODE.items()}
    (count,) = take("<I")
    for _ in range(count):
        timestep, site, kind_code, source_code = take("<IIBB")
        if kind_code not in kinds or source_code not in sources:
            raise CacheFormatError(f"{origin}: unknown kind/source code in record")
        (ndim,) = take("<B")
        dims = take(f"<{ndim}I")
        n = int(np.prod(dims)) if ndim else 1
        size = 4 * n
        if offset + size > len(view):
            raise CacheFormatError(f"{origin}: truncated tensor data")
        tensor = np.frombuffer(view, dtype="<f4", count=n, offset=offset).reshape(dims).copy()
        offset += size
        record(bank, BankKey(timestep, site, kinds[kind_code], sources[source_code]), tensor)
    if offset != len(view):
        raise CacheFormatError(f"{origin}: {len(view) - offset} trailing bytes")
    return bank


def bank_fingerprint(bank: AttentionBank) -> str:
    return hashlib.sha256(serialize(bank)).hexdigest()


def make_capture_controller(
    bank: AttentionBank,
    source: str,
    kinds: Sequence[str],
    target_sites: Optional[Iterable[int]] = None,
) -> AttentionController:
    """A pass-through controller that records tensors at the given sites.

    ``target_sites`` of None banks every site (the research flag); the default
    pipeline banks only the injection sites to keep memory flat.
    """
    if source not in SOURCES:
        raise ValueError(f"unknown source {source!r}")
    wanted_kinds = tuple(kinds)
    sites = None if target_sites is None else frozenset(target_sites)

    def controller(site: AttentionSiteId, timestep: int, q, k, v):
        if sites is None or site.index in sites:
            tensors = {KIND_Q: q, KIND_K: k, KIND_V: v}
            for kind in wanted_kinds:
                record(bank, BankKey(timestep, site.index, kind, source), tensors[kind])
        return q, k, v

    return controller


# Per-source tensor kinds each inversion must contribute.
REQUIRED_KINDS: Mapping[str, tuple[str, ...]] = {
    SOURCE_REFERENCE: (KIND_Q, KIND_K, KIND_V),
    SOURCE_COLOR: (KIND_Q,),
    SOURCE_CONTOUR: (KIND_Q,),
}


def validate_complete(
    banks: Mapping[str, AttentionBank],
    target_sites: Iterable[int],
    timesteps: Sequence[int],
    expected_schedule_hash: str,
) -> None:
    """Check the bank set can serve a full generation; raise otherwise.

    Generation evaluates the denoiser at every timestep in the subsequence
    except t=0.
    """
    eval_steps = [t for t in timesteps if t != 0]
    for source, bank in banks.items():
        if bank.schedule_hash != expected_schedule_hash:
            raise ScheduleMismatchError(
                f"{source} bank was captured under schedule {bank.schedule_hash[:12]}..., "
                f"generation runs under {expected_schedule_hash[:12]}..."
            )
    for source, kinds in REQUIRED_KINDS.items():
        if source not in banks:
            raise MissingKeyError(f"no {source} bank supplied")
        bank = banks[source]
        for site in target_sites:
            for t in eval_steps:
                for kind in kinds:
                    key = BankKey(t, site, kind, source)
                    if key not in bank.entries:
                        raise MissingKeyError(f"bank incomplete: missing {key}")
