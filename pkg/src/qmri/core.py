"""Domain types, raster containers and seeding shared by every module.

Units are milliseconds and degrees at every API boundary. Radians only
appear inside trigonometric evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np

PD_MIN = float(np.finfo(np.float64).tiny)


class DomainError(ValueError):
    """Raised when a numeric routine receives inputs violating an invariant."""


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic PCG64 stream. Identical seeds give bit-identical draws."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def spawn_seeds(rng: np.random.Generator, n: int) -> list[int]:
    """Draw ``n`` 63-bit sub-seeds for independent per-item streams."""
    return [int(s) for s in rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)]


# --------------------------------------------------------------------------
# Scalar types


@dataclass(frozen=True)
class TissueProperties:
    t1_ms: float
    t2s_ms: float
    pd: float

    def to_dict(self) -> dict[str, float]:
        return {"t1_ms": self.t1_ms, "t2s_ms": self.t2s_ms, "pd": self.pd}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TissueProperties":
        return cls(float(d["t1_ms"]), float(d["t2s_ms"]), float(d["pd"]))


@dataclass(frozen=True)
class AcquisitionParams:
    tr_ms: float
    te_ms: float
    fa_deg: float

    def to_dict(self) -> dict[str, float]:
        return {"tr_ms": self.tr_ms, "te_ms": self.te_ms, "fa_deg": self.fa_deg}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AcquisitionParams":
        return cls(float(d["tr_ms"]), float(d["te_ms"]), float(d["fa_deg"]))


@dataclass(frozen=True)
class Protocol:
    """Ordered acquisition settings; entry ``k`` aligns with stack channel ``k``."""

    entries: tuple[AcquisitionParams, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, k: int) -> AcquisitionParams:
        return self.entries[k]

    def __iter__(self):
        return iter(self.entries)

    def as_array(self) -> np.ndarray:
        """(K, 3) array of (TR, TE, FA) rows."""
        return np.array([[e.tr_ms, e.te_ms, e.fa_deg] for e in self.entries], dtype=np.float64).reshape(-1, 3)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Protocol":
        return cls(tuple(AcquisitionParams(float(r[0]), float(r[1]), float(r[2])) for r in np.asarray(arr)))

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "protocol", "entries": [e.to_dict() for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Protocol":
        entries = tuple(AcquisitionParams.from_dict(e) for e in d["entries"])
        if d.get("kind") == "multiecho":
            return MultiechoSession(entries)
        return cls(entries)


@dataclass(frozen=True)
class MultiechoSession(Protocol):
    """Protocol with one TR, one FA and strictly increasing echo times."""

    @property
    def tr_ms(self) -> float:
        return self.entries[0].tr_ms

    @property
    def fa_deg(self) -> float:
        return self.entries[0].fa_deg

    @property
    def te_ms(self) -> tuple[float, ...]:
        return tuple(e.te_ms for e in self.entries)

    @classmethod
    def build(cls, tr_ms: float, fa_deg: float, te_ms: Iterable[float]) -> "MultiechoSession":
        return cls(tuple(AcquisitionParams(float(tr_ms), float(te), float(fa_deg)) for te in te_ms))

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "multiecho", "entries": [e.to_dict() for e in self.entries]}


# --------------------------------------------------------------------------
# Rasters


@dataclass(frozen=True, eq=False)
class PropertyMap:
    """T1/T2*/PD rasters of shape (height, width); voxel (x, y) is flat index y*width + x."""

    t1_ms: np.ndarray
    t2s_ms: np.ndarray
    pd: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        for name in ("t1_ms", "t2s_ms", "pd"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.mask is not None:
            m = np.array(self.mask, dtype=bool)
            m.setflags(write=False)
            object.__setattr__(self, "mask", m)

    @property
    def height(self) -> int:
        return int(self.t1_ms.shape[0])

    @property
    def width(self) -> int:
        return int(self.t1_ms.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def voxel(self, x: int, y: int) -> TissueProperties:
        return TissueProperties(float(self.t1_ms[y, x]), float(self.t2s_ms[y, x]), float(self.pd[y, x]))

    def flat(self) -> np.ndarray:
        """(width*height, 3) row-major array of (T1, T2*, PD)."""
        return np.stack([self.t1_ms.ravel(), self.t2s_ms.ravel(), self.pd.ravel()], axis=1)

    def foreground(self) -> np.ndarray:
        return np.ones(self.shape, dtype=bool) if self.mask is None else self.mask

    @classmethod
    def from_flat(cls, values: np.ndarray, height: int, width: int, mask: np.ndarray | None = None) -> "PropertyMap":
        v = np.asarray(values, dtype=np.float64).reshape(height * width, 3)
        return cls(v[:, 0].reshape(height, width), v[:, 1].reshape(height, width),
                   v[:, 2].reshape(height, width), mask)

    @classmethod
    def uniform(cls, p: TissueProperties, height: int, width: int) -> "PropertyMap":
        full = lambda v: np.full((height, width), v, dtype=np.float64)  # noqa: E731
        return cls(full(p.t1_ms), full(p.t2s_ms), full(p.pd))


@dataclass(frozen=True, eq=False)
class ContrastStack:
    """Signal intensities of shape (channels, height, width), channel k acquired with protocol[k]."""

    intensities: np.ndarray
    protocol: Protocol
    noisy: bool = False

    def __post_init__(self) -> None:
        arr = np.array(self.intensities, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        arr.setflags(write=False)
        object.__setattr__(self, "intensities", arr)

    @property
    def channels(self) -> int:
        return int(self.intensities.shape[0])

    @property
    def height(self) -> int:
        return int(self.intensities.shape[1])

    @property
    def width(self) -> int:
        return int(self.intensities.shape[2])

    def voxels(self) -> np.ndarray:
        """(height*width, channels) per-voxel signal vectors."""
        return self.intensities.reshape(self.channels, -1).T


# --------------------------------------------------------------------------
# Validation


def _check_tissue(p: TissueProperties, path: str) -> list[Violation]:
    out = []
    if not (np.isfinite(p.t1_ms) and p.t1_ms > 0):
        out.append(Violation(f"{path}t1_ms", "t1_ms > 0 required"))
    if not (np.isfinite(p.t2s_ms) and p.t2s_ms > 0):
        out.append(Violation(f"{path}t2s_ms", "t2s_ms > 0 required"))
    if not (0 < p.pd <= 1):
        out.append(Violation(f"{path}pd", "pd in (0, 1] required"))
    return out


def _check_acq(a: AcquisitionParams, path: str) -> list[Violation]:
    out = []
    if not (np.isfinite(a.tr_ms) and a.tr_ms > 0):
        out.append(Violation(f"{path}tr_ms", "tr_ms > 0 required"))
    if not (np.isfinite(a.te_ms) and a.te_ms > 0):
        out.append(Violation(f"{path}te_ms", "te_ms > 0 required"))
    if not (a.te_ms < a.tr_ms):
        out.append(Violation(f"{path}te_ms", "te_ms < tr_ms required"))
    if not (0 < a.fa_deg < 180):
        out.append(Violation(f"{path}fa_deg", "fa_deg in (0, 180) required"))
    return out


def _check_protocol(p: Protocol, path: str) -> list[Violation]:
    out = []
    if len(p.entries) == 0:
        out.append(Violation(f"{path}entries", "protocol must be non-empty"))
    for k, e in enumerate(p.entries):
        out.extend(_check_acq(e, f"{path}entries[{k}]."))
    if isinstance(p, MultiechoSession) and p.entries:
        if any(e.tr_ms != p.entries[0].tr_ms for e in p.entries):
            out.append(Violation(f"{path}entries", "multiecho session requires a shared tr_ms"))
        if any(e.fa_deg != p.entries[0].fa_deg for e in p.entries):
            out.append(Violation(f"{path}entries", "multiecho session requires a shared fa_deg"))
        tes = [e.te_ms for e in p.entries]
        if any(b <= a for a, b in zip(tes, tes[1:])):
            out.append(Violation(f"{path}entries", "te_ms values must be strictly increasing"))
    return out


def _check_property_map(m: PropertyMap, path: str) -> list[Violation]:
    out = []
    shapes = {m.t1_ms.shape, m.t2s_ms.shape, m.pd.shape}
    if len(shapes) != 1 or m.t1_ms.ndim != 2 or 0 in m.t1_ms.shape:
        return [Violation(f"{path}voxels", "t1/t2s/pd rasters must share one non-empty 2D shape")]
    if m.mask is not None and m.mask.shape != m.t1_ms.shape:
        out.append(Violation(f"{path}mask", "mask shape must match rasters"))
    for name, ok in (
        ("t1_ms", np.isfinite(m.t1_ms) & (m.t1_ms > 0)),
        ("t2s_ms", np.isfinite(m.t2s_ms) & (m.t2s_ms > 0)),
        ("pd", (m.pd > 0) & (m.pd <= 1)),
    ):
        if not ok.all():
            ys, xs = np.nonzero(~ok)
            out.append(Violation(f"{path}voxels[{ys[0] * m.width + xs[0]}].{name}",
                                 f"{int((~ok).sum())} voxel(s) violate the {name} range"))
    return out


def _check_stack(s: ContrastStack, path: str) -> list[Violation]:
    out = _check_protocol(s.protocol, f"{path}protocol.")
    if s.intensities.ndim != 3 or 0 in s.intensities.shape:
        out.append(Violation(f"{path}intensities", "intensities must be a non-empty (C, H, W) array"))
        return out
    if s.channels != len(s.protocol):
        out.append(Violation(f"{path}channels", "channel count must equal protocol length"))
    if not np.isfinite(s.intensities).all():
        out.append(Violation(f"{path}intensities", "intensities must be finite"))
    if not s.noisy and (s.intensities < 0).any():
        out.append(Violation(f"{path}intensities", "noiseless intensities must be >= 0"))
    return out


def validate(entity: Any, path: str = "") -> list[Violation]:
    """Return every violated invariant of ``entity``; an empty list means valid.

    Never mutates and never raises on invalid content.
    """
    if isinstance(entity, TissueProperties):
        return _check_tissue(entity, path)
    if isinstance(entity, AcquisitionParams):
        return _check_acq(entity, path)
    if isinstance(entity, Protocol):
        return _check_protocol(entity, path)
    if isinstance(entity, PropertyMap):
        return _check_property_map(entity, path)
    if isinstance(entity, ContrastStack):
        return _check_stack(entity, path)
    return [Violation(path or "<root>", f"unsupported type {type(entity).__name__}")]


def require_valid(*entities: Any) -> None:
    for e in entities:
        problems = validate(e)
        if problems:
            raise DomainError("; ".join(str(v) for v in problems))


def as_session(protocol: Protocol | Sequence[AcquisitionParams]) -> MultiechoSession:
    entries = protocol.entries if isinstance(protocol, Protocol) else tuple(protocol)
    return MultiechoSession(entries)


__all__ = [
    "PD_MIN", "DomainError", "Violation", "seeded_rng", "spawn_seeds",
    "TissueProperties", "AcquisitionParams", "Protocol", "MultiechoSession",
    "PropertyMap", "ContrastStack", "validate", "require_valid", "as_session",
]
