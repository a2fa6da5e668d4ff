"""Fixed and randomized acquisition protocols.

Random draws are uniform over each range. A TE that lands at or beyond the
drawn TR is redrawn on its own, which keeps the TR and FA marginals exactly
uniform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .core import AcquisitionParams, MultiechoSession, Protocol

MULTIECHO = "multiecho"
INDEPENDENT = "independent"

BASELINE_TE_MS = (7.0, 15.0, 25.0)
BASELINE_TR_MS = 37.0
BASELINE_FA_DEG = 20.0

_MAX_REDRAWS = 10_000
_FA_EDGE_DEG = 1e-6


class ProtocolConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProtocolDistribution:
    te_range_ms: tuple[float, float] = (5.0, 80.0)
    tr_range_ms: tuple[float, float] = (30.0, 100.0)
    fa_range_deg: tuple[float, float] = (5.0, 80.0)
    echoes_per_session: int = 3
    mode: str = MULTIECHO

    def __post_init__(self) -> None:
        for name in ("te_range_ms", "tr_range_ms", "fa_range_deg"):
            lo, hi = (float(v) for v in getattr(self, name))
            object.__setattr__(self, name, (lo, hi))
            if not lo < hi:
                raise ProtocolConfigError(f"{name}: low must be < high, got [{lo}, {hi}]")
        if self.te_range_ms[0] <= 0 or self.tr_range_ms[0] <= 0:
            raise ProtocolConfigError("te_range_ms and tr_range_ms must be positive")
        if not (0 < self.fa_range_deg[0] and self.fa_range_deg[1] < 180):
            raise ProtocolConfigError("fa_range_deg must lie inside (0, 180)")
        if self.mode not in (MULTIECHO, INDEPENDENT):
            raise ProtocolConfigError(f"mode must be '{MULTIECHO}' or '{INDEPENDENT}', got {self.mode!r}")
        if int(self.echoes_per_session) < 1:
            raise ProtocolConfigError("echoes_per_session must be >= 1")
        if self.te_range_ms[0] >= self.tr_range_ms[1]:
            raise ProtocolConfigError("te_range low >= tr_range high: TE < TR is unsatisfiable")

    def with_mode(self, mode: str) -> "ProtocolDistribution":
        return ProtocolDistribution(self.te_range_ms, self.tr_range_ms, self.fa_range_deg,
                                    self.echoes_per_session, mode)

    def to_dict(self) -> dict[str, Any]:
        return {
            "te_range": list(self.te_range_ms),
            "tr_range": list(self.tr_range_ms),
            "fa_range": list(self.fa_range_deg),
            "echoes": self.echoes_per_session,
            "mode": self.mode,
        }


def training_input_distribution() -> ProtocolDistribution:
    return ProtocolDistribution(mode=MULTIECHO)


def training_output_distribution() -> ProtocolDistribution:
    return ProtocolDistribution(mode=INDEPENDENT)


def _uniform(rng: np.random.Generator, lo_hi: tuple[float, float]) -> float:
    return float(rng.uniform(lo_hi[0], lo_hi[1]))


def _draw_te(rng: np.random.Generator, dist: ProtocolDistribution, tr: float) -> float:
    for _ in range(_MAX_REDRAWS):
        te = _uniform(rng, dist.te_range_ms)
        if te < tr:
            return te
    raise ProtocolConfigError(f"could not draw TE < TR={tr} from {dist.te_range_ms}")


def sample_input_session(dist: ProtocolDistribution, rng: np.random.Generator) -> MultiechoSession:
    """One TR, one FA, ``echoes_per_session`` distinct ascending TEs below TR."""
    if dist.mode != MULTIECHO:
        raise ProtocolConfigError("sample_input_session needs a multiecho distribution")
    tr = _uniform(rng, dist.tr_range_ms)
    fa = _uniform(rng, dist.fa_range_deg)
    tes: list[float] = []
    while len(tes) < dist.echoes_per_session:
        te = _draw_te(rng, dist, tr)
        if te not in tes:
            tes.append(te)
    return MultiechoSession.build(tr, fa, sorted(tes))


def sample_output_contrasts(dist: ProtocolDistribution, count: int, rng: np.random.Generator) -> Protocol:
    """``count`` contrasts with TR, FA and TE drawn independently per contrast."""
    if dist.mode != INDEPENDENT:
        raise ProtocolConfigError("sample_output_contrasts needs an independent distribution")
    if count < 1:
        raise ProtocolConfigError("count must be >= 1")
    entries = []
    for _ in range(count):
        tr = _uniform(rng, dist.tr_range_ms)
        fa = _uniform(rng, dist.fa_range_deg)
        te = _draw_te(rng, dist, tr)
        entries.append(AcquisitionParams(tr, te, fa))
    return Protocol(tuple(entries))


def fixed_baseline_session() -> MultiechoSession:
    return MultiechoSession.build(BASELINE_TR_MS, BASELINE_FA_DEG, BASELINE_TE_MS)


def perturb_flip_angle(session: MultiechoSession, max_delta_deg: float, rng: np.random.Generator) -> MultiechoSession:
    """Shift the shared FA by one uniform draw in [-max_delta, +max_delta].

    The result is kept inside (0, 180). A zero ``max_delta_deg`` returns the
    session unchanged and consumes no randomness.
    """
    if max_delta_deg < 0:
        raise ProtocolConfigError("max_delta_deg must be >= 0")
    if max_delta_deg == 0:
        return session
    fa = session.fa_deg + float(rng.uniform(-max_delta_deg, max_delta_deg))
    fa = float(np.clip(fa, _FA_EDGE_DEG, 180.0 - _FA_EDGE_DEG))
    return MultiechoSession.build(session.tr_ms, fa, session.te_ms)
