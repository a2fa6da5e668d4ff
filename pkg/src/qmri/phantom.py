"""Synthetic tissue-property phantoms and simulated training/test datasets."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from . import flash
from .core import (
    PD_MIN,
    ContrastStack,
    DomainError,
    MultiechoSession,
    PropertyMap,
    Protocol,
    seeded_rng,
    spawn_seeds,
)
from .protocol import (
    ProtocolDistribution,
    sample_input_session,
    sample_output_contrasts,
)


@dataclass(frozen=True)
class TissueClass:
    name: str
    t1_range_ms: tuple[float, float]
    t2s_range_ms: tuple[float, float]
    pd_range: tuple[float, float]

    def __post_init__(self) -> None:
        for attr in ("t1_range_ms", "t2s_range_ms", "pd_range"):
            lo, hi = (float(v) for v in getattr(self, attr))
            if not (lo > 0 and hi >= lo):
                raise DomainError(f"tissue class {self.name!r}: {attr} must satisfy 0 < low <= high")
            object.__setattr__(self, attr, (lo, hi))
        if self.pd_range[1] > 1:
            raise DomainError(f"tissue class {self.name!r}: pd_range must lie in (0, 1]")


def default_classes() -> tuple[TissueClass, ...]:
    return (
        TissueClass("short_t1", (400.0, 900.0), (30.0, 60.0), (0.6, 0.8)),
        TissueClass("mid_t1", (900.0, 1600.0), (50.0, 90.0), (0.7, 0.9)),
        TissueClass("long_t1", (2000.0, 3000.0), (80.0, 150.0), (0.9, 1.0)),
    )


@dataclass(frozen=True)
class PhantomConfig:
    width: int = 64
    height: int = 64
    classes: tuple[TissueClass, ...] = field(default_factory=default_classes)
    n_blobs: tuple[int, int] = (4, 10)
    smooth_size: int = 3


def _ellipse(xx, yy, cx, cy, a, b, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def phantom_layers(
    width: int,
    height: int,
    classes: Sequence[TissueClass],
    rng: np.random.Generator,
    n_blobs: tuple[int, int] = (4, 10),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unsmoothed phantom: (labels, raw values (3, H, W), foreground mask).

    ``labels`` is -1 on background.
    """
    if not classes:
        raise DomainError("at least one tissue class is required")
    if width < 8 or height < 8:
        raise DomainError(f"phantom dimensions must be >= 8, got {width}x{height}")
    ys = np.linspace(-1.0, 1.0, height)
    xs = np.linspace(-1.0, 1.0, width)
    xx, yy = np.meshgrid(xs, ys)

    head = _ellipse(xx, yy, rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                    rng.uniform(0.7, 0.9), rng.uniform(0.7, 0.9), rng.uniform(0, np.pi))
    labels = np.full((height, width), -1, dtype=np.int64)
    labels[head] = rng.integers(len(classes))
    for _ in range(int(rng.integers(n_blobs[0], n_blobs[1] + 1))):
        blob = _ellipse(xx, yy, rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6),
                        rng.uniform(0.15, 0.45), rng.uniform(0.15, 0.45), rng.uniform(0, np.pi))
        labels[blob & head] = rng.integers(len(classes))

    raw = np.zeros((3, height, width))
    u = rng.uniform(size=(3, height, width))
    for k, cls in enumerate(classes):
        sel = labels == k
        for j, (lo, hi) in enumerate((cls.t1_range_ms, cls.t2s_range_ms, cls.pd_range)):
            raw[j][sel] = lo + (hi - lo) * u[j][sel]
    return labels, raw, head


def _hull(classes: Sequence[TissueClass]) -> np.ndarray:
    """(3, 2) per-property [min low, max high] over the classes."""
    return np.array([
        [min(c.t1_range_ms[0] for c in classes), max(c.t1_range_ms[1] for c in classes)],
        [min(c.t2s_range_ms[0] for c in classes), max(c.t2s_range_ms[1] for c in classes)],
        [min(c.pd_range[0] for c in classes), max(c.pd_range[1] for c in classes)],
    ])


def generate_phantom(
    width: int,
    height: int,
    classes: Sequence[TissueClass],
    geometry_seed: np.random.Generator,
    n_blobs: tuple[int, int] = (4, 10),
    smooth_size: int = 3,
) -> PropertyMap:
    """Piecewise-smooth property map with a recorded foreground mask.

    Foreground values are drawn per voxel inside their class ranges and
    averaged over foreground neighbours only. Background voxels get the
    smallest positive PD and mid-range relaxation times.
    """
    labels, raw, mask = phantom_layers(width, height, classes, geometry_seed, n_blobs)
    hull = _hull(classes)
    m = mask.astype(np.float64)
    weight = uniform_filter(m, size=smooth_size, mode="constant")
    out = np.empty_like(raw)
    for j in range(3):
        num = uniform_filter(raw[j] * m, size=smooth_size, mode="constant")
        sm = np.divide(num, weight, out=np.zeros_like(num), where=weight > 0)
        # clip removes the last-ulp excursions of the normalised average
        out[j] = np.where(mask, np.clip(sm, hull[j, 0], hull[j, 1]), 0.0)
    out[0][~mask] = 0.5 * (hull[0, 0] + hull[0, 1])
    out[1][~mask] = 0.5 * (hull[1, 0] + hull[1, 1])
    out[2][~mask] = PD_MIN
    return PropertyMap(out[0], out[1], out[2], mask=mask)


def phantom_from_config(cfg: PhantomConfig, rng: np.random.Generator) -> PropertyMap:
    return generate_phantom(cfg.width, cfg.height, cfg.classes, rng, cfg.n_blobs, cfg.smooth_size)


# --------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True, eq=False)
class DatasetItem:
    gt: PropertyMap | None
    input_session: MultiechoSession
    input_stack: ContrastStack
    output_protocol: Protocol
    output_stack: ContrastStack
    geometry_seed: int = 0
    protocol_seed: int = 0
    noise_seed: int = 0
    snr: float | None = None
    noisy_targets: bool = False

    def without_gt(self) -> "DatasetItem":
        return replace(self, gt=None)


InputSpec = ProtocolDistribution | MultiechoSession
OutputSpec = ProtocolDistribution | Protocol | None


def _draw_protocols(input_spec: InputSpec, output_spec: OutputSpec, n_out: int, rng: np.random.Generator):
    if isinstance(input_spec, ProtocolDistribution):
        session = sample_input_session(input_spec, rng)
    else:
        session = input_spec
    if output_spec is None:
        out = Protocol(session.entries)
    elif isinstance(output_spec, ProtocolDistribution):
        out = sample_output_contrasts(output_spec, n_out, rng)
    else:
        out = output_spec
    return session, out


def simulate_item(
    gt: PropertyMap,
    session: MultiechoSession,
    output_protocol: Protocol,
    snr: float | None,
    noise_seed: int,
    noisy_targets: bool = False,
) -> tuple[ContrastStack, ContrastStack]:
    """Noisy input stack and (by default noiseless) target stack for one phantom."""
    noise_rng = seeded_rng(noise_seed)
    clean_in = flash.flash_signal_batch(gt, session)
    y_in = clean_in if snr is None else flash.add_gaussian_noise(clean_in, snr, noise_rng, gt.mask)
    y_out = flash.flash_signal_batch(gt, output_protocol)
    if noisy_targets and snr is not None:
        y_out = flash.add_gaussian_noise(y_out, snr, noise_rng, gt.mask)
    return y_in, y_out


def simulate_dataset(
    n_items: int,
    phantom_cfg: PhantomConfig,
    input_dist: InputSpec,
    output_dist: OutputSpec,
    n_output_contrasts: int,
    snr: float | None,
    rng: np.random.Generator,
    noisy_targets: bool = False,
) -> list[DatasetItem]:
    """Simulate ``n_items`` (phantom, input session, output contrasts) triples.

    ``input_dist`` is either a multiecho distribution or a fixed session.
    ``output_dist`` is an independent distribution, a fixed protocol, or
    ``None`` to reuse the input session as the target protocol.
    """
    items = []
    for _ in range(n_items):
        g_seed, p_seed, n_seed = spawn_seeds(rng, 3)
        gt = phantom_from_config(phantom_cfg, seeded_rng(g_seed))
        session, out_protocol = _draw_protocols(input_dist, output_dist, n_output_contrasts, seeded_rng(p_seed))
        y_in, y_out = simulate_item(gt, session, out_protocol, snr, n_seed, noisy_targets)
        items.append(DatasetItem(gt, session, y_in, out_protocol, y_out, g_seed, p_seed, n_seed, snr, noisy_targets))
    return items


def resimulate(item: DatasetItem) -> tuple[ContrastStack, ContrastStack]:
    if item.gt is None:
        raise DomainError("item has no ground truth to re-simulate from")
    return simulate_item(item.gt, item.input_session, item.output_protocol, item.snr,
                         item.noise_seed, item.noisy_targets)


def _index_hash(i: int) -> bytes:
    return hashlib.sha256(f"item-{i}".encode()).digest()


def split_dataset(items: Sequence[DatasetItem], holdout_fraction: float):
    """Deterministic (train, test) split; test items are those with the smallest index hashes."""
    if not 0 < holdout_fraction < 1:
        raise ValueError("holdout_fraction must lie in (0, 1)")
    n = len(items)
    n_test = int(round(n * holdout_fraction))
    if n_test == 0 or n_test == n:
        raise ValueError(f"cannot split {n} item(s) at fraction {holdout_fraction}: one side would be empty")
    test_idx = set(sorted(range(n), key=_index_hash)[:n_test])
    train = [it for i, it in enumerate(items) if i not in test_idx]
    test = [it for i, it in enumerate(items) if i in test_idx]
    return train, test


def geometry_seeds_disjoint(a: Sequence[DatasetItem], b: Sequence[DatasetItem]) -> bool:
    return not ({it.geometry_seed for it in a} & {it.geometry_seed for it in b})
