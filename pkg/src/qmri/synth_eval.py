"""Contrast synthesis from estimates, MAE metrics and the four experiment harnesses.

Experiments share one set of trained models per seed:

1. property estimation from the fixed baseline session (multi vs fixed)
2. the same with the input flip angle perturbed (property and synthesis MAE)
3. synthesis of random unseen contrasts from the baseline session (multi vs fixed)
4. synthesis-loss network vs fixed network on unseen contrasts
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import fit_neural as fn
from . import flash
from .core import ContrastStack, PropertyMap, Protocol, seeded_rng, spawn_seeds
from .phantom import (
    DatasetItem,
    PhantomConfig,
    geometry_seeds_disjoint,
    simulate_dataset,
    simulate_item,
)
from .protocol import (
    ProtocolDistribution,
    fixed_baseline_session,
    perturb_flip_angle,
    training_input_distribution,
    training_output_distribution,
)

log = logging.getLogger(__name__)

EXPERIMENT_IDS = (1, 2, 3, 4)
CSV_COLUMNS = ("experiment_id", "slice_id", "model", "metric", "value")
METRIC_NAMES = {
    "t1_ms": "t1_mae_ms",
    "t2s_ms": "t2s_mae_ms",
    "pd": "pd_mae",
    "pd_pct": "pd_mae_pct",
    "synth": "synth_mae",
    "synth_unperturbed": "synth_mae_unperturbed",
    "synth_degradation": "synth_degradation",
}

# which trained models each experiment compares: (proposed, reference)
EXPERIMENT_MODELS = {1: ("multi", "fixed"), 2: ("multi", "fixed"), 3: ("multi", "fixed"), 4: ("synth", "fixed")}


def synthesize(props: PropertyMap, protocol: Protocol) -> ContrastStack:
    """Forward-model synthesis of new contrasts from (estimated) properties."""
    return flash.flash_signal_batch(props, protocol)


def _mask_for(shape: tuple[int, int], mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} differs from raster shape {shape}")
    return mask


def mae(estimate, gold, mask: np.ndarray | None = None) -> dict:
    """Mean absolute error over masked voxels.

    Property maps give ``t1_ms``, ``t2s_ms``, ``pd`` and ``pd_pct``; contrast
    stacks give ``synth`` (over voxels and channels) and ``per_contrast``.
    """
    if isinstance(estimate, PropertyMap) and isinstance(gold, PropertyMap):
        if estimate.shape != gold.shape:
            raise ValueError(f"shape mismatch {estimate.shape} vs {gold.shape}")
        m = _mask_for(gold.shape, mask)
        out = {
            "t1_ms": float(np.abs(estimate.t1_ms - gold.t1_ms)[m].mean()),
            "t2s_ms": float(np.abs(estimate.t2s_ms - gold.t2s_ms)[m].mean()),
            "pd": float(np.abs(estimate.pd - gold.pd)[m].mean()),
        }
        out["pd_pct"] = 100.0 * out["pd"]
        return out
    if isinstance(estimate, ContrastStack) and isinstance(gold, ContrastStack):
        if estimate.intensities.shape != gold.intensities.shape:
            raise ValueError(f"shape mismatch {estimate.intensities.shape} vs {gold.intensities.shape}")
        m = _mask_for((gold.height, gold.width), mask)
        diff = np.abs(estimate.intensities - gold.intensities)[:, m]
        return {"synth": float(diff.mean()), "per_contrast": diff.mean(axis=1)}
    raise TypeError("mae compares two PropertyMaps or two ContrastStacks")


def difference_map(estimate: np.ndarray, gold: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """|estimate - gold| normalised by the gold mean over the mask; zero outside it."""
    scale = float(np.mean(gold[mask])) if mask.any() else 1.0
    out = np.abs(estimate - gold) / (scale if scale != 0 else 1.0)
    return np.where(mask, out, 0.0)


# --------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    n_train: int = 1000
    n_test: int = 100
    width: int = 64
    height: int = 64
    snr: float | None = 50.0
    n_output_contrasts: int = 10
    max_delta_deg: float = 20.0
    comparable_factor: float = 1.05
    n_maps: int = 1
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 4096
    hidden: tuple[int, ...] = (128, 128)
    include_phi_in: bool = True
    baseline_include_phi_in: bool = False
    max_voxels_per_item: int | None = 400
    lr_schedule: str = "cosine"
    input_dist: ProtocolDistribution = field(default_factory=training_input_distribution)
    output_dist: ProtocolDistribution = field(default_factory=training_output_distribution)
    phantom: PhantomConfig | None = None

    def phantom_config(self) -> PhantomConfig:
        if self.phantom is not None:
            return self.phantom
        return PhantomConfig(width=self.width, height=self.height)

    def train_config(self, kind: str) -> fn.TrainConfig:
        mode = {"multi": fn.MULTI, "fixed": fn.FIXED, "synth": fn.SYNTH}[kind]
        phi = self.include_phi_in if kind == "multi" else self.baseline_include_phi_in
        return fn.TrainConfig(mode=mode, lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                              n_output_contrasts=self.n_output_contrasts, seed=self.seed, snr=self.snr,
                              include_phi_in=phi, hidden=self.hidden,
                              max_voxels_per_item=self.max_voxels_per_item, lr_schedule=self.lr_schedule)


def _streams(cfg: ExperimentConfig) -> dict[str, int]:
    train_seed, test_seed, perturb_seed = spawn_seeds(seeded_rng(cfg.seed), 3)
    return {"train": train_seed, "test": test_seed, "perturb": perturb_seed}


def training_data(cfg: ExperimentConfig, kind: str) -> list[DatasetItem]:
    """Training items for one model kind. All kinds share the same phantoms."""
    seed = _streams(cfg)["train"]
    base = fixed_baseline_session()
    if kind == "multi":
        spec_in, spec_out, n_out = cfg.input_dist, cfg.output_dist, cfg.n_output_contrasts
    elif kind == "fixed":
        spec_in, spec_out, n_out = base, None, len(base)
    elif kind == "synth":
        spec_in, spec_out, n_out = base, cfg.output_dist, cfg.n_output_contrasts
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return simulate_dataset(cfg.n_train, cfg.phantom_config(), spec_in, spec_out, n_out, cfg.snr, seeded_rng(seed))


def test_data(cfg: ExperimentConfig) -> list[DatasetItem]:
    """Held-out slices: baseline input session, random output contrasts."""
    return simulate_dataset(cfg.n_test, cfg.phantom_config(), fixed_baseline_session(), cfg.output_dist,
                            cfg.n_output_contrasts, cfg.snr, seeded_rng(_streams(cfg)["test"]))


def train_models(cfg: ExperimentConfig, kinds: Sequence[str] = ("multi", "fixed", "synth")):
    """Train the requested model kinds; returns ``{kind: (model, report)}``."""
    out = {}
    for kind in kinds:
        log.info("training %s model (%d phantoms, %d epochs)", kind, cfg.n_train, cfg.epochs)
        out[kind] = fn.train(cfg.train_config(kind), training_data(cfg, kind))
    return out


def perturbed_test_data(cfg: ExperimentConfig, items: Sequence[DatasetItem]) -> list[DatasetItem]:
    """Re-acquire each test slice with its flip angle shifted by up to ``max_delta_deg``."""
    rng = seeded_rng(_streams(cfg)["perturb"])
    out = []
    for it in items:
        session = perturb_flip_angle(it.input_session, cfg.max_delta_deg, rng)
        y_in, _ = simulate_item(it.gt, session, it.output_protocol, it.snr, it.noise_seed)
        out.append(replace(it, input_session=session, input_stack=y_in))
    return out


# --------------------------------------------------------------------------
# Running


@dataclass
class ExperimentResult:
    experiment_id: int
    rows: list[tuple[int, int, str, str, float]]
    summary: dict
    maps: dict[str, np.ndarray] = field(default_factory=dict)


def _estimate(model: fn.MlpModel, stack: ContrastStack) -> PropertyMap:
    with warnings.catch_warnings():
        # perturbed inputs to protocol-blind models are the point of experiment 2
        warnings.simplefilter("ignore", fn.ProtocolMismatchWarning)
        return fn.predict_map(model, stack)


def _slice_metrics(model, item: DatasetItem, want_props: bool, want_synth: bool):
    est = _estimate(model, item.input_stack)
    out: dict = {}
    if want_props:
        out.update(mae(est, item.gt, item.gt.mask))
    if want_synth:
        synth = synthesize(est, item.output_protocol)
        m = mae(synth, item.output_stack, item.gt.mask)
        out["synth"] = m["synth"]
        out["per_contrast"] = m["per_contrast"]
        out["_synth_stack"] = synth
    return out


def _fraction_le(a: np.ndarray, b: np.ndarray, factor: float) -> float:
    return float(np.mean(a <= b * factor))


def run_experiment(exp_id: int, cfg: ExperimentConfig, models: dict | None = None,
                   test_items: Sequence[DatasetItem] | None = None) -> ExperimentResult:
    """Run one experiment. ``models`` maps kind -> MlpModel (or (model, report));
    missing kinds are trained from ``cfg``."""
    if exp_id not in EXPERIMENT_IDS:
        raise ValueError(f"unknown experiment id {exp_id}; expected one of {EXPERIMENT_IDS}")
    proposed, reference = EXPERIMENT_MODELS[exp_id]
    models = dict(models or {})
    missing = [k for k in (proposed, reference) if k not in models]
    if missing:
        models.update(train_models(cfg, missing))
    nets = {k: (v[0] if isinstance(v, tuple) else v) for k, v in models.items()}

    items = list(test_items) if test_items is not None else test_data(cfg)
    train_probe = training_data(replace(cfg, n_train=min(cfg.n_train, 4)), "multi")
    if not geometry_seeds_disjoint(train_probe, items):
        raise RuntimeError("test phantoms share geometry seeds with training phantoms")

    want_props = exp_id in (1, 2)
    want_synth = exp_id in (2, 3, 4)
    eval_items = perturbed_test_data(cfg, items) if exp_id == 2 else items

    rows: list[tuple[int, int, str, str, float]] = []
    per_model: dict[str, dict[str, list[float]]] = {}
    maps: dict[str, np.ndarray] = {}
    for kind in (proposed, reference):
        net = nets[kind]
        acc: dict[str, list[float]] = {}
        for sid, (base_item, item) in enumerate(zip(items, eval_items)):
            m = _slice_metrics(net, item, want_props, want_synth)
            if exp_id == 2:
                rows.append((exp_id, sid, kind, "input_fa_deg", float(item.input_session.fa_deg)))
                clean = _slice_metrics(net, base_item, False, True)
                m["synth_unperturbed"] = clean["synth"]
                m["synth_degradation"] = m["synth"] - clean["synth"]
            for key, metric in METRIC_NAMES.items():
                if key in m:
                    rows.append((exp_id, sid, kind, metric, float(m[key])))
                    acc.setdefault(metric, []).append(float(m[key]))
            if "per_contrast" in m:
                for j, v in enumerate(m["per_contrast"]):
                    rows.append((exp_id, sid, kind, f"synth_mae_c{j}", float(v)))
            if sid < cfg.n_maps:
                mask = item.gt.mask
                if want_synth:
                    maps[f"exp{exp_id}_slice{sid}_{kind}_synth_c0"] = difference_map(
                        m["_synth_stack"].intensities[0], item.output_stack.intensities[0], mask)
                if want_props:
                    est = _estimate(net, item.input_stack)
                    for name in ("t1_ms", "t2s_ms", "pd"):
                        maps[f"exp{exp_id}_slice{sid}_{kind}_{name}"] = difference_map(
                            getattr(est, name), getattr(item.gt, name), mask)
        per_model[kind] = acc

    summary = _summarize(exp_id, cfg, proposed, reference, per_model)
    return ExperimentResult(exp_id, rows, summary, maps)


def _summarize(exp_id, cfg, proposed, reference, per_model) -> dict:
    summary: dict = {
        "experiment_id": exp_id,
        "seed": cfg.seed,
        "n_test": cfg.n_test,
        "models": [proposed, reference],
        "mean": {k: {metric: float(np.mean(v)) for metric, v in acc.items()} for k, acc in per_model.items()},
    }
    a, b = per_model[proposed], per_model[reference]
    fractions = {}
    for metric in ("t1_mae_ms", "t2s_mae_ms", "pd_mae", "synth_mae"):
        if metric in a:
            fractions[metric] = _fraction_le(np.array(a[metric]), np.array(b[metric]), cfg.comparable_factor)
    summary["comparable_or_better_fraction"] = fractions
    summary["comparable_factor"] = cfg.comparable_factor
    if exp_id == 2:
        summary["worst_synth_degradation"] = {
            proposed: float(np.max(a["synth_degradation"])),
            reference: float(np.max(b["synth_degradation"])),
        }
        summary["max_delta_deg"] = cfg.max_delta_deg
    if "synth_mae" in a:
        ratio = np.array(b["synth_mae"]) / np.maximum(np.array(a["synth_mae"]), 1e-300)
        summary["reference_to_proposed_synth_ratio"] = {"mean": float(ratio.mean()), "max": float(ratio.max())}
    return summary
