"""JSON run configuration with strict key checking.

Top-level sections: ``seed``, ``phantom``, ``protocols``, ``noise``,
``dataset``, ``train``, ``fit``, ``experiment``. Every section is optional;
unknown keys anywhere are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .core import DomainError
from .fit_neural import MODES, TrainConfig
from .phantom import PhantomConfig, TissueClass, default_classes
from .protocol import INDEPENDENT, MULTIECHO, ProtocolConfigError, ProtocolDistribution
from .synth_eval import ExperimentConfig


class ConfigError(ValueError):
    pass


_SCHEMA: dict[str, Any] = {
    "seed": int,
    "phantom": {"width": int, "height": int, "n_blobs": list, "smooth_size": int, "classes": list},
    "protocols": {"input": (dict, str), "output": (dict, str), "n_output_contrasts": int},
    "noise": {"snr": (int, float, type(None)), "noisy_targets": bool},
    "dataset": {"n_items": int},
    "train": {"mode": str, "lr": (int, float), "batch_size": int, "epochs": int, "seed": int,
              "include_phi_in": bool, "hidden": list, "max_voxels_per_item": (int, type(None)),
              "lr_schedule": str, "log_intensities": bool},
    "fit": {"t1_grid": list, "t2s_grid": list, "max_iter": int, "tol": (int, float)},
    "experiment": {"id": int, "n_train": int, "n_slices": int, "perturbation": (int, float),
                   "comparable_factor": (int, float), "n_maps": int, "epochs": int,
                   "baseline_include_phi_in": bool, "max_voxels_per_item": (int, type(None)),
                   "models": dict, "figures": bool},
}
_DIST_KEYS = {"te_range", "tr_range", "fa_range", "echoes"}
_CLASS_KEYS = {"name", "t1_range", "t2s_range", "pd_range"}


def _check(obj: Any, schema: Any, path: str) -> None:
    if isinstance(schema, dict):
        if not isinstance(obj, dict):
            raise ConfigError(f"{path or '<root>'}: expected an object")
        for key, value in obj.items():
            where = f"{path}.{key}" if path else key
            if key not in schema:
                raise ConfigError(f"{where}: unknown key")
            _check(value, schema[key], where)
        return
    types = schema if isinstance(schema, tuple) else (schema,)
    if isinstance(obj, bool) and bool not in types:
        raise ConfigError(f"{path}: expected {'/'.join(t.__name__ for t in types)}, got bool")
    if not isinstance(obj, types):
        raise ConfigError(f"{path}: expected {'/'.join(t.__name__ for t in types)}, got {type(obj).__name__}")


def _range(v: Any, path: str) -> tuple[float, float]:
    if not (isinstance(v, list) and len(v) == 2 and all(isinstance(x, (int, float)) and not isinstance(x, bool)
                                                         for x in v)):
        raise ConfigError(f"{path}: expected [low, high]")
    return float(v[0]), float(v[1])


def _dist(d: dict, mode: str, path: str, defaults: ProtocolDistribution) -> ProtocolDistribution:
    unknown = set(d) - _DIST_KEYS
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown key")
    try:
        return ProtocolDistribution(
            te_range_ms=_range(d["te_range"], f"{path}.te_range") if "te_range" in d else defaults.te_range_ms,
            tr_range_ms=_range(d["tr_range"], f"{path}.tr_range") if "tr_range" in d else defaults.tr_range_ms,
            fa_range_deg=_range(d["fa_range"], f"{path}.fa_range") if "fa_range" in d else defaults.fa_range_deg,
            echoes_per_session=int(d.get("echoes", defaults.echoes_per_session)),
            mode=mode,
        )
    except ProtocolConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass
class RunConfig:
    seed: int = 0
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    input_dist: ProtocolDistribution | None = field(default_factory=lambda: ProtocolDistribution(mode=MULTIECHO))
    output_dist: ProtocolDistribution | None = field(default_factory=lambda: ProtocolDistribution(mode=INDEPENDENT))
    n_output_contrasts: int = 10
    snr: float | None = 50.0
    noisy_targets: bool = False
    n_items: int = 20
    train: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def train_config(self, seed: int | None = None, mode: str | None = None) -> TrainConfig:
        t = dict(self.train)
        if "hidden" in t:
            t["hidden"] = tuple(t["hidden"])
        t.setdefault("seed", self.seed if seed is None else seed)
        if seed is not None:
            t["seed"] = seed
        if mode is not None:
            t["mode"] = mode
        t.setdefault("snr", self.snr)
        t.setdefault("n_output_contrasts", self.n_output_contrasts)
        try:
            return TrainConfig(**t)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from exc

    def experiment_config(self, seed: int | None = None) -> ExperimentConfig:
        e = self.experiment
        tc = self.train_config()
        return ExperimentConfig(
            seed=self.seed if seed is None else seed,
            n_train=int(e.get("n_train", 1000)),
            n_test=int(e.get("n_slices", 100)),
            width=self.phantom.width,
            height=self.phantom.height,
            snr=self.snr,
            n_output_contrasts=self.n_output_contrasts,
            max_delta_deg=float(e.get("perturbation", 20.0)),
            comparable_factor=float(e.get("comparable_factor", 1.05)),
            n_maps=int(e.get("n_maps", 1)),
            epochs=int(e.get("epochs", tc.epochs)),
            lr=tc.lr,
            batch_size=tc.batch_size,
            hidden=tc.hidden,
            include_phi_in=tc.include_phi_in,
            baseline_include_phi_in=bool(e.get("baseline_include_phi_in", False)),
            max_voxels_per_item=e.get("max_voxels_per_item", 400),
            lr_schedule=tc.lr_schedule,
            input_dist=self.input_dist or ProtocolDistribution(mode=MULTIECHO),
            output_dist=self.output_dist or ProtocolDistribution(mode=INDEPENDENT),
            phantom=self.phantom,
        )


def _grid(v: Any, path: str) -> np.ndarray:
    if not (isinstance(v, list) and len(v) == 3):
        raise ConfigError(f"{path}: expected [min, max, count]")
    lo, hi, n = v
    if not (0 < lo < hi and int(n) >= 1):
        raise ConfigError(f"{path}: need 0 < min < max and count >= 1")
    return np.geomspace(float(lo), float(hi), int(n))


def fit_grids(cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    f = cfg.fit
    t1 = _grid(f["t1_grid"], "fit.t1_grid") if "t1_grid" in f else np.geomspace(200.0, 3000.0, 128)
    t2 = _grid(f["t2s_grid"], "fit.t2s_grid") if "t2s_grid" in f else np.geomspace(5.0, 200.0, 128)
    return t1, t2


def parse_config(raw: dict) -> RunConfig:
    _check(raw, _SCHEMA, "")
    cfg = RunConfig(raw=raw)
    cfg.seed = int(raw.get("seed", 0))

    ph = raw.get("phantom", {})
    classes = default_classes()
    if "classes" in ph:
        parsed = []
        for i, c in enumerate(ph["classes"]):
            where = f"phantom.classes[{i}]"
            if not isinstance(c, dict):
                raise ConfigError(f"{where}: expected an object")
            unknown = set(c) - _CLASS_KEYS
            if unknown:
                raise ConfigError(f"{where}.{sorted(unknown)[0]}: unknown key")
            try:
                parsed.append(TissueClass(str(c.get("name", f"class{i}")), _range(c["t1_range"], f"{where}.t1_range"),
                                          _range(c["t2s_range"], f"{where}.t2s_range"),
                                          _range(c["pd_range"], f"{where}.pd_range")))
            except KeyError as exc:
                raise ConfigError(f"{where}.{exc.args[0]}: missing") from exc
            except DomainError as exc:
                raise ConfigError(f"{where}: {exc}") from exc
        classes = tuple(parsed)
    n_blobs = tuple(int(v) for v in ph.get("n_blobs", [4, 10]))
    if len(n_blobs) != 2 or not 0 <= n_blobs[0] <= n_blobs[1]:
        raise ConfigError("phantom.n_blobs: expected [min, max] with 0 <= min <= max")
    cfg.phantom = PhantomConfig(int(ph.get("width", 64)), int(ph.get("height", 64)), classes, n_blobs,
                                int(ph.get("smooth_size", 3)))
    if cfg.phantom.width < 8 or cfg.phantom.height < 8:
        raise ConfigError("phantom.width/height: must be >= 8")

    pr = raw.get("protocols", {})
    inp = pr.get("input", {})
    if inp == "baseline":
        cfg.input_dist = None
    elif isinstance(inp, dict):
        cfg.input_dist = _dist(inp, MULTIECHO, "protocols.input", ProtocolDistribution())
    else:
        raise ConfigError("protocols.input: expected a distribution object or \"baseline\"")
    out = pr.get("output", {})
    if out == "same":
        cfg.output_dist = None
    elif isinstance(out, dict):
        if "echoes" in out:
            raise ConfigError("protocols.output.echoes: unknown key")
        cfg.output_dist = _dist(out, INDEPENDENT, "protocols.output", ProtocolDistribution(mode=INDEPENDENT))
    else:
        raise ConfigError("protocols.output: expected a distribution object or \"same\"")
    cfg.n_output_contrasts = int(pr.get("n_output_contrasts", 10))
    if cfg.n_output_contrasts < 1:
        raise ConfigError("protocols.n_output_contrasts: must be >= 1")

    noise = raw.get("noise", {})
    snr = noise.get("snr", 50.0)
    if snr is not None and not snr > 0:
        raise ConfigError("noise.snr: must be positive or null")
    cfg.snr = None if snr is None else float(snr)
    cfg.noisy_targets = bool(noise.get("noisy_targets", False))

    cfg.n_items = int(raw.get("dataset", {}).get("n_items", 20))
    if cfg.n_items < 1:
        raise ConfigError("dataset.n_items: must be >= 1")

    cfg.train = dict(raw.get("train", {}))
    if "mode" in cfg.train and cfg.train["mode"] not in MODES:
        raise ConfigError(f"train.mode: must be one of {', '.join(MODES)}")
    cfg.fit = dict(raw.get("fit", {}))
    fit_grids(cfg)
    cfg.experiment = dict(raw.get("experiment", {}))
    for k, v in cfg.experiment.get("models", {}).items():
        if k not in ("multi", "fixed", "synth") or not isinstance(v, str):
            raise ConfigError(f"experiment.models.{k}: expected one of multi/fixed/synth mapped to a path")
    if cfg.experiment.get("perturbation", 0) < 0:
        raise ConfigError("experiment.perturbation: must be >= 0")
    cfg.train_config()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return parse_config({})
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(raw)
