"""``qmri`` command line: simulate, fit, train, synth, experiment.

Exit codes: 0 success, 2 configuration error (including mode/dataset
mismatch and unknown experiment ids), 3 I/O error, 4 validation error,
5 numerical divergence during training.

Dataset directory layout written by ``simulate`` and read by ``train``::

    dataset.json                  seed, item count, echoed configuration
    item_0000/gt.qmv (+ .json)    ground-truth property map (T1, T2*, PD, mask)
    item_0000/input.qmv (+ .json) multiecho input stack with its session
    item_0000/output.qmv (+ .json) target contrasts with their protocol
    item_0000/manifest.json       protocols, seeds, snr

Every output is built next to its destination and renamed into place, so
a failed run never leaves a partial artefact behind. Existing outputs are
only replaced with ``--overwrite``.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import shutil
import sys
import tempfile
import warnings
from pathlib import Path

import numpy as np

from . import fit_classical as fc
from . import fit_neural as fn
from . import io as qio
from . import synth_eval as se
from .config import ConfigError, RunConfig, fit_grids, load_config
from .core import DomainError, MultiechoSession, Protocol, require_valid, seeded_rng
from .phantom import DatasetItem, simulate_dataset
from .protocol import fixed_baseline_session

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_VALIDATION, EXIT_DIVERGENCE = 0, 2, 3, 4, 5


class OutputExistsError(OSError):
    pass


# --------------------------------------------------------------------------
# helpers


def _check_target(path: Path, overwrite: bool) -> None:
    if path.exists() and not overwrite:
        raise OutputExistsError(f"{path}: already exists (pass --overwrite to replace it)")


@contextlib.contextmanager
def _staged_dir(target: Path, overwrite: bool):
    """Yield a scratch directory that replaces ``target`` only on success."""
    _check_target(target, overwrite)
    target.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield stage
        if target.exists():
            shutil.rmtree(target) if target.is_dir() else target.unlink()
        os.replace(stage, target)
    finally:
        if stage.exists():
            shutil.rmtree(stage, ignore_errors=True)


def _require_out(args) -> Path:
    if not args.out:
        raise ConfigError("--out: required for this command")
    return Path(args.out)


def _config(args) -> RunConfig:
    if args.config is not None and not Path(args.config).exists():
        raise FileNotFoundError(f"{args.config}: config file not found")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _read_stack(path: str):
    if not Path(path).exists():
        raise FileNotFoundError(f"{path}: no such file")
    return qio.read_stack(path)


# --------------------------------------------------------------------------
# datasets


def save_dataset(items: list[DatasetItem], root: Path, meta: dict) -> None:
    for i, it in enumerate(items):
        d = root / f"item_{i:04d}"
        d.mkdir()
        qio.write_property_map(d / "gt.qmv", it.gt)
        qio.write_stack(d / "input.qmv", it.input_stack)
        qio.write_stack(d / "output.qmv", it.output_stack)
        qio.write_json(d / "manifest.json", {
            "index": i,
            "geometry_seed": it.geometry_seed,
            "protocol_seed": it.protocol_seed,
            "noise_seed": it.noise_seed,
            "snr": it.snr,
            "noisy_targets": it.noisy_targets,
            "input_session": it.input_session.to_dict(),
            "output_protocol": it.output_protocol.to_dict(),
            "files": {"gt": "gt.qmv", "input": "input.qmv", "output": "output.qmv"},
        })
    qio.write_json(root / "dataset.json", dict(meta, n_items=len(items)))


def load_dataset(root: str | Path) -> list[DatasetItem]:
    root = Path(root)
    index = root / "dataset.json"
    if not index.exists():
        raise FileNotFoundError(f"{index}: not a dataset directory")
    n = int(qio.read_json(index)["n_items"])
    items = []
    for i in range(n):
        d = root / f"item_{i:04d}"
        man = qio.read_json(d / "manifest.json")
        session = Protocol.from_dict(man["input_session"])
        if not isinstance(session, MultiechoSession):
            raise DomainError(f"{d / 'manifest.json'}: input_session is not a multiecho session")
        items.append(DatasetItem(
            gt=qio.read_property_map(d / "gt.qmv"),
            input_session=session,
            input_stack=qio.read_stack(d / "input.qmv"),
            output_protocol=Protocol.from_dict(man["output_protocol"]),
            output_stack=qio.read_stack(d / "output.qmv"),
            geometry_seed=int(man["geometry_seed"]),
            protocol_seed=int(man["protocol_seed"]),
            noise_seed=int(man["noise_seed"]),
            snr=man["snr"],
            noisy_targets=bool(man["noisy_targets"]),
        ))
    return items


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    n = args.n_items if args.n_items is not None else cfg.n_items
    session = cfg.input_dist if cfg.input_dist is not None else fixed_baseline_session()
    items = simulate_dataset(n, cfg.phantom, session, cfg.output_dist, cfg.n_output_contrasts, cfg.snr,
                             seeded_rng(cfg.seed), cfg.noisy_targets)
    with _staged_dir(out, args.overwrite) as stage:
        save_dataset(items, stage, {"seed": cfg.seed, "config": cfg.raw})
    for i, it in enumerate(items):
        s = it.input_session
        tes = ", ".join(f"{t:.2f}" for t in s.te_ms)
        print(f"item_{i:04d}: TR={s.tr_ms:.2f} ms FA={s.fa_deg:.2f} deg TE=[{tes}] ms, "
              f"{len(it.output_protocol)} output contrasts")
    print(f"wrote {len(items)} items to {out}")
    return EXIT_OK


def _convergence_summary(res: fc.FitResult) -> dict:
    summary = {
        "n_voxels": int(res.converged.size),
        "n_converged": int(np.count_nonzero(res.converged)),
        "residual_norm_mean": float(np.mean(res.residual_norm)),
        "residual_norm_max": float(np.max(res.residual_norm)),
        "iterations_mean": float(np.mean(res.iterations)),
        "iterations_max": int(np.max(res.iterations)),
    }
    if res.degenerate is not None:
        summary["n_degenerate"] = int(np.count_nonzero(res.degenerate))
    return summary


def cmd_fit(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    _check_target(out, args.overwrite)
    stack = _read_stack(args.input)
    require_valid(stack.protocol)
    settings: dict = {}
    if args.method == "neural":
        if not args.model:
            raise ConfigError("--model: required for --method neural")
        if not Path(args.model).exists():
            raise FileNotFoundError(f"{args.model}: no such model file")
        with open(args.model, "rb") as fh:
            model = fn.model_from_bytes(fh.read())
        if not isinstance(stack.protocol, MultiechoSession) or len(stack.protocol) != model.n_echoes:
            raise fc.ProtocolMismatchError(
                f"{args.input}: model expects a multiecho session with {model.n_echoes} echoes")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", fn.ProtocolMismatchWarning)
            props = fn.predict_map(model, stack)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        settings = {"model": str(args.model), "mode": model.mode, "include_phi_in": model.include_phi_in}
        convergence = {"n_voxels": props.t1_ms.size}
    else:
        t1_grid, t2s_grid = fit_grids(cfg)
        atoms = fc.build_dictionary(stack.protocol, t1_grid, t2s_grid)
        settings = {"t1_grid": [float(t1_grid[0]), float(t1_grid[-1]), int(t1_grid.size)],
                    "t2s_grid": [float(t2s_grid[0]), float(t2s_grid[-1]), int(t2s_grid.size)]}
        res = fc.dictionary_fit(stack, atoms)
        if args.method == "nlls":
            max_iter = int(cfg.fit.get("max_iter", 200))
            tol = float(cfg.fit.get("tol", 1e-12))
            init = res.properties if args.init == "dict" else None
            res = fc.nlls_fit(stack, init=init, max_iter=max_iter, tol=tol)
            settings.update({"init": args.init, "max_iter": max_iter, "tol": tol})
        props = res.properties
        convergence = _convergence_summary(res)
    qio.write_property_map(out, props, {"method": args.method, "input": str(args.input), "settings": settings,
                                        "convergence": convergence})
    print(f"{args.method} fit of {stack.height}x{stack.width} voxels written to {out}")
    return EXIT_OK


def _write_model(path: Path, model: fn.MlpModel, report: fn.TrainReport) -> None:
    qio.atomic_write_bytes(path, fn.model_to_bytes(model))
    qio.write_csv(Path(str(path) + ".losses.csv"), [(i, v) for i, v in enumerate(report.epoch_losses)],
                  ("epoch", "loss"))


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    _check_target(out, args.overwrite)
    tcfg = cfg.train_config(seed=args.seed, mode=args.mode)
    if args.data:
        items = load_dataset(args.data)
    else:
        session = cfg.input_dist if cfg.input_dist is not None else fixed_baseline_session()
        items = simulate_dataset(cfg.n_items, cfg.phantom, session, cfg.output_dist, cfg.n_output_contrasts,
                                 cfg.snr, seeded_rng(cfg.seed), cfg.noisy_targets)
    fn.check_mode(tcfg.mode, items)
    model, report = fn.train(tcfg, items)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_model(out, model, report)
    print(f"trained {tcfg.mode} model on {len(items)} items, {tcfg.epochs} epochs, "
          f"final loss {report.epoch_losses[-1]:.6g} ({report.wall_time_s:.1f} s); wrote {out}")
    return EXIT_OK


def _parse_protocol(spec: str, key: str) -> Protocol:
    text = spec.strip()
    if text.startswith(("{", "[")):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--protocol: invalid inline JSON ({exc})") from exc
    else:
        if not Path(spec).exists():
            raise FileNotFoundError(f"{spec}: no such protocol file")
        obj = qio.read_json(spec)
        if isinstance(obj, dict) and key in obj:
            obj = obj[key]
        elif isinstance(obj, dict) and "protocol" in obj and "entries" not in obj:
            obj = obj["protocol"]
    try:
        if isinstance(obj, list):
            if obj and isinstance(obj[0], list):
                return Protocol.from_array(np.asarray(obj, dtype=float))
            return Protocol.from_dict({"kind": "protocol", "entries": obj})
        return Protocol.from_dict(obj)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"--protocol: cannot read a protocol ({exc})") from exc


def cmd_synth(args) -> int:
    out = _require_out(args)
    _check_target(out, args.overwrite)
    if not Path(args.props).exists():
        raise FileNotFoundError(f"{args.props}: no such property file")
    props = qio.read_property_map(args.props)
    protocol = _parse_protocol(args.protocol, args.protocol_key)
    require_valid(props, protocol)
    stack = se.synthesize(props, protocol)
    qio.write_stack(out, stack)
    print(f"synthesized {len(protocol)} contrasts to {out}")
    return EXIT_OK


def _load_models(cfg: RunConfig) -> dict:
    models = {}
    for kind, path in cfg.experiment.get("models", {}).items():
        if not Path(path).exists():
            raise FileNotFoundError(f"{path}: model file for experiment.models.{kind} not found")
        with open(path, "rb") as fh:
            models[kind] = fn.model_from_bytes(fh.read())
    return models


def cmd_experiment(args) -> int:
    cfg = _config(args)
    exp_id = args.id if args.id is not None else cfg.experiment.get("id")
    if exp_id is None:
        raise ConfigError("experiment.id: missing (set it in the config or pass --id)")
    if exp_id not in se.EXPERIMENT_IDS:
        raise ConfigError(f"experiment.id: unknown experiment {exp_id}; expected one of {se.EXPERIMENT_IDS}")
    out = _require_out(args)
    _check_target(out, args.overwrite)
    ecfg = cfg.experiment_config()
    models = _load_models(cfg)
    trained = {}
    missing = [k for k in se.EXPERIMENT_MODELS[exp_id] if k not in models]
    if missing:
        trained = se.train_models(ecfg, missing)
        models.update({k: v[0] for k, v in trained.items()})
    result = se.run_experiment(exp_id, ecfg, models)
    figures = args.figures if args.figures is not None else bool(cfg.experiment.get("figures", True))
    with _staged_dir(out, args.overwrite) as stage:
        qio.write_csv(stage / f"exp{exp_id}.csv", result.rows, se.CSV_COLUMNS)
        qio.write_json(stage / "summary.json", result.summary)
        if result.maps:
            (stage / "maps").mkdir()
            for name, image in sorted(result.maps.items()):
                qio.write_pgm(stage / "maps" / f"{name}.pgm", image)
        if trained:
            (stage / "models").mkdir()
            for kind, (model, report) in sorted(trained.items()):
                _write_model(stage / "models" / f"{kind}.qmm", model, report)
        if figures:
            from .plotting import render_experiment

            (stage / "figures").mkdir()
            render_experiment(result, stage / "figures")
    means = result.summary["mean"]
    for model, metrics in means.items():
        text = ", ".join(f"{k}={v:.5g}" for k, v in sorted(metrics.items()))
        print(f"experiment {exp_id} {model}: {text}")
    print(f"wrote experiment {exp_id} report to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configuration seed")
    common.add_argument("--out", help="output path")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")

    parser = argparse.ArgumentParser(prog="qmri", description="Quantitative MRI estimation and contrast synthesis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate a phantom dataset")
    p.add_argument("--n-items", type=int, help="override dataset.n_items")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="estimate a property map from a contrast stack")
    p.add_argument("--method", choices=("dict", "nlls", "neural"), required=True)
    p.add_argument("--input", required=True, help="input stack (.qmv with protocol sidecar)")
    p.add_argument("--model", help="model file for --method neural")
    p.add_argument("--init", choices=("dict", "default"), default="dict",
                   help="NLLS starting point: dictionary match or a fixed default")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", parents=[common], help="train a neural estimator")
    p.add_argument("--data", help="dataset directory written by 'simulate' (default: simulate from the config)")
    p.add_argument("--mode", choices=fn.MODES, help="override train.mode")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", parents=[common], help="synthesize contrasts from a property map")
    p.add_argument("--props", required=True, help="property map (.qmv)")
    p.add_argument("--protocol", required=True,
                   help="inline JSON protocol, or a JSON file (protocol, stack sidecar or item manifest)")
    p.add_argument("--protocol-key", default="output_protocol",
                   help="manifest key to read when --protocol names a manifest")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("experiment", parents=[common], help="run one of the four experiments")
    p.add_argument("--id", type=int, help="experiment id (1-4); overrides experiment.id")
    fig = p.add_mutually_exclusive_group()
    fig.add_argument("--figures", dest="figures", action="store_true", default=None, help="render PNG figures")
    fig.add_argument("--no-figures", dest="figures", action="store_false", help="skip PNG figures")
    p.set_defaults(func=cmd_experiment)
    return parser


def _thread_limit():
    raw = os.environ.get("QMRI_THREADS")
    if raw is None or raw == "":
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"QMRI_THREADS: expected a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, fn.ModeMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MemoryError as exc:
        print(f"error: {exc} (reduce fit.t1_grid / fit.t2s_grid)", file=sys.stderr)
        return EXIT_CONFIG
    except fn.DivergenceError as exc:
        print(f"error: training diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, qio.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DomainError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
