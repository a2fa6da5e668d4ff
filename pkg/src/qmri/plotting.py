"""Report figures for experiment results (headless, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .synth_eval import ExperimentResult  # noqa: E402

_LABELS = {
    "t1_mae_ms": "T1 MAE (ms)",
    "t2s_mae_ms": "T2* MAE (ms)",
    "pd_mae_pct": "PD MAE (%)",
    "synth_mae": "synthesis MAE",
    "synth_degradation": "synthesis MAE increase",
}
_PANELS = {
    1: ("t1_mae_ms", "t2s_mae_ms", "pd_mae_pct"),
    2: ("t1_mae_ms", "t2s_mae_ms", "pd_mae_pct", "synth_mae"),
    3: ("synth_mae",),
    4: ("synth_mae",),
}


def _per_slice(result: ExperimentResult, model: str, metric: str) -> np.ndarray:
    vals = {sid: v for (_, sid, m, name, v) in result.rows if m == model and name == metric}
    return np.array([vals[k] for k in sorted(vals)])


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def slice_error_figure(result: ExperimentResult, path) -> Path:
    """Per-slice errors of both models, slices ordered by the reference model's error."""
    proposed, reference = result.summary["models"]
    metrics = _PANELS[result.experiment_id]
    fig, axes = plt.subplots(1, len(metrics), figsize=(4.2 * len(metrics), 3.4), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        ref = _per_slice(result, reference, metric)
        prop = _per_slice(result, proposed, metric)
        order = np.argsort(ref)
        x = np.arange(ref.size)
        ax.plot(x, ref[order], ".", label=reference)
        ax.plot(x, prop[order], ".", label=proposed)
        ax.set_xlabel("test slice (sorted by reference error)")
        ax.set_ylabel(_LABELS.get(metric, metric))
        ax.legend(fontsize=8)
    fig.suptitle(f"experiment {result.experiment_id}")
    fig.tight_layout()
    path = Path(path)
    _save(fig, path)
    return path


def flip_angle_figure(result: ExperimentResult, path) -> Path:
    """Experiment 2: synthesis error against the perturbed input flip angle."""
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    for model in result.summary["models"]:
        fa = _per_slice(result, model, "input_fa_deg")
        err = _per_slice(result, model, "synth_mae")
        ax.plot(fa, err, ".", label=model)
    ax.set_xlabel("input flip angle (deg)")
    ax.set_ylabel(_LABELS["synth_mae"])
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    _save(fig, path)
    return path


def difference_map_figure(maps: dict[str, np.ndarray], path) -> Path:
    names = sorted(maps)
    cols = min(len(names), 4)
    rows = -(-len(names) // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3.0 * cols, 3.0 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, name in zip(axes.ravel(), names):
        im = ax.imshow(maps[name], cmap="magma", vmin=0.0)
        ax.set_title(name, fontsize=7)
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    path = Path(path)
    _save(fig, path)
    return path


def render_experiment(result: ExperimentResult, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    paths = [slice_error_figure(result, out_dir / f"exp{result.experiment_id}_slices.png")]
    if result.experiment_id == 2:
        paths.append(flip_angle_figure(result, out_dir / "exp2_flip_angle.png"))
    if result.maps:
        paths.append(difference_map_figure(result.maps, out_dir / f"exp{result.experiment_id}_maps.png"))
    return paths
