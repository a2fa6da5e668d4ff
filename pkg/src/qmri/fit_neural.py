"""Unsupervised per-voxel estimator trained through the FLASH forward model.

The network maps a voxel's input-session intensities (optionally together
with the session's TR, TEs and FA) to (T1, T2*, PD). Training never sees
tissue properties: the loss is the squared error between contrasts
synthesised from the estimate at output settings ``phi_out`` and the
corresponding target intensities.

Three training modes differ only in which settings the data carries:

``multi-acquisition``
    random input sessions, random output contrasts
``fixed-acquisition``
    fixed baseline session in, the same session as target
``synthesis-loss``
    fixed baseline session in, random output contrasts
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import flash
from .core import ContrastStack, MultiechoSession, PD_MIN, PropertyMap, Protocol, seeded_rng
from .phantom import DatasetItem
from .protocol import fixed_baseline_session

MULTI = "multi-acquisition"
FIXED = "fixed-acquisition"
SYNTH = "synthesis-loss"
MODES = (MULTI, FIXED, SYNTH)

MODEL_MAGIC = b"QMM1"
MODEL_FORMAT_VERSION = 1

# min-max scaling of protocol features; matches the training distribution ranges
TE_SCALE = (5.0, 80.0)
TR_SCALE = (30.0, 100.0)
FA_SCALE = (5.0, 80.0)


class ModeMismatchError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, message: str = "") -> None:
        super().__init__(message or f"loss became non-finite at epoch {epoch}")
        self.epoch = epoch


class ProtocolMismatchWarning(UserWarning):
    pass


# --------------------------------------------------------------------------
# Model


@dataclass(eq=False)
class MlpModel:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    n_echoes: int = 3
    include_phi_in: bool = True
    intensity_scale: float = 1.0
    t1_range_ms: tuple[float, float] = (100.0, 4000.0)
    t2s_range_ms: tuple[float, float] = (3.0, 300.0)
    pd_range: tuple[float, float] = (0.0, 1.0)
    train_session: MultiechoSession | None = None
    mode: str = MULTI
    log_intensities: bool = True

    @property
    def n_features(self) -> int:
        return self.layer_sizes[0]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(self.layer_sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.n_echoes, self.include_phi_in, self.intensity_scale, self.t1_range_ms,
                        self.t2s_range_ms, self.pd_range, self.train_session, self.mode, self.log_intensities)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in self.parameters():
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


LOG_FLOOR = 1e-3


def feature_count(n_echoes: int, include_phi_in: bool, log_intensities: bool = True) -> int:
    n = 3 * n_echoes - 1 if log_intensities else n_echoes
    return n + (n_echoes + 4 if include_phi_in else 0)


def init_model(
    rng: np.random.Generator,
    hidden: Sequence[int] = (128, 128),
    n_echoes: int = 3,
    include_phi_in: bool = True,
    intensity_scale: float = 1.0,
    zero: bool = False,
    log_intensities: bool = True,
) -> MlpModel:
    sizes = (feature_count(n_echoes, include_phi_in, log_intensities), *hidden, 3)
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        scale = 0.0 if zero else (0.1 if last else 1.0) * np.sqrt(2.0 / fan_in)
        weights.append(rng.standard_normal((fan_in, fan_out)) * scale)
        biases.append(np.zeros(fan_out))
    return MlpModel(sizes, weights, biases, n_echoes, include_phi_in, float(intensity_scale),
                    log_intensities=log_intensities)


def _softplus(a):
    return np.logaddexp(0.0, a)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _session_features(session: Protocol, n_echoes: int) -> np.ndarray:
    arr = session.as_array()
    if arr.shape[0] != n_echoes:
        raise ValueError(f"model expects {n_echoes} echoes, session has {arr.shape[0]}")
    tr, fa = arr[0, 0], arr[0, 2]
    tes = arr[:, 1]
    rad = np.deg2rad(fa)
    return np.concatenate([
        [(tr - TR_SCALE[0]) / (TR_SCALE[1] - TR_SCALE[0])],
        (tes - TE_SCALE[0]) / (TE_SCALE[1] - TE_SCALE[0]),
        [(fa - FA_SCALE[0]) / (FA_SCALE[1] - FA_SCALE[0]), np.sin(rad), np.cos(rad)],
    ])


def make_features(model: MlpModel, intensities: np.ndarray, session: Protocol) -> np.ndarray:
    """Per-voxel features from (N, n_echoes) intensities and the session that produced them.

    Intensities are divided by the model's intensity scale. With
    ``log_intensities`` their logarithms (floored at ``LOG_FLOOR``) follow,
    then the log-decay rate from the first echo to each later one,
    ``-(log y_k - log y_1) / (TE_k - TE_1)`` in units of 1/(10 ms).
    """
    x = np.asarray(intensities, dtype=np.float64) / model.intensity_scale
    if x.ndim != 2 or x.shape[1] != model.n_echoes:
        raise ValueError(f"expected (N, {model.n_echoes}) intensities, got {x.shape}")
    if model.log_intensities:
        logs = np.log(np.maximum(x, LOG_FLOOR))
        te = session.as_array()[:, 1]
        rates = -(logs[:, 1:] - logs[:, :1]) / ((te[1:] - te[0]) / 10.0)
        x = np.concatenate([x, logs, rates], axis=1)
    if not model.include_phi_in:
        return x
    phi = np.broadcast_to(_session_features(session, model.n_echoes), (x.shape[0], model.n_echoes + 4))
    return np.concatenate([x, phi], axis=1)


def _output_map(model: MlpModel, z: np.ndarray):
    """Map raw outputs (N, 3) to properties (N, 3) and d(property)/dz (N, 3).

    Each output goes through softplus and the saturation 1 - exp(-softplus(z)),
    which equals the logistic function, into its range: log-affine for the
    relaxation times, affine for PD.
    """
    sat = _sigmoid(z)
    dsat = sat * (1.0 - sat)
    p = np.empty_like(z)
    dp = np.empty_like(z)
    for j, (lo, hi) in enumerate((model.t1_range_ms, model.t2s_range_ms)):
        span = np.log(hi) - np.log(lo)
        p[:, j] = np.exp(np.log(lo) + span * sat[:, j])
        dp[:, j] = p[:, j] * span * dsat[:, j]
    lo, hi = model.pd_range
    p[:, 2] = np.maximum(lo + (hi - lo) * sat[:, 2], PD_MIN)
    dp[:, 2] = (hi - lo) * dsat[:, 2]
    return p, dp


def _forward_cache(model: MlpModel, features: np.ndarray):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.shape[1] != model.n_features:
        raise ValueError(f"model expects {model.n_features} features, got {x.shape[1]}")
    acts = [x]
    pre = []
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = h @ w + b
        pre.append(a)
        h = a if i == last else _softplus(a)
        acts.append(h)
    return acts, pre


def forward(model: MlpModel, features: np.ndarray) -> np.ndarray:
    """(N, F) features -> (N, 3) array of (T1 ms, T2* ms, PD)."""
    acts, _ = _forward_cache(model, features)
    return _output_map(model, acts[-1])[0]


# --------------------------------------------------------------------------
# Loss and gradient


@dataclass(eq=False)
class Batch:
    """Voxel features with their target contrasts: ``y_out[n, j]`` acquired at ``phi_out[n, j]``."""

    features: np.ndarray
    phi_out: np.ndarray
    y_out: np.ndarray


def _synth(p: np.ndarray, phi_out: np.ndarray) -> np.ndarray:
    return flash.signal(p[:, 0:1], p[:, 1:2], p[:, 2:3], phi_out[:, :, 0], phi_out[:, :, 1], phi_out[:, :, 2])


def loss(model: MlpModel, batch: Batch) -> float:
    """Mean over voxels and output contrasts of the squared synthesis error."""
    p = forward(model, batch.features)
    r = _synth(p, batch.phi_out) - batch.y_out
    return float(np.mean(r * r))


def backward(model: MlpModel, batch: Batch) -> tuple[float, list[np.ndarray]]:
    """Loss and its exact gradient, ordered like ``model.parameters()``."""
    acts, pre = _forward_cache(model, batch.features)
    z = acts[-1]
    p, dp_dz = _output_map(model, z)
    phi = batch.phi_out
    d1, d2, dpd = flash.jacobian(p[:, 0:1], p[:, 1:2], p[:, 2:3], phi[:, :, 0], phi[:, :, 1], phi[:, :, 2])
    r = p[:, 2:3] * dpd - batch.y_out
    count = r.size
    g = 2.0 * r / count
    dl_dp = np.stack([(g * d1).sum(1), (g * d2).sum(1), (g * dpd).sum(1)], axis=1)
    delta = dl_dp * dp_dz

    grads: list[np.ndarray] = []
    for i in range(len(model.weights) - 1, -1, -1):
        gw = acts[i].T @ delta
        gb = delta.sum(0)
        grads = [gw, gb] + grads
        if i > 0:
            delta = (delta @ model.weights[i].T) * _sigmoid(pre[i - 1])
    return float(np.mean(r * r)), grads


# --------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    mode: str = MULTI
    lr: float = 1e-3
    batch_size: int = 4096
    epochs: int = 30
    n_output_contrasts: int = 10
    seed: int = 0
    snr: float | None = 50.0
    include_phi_in: bool = True
    hidden: tuple[int, ...] = (128, 128)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_voxels_per_item: int | None = None
    log_intensities: bool = True
    lr_schedule: str = "cosine"

    def __post_init__(self) -> None:
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("lr", "batch_size", "epochs", "n_output_contrasts"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.snr is not None and not self.snr > 0:
            raise ValueError("snr must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0
    checksum: str = ""


def estimate_foreground(stack: ContrastStack, fraction: float = 0.2) -> np.ndarray:
    """Voxels whose first-echo intensity exceeds ``fraction`` of its 99th percentile.

    Derived from the measured data only, so training never reads a phantom mask.
    """
    first = stack.intensities[0]
    level = np.percentile(first, 99.0)
    return first > fraction * level


def _same(a: Protocol, b: Protocol) -> bool:
    return len(a) == len(b) and np.array_equal(a.as_array(), b.as_array())


def check_mode(mode: str, items: Sequence[DatasetItem]) -> None:
    """Raise ``ModeMismatchError`` unless the items' protocols fit the training mode."""
    if not items:
        raise ModeMismatchError("no training items")
    base = fixed_baseline_session()
    fixed_in = all(_same(it.input_session, base) for it in items)
    out_is_in = all(_same(it.output_protocol, it.input_session) for it in items)
    if mode == FIXED:
        if not (fixed_in and out_is_in):
            raise ModeMismatchError("fixed-acquisition mode needs the baseline session as both input and target")
    elif mode == SYNTH:
        if not fixed_in:
            raise ModeMismatchError("synthesis-loss mode needs the baseline session as input")
        if out_is_in:
            raise ModeMismatchError("synthesis-loss mode needs output contrasts that differ from the input")
    else:
        first = items[0].input_session
        if len(items) > 1 and all(_same(it.input_session, first) for it in items):
            raise ModeMismatchError("multi-acquisition mode needs varying input sessions; dataset uses one fixed session")
        if out_is_in:
            raise ModeMismatchError("multi-acquisition mode needs output contrasts that differ from the input")
    lens = {len(it.output_protocol) for it in items}
    if len(lens) != 1:
        raise ModeMismatchError("all items must carry the same number of output contrasts")


@dataclass(eq=False)
class TrainingSet:
    features: np.ndarray
    item_index: np.ndarray
    y_out: np.ndarray
    phi_out: np.ndarray

    def batch(self, idx: np.ndarray) -> Batch:
        return Batch(self.features[idx], self.phi_out[self.item_index[idx]], self.y_out[idx])

    def protocols_for(self, idx: np.ndarray) -> np.ndarray:
        return self.phi_out[self.item_index[idx]]


def _intensity_scale(items: Sequence[DatasetItem], masks: Sequence[np.ndarray]) -> float:
    vals = [it.input_stack.intensities[0][m].mean() for it, m in zip(items, masks) if m.any()]
    scale = float(np.mean(vals)) if vals else 1.0
    return scale if scale > 0 else 1.0


def assemble(model: MlpModel, items: Sequence[DatasetItem], masks: Sequence[np.ndarray],
             rng: np.random.Generator | None = None, max_voxels_per_item: int | None = None) -> TrainingSet:
    feats, idx, ys = [], [], []
    for i, (it, m) in enumerate(zip(items, masks)):
        flat = np.flatnonzero(m.ravel())
        if max_voxels_per_item is not None and flat.size > max_voxels_per_item and rng is not None:
            flat = np.sort(rng.choice(flat, size=max_voxels_per_item, replace=False))
        feats.append(make_features(model, it.input_stack.voxels()[flat], it.input_session))
        ys.append(it.output_stack.voxels()[flat])
        idx.append(np.full(flat.size, i, dtype=np.int64))
    phi = np.stack([it.output_protocol.as_array() for it in items])
    return TrainingSet(np.concatenate(feats), np.concatenate(idx), np.concatenate(ys), phi)


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(config: TrainConfig, data: Sequence[DatasetItem], batch_audit: list | None = None):
    """Mini-batch Adam on the synthesis loss. Returns ``(model, report)``.

    Ground-truth maps are stripped before anything else happens. When
    ``batch_audit`` is a list, the (input features, phi_out) of every
    consumed batch are appended to it.
    """
    t0 = time.perf_counter()
    items = [it.without_gt() for it in data]
    check_mode(config.mode, items)
    rng = seeded_rng(config.seed)
    n_echoes = len(items[0].input_session)
    masks = [estimate_foreground(it.input_stack) for it in items]
    model = init_model(rng, config.hidden, n_echoes, config.include_phi_in, _intensity_scale(items, masks),
                       log_intensities=config.log_intensities)
    model.mode = config.mode
    if config.mode != MULTI:
        model.train_session = items[0].input_session
    ts = assemble(model, items, masks, rng, config.max_voxels_per_item)
    opt = Adam(model.parameters(), config.lr, config.betas, config.eps)

    report = TrainReport()
    n = ts.features.shape[0]
    steps_per_epoch = -(-n // config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    step = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            if config.lr_schedule == "cosine":
                opt.lr = 0.5 * config.lr * (1.0 + np.cos(np.pi * step / total_steps))
            step += 1
            idx = perm[start:start + config.batch_size]
            batch = ts.batch(idx)
            if batch_audit is not None:
                batch_audit.append((batch.features, batch.phi_out))
            value, grads = backward(model, batch)
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
                raise DivergenceError(epoch)
            opt.step(grads)
            total += value * idx.size
        mean = total / n
        if not np.isfinite(mean):
            raise DivergenceError(epoch)
        report.epoch_losses.append(mean)
    report.wall_time_s = time.perf_counter() - t0
    report.checksum = model.checksum()
    return model, report


# --------------------------------------------------------------------------
# Inference


def predict_map(model: MlpModel, stack: ContrastStack, chunk: int = 65536) -> PropertyMap:
    """Estimate a property map from a multiecho stack.

    Warns when a model trained without protocol inputs is applied to a
    session other than the one it was trained on.
    """
    session = stack.protocol
    if (not model.include_phi_in and model.train_session is not None
            and not _same(session, model.train_session)):
        warnings.warn("input protocol differs from the model's training session and the model does not "
                      "see protocol parameters; estimates may be biased", ProtocolMismatchWarning, stacklevel=2)
    x = make_features(model, stack.voxels(), session)
    out = np.concatenate([forward(model, x[s:s + chunk]) for s in range(0, x.shape[0], chunk)])
    return PropertyMap.from_flat(out, stack.height, stack.width)


# --------------------------------------------------------------------------
# Serialization: magic, u32 header length, JSON header, little-endian f64 payload


def model_to_bytes(model: MlpModel) -> bytes:
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "layer_sizes": list(model.layer_sizes),
        "activation": "softplus",
        "n_echoes": model.n_echoes,
        "include_phi_in": model.include_phi_in,
        "log_intensities": model.log_intensities,
        "intensity_scale": model.intensity_scale,
        "t1_range_ms": list(model.t1_range_ms),
        "t2s_range_ms": list(model.t2s_range_ms),
        "pd_range": list(model.pd_range),
        "mode": model.mode,
        "train_session": None if model.train_session is None else model.train_session.to_dict(),
        "feature_scaling": {"te": list(TE_SCALE), "tr": list(TR_SCALE), "fa": list(FA_SCALE)},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.parameters())
    return MODEL_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload


def model_from_bytes(blob: bytes) -> MlpModel:
    if blob[:4] != MODEL_MAGIC:
        raise ValueError("not a model file (bad magic)")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    if header.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {header.get('format_version')}")
    sizes = tuple(int(s) for s in header["layer_sizes"])
    data = np.frombuffer(blob, dtype="<f8", offset=8 + hlen)
    expected = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if data.size != expected:
        raise ValueError(f"model payload has {data.size} values, expected {expected}")
    weights, biases, pos = [], [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        weights.append(data[pos:pos + a * b].reshape(a, b).astype(np.float64))
        pos += a * b
        biases.append(data[pos:pos + b].astype(np.float64))
        pos += b
    session = header["train_session"]
    return MlpModel(
        sizes, weights, biases,
        n_echoes=int(header["n_echoes"]),
        include_phi_in=bool(header["include_phi_in"]),
        intensity_scale=float(header["intensity_scale"]),
        t1_range_ms=tuple(header["t1_range_ms"]),
        t2s_range_ms=tuple(header["t2s_range_ms"]),
        pd_range=tuple(header["pd_range"]),
        train_session=None if session is None else MultiechoSession.from_dict(session),
        mode=header["mode"],
        log_intensities=bool(header["log_intensities"]),
    )
