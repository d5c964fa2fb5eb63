"""Baseline predictors, Adam training and evaluation metrics."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .datasetgen import Dataset, apply_normalization, inverse_normalize
from .errors import (
    BadMagic,
    EmptyDataset,
    NonFiniteGradient,
    ShapeMismatch,
    StorageError,
    TargetNotInWindow,
    TruncatedPayload,
    VersionMismatch,
)

KINDS = ("persistence", "null_half", "linear", "mlp")
TRAINABLE = ("linear", "mlp")
CKPT_MAGIC = b"BPC1"


@dataclass
class Predictor:
    kind: str
    input_shape: tuple[int, ...]
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hidden: int = 64
    seed: int = 0

    @property
    def n_inputs(self) -> int:
        return int(np.prod(self.input_shape, dtype=np.int64))

    def n_params(self) -> int:
        d = self.n_inputs
        if self.kind == "linear":
            return d + 1
        if self.kind == "mlp":
            return self.hidden * d + 2 * self.hidden + 1
        return 0

    def unpack(self, params=None):
        p = self.params if params is None else params
        d, h = self.n_inputs, self.hidden
        if self.kind == "linear":
            return p[:d], p[d]
        w1 = p[: h * d].reshape(h, d)
        b1 = p[h * d: h * d + h]
        w2 = p[h * d + h: h * d + 2 * h]
        return w1, b1, w2, p[-1]


def make_predictor(kind: str, input_shape, hidden: int = 64, seed: int = 0) -> Predictor:
    if kind not in KINDS:
        raise ValueError(f"unknown predictor kind {kind!r}")
    pred = Predictor(kind, tuple(int(s) for s in input_shape), hidden=hidden, seed=seed)
    n = pred.n_params()
    if kind == "mlp":
        rng = np.random.default_rng(seed)
        d = pred.n_inputs
        w1 = rng.normal(0.0, math.sqrt(2.0 / d), size=(hidden, d))
        w2 = rng.normal(0.0, math.sqrt(1.0 / hidden), size=hidden)
        pred.params = np.concatenate([w1.ravel(), np.zeros(hidden), w2, [0.0]])
    else:
        pred.params = np.zeros(n)
    return pred


def _flatten(pred: Predictor, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    k = len(pred.input_shape)
    if x.shape[x.ndim - k:] != pred.input_shape or x.ndim not in (k, k + 1):
        raise ShapeMismatch(f"expected input shape {pred.input_shape}, got {x.shape}")
    return x.reshape(-1, pred.n_inputs)


def forward(pred: Predictor, x, params=None):
    """Output for one sample (scalar) or a batch (N,), in normalized units."""
    single = np.ndim(x) == len(pred.input_shape)
    xf = _flatten(pred, x)
    if pred.kind == "linear":
        w, b = pred.unpack(params)
        out = xf @ w + b
    elif pred.kind == "mlp":
        w1, b1, w2, b2 = pred.unpack(params)
        out = np.maximum(xf @ w1.T + b1, 0.0) @ w2 + b2
    elif pred.kind == "null_half":
        out = np.full(len(xf), 0.5)
    else:
        raise ValueError("persistence needs dataset context; use predict()")
    return float(out[0]) if single else out


def loss_and_grad(pred: Predictor, x, y, params=None) -> tuple[float, np.ndarray]:
    """MSE over the batch and its gradient w.r.t. the flat parameter vector."""
    xf = _flatten(pred, x)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if pred.kind == "linear":
        w, b = pred.unpack(params)
        err = xf @ w + b - y
        g = 2.0 * err / n
        grad = np.concatenate([xf.T @ g, [g.sum()]])
    elif pred.kind == "mlp":
        w1, b1, w2, b2 = pred.unpack(params)
        z = xf @ w1.T + b1
        a = np.maximum(z, 0.0)
        err = a @ w2 + b2 - y
        g = 2.0 * err / n
        dz = np.outer(g, w2) * (z > 0)
        grad = np.concatenate([(dz.T @ xf).ravel(), dz.sum(axis=0), a.T @ g, [g.sum()]])
    else:
        raise ValueError(f"{pred.kind} has no trainable parameters")
    return float(np.mean(err ** 2)), grad


def gradient_check(pred: Predictor, x, y, h: float = 1e-4, max_params: int | None = None, seed: int = 0) -> float:
    """Max relative gap between analytic and central-difference gradients.

    The relative error is ``|a - n| / max(|a|, |n|, 1e-6)``. With
    ``max_params`` only a seeded random subset of coordinates is checked.
    """
    base = np.array(pred.params, dtype=np.float64)
    _, analytic = loss_and_grad(pred, x, y, base)
    idx = np.arange(len(base))
    if max_params is not None and max_params < len(base):
        idx = np.random.default_rng(seed).choice(len(base), size=max_params, replace=False)
    worst = 0.0
    shadow = base.copy()
    for i in idx:
        shadow[i] = base[i] + h
        lp, _ = loss_and_grad(pred, x, y, shadow)
        shadow[i] = base[i] - h
        lm, _ = loss_and_grad(pred, x, y, shadow)
        shadow[i] = base[i]
        numeric = (lp - lm) / (2 * h)
        a = analytic[i]
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-6))
    return worst


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-5
    epochs: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, config: TrainConfig) -> np.ndarray:
    if params.shape != grads.shape:
        raise ShapeMismatch(f"params {params.shape} vs grads {grads.shape}")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient("gradient contains NaN or inf")
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.t += 1
    state.m = b1 * state.m + (1 - b1) * grads
    state.v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = state.m / (1 - b1 ** state.t)
    v_hat = state.v / (1 - b2 ** state.t)
    return params - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)


@dataclass
class History:
    losses: list[float] = field(default_factory=list)
    eval_losses: list[float] = field(default_factory=list)
    best_epoch: int | None = None


def train(pred: Predictor, ds: Dataset, config: TrainConfig, eval_ds: Dataset | None = None) -> History:
    """Minibatch Adam on MSE with seeded shuffling.

    Each history entry is the mean batch loss of one epoch. The parameters of
    the best epoch (by ``eval_ds`` MSE when given, else by training loss) are
    left in ``pred.params``.
    """
    if len(ds) == 0:
        raise EmptyDataset("training set is empty")
    hist = History()
    if pred.kind not in TRAINABLE or config.epochs <= 0:
        return hist
    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros(len(pred.params))
    params = np.array(pred.params, dtype=np.float64)
    best_score, best_params = math.inf, params.copy()
    n = len(ds)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grad = loss_and_grad(pred, ds.inputs[idx], ds.targets[idx], params)
            batch_losses.append(loss)
            params = adam_step(params, grad, state, config)
        hist.losses.append(float(np.mean(batch_losses)))
        if eval_ds is not None and len(eval_ds):
            err = forward(pred, eval_ds.inputs, params) - eval_ds.targets
            score = float(np.mean(err ** 2))
            hist.eval_losses.append(score)
        else:
            score = hist.losses[-1]
        if score < best_score:
            best_score, best_params, hist.best_epoch = score, params.copy(), epoch
    pred.params = best_params
    return hist


# ---------------------------------------------------------------- prediction


def _rows_of(ds: Dataset, k: int) -> int:
    return sum(p.shape[0] for p in ds.properties[:k])


def _last_value(ds: Dataset, k: int) -> np.ndarray:
    """Last windowed (normalized) value of scalar property k, per sample."""
    if ds.model == "matrix":
        return ds.inputs[:, k, -1]
    return ds.inputs[:, _rows_of(ds, k), 0, -1]


def is_relative(name: str) -> bool:
    return name.endswith("_rel")


def predict_persistence(ds: Dataset) -> np.ndarray:
    """Copy the last observed target value, in target units.

    Relative targets predict 0 (no change), provided the target or its
    absolute source is among the inputs.
    """
    name = ds.target_name
    k = ds.property_index(name)
    if is_relative(name):
        if k is None and ds.property_index(name[: -len("_rel")]) is None:
            raise TargetNotInWindow(f"{name} (or its source) is not among the inputs")
        return np.zeros(len(ds))
    if k is None or ds.properties[k].shape != (1, 1):
        raise TargetNotInWindow(f"{name} is not among the inputs")
    return inverse_normalize(_last_value(ds, k), ds.properties[k].params)


def predict_null(sample=None) -> float:
    return 0.5


def predict(pred: Predictor, ds: Dataset) -> np.ndarray:
    """Normalized outputs for every sample of ``ds``."""
    if pred.kind == "persistence":
        return apply_normalization(predict_persistence(ds), ds.target_params)
    if pred.kind == "null_half":
        return np.full(len(ds), predict_null())
    return forward(pred, ds.inputs) if len(ds) else np.zeros(0)


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    n: int
    mse: float
    rmse: float
    r2: float
    sign: float
    r2_mean: float = math.nan
    sign_last_true: float = math.nan

    def to_json(self) -> dict:
        return asdict(self)


def sign_accuracy(predicted, actual) -> float:
    """Share of entries whose signs agree; two exact zeros agree."""
    p, a = np.sign(np.asarray(predicted, dtype=np.float64)), np.sign(np.asarray(actual, dtype=np.float64))
    if len(p) == 0:
        return math.nan
    return float(np.mean(p == a))


def r2_null_half(out_norm, true_norm) -> float:
    num = float(np.sum((np.asarray(out_norm) - true_norm) ** 2))
    den = float(np.sum((0.5 - np.asarray(true_norm)) ** 2))
    if den == 0:
        return 1.0 if num == 0 else -math.inf
    return 1.0 - num / den


def compute_metrics(out_norm, true_norm, params, relative: bool) -> MetricsReport:
    out_norm = np.asarray(out_norm, dtype=np.float64)
    true_norm = np.asarray(true_norm, dtype=np.float64)
    n = len(true_norm)
    if n == 0:
        raise EmptyDataset("nothing to evaluate")
    out = inverse_normalize(out_norm, params)
    true = inverse_normalize(true_norm, params)
    err = out - true
    mse = float(np.mean(err ** 2))
    ss_tot = float(np.sum((true - true.mean()) ** 2))
    r2_mean = 1.0 - float(np.sum(err ** 2)) / ss_tot if ss_tot > 0 else math.nan
    if relative:
        sign = sign_last = sign_accuracy(out, true)
    else:
        actual = np.diff(true)
        sign = sign_accuracy(np.diff(out), actual)
        sign_last = sign_accuracy(out[1:] - true[:-1], actual)
    return MetricsReport(n, mse, math.sqrt(mse), r2_null_half(out_norm, true_norm), sign, r2_mean, sign_last)


def evaluate(pred: Predictor, ds: Dataset) -> MetricsReport:
    """Metrics on inverse-normalized outputs.

    ``r2`` compares against a constant 0.5 in normalized space; ``r2_mean`` is
    the usual mean-baseline R² in target units. For absolute targets ``sign``
    compares the direction of consecutive predictions with the direction of
    consecutive true values, and ``sign_last_true`` compares each prediction
    against the previous true value instead.
    """
    if len(ds) == 0:
        raise EmptyDataset("test set is empty")
    return compute_metrics(predict(pred, ds), ds.targets, ds.target_params, is_relative(ds.target_name))


def export_predictions(pred: Predictor, ds: Dataset, path) -> None:
    out = inverse_normalize(predict(pred, ds), ds.target_params)
    true = inverse_normalize(ds.targets, ds.target_params)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "predicted", "actual"])
            for t, p, a in zip(ds.times, out, true):
                w.writerow([int(t), f"{p:.17g}", f"{a:.17g}"])
    except OSError as exc:
        raise StorageError(f"cannot write predictions: {exc}") from exc


# ---------------------------------------------------------------- checkpoints


def checkpoint_bytes(pred: Predictor) -> bytes:
    header = json.dumps({"kind": pred.kind, "input_shape": list(pred.input_shape), "hidden": pred.hidden,
                         "seed": pred.seed, "n_params": len(pred.params), "version": 1},
                        separators=(",", ":")).encode()
    return (CKPT_MAGIC + struct.pack("<I", len(header)) + header
            + np.ascontiguousarray(pred.params, dtype="<f8").tobytes())


def checkpoint_from_bytes(data: bytes) -> Predictor:
    if data[:4] != CKPT_MAGIC:
        raise BadMagic(f"expected {CKPT_MAGIC!r}, got {data[:4]!r}")
    if len(data) < 8:
        raise TruncatedPayload("missing header length")
    (hlen,) = struct.unpack("<I", data[4:8])
    try:
        h = json.loads(data[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TruncatedPayload(f"unreadable header: {exc}") from None
    if h.get("version") != 1:
        raise VersionMismatch(f"checkpoint version {h.get('version')}")
    n = h["n_params"]
    if len(data) != 8 + hlen + 8 * n:
        raise TruncatedPayload(f"expected {n} parameters")
    params = np.frombuffer(data, dtype="<f8", count=n, offset=8 + hlen).copy()
    return Predictor(h["kind"], tuple(h["input_shape"]), params, h["hidden"], h["seed"])


def save_checkpoint(pred: Predictor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(pred))


def load_checkpoint(path) -> Predictor:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def history_json(hist: History) -> str:
    buf = io.StringIO()
    json.dump(asdict(hist), buf, indent=2)
    return buf.getvalue()
