"""Normalization, sliding windows, sample layouts, presets and the dataset file."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    BadMagic,
    DegenerateSeries,
    EmptySplit,
    MissingProperty,
    NonScalarProperty,
    TooShort,
    TruncatedPayload,
    VersionMismatch,
)
from .properties import PropertySeries

NORM_KINDS = ("basic", "around_zero", "image")
MAGIC = b"BPD1"
FORMAT_VERSION = 1


def _utc(s: str) -> int:
    return int(datetime.fromisoformat(s).replace(tzinfo=timezone.utc).timestamp())


DEFAULT_RANGE = (_utc("2017-03-01"), _utc("2017-11-01"))
DEFAULT_BOUNDARY = _utc("2017-10-01")


@dataclass(frozen=True)
class NormalizationParams:
    kind: str
    min: float = 0.0
    max: float = 0.0
    mean: float = 0.0
    std: float = 0.0

    def to_json(self) -> dict:
        if self.kind == "image":
            return {"mean": self.mean, "std": self.std}
        return {"min": self.min, "max": self.max}

    @classmethod
    def from_json(cls, kind: str, d: dict) -> "NormalizationParams":
        return cls(kind, **{k: float(v) for k, v in d.items()})

    @property
    def half_range(self) -> float:
        return max(abs(self.max), abs(self.min))


def fit_normalization(values, kind: str) -> NormalizationParams:
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise DegenerateSeries("cannot normalize an empty series")
    if kind == "basic":
        lo, hi = float(x.min()), float(x.max())
        if hi <= lo:
            raise DegenerateSeries("basic normalization of a constant series")
        return NormalizationParams("basic", min=lo, max=hi)
    if kind == "around_zero":
        lo, hi = float(x.min()), float(x.max())
        if max(abs(lo), abs(hi)) == 0:
            raise DegenerateSeries("around_zero normalization of an all-zero series")
        return NormalizationParams("around_zero", min=lo, max=hi)
    if kind == "image":
        mean = float(x.mean())
        std = float(x.std())
        if std == 0:
            raise DegenerateSeries("image normalization of a constant series")
        return NormalizationParams("image", mean=mean, std=std)
    raise ValueError(f"unknown normalization {kind!r}")


def apply_normalization(values, params: NormalizationParams) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    if params.kind == "basic":
        return (x - params.min) / (params.max - params.min)
    if params.kind == "around_zero":
        m = params.half_range
        return (x + m) / (2 * m)
    if params.kind == "image":
        return (x - params.mean) * (1.0 / params.std)
    raise ValueError(f"unknown normalization {params.kind!r}")


def normalize(values, kind: str) -> tuple[np.ndarray, NormalizationParams]:
    """Normalize a whole series (any shape; tensor entries are pooled)."""
    params = fit_normalization(values, kind)
    return apply_normalization(values, params), params


def inverse_normalize(values, params: NormalizationParams) -> np.ndarray:
    y = np.asarray(values, dtype=np.float64)
    if params.kind == "basic":
        return y * (params.max - params.min) + params.min
    if params.kind == "around_zero":
        m = params.half_range
        return y * (2 * m) - m
    if params.kind == "image":
        return y * params.std + params.mean
    raise ValueError(f"unknown normalization {params.kind!r}")


def resolve_prop(values) -> str:
    """``basic`` for single-signed series, ``around_zero`` for mixed signs."""
    x = np.asarray(values, dtype=np.float64)
    if x.min() >= 0 or x.max() <= 0:
        return "basic"
    return "around_zero"


@dataclass(frozen=True)
class WindowSpec:
    wn: int
    properties: tuple[str, ...]
    target: str
    norm: str = "prop"

    def __post_init__(self):
        if self.wn < 1:
            raise ValueError("wn must be >= 1")
        if self.norm not in NORM_KINDS + ("prop",):
            raise ValueError(f"unknown norm {self.norm!r}")


def make_windows(wn: int, property_values: Sequence[np.ndarray], target_values: np.ndarray,
                 times: np.ndarray | None = None):
    """Slide a window of ``wn`` ticks over aligned series.

    ``property_values[k]`` has shape (T, v1, v2) (or (T,)). Returns one array
    per property of shape (T - wn, wn, v1, v2), the targets at index
    ``wn + step`` and the matching target times.
    """
    target_values = np.asarray(target_values, dtype=np.float64)
    length = len(target_values)
    if length <= wn:
        raise TooShort(f"series of length {length} is too short for window {wn}")
    windows = []
    for vals in property_values:
        v = np.asarray(vals, dtype=np.float64)
        if v.ndim == 1:
            v = v.reshape(-1, 1, 1)
        if len(v) != length:
            raise ValueError("property and target series must be aligned")
        # (T-wn+1, v1, v2, wn) -> drop the last window, which has no target
        w = sliding_window_view(v, wn, axis=0)[: length - wn]
        windows.append(np.moveaxis(w, -1, 1))
    targets = target_values[wn:]
    out_times = None if times is None else np.asarray(times)[wn:]
    return windows, targets, out_times


def model_matrix(windows: Sequence[np.ndarray]) -> np.ndarray:
    """Stack scalar property windows row-wise: (..., propN, wn)."""
    rows = []
    for w in windows:
        if w.shape[-2:] != (1, 1):
            raise NonScalarProperty(f"matrix model needs scalar properties, got shape {w.shape[-2:]}")
        rows.append(w[..., 0, 0])
    return np.stack(rows, axis=-2)


def stacked_shape(shapes: Sequence[tuple[int, int]], wn: int) -> tuple[int, int, int]:
    return sum(s[0] for s in shapes), max(s[1] for s in shapes), wn


def model_stacked(windows: Sequence[np.ndarray]) -> np.ndarray:
    """Pack property windows (..., wn, v1, v2) into (..., V1, V2, wn).

    Property k occupies rows ``[sum(v1_j for j<k), +v1_k)`` and columns
    ``[0, v2_k)``; uncovered cells are 0.
    """
    lead = windows[0].shape[:-3]
    wn = windows[0].shape[-3]
    v1_total, v2_max, _ = stacked_shape([w.shape[-2:] for w in windows], wn)
    out = np.zeros(lead + (v1_total, v2_max, wn), dtype=np.float64)
    row = 0
    for w in windows:
        v1, v2 = w.shape[-2:]
        out[..., row:row + v1, :v2, :] = np.moveaxis(w, -3, -1)
        row += v1
    return out


@dataclass
class PropertyMeta:
    name: str
    shape: tuple[int, int]
    params: NormalizationParams


@dataclass
class Dataset:
    inputs: np.ndarray      # (N, *input_shape)
    targets: np.ndarray     # (N,) normalized
    times: np.ndarray       # (N,) target timestamps
    model: str              # "matrix" | "stacked"
    wn: int
    properties: list[PropertyMeta]
    target_name: str
    target_params: NormalizationParams
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.targets)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, mask) -> "Dataset":
        return Dataset(self.inputs[mask], self.targets[mask], self.times[mask], self.model, self.wn,
                       self.properties, self.target_name, self.target_params, dict(self.meta))

    def property_index(self, name: str) -> int | None:
        for k, p in enumerate(self.properties):
            if p.name == name:
                return k
        return None


def align(series: Sequence[PropertySeries]) -> list[PropertySeries]:
    """Restrict every series to the timestamps they all share."""
    common = series[0].times
    for s in series[1:]:
        common = np.intersect1d(common, s.times)
    return [s.slice_times(common) for s in series]


def build_dataset(spec: WindowSpec, series: Mapping[str, PropertySeries], model: str = "auto",
                  fit_before: int | None = None) -> Dataset:
    """Normalize, window and lay out ``spec.properties`` against ``spec.target``.

    Normalization is fit on the whole aligned series unless ``fit_before`` is
    given, in which case only ticks earlier than it are used for fitting.
    """
    names = list(spec.properties)
    for n in names + [spec.target]:
        if n not in series:
            raise MissingProperty(n)
    aligned = align([series[n] for n in names] + [series[spec.target]])
    props, target = aligned[:-1], aligned[-1]
    if not target.is_scalar:
        raise NonScalarProperty(f"target {spec.target} must be scalar")
    times = target.times
    fit_mask = slice(None) if fit_before is None else times < fit_before

    def norm(s: PropertySeries):
        vals = s.values if not s.is_scalar else s.scalar_values
        kind = resolve_prop(vals) if spec.norm == "prop" else spec.norm
        params = fit_normalization(vals[fit_mask], kind)
        return apply_normalization(vals, params), params

    normed, metas = [], []
    for s in props:
        v, p = norm(s)
        normed.append(v)
        metas.append(PropertyMeta(s.name, s.shape, p))
    tvals, tparams = norm(target)

    windows, targets, ttimes = make_windows(spec.wn, normed, tvals, times)
    if model == "auto":
        model = "matrix" if all(s.is_scalar for s in props) else "stacked"
    inputs = model_matrix(windows) if model == "matrix" else model_stacked(windows)
    return Dataset(inputs, targets, ttimes, model, spec.wn, metas, spec.target, tparams)


def split_train_test(ds: Dataset, boundary_time: int) -> tuple[Dataset, Dataset]:
    train_mask = ds.times < boundary_time
    if train_mask.all() or not train_mask.any():
        raise EmptySplit(f"boundary {boundary_time} leaves one side empty")
    return ds.subset(train_mask), ds.subset(~train_mask)


DISTRIBUTION_NAMES = (
    "balanceLastSeenDistribution",
    "contractBalanceLastSeenDistribution",
    "contractVolumeInERC20Distribution",
    "accountBalanceDistribution",
)

PRESETS: dict[int, tuple[tuple[str, ...], str]] = {
    1: (("volumeFrom", "volumeTo"), "matrix"),
    2: (("volumeFrom_rel", "volumeTo_rel"), "matrix"),
    3: (("highPrice", "volumeFrom", "volumeTo"), "matrix"),
    4: (("highPrice_rel", "volumeFrom_rel", "volumeTo_rel"), "matrix"),
    # a distribution window is 3D, so the matrix row is emitted in the stacked layout
    5: (("accountBalanceDistribution",), "stacked"),
    6: (("balanceLastSeenDistribution",), "stacked"),
    7: (("contractBalanceLastSeenDistribution",), "stacked"),
    8: (DISTRIBUTION_NAMES, "stacked"),
}


def build_preset(set_n: int, wn: int, norm: str, target: str, series: Mapping[str, PropertySeries],
                 fit_before: int | None = None) -> Dataset:
    if set_n not in PRESETS:
        raise ValueError(f"preset must be 1..8, got {set_n}")
    names, model = PRESETS[set_n]
    ds = build_dataset(WindowSpec(wn, names, target, norm), series, model, fit_before)
    ds.meta["preset"] = set_n
    return ds


# ---------------------------------------------------------------- file format


def _header(ds: Dataset) -> dict:
    return {
        "version": FORMAT_VERSION,
        "model": ds.model,
        "input_shape": list(ds.input_shape),
        "wn": ds.wn,
        "properties": [
            {"name": p.name, "shape": list(p.shape), "norm_kind": p.params.kind, "params": p.params.to_json()}
            for p in ds.properties
        ],
        "target": {"name": ds.target_name, "norm_kind": ds.target_params.kind,
                   "params": ds.target_params.to_json()},
        "times": [int(t) for t in ds.times],
    }


def dataset_bytes(ds: Dataset) -> bytes:
    header = json.dumps(_header(ds), separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(np.ascontiguousarray(ds.inputs, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(ds.targets, dtype="<f4").tobytes())
    return buf.getvalue()


def write_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def dataset_from_bytes(data: bytes) -> Dataset:
    if data[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {data[:4]!r}")
    if len(data) < 8:
        raise TruncatedPayload("missing header length")
    (hlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + hlen:
        raise TruncatedPayload("header cut short")
    try:
        h = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TruncatedPayload(f"unreadable header: {exc}") from None
    if h.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"dataset version {h.get('version')} != {FORMAT_VERSION}")
    n = len(h["times"])
    shape = tuple(h["input_shape"])
    n_in = n * int(np.prod(shape, dtype=np.int64))
    expected = 8 + hlen + 4 * (n_in + n)
    if len(data) < expected:
        raise TruncatedPayload(f"payload has {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise TruncatedPayload(f"{len(data) - expected} trailing bytes")
    off = 8 + hlen
    inputs = np.frombuffer(data, dtype="<f4", count=n_in, offset=off).astype(np.float64).reshape((n,) + shape)
    targets = np.frombuffer(data, dtype="<f4", count=n, offset=off + 4 * n_in).astype(np.float64)
    props = [PropertyMeta(p["name"], tuple(p["shape"]), NormalizationParams.from_json(p["norm_kind"], p["params"]))
             for p in h["properties"]]
    t = h["target"]
    return Dataset(inputs, targets, np.array(h["times"], dtype=np.int64), h["model"], h["wn"], props,
                   t["name"], NormalizationParams.from_json(t["norm_kind"], t["params"]))


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
