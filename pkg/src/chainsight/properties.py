"""Per-tick property series derived from market ticks, blocks and snapshots."""

from __future__ import annotations

import base64
import csv
import zlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import CoverageGap, TooShort
from .ingest import TICK_SECONDS, ChunkStore, MarketTick
from .ledger import TickActivity

WEI_PER_ETH = 10**18
DEFAULT_BLOCK_REWARD_ETH = 5.0

SCALAR_PROPERTIES = (
    "openPrice", "closePrice", "highPrice", "stickPrice", "volumeTo", "volumeFrom",
    "transactionCount", "dappOperations", "blockSize", "difficulty", "uniqueAccounts",
    "gasLimit", "gasPrice", "gasUsed", "networkHashrate", "ETHSupply", "blockchainGrowth",
)


@dataclass
class PropertySeries:
    name: str
    times: np.ndarray   # int64, (T,)
    values: np.ndarray  # float64, (T, v1, v2)
    unit: str = ""

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values.reshape(-1, 1, 1)
        if values.ndim != 3:
            raise ValueError(f"{self.name}: values must be (T,) or (T, v1, v2)")
        if len(values) != len(self.times):
            raise ValueError(f"{self.name}: {len(self.times)} times but {len(values)} values")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError(f"{self.name}: times must be strictly increasing")
        self.values = values

    def __len__(self):
        return len(self.times)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    @property
    def is_scalar(self) -> bool:
        return self.shape == (1, 1)

    @property
    def scalar_values(self) -> np.ndarray:
        if not self.is_scalar:
            raise ValueError(f"{self.name} is not scalar-valued")
        return self.values[:, 0, 0]

    def slice_times(self, times: np.ndarray) -> "PropertySeries":
        idx = np.searchsorted(self.times, times)
        if np.any(idx >= len(self.times)) or np.any(self.times[np.minimum(idx, len(self.times) - 1)] != times):
            raise ValueError(f"{self.name} does not cover the requested times")
        return PropertySeries(self.name, self.times[idx], self.values[idx], self.unit)


def to_relative(series: PropertySeries) -> PropertySeries:
    """First difference, stamped with the later timestamp of each pair."""
    values = series.scalar_values
    if len(values) < 2:
        raise TooShort(f"{series.name}: need at least 2 values for a relative series")
    return PropertySeries(f"{series.name}_rel", series.times[1:], np.diff(values), series.unit)


def _mean(xs) -> float:
    return float(sum(xs)) / len(xs) if xs else 0.0


def compute_scalar_properties(
    ticks: Mapping[int, MarketTick] | Sequence[MarketTick],
    activities: Sequence[TickActivity],
    *,
    block_reward_eth: float = DEFAULT_BLOCK_REWARD_ETH,
    pending_tx: Mapping[int, float] | None = None,
    forward_fill: bool = False,
) -> dict[str, PropertySeries]:
    """All scalar properties over the ticks covered by ``activities``.

    Means over an empty set (a tick without blocks or transactions) are 0.
    ``networkHashrate`` is mean difficulty over the mean interval between the
    tick's blocks, 0 with fewer than two blocks or a zero interval.
    ``ETHSupply`` counts ``block_reward_eth`` for every block mined so far.
    """
    if not isinstance(ticks, Mapping):
        ticks = {t.time: t for t in ticks}
    cols: dict[str, list[float]] = {name: [] for name in SCALAR_PROPERTIES}
    times = []
    prev_tick = None
    last_number = None
    for act in activities:
        tick = ticks.get(act.tick)
        if tick is None:
            if not forward_fill or prev_tick is None:
                raise CoverageGap(act.tick)
            c = prev_tick.close
            tick = MarketTick(act.tick, c, c, c, c, 0.0, 0.0)
        prev_tick = tick
        times.append(act.tick)

        blocks = [b for b, _ in act.blocks]
        txs = [tx for _, block_txs in act.blocks for tx in block_txs]
        accounts = act.snapshot.accounts

        cols["openPrice"].append(tick.open)
        cols["closePrice"].append(tick.close)
        cols["highPrice"].append(tick.high)
        cols["stickPrice"].append(tick.open - tick.close)
        cols["volumeTo"].append(tick.volume_to)
        cols["volumeFrom"].append(tick.volume_from)
        cols["transactionCount"].append(float(len(txs)))
        cols["dappOperations"].append(float(sum(
            1 for tx in txs if tx.to_addr and tx.to_addr in accounts and accounts[tx.to_addr].is_contract)))
        cols["blockSize"].append(_mean([b.size_bytes for b in blocks]))
        difficulty = _mean([b.difficulty for b in blocks])
        cols["difficulty"].append(difficulty)
        cols["uniqueAccounts"].append(float(act.snapshot.unique_accounts))
        cols["gasLimit"].append(_mean([b.gas_limit for b in blocks]))
        cols["gasPrice"].append(_mean([tx.gas_price_wei for tx in txs]))
        cols["gasUsed"].append(_mean([b.gas_used for b in blocks]))
        hashrate = 0.0
        if len(blocks) >= 2:
            interval = (blocks[-1].timestamp - blocks[0].timestamp) / (len(blocks) - 1)
            if interval > 0:
                hashrate = difficulty / interval
        cols["networkHashrate"].append(hashrate)
        if blocks:
            last_number = blocks[-1].number
        cols["ETHSupply"].append(block_reward_eth * (last_number or 0))
        cols["blockchainGrowth"].append(sum(b.size_bytes for b in blocks) / 1e9)

    out = {name: PropertySeries(name, times, vals) for name, vals in cols.items()}
    if pending_tx is not None:
        missing = [t for t in times if t not in pending_tx]
        if missing:
            raise CoverageGap(missing[0])
        out["pendingTx"] = PropertySeries("pendingTx", times, [float(pending_tx[t]) for t in times])
    return out


def tick_range(start: int, end: int) -> list[int]:
    """Hour-aligned tick start times in ``[start, end)``."""
    first = -(-start // TICK_SECONDS) * TICK_SECONDS
    return list(range(first, end, TICK_SECONDS))


# ---------------------------------------------------------------- persistence


def series_to_records(series: PropertySeries) -> list[dict]:
    if series.is_scalar:
        return [{"time": int(t), "value": float(v)} for t, v in zip(series.times, series.scalar_values)]
    v1, v2 = series.shape
    return [
        {"time": int(t), "shape": [v1, v2],
         "z": base64.b64encode(zlib.compress(np.ascontiguousarray(m, dtype="<f8").tobytes(), 6)).decode()}
        for t, m in zip(series.times, series.values)
    ]


def series_from_records(name: str, records: list[dict]) -> PropertySeries:
    times = [r["time"] for r in records]
    if records and "z" in records[0]:
        v1, v2 = records[0]["shape"]
        values = np.stack([
            np.frombuffer(zlib.decompress(base64.b64decode(r["z"])), dtype="<f8").reshape(v1, v2)
            for r in records
        ]) if records else np.zeros((0, v1, v2))
    else:
        values = np.array([r["value"] for r in records], dtype=np.float64).reshape(-1, 1, 1)
    return PropertySeries(name, times, values)


def store_series(store: ChunkStore, series: PropertySeries) -> None:
    store.put(f"prop.{series.name}", series_to_records(series))


def load_series(store: ChunkStore, name: str, start: int | None = None, end: int | None = None) -> PropertySeries:
    key = f"prop.{name}"
    recs = store.get_all(key) if start is None else store.get(key, start, end)
    return series_from_records(name, recs)


def export_csv(series: PropertySeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "value"])
        for t, v in zip(series.times, series.scalar_values):
            w.writerow([int(t), repr(float(v))])
