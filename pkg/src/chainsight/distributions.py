"""Spatial account distributions: log-bucketed 2D histograms over accounts."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import StorageError, UnknownFeature
from .ledger import AccountState, LedgerSnapshot

FEATURES = ("balance", "lastSeen", "volumeIn", "volumeOut", "transactionN", "ERC20")


@dataclass(frozen=True)
class ScaleFn:
    """``x -> log_base(floor(x / pre_divisor))``."""

    base: float = 2.0
    pre_divisor: int = 1

    def __post_init__(self):
        if self.base <= 1:
            raise ValueError("scale base must be > 1")
        if self.pre_divisor < 1:
            raise ValueError("pre_divisor must be >= 1")

    def __call__(self, x) -> float:
        v = int(x) // self.pre_divisor
        return math.log(v, self.base) if v >= 1 else 0.0

    def floor_log(self, v: int) -> int:
        """Exact ``floor(log_base(v))`` for an integer ``v >= 1``."""
        g = math.floor(math.log(v) / math.log(self.base))
        b = Fraction(str(self.base))
        while b ** (g + 1) <= v:
            g += 1
        while g > 0 and b ** g > v:
            g -= 1
        return g

    def group_count(self, mx) -> int:
        # mx is already in scaled units: the divisor is not applied here
        return self.floor_log(int(mx))


LOG2 = ScaleFn(2.0, 1)


def group_index(value, scl: ScaleFn, group_n: int) -> int:
    v = int(value) // scl.pre_divisor
    if v < 1:
        return 0
    return min(scl.floor_log(v), group_n - 1)


def group_indices(values: Sequence[int], scl: ScaleFn, group_n: int) -> np.ndarray:
    """Vectorised ``group_index`` with an exact fallback near bucket edges."""
    reduced = [int(v) // scl.pre_divisor for v in values]
    arr = np.array([float(v) for v in reduced], dtype=np.float64)
    out = np.zeros(len(reduced), dtype=np.int64)
    pos = arr >= 1
    if pos.any():
        logs = np.log(arr[pos]) / math.log(scl.base)
        g = np.floor(logs).astype(np.int64)
        near = np.abs(logs - np.rint(logs)) < 1e-9
        if near.any():
            idx = np.flatnonzero(pos)
            for k in np.flatnonzero(near):
                g[k] = scl.floor_log(reduced[idx[k]])
        out[pos] = g
    return np.minimum(out, group_n - 1)


def log_rescale(matrix: np.ndarray, base: float = 2.0) -> np.ndarray:
    """Entry-wise ``log_base``; entries below 1 map to 0."""
    m = np.asarray(matrix, dtype=np.float64)
    out = np.zeros_like(m)
    mask = m >= 1
    out[mask] = np.log(m[mask]) / math.log(base)
    return out


def feature_value(acc: AccountState, feature: str, tick_time: int) -> int:
    if feature == "balance":
        return acc.balance
    if feature == "lastSeen":
        return max(tick_time - acc.last_seen, 0)
    if feature == "volumeIn":
        return acc.volume_in
    if feature == "volumeOut":
        return acc.volume_out
    if feature == "transactionN":
        return acc.transaction_n
    if feature == "ERC20":
        return acc.erc20_n
    raise UnknownFeature(feature)


@dataclass(frozen=True)
class DistributionConfig:
    name: str
    subset: str  # "all" | "contracts"
    feat1: str
    feat2: str
    scl1: ScaleFn
    scl2: ScaleFn
    mx1: float
    mx2: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.scl1.group_count(self.mx1), self.scl2.group_count(self.mx2)

    def select(self, snapshot: LedgerSnapshot) -> list[AccountState]:
        if self.subset == "all":
            return list(snapshot.accounts.values())
        if self.subset == "contracts":
            return [a for a in snapshot.accounts.values() if a.is_contract]
        raise ValueError(f"unknown subset {self.subset!r}")


def builtin_configs() -> list[DistributionConfig]:
    tenth_eth = 10**17
    return [
        DistributionConfig("balanceLastSeenDistribution", "all", "balance", "lastSeen",
                           ScaleFn(1.2, tenth_eth), ScaleFn(1.2, 1), 10**7, 20736e3),
        DistributionConfig("contractBalanceLastSeenDistribution", "contracts", "balance", "lastSeen",
                           ScaleFn(1.2, tenth_eth), ScaleFn(1.2, 1), 10**7, 20736e3),
        DistributionConfig("contractVolumeInERC20Distribution", "contracts", "volumeIn", "ERC20",
                           ScaleFn(2.0, tenth_eth), ScaleFn(2.0, 1), 10**7, 262144),
    ]


@dataclass
class DistributionMatrix:
    tick_time: int
    values: np.ndarray
    kind: str  # "balance_activity" | "account_number"
    raw: np.ndarray | None = None  # pre-log accumulation


BALANCE_DIST_NAME = "accountBalanceDistribution"
BALANCE_FEATURES = ("volumeIn", "volumeOut", "transactionN")


def account_balance_distribution(snapshot: LedgerSnapshot, scl0: ScaleFn = LOG2,
                                 mx0: float = 1e26) -> DistributionMatrix:
    """Activity of this tick's active accounts, summed per balance group.

    Rows are volumeIn, volumeOut and transactionN; columns are balance groups.
    The final rescale uses ``log_base`` without ``scl0``'s divisor.
    """
    group_n = scl0.group_count(mx0)
    raw = np.zeros((len(BALANCE_FEATURES), group_n), dtype=np.float64)
    active = snapshot.active()
    if active:
        groups = group_indices([a.balance for a in active], scl0, group_n)
        for x, feat in enumerate(BALANCE_FEATURES):
            vals = np.array([float(feature_value(a, feat, snapshot.tick_time)) for a in active])
            np.add.at(raw[x], groups, vals)
    return DistributionMatrix(snapshot.tick_time, log_rescale(raw, scl0.base), "balance_activity", raw)


def account_number_distribution(snapshot: LedgerSnapshot, config: DistributionConfig) -> DistributionMatrix:
    for f in (config.feat1, config.feat2):
        if f not in FEATURES:
            raise UnknownFeature(f)
    n1, n2 = config.shape
    raw = np.zeros((n1, n2), dtype=np.float64)
    accounts = config.select(snapshot)
    if accounts:
        t = snapshot.tick_time
        g1 = group_indices([feature_value(a, config.feat1, t) for a in accounts], config.scl1, n1)
        g2 = group_indices([feature_value(a, config.feat2, t) for a in accounts], config.scl2, n2)
        np.add.at(raw, (g1, g2), 1.0)
    return DistributionMatrix(snapshot.tick_time, log_rescale(raw, 2.0), "account_number", raw)


def all_distributions(snapshot: LedgerSnapshot, configs: Sequence[DistributionConfig] | None = None) -> dict[str, DistributionMatrix]:
    configs = builtin_configs() if configs is None else configs
    out = {c.name: account_number_distribution(snapshot, c) for c in configs}
    out[BALANCE_DIST_NAME] = account_balance_distribution(snapshot)
    return out


def to_pgm_bytes(matrix: np.ndarray) -> bytes:
    """Binary (P5) 8-bit PGM, min-max scaled; a constant matrix renders as 0."""
    m = np.asarray(matrix, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    if hi > lo:
        pixels = np.floor((m - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)
    else:
        pixels = np.zeros(m.shape, dtype=np.uint8)
    h, w = m.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def export_frames(matrices: Sequence[DistributionMatrix], directory, prefix: str = "frame") -> list[Path]:
    if matrices:
        shape = matrices[0].values.shape
        if any(m.values.shape != shape for m in matrices):
            raise ValueError("frames must share one shape")
    out_dir = Path(directory)
    paths = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for m in matrices:
            p = out_dir / f"{prefix}_{m.tick_time}.pgm"
            p.write_bytes(to_pgm_bytes(m.values))
            paths.append(p)
    except OSError as exc:
        raise StorageError(f"cannot write frames to {os.fspath(out_dir)}: {exc}") from exc
    return paths
