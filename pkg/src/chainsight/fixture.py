"""Deterministic synthetic chain + market data for desk-scale runs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasetgen import DEFAULT_RANGE
from .properties import PropertySeries, to_relative
from .ingest import TICK_SECONDS, Block, MarketTick, Trace, Transaction, write_jsonl, write_ticks

GWEI = 10**9
ETH = 10**18
BLOCK_REWARD = 5 * ETH
MEAN_BLOCK_INTERVAL = 600  # seconds; stretches 1000 blocks over ~7 days of ticks
GAS_LIMIT = 6_700_000


@dataclass(frozen=True)
class FixturePaths:
    blocks: Path
    transactions: Path
    traces: Path
    ticks: Path
    config: Path


def _address(tag: str, i: int) -> str:
    return "0x" + f"{tag}{i:x}".rjust(40, "0")


def generate_fixture(out_dir, seed: int = 7, n_blocks: int = 1000, n_accounts: int = 200) -> FixturePaths:
    """Write blocks/transactions/traces JSONL, ticks CSV and a pipeline config.

    Miners earn a flat 5 ETH per block (the config enables the same reward in
    the ledger), and every transfer is bounded by the sender's simulated
    balance, so replay never clamps. About one account in ten gets a contract
    that receives ERC20 calls and forwards plain payments through traces.
    """
    if n_blocks < 1:
        raise ValueError("n_blocks must be >= 1")
    if n_accounts < 2:
        raise ValueError("n_accounts must be >= 2")
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    eoas = [_address("e", i) for i in range(n_accounts)]
    miners = eoas[: max(1, min(5, n_accounts // 10))]
    balance = {a: 0 for a in eoas}
    contracts: list[str] = []
    n_contracts = max(1, n_accounts // 10)
    factory_spawned = 0

    blocks, txs, traces = [], [], []
    t = DEFAULT_RANGE[0] + int(rng.integers(0, 600))
    difficulty = 1_500_000_000_000_000
    for number in range(1, n_blocks + 1):
        t += max(1, int(rng.exponential(MEAN_BLOCK_INTERVAL)))
        difficulty = max(1, difficulty + int(rng.normal(0, 2e12)))
        miner = miners[int(rng.integers(len(miners)))]
        block_txs, block_traces = [], []
        gas_total = 0
        # traces settle after all of the block's transactions, as in replay
        trace_credits = []
        funded = [a for a in eoas if balance[a] > 0]
        # at most ~20 txs of <= 120k gas: always under GAS_LIMIT
        for _ in range(min(int(rng.poisson(6)), 20)):
            if not funded:
                break
            sender = funded[int(rng.integers(len(funded)))]
            gas_price = int(rng.integers(1, 50)) * GWEI
            roll = rng.random()
            if len(contracts) < n_contracts and roll < 0.2:
                addr = _address("c", len(contracts))
                contracts.append(addr)
                tx = Transaction(number, sender, "", 0, 120_000, gas_price, "60806040", creates=addr)
            elif contracts and roll < 0.4:
                selector = "a9059cbb" if rng.random() < 0.7 else "23b872dd"
                target = contracts[int(rng.integers(len(contracts)))]
                tx = Transaction(number, sender, target, 0, 52_000, gas_price, selector)
            elif contracts and roll < 0.55:
                target = contracts[int(rng.integers(len(contracts)))]
                value = balance[sender] * int(rng.integers(1, 30)) // 100
                payee = eoas[int(rng.integers(len(eoas)))]
                tx = Transaction(number, sender, target, value, 35_000, gas_price, "d0e30db0")
                block_traces.append(Trace(number, target, payee, value, "call"))
                balance[sender] -= value
                trace_credits.append((payee, value))
                if factory_spawned < n_contracts and rng.random() < 0.1:
                    child = _address("f", factory_spawned)
                    factory_spawned += 1
                    block_traces.append(Trace(number, target, child, 0, "create"))
            else:
                receiver = eoas[int(rng.integers(len(eoas)))]
                value = balance[sender] * int(rng.integers(1, 40)) // 100
                tx = Transaction(number, sender, receiver, value, 21_000, gas_price, None)
                balance[sender] -= value
                balance[receiver] += value
            gas_total += tx.gas_used
            block_txs.append(tx)
        for payee, value in trace_credits:
            balance[payee] += value
        balance[miner] += BLOCK_REWARD
        blocks.append(Block(t, number, miner, 540 + 110 * len(block_txs), difficulty, GAS_LIMIT,
                            gas_total, len(block_txs)))
        txs.extend(block_txs)
        traces.extend(block_traces)

    first_tick = blocks[0].timestamp - blocks[0].timestamp % TICK_SECONDS
    last_tick = blocks[-1].timestamp - blocks[-1].timestamp % TICK_SECONDS
    ticks = []
    close = 300.0
    for tt in range(first_tick, last_tick + TICK_SECONDS, TICK_SECONDS):
        o = close
        close = round(max(1.0, o + float(rng.normal(0, 1.5))), 4)
        hi = round(max(o, close) + abs(float(rng.normal(0, 0.5))), 4)
        lo = round(max(0.5, min(o, close) - abs(float(rng.normal(0, 0.5)))), 4)
        vol_from = round(float(rng.lognormal(8, 0.5)), 4)
        vol_to = round(vol_from * (o + close) / 2, 4)
        ticks.append(MarketTick(tt, o, hi, lo, close, vol_from, vol_to))

    paths = FixturePaths(out / "blocks.jsonl", out / "transactions.jsonl", out / "traces.jsonl",
                         out / "ticks.csv", out / "config.json")
    write_jsonl(paths.blocks, blocks)
    write_jsonl(paths.transactions, txs)
    write_jsonl(paths.traces, traces)
    write_ticks(paths.ticks, ticks)

    n_ticks = len(ticks)
    config = {
        "blocks": paths.blocks.name,
        "transactions": paths.transactions.name,
        "traces": paths.traces.name,
        "ticks": paths.ticks.name,
        "store": "store",
        "start": first_tick,
        "end": last_tick + TICK_SECONDS,
        "boundary": first_tick + (n_ticks * 3 // 4) * TICK_SECONDS,
        "preset": 8,
        "wn": 8,
        "norm": "image",
        "target": "highPrice_rel",
        "model": "linear",
        "miner_reward_wei": str(BLOCK_REWARD),
        "train": {"batch_size": 16, "learning_rate": 1e-5, "epochs": 10, "seed": seed},
        "seed": seed,
    }
    paths.config.write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    return paths


def random_walk_series(seed: int = 7, n_ticks: int = 1000, start: float = 300.0,
                       t0: int = DEFAULT_RANGE[0]) -> dict[str, PropertySeries]:
    """Hourly ``highPrice`` random walk with N(0, 1) steps, plus its ``_rel``."""
    rng = np.random.default_rng(seed)
    steps = rng.normal(0.0, 1.0, n_ticks - 1)
    prices = start + np.concatenate([[0.0], np.cumsum(steps)])
    high = PropertySeries("highPrice", t0 + TICK_SECONDS * np.arange(n_ticks), prices)
    return {"highPrice": high, "highPrice_rel": to_relative(high)}
