import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chainsight.errors import CoverageGap, TooShort
from chainsight.ingest import Block, ChunkStore, MarketTick, Transaction, read_blocks, read_ticks, read_traces, read_transactions
from chainsight.ledger import Ledger, LedgerSnapshot, TickActivity, replay_ticks
from chainsight.properties import (
    SCALAR_PROPERTIES,
    PropertySeries,
    compute_scalar_properties,
    export_csv,
    load_series,
    store_series,
    tick_range,
    to_relative,
)

T0 = 3600 * 1000


def tick(t, o=200.0, c=205.0):
    return MarketTick(t, o, max(o, c) + 5, min(o, c) - 5, c, 1000.0, 900.0)


def blk(number, ts, size=500, difficulty=100):
    return Block(ts, number, "0xm", size, difficulty, 8_000_000, 21000, 0)


def activity(t, blocks, txs=()):
    return TickActivity(t, [(b, [x for x in txs if x.block_number == b.number]) for b in blocks],
                        LedgerSnapshot(t + 3600, {}, 0))


def test_stick_price():
    props = compute_scalar_properties([tick(T0)], [activity(T0, [])])
    assert props["stickPrice"].scalar_values.tolist() == [-5.0]
    assert props["openPrice"].scalar_values.tolist() == [200.0]
    assert props["highPrice"].scalar_values.tolist() == [210.0]


def test_block_size_and_growth():
    props = compute_scalar_properties([tick(T0)], [activity(T0, [blk(1, T0, 500), blk(2, T0 + 10, 700)])])
    assert props["blockSize"].scalar_values[0] == 600
    assert props["blockchainGrowth"].scalar_values[0] == pytest.approx(1.2e-6, rel=1e-12)


def test_network_hashrate():
    props = compute_scalar_properties(
        [tick(T0)], [activity(T0, [blk(1, T0, difficulty=200), blk(2, T0 + 30, difficulty=400)])])
    assert props["networkHashrate"].scalar_values[0] == 10.0
    single = compute_scalar_properties([tick(T0)], [activity(T0, [blk(1, T0)])])
    assert single["networkHashrate"].scalar_values[0] == 0.0


def test_empty_tick_means_are_zero():
    props = compute_scalar_properties([tick(T0)], [activity(T0, [])])
    for name in ("blockSize", "difficulty", "gasLimit", "gasPrice", "gasUsed", "transactionCount"):
        assert props[name].scalar_values[0] == 0.0


def test_gas_price_is_transaction_mean():
    txs = [Transaction(1, "0xa", "0xb", 0, 1, p, None) for p in (10, 20)] + [Transaction(2, "0xa", "0xb", 0, 1, 60, None)]
    props = compute_scalar_properties([tick(T0)], [activity(T0, [blk(1, T0), blk(2, T0 + 5)], txs)])
    assert props["gasPrice"].scalar_values[0] == 30.0
    assert props["transactionCount"].scalar_values[0] == 3.0


def test_eth_supply_counts_blocks_so_far():
    acts = [activity(T0, [blk(1, T0), blk(2, T0 + 9)]), activity(T0 + 3600, [])]
    props = compute_scalar_properties([tick(T0), tick(T0 + 3600)], acts, block_reward_eth=5.0)
    assert props["ETHSupply"].scalar_values.tolist() == [10.0, 10.0]


def test_missing_tick_is_an_error():
    acts = [activity(T0, []), activity(T0 + 3600, [])]
    with pytest.raises(CoverageGap):
        compute_scalar_properties([tick(T0)], acts)


def test_forward_fill():
    acts = [activity(T0, []), activity(T0 + 3600, [])]
    props = compute_scalar_properties([tick(T0)], acts, forward_fill=True)
    assert props["openPrice"].scalar_values.tolist() == [200.0, 205.0]
    assert props["closePrice"].scalar_values.tolist() == [205.0, 205.0]
    assert props["volumeFrom"].scalar_values.tolist() == [1000.0, 0.0]


def test_pending_tx_is_optional():
    props = compute_scalar_properties([tick(T0)], [activity(T0, [])])
    assert "pendingTx" not in props
    props = compute_scalar_properties([tick(T0)], [activity(T0, [])], pending_tx={T0: 12})
    assert props["pendingTx"].scalar_values.tolist() == [12.0]


def test_tick_range():
    assert tick_range(3599, 3 * 3600) == [3600, 7200]
    assert tick_range(0, 0) == []


def test_to_relative_examples():
    rel = to_relative(PropertySeries("p", [0, 3600, 7200], [100, 103, 101]))
    assert rel.name == "p_rel"
    assert rel.values.ravel().tolist() == [3, -2]
    assert rel.times.tolist() == [3600, 7200]
    assert to_relative(PropertySeries("p", [0, 1, 2], [5, 5, 5])).values.ravel().tolist() == [0, 0]
    with pytest.raises(TooShort):
        to_relative(PropertySeries("p", [0], [1]))


@given(st.lists(st.integers(-10**6, 10**6), min_size=2, max_size=50))
def test_relative_reconstruction(values):
    series = PropertySeries("p", np.arange(len(values)) * 3600, values)
    rel = to_relative(series)
    rebuilt = np.concatenate([[values[0]], values[0] + np.cumsum(rel.scalar_values)])
    assert rebuilt.tolist() == [float(v) for v in values]


def test_series_validation():
    with pytest.raises(ValueError):
        PropertySeries("p", [0, 0], [1, 2])
    with pytest.raises(ValueError):
        PropertySeries("p", [0, 1], [1])


def test_fixture_properties(fixture_dir):
    ticks = list(read_ticks(fixture_dir / "ticks.csv"))
    blocks = list(read_blocks(fixture_dir / "blocks.jsonl"))
    txs = list(read_transactions(fixture_dir / "transactions.jsonl"))
    traces = list(read_traces(fixture_dir / "traces.jsonl"))
    by_tx = {}
    for x in txs:
        by_tx.setdefault(x.block_number, []).append(x)
    by_tr = {}
    for x in traces:
        by_tr.setdefault(x.block_number, []).append(x)
    items = [(b, by_tx.get(b.number, []), by_tr.get(b.number, [])) for b in blocks]
    times = [t.time for t in ticks]
    acts = list(replay_ticks(Ledger(miner_reward_wei=5 * 10**18), items, times))
    props = compute_scalar_properties(ticks, acts)
    assert set(props) == set(SCALAR_PROPERTIES)
    assert all(len(p) == len(ticks) for p in props.values())
    unique = props["uniqueAccounts"].scalar_values
    assert np.all(np.diff(unique) >= 0)
    assert np.all(to_relative(props["uniqueAccounts"]).scalar_values >= 0)
    assert props["dappOperations"].scalar_values.sum() > 0
    assert props["transactionCount"].scalar_values.sum() == len(txs)


def test_store_round_trip(tmp_path):
    store = ChunkStore(tmp_path)
    scalar = PropertySeries("s", [0, 3600, 7200], [0.1, -2.5, 1e300])
    tensor = PropertySeries("d", [0, 3600], np.random.default_rng(0).random((2, 3, 4)))
    for s in (scalar, tensor):
        store_series(store, s)
        back = load_series(store, s.name)
        assert back.times.tolist() == s.times.tolist()
        assert np.array_equal(back.values, s.values)
    assert load_series(store, "s", 3600, 7200).scalar_values.tolist() == [-2.5]


def test_export_csv(tmp_path):
    series = PropertySeries("s", [0, 3600], [0.1, 2.0])
    export_csv(series, tmp_path / "s.csv")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["time", "value"]
    assert [(int(t), float(v)) for t, v in rows[1:]] == [(0, 0.1), (3600, 2.0)]
