"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v -s`` (the summary lines
are also printed at the end of any pytest run that includes this file).
"""

import hashlib
import json
import math
import time
from contextlib import contextmanager

import numpy as np

from chainsight.cli import main
from chainsight.datasetgen import (
    WindowSpec,
    build_dataset,
    build_preset,
    dataset_bytes,
    dataset_from_bytes,
    inverse_normalize,
    make_windows,
    model_matrix,
    model_stacked,
    normalize,
    stacked_shape,
)
from chainsight.distributions import (
    BALANCE_DIST_NAME,
    LOG2,
    ScaleFn,
    all_distributions,
    builtin_configs,
)
from chainsight.errors import BadMagic, TruncatedPayload
from chainsight.fixture import generate_fixture, random_walk_series
from chainsight.ingest import Block, Transaction
from chainsight.ledger import Ledger, replay_ticks
from chainsight.modeling import (
    TrainConfig,
    checkpoint_bytes,
    checkpoint_from_bytes,
    evaluate,
    gradient_check,
    make_predictor,
    predict_null,
    r2_null_half,
    train,
)
from chainsight.properties import PropertySeries

from test_distributions import brute_floor_log, naive_balance_distribution, naive_number_distribution, random_snapshot
from test_modeling import raw_dataset

RESULTS = []


@contextmanager
def criterion(number, title, limit_s):
    start = time.perf_counter()
    ok = False
    try:
        yield
        elapsed = time.perf_counter() - start
        assert elapsed < limit_s, f"took {elapsed:.2f}s, limit {limit_s}s"
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} ({elapsed:.2f}s, limit {limit_s}s)"
        RESULTS.append(line)
        print(line)


# 1 -------------------------------------------------------------------------


def test_criterion_1_normalization():
    with criterion(1, "normalization round-trip, image moments, range/sign invariants", 5):
        rng = np.random.default_rng(1)
        for k in range(1000):
            n = int(rng.integers(3, 200))
            x = rng.normal(rng.normal(0, 100), rng.uniform(0.01, 1000), n)
            if k % 3 == 0:
                x = np.abs(x)
            scale = max(1.0, np.abs(x).max())
            for kind in ("basic", "around_zero", "image"):
                y, p = normalize(x, kind)
                assert np.max(np.abs(inverse_normalize(y, p) - x)) / scale < 1e-9
            img, _ = normalize(x, "image")
            assert abs(img.mean()) < 1e-9 and abs(img.std() - 1) < 1e-9
            basic, _ = normalize(x, "basic")
            assert basic.min() == 0 and basic.max() == 1
            az, _ = normalize(x, "around_zero")
            assert az.min() >= 0 and az.max() <= 1
            assert np.all(az[x > 0] > 0.5) and np.all(az[x < 0] < 0.5)
            assert math.isclose(np.max(np.abs(az - 0.5)), 0.5)


# 2 -------------------------------------------------------------------------


def test_criterion_2_windows():
    with criterion(2, "sample count, matrix reconstruction, stacked packing", 5):
        rng = np.random.default_rng(2)
        for _ in range(300):
            wn = int(rng.integers(1, 10))
            length = wn + int(rng.integers(1, 40))
            shapes = [(int(rng.integers(1, 5)), int(rng.integers(1, 6))) for _ in range(int(rng.integers(1, 4)))]
            props = [rng.random((length,) + s) for s in shapes]
            wins, targets, _ = make_windows(wn, props, rng.random(length))
            assert len(targets) == length - wn
            packed = model_stacked(wins)
            assert packed.shape[1:] == stacked_shape(shapes, wn)
            assert packed.shape[1:] == (sum(a for a, _ in shapes), max(b for _, b in shapes), wn)
            # injectivity: distinct values in, each appears exactly once out
            uniq = [np.arange(1, length * a * b + 1, dtype=float).reshape(length, a, b) + 10**6 * k
                    for k, (a, b) in enumerate(shapes)]
            uw, _, _ = make_windows(wn, uniq, np.zeros(length))
            cell = model_stacked(uw)[0]
            nz = cell[cell != 0]
            assert len(nz) == sum(a * b for a, b in shapes) * wn == len(np.unique(nz))

            raw = [rng.normal(300, 50, length) for _ in range(int(rng.integers(1, 4)))]
            normed = [normalize(r, "basic") for r in raw]
            mw, _, _ = make_windows(wn, [v for v, _ in normed], raw[0])
            mat = model_matrix(mw)
            for k, (r, (_, p)) in enumerate(zip(raw, normed)):
                back = inverse_normalize(mat[:, k, :], p)
                expect = np.stack([r[i:i + wn] for i in range(length - wn)])
                assert np.max(np.abs(back - expect)) < 1e-9 * np.abs(r).max()


# 3 -------------------------------------------------------------------------


def test_criterion_3_distribution_oracle():
    with criterion(3, "distributions equal naive oracle; mass; grid shapes", 10):
        cfgs = builtin_configs()
        assert [c.shape for c in cfgs] == [(88, 92), (88, 92), (23, 18)]
        for c in cfgs:
            assert c.shape == (brute_floor_log(c.scl1.base, c.mx1), brute_floor_log(c.scl2.base, c.mx2))
        assert ScaleFn(2.0).group_count(10**26) == 86
        rng = np.random.default_rng(3)
        for _ in range(200):
            snap = random_snapshot(rng, int(rng.integers(0, 101)))
            got = all_distributions(snap)
            for c in cfgs:
                assert np.array_equal(got[c.name].raw, naive_number_distribution(snap, c))
                assert got[c.name].raw.sum() == len(c.select(snap))
            assert np.allclose(got[BALANCE_DIST_NAME].raw, naive_balance_distribution(snap, LOG2, 10**26),
                               rtol=1e-12, atol=0)


# 4 -------------------------------------------------------------------------


def test_criterion_4_ledger():
    with criterion(4, "conservation over 1e4 transfers; unique_accounts monotone; determinism", 10):
        rng = np.random.default_rng(4)
        addrs = [f"0x{i:040x}" for i in range(300)]
        led = Ledger()
        for a in addrs:
            led.credit(a, 10**12)
        total = led.total_balance()
        for k in range(10_000):
            i, j = rng.integers(0, len(addrs), 2)
            led.apply_value_transfer(addrs[i], addrs[j], int(rng.integers(0, 10**6)), k)
        assert not led.report.clamps
        assert led.total_balance() == total

        items, t = [], 3600 * 500
        for n in range(1, 400):
            t += int(rng.integers(1, 1200))
            txs = [Transaction(n, addrs[int(i)], addrs[int(j)], 0, 21000, 1, None)
                   for i, j in rng.integers(0, len(addrs), (int(rng.integers(0, 8)), 2))]
            items.append((Block(t, n, addrs[n % 7], 500, 1, 10**7, 0, len(txs)), txs, []))
        ticks = list(range(3600 * 500, t + 3600, 3600))
        runs = []
        for _ in range(2):
            acts = list(replay_ticks(Ledger(miner_reward_wei=5), items, ticks))
            uniq = [a.snapshot.unique_accounts for a in acts]
            assert uniq == sorted(uniq)
            runs.append([a.snapshot.digest() for a in acts])
        assert runs[0] == runs[1]


# 5 -------------------------------------------------------------------------


def test_criterion_5_persistence_cheat():
    with criterion(5, "persistence r2 > 0.95, sign in [0.4,0.6] absolute; r2 <= 0 relative", 10):
        series = random_walk_series(seed=7, n_ticks=1000, start=300.0)
        ds = build_dataset(WindowSpec(8, ("highPrice",), "highPrice", "prop"), series)
        absolute = evaluate(make_predictor("persistence", ds.input_shape), ds)
        ds_rel = build_dataset(WindowSpec(8, ("highPrice_rel",), "highPrice_rel", "prop"), series)
        relative = evaluate(make_predictor("persistence", ds_rel.input_shape), ds_rel)
        print(f"  absolute: r2={absolute.r2:.4f} sign={absolute.sign:.4f}; relative: r2={relative.r2:.4f}")
        assert absolute.r2 > 0.95
        assert 0.4 <= absolute.sign <= 0.6
        assert relative.r2 <= 0


# 6 -------------------------------------------------------------------------


def test_criterion_6_training():
    with criterion(6, "gradient check, least-squares recovery, null r2 == 0", 30):
        rng = np.random.default_rng(6)
        for kind in ("linear", "mlp"):
            for seed in range(5):
                pred = make_predictor(kind, (4, 3), hidden=16, seed=seed)
                if kind == "linear":
                    pred.params = rng.normal(size=pred.n_params())
                x, y = rng.normal(size=(16, 4, 3)), rng.normal(size=16)
                assert gradient_check(pred, x, y) < 1e-4

        x = rng.uniform(-1, 1, size=(1000, 1))
        y = 2 * x[:, 0] + 1
        pred = make_predictor("linear", (1,))
        train(pred, raw_dataset(x, y), TrainConfig(learning_rate=1e-2, epochs=500, batch_size=16))
        oracle, *_ = np.linalg.lstsq(np.hstack([x, np.ones((1000, 1))]), y, rcond=None)
        assert np.max(np.abs(pred.params - oracle)) < 1e-3

        for _ in range(20):
            true = rng.normal(0.5, 0.3, int(rng.integers(1, 100)))
            assert r2_null_half(np.full(len(true), predict_null()), true) == 0.0
        series = random_walk_series(seed=1, n_ticks=200)
        ds = build_dataset(WindowSpec(4, ("highPrice",), "highPrice", "basic"), series)
        assert evaluate(make_predictor("null_half", ds.input_shape), ds).r2 == 0.0


# 7 -------------------------------------------------------------------------


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.suffix != ".lock":
            h.update(str(p.relative_to(root)).encode())
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def test_criterion_7_end_to_end(tmp_path):
    with criterion(7, "fixture run-all: finite metrics, identical hashes across two runs", 60):
        digests, metrics = [], []
        for k in range(2):
            d = tmp_path / f"run{k}"
            generate_fixture(d, seed=7, n_blocks=1000, n_accounts=200)
            code = main(["run-all", "--config", str(d / "config.json"), "--preset", "8", "--wn", "8",
                         "--norm", "image", "--target", "highPrice_rel", "--epochs", "10", "--threads", "1"])
            assert code == 0
            report = json.loads((d / "store" / "artifacts" / "metrics.json").read_text())
            metrics.append(report)
            digests.append(_tree_digest(d))
        for key in ("mse", "rmse", "r2", "sign"):
            assert math.isfinite(metrics[0][key]), key
        assert metrics[0]["n"] > 0
        assert digests[0] == digests[1]


# 8 -------------------------------------------------------------------------


def test_criterion_8_file_formats():
    with criterion(8, "dataset and checkpoint byte-exact round trip; magic/truncation errors", 10):
        series = random_walk_series(seed=8, n_ticks=120)
        rng = np.random.default_rng(8)
        series["accountBalanceDistribution"] = PropertySeries(
            "accountBalanceDistribution", series["highPrice"].times, rng.random((120, 3, 86)))
        for ds in (build_dataset(WindowSpec(6, ("highPrice",), "highPrice", "prop"), series),
                   build_preset(5, 4, "image", "highPrice_rel", series)):
            data = dataset_bytes(ds)
            assert dataset_bytes(dataset_from_bytes(data)) == data
            _expect(BadMagic, dataset_from_bytes, b"ZZZZ" + data[4:])
            for cut in (3, 7, 30, len(data) // 2, len(data) - 1):
                _expect((TruncatedPayload, BadMagic), dataset_from_bytes, data[:cut])
            _expect(TruncatedPayload, dataset_from_bytes, data[:len(data) - 1])
        for kind in ("linear", "mlp"):
            pred = make_predictor(kind, (5, 4), hidden=9, seed=3)
            data = checkpoint_bytes(pred)
            assert checkpoint_bytes(checkpoint_from_bytes(data)) == data
            _expect(BadMagic, checkpoint_from_bytes, b"BPD1" + data[4:])
            _expect(TruncatedPayload, checkpoint_from_bytes, data[:-8])


def _expect(exc, fn, *args):
    try:
        fn(*args)
    except exc:
        return
    raise AssertionError(f"{fn.__name__} did not raise {exc}")


if __name__ == "__main__":
    import sys

    import pytest

    sys.exit(pytest.main([__file__, "-v", "-s"]))
