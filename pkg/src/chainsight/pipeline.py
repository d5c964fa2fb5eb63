"""Pipeline configuration and the stage functions behind the CLI.

Every stage reads its inputs from the store directory, rewrites its outputs
from scratch and is therefore safe to re-run.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from itertools import groupby
from pathlib import Path

import numpy as np

from . import distributions as dist
from .datasetgen import (
    DEFAULT_BOUNDARY,
    DEFAULT_RANGE,
    PRESETS,
    WindowSpec,
    build_dataset,
    build_preset,
    read_dataset,
    split_train_test,
    write_dataset,
)
from .errors import ConfigError, InputError, MissingInput
from .ingest import (
    TICK_SECONDS,
    ChunkStore,
    ReadStats,
    block_from_json,
    fetch_blocks_rpc,
    read_blocks,
    read_ticks,
    read_traces,
    read_transactions,
    tick_from_row,
    trace_from_json,
    transaction_from_json,
    validate_chain,
)
from .ledger import Ledger, LedgerSnapshot, replay_ticks
from .modeling import (
    KINDS,
    TRAINABLE,
    TrainConfig,
    evaluate,
    export_predictions,
    history_json,
    load_checkpoint,
    make_predictor,
    save_checkpoint,
    train,
)
from .properties import (
    PropertySeries,
    compute_scalar_properties,
    load_series,
    store_series,
    tick_range,
    to_relative,
)

log = logging.getLogger(__name__)

STORE_ENV = "CHAINSIGHT_STORE"
RAW = ("raw.blocks", "raw.transactions", "raw.traces", "raw.ticks")
SNAPSHOTS = "ledger.snapshots"
NORMS = ("basic", "around_zero", "image", "prop")


def parse_time(value) -> int:
    if isinstance(value, bool):
        raise ValueError("not a time")
    if isinstance(value, (int, float)):
        return int(value)
    s = str(value).strip()
    if s.lstrip("-").isdigit():
        return int(s)
    dt = datetime.fromisoformat(s.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


@dataclass
class PipelineConfig:
    blocks: str | None = None
    transactions: str | None = None
    traces: str | None = None
    ticks: str | None = None
    rpc: str | None = None
    rpc_range: tuple[int, int] | None = None
    start: int = DEFAULT_RANGE[0]
    end: int = DEFAULT_RANGE[1]
    boundary: int = DEFAULT_BOUNDARY
    preset: int | None = 8
    properties: list[str] | None = None
    wn: int = 8
    norm: str = "image"
    target: str = "highPrice_rel"
    model: str = "linear"
    hidden: int = 64
    train: TrainConfig = field(default_factory=TrainConfig)
    store: str = "store"
    threads: int = 1
    seed: int = 0
    fit_train_only: bool = False
    skip_bad_records: bool = False
    forward_fill: bool = False
    miner_reward_wei: int = 0
    charge_gas: bool = False
    block_reward_eth: float = 5.0

    def validate(self) -> "PipelineConfig":
        if not self.start < self.boundary < self.end:
            raise ConfigError("boundary", "need start < boundary < end")
        if self.preset is None and not self.properties:
            raise ConfigError("preset", "give a preset or an explicit property list")
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigError("preset", "must be 1..8")
        if self.wn < 1:
            raise ConfigError("wn", "must be >= 1")
        if self.norm not in NORMS:
            raise ConfigError("norm", f"must be one of {', '.join(NORMS)}")
        if self.model not in KINDS:
            raise ConfigError("model", f"must be one of {', '.join(KINDS)}")
        if self.threads < 1:
            raise ConfigError("threads", "must be >= 1")
        return self

    @property
    def store_dir(self) -> Path:
        return Path(self.store)

    @property
    def artifacts(self) -> Path:
        return self.store_dir / "artifacts"

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        kw = dict(d)
        try:
            for key in ("start", "end", "boundary"):
                if key in kw:
                    kw[key] = parse_time(kw[key])
            if "train" in kw:
                kw["train"] = TrainConfig(**kw["train"])
            if "miner_reward_wei" in kw:
                kw["miner_reward_wei"] = int(kw["miner_reward_wei"])
            if kw.get("rpc_range") is not None:
                kw["rpc_range"] = tuple(int(x) for x in kw["rpc_range"])
        except (TypeError, ValueError) as exc:
            raise ConfigError("config", str(exc)) from None
        if base_dir is not None:
            for key in ("blocks", "transactions", "traces", "ticks", "store"):
                if kw.get(key) and not os.path.isabs(kw[key]):
                    kw[key] = str(base_dir / kw[key])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        p = Path(path)
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from None
        return cls.from_dict(data, p.parent)

    def to_json(self) -> dict:
        d = asdict(self)
        d["miner_reward_wei"] = str(self.miner_reward_wei)
        return d


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def open_store(cfg: PipelineConfig) -> ChunkStore:
    return ChunkStore(cfg.store_dir)


# ---------------------------------------------------------------- stages


def stage_ingest(cfg: PipelineConfig) -> dict:
    store = open_store(cfg)
    stats = {name: ReadStats() for name in ("blocks", "transactions", "traces", "ticks")}
    skip = cfg.skip_bad_records
    if cfg.rpc:
        if cfg.rpc_range is None:
            raise ConfigError("rpc_range", "required with rpc")
        pairs = list(fetch_blocks_rpc(cfg.rpc, *cfg.rpc_range))
        blocks = [b for b, _ in pairs]
        txs = [tx for _, block_txs in pairs for tx in block_txs]
    else:
        for key in ("blocks", "ticks"):
            path = getattr(cfg, key)
            if not path or not Path(path).exists():
                raise MissingInput("ingest", f"{key} file {path}")
        blocks = list(read_blocks(cfg.blocks, skip, stats["blocks"]))
        txs = list(read_transactions(cfg.transactions, skip, stats["transactions"])) \
            if cfg.transactions and Path(cfg.transactions).exists() else []
    traces = list(read_traces(cfg.traces, skip, stats["traces"])) \
        if cfg.traces and Path(cfg.traces).exists() else []
    if not cfg.ticks or not Path(cfg.ticks).exists():
        raise MissingInput("ingest", f"ticks file {cfg.ticks}")
    ticks = list(read_ticks(cfg.ticks, skip, stats["ticks"]))

    blocks.sort(key=lambda b: b.number)
    report = validate_chain(blocks)
    if not report.ok and not skip:
        raise InputError(f"chain validation failed: gaps={report.gaps[:5]} "
                         f"regressions={report.timestamp_regressions[:5]}")
    block_time = {b.number: b.timestamp for b in blocks}

    def stamped(rec, number, index):
        d = rec.to_json()
        d["time"] = block_time[number]
        d["index"] = index
        return d

    for name in RAW:
        store.drop(name)
    store.put("raw.blocks", [dict(b.to_json(), time=b.timestamp) for b in blocks])
    keyed = [tx for tx in txs if tx.block_number in block_time]
    store.put("raw.transactions", [stamped(tx, tx.block_number, i) for i, tx in enumerate(keyed)])
    keyed_tr = [tr for tr in traces if tr.block_number in block_time]
    store.put("raw.traces", [stamped(tr, tr.block_number, i) for i, tr in enumerate(keyed_tr)])
    store.put("raw.ticks", [t.to_json() for t in ticks])
    summary = {
        "blocks": len(blocks), "transactions": len(keyed), "traces": len(keyed_tr), "ticks": len(ticks),
        "skipped": {k: s.skipped for k, s in stats.items()},
        "gaps": report.gaps, "timestamp_regressions": report.timestamp_regressions,
    }
    _dump_json(summary, cfg.artifacts / "ingest.json")
    return summary


def _require(store: ChunkStore, series: str, stage: str) -> None:
    if not store.has(series):
        raise MissingInput(stage, series)


def _load_chain(store: ChunkStore):
    blocks = [block_from_json(r) for r in store.get_all("raw.blocks")]
    txs = [transaction_from_json(r) for r in sorted(store.get_all("raw.transactions"), key=lambda r: r["index"])]
    traces = [trace_from_json(r) for r in sorted(store.get_all("raw.traces"), key=lambda r: r["index"])]
    by_block_tx = {k: list(g) for k, g in groupby(txs, key=lambda t: t.block_number)}
    by_block_tr = {k: list(g) for k, g in groupby(traces, key=lambda t: t.block_number)}
    blocks.sort(key=lambda b: b.number)
    return [(b, by_block_tx.get(b.number, []), by_block_tr.get(b.number, [])) for b in blocks]


def stage_properties(cfg: PipelineConfig) -> dict:
    store = open_store(cfg)
    for s in RAW:
        _require(store, s, "properties")
    items = _load_chain(store)
    ticks = {t.time: t for t in (tick_from_row(r) for r in store.get_all("raw.ticks"))}
    ledger = Ledger(miner_reward_wei=cfg.miner_reward_wei, charge_gas=cfg.charge_gas)
    activities = list(replay_ticks(ledger, items, tick_range(cfg.start, cfg.end)))
    if not activities:
        raise InputError("tick range is empty")
    props = compute_scalar_properties(ticks, activities, block_reward_eth=cfg.block_reward_eth,
                                      forward_fill=cfg.forward_fill)
    for name in list(props):
        props[f"{name}_rel"] = to_relative(props[name])
    for name, series in props.items():
        store.drop(f"prop.{name}")
        store_series(store, series)
    store.drop(SNAPSHOTS)
    store.put(SNAPSHOTS, [dict(a.snapshot.to_record(), time=a.tick) for a in activities])
    summary = {"ticks": len(activities), "properties": sorted(props), "clamps": len(ledger.report.clamps),
               "saturations": ledger.report.saturations}
    _dump_json(summary, cfg.artifacts / "properties.json")
    return summary


def _snapshot_from_store(rec: dict) -> LedgerSnapshot:
    # records are keyed by tick start; the snapshot itself was taken at tick end
    return LedgerSnapshot.from_record(dict(rec, time=rec["time"] + TICK_SECONDS))


def stage_distributions(cfg: PipelineConfig) -> dict:
    store = open_store(cfg)
    _require(store, SNAPSHOTS, "distributions")
    records = store.get(SNAPSHOTS, cfg.start, cfg.end)
    if not records:
        raise MissingInput("distributions", "snapshots in range")
    ticks = [r["time"] for r in records]

    def one(rec):
        return dist.all_distributions(_snapshot_from_store(rec))

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            per_tick = list(pool.map(one, records))
    else:
        per_tick = [one(r) for r in records]
    names = list(per_tick[0])
    for name in names:
        series = PropertySeries(name, ticks, np.stack([d[name].values for d in per_tick]))
        store.drop(f"prop.{name}")
        store_series(store, series)
    summary = {"ticks": len(ticks), "distributions": {n: list(per_tick[0][n].values.shape) for n in names}}
    _dump_json(summary, cfg.artifacts / "distributions.json")
    return summary


def dataset_path(cfg: PipelineConfig) -> Path:
    return cfg.artifacts / "dataset.bpd"


def stage_dataset(cfg: PipelineConfig, out: Path | None = None) -> Path:
    store = open_store(cfg)
    names = list(PRESETS[cfg.preset][0]) if cfg.preset is not None else list(cfg.properties)
    series = {}
    for n in names + [cfg.target]:
        if not store.has(f"prop.{n}"):
            raise MissingInput("dataset", f"property series {n}")
        series[n] = load_series(store, n, cfg.start, cfg.end)
    fit_before = cfg.boundary if cfg.fit_train_only else None
    if cfg.preset is not None:
        ds = build_preset(cfg.preset, cfg.wn, cfg.norm, cfg.target, series, fit_before)
    else:
        ds = build_dataset(WindowSpec(cfg.wn, tuple(names), cfg.target, cfg.norm), series, "auto", fit_before)
    path = out or dataset_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, path)
    return path


def _load_split(cfg: PipelineConfig, path: Path | None):
    path = path or dataset_path(cfg)
    if not path.exists():
        raise MissingInput("train", f"dataset {path}")
    return split_train_test(read_dataset(path), cfg.boundary)


def checkpoint_path(cfg: PipelineConfig) -> Path:
    return cfg.artifacts / "model.ckpt"


def stage_train(cfg: PipelineConfig, dataset: Path | None = None) -> dict:
    if cfg.model not in TRAINABLE:
        raise ConfigError("model", f"{cfg.model} has nothing to train")
    train_ds, test_ds = _load_split(cfg, dataset)
    pred = make_predictor(cfg.model, train_ds.input_shape, cfg.hidden, cfg.train.seed)
    hist = train(pred, train_ds, cfg.train, eval_ds=test_ds)
    save_checkpoint(pred, checkpoint_path(cfg))
    (cfg.artifacts / "history.json").write_text(history_json(hist), encoding="utf-8")
    return {"epochs": len(hist.losses), "best_epoch": hist.best_epoch,
            "final_loss": hist.losses[-1] if hist.losses else None}


def stage_evaluate(cfg: PipelineConfig, dataset: Path | None = None) -> dict:
    _, test_ds = _load_split(cfg, dataset)
    if cfg.model in TRAINABLE:
        ckpt = checkpoint_path(cfg)
        if not ckpt.exists():
            raise MissingInput("evaluate", f"checkpoint {ckpt}")
        pred = load_checkpoint(ckpt)
    else:
        pred = make_predictor(cfg.model, test_ds.input_shape)
    report = evaluate(pred, test_ds)
    metrics = dict(report.to_json(), model=cfg.model, target=test_ds.target_name)
    _dump_json(metrics, cfg.artifacts / "metrics.json")
    export_predictions(pred, test_ds, cfg.artifacts / "predictions.csv")
    return metrics


def stage_export_plot(cfg: PipelineConfig, dataset: Path | None = None, prop: str | None = None) -> dict:
    """Predictions CSV for the test split plus PGM frames of the distributions."""
    stage_evaluate(cfg, dataset)
    store = open_store(cfg)
    names = [prop] if prop else [n for n in dist_names() if store.has(f"prop.{n}")]
    written = {}
    for n in names:
        s = load_series(store, n, cfg.start, cfg.end)
        mats = [dist.DistributionMatrix(int(t), v, "export") for t, v in zip(s.times, s.values)]
        written[n] = len(dist.export_frames(mats, cfg.artifacts / "frames" / n, prefix=n))
    return written


def dist_names() -> list[str]:
    return [c.name for c in dist.builtin_configs()] + [dist.BALANCE_DIST_NAME]


def run_all(cfg: PipelineConfig) -> dict:
    stage_ingest(cfg)
    stage_properties(cfg)
    stage_distributions(cfg)
    stage_dataset(cfg)
    if cfg.model in TRAINABLE:
        stage_train(cfg)
    return stage_evaluate(cfg)
