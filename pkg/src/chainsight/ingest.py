"""Raw chain and market data: record types, streaming readers, JSON-RPC
fetching, chain validation and the chunked time-series store."""

from __future__ import annotations

import csv
import json
import logging
import os
import tempfile
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from filelock import FileLock

from .errors import (
    MalformedRecord,
    MissingField,
    RangeGap,
    RpcError,
    StorageError,
    UnknownSeries,
)

log = logging.getLogger(__name__)

U128_MAX = (1 << 128) - 1
TICK_SECONDS = 3600
CHUNK_SPAN = 86400
ERC20_SELECTORS = ("a9059cbb", "23b872dd")


def parse_u256(raw) -> tuple[int, bool]:
    """Decimal string (or int) -> (value clamped to u128, saturated flag)."""
    if isinstance(raw, bool):
        raise ValueError("boolean is not a quantity")
    if isinstance(raw, int):
        v = raw
    elif isinstance(raw, str):
        s = raw.strip()
        if not s.isdigit():
            raise ValueError(f"not a decimal integer: {raw!r}")
        v = int(s)
    else:
        raise ValueError(f"not a quantity: {raw!r}")
    if v < 0:
        raise ValueError("negative quantity")
    if v > U128_MAX:
        return U128_MAX, True
    return v, False


@dataclass(frozen=True)
class Block:
    timestamp: int
    number: int
    miner: str
    size_bytes: int
    difficulty: int
    gas_limit: int
    gas_used: int
    tx_count: int
    saturated: bool = False

    def to_json(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "number": self.number,
            "miner": self.miner,
            "size": self.size_bytes,
            "difficulty": str(self.difficulty),
            "gasLimit": self.gas_limit,
            "gasUsed": self.gas_used,
            "txCount": self.tx_count,
        }


@dataclass(frozen=True)
class Transaction:
    block_number: int
    from_addr: str
    to_addr: str  # "" for contract creation
    value_wei: int
    gas_used: int
    gas_price_wei: int
    input_selector: str | None = None
    # Address of the created contract, when the source provides it.
    creates: str | None = None
    saturated: bool = False

    @property
    def is_creation(self) -> bool:
        return not self.to_addr

    def to_json(self) -> dict:
        d = {
            "blockNumber": self.block_number,
            "from": self.from_addr,
            "to": self.to_addr,
            "value": str(self.value_wei),
            "gasUsed": self.gas_used,
            "gasPrice": str(self.gas_price_wei),
            "inputSelector": self.input_selector,
        }
        if self.creates:
            d["creates"] = self.creates
        return d


@dataclass(frozen=True)
class Trace:
    block_number: int
    from_addr: str
    to_addr: str
    value_wei: int
    kind: str  # "call" | "create"
    saturated: bool = False

    def to_json(self) -> dict:
        return {
            "blockNumber": self.block_number,
            "from": self.from_addr,
            "to": self.to_addr,
            "value": str(self.value_wei),
            "kind": self.kind,
        }


@dataclass(frozen=True)
class MarketTick:
    time: int
    open: float
    high: float
    low: float
    close: float
    volume_from: float
    volume_to: float

    def to_json(self) -> dict:
        return {
            "time": self.time,
            "open": self.open,
            "high": self.high,
            "low": self.low,
            "close": self.close,
            "volumefrom": self.volume_from,
            "volumeto": self.volume_to,
        }


@dataclass
class ReadStats:
    records: int = 0
    skipped: int = 0


# ---------------------------------------------------------------- parsing


def _req(obj: dict, name: str, line_no: int):
    if name not in obj:
        raise MissingField(name, line_no)
    return obj[name]


def _uint(obj, name, line_no) -> int:
    v = _req(obj, name, line_no)
    if isinstance(v, bool) or not isinstance(v, int) or v < 0:
        raise MalformedRecord(line_no, f"{name} must be a non-negative integer")
    return v


def _qty(obj, name, line_no) -> tuple[int, bool]:
    try:
        return parse_u256(_req(obj, name, line_no))
    except ValueError as exc:
        raise MalformedRecord(line_no, f"{name}: {exc}") from None


def _addr(obj, name, line_no, allow_empty=False) -> str:
    v = _req(obj, name, line_no)
    if v is None and allow_empty:
        return ""
    if not isinstance(v, str) or (not v and not allow_empty):
        raise MalformedRecord(line_no, f"{name} must be a non-empty address")
    return v.lower()


def block_from_json(obj: dict, line_no: int = 0) -> Block:
    difficulty, sat = _qty(obj, "difficulty", line_no)
    b = Block(
        timestamp=_uint(obj, "timestamp", line_no),
        number=_uint(obj, "number", line_no),
        miner=_addr(obj, "miner", line_no),
        size_bytes=_uint(obj, "size", line_no),
        difficulty=difficulty,
        gas_limit=_uint(obj, "gasLimit", line_no),
        gas_used=_uint(obj, "gasUsed", line_no),
        tx_count=_uint(obj, "txCount", line_no),
        saturated=sat,
    )
    if b.gas_used > b.gas_limit:
        raise MalformedRecord(line_no, "gasUsed exceeds gasLimit")
    return b


def transaction_from_json(obj: dict, line_no: int = 0) -> Transaction:
    value, s1 = _qty(obj, "value", line_no)
    price, s2 = _qty(obj, "gasPrice", line_no)
    selector = obj.get("inputSelector")
    if selector is not None:
        if not isinstance(selector, str):
            raise MalformedRecord(line_no, "inputSelector must be a string")
        selector = selector.lower().removeprefix("0x") or None
        if selector is not None and len(selector) != 8:
            raise MalformedRecord(line_no, "inputSelector must be 4 bytes")
    creates = obj.get("creates") or None
    return Transaction(
        block_number=_uint(obj, "blockNumber", line_no),
        from_addr=_addr(obj, "from", line_no),
        to_addr=_addr(obj, "to", line_no, allow_empty=True),
        value_wei=value,
        gas_used=_uint(obj, "gasUsed", line_no),
        gas_price_wei=price,
        input_selector=selector,
        creates=creates.lower() if isinstance(creates, str) else None,
        saturated=s1 or s2,
    )


def trace_from_json(obj: dict, line_no: int = 0) -> Trace:
    value, sat = _qty(obj, "value", line_no)
    kind = _req(obj, "kind", line_no)
    if kind not in ("call", "create"):
        raise MalformedRecord(line_no, f"unknown trace kind {kind!r}")
    return Trace(
        block_number=_uint(obj, "blockNumber", line_no),
        from_addr=_addr(obj, "from", line_no),
        to_addr=_addr(obj, "to", line_no),
        value_wei=value,
        kind=kind,
        saturated=sat,
    )


def tick_from_row(row: dict, line_no: int = 0) -> MarketTick:
    try:
        values = {k: float(_req(row, k, line_no)) for k in ("open", "high", "low", "close", "volumefrom", "volumeto")}
        t = int(_req(row, "time", line_no))
    except ValueError as exc:
        raise MalformedRecord(line_no, str(exc)) from None
    tick = MarketTick(
        time=t,
        open=values["open"],
        high=values["high"],
        low=values["low"],
        close=values["close"],
        volume_from=values["volumefrom"],
        volume_to=values["volumeto"],
    )
    if t % TICK_SECONDS:
        raise MalformedRecord(line_no, f"tick time {t} is not hour-aligned")
    if not (tick.low <= min(tick.open, tick.close, tick.high) and max(tick.open, tick.close) <= tick.high):
        raise MalformedRecord(line_no, "price bounds violated (need low <= open, close <= high)")
    return tick


# ---------------------------------------------------------------- readers


def _read_jsonl(path, convert, skip_bad_records, stats):
    stats = stats if stats is not None else ReadStats()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise MalformedRecord(line_no, str(exc)) from None
                if not isinstance(obj, dict):
                    raise MalformedRecord(line_no, "not a JSON object")
                rec = convert(obj, line_no)
            except (MalformedRecord, MissingField):
                if not skip_bad_records:
                    raise
                stats.skipped += 1
                continue
            stats.records += 1
            yield rec


def read_blocks(path, skip_bad_records=False, stats=None) -> Iterator[Block]:
    return _read_jsonl(path, block_from_json, skip_bad_records, stats)


def read_transactions(path, skip_bad_records=False, stats=None) -> Iterator[Transaction]:
    return _read_jsonl(path, transaction_from_json, skip_bad_records, stats)


def read_traces(path, skip_bad_records=False, stats=None) -> Iterator[Trace]:
    return _read_jsonl(path, trace_from_json, skip_bad_records, stats)


TICK_HEADER = ["time", "open", "high", "low", "close", "volumefrom", "volumeto"]


def read_ticks(path, skip_bad_records=False, stats=None) -> Iterator[MarketTick]:
    stats = stats if stats is not None else ReadStats()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return
        if [h.strip() for h in header] != TICK_HEADER:
            raise MalformedRecord(1, f"tick header must be {','.join(TICK_HEADER)}")
        for row in reader:
            line_no = reader.line_num
            if not row:
                continue
            try:
                if len(row) != len(TICK_HEADER):
                    raise MalformedRecord(line_no, f"expected {len(TICK_HEADER)} columns")
                tick = tick_from_row(dict(zip(TICK_HEADER, row)), line_no)
            except (MalformedRecord, MissingField):
                if not skip_bad_records:
                    raise
                stats.skipped += 1
                continue
            stats.records += 1
            yield tick


def write_jsonl(path, records: Iterable) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")


def write_ticks(path, ticks: Iterable[MarketTick]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TICK_HEADER)
        for t in ticks:
            w.writerow([t.time, repr(t.open), repr(t.high), repr(t.low), repr(t.close),
                        repr(t.volume_from), repr(t.volume_to)])


# ---------------------------------------------------------------- JSON-RPC


def _hex_int(v) -> int:
    if isinstance(v, int):
        return v
    return int(v, 16)


def _rpc_call(endpoint, method, params, *, max_attempts, backoff, timeout, req_id):
    body = json.dumps({"jsonrpc": "2.0", "id": req_id, "method": method, "params": params}).encode()
    last_code = -1
    for attempt in range(max_attempts):
        if attempt:
            time.sleep(backoff * 2 ** (attempt - 1))
        request = urllib.request.Request(endpoint, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(request, timeout=timeout) as resp:
                payload = json.loads(resp.read().decode())
        except urllib.error.HTTPError as exc:
            last_code = exc.code
            if exc.code < 500 and exc.code != 429:
                raise RpcError(exc.code, "http error") from None
            log.warning("rpc %s attempt %d: http %d", method, attempt + 1, exc.code)
            continue
        except (urllib.error.URLError, TimeoutError, ConnectionError, json.JSONDecodeError) as exc:
            log.warning("rpc %s attempt %d: %s", method, attempt + 1, exc)
            continue
        if payload.get("error"):
            err = payload["error"]
            raise RpcError(err.get("code", -1), err.get("message", ""))
        return payload.get("result")
    raise RpcError(last_code, f"{method} failed after {max_attempts} attempts")


def block_from_rpc(obj: dict) -> tuple[Block, list[Transaction]]:
    difficulty, sat = parse_u256(_hex_int(obj["difficulty"]))
    number = _hex_int(obj["number"])
    txs = []
    for t in obj.get("transactions", []):
        if isinstance(t, str):
            raise RpcError(-1, "node returned transaction hashes; full objects required")
        value, s1 = parse_u256(_hex_int(t["value"]))
        price, s2 = parse_u256(_hex_int(t.get("gasPrice", "0x0")))
        data = t.get("input") or "0x"
        selector = data[2:10].lower() if len(data) >= 10 else None
        gas = t.get("gasUsed", t.get("gas", "0x0"))
        creates = t.get("creates")
        txs.append(Transaction(
            block_number=number,
            from_addr=t["from"].lower(),
            to_addr=(t.get("to") or "").lower(),
            value_wei=value,
            gas_used=_hex_int(gas),
            gas_price_wei=price,
            input_selector=selector,
            creates=creates.lower() if creates else None,
            saturated=s1 or s2,
        ))
    block = Block(
        timestamp=_hex_int(obj["timestamp"]),
        number=number,
        miner=obj["miner"].lower(),
        size_bytes=_hex_int(obj["size"]),
        difficulty=difficulty,
        gas_limit=_hex_int(obj["gasLimit"]),
        gas_used=_hex_int(obj["gasUsed"]),
        tx_count=len(txs),
        saturated=sat,
    )
    return block, txs


def fetch_blocks_rpc(endpoint: str, lo: int, hi: int, *, max_attempts: int = 5,
                     backoff: float = 0.5, timeout: float = 30.0) -> Iterator[tuple[Block, list[Transaction]]]:
    """Yield (block, transactions) for block numbers lo..hi inclusive.

    Transport failures and HTTP 5xx/429 are retried with exponential backoff
    (``backoff``, ``2*backoff``, ...) up to ``max_attempts`` total attempts.
    """
    for n in range(lo, hi + 1):
        result = _rpc_call(endpoint, "eth_getBlockByNumber", [hex(n), True],
                           max_attempts=max_attempts, backoff=backoff, timeout=timeout, req_id=n)
        if result is None:
            raise RangeGap(n)
        yield block_from_rpc(result)


# ---------------------------------------------------------------- validation


@dataclass
class ValidationReport:
    gaps: list[tuple[int, int]] = field(default_factory=list)
    timestamp_regressions: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.gaps and not self.timestamp_regressions


def validate_chain(blocks: Iterable[Block]) -> ValidationReport:
    report = ValidationReport()
    prev = None
    for b in blocks:
        if prev is not None:
            if b.number > prev.number + 1:
                report.gaps.append((prev.number + 1, b.number - 1))
            if b.timestamp < prev.timestamp:
                report.timestamp_regressions.append(b.number)
        prev = b
    return report


# ---------------------------------------------------------------- store


def _dump(record: dict) -> str:
    return json.dumps(record, separators=(",", ":"), sort_keys=True)


class ChunkStore:
    """Directory of time-chunked JSONL series.

    Each series lives in ``<root>/<series>/`` with one file per chunk, named by
    the chunk start time. Every record is a JSON object carrying an integer
    ``time`` key. Writers hold a per-series file lock; chunk files are replaced
    atomically so concurrent readers never see a partial chunk.
    """

    def __init__(self, root, span: int = CHUNK_SPAN):
        self.root = Path(root)
        self.span = span
        self.root.mkdir(parents=True, exist_ok=True)

    def _dir(self, series: str) -> Path:
        if not series or "/" in series or series.startswith("."):
            raise ValueError(f"bad series name {series!r}")
        return self.root / series

    def has(self, series: str) -> bool:
        return self._dir(series).is_dir()

    def series_names(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if p.is_dir() and not p.name.startswith("."))

    def drop(self, series: str) -> None:
        d = self._dir(series)
        if not d.is_dir():
            return
        with FileLock(str(d) + ".lock"):
            for f in d.iterdir():
                f.unlink()
            d.rmdir()

    def chunk_start(self, t: int) -> int:
        return t - t % self.span

    def put(self, series: str, records: Iterable[dict]) -> None:
        """Append records; a record identical to one already stored is skipped."""
        d = self._dir(series)
        d.mkdir(parents=True, exist_ok=True)
        grouped: dict[int, list[str]] = {}
        for r in records:
            grouped.setdefault(self.chunk_start(int(r["time"])), []).append(_dump(r))
        try:
            with FileLock(str(d) + ".lock"):
                for start, lines in grouped.items():
                    self._merge_chunk(d / f"{start}.jsonl", lines)
        except OSError as exc:
            raise StorageError(f"cannot write series {series}: {exc}") from exc

    def _merge_chunk(self, path: Path, new_lines: list[str]) -> None:
        existing = path.read_text(encoding="utf-8").splitlines() if path.exists() else []
        seen = set(existing)
        merged = existing + [ln for ln in new_lines if ln not in seen]
        if len(merged) == len(existing):
            return
        merged.sort(key=lambda ln: json.loads(ln)["time"])  # stable
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(merged) + "\n")
        os.replace(tmp, path)

    def get(self, series: str, from_time: int, to_time: int) -> list[dict]:
        """Records with ``from_time <= time < to_time``, in time order."""
        d = self._dir(series)
        if not d.is_dir():
            raise UnknownSeries(series)
        if to_time <= from_time:
            return []
        out = []
        for start in sorted(int(p.stem) for p in d.glob("*.jsonl")):
            if start + self.span <= from_time or start >= to_time:
                continue
            with open(d / f"{start}.jsonl", encoding="utf-8") as fh:
                for line in fh:
                    rec = json.loads(line)
                    if from_time <= rec["time"] < to_time:
                        out.append(rec)
        return out

    def get_all(self, series: str) -> list[dict]:
        return self.get(series, -(1 << 62), 1 << 62)

    def time_range(self, series: str) -> tuple[int, int] | None:
        recs = self.get_all(series)
        if not recs:
            return None
        return recs[0]["time"], recs[-1]["time"]
