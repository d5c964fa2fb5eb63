"""Account-state replay over transactions and traces, snapshotted per tick."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

from .errors import BlockOutOfOrder
from .ingest import ERC20_SELECTORS, TICK_SECONDS, U128_MAX, Block, Trace, Transaction


@dataclass(slots=True)
class AccountState:
    balance: int = 0
    last_seen: int = 0
    volume_in: int = 0
    volume_out: int = 0
    transaction_n: int = 0
    erc20_n: int = 0
    is_contract: bool = False
    saturated: bool = False

    def reset_counters(self) -> None:
        self.volume_in = 0
        self.volume_out = 0
        self.transaction_n = 0
        self.erc20_n = 0


@dataclass(frozen=True)
class LedgerSnapshot:
    tick_time: int
    accounts: dict[str, AccountState]
    unique_accounts: int

    def active(self) -> list[AccountState]:
        return [a for a in self.accounts.values() if a.transaction_n > 0]

    def to_record(self) -> dict:
        return {
            "time": self.tick_time,
            "unique": self.unique_accounts,
            "accounts": {
                addr: [str(a.balance), a.last_seen, str(a.volume_in), str(a.volume_out),
                       a.transaction_n, a.erc20_n, int(a.is_contract), int(a.saturated)]
                for addr, a in sorted(self.accounts.items())
            },
        }

    @classmethod
    def from_record(cls, rec: dict) -> "LedgerSnapshot":
        accounts = {}
        for addr, (bal, seen, vin, vout, txn, erc, contract, sat) in rec["accounts"].items():
            accounts[addr] = AccountState(int(bal), seen, int(vin), int(vout), txn, erc, bool(contract), bool(sat))
        return cls(rec["time"], accounts, rec["unique"])

    def digest(self) -> str:
        blob = json.dumps(self.to_record(), separators=(",", ":"), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class ReplayReport:
    # (timestamp, address, requested, available)
    clamps: list[tuple[int, str, int, int]] = field(default_factory=list)
    saturations: int = 0


def derived_contract_address(sender: str, block_number: int, index: int) -> str:
    """Stand-in address for a creation transaction whose source omitted it."""
    h = hashlib.sha256(f"{sender}:{block_number}:{index}".encode()).hexdigest()
    return "0x" + h[:40]


class Ledger:
    """Mutable replay state.

    ``miner_reward_wei`` is credited to each block's miner; ``charge_gas``
    moves ``gas_used * gas_price`` from the sender to the miner. Both default
    off so that total balance is conserved.
    """

    def __init__(self, miner_reward_wei: int = 0, charge_gas: bool = False,
                 erc20_selectors: Sequence[str] = ERC20_SELECTORS):
        self.accounts: dict[str, AccountState] = {}
        self.miner_reward_wei = miner_reward_wei
        self.charge_gas = charge_gas
        self.erc20_selectors = frozenset(s.lower().removeprefix("0x") for s in erc20_selectors)
        self.last_block: int | None = None
        self.report = ReplayReport()

    def _account(self, addr: str) -> AccountState:
        acc = self.accounts.get(addr)
        if acc is None:
            acc = self.accounts[addr] = AccountState()
        return acc

    def _add(self, acc: AccountState, attr: str, value: int) -> None:
        v = getattr(acc, attr) + value
        if v > U128_MAX:
            v = U128_MAX
            acc.saturated = True
            self.report.saturations += 1
        setattr(acc, attr, v)

    def credit(self, addr: str, value: int) -> None:
        self._add(self._account(addr), "balance", value)

    def apply_value_transfer(self, from_addr: str, to_addr: str, value_wei: int,
                             timestamp: int, is_erc20: bool = False) -> None:
        if not from_addr:
            raise ValueError("transfer needs a sender")
        src = self._account(from_addr)
        dst = self._account(to_addr)
        if value_wei > src.balance:
            self.report.clamps.append((timestamp, from_addr, value_wei, src.balance))
            src.balance = 0
        else:
            src.balance -= value_wei
        self._add(dst, "balance", value_wei)
        self._add(src, "volume_out", value_wei)
        self._add(dst, "volume_in", value_wei)
        src.transaction_n += 1
        dst.transaction_n += 1
        src.last_seen = timestamp
        dst.last_seen = timestamp
        if is_erc20:
            dst.erc20_n += 1

    def is_erc20(self, tx: Transaction) -> bool:
        return tx.input_selector is not None and tx.input_selector in self.erc20_selectors

    def apply_block(self, block: Block, txs: Iterable[Transaction] = (), traces: Iterable[Trace] = ()) -> None:
        if self.last_block is not None and block.number <= self.last_block:
            raise BlockOutOfOrder(f"block {block.number} after {self.last_block}")
        ts = block.timestamp
        for i, tx in enumerate(txs):
            to = tx.to_addr
            if tx.is_creation:
                to = tx.creates or derived_contract_address(tx.from_addr, block.number, i)
                self._account(to).is_contract = True
            self.apply_value_transfer(tx.from_addr, to, tx.value_wei, ts, self.is_erc20(tx))
            if self.charge_gas:
                fee = tx.gas_used * tx.gas_price_wei
                src = self._account(tx.from_addr)
                if fee > src.balance:
                    self.report.clamps.append((ts, tx.from_addr, fee, src.balance))
                    fee = src.balance
                src.balance -= fee
                self.credit(block.miner, fee)
        for tr in traces:
            if tr.kind == "create":
                self._account(tr.to_addr).is_contract = True
            self.apply_value_transfer(tr.from_addr, tr.to_addr, tr.value_wei, ts)
        if self.miner_reward_wei:
            self.credit(block.miner, self.miner_reward_wei)
        self.last_block = block.number

    def snapshot_at_tick(self, tick_time: int) -> LedgerSnapshot:
        """Freeze the current state, then zero every per-tick counter."""
        frozen = {addr: replace(acc) for addr, acc in self.accounts.items()}
        for acc in self.accounts.values():
            acc.reset_counters()
        return LedgerSnapshot(tick_time, frozen, len(frozen))

    def total_balance(self) -> int:
        return sum(a.balance for a in self.accounts.values())


@dataclass(frozen=True)
class TickActivity:
    """Everything that happened during the hour starting at ``tick``."""
    tick: int
    blocks: list[tuple[Block, list[Transaction]]]
    snapshot: LedgerSnapshot


def replay_ticks(ledger: Ledger, items: Iterable[tuple[Block, list[Transaction], list[Trace]]],
                 tick_starts: Sequence[int]) -> Iterator[TickActivity]:
    """Drive ``ledger`` through consecutive ticks.

    A block belongs to tick ``t`` when ``t <= timestamp < t + 3600``. The
    snapshot for tick ``t`` is taken at ``t + 3600`` so its counters describe
    exactly that hour. Blocks before the first tick update balances but their
    counters are discarded.
    """
    it = iter(items)
    pending = next(it, None)
    if tick_starts:
        while pending is not None and pending[0].timestamp < tick_starts[0]:
            ledger.apply_block(*pending)
            pending = next(it, None)
        ledger.snapshot_at_tick(tick_starts[0])
    for t in tick_starts:
        end = t + TICK_SECONDS
        in_tick = []
        while pending is not None and pending[0].timestamp < end:
            ledger.apply_block(*pending)
            in_tick.append((pending[0], pending[1]))
            pending = next(it, None)
        yield TickActivity(t, in_tick, ledger.snapshot_at_tick(end))
