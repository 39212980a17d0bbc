"""Transactions reconstructed from a flat event history."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

from ..core import HistoryEvent, Predicate


class MalformedHistory(ValueError):
    pass


@dataclass
class Op:
    index: int  # position among the transaction's read/write events
    kind: str  # "r" | "w" | "p"
    key: Optional[str]
    value: Optional[bytes] = None
    version: Optional[int] = None  # r: observed ts (None = bottom); w: own ts
    vset: dict = field(default_factory=dict)  # p: key -> ts
    pred: Optional[Predicate] = None


@dataclass
class Txn:
    ts: int
    session: Optional[str] = None
    status: Optional[str] = None  # "commit" | "abort" | None (unfinished)
    ops: list = field(default_factory=list)
    finals: dict = field(default_factory=dict)  # key -> final written value
    written: dict = field(default_factory=dict)  # key -> list of written values
    end_seq: int = -1

    @property
    def committed(self) -> bool:
        return self.status == "commit"

    def reads(self):
        return [o for o in self.ops if o.kind == "r"]


@dataclass
class History:
    txns: dict  # ts -> Txn, in first-appearance order
    sessions: dict  # session -> committed txn ts list in commit order

    @property
    def committed(self) -> list:
        """Committed txns in timestamp order, so results ignore event interleaving."""
        return sorted((t for t in self.txns.values() if t.committed), key=lambda t: t.ts)


def build_history(events: Iterable[HistoryEvent]) -> History:
    txns: dict[int, Txn] = {}
    for e in events:
        t = txns.get(e.txn)
        if e.kind == "begin":
            if t is not None:
                raise MalformedHistory(f"event {e.seq_no}: second begin for txn {e.txn}")
            txns[e.txn] = Txn(e.txn, e.session)
            continue
        if t is None:
            raise MalformedHistory(f"event {e.seq_no}: {e.kind} before begin of txn {e.txn}")
        if t.status is not None:
            raise MalformedHistory(f"event {e.seq_no}: {e.kind} after end of txn {e.txn}")
        if e.kind in ("commit", "abort"):
            t.status = e.kind
            t.end_seq = e.seq_no
        elif e.kind == "read":
            t.ops.append(Op(len(t.ops), "r", e.key, e.value, e.observed_ts))
        elif e.kind == "write":
            ts = e.observed_ts if e.observed_ts is not None else e.txn
            if ts != e.txn:
                raise MalformedHistory(f"event {e.seq_no}: write ts {ts} differs from txn {e.txn}")
            t.ops.append(Op(len(t.ops), "w", e.key, e.value, ts))
            t.finals[e.key] = e.value
            t.written.setdefault(e.key, []).append(e.value)
        elif e.kind == "pred_read":
            t.ops.append(Op(len(t.ops), "p", e.key, e.value, None, dict(e.vset), e.predicate))
    sessions: dict[str, list] = {}
    for t in sorted((t for t in txns.values() if t.committed and t.session is not None),
                    key=lambda t: t.end_seq):
        sessions.setdefault(t.session, []).append(t.ts)
    return History(txns, sessions)
