"""Shared domain types, timestamp packing and the history log format.

Timestamps are plain ints packing ``seq * 10000 + client`` so that the
first transaction of client 1 is ``10001``.  ``None`` stands for the
initial (bottom) version everywhere a timestamp is optional.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

CLIENT_SPACE = 10000

BOTTOM_MARK = "B"
ABSENT = "-"

EVENT_KINDS = ("begin", "read", "write", "pred_read", "commit", "abort")


class EncodingError(ValueError):
    pass


class HistoryParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class Order(enum.Enum):
    LESS = -1
    EQUAL = 0
    GREATER = 1


def make_timestamp(client: int, seq: int) -> int:
    if not 0 <= client < CLIENT_SPACE:
        raise EncodingError(f"client id {client} outside [0, {CLIENT_SPACE})")
    if seq < 0:
        raise EncodingError(f"negative sequence number {seq}")
    return seq * CLIENT_SPACE + client


def decode_timestamp(ts: int) -> tuple[int, int]:
    """Return ``(client, seq)`` for an encoded timestamp."""
    if ts < 0:
        raise EncodingError(f"negative timestamp {ts}")
    seq, client = divmod(ts, CLIENT_SPACE)
    return client, seq


def ts_seq(ts: int) -> int:
    return ts // CLIENT_SPACE


def ts_client(ts: int) -> int:
    return ts % CLIENT_SPACE


def ts_order(a: int, b: int) -> Order:
    if a < b:
        return Order.LESS
    if a > b:
        return Order.GREATER
    return Order.EQUAL


def int_bytes(n: int) -> bytes:
    """Minimal big-endian encoding of a small non-negative int (test values)."""
    return n.to_bytes(max(1, (n.bit_length() + 7) // 8), "big")


def bytes_int(b: bytes) -> int:
    return int.from_bytes(b, "big")


@dataclass(frozen=True)
class WriteRecord:
    key: str
    value: bytes
    ts: int
    sibs: frozenset = field(default_factory=frozenset)
    # Session dependencies ((key, ts) pairs) for reveal gating; empty otherwise.
    deps: tuple = ()

    def __post_init__(self):
        if not self.sibs:
            object.__setattr__(self, "sibs", frozenset((self.key,)))
        elif self.key not in self.sibs:
            raise ValueError(f"write to {self.key!r} is not among its siblings")

    @property
    def ident(self) -> tuple[str, int]:
        return self.key, self.ts

    def metadata_bytes(self) -> int:
        """Bytes of per-write metadata: 8-byte timestamp plus the sibling list."""
        return 8 + sum(len(s.encode()) + 1 for s in self.sibs)


@dataclass(frozen=True)
class Predicate:
    """Key range ``[lo, hi)`` with an optional equality test on the value.

    Absent keys never match; with ``eq=None`` every present key matches.
    """

    lo: str
    hi: str
    eq: Optional[bytes] = None

    def covers(self, key: str) -> bool:
        return self.lo <= key < self.hi

    def matches(self, value: Optional[bytes]) -> bool:
        if value is None:
            return False
        return self.eq is None or value == self.eq

    def overlap(self, other: "Predicate") -> Optional[tuple[str, str]]:
        lo, hi = max(self.lo, other.lo), min(self.hi, other.hi)
        return (lo, hi) if lo < hi else None

    def range_text(self) -> str:
        return f"{self.lo}..{self.hi}"

    @classmethod
    def from_fields(cls, rng: str, eq: Optional[bytes]) -> "Predicate":
        lo, sep, hi = rng.partition("..")
        if not sep:
            raise ValueError(f"bad predicate range {rng!r}")
        return cls(lo, hi, eq)


@dataclass(frozen=True)
class HistoryEvent:
    seq_no: int
    sim_time: int
    session: Optional[str]
    txn: int
    kind: str
    key: Optional[str] = None
    value: Optional[bytes] = None
    # read: version returned (None = bottom); write: the write's timestamp
    observed_ts: Optional[int] = None
    vset: tuple = ()
    sibs: tuple = ()

    @property
    def predicate(self) -> Predicate:
        if self.kind != "pred_read":
            raise ValueError("not a predicate read")
        return Predicate.from_fields(self.key, self.value)


def _check_ident(s: str, what: str) -> str:
    if not s or any(c in s for c in "\t\n,:") or s == ABSENT:
        raise EncodingError(f"unencodable {what} {s!r}")
    return s


def encode_event(e: HistoryEvent) -> str:
    if e.kind not in EVENT_KINDS:
        raise EncodingError(f"unknown event kind {e.kind!r}")
    session = _check_ident(e.session, "session") if e.session is not None else ABSENT
    key = _check_ident(e.key, "key") if e.key is not None else ABSENT
    value = e.value.hex() if e.value is not None else ABSENT
    if e.kind == "read":
        obs = BOTTOM_MARK if e.observed_ts is None else str(e.observed_ts)
    elif e.kind == "write":
        obs = str(e.observed_ts if e.observed_ts is not None else e.txn)
    else:
        obs = ABSENT
    if e.kind == "pred_read" and e.vset:
        vset = ",".join(f"{_check_ident(k, 'key')}:{ts}" for k, ts in e.vset)
    else:
        vset = ABSENT
    sibs = ",".join(_check_ident(s, "key") for s in e.sibs) if e.sibs else ABSENT
    fields = (str(e.seq_no), str(e.sim_time), session, str(e.txn), e.kind,
              key, value, obs, vset, sibs)
    return "\t".join(fields)


def decode_event(line: str, lineno: int = 1) -> HistoryEvent:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 10:
        raise HistoryParseError(lineno, f"expected 10 fields, got {len(parts)}")
    seq_no, sim_time, session, txn, kind, key, value, obs, vset, sibs = parts
    if kind not in EVENT_KINDS:
        raise HistoryParseError(lineno, f"unknown event kind {kind!r}")
    try:
        observed: Optional[int] = None
        if kind == "read":
            if obs == ABSENT:
                raise ValueError("read without observed version")
            observed = None if obs == BOTTOM_MARK else int(obs)
        elif kind == "write":
            observed = int(obs)
        elif obs != ABSENT:
            raise ValueError(f"unexpected version field {obs!r} for {kind}")
        pairs = ()
        if vset != ABSENT:
            pairs = tuple((k, int(t)) for k, t in (p.rsplit(":", 1) for p in vset.split(",")))
        return HistoryEvent(
            seq_no=int(seq_no),
            sim_time=int(sim_time),
            session=None if session == ABSENT else session,
            txn=int(txn),
            kind=kind,
            key=None if key == ABSENT else key,
            value=None if value == ABSENT else bytes.fromhex(value),
            observed_ts=observed,
            vset=pairs,
            sibs=() if sibs == ABSENT else tuple(sibs.split(",")),
        )
    except ValueError as exc:
        if isinstance(exc, HistoryParseError):
            raise
        raise HistoryParseError(lineno, str(exc)) from None


def dump_history(events: Iterable[HistoryEvent]) -> str:
    return "".join(encode_event(e) + "\n" for e in events)


def iter_history(text: str) -> Iterator[HistoryEvent]:
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.strip():
            yield decode_event(line, lineno)


def load_history(text: str) -> list[HistoryEvent]:
    return list(iter_history(text))


def read_history_file(path) -> list[HistoryEvent]:
    with open(path, encoding="utf-8") as fh:
        return load_history(fh.read())


def write_history_file(path, events: Iterable[HistoryEvent]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_history(events))
