"""Small DSL for writing histories by hand (tests, demos, docs).

    hb = HistoryBuilder()
    t1 = hb.txn()
    t1.write("x", 1).commit()
    t2 = hb.txn(session="S1")
    t2.read("x", t1).commit()
    events = hb.events()

Integer values are encoded with :func:`core.int_bytes`.  Reads name the
transaction whose version they observed (``None`` for the initial
version); the value is filled in from that transaction's last write.
"""

from __future__ import annotations

from typing import Optional, Union

from ..core import HistoryEvent, Predicate, int_bytes, make_timestamp


def _val(v) -> Optional[bytes]:
    if v is None or isinstance(v, bytes):
        return v
    return int_bytes(v)


class TxnBuilder:
    def __init__(self, hb: "HistoryBuilder", ts: int, session: Optional[str]):
        self.hb = hb
        self.ts = ts
        self.session = session
        self.values: dict = {}
        self._begun = False
        self.ended = False

    def _emit(self, kind, key=None, value=None, observed=None, vset=(), sibs=()):
        if self.ended:
            raise RuntimeError(f"txn {self.ts} already ended")
        if not self._begun:
            self._begun = True
            self.hb._add(self, "begin")
        self.hb._add(self, kind, key, value, observed, vset, sibs)
        return self

    def write(self, key: str, value, sibs=()) -> "TxnBuilder":
        v = _val(value)
        self.values[key] = v
        return self._emit("write", key, v, self.ts, sibs=tuple(sibs))

    def read(self, key: str, source: Union["TxnBuilder", int, None] = None, value=None) -> "TxnBuilder":
        if isinstance(source, TxnBuilder):
            ts = source.ts
            v = source.values.get(key) if value is None else _val(value)
        else:
            ts = source
            v = _val(value)
        return self._emit("read", key, v, ts)

    def pred_read(self, lo: str, hi: str, vset, eq=None) -> "TxnBuilder":
        """``vset``: iterable of (key, source txn or ts)."""
        pairs = tuple(sorted((k, s.ts if isinstance(s, TxnBuilder) else s) for k, s in vset))
        pred = Predicate(lo, hi, _val(eq))
        return self._emit("pred_read", pred.range_text(), pred.eq, None, pairs)

    def commit(self) -> "TxnBuilder":
        self._emit("commit")
        self.ended = True
        return self

    def abort(self) -> "TxnBuilder":
        self._emit("abort")
        self.ended = True
        return self


class HistoryBuilder:
    def __init__(self):
        self._events: list = []
        self._n = 0

    def txn(self, session: Optional[str] = None, ts: Optional[int] = None) -> TxnBuilder:
        self._n += 1
        return TxnBuilder(self, make_timestamp(self._n, 1) if ts is None else ts, session)

    def _add(self, t: TxnBuilder, kind, key=None, value=None, observed=None, vset=(), sibs=()):
        self._events.append(HistoryEvent(len(self._events), len(self._events) * 1000, t.session,
                                         t.ts, kind, key, value, observed, vset, sibs))

    def events(self) -> list:
        return list(self._events)
