"""Brute-force serializability check for tiny histories.

A serial order is accepted when replaying the committed transactions in
that order makes every item read observe exactly the version it reported
and installs each key's versions in timestamp order (the version order
the rest of the checker assumes).
"""

from __future__ import annotations

from itertools import permutations

from .model import History

MAX_TXNS = 6
MAX_KEYS = 4


class OracleLimitError(ValueError):
    pass


def serializability_oracle(h: History) -> bool:
    txns = h.committed
    keys = {op.key for t in txns for op in t.ops}
    if len(txns) > MAX_TXNS or len(keys) > MAX_KEYS:
        raise OracleLimitError(f"oracle limited to {MAX_TXNS} txns and {MAX_KEYS} keys")
    if any(op.kind == "p" for t in txns for op in t.ops):
        raise OracleLimitError("oracle handles item reads only")
    for order in permutations(txns):
        if _replays(order):
            return True
    return False


def _replays(order) -> bool:
    state: dict = {}  # key -> installed ts
    for t in order:
        own = set()
        for op in t.ops:
            if op.kind == "r":
                expect = t.ts if op.key in own else state.get(op.key)
                if op.version != expect:
                    return False
            else:
                own.add(op.key)
        for key in t.finals:
            cur = state.get(key)
            if cur is not None and cur > t.ts:
                return False
            state[key] = t.ts
    return True
