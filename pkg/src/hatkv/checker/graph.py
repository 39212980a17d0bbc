"""Version order, direct serialization graph (DSG) and its unfolded form (USG).

Edge labels are ``(type, item)`` pairs:

* ``ww``   -- write-depends: the target installs the next version of ``item``;
* ``wr``   -- item-read-depends: the target read the source's version;
* ``wr_p`` -- predicate-read-depends by a change of matches on ``item``;
* ``rw``   -- item-anti-depends: the source read a version the target overwrote;
* ``rw_p`` -- predicate-anti-depends;
* ``s``    -- session order (``item`` is the session id).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .model import History, MalformedHistory, Txn

DEP_TYPES = frozenset({"ww", "wr", "wr_p"})
ANTI_TYPES = frozenset({"rw", "rw_p"})
ITEM_TYPES = frozenset({"ww", "wr", "rw"})


@dataclass
class VersionOrder:
    order: dict  # key -> committed writer ts list, ascending
    pos: dict  # key -> {ts: index}
    values: dict  # (key, ts) -> installed value

    def next_after(self, key: str, ts: Optional[int]) -> Optional[int]:
        """Installer of the version following ``ts`` (None = bottom)."""
        seq = self.order.get(key)
        if not seq:
            return None
        i = 0 if ts is None else self.pos[key].get(ts, None)
        if i is None:
            return None
        if ts is not None:
            i += 1
        return seq[i] if i < len(seq) else None

    def prev_value(self, key: str, ts: int):
        i = self.pos[key][ts]
        return None if i == 0 else self.values[(key, self.order[key][i - 1])]


def build_version_order(h: History) -> VersionOrder:
    order: dict[str, list] = {}
    values = {}
    for t in h.committed:
        for key, value in t.finals.items():
            order.setdefault(key, []).append(t.ts)
            values[(key, t.ts)] = value
    pos = {}
    for key, seq in order.items():
        seq.sort()
        if len(set(seq)) != len(seq):
            raise MalformedHistory(f"duplicate install of {key!r}")
        pos[key] = {ts: i for i, ts in enumerate(seq)}
    return VersionOrder(order, pos, values)


@dataclass
class DSG:
    nodes: list
    out: dict = field(default_factory=dict)  # u -> {v: set(labels)}
    inc: dict = field(default_factory=dict)  # v -> {u: set(labels)}, same label sets

    def add(self, u, v, label) -> None:
        if u == v:
            return
        labs = self.out.setdefault(u, {}).get(v)
        if labs is None:
            labs = self.out[u][v] = set()
            self.inc.setdefault(v, {})[u] = labs
        labs.add(label)

    def labels(self, u, v) -> set:
        return self.out.get(u, {}).get(v, set())

    def edges(self, types: Optional[Iterable[str]] = None):
        types = None if types is None else frozenset(types)
        for u in sorted(self.out):
            for v in sorted(self.out[u]):
                for lab in sorted(self.out[u][v]):
                    if types is None or lab[0] in types:
                        yield u, v, lab

    def subgraph(self, types: Iterable[str], item=None) -> dict:
        """Adjacency ``u -> {v: labels}`` keeping only the given types (and item)."""
        types = frozenset(types)
        adj: dict = {}
        for u, targets in self.out.items():
            for v, labs in targets.items():
                keep = {lab for lab in labs if lab[0] in types and (item is None or lab[1] == item)}
                if keep:
                    adj.setdefault(u, {})[v] = keep
        return adj


def _pred_changes(vo: VersionOrder, key: str, pred) -> list:
    """Installers on ``key`` whose version flips the predicate's match outcome."""
    out = []
    for i, ts in enumerate(vo.order.get(key, ())):
        prev = None if i == 0 else vo.values[(key, vo.order[key][i - 1])]
        if pred.matches(prev) != pred.matches(vo.values[(key, ts)]):
            out.append(ts)
    return out


def op_edges(t: Txn, op, vo: VersionOrder):
    """Read-side edges contributed by one read op of committed ``t``.

    Yields ``(direction, other_ts, label)`` with direction "in" (other -> t)
    or "out" (t -> other).
    """
    if op.kind == "r":
        if op.version is not None and op.version != t.ts and op.version in vo.pos.get(op.key, {}):
            yield "in", op.version, ("wr", op.key)
        if op.version == t.ts:
            return
        if op.version is None or op.version in vo.pos.get(op.key, {}):
            nxt = vo.next_after(op.key, op.version)
            if nxt is not None:
                yield "out", nxt, ("rw", op.key)
    elif op.kind == "p":
        pred = op.pred
        for key in sorted(vo.order):
            if not pred.covers(key):
                continue
            sel = op.vset.get(key)
            if sel is not None and sel not in vo.pos[key]:
                continue
            sel_i = -1 if sel is None else vo.pos[key][sel]
            for ts in _pred_changes(vo, key, pred):
                if vo.pos[key][ts] <= sel_i:
                    yield "in", ts, ("wr_p", key)
                else:
                    yield "out", ts, ("rw_p", key)


def build_dsg(h: History, vo: Optional[VersionOrder] = None, sessions: bool = True) -> DSG:
    vo = vo or build_version_order(h)
    committed = {t.ts: t for t in h.committed}
    g = DSG(sorted(committed))
    for key, seq in vo.order.items():
        for a, b in zip(seq, seq[1:]):
            g.add(a, b, ("ww", key))
    for t in committed.values():
        for op in t.ops:
            for direction, other, lab in op_edges(t, op, vo):
                if other not in committed:
                    continue
                if direction == "in":
                    g.add(other, t.ts, lab)
                else:
                    g.add(t.ts, other, lab)
    if sessions:
        for sid, seq in h.sessions.items():
            for a, b in zip(seq, seq[1:]):
                g.add(a, b, ("s", sid))
    return g


class USG:
    """DSG with one transaction split into its events.

    Event nodes are ``("ev", txn_ts, op_index)``; order edges carry the
    label ``("order", None)``.  Edges between other transactions are read
    through from the DSG; only edges touching the split transaction are
    stored here.
    """

    def __init__(self, dsg: DSG, txn: int, events: list):
        self.dsg = dsg
        self.txn = txn
        self.events = events
        self.local: dict = {}  # u -> {v: labels}, edges with an event endpoint
        self.local_in: dict = {}

    def add(self, u, v, label) -> None:
        labs = self.local.setdefault(u, {}).get(v)
        if labs is None:
            labs = self.local[u][v] = set()
            self.local_in.setdefault(v, {})[u] = labs
        labs.add(label)

    def succ(self, u) -> dict:
        if u == self.txn:
            return {}
        base = self.dsg.out.get(u, {}) if not isinstance(u, tuple) else {}
        extra = self.local.get(u)
        if self.txn in base:
            base = {v: labs for v, labs in base.items() if v != self.txn}
        if not extra:
            return base
        merged = {v: set(labs) for v, labs in base.items()}
        for v, labs in extra.items():
            merged.setdefault(v, set()).update(labs)
        return merged

    def pred(self, v) -> dict:
        """Predecessors of an event node."""
        return self.local_in.get(v, {})

    def labels(self, u, v) -> set:
        return self.succ(u).get(v, set())

    @property
    def out(self) -> dict:
        """Fully materialised adjacency (inspection and tests)."""
        nodes = [n for n in self.dsg.nodes if n != self.txn] + list(self.events)
        full = {}
        for u in nodes:
            targets = self.succ(u)
            if targets:
                full[u] = targets
        return full

    def order_edges(self) -> list:
        return [(u, v) for u in self.local for v, labs in self.local[u].items() if ("order", None) in labs]


def build_usg(dsg: DSG, h: History, txn: int, vo: Optional[VersionOrder] = None) -> USG:
    t = h.txns.get(txn)
    if t is None or not t.committed:
        raise ValueError(f"transaction {txn} is not a committed transaction of the history")
    vo = vo or build_version_order(h)
    committed = set(dsg.nodes)
    events = [("ev", txn, op.index) for op in t.ops]
    u = USG(dsg, txn, events)
    # edges incident on the split transaction land on the event that causes them
    for op in t.ops:
        ev = ("ev", txn, op.index)
        if op.kind in ("r", "p"):
            for direction, other, lab in op_edges(t, op, vo):
                if other not in committed or other == txn:
                    continue
                if direction == "in":
                    u.add(other, ev, lab)
                else:
                    u.add(ev, other, lab)
        elif op.kind == "w" and _is_last_write(t, op):
            seq = vo.order.get(op.key, [])
            i = vo.pos.get(op.key, {}).get(txn)
            if i is not None:
                if i > 0:
                    u.add(seq[i - 1], ev, ("ww", op.key))
                if i + 1 < len(seq):
                    u.add(ev, seq[i + 1], ("ww", op.key))
            # readers of this version (and later predicate changes) point at the write event
            for b, labs in dsg.out.get(txn, {}).items():
                for lab in labs:
                    if lab[0] in ("wr", "wr_p") and lab[1] == op.key:
                        u.add(ev, b, lab)
            for a, labs in dsg.inc.get(txn, {}).items():
                for lab in labs:
                    if lab[0] in ("rw", "rw_p") and lab[1] == op.key:
                        u.add(a, ev, lab)
    if events:
        for a, labs in dsg.inc.get(txn, {}).items():
            for lab in labs:
                if lab[0] == "s":
                    u.add(a, events[0], lab)
        for b, labs in dsg.out.get(txn, {}).items():
            for lab in labs:
                if lab[0] == "s":
                    u.add(events[-1], b, lab)
    for a, b in zip(events, events[1:]):
        u.add(a, b, ("order", None))
    return u


def _is_last_write(t: Txn, op) -> bool:
    return all(not (o.kind == "w" and o.key == op.key and o.index > op.index) for o in t.ops)


# ----------------------------------------------------------------- paths
def shortest_path(adj: dict, src, dst, allowed: Optional[set] = None) -> Optional[list]:
    """BFS node path ``src .. dst`` over ``adj`` (deterministic: sorted neighbours)."""
    if src == dst:
        return [src]
    prev = {src: None}
    q = deque([src])
    while q:
        u = q.popleft()
        for v in sorted(adj.get(u, ())):
            if v in prev or (allowed is not None and v not in allowed):
                continue
            prev[v] = u
            if v == dst:
                path = [v]
                while prev[path[-1]] is not None:
                    path.append(prev[path[-1]])
                return path[::-1]
            q.append(v)
    return None


def reachable_with_anti(adj: dict, src) -> dict:
    """Nodes reachable from ``src`` over rw/ww-only edges using at least one anti edge.

    ``adj`` must already be restricted to anti/write-dependency edges.  Returns
    ``{node: path}`` with a shortest such path for each node.
    """
    start = (src, False)
    prev = {start: None}
    q = deque([start])
    found = {}
    while q:
        node, seen_anti = q.popleft()
        for v in sorted(adj.get(node, ())):
            anti = seen_anti or any(lab[0] in ANTI_TYPES for lab in adj[node][v])
            state = (v, anti)
            if state in prev:
                continue
            prev[state] = (node, seen_anti)
            if anti and v not in found:
                path = [state]
                while prev[path[-1]] is not None:
                    path.append(prev[path[-1]])
                found[v] = [p[0] for p in reversed(path)]
            q.append(state)
    return found
