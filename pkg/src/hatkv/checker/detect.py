"""Phenomenon detectors over the DSG/USG.

Each detector returns a sorted, duplicate-free list of :class:`Finding`.
Cycle witnesses list the transactions in cycle order together with the
edge labels that close it, so a finding can be re-validated against the
graph (:func:`validate_finding`).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional

import networkx as nx

from ..core import HistoryEvent
from .graph import (ANTI_TYPES, DEP_TYPES, DSG, VersionOrder, build_dsg, build_usg,
                    build_version_order, reachable_with_anti, shortest_path)
from .model import History, build_history

PHENOMENA = ("G0", "G1a", "G1b", "G1c", "IMP", "PMP", "OTV", "N-MR", "N-MW", "MRWD",
             "MYR", "LostUpdate", "WriteSkew")

LEVELS = {
    "read_uncommitted": ("G0",),
    "read_committed": ("G0", "G1a", "G1b", "G1c"),
    "item_cut": ("IMP",),
    "predicate_cut": ("PMP",),
    "monotonic_atomic_view": ("G0", "G1a", "G1b", "G1c", "OTV"),
    "monotonic_reads": ("N-MR",),
    "monotonic_writes": ("N-MW",),
    "writes_follow_reads": ("MRWD",),
    "read_your_writes": ("MYR",),
    "pram": ("N-MR", "N-MW", "MYR"),
    "causal": ("N-MR", "N-MW", "MYR", "MRWD"),
    "snapshot_isolation": ("G0", "G1a", "G1b", "G1c", "PMP", "OTV", "LostUpdate"),
    "repeatable_read": ("G0", "G1a", "G1b", "G1c", "LostUpdate", "WriteSkew"),
}


@dataclass(frozen=True)
class Finding:
    phenomenon: str
    txns: tuple
    items: tuple = ()
    # (src, dst, label) edges of the witness; nodes are txn ts
    edges: tuple = ()

    def line(self) -> str:
        return "\t".join((self.phenomenon, ",".join(str(t) for t in self.txns),
                          ",".join(str(i) for i in self.items)))


class Analysis:
    """History plus the graphs every detector shares."""

    def __init__(self, history: History):
        self.h = history
        self.vo: VersionOrder = build_version_order(history)
        self.dsg: DSG = build_dsg(history, self.vo)
        self._missed: dict = {}
        self._pos = {ts: (sid, i) for sid, seq in history.sessions.items() for i, ts in enumerate(seq)}

    @classmethod
    def from_events(cls, events: Iterable[HistoryEvent]) -> "Analysis":
        return cls(build_history(events))

    def txn(self, ts):
        return self.h.txns[ts]

    def session_before(self, a, b) -> bool:
        pa, pb = self._pos.get(a), self._pos.get(b)
        return pa is not None and pb is not None and pa[0] == pb[0] and pa[1] < pb[1]

    def session_path(self, a, b) -> list:
        sid, i = self._pos[a]
        _, j = self._pos[b]
        seq = self.h.sessions[sid]
        return [(seq[k], seq[k + 1], ("s", sid)) for k in range(i, j)]

    def missed(self, ts) -> dict:
        """Txns ``ts`` reaches over anti/write-dependency edges with >= 1 anti edge."""
        got = self._missed.get(ts)
        if got is None:
            if not hasattr(self, "_anti_ww"):
                self._anti_ww = self.dsg.subgraph(ANTI_TYPES | {"ww"})
            got = self._missed[ts] = reachable_with_anti(self._anti_ww, ts)
        return got


# ------------------------------------------------------------ helpers
def _path_edges(adj: dict, path: list) -> tuple:
    return tuple((a, b, min(adj[a][b])) for a, b in zip(path, path[1:]))


def _items(edges) -> tuple:
    return tuple(sorted({str(lab[1]) for _, _, lab in edges if lab[0] != "s"}))


def _canonical_cycle(nodes: list) -> tuple:
    i = nodes.index(min(nodes))
    return tuple(nodes[i:] + nodes[:i])


def _scc_cycles(adj: dict, name: str) -> list:
    """One shortest-cycle witness per non-trivial SCC of ``adj``."""
    g = nx.DiGraph()
    for u, tg in adj.items():
        for v in tg:
            g.add_edge(u, v)
    out = []
    for comp in nx.strongly_connected_components(g):
        if len(comp) < 2:
            continue
        best = None
        for u in sorted(comp):
            for v in sorted(adj.get(u, ())):
                if v not in comp:
                    continue
                p = shortest_path(adj, v, u, comp)
                if p is not None:
                    cyc = [u] + p[:-1]
                    if best is None or (len(cyc), _canonical_cycle(cyc)) < (len(best), _canonical_cycle(best)):
                        best = cyc
        cyc = list(_canonical_cycle(best))
        edges = _path_edges(adj, cyc + [cyc[0]])
        out.append(Finding(name, tuple(cyc), _items(edges), edges))
    return out


def _anti_cycles(adj: dict, comp_adj_nodes, name: str, single_item: Optional[str]) -> list:
    """Shortest cycle through an item anti edge in each SCC of ``adj``.

    With ``single_item`` set, ``adj`` is already restricted to that item.
    Otherwise only cycles whose edges share no common item qualify.
    """
    g = nx.DiGraph()
    for u, tg in adj.items():
        for v in tg:
            g.add_edge(u, v)
    out = []
    for comp in nx.strongly_connected_components(g):
        if len(comp) < 2:
            continue
        best = None
        for u in sorted(comp):
            for v in sorted(adj.get(u, ())):
                if v not in comp:
                    continue
                for lab in sorted(adj[u][v]):
                    if lab[0] != "rw":
                        continue
                    if single_item is not None:
                        p = shortest_path(adj, v, u, comp)
                        edges = None if p is None else ((u, v, lab),) + _path_edges(adj, p)
                    else:
                        edges = _mixed_cycle(adj, comp, u, v, lab)
                    if edges is None:
                        continue
                    nodes = [e[0] for e in edges]
                    key = (len(nodes), _canonical_cycle(nodes))
                    if best is None or key < best[0]:
                        best = (key, edges)
        if best is not None:
            edges = _rotate(best[1])
            out.append(Finding(name, tuple(e[0] for e in edges), _items(edges), edges))
    return out


def _rotate(edges: tuple) -> tuple:
    nodes = [e[0] for e in edges]
    i = nodes.index(min(nodes))
    return tuple(edges[i:] + edges[:i])


def _mixed_cycle(adj, comp, u, v, lab):
    """Shortest cycle ``u -lab-> v ~> u`` in which no item labels every edge."""
    start = (v, frozenset(l[1] for l in adj[u][v]))
    prev = {start: None}
    q = deque([start])
    while q:
        node, common = q.popleft()
        for w in sorted(adj.get(node, ())):
            if w not in comp:
                continue
            labs = adj[node][w]
            nc = common & {l[1] for l in labs}
            state = (w, nc)
            if state in prev:
                continue
            prev[state] = (node, common)
            if w == u:
                if not nc:
                    chain = []
                    cur = state
                    while prev[cur] is not None:
                        p = prev[cur]
                        chain.append((p[0], cur[0], min(adj[p[0]][cur[0]])))
                        cur = p
                    return ((u, v, lab),) + tuple(reversed(chain))
                continue
            q.append(state)
    return None


# ---------------------------------------------------------- detectors
def detect_g0(a: Analysis) -> list:
    return _scc_cycles(a.dsg.subgraph({"ww"}), "G0")


def detect_g1c(a: Analysis) -> list:
    return _scc_cycles(a.dsg.subgraph(DEP_TYPES), "G1c")


def detect_g1a(a: Analysis) -> list:
    out = set()
    for t in a.h.committed:
        for op in t.ops:
            versions = []
            if op.kind == "r" and op.version is not None:
                versions = [(op.key, op.version)]
            elif op.kind == "p":
                versions = sorted(op.vset.items())
            for key, ts in versions:
                w = a.h.txns.get(ts)
                if ts != t.ts and w is not None and w.status == "abort":
                    out.add(Finding("G1a", (ts, t.ts), (key,)))
    return sorted(out, key=lambda f: (f.txns, f.items))


def detect_g1b(a: Analysis) -> list:
    out = set()
    for t in a.h.committed:
        for op in t.ops:
            if op.kind != "r" or op.version is None or op.version == t.ts:
                continue
            w = a.h.txns.get(op.version)
            if w is None or w.status == "abort" or op.key not in w.finals:
                continue
            if op.value != w.finals[op.key] and op.value in w.written[op.key]:
                out.add(Finding("G1b", (w.ts, t.ts), (op.key,)))
    return sorted(out, key=lambda f: (f.txns, f.items))


def detect_imp(a: Analysis) -> list:
    out = []
    committed = set(a.dsg.nodes)
    for t in a.h.committed:
        by_key: dict = {}
        for op in t.ops:
            if op.kind == "r" and op.version is not None and op.version != t.ts and op.version in committed:
                by_key.setdefault(op.key, set()).add(op.version)
        for key in sorted(by_key):
            if len(by_key[key]) > 1:
                srcs = tuple(sorted(by_key[key]))
                edges = tuple((s, t.ts, ("wr", key)) for s in srcs)
                out.append(Finding("IMP", srcs + (t.ts,), (key,), edges))
    return out


def _changers(a: Analysis, op, lo: str, hi: str, pred) -> frozenset:
    """Txns whose installs change the matches of ``pred`` restricted to ``[lo, hi)``
    at or before the versions ``op`` selected."""
    got = set()
    vo = a.vo
    for key, seq in vo.order.items():
        if not lo <= key < hi:
            continue
        sel = op.vset.get(key)
        if sel is None or sel not in vo.pos[key]:
            continue
        sel_i = vo.pos[key][sel]
        for i, ts in enumerate(seq[: sel_i + 1]):
            prev = None if i == 0 else vo.values[(key, seq[i - 1])]
            if pred.matches(prev) != pred.matches(vo.values[(key, ts)]):
                got.add(ts)
    return frozenset(got)


def detect_pmp(a: Analysis) -> list:
    from ..core import Predicate

    out = []
    for t in a.h.committed:
        preds = [op for op in t.ops if op.kind == "p"]
        seen = set()
        for i, pi in enumerate(preds):
            for pj in preds[i + 1:]:
                span = pi.pred.overlap(pj.pred)
                if span is None:
                    continue
                eq = pi.pred.eq if pi.pred.eq == pj.pred.eq else None
                po = Predicate(span[0], span[1], eq)
                ci = _changers(a, pi, span[0], span[1], po)
                cj = _changers(a, pj, span[0], span[1], po)
                if ci != cj and t.ts not in seen:
                    seen.add(t.ts)
                    diff = tuple(sorted((ci ^ cj) - {t.ts}))
                    out.append(Finding("PMP", diff + (t.ts,), (po.range_text(),)))
    return out


def detect_otv(a: Analysis) -> list:
    """Observed transaction vanishes, searched on USG(H, reader).

    Cycle: W -wr_x-> R.r_x -order-> R.r_y -rw_y-> V -ww_y*-> W, i.e. the later
    read of y returned a version older than W's own write of y.
    """
    out = []
    for r in a.h.committed:
        reads = [op for op in r.ops if op.kind == "r"]
        if len(reads) < 2 or not any(op.version not in (None, r.ts) for op in reads):
            continue
        usg = build_usg(a.dsg, a.h, r.ts, a.vo)
        seen = set()
        for e1 in reads:
            ev1 = ("ev", r.ts, e1.index)
            for w in sorted(x for x, labs in usg.pred(ev1).items()
                            if not isinstance(x, tuple) and ("wr", e1.key) in labs):
                if w in seen:
                    continue
                for e2 in reads:
                    if e2.index <= e1.index:
                        continue
                    path = _y_back_path(a, usg, ("ev", r.ts, e2.index), e2.key, w)
                    if path is None:
                        continue
                    seen.add(w)
                    edges = ((w, r.ts, ("wr", e1.key)),) + tuple(
                        (r.ts if isinstance(s, tuple) else s, d, lab) for s, d, lab in path)
                    out.append(Finding("OTV", (w, r.ts), tuple(sorted({e1.key, e2.key})), edges))
                    break
    return out


def _y_back_path(a: Analysis, usg, ev2, y: str, target) -> Optional[tuple]:
    """Reader's anti edge on y, then only later installs of y, ending at target.

    ww_y edges join consecutive versions of y, so the chain is a slice of y's
    version order; it may not pass through the reader itself.
    """
    seq = a.vo.order.get(y, [])
    pos = a.vo.pos.get(y, {})
    j = pos.get(target)
    if j is None:
        return None
    starts = [(d, lab) for d, labs in usg.succ(ev2).items() for lab in labs
              if lab == ("rw", y) and not isinstance(d, tuple)]
    for first, lab in sorted(starts):
        i = pos.get(first)
        if i is None or i > j or usg.txn in seq[i:j + 1]:
            continue
        chain = tuple((seq[k], seq[k + 1], ("ww", y)) for k in range(i, j))
        return ((ev2, first, lab),) + chain
    return None


def detect_nmr(a: Analysis) -> list:
    """Session reads of x went backwards: W -wr_x-> Ti -s+-> Tj -rw_x-> .. -ww_x*-> W."""
    out = []
    vo = a.vo
    for sid, seq in sorted(a.h.sessions.items()):
        best: dict = {}  # key -> (pos of highest version read so far, reader ts, version ts)
        for tj in seq:
            t = a.txn(tj)
            hits = []
            for op in t.reads():
                if op.version == tj:
                    continue
                pos = vo.pos.get(op.key, {})
                if op.version is not None and op.version not in pos:
                    continue
                mine = -1 if op.version is None else pos[op.version]
                prev = best.get(op.key)
                if prev is not None and mine < prev[0]:
                    hits.append((op.key, prev, op.version))
            for key, (_, ti, w), ver in hits:
                nxt = vo.next_after(key, ver)
                chain = vo.order[key][vo.pos[key][nxt]: vo.pos[key][w] + 1]
                edges = ((w, ti, ("wr", key)),) + tuple(a.session_path(ti, tj)) + \
                    ((tj, nxt, ("rw", key)),) + tuple((p, q, ("ww", key)) for p, q in zip(chain, chain[1:]))
                # tj may itself install the version it skipped; the cycle closes without that hop
                edges = tuple(e for e in edges if e[0] != e[1])
                out.append(Finding("N-MR", (w, ti, tj), (key,), edges))
                break
            for op in t.reads():
                if op.version is None or op.version == tj or op.version not in vo.pos.get(op.key, {}):
                    continue
                p = vo.pos[op.key][op.version]
                if op.key not in best or p > best[op.key][0]:
                    best[op.key] = (p, tj, op.version)
    return out


def _missed_edges(a: Analysis, src, dst) -> tuple:
    path = a.missed(src)[dst]
    return _path_edges(a._anti_ww, path)


def detect_myr(a: Analysis) -> list:
    """Ti -s+-> Tj and Tj reaches Ti over anti/write edges with >= 1 anti edge."""
    out = []
    for sid, seq in sorted(a.h.sessions.items()):
        for j, tj in enumerate(seq):
            if not a.txn(tj).reads() and not any(op.kind == "p" for op in a.txn(tj).ops):
                continue
            reach = a.missed(tj)
            for ti in reversed(seq[:j]):
                if ti in reach:
                    edges = tuple(a.session_path(ti, tj)) + _missed_edges(a, tj, ti)
                    out.append(Finding("MYR", (ti, tj), _items(edges), edges))
                    break
    return out


def detect_nmw(a: Analysis) -> list:
    """Ti -s+-> Tj -wr-> Tk, and Tk missed Ti."""
    out = []
    for tk in a.dsg.nodes:
        reach = a.missed(tk)
        if not reach:
            continue
        for tj in sorted(src for src, tg in a.dsg.out.items() if tk in tg
                         and any(lab[0] == "wr" for lab in tg[tk])):
            pos = a._pos.get(tj)
            if pos is None:
                continue
            seq = a.h.sessions[pos[0]]
            for ti in reversed(seq[: pos[1]]):
                if ti != tk and ti in reach:
                    lab = min(l for l in a.dsg.out[tj][tk] if l[0] == "wr")
                    edges = tuple(a.session_path(ti, tj)) + ((tj, tk, lab),) + _missed_edges(a, tk, ti)
                    out.append(Finding("N-MW", (ti, tj, tk), _items(edges), edges))
                    break
    return out


def detect_mrwd(a: Analysis) -> list:
    """T1 -wr-> T2 -wr-> T3 and T3 missed T1.

    The first read may also happen earlier in T2's session (the session
    observed T1 and then committed T2).
    """
    out = []
    wr_in: dict = {}
    for u, tg in a.dsg.out.items():
        for v, labs in tg.items():
            for lab in labs:
                if lab[0] == "wr":
                    wr_in.setdefault(v, {}).setdefault(u, lab)
    for t3 in a.dsg.nodes:
        reach = a.missed(t3)
        if not reach:
            continue
        for t2 in sorted(wr_in.get(t3, {})):
            observers = [t2]
            pos = a._pos.get(t2)
            if pos is not None:
                observers += list(reversed(a.h.sessions[pos[0]][: pos[1]]))
            found = None
            for obs in observers:
                for t1 in sorted(wr_in.get(obs, {})):
                    if t1 in (t2, t3) or t1 not in reach:
                        continue
                    found = (t1, obs)
                    break
                if found:
                    break
            if found is None:
                continue
            t1, obs = found
            edges = ((t1, obs, wr_in[obs][t1]),)
            if obs != t2:
                edges += tuple(a.session_path(obs, t2))
            edges += ((t2, t3, wr_in[t3][t2]),) + _missed_edges(a, t3, t1)
            out.append(Finding("MRWD", (t1, t2, t3), _items(edges), edges))
    return out


def detect_lost_update(a: Analysis) -> list:
    out = []
    items = sorted(a.vo.order)
    for x in items:
        adj = a.dsg.subgraph({"ww", "wr", "rw"}, item=x)
        out.extend(_anti_cycles(adj, None, "LostUpdate", x))
    return sorted(out, key=lambda f: (f.txns, f.items))


def detect_write_skew(a: Analysis) -> list:
    adj = a.dsg.subgraph({"ww", "wr", "wr_p", "rw"})
    return _anti_cycles(adj, None, "WriteSkew", None)


DETECTORS = {
    "G0": detect_g0,
    "G1a": detect_g1a,
    "G1b": detect_g1b,
    "G1c": detect_g1c,
    "IMP": detect_imp,
    "PMP": detect_pmp,
    "OTV": detect_otv,
    "N-MR": detect_nmr,
    "N-MW": detect_nmw,
    "MRWD": detect_mrwd,
    "MYR": detect_myr,
    "LostUpdate": detect_lost_update,
    "WriteSkew": detect_write_skew,
}

ALIASES = {"lost-update": "LostUpdate", "lost_update": "LostUpdate", "lu": "LostUpdate",
           "write-skew": "WriteSkew", "write_skew": "WriteSkew", "ws": "WriteSkew"}


def resolve_phenomena(names) -> list:
    if names is None or names == "all" or names == ["all"]:
        return list(PHENOMENA)
    if isinstance(names, str):
        names = [n for n in names.split(",") if n.strip()]
    out = []
    lookup = {p.lower(): p for p in PHENOMENA}
    for n in names:
        n = n.strip()
        p = ALIASES.get(n.lower()) or lookup.get(n.lower())
        if p is None:
            raise ValueError(f"unknown phenomenon {n!r}")
        out.append(p)
    return out


def detect(history, phenomena=None) -> dict:
    """Run detectors; ``history`` may be a History, an Analysis or raw events."""
    if isinstance(history, Analysis):
        a = history
    elif isinstance(history, History):
        a = Analysis(history)
    else:
        a = Analysis.from_events(history)
    return {p: DETECTORS[p](a) for p in resolve_phenomena(phenomena)}


def classify(findings: dict) -> dict:
    """Levels whose prohibited phenomena were all checked and found absent."""
    return {level: all(p in findings and not findings[p] for p in banned)
            for level, banned in LEVELS.items()}


def summary(findings: dict) -> dict:
    return {"counts": {p: len(fs) for p, fs in findings.items()}, "levels": classify(findings)}


def summary_json(findings: dict) -> str:
    return json.dumps(summary(findings), sort_keys=True, indent=2)


def findings_text(findings: dict) -> str:
    return "".join(f.line() + "\n" for p in PHENOMENA for f in findings.get(p, ()))


def validate_finding(a: Analysis, f: Finding) -> bool:
    """Every witness edge exists in the DSG with its claimed label.

    OTV witnesses contain USG order/event hops collapsed onto the reader,
    so self-edges of the reader are accepted there.
    """
    for src, dst, lab in f.edges:
        if src == dst and f.phenomenon == "OTV":
            continue
        if lab not in a.dsg.labels(src, dst):
            return False
    if f.edges and f.phenomenon not in ("IMP",):
        if f.edges[0][0] != f.edges[-1][1]:
            return False
        for (_, d, _), (s, _, _) in zip(f.edges, f.edges[1:]):
            if d != s:
                return False
    return True
