"""Per-server storage state machine.

One class covers every storage mode; the knobs are

* ``stability``: ``"sibs"`` (MAV: a write is revealed once every replica of
  every transactional sibling holds it), ``"key"`` (every replica of the
  write's own key holds it) or ``None`` (reveal on arrival, last writer wins);
* ``gate``: ``None``, ``"local"`` or ``"global"`` -- hold writes carrying
  session dependencies until those dependencies are visible in this cluster
  (local) or on every replica (global);
* ``master``: single-copy register per key at a designated replica.

Handlers run to completion and talk to the world only through
``transport.send`` / ``transport.schedule``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Iterable, Optional

from .core import Predicate, WriteRecord
from .simnet import Message, NS_PER_MS


class RoutingError(LookupError):
    pass


class DeliveryError(AssertionError):
    pass


def _h(s: str) -> int:
    return zlib.crc32(s.encode())


class Placement:
    """Hash partitioning inside each cluster; every cluster holds a full copy."""

    def __init__(self, clusters: Iterable[str], servers_per_cluster: int, salt: int = 0):
        self.clusters = list(clusters)
        if not self.clusters or servers_per_cluster < 1:
            raise ValueError("need at least one cluster and one server per cluster")
        self.m = servers_per_cluster
        self.salt = salt
        self._idx: dict[str, int] = {}
        self._replicas: dict[str, tuple] = {}

    @staticmethod
    def server_id(cluster: str, i: int) -> str:
        return f"{cluster}.s{i}"

    def servers(self, cluster: Optional[str] = None) -> list[str]:
        clusters = self.clusters if cluster is None else [cluster]
        return [self.server_id(c, i) for c in clusters for i in range(self.m)]

    def index(self, key: str) -> int:
        i = self._idx.get(key)
        if i is None:
            i = self._idx[key] = _h(key) % self.m
        return i

    def replicas(self, key: str) -> tuple:
        r = self._replicas.get(key)
        if r is None:
            i = self.index(key)
            r = self._replicas[key] = tuple(self.server_id(c, i) for c in self.clusters)
        return r

    def replica_in(self, key: str, cluster: str) -> str:
        return self.server_id(cluster, self.index(key))

    def master(self, key: str) -> str:
        c = self.clusters[_h(f"master:{self.salt}:{key}") % len(self.clusters)]
        return self.replica_in(key, c)

    def peers(self, server: str) -> list[str]:
        cluster, _, idx = server.rpartition(".s")
        return [self.server_id(c, int(idx)) for c in self.clusters if c != cluster]

    def holds(self, server: str, key: str) -> bool:
        return server in self.replicas(key)


@dataclass
class ReplicaConfig:
    stability: Optional[str] = None  # None | "key" | "sibs"
    gate: Optional[str] = None  # None | "local" | "global"
    master: bool = False
    commit_acks: int = 0  # extra replica receipts before acking a client put
    ae_interval_ms: float = 5.0


class _Reply:
    """Client acknowledgement waiting on reveals and/or durability receipts."""

    __slots__ = ("client", "batch_id", "gated", "receipts_needed")

    def __init__(self, client, batch_id, gated, receipts_needed):
        self.client = client
        self.batch_id = batch_id
        self.gated = gated
        self.receipts_needed = receipts_needed


class Replica:
    def __init__(self, node_id: str, placement: Placement, config: ReplicaConfig, transport):
        self.node_id = node_id
        self.cluster = node_id.rpartition(".s")[0]
        self.placement = placement
        self.config = config
        self.net = transport
        self.n_clusters = len(placement.clusters)
        self.pending: dict[str, dict[int, WriteRecord]] = {}
        self.good: dict[str, WriteRecord] = {}
        self.pending_ts: dict[int, set] = {}
        self.acks: dict[int, dict[str, set]] = {}
        self.seen: set = set()
        self.reveal_buffer: dict[tuple, list] = {}  # ident -> [record, outstanding deps, replies]
        self.parked_gets: dict[str, list] = {}
        self.parked_preds: list = []
        self.dep_waiters: dict[str, list] = {}
        self.local_dep_waits: dict[str, list] = {}
        self.peer_good: dict[str, dict[str, int]] = {p: {} for p in placement.peers(node_id)}
        self.dirty: set = set()
        self._ae_scheduled = False
        self._dep_tokens = 0
        self._dep_pending: dict[int, tuple] = {}
        self._receipt_waits: dict[tuple, _Reply] = {}
        self.master_log: list = []
        self.audit: Optional[list] = None  # state-change log for the invariant auditor
        self.stats = {"gets_parked": 0, "pending_discarded": 0, "promoted": 0}

    # ------------------------------------------------------------------ io
    def send(self, kind: str, dst: str, payload) -> None:
        self.net.send(Message(kind, self.node_id, dst, payload))

    def receive(self, msg: Message) -> None:
        kind, p = msg.kind, msg.payload
        if kind == "write_put":
            self.on_put(msg.src, *p)
        elif kind == "notify":
            self.apply_notify(msg.src, *p)
        elif kind == "get_req":
            req_id, key, required = p
            self._get(msg.src, req_id, key, required)
        elif kind == "pred_req":
            req_id, pred, required = p
            self._pred(msg.src, req_id, pred, required)
        elif kind == "anti_entropy":
            self.on_anti_entropy(msg.src, p)
        elif kind == "dep_check":
            self.on_dep_check(msg.src, *p)
        elif kind == "dep_ok":
            self.on_dep_ok(p)
        elif kind == "ack":
            self.on_receipt(*p)
        elif kind == "master_op":
            self.master_apply(msg.src, *p)
        else:
            raise DeliveryError(f"{self.node_id}: unexpected message kind {kind!r}")

    # ---------------------------------------------------------- put / notify
    def _stable_keys(self, w: WriteRecord):
        s = self.config.stability
        if s == "sibs":
            return w.sibs
        if s == "key":
            return (w.key,)
        return ()

    def on_put(self, src: str, batch_id, records, from_client: bool, want_receipt: bool) -> None:
        fresh = []
        for w in records:
            if not self.placement.holds(self.node_id, w.key):
                raise RoutingError(f"{self.node_id} is not a replica for {w.key!r}")
            if w.ident in self.seen:
                continue
            self.seen.add(w.ident)
            fresh.append(w)
        if from_client and fresh:
            # replicate to the other copies of each key
            for peer in self.placement.peers(self.node_id):
                self.send("write_put", peer, (batch_id, tuple(fresh), False, self.config.commit_acks > 0))
        if want_receipt:
            self.send("ack", src, (batch_id, "receipt"))
        gated = 0
        if self.config.gate:
            for w in fresh:
                if w.deps and self._hold(w):
                    gated += 1
        admitted = [w for w in fresh if w.ident not in self.reveal_buffer]
        if admitted:
            self.admit(admitted)
        if from_client:
            wait_gates = self.config.gate == "local"
            reply = _Reply(src, batch_id, gated if wait_gates else 0,
                           self.config.commit_acks if fresh else 0)
            if reply.gated:
                for w in fresh:
                    if w.ident in self.reveal_buffer:
                        self.reveal_buffer[w.ident][2].append(reply)
            if reply.receipts_needed:
                self._receipt_waits[batch_id] = reply
            self._maybe_reply(reply)

    def apply_put(self, w: WriteRecord) -> None:
        """Single-record entry point (tests and direct drivers)."""
        self.on_put(self.node_id, None, (w,), False, False)

    def admit(self, records: list) -> None:
        """Records past the reveal gate enter pending (stable modes) or good."""
        by_ts: dict[int, list] = {}
        for w in records:
            if self._stable_keys(w):
                by_ts.setdefault(w.ts, []).append(w)
            else:
                self.lww_merge(w)
        for ts, ws in by_ts.items():
            dests: dict[str, None] = {}
            for w in ws:
                self.pending.setdefault(w.key, {})[ts] = w
                self.pending_ts.setdefault(ts, set()).add(w.key)
                for s in sorted(self._stable_keys(w)):
                    for r in self.placement.replicas(s):
                        dests[r] = None
            keys = tuple(w.key for w in ws)
            for d in dests:
                if d == self.node_id:
                    self.apply_notify(self.node_id, ts, keys)
                else:
                    self.send("notify", d, (ts, keys))
            self._try_promote(ts)
            for w in ws:
                self._wake_key(w.key)

    def expected(self, w: WriteRecord) -> int:
        return self.n_clusters * len(self._stable_keys(w))

    def ack_count(self, w: WriteRecord) -> int:
        got = self.acks.get(w.ts, {})
        return sum(len(got.get(s, ())) for s in self._stable_keys(w))

    def apply_notify(self, src: str, ts: int, keys) -> None:
        entry = self.acks.setdefault(ts, {})
        for k in keys:
            srcs = entry.setdefault(k, set())
            srcs.add(src)
            if len(srcs) > self.n_clusters:
                raise DeliveryError(f"over-count of acks for {ts} key {k}")
        self._try_promote(ts)

    def _try_promote(self, ts: int) -> None:
        entry = self.acks.get(ts)
        keys = self.pending_ts.get(ts)
        if entry is None or not keys:
            return
        n = self.n_clusters
        done = [self.pending[k][ts] for k in sorted(keys)
                if all(len(entry.get(s, ())) == n for s in self._stable_keys(self.pending[k][ts]))]
        for w in done:
            self._drop_pending(w.key, ts)
            if self.config.stability == "key":
                entry.pop(w.key, None)
            if self.lww_merge(w):
                self.stats["promoted"] += 1
            else:
                self.stats["pending_discarded"] += 1
        if self.config.stability == "sibs" and ts not in self.pending_ts:
            self.acks.pop(ts, None)

    def _drop_pending(self, key: str, ts: int) -> None:
        by_ts = self.pending[key]
        del by_ts[ts]
        if self.audit is not None:
            self.audit.append(("drop", key, ts))
        if not by_ts:
            del self.pending[key]
        keys = self.pending_ts[ts]
        keys.discard(key)
        if not keys:
            del self.pending_ts[ts]

    # ------------------------------------------------------------ storage
    def good_ts(self, key: str) -> int:
        g = self.good.get(key)
        return -1 if g is None else g.ts

    def lww_merge(self, w: WriteRecord) -> bool:
        g = self.good.get(w.key)
        if g is not None and w.ts <= g.ts:
            return False
        self.good[w.key] = w
        if self.audit is not None:
            self.audit.append(("good", w))
        self.gc_pending(w.key)
        self.dirty.add(w.key)
        self._schedule_ae()
        self._wake_key(w.key)
        self._wake_deps(w.key)
        return True

    def gc_pending(self, key: Optional[str] = None) -> None:
        keys = [key] if key is not None else list(self.pending)
        for k in keys:
            by_ts = self.pending.get(k)
            if not by_ts:
                continue
            floor = self.good_ts(k)
            for ts in [t for t in by_ts if t < floor]:
                self._drop_pending(k, ts)
                self.stats["pending_discarded"] += 1

    def serve_get(self, key: str, required: Optional[int]):
        """Return ``(found, record)``; ``found`` False means park and retry later."""
        g = self.good.get(key)
        if required is None:
            return True, g
        if g is not None and g.ts >= required:
            return True, g
        w = self.pending.get(key, {}).get(required)
        if w is not None:
            return True, w
        return False, None

    def _get(self, client: str, req_id, key: str, required) -> None:
        if not self.placement.holds(self.node_id, key):
            raise RoutingError(f"{self.node_id} is not a replica for {key!r}")
        ok, w = self.serve_get(key, required)
        if ok:
            self.send("get_resp", client, (req_id, w))
        else:
            self.stats["gets_parked"] += 1
            self.parked_gets.setdefault(key, []).append((client, req_id, required))

    def serve_predicate(self, pred: Predicate, required: dict):
        """Versions for the keys of ``pred``'s range held here, or None to park."""
        out = {}
        keys = {k for k in self.good if pred.covers(k)}
        keys.update(k for k in required if pred.covers(k) and self.placement.holds(self.node_id, k))
        for k in sorted(keys):
            ok, w = self.serve_get(k, required.get(k))
            if not ok:
                return None
            if w is not None:
                out[k] = w
        return out

    def _pred(self, client: str, req_id, pred: Predicate, required: dict) -> None:
        res = self.serve_predicate(pred, required)
        if res is None:
            self.parked_preds.append((client, req_id, pred, required))
        else:
            self.send("pred_resp", client, (req_id, res))

    def _wake_key(self, key: str) -> None:
        waiting = self.parked_gets.pop(key, None)
        if waiting:
            for client, req_id, required in waiting:
                self._get(client, req_id, key, required)
        if self.parked_preds:
            preds, self.parked_preds = self.parked_preds, []
            for client, req_id, pred, required in preds:
                self._pred(client, req_id, pred, required)

    # -------------------------------------------------------- anti-entropy
    def _schedule_ae(self) -> None:
        if self._ae_scheduled or not self.peer_good:
            return
        self._ae_scheduled = True
        self.net.schedule(int(self.config.ae_interval_ms * NS_PER_MS), self.anti_entropy_round)

    def anti_entropy_step(self, peer: str) -> Message:
        batch = tuple(self.good[k] for k in sorted(self.dirty))
        return Message("anti_entropy", self.node_id, peer, batch)

    def anti_entropy_round(self) -> None:
        self._ae_scheduled = False
        if not self.dirty:
            return
        for peer in self.peer_good:
            self.net.send(self.anti_entropy_step(peer))
        self.dirty.clear()

    def on_anti_entropy(self, src: str, records) -> None:
        reports = self.peer_good.setdefault(src, {})
        for w in records:
            if w.ts > reports.get(w.key, -1):
                reports[w.key] = w.ts
            self.seen.add(w.ident)
            if self.config.gate == "local" and w.deps:
                if w.ident not in self.reveal_buffer and w.ts > self.good_ts(w.key):
                    if self._hold(w, stable=True):
                        continue
                    self.lww_merge(w)
            else:
                self.lww_merge(w)
            if self.config.gate == "global":
                self._wake_deps(w.key)

    # ------------------------------------------------------- reveal gating
    def dep_satisfied(self, key: str, ts: int, scope: str) -> bool:
        if self.good_ts(key) < ts:
            return False
        if scope == "local":
            return True
        return all(rep.get(key, -1) >= ts for rep in self.peer_good.values())

    def reveal_gate(self, w: WriteRecord, deps=None) -> bool:
        """True iff every dependency is visible in the configured scope.

        Only dependencies on keys this server holds can be decided locally;
        others are resolved by ``dep_check`` messages (see ``_hold``).
        """
        scope = self.config.gate or "local"
        for key, ts in (w.deps if deps is None else deps):
            if not self.dep_satisfied(key, ts, scope):
                return False
        return True

    def _hold(self, w: WriteRecord, stable: bool = False) -> bool:
        """Buffer ``w`` until its dependencies are visible; False if none outstanding."""
        scope = self.config.gate
        outstanding = set()
        for key, ts in w.deps:
            target = self.placement.replica_in(key, self.cluster)
            if target == self.node_id:
                if self.dep_satisfied(key, ts, scope):
                    continue
                self.local_dep_waits.setdefault(key, []).append((ts, w.ident))
            else:
                self._dep_tokens += 1
                token = self._dep_tokens
                self._dep_pending[token] = (w.ident, (key, ts))
                self.send("dep_check", target, (key, ts, scope, token))
            outstanding.add((key, ts))
        if not outstanding:
            return False
        self.reveal_buffer[w.ident] = [w, outstanding, [], stable]
        return True

    def on_dep_check(self, src: str, key: str, ts: int, scope: str, token) -> None:
        if self.dep_satisfied(key, ts, scope):
            self.send("dep_ok", src, token)
        else:
            self.dep_waiters.setdefault(key, []).append((src, ts, scope, token))

    def _wake_deps(self, key: str) -> None:
        waiters = self.dep_waiters.pop(key, None)
        if waiters:
            for src, ts, scope, token in waiters:
                self.on_dep_check(src, key, ts, scope, token)
        local = self.local_dep_waits.pop(key, None)
        if local:
            still = []
            for ts, ident in local:
                if self.dep_satisfied(key, ts, self.config.gate):
                    self._dep_done(ident, (key, ts))
                else:
                    still.append((ts, ident))
            if still:
                self.local_dep_waits.setdefault(key, []).extend(still)

    def on_dep_ok(self, token) -> None:
        ident, dep = self._dep_pending.pop(token)
        self._dep_done(ident, dep)

    def _dep_done(self, ident, dep) -> None:
        entry = self.reveal_buffer.get(ident)
        if entry is None:
            return
        entry[1].discard(dep)
        if entry[1]:
            return
        del self.reveal_buffer[ident]
        w, _, replies, stable = entry
        if stable:
            self.lww_merge(w)
        else:
            self.admit([w])
        for reply in replies:
            reply.gated -= 1
            self._maybe_reply(reply)

    # ---------------------------------------------------------- durability
    def on_receipt(self, batch_id, kind) -> None:
        reply = self._receipt_waits.get(batch_id)
        if reply is None:
            return
        reply.receipts_needed -= 1
        if reply.receipts_needed <= 0:
            del self._receipt_waits[batch_id]
        self._maybe_reply(reply)

    def _maybe_reply(self, reply: _Reply) -> None:
        if reply.gated <= 0 and reply.receipts_needed <= 0 and reply.client is not None:
            self.send("ack", reply.client, (reply.batch_id, "put"))
            reply.client = None

    # -------------------------------------------------------------- master
    def master_apply(self, client: str, req_id, ops) -> None:
        """Single-copy register: apply ops in arrival order, answer at once."""
        results = []
        for op in ops:
            key = op[1]
            if self.placement.master(key) != self.node_id:
                raise RoutingError(f"{self.node_id} is not the master for {key!r}")
            if op[0] == "r":
                results.append(self.good.get(key))
                self.master_log.append(("r", key, self.good.get(key)))
            else:
                w = op[2]
                self.good[key] = w
                self.master_log.append(("w", key, w))
                results.append(None)
        self.send("master_resp", client, (req_id, tuple(results)))


def mav_invariant_violations(replicas: dict, placement: Placement) -> list:
    """Global sibling check: every good write's siblings exist at all their replicas."""
    bad = []
    for rid, rep in replicas.items():
        for w in rep.good.values():
            for s in w.sibs:
                for r in placement.replicas(s):
                    other = replicas[r]
                    if w.ts in other.pending.get(s, {}):
                        continue
                    if other.good_ts(s) >= w.ts:
                        continue
                    bad.append((rid, w.key, w.ts, s, r))
    return bad
