"""Client-side transaction library.

A :class:`Client` is a simulated node running one generator-based process.
Operations are generators: ``value = yield from client.get(ctx, key)``.
The process yields two kinds of commands to the node loop::

    ("sleep", ns)
    ("rpc", [(kind, dst, payload_tail), ...], timeout_ns)  -> list of replies

Each client is its own session.  Events of a transaction are buffered and
flushed to the recorder when the transaction ends, so every event carries
the transaction's final timestamp.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .core import Predicate, WriteRecord, make_timestamp, ts_seq
from .simnet import Message, NS_PER_MS

ISOLATION_MODES = ("ru", "rc", "mav", "master")
CUT_MODES = ("none", "item", "predicate")
SESSION_MODES = ("mr", "mw", "wfr", "ryw-sticky", "causal-sticky")


class ExternalAbort(Exception):
    """Abort forced by the system (no reachable replica, timeouts)."""


class InternalAbort(Exception):
    """Abort requested by the transaction itself."""


class UsageError(RuntimeError):
    pass


@dataclass(frozen=True)
class Modes:
    isolation: str = "rc"
    cut: str = "none"
    sessions: frozenset = frozenset()
    sticky: bool = False

    def __post_init__(self):
        if self.isolation not in ISOLATION_MODES:
            raise ValueError(f"unknown isolation mode {self.isolation!r}")
        if self.cut not in CUT_MODES:
            raise ValueError(f"unknown cut mode {self.cut!r}")
        bad = set(self.sessions) - set(SESSION_MODES)
        if bad:
            raise ValueError(f"unknown session modes {sorted(bad)}")
        object.__setattr__(self, "sessions", frozenset(self.sessions))
        if self.sessions & {"ryw-sticky", "causal-sticky"}:
            object.__setattr__(self, "sticky", True)

    @property
    def causal(self) -> bool:
        return "causal-sticky" in self.sessions

    @property
    def monotonic_reads(self) -> bool:
        return bool(self.sessions & {"mr", "causal-sticky"})

    @property
    def read_your_writes(self) -> bool:
        return bool(self.sessions & {"ryw-sticky", "causal-sticky"})

    @property
    def tracks_write_deps(self) -> bool:
        return bool(self.sessions & {"mw", "causal-sticky"})

    @property
    def tracks_read_deps(self) -> bool:
        return bool(self.sessions & {"wfr", "causal-sticky"})

    def replica_stability(self) -> Optional[str]:
        if self.isolation == "mav":
            return "sibs"
        if "mr" in self.sessions and not self.causal:
            return "key"
        return None

    def replica_gate(self) -> Optional[str]:
        if self.causal:
            return "local"
        if self.sessions & {"mw", "wfr"}:
            return "global"
        return None


@dataclass
class ClientTuning:
    read_timeout_ms: float = 1000.0
    commit_timeout_ms: float = 1000.0
    master_timeout_ms: float = 1000.0
    retry_budget: int = 6
    backoff_ms: float = 5.0
    backoff_cap_ms: float = 200.0
    durability_timeout_ms: float = 2000.0


@dataclass
class TxnContext:
    cur_txn: int
    session: str
    write_buffer: dict = field(default_factory=dict)
    required: dict = field(default_factory=dict)
    read_cache: dict = field(default_factory=dict)
    pred_cache: list = field(default_factory=list)
    sticky_cluster: Optional[str] = None
    observed_seq: int = 0
    events: list = field(default_factory=list)
    status: str = "open"
    start_ns: int = 0


class Client:
    def __init__(self, num: int, cluster: str, placement, modes: Modes, net, recorder,
                 seed: int = 0, tuning: Optional[ClientTuning] = None,
                 route: Optional[Callable[[str], str]] = None, commit_acks: int = 0):
        self.num = num
        self.node_id = f"c{num}"
        self.session = f"S{num}"
        self.cluster = cluster
        self.placement = placement
        self.modes = modes
        self.net = net
        self.recorder = recorder
        self.rng = random.Random(seed * 1_000_003 + num)
        self.tuning = tuning or ClientTuning()
        self.route = route
        self.commit_acks = commit_acks
        self.seq = 0
        self.floor: dict[str, int] = {}
        self.deps_w: dict[str, int] = {}
        self.deps_r: dict[str, int] = {}
        self.op_latencies: list = []  # (kind, ns, remote)
        self.metadata_bytes: list = []
        self._proc = None
        self._req = 0
        self._wait: Optional[dict] = None
        self._wait_gen = 0
        self.done = False

    # ------------------------------------------------------------ process
    def start(self, proc) -> None:
        self._proc = proc
        self.net.schedule(0, lambda: self._resume(None))

    def _resume(self, value) -> None:
        try:
            cmd = self._proc.send(value)
        except StopIteration:
            self.done = True
            return
        if cmd[0] == "sleep":
            self.net.schedule(cmd[1], lambda: self._resume(None))
        elif cmd[0] == "rpc":
            self._start_rpc(cmd[1], cmd[2])
        else:
            raise UsageError(f"bad command {cmd!r}")

    def _start_rpc(self, calls, timeout_ns) -> None:
        self._wait_gen += 1
        gen = self._wait_gen
        ids = []
        for kind, dst, tail in calls:
            self._req += 1
            rid = (self.num, self._req)
            ids.append(rid)
            self.net.send(Message(kind, self.node_id, dst, (rid,) + tuple(tail)))
        self._wait = {"ids": ids, "replies": {}, "gen": gen}
        if not ids:
            self.net.schedule(0, lambda: self._finish_rpc(gen))
        elif timeout_ns is not None:
            self.net.schedule(timeout_ns, lambda: self._finish_rpc(gen))

    def _finish_rpc(self, gen) -> None:
        w = self._wait
        if w is None or w["gen"] != gen:
            return
        self._wait = None
        self._resume([w["replies"].get(rid) for rid in w["ids"]])

    def receive(self, msg: Message) -> None:
        w = self._wait
        if w is None:
            return
        rid = msg.payload[0]
        if rid in w["ids"] and rid not in w["replies"]:
            w["replies"][rid] = msg.payload[1:]
            if len(w["replies"]) == len(w["ids"]):
                self._finish_rpc(w["gen"])

    def rpc(self, calls, timeout_ms: Optional[float]):
        timeout = None if timeout_ms is None else int(timeout_ms * NS_PER_MS)
        return (yield ("rpc", calls, timeout))

    def sleep(self, ms: float):
        yield ("sleep", int(ms * NS_PER_MS))

    def _backoff(self, attempt: int):
        t = self.tuning
        yield from self.sleep(min(t.backoff_cap_ms, t.backoff_ms * (2 ** attempt)))

    # ------------------------------------------------------------ history
    def _log(self, ctx: TxnContext, kind, key=None, value=None, observed=None, vset=(), sibs=()):
        ctx.events.append((self.net.now, kind, key, value, observed, vset, sibs))

    def _finish(self, ctx: TxnContext, outcome: str) -> None:
        self._log(ctx, outcome)
        ctx.status = outcome
        self.recorder.record_txn(self.session, ctx.cur_txn, ctx.events)

    def _observe(self, ctx: TxnContext, ts: Optional[int]) -> None:
        if ts is not None:
            s = ts_seq(ts)
            if s > ctx.observed_seq:
                ctx.observed_seq = s

    # ------------------------------------------------------------- routing
    def choose_replica(self, ctx: Optional[TxnContext], key: str) -> Optional[str]:
        if self.modes.isolation == "master":
            m = self.placement.master(key)
            return m if self.net.reachable(self.node_id, m) else None
        if self.route is not None:
            r = self.placement.replica_in(key, self.route(key))
            return r if self.net.reachable(self.node_id, r) else None
        if self.modes.sticky:
            cluster = ctx.sticky_cluster if ctx is not None and ctx.sticky_cluster else self.cluster
            r = self.placement.replica_in(key, cluster)
            return r if self.net.reachable(self.node_id, r) else None
        # nearest first: the home copy when reachable, else any reachable one
        home = self.placement.replica_in(key, self.cluster)
        if self.net.reachable(self.node_id, home):
            return home
        options = [r for r in self.placement.replicas(key) if self.net.reachable(self.node_id, r)]
        return self.rng.choice(options) if options else None

    def _choose_cluster(self) -> Optional[str]:
        if self.route is not None:
            return self.route("")
        reachable = [c for c in self.placement.clusters
                     if all(self.net.reachable(self.node_id, s) for s in self.placement.servers(c))]
        if self.cluster in reachable:
            return self.cluster
        if self.modes.sticky:
            return None
        return self.rng.choice(reachable) if reachable else None

    def _remote(self, node: str) -> bool:
        return self.net.cluster_of[node] != self.cluster

    # ---------------------------------------------------------- operations
    def begin(self) -> TxnContext:
        self.seq += 1
        ctx = TxnContext(cur_txn=make_timestamp(self.num, self.seq), session=self.session,
                         sticky_cluster=self.cluster if self.modes.sticky else None,
                         start_ns=self.net.now)
        self._log(ctx, "begin")
        return ctx

    def _check_open(self, ctx: TxnContext) -> None:
        if ctx.status != "open":
            raise UsageError(f"transaction {ctx.cur_txn} is {ctx.status}")

    def put(self, ctx: TxnContext, key: str, value: bytes):
        self._check_open(ctx)
        ctx.write_buffer[key] = value
        if self.modes.isolation == "ru":
            # no buffering: write through with the transaction timestamp
            w = WriteRecord(key, value, ctx.cur_txn, frozenset((key,)))
            target = self.choose_replica(ctx, key)
            if target is None:
                raise ExternalAbort(f"no reachable replica for {key}")
            self.net.send(Message("write_put", self.node_id, target,
                                  ((self.num, "ru", ctx.cur_txn, key), (w,), True, False)))
            self.metadata_bytes.append(w.metadata_bytes())
            self._log(ctx, "write", key, value, ctx.cur_txn, sibs=(key,))
        if False:
            yield

    def _required_for(self, ctx: TxnContext, key: str) -> Optional[int]:
        req = ctx.required.get(key)
        if self.modes.monotonic_reads or self.modes.read_your_writes:
            f = self.floor.get(key)
            if f is not None and (req is None or f > req):
                req = f
        return req

    def _cached(self, ctx: TxnContext, key: str):
        if self.modes.cut == "none":
            return None
        hit = ctx.read_cache.get(key)
        if hit is not None:
            return hit
        if self.modes.cut == "predicate":
            for pred, versions in ctx.pred_cache:
                if pred.covers(key):
                    return versions.get(key, (None, None))
        return None

    def get(self, ctx: TxnContext, key: str):
        self._check_open(ctx)
        if key in ctx.write_buffer:
            value = ctx.write_buffer[key]
            self._log(ctx, "read", key, value, ctx.cur_txn)
            return value
        hit = self._cached(ctx, key)
        if hit is not None:
            value, ts = hit
            self._log(ctx, "read", key, value, ts)
            return value
        if self.modes.isolation == "master":
            (rec,) = yield from self._master_call(ctx, [("r", key)])
        else:
            rec = yield from self._fetch(ctx, key)
        self._absorb(ctx, key, rec)
        value = None if rec is None else rec.value
        ts = None if rec is None else rec.ts
        if self.modes.cut != "none":
            ctx.read_cache[key] = (value, ts)
        self._log(ctx, "read", key, value, ts)
        return value

    def _absorb(self, ctx: TxnContext, key: str, rec: Optional[WriteRecord]) -> None:
        if rec is None:
            return
        self._observe(ctx, rec.ts)
        if self.modes.isolation == "mav":
            for s in rec.sibs:
                if rec.ts > ctx.required.get(s, -1):
                    ctx.required[s] = rec.ts
        if self.modes.tracks_read_deps and rec.ts > self.deps_r.get(key, -1):
            self.deps_r[key] = rec.ts
        if self.modes.monotonic_reads and rec.ts > self.floor.get(key, -1):
            self.floor[key] = rec.ts

    def _fetch(self, ctx: TxnContext, key: str):
        t = self.tuning
        required = self._required_for(ctx, key)
        for attempt in range(t.retry_budget):
            target = self.choose_replica(ctx, key)
            if target is None:
                yield from self._backoff(attempt)
                continue
            start = self.net.now
            (reply,) = yield from self.rpc([("get_req", target, (key, required))], t.read_timeout_ms)
            if reply is None:
                continue
            self.op_latencies.append(("get", self.net.now - start, self._remote(target)))
            return reply[0]
        raise ExternalAbort(f"no replica answered a read of {key}")

    def pred_get(self, ctx: TxnContext, pred: Predicate):
        self._check_open(ctx)
        t = self.tuning
        fresh = None
        for attempt in range(t.retry_budget):
            cluster = self._choose_cluster()
            if cluster is None:
                yield from self._backoff(attempt)
                continue
            calls = []
            for server in self.placement.servers(cluster):
                req = {}
                for k in set(ctx.required) | set(self.floor):
                    if pred.covers(k) and self.placement.holds(server, k):
                        r = self._required_for(ctx, k)
                        if r is not None:
                            req[k] = r
                calls.append(("pred_req", server, (pred, req)))
            start = self.net.now
            replies = yield from self.rpc(calls, t.read_timeout_ms)
            if any(r is None for r in replies):
                continue
            self.op_latencies.append(("pred", self.net.now - start, cluster != self.cluster))
            fresh = {}
            for (res,) in replies:
                fresh.update(res)
            break
        if fresh is None:
            raise ExternalAbort("no cluster answered a predicate read")
        versions = {k: (w.value, w.ts) for k, w in fresh.items()}
        if self.modes.cut == "predicate":
            for cached_pred, cached in ctx.pred_cache:
                span = pred.overlap(cached_pred)
                if span is None:
                    continue
                lo, hi = span
                for k in [k for k in versions if lo <= k < hi]:
                    del versions[k]
                for k, v in cached.items():
                    if lo <= k < hi:
                        versions[k] = v
        if self.modes.cut != "none":
            for k, v in ctx.read_cache.items():
                if pred.covers(k):
                    if v[1] is None:
                        versions.pop(k, None)
                    else:
                        versions[k] = v
        for k, w in fresh.items():
            if versions.get(k, (None, None))[1] == w.ts:
                self._absorb(ctx, k, w)
        if self.modes.cut == "predicate":
            ctx.pred_cache.append((pred, dict(versions)))
        vset = tuple(sorted((k, ts) for k, (_, ts) in versions.items()))
        matches = {k: v for k, (v, _) in versions.items() if pred.matches(v)}
        self._log(ctx, "pred_read", pred.range_text(), pred.eq, None, vset)
        return matches, vset

    def _master_call(self, ctx: TxnContext, ops):
        """Send ops to their masters; unreachable master -> external abort after timeout."""
        t = self.tuning
        groups: dict[str, list] = {}
        for op in ops:
            groups.setdefault(self.placement.master(op[1]), []).append(op)
        if any(not self.net.reachable(self.node_id, m) for m in groups):
            yield from self.sleep(t.master_timeout_ms)
            raise ExternalAbort("master unreachable")
        masters = list(groups)
        start = self.net.now
        replies = yield from self.rpc([("master_op", m, (tuple(groups[m]),)) for m in masters],
                                      t.master_timeout_ms)
        if any(r is None for r in replies):
            raise ExternalAbort("master timed out")
        elapsed = self.net.now - start
        for m in masters:
            self.op_latencies.append(("master", elapsed, self._remote(m)))
        out = {}
        for m, (results,) in zip(masters, replies):
            for op, res in zip(groups[m], results):
                out[id(op)] = res
        return [out[id(op)] for op in ops]

    def abort(self, ctx: TxnContext) -> str:
        self._check_open(ctx)
        self._finish(ctx, "abort")
        return "internal_abort"

    def external_abort(self, ctx: TxnContext) -> str:
        if ctx.status == "open":
            self._finish(ctx, "abort")
        return "external_abort"

    def _restamp(self, ctx: TxnContext) -> None:
        # every version this transaction read must precede its own writes
        if ctx.observed_seq >= ts_seq(ctx.cur_txn):
            self.seq = max(self.seq, ctx.observed_seq) + 1
            ctx.cur_txn = make_timestamp(self.num, self.seq)

    def commit(self, ctx: TxnContext):
        self._check_open(ctx)
        if not ctx.write_buffer or self.modes.isolation == "ru":
            self._finish(ctx, "commit")
            return "committed"
        self._restamp(ctx)
        keys = sorted(ctx.write_buffer)
        sibs = frozenset(keys) if self.modes.isolation == "mav" else None
        deps = self._session_deps()
        records = [WriteRecord(k, ctx.write_buffer[k], ctx.cur_txn, sibs or frozenset((k,)), deps)
                   for k in keys]
        if self.modes.isolation == "master":
            yield from self._master_call(ctx, [("w", w.key, w) for w in records])
        else:
            yield from self._send_writes(ctx, records)
        for w in records:
            self.metadata_bytes.append(w.metadata_bytes())
            self._log(ctx, "write", w.key, w.value, w.ts, sibs=tuple(sorted(w.sibs)))
            if self.modes.tracks_write_deps and w.ts > self.deps_w.get(w.key, -1):
                self.deps_w[w.key] = w.ts
            if self.modes.read_your_writes and w.ts > self.floor.get(w.key, -1):
                self.floor[w.key] = w.ts
        self._finish(ctx, "commit")
        return "committed"

    def _session_deps(self) -> tuple:
        if not (self.modes.tracks_write_deps or self.modes.tracks_read_deps):
            return ()
        merged = dict(self.deps_w)
        for k, ts in self.deps_r.items():
            if ts > merged.get(k, -1):
                merged[k] = ts
        return tuple(sorted(merged.items()))

    def _send_writes(self, ctx: TxnContext, records):
        t = self.tuning
        todo = {w.key: w for w in records}
        start = self.net.now
        deadline = start + int(t.durability_timeout_ms * NS_PER_MS)
        attempt = 0
        sent_any = False
        while todo:
            targets = {k: self.choose_replica(ctx, k) for k in todo}
            if None in targets.values():
                if not sent_any and attempt >= t.retry_budget:
                    raise ExternalAbort("replica availability violated at commit")
                if sent_any and self.commit_acks and self.net.now > deadline:
                    raise ExternalAbort("durability not reached")
                yield from self._backoff(min(attempt, 6))
                attempt += 1
                continue
            batches: dict[str, list] = {}
            for k, r in targets.items():
                batches.setdefault(r, []).append(todo[k])
            nodes = sorted(batches)
            calls = [("write_put", r, (tuple(batches[r]), True, False)) for r in nodes]
            sent_any = True
            replies = yield from self.rpc(calls, t.commit_timeout_ms)
            for r, reply in zip(nodes, replies):
                if reply is not None:
                    for w in batches[r]:
                        todo.pop(w.key, None)
            if todo and self.commit_acks and self.net.now > deadline:
                raise ExternalAbort("durability not reached")
            attempt += 1
        self.op_latencies.append(("commit", self.net.now - start,
                                  any(self._remote(self.placement.replica_in(w.key, self.cluster))
                                      for w in records)))
