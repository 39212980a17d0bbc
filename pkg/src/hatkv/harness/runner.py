"""Assemble replicas and clients on a simulated network and run workloads."""

from __future__ import annotations

import hashlib
import os
import statistics
from dataclasses import dataclass, field
from typing import Optional

from ..checker import Analysis, build_history, detect, resolve_phenomena, summary
from ..core import HistoryEvent, Predicate, dump_history
from ..replica import Placement, Replica, ReplicaConfig, mav_invariant_violations
from ..simnet import (NS_PER_MS, ConfigError, RttMatrix, ScenarioEvent, SimNet,
                      load_rtt_matrix)
from ..txclient import Client, ClientTuning, ExternalAbort, Modes
from .workload import WorkloadSpec, gen_workload

# phenomena each isolation mode must never exhibit
PROHIBITED = {
    "ru": ("G0",),
    "rc": ("G0", "G1a", "G1b", "G1c"),
    "mav": ("G0", "G1a", "G1b", "G1c", "OTV"),
    "master": ("G0", "G1a", "G1b", "G1c"),
}
CUT_PROHIBITED = {"none": (), "item": ("IMP",), "predicate": ("IMP", "PMP")}
SESSION_PROHIBITED = {
    "mr": ("N-MR",), "mw": ("N-MW",), "wfr": ("MRWD",), "ryw-sticky": ("MYR",),
    "causal-sticky": ("N-MR", "N-MW", "MYR", "MRWD"),
}


class InvariantViolation(AssertionError):
    pass


class Recorder:
    """Collects transactions' events into one history, in completion order."""

    def __init__(self):
        self.events: list = []

    def record_txn(self, session, txn, events) -> None:
        for sim_time, kind, key, value, observed, vset, sibs in events:
            self.events.append(HistoryEvent(len(self.events), sim_time, session, txn, kind,
                                            key, value, observed, vset, sibs))


@dataclass
class SystemConfig:
    clusters: int = 2
    servers: int = 5
    modes: Modes = field(default_factory=Modes)
    seed: int = 0
    rtt: Optional[RttMatrix] = None
    cluster_names: Optional[tuple] = None
    rtt_scale: float = 1.0
    jitter: float = 0.0
    duplicate_delivery: bool = False
    commit_acks: int = 0
    ae_interval_ms: float = 5.0
    tuning: ClientTuning = field(default_factory=ClientTuning)
    audit_mav: bool = False


class System:
    def __init__(self, cfg: SystemConfig):
        self.cfg = cfg
        rtt = cfg.rtt or load_rtt_matrix()
        names = list(cfg.cluster_names or rtt.names[: cfg.clusters])
        if cfg.clusters < 1 or cfg.servers < 1:
            raise ConfigError("clusters and servers must be >= 1")
        if len(names) < cfg.clusters:
            raise ConfigError(f"RTT matrix has {len(rtt.names)} clusters, {cfg.clusters} requested")
        names = names[: cfg.clusters]
        rtt = rtt.subset(names)
        if cfg.rtt_scale != 1.0:
            rtt = rtt.scaled(cfg.rtt_scale)
        self.clusters = names
        self.net = SimNet(rtt, seed=cfg.seed, jitter=cfg.jitter,
                          duplicate_delivery=cfg.duplicate_delivery)
        self.placement = Placement(names, cfg.servers, salt=cfg.seed)
        modes = cfg.modes
        rc = ReplicaConfig(stability=modes.replica_stability(), gate=modes.replica_gate(),
                           master=modes.isolation == "master", commit_acks=cfg.commit_acks,
                           ae_interval_ms=cfg.ae_interval_ms)
        if cfg.commit_acks > len(names) - 1:
            raise ConfigError(f"commit_acks={cfg.commit_acks} exceeds the {len(names) - 1} other replicas")
        self.replicas: dict[str, Replica] = {}
        for server in self.placement.servers():
            r = Replica(server, self.placement, rc, self.net)
            self.replicas[server] = r
            self.net.register(server, r.cluster, r.receive)
        self.clients: list[Client] = []
        self.recorder = Recorder()
        self.stopped = False
        self.auditor: Optional[MavAuditor] = None
        if cfg.audit_mav:
            self.auditor = MavAuditor(self)
            self.net.step_hooks.append(self.auditor.on_step)

    def add_client(self, cluster: Optional[str] = None, modes: Optional[Modes] = None,
                   route=None) -> Client:
        num = len(self.clients) + 1
        cluster = cluster or self.clusters[(num - 1) % len(self.clusters)]
        c = Client(num, cluster, self.placement, modes or self.cfg.modes, self.net, self.recorder,
                   seed=self.cfg.seed, tuning=self.cfg.tuning, route=route,
                   commit_acks=self.cfg.commit_acks)
        self.clients.append(c)
        self.net.register(c.node_id, cluster, c.receive)
        return c

    def apply_scenario(self, events) -> None:
        for ev in events:
            self.net.at(int(ev.at_ms * NS_PER_MS), self._scenario_action(ev))

    def _scenario_action(self, ev: ScenarioEvent):
        def fire():
            if ev.action == "partition":
                self.net.partition(ev.groups)
            elif ev.action == "heal":
                self.net.heal()
            else:
                self.stopped = True
        return fire

    def settle(self) -> int:
        """Run everything queued, heal, then drain to quiescence."""
        self.net.run()
        if self.net.partitioned:
            self.net.heal()
        t = self.net.run_until_quiescent()
        if self.auditor is not None:
            self.auditor.full_check()
        return t

    def divergent_keys(self) -> list:
        if self.cfg.modes.isolation == "master":
            return []
        keys = set()
        for r in self.replicas.values():
            keys.update(r.good)
        bad = []
        for k in sorted(keys):
            seen = {self._fingerprint(self.replicas[r].good.get(k)) for r in self.placement.replicas(k)}
            if len(seen) > 1:
                bad.append(k)
        return bad

    @staticmethod
    def _fingerprint(w):
        return None if w is None else (w.ts, w.value)

    def history(self) -> list:
        return list(self.recorder.events)


class MavAuditor:
    """Checks the global sibling invariant after every simulation step.

    Between steps only the node that handled the step changes state, and the
    invariant can only break through that node's new good records or dropped
    pending records, so each step re-checks exactly those.
    """

    def __init__(self, system: System):
        self.sys = system
        self.steps = 0
        self.checks = 0
        for r in system.replicas.values():
            r.audit = []

    def _covered(self, server: str, key: str, ts: int) -> bool:
        r = self.sys.replicas[server]
        return ts in r.pending.get(key, {}) or r.good_ts(key) >= ts

    def on_step(self, net, item) -> None:
        self.steps += 1
        dst = getattr(item, "dst", None)
        reps = [self.sys.replicas[dst]] if dst in self.sys.replicas else self.sys.replicas.values()
        for r in reps:
            if not r.audit:
                continue
            log, r.audit = r.audit, []
            for entry in log:
                self.checks += 1
                if entry[0] == "good":
                    w = entry[1]
                    for s in w.sibs:
                        for server in self.sys.placement.replicas(s):
                            if not self._covered(server, s, w.ts):
                                raise InvariantViolation(
                                    f"t={net.now}: {r.node_id} revealed {w.key}@{w.ts} but sibling "
                                    f"{s} is missing at {server}")
                else:
                    _, key, ts = entry
                    if self._covered(r.node_id, key, ts):
                        continue
                    for other in self.sys.replicas.values():
                        for w in other.good.values():
                            if w.ts == ts and key in w.sibs:
                                raise InvariantViolation(
                                    f"t={net.now}: {r.node_id} dropped pending {key}@{ts} still "
                                    f"needed by {other.node_id}")

    def full_check(self) -> None:
        bad = mav_invariant_violations(self.sys.replicas, self.sys.placement)
        if bad:
            raise InvariantViolation(f"sibling invariant violated: {bad[:3]}")


# ------------------------------------------------------------------ runs
@dataclass
class RunConfig:
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    system: SystemConfig = field(default_factory=SystemConfig)
    scenario: list = field(default_factory=list)
    think_ms: float = 0.0
    check: bool = False
    phenomena: Optional[list] = None
    out_dir: Optional[str] = None


@dataclass
class RunMetrics:
    mode: str = ""
    seed: int = 0
    issued: int = 0
    committed: int = 0
    internal_aborts: int = 0
    external_aborts: int = 0
    mean_op_latency_ms: float = 0.0
    mean_remote_op_latency_ms: float = 0.0
    p99_op_latency_ms: float = 0.0
    mean_txn_latency_ms: float = 0.0
    mean_write_metadata_bytes: float = 0.0
    messages: dict = field(default_factory=dict)
    cross_cluster_messages: dict = field(default_factory=dict)
    remote_ops: int = 0
    sim_time_ms: float = 0.0
    converged: bool = True
    divergent_keys: int = 0
    mav_checks: int = 0
    findings: dict = field(default_factory=dict)
    prohibited_findings: int = 0
    history_sha256: str = ""
    findings_detail: dict = field(default_factory=dict, repr=False)


def txn_runner(system: System, client: Client, txns, outcomes: list, think_ms: float = 0.0):
    """Client process executing a list of workload transactions."""
    for ops in txns:
        if system.stopped:
            break
        start = system.net.now
        ctx = client.begin()
        outcome = None
        try:
            for op in ops:
                if op[0] == "r":
                    yield from client.get(ctx, op[1])
                elif op[0] == "w":
                    yield from client.put(ctx, op[1], op[2])
                elif op[0] == "p":
                    yield from client.pred_get(ctx, Predicate(op[1], op[2]))
                elif op[0] == "abort":
                    outcome = client.abort(ctx)
                    break
            if outcome is None:
                outcome = yield from client.commit(ctx)
        except ExternalAbort:
            outcome = client.external_abort(ctx)
        outcomes.append((outcome, system.net.now - start))
        if think_ms:
            yield from client.sleep(think_ms)


def _prohibited(modes: Modes) -> tuple:
    out = list(PROHIBITED[modes.isolation]) + list(CUT_PROHIBITED[modes.cut])
    for s in sorted(modes.sessions):
        out += SESSION_PROHIBITED[s]
    return tuple(dict.fromkeys(out))


def run_scenario(cfg: RunConfig):
    """Execute the workload; return ``(history events, RunMetrics)``."""
    spec = cfg.workload
    spec.validate()
    system = System(cfg.system)
    system.apply_scenario(cfg.scenario)
    txns = gen_workload(spec, cfg.system.seed)
    outcomes: list = []
    clients = [system.add_client() for _ in range(spec.clients)]
    for i, c in enumerate(clients):
        c.start(txn_runner(system, c, txns[i::len(clients)], outcomes, cfg.think_ms))
    end = system.settle()
    if any(not c.done for c in clients):
        raise InvariantViolation("a client did not finish: availability violated")
    events = system.history()
    m = collect_metrics(system, outcomes, end)
    if cfg.check:
        phen = resolve_phenomena(cfg.phenomena) if cfg.phenomena else list(_prohibited(system.cfg.modes))
        found = detect(Analysis(build_history(events)), phen)
        m.findings = {p: len(v) for p, v in found.items()}
        banned = set(_prohibited(system.cfg.modes))
        m.prohibited_findings = sum(len(v) for p, v in found.items() if p in banned)
        m.findings_detail = found
    text = dump_history(events)
    m.history_sha256 = hashlib.sha256(text.encode()).hexdigest()
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        with open(os.path.join(cfg.out_dir, "history.log"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    return events, m


def collect_metrics(system: System, outcomes: list, end_ns: int) -> RunMetrics:
    m = RunMetrics(mode=system.cfg.modes.isolation, seed=system.cfg.seed)
    m.issued = len(outcomes)
    for outcome, _ in outcomes:
        if outcome == "committed":
            m.committed += 1
        elif outcome == "internal_abort":
            m.internal_aborts += 1
        else:
            m.external_aborts += 1
    lats = [ns for c in system.clients for _, ns, _ in c.op_latencies]
    remote = [ns for c in system.clients for _, ns, r in c.op_latencies if r]
    if lats:
        m.mean_op_latency_ms = statistics.fmean(lats) / NS_PER_MS
        m.p99_op_latency_ms = sorted(lats)[min(len(lats) - 1, int(0.99 * len(lats)))] / NS_PER_MS
    if remote:
        m.mean_remote_op_latency_ms = statistics.fmean(remote) / NS_PER_MS
    m.remote_ops = len(remote)
    if outcomes:
        m.mean_txn_latency_ms = statistics.fmean(ns for _, ns in outcomes) / NS_PER_MS
    meta = [b for c in system.clients for b in c.metadata_bytes]
    if meta:
        m.mean_write_metadata_bytes = statistics.fmean(meta)
    m.messages = dict(sorted(system.net.message_counts.items()))
    m.cross_cluster_messages = dict(sorted(system.net.cross_cluster_counts.items()))
    m.sim_time_ms = end_ns / NS_PER_MS
    bad = system.divergent_keys()
    m.converged = not bad
    m.divergent_keys = len(bad)
    if system.auditor is not None:
        m.mav_checks = system.auditor.checks
    return m


def check_events(events, phenomena=None) -> dict:
    return detect(Analysis(build_history(events)), phenomena)


def summarize(found: dict) -> dict:
    return summary(found)
