"""Scripted schedules that exhibit (or rule out) specific anomalies.

Each demo builds a small system, drives clients through a fixed script,
settles the network and runs the checker over the resulting history.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

from ..checker import Analysis, build_history, detect
from ..core import Predicate, int_bytes
from ..txclient import Client, ExternalAbort, Modes
from .runner import System, SystemConfig

SESSION_PHENOMENA = ("N-MR", "N-MW", "MYR", "MRWD")
HAT_MODES = ("ru", "rc", "mav")


@dataclass
class DemoResult:
    name: str
    modes: Modes
    seed: int
    findings: dict
    outcomes: list = field(default_factory=list)
    events: list = field(default_factory=list, repr=False)

    def count(self, phenomenon: str) -> int:
        return len(self.findings.get(phenomenon, []))

    def total(self, phenomena=None) -> int:
        names = self.findings if phenomena is None else phenomena
        return sum(self.count(p) for p in names)


def _system(modes: Modes, seed: int = 0, servers: int = 1, jitter: float = 0.0) -> System:
    return System(SystemConfig(clusters=2, servers=servers, modes=modes, seed=seed, jitter=jitter))


def run_txn(client: Client, ops, outcomes: Optional[list] = None):
    """Run one scripted transaction.

    ``ops`` holds ``("r", key)``, ``("w", key, int)``, ``("p", lo, hi)`` and
    ``("sleep", ms)``; an op may also be a zero-argument callable, run inline.
    Returns the outcome string.
    """
    ctx = client.begin()
    try:
        for op in ops:
            if callable(op):
                op()
            elif op[0] == "r":
                yield from client.get(ctx, op[1])
            elif op[0] == "w":
                yield from client.put(ctx, op[1], int_bytes(op[2]))
            elif op[0] == "p":
                yield from client.pred_get(ctx, Predicate(op[1], op[2]))
            elif op[0] == "sleep":
                yield from client.sleep(op[1])
            else:
                raise ValueError(f"unknown script op {op!r}")
        outcome = yield from client.commit(ctx)
    except ExternalAbort:
        outcome = client.external_abort(ctx)
    if outcomes is not None:
        outcomes.append(outcome)
    return outcome


def _finish(name: str, system: System, modes: Modes, seed: int, phenomena, outcomes) -> DemoResult:
    system.settle()
    events = system.history()
    found = detect(Analysis(build_history(events)), list(phenomena))
    return DemoResult(name, modes, seed, found, outcomes, events)


def _load(system: System, writes) -> None:
    """Commit initial values from a throwaway client and settle."""
    loader = system.add_client(system.clusters[0])
    loader.start(run_txn(loader, [("w", k, v) for k, v in writes]))
    system.net.run()


# ------------------------------------------------------------ lost update
def demo_lost_update(mode: str = "mav", partition: Optional[bool] = None, seed: int = 0) -> DemoResult:
    """Two increments of x on either side of a partition.

    x starts at 100.  Client A (first cluster) reads x and writes 120 and
    commits; client B (second cluster) then reads x and writes 130.  With
    the clusters partitioned B still sees 100, so one update is lost in every
    highly available mode.  A single-master register without a partition
    hands B the value 120 instead.
    """
    modes = Modes(isolation=mode)
    if partition is None:
        partition = mode != "master"
    system = _system(modes, seed)
    _load(system, [("x", 100)])
    a_cluster, b_cluster = system.clusters
    a = system.add_client(a_cluster)
    b = system.add_client(b_cluster)
    if partition:
        system.net.partition([[a_cluster], [b_cluster]])
    outcomes: list = []

    def script():
        yield from run_txn(a, [("r", "x"), ("w", "x", 120)], outcomes)
        b.start(run_txn(b, [("r", "x"), ("w", "x", 130)], outcomes))

    a.start(script())
    system.net.run()
    return _finish("lost-update", system, modes, seed, ("LostUpdate",), outcomes)


# ----------------------------------------------------- read your writes
def demo_ryw_stickiness(sticky: bool, seed: int = 0, background_txns: int = 40) -> DemoResult:
    """A client writes x at its home cluster, then loses contact with it.

    The partition leaves the client connected only to the other cluster.  A
    non-sticky client reads x there and misses its own write.  A sticky
    causal client keeps talking to its home copy, so it waits out the
    partition and reads its write.  A second client in the other cluster
    runs random single-operation transactions over y and z throughout,
    with the same modes, so the seed varies the interleaving.  It stays off
    x: a newer foreign write of x would hide the missed read.
    """
    if sticky:
        modes = Modes(isolation="rc", sessions=frozenset({"causal-sticky"}))
    else:
        modes = Modes(isolation="rc")
    system = _system(modes, seed, jitter=0.2)
    home, other = system.clusters
    me = system.add_client(home)
    bg = system.add_client(other)
    rng = random.Random(seed)
    keys = ("x", "y", "z")
    outcomes: list = []

    servers_home = system.placement.servers(home)

    def split(with_home: bool):
        near = servers_home + ([me.node_id] if with_home else [])
        system.net.partition([near, [n for n in system.net.cluster_of if n not in near]])

    def mine():
        # the home cluster is already cut off when x is written, so no copy
        # of the write is in flight to the other cluster
        split(with_home=True)
        yield from run_txn(me, [("w", "x", 1)], outcomes)
        split(with_home=False)
        system.net.schedule(int(rng.uniform(100, 150) * 1_000_000), system.net.heal)
        yield from run_txn(me, [("r", "x")], outcomes)
        for i in range(5):
            yield from me.sleep(rng.uniform(0, 10))
            k = rng.choice(keys)
            op = ("r", k) if rng.random() < 0.5 else ("w", k, 10 + i)
            yield from run_txn(me, [op], outcomes)

    def background():
        for i in range(background_txns):
            yield from bg.sleep(rng.uniform(0, 5))
            k = rng.choice(keys[1:])
            op = ("r", k) if rng.random() < 0.5 else ("w", k, 100 + i)
            yield from run_txn(bg, [op], outcomes)

    me.start(mine())
    bg.start(background())
    system.net.run()
    name = "ryw-sticky" if sticky else "ryw"
    return _finish(name, system, modes, seed, SESSION_PHENOMENA, outcomes)


# ------------------------------------------------------ fractured reads
def demo_otv(mode: str = "rc", seed: int = 0) -> DemoResult:
    """A reader catches a two-key write half way through propagation.

    T1 writes x=1, y=1 and settles.  T2 (home cluster) writes x=2 locally
    but sends y=2 to the far cluster, so the home copy of y lags by a
    round trip.  A reader in the home cluster reads x then y shortly after.
    """
    modes = Modes(isolation=mode)
    system = _system(modes, seed)
    _load(system, [("x", 1), ("y", 1)])
    home, far = system.clusters
    writer = system.add_client(home, route=lambda k: far if k == "y" else home)
    reader = system.add_client(home)
    outcomes: list = []
    writer.start(run_txn(writer, [("w", "x", 2), ("w", "y", 2)], outcomes))
    reader.start(run_txn(reader, [("sleep", 1), ("r", "x"), ("r", "y")], outcomes))
    system.net.run()
    return _finish("otv", system, modes, seed, ("OTV",), outcomes)


def demo_imp(cut: str = "none", seed: int = 0) -> DemoResult:
    """A reader reads x twice while another client overwrites x in between."""
    modes = Modes(isolation="rc", cut=cut)
    system = _system(modes, seed)
    _load(system, [("x", 1)])
    home = system.clusters[0]
    reader = system.add_client(home)
    writer = system.add_client(home)
    outcomes: list = []
    reader.start(run_txn(reader, [("r", "x"), ("sleep", 5), ("r", "x")], outcomes))
    writer.start(run_txn(writer, [("sleep", 1), ("w", "x", 2)], outcomes))
    system.net.run()
    return _finish("imp", system, modes, seed, ("IMP",), outcomes)


def demo_pmp(cut: str = "none", seed: int = 0) -> DemoResult:
    """A phantom insert lands between two evaluations of the same range."""
    modes = Modes(isolation="rc", cut=cut)
    system = _system(modes, seed, servers=2)
    _load(system, [("k1", 1), ("k3", 3)])
    home = system.clusters[0]
    reader = system.add_client(home)
    writer = system.add_client(home)
    outcomes: list = []
    reader.start(run_txn(reader, [("p", "k0", "k9"), ("sleep", 5), ("p", "k0", "k9")], outcomes))
    writer.start(run_txn(writer, [("sleep", 1), ("w", "k2", 2)], outcomes))
    system.net.run()
    return _finish("pmp", system, modes, seed, ("PMP",), outcomes)
