"""Deterministic discrete-event network: per-pair latency, partitions, timers.

Time is integer nanoseconds.  Every queued item carries a tie-break sequence
number assigned at enqueue, so pops are totally ordered by ``(time, seq)``.
Messages between a pair of nodes are delivered FIFO.  Partitions only delay:
a send across an active partition is parked and re-sent at heal time.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Callable, Iterable, Optional

NS_PER_MS = 1_000_000
INTRA_CLUSTER_RTT_MS = 0.55

# Mean cross-region RTTs in ms (EC2 measurement table); diagonal is filled
# with the intra-datacenter figure.
REGIONS = ("VA", "OR", "CA", "IR", "SI", "TO", "SY", "SP")


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class Message:
    kind: str
    src: str
    dst: str
    payload: Any = None


@dataclass
class RttMatrix:
    names: list
    rtt_ms: list  # square, symmetric

    def __post_init__(self):
        n = len(self.names)
        if len(self.rtt_ms) != n or any(len(row) != n for row in self.rtt_ms):
            raise ConfigError("RTT matrix must be square and match its header")
        for i in range(n):
            for j in range(n):
                if abs(self.rtt_ms[i][j] - self.rtt_ms[j][i]) > 1e-9:
                    raise ConfigError(f"RTT matrix not symmetric at {self.names[i]}/{self.names[j]}")
                if self.rtt_ms[i][i] > self.rtt_ms[i][j]:
                    raise ConfigError(f"diagonal entry for {self.names[i]} exceeds an off-diagonal entry")

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"unknown cluster {name!r} in RTT matrix") from None

    def rtt(self, a: str, b: str) -> float:
        return self.rtt_ms[self.index(a)][self.index(b)]

    def subset(self, names: Iterable[str]) -> "RttMatrix":
        names = list(names)
        idx = [self.index(n) for n in names]
        return RttMatrix(names, [[self.rtt_ms[i][j] for j in idx] for i in idx])

    def scaled(self, factor: float) -> "RttMatrix":
        """Scale inter-cluster RTTs only; intra-cluster entries stay put."""
        n = len(self.names)
        return RttMatrix(list(self.names), [
            [self.rtt_ms[i][j] * (1 if i == j else factor) for j in range(n)] for i in range(n)])

    def to_text(self) -> str:
        lines = ["\t".join(self.names)]
        for name, row in zip(self.names, self.rtt_ms):
            lines.append("\t".join([name] + [f"{v:g}" for v in row]))
        return "\n".join(lines) + "\n"


def parse_rtt_matrix(text: str) -> RttMatrix:
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows:
        raise ConfigError("empty RTT matrix")
    names, body = rows[0], rows[1:]
    n = len(names)
    if len(body) != n:
        raise ConfigError(f"expected {n} RTT rows, got {len(body)}")
    matrix = []
    for lineno, row in enumerate(body, 2):
        if len(row) == n + 1:
            row = row[1:]
        if len(row) != n:
            raise ConfigError(f"RTT row {lineno}: expected {n} values")
        try:
            matrix.append([float(v) for v in row])
        except ValueError:
            raise ConfigError(f"RTT row {lineno}: non-numeric entry") from None
    return RttMatrix(names, matrix)


def load_rtt_matrix(path=None) -> RttMatrix:
    if path is None:
        text = resources.files("hatkv.data").joinpath("ec2_rtt.txt").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return parse_rtt_matrix(text)


@dataclass
class ScenarioEvent:
    at_ms: float
    action: str  # partition | heal | stop
    groups: tuple = ()


def parse_scenario(text: str) -> list[ScenarioEvent]:
    """Lines ``at <ms> partition A,B|C``, ``at <ms> heal``, ``at <ms> stop``."""
    events = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 3)
        if len(parts) < 3 or parts[0] != "at":
            raise ConfigError(f"scenario line {lineno}: expected 'at <ms> <action>'")
        try:
            at = float(parts[1])
        except ValueError:
            raise ConfigError(f"scenario line {lineno}: bad time {parts[1]!r}") from None
        action = parts[2]
        if action == "partition":
            if len(parts) < 4:
                raise ConfigError(f"scenario line {lineno}: partition needs groups")
            groups = tuple(tuple(g.strip() for g in grp.split(",") if g.strip())
                           for grp in parts[3].replace(" ", "").split("|"))
            events.append(ScenarioEvent(at, action, groups))
        elif action in ("heal", "stop"):
            events.append(ScenarioEvent(at, action))
        else:
            raise ConfigError(f"scenario line {lineno}: unknown action {action!r}")
    return sorted(events, key=lambda e: e.at_ms)


class SimNet:
    """Event loop plus network model.

    Nodes are registered with a cluster name and a ``receive(msg)`` callable.
    """

    def __init__(self, rtt: RttMatrix, seed: int = 0, jitter: float = 0.0,
                 duplicate_delivery: bool = False):
        if not 0 <= jitter < 1:
            raise ConfigError("jitter fraction must be in [0, 1)")
        self.rtt = rtt
        self.jitter = jitter
        self.duplicate_delivery = duplicate_delivery
        self.rng = random.Random(seed)
        self.now = 0
        self._seq = 0
        self._queue: list = []
        self.cluster_of: dict[str, str] = {}
        self._handlers: dict[str, Callable[[Message], None]] = {}
        self._group_of: Optional[dict[str, int]] = None
        self._held: list[Message] = []
        self._last_delivery: dict[tuple[str, str], int] = {}
        self._one_way_ns: dict[tuple[str, str], int] = {}
        self.message_counts: dict[str, int] = {}
        self.cross_cluster_counts: dict[str, int] = {}
        self.delivered = 0
        self.step_hooks: list[Callable[["SimNet", Any], None]] = []

    # --- topology -------------------------------------------------------
    def register(self, node_id: str, cluster: str, handler: Callable[[Message], None]) -> None:
        self.rtt.index(cluster)
        if node_id in self.cluster_of:
            raise ConfigError(f"node {node_id!r} registered twice")
        if self._group_of is not None:
            # a node joining mid-partition lands on its cluster's side
            sides = {self._group_of[n] for n, c in self.cluster_of.items() if c == cluster}
            if len(sides) != 1:
                raise ConfigError(f"cannot place {node_id!r}: cluster {cluster!r} is split or empty")
            self._group_of[node_id] = sides.pop()
        self.cluster_of[node_id] = cluster
        self._handlers[node_id] = handler

    def one_way_ns(self, src: str, dst: str) -> int:
        key = (self.cluster_of[src], self.cluster_of[dst])
        base = self._one_way_ns.get(key)
        if base is None:
            base = round(self.rtt.rtt(*key) / 2 * NS_PER_MS)
            self._one_way_ns[key] = base
        return base

    def partition(self, groups: Iterable[Iterable[str]]) -> None:
        """Split nodes into groups; names may be node ids or cluster names."""
        group_of: dict[str, int] = {}
        for gi, group in enumerate(groups):
            for name in group:
                members = [n for n, c in self.cluster_of.items() if c == name] or [name]
                for node in members:
                    if node not in self.cluster_of:
                        raise ConfigError(f"unknown node or cluster {name!r} in partition")
                    if node in group_of:
                        raise ConfigError(f"node {node!r} appears in two partition groups")
                    group_of[node] = gi
        missing = set(self.cluster_of) - set(group_of)
        if missing:
            raise ConfigError(f"partition groups do not cover {sorted(missing)[:5]}")
        self._group_of = group_of

    def heal(self) -> None:
        self._group_of = None
        held, self._held = self._held, []
        for msg in held:
            self.send(msg)

    @property
    def partitioned(self) -> bool:
        return self._group_of is not None

    def reachable(self, a: str, b: str) -> bool:
        g = self._group_of
        return g is None or g[a] == g[b]

    # --- scheduling -----------------------------------------------------
    def _push(self, when: int, item) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (when, self._seq, item))

    def send(self, msg: Message) -> None:
        src, dst = msg.src, msg.dst
        if src not in self.cluster_of or dst not in self.cluster_of:
            raise ConfigError(f"unknown node in message {src!r}->{dst!r}")
        self.message_counts[msg.kind] = self.message_counts.get(msg.kind, 0) + 1
        if self.cluster_of[src] != self.cluster_of[dst]:
            self.cross_cluster_counts[msg.kind] = self.cross_cluster_counts.get(msg.kind, 0) + 1
        if self._group_of is not None and self._group_of[src] != self._group_of[dst]:
            self._held.append(msg)
            return
        if src == dst:
            delay = 0
        else:
            delay = self.one_way_ns(src, dst)
            if self.jitter:
                delay = round(delay * (1 + self.jitter * self.rng.uniform(-1.0, 1.0)))
        when = self.now + delay
        pair = (src, dst)
        last = self._last_delivery.get(pair)
        if last is not None and when < last:
            when = last
        self._last_delivery[pair] = when
        self._push(when, msg)
        if self.duplicate_delivery and self.rng.random() < 0.1:
            self._push(when, msg)

    def schedule(self, delay_ns: int, fn: Callable[[], None]) -> None:
        self._push(self.now + max(0, int(delay_ns)), fn)

    def at(self, when_ns: int, fn: Callable[[], None]) -> None:
        self._push(max(self.now, int(when_ns)), fn)

    # --- running --------------------------------------------------------
    def step(self) -> bool:
        if not self._queue:
            return False
        when, _, item = heapq.heappop(self._queue)
        self.now = when
        if isinstance(item, Message):
            self.delivered += 1
            self._handlers[item.dst](item)
        else:
            item()
        for hook in self.step_hooks:
            hook(self, item)
        return True

    def run(self, until_ns: Optional[int] = None, max_events: int = 50_000_000) -> int:
        n = 0
        queue = self._queue
        while queue:
            if until_ns is not None and queue[0][0] > until_ns:
                break
            self.step()
            n += 1
            if n > max_events:
                raise DivergenceError(f"no quiescence after {max_events} events")
        if until_ns is not None:
            self.now = max(self.now, until_ns)
        return self.now

    def run_until_quiescent(self, max_events: int = 50_000_000) -> int:
        """Drain the queue; anti-entropy rounds self-schedule only while dirty."""
        if self.partitioned:
            raise ConfigError("run_until_quiescent requires healed network")
        return self.run(max_events=max_events)

    def pending_events(self) -> int:
        return len(self._queue)

    @property
    def held(self) -> int:
        return len(self._held)
