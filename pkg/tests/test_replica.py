import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from hatkv.core import Predicate, WriteRecord
from hatkv.replica import (Placement, Replica, ReplicaConfig, RoutingError,
                           mav_invariant_violations)
from hatkv.simnet import Message


class FakeNet:
    """Captures sends; delivery order is chosen by the test."""

    def __init__(self):
        self.outbox: list = []
        self.timers: list = []

    def send(self, msg: Message) -> None:
        self.outbox.append(msg)

    def schedule(self, delay_ns, fn) -> None:
        self.timers.append(fn)

    def take(self, kind=None) -> list:
        keep, out = [], []
        for m in self.outbox:
            (out if kind is None or m.kind == kind else keep).append(m)
        self.outbox = keep
        return out


def build(clusters=("A",), servers=2, **cfg):
    p = Placement(list(clusters), servers)
    net = FakeNet()
    reps = {s: Replica(s, p, ReplicaConfig(**cfg), net) for s in p.servers()}
    return p, net, reps


def key_on_other_server(p: Placement, key: str) -> str:
    for cand in ("y", "y1", "y2", "y3", "d", "e"):
        if p.index(cand) != p.index(key):
            return cand
    raise AssertionError("no key on another server")


def deliver_all(net: FakeNet, reps: dict, rng=None) -> None:
    while net.outbox:
        i = rng.randrange(len(net.outbox)) if rng else 0
        m = net.outbox.pop(i)
        if m.dst in reps:
            reps[m.dst].receive(m)


# ------------------------------------------------------------------ put
def test_put_enters_pending_and_notifies_sibling_replicas():
    p, net, reps = build(stability="sibs")
    y = key_on_other_server(p, "x")
    rx, ry = p.replica_in("x", "A"), p.replica_in(y, "A")
    w = WriteRecord("x", b"\x01", 10001, frozenset({"x", y}))
    reps[rx].apply_put(w)
    assert reps[rx].pending["x"] == {10001: w}
    assert "x" not in reps[rx].good
    notes = net.take("notify")
    assert [(m.dst, m.payload) for m in notes] == [(ry, (10001, ("x",)))]
    # the replica's own copy of x acknowledges itself inline
    assert reps[rx].acks[10001]["x"] == {rx}
    assert reps[rx].expected(w) == 2


def test_duplicate_put_is_idempotent():
    p, net, reps = build(stability="sibs")
    y = key_on_other_server(p, "x")
    rx = p.replica_in("x", "A")
    w = WriteRecord("x", b"\x01", 10001, frozenset({"x", y}))
    reps[rx].apply_put(w)
    net.take()
    before = (dict(reps[rx].pending), {k: dict(v) for k, v in reps[rx].acks.items()})
    reps[rx].apply_put(w)
    assert net.outbox == []
    assert (dict(reps[rx].pending), {k: dict(v) for k, v in reps[rx].acks.items()}) == before


def test_put_to_non_replica_is_routing_error():
    p, net, reps = build(stability="sibs")
    y = key_on_other_server(p, "x")
    with pytest.raises(RoutingError):
        reps[p.replica_in(y, "A")].apply_put(WriteRecord("x", b"", 10001))


# --------------------------------------------------------------- notify
def test_all_acks_promote_to_good():
    p, net, reps = build(stability="sibs")
    y = key_on_other_server(p, "x")
    rx, ry = p.replica_in("x", "A"), p.replica_in(y, "A")
    sibs = frozenset({"x", y})
    wx, wy = WriteRecord("x", b"\x01", 10001, sibs), WriteRecord(y, b"\x01", 10001, sibs)
    reps[rx].apply_put(wx)
    reps[ry].apply_put(wy)
    deliver_all(net, reps)
    assert reps[rx].good["x"] == wx and reps[ry].good[y] == wy
    assert "x" not in reps[rx].pending and y not in reps[ry].pending


def test_notify_for_unknown_ts_only_counts():
    p, net, reps = build(stability="sibs")
    r = reps[p.replica_in("x", "A")]
    r.apply_notify("A.s9", 50001, ("x",))
    assert r.acks[50001]["x"] == {"A.s9"}
    assert r.good == {} and r.pending == {}


def test_promotion_skipped_when_good_is_newer():
    # replay both arrival orders: the newer write must win either way
    finals = []
    for order in ((10001, 20001), (20001, 10001)):
        p, net, reps = build(servers=1, stability="sibs")
        r = reps["A.s0"]
        for ts in order:
            r.apply_put(WriteRecord("k", ts.to_bytes(4, "big"), ts, frozenset({"k"})))
        finals.append((r.good["k"].ts, dict(r.pending)))
    assert finals == [(20001, {}), (20001, {})]


def test_over_count_is_assertion():
    p, net, reps = build(servers=1, stability="sibs")
    r = reps["A.s0"]
    r.apply_notify("A.s0", 1, ("k",))
    with pytest.raises(AssertionError):
        r.apply_notify("A.s1", 1, ("k",))


# ------------------------------------------------------------------ get
def test_get_required_falls_back_to_pending():
    p, net, reps = build(servers=1, stability="sibs")
    r = reps["A.s0"]
    w = WriteRecord("y", b"\x01", 10001, frozenset({"x", "y"}))
    r.apply_put(w)
    assert r.good.get("y") is None
    assert r.serve_get("y", 10001) == (True, w)


def test_get_bottom_on_fresh_replica():
    _, _, reps = build(servers=1)
    assert reps["A.s0"].serve_get("k", None) == (True, None)


def test_get_without_bound_never_returns_pending():
    p, net, reps = build(servers=1, stability="sibs")
    r = reps["A.s0"]
    good = WriteRecord("k", b"g", 30002)
    r.lww_merge(good)
    r.apply_put(WriteRecord("k", b"p", 40001, frozenset({"k", "zz"})))
    assert 40001 in r.pending["k"]
    assert r.serve_get("k", None) == (True, good)
    # bound above good and not pending: park
    assert r.serve_get("k", 50001) == (False, None)


def test_parked_get_answered_when_write_arrives():
    p, net, reps = build(servers=1, stability="sibs")
    r = reps["A.s0"]
    r.receive(Message("get_req", "c1", "A.s0", ((1, 1), "k", 10001)))
    assert net.take("get_resp") == []
    w = WriteRecord("k", b"v", 10001, frozenset({"k", "j"}))
    r.apply_put(w)
    resp = net.take("get_resp")
    assert [m.payload for m in resp] == [((1, 1), w)]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 6), st.booleans()), min_size=1, max_size=12),
       st.integers(1, 7))
def test_get_never_below_bound(writes, bound_seq):
    p, net, reps = build(servers=1, stability="sibs")
    r = reps["A.s0"]
    for seq, stable in writes:
        w = WriteRecord("k", b"", seq * 10000 + 1, frozenset({"k"} if stable else {"k", "other"}))
        r.apply_put(w)
    bound = bound_seq * 10000 + 1
    ok, got = r.serve_get("k", bound)
    if ok:
        assert got is not None and got.ts >= bound


# ------------------------------------------------------------ lww merge
def test_lww_examples():
    _, _, reps = build(servers=1)
    r = reps["A.s0"]
    r.lww_merge(WriteRecord("k", b"a", 10001))
    r.lww_merge(WriteRecord("k", b"b", 20001))
    assert r.good["k"].ts == 20001
    r.lww_merge(WriteRecord("k", b"a", 10001))
    assert r.good["k"].ts == 20001


def test_lww_all_permutations_agree():
    writes = [WriteRecord("k", bytes([i]), ts) for i, ts in enumerate((10001, 20002, 20001, 30003))]
    writes.append(WriteRecord("j", b"j", 10002))
    finals = set()
    for perm in itertools.permutations(writes + writes[:1]):
        _, _, reps = build(servers=1)
        r = reps["A.s0"]
        for w in perm:
            r.lww_merge(w)
        finals.add(tuple(sorted(r.good.items())))
    assert len(finals) == 1
    (only,) = finals
    assert dict(only)["k"].ts == 30003


# --------------------------------------------------------- anti-entropy
def test_anti_entropy_pairwise_convergence():
    p, net, reps = build(clusters=("A", "B"), servers=1)
    a, b = reps["A.s0"], reps["B.s0"]
    a.lww_merge(WriteRecord("k", b"a", 20001))
    b.lww_merge(WriteRecord("k", b"b", 10002))
    for r in (a, b):
        net.send(r.anti_entropy_step(p.peers(r.node_id)[0]))
    deliver_all(net, reps)
    assert a.good["k"] == b.good["k"] and a.good["k"].ts == 20001


def test_anti_entropy_sends_only_good_records():
    p, net, reps = build(clusters=("A", "B"), servers=1, stability="sibs")
    a = reps["A.s0"]
    a.apply_put(WriteRecord("k", b"p", 10001, frozenset({"k", "j"})))
    a.lww_merge(WriteRecord("m", b"g", 10002))
    msg = a.anti_entropy_step("B.s0")
    assert [w.key for w in msg.payload] == ["m"]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_gossip_reaches_fixed_point(seed):
    rng = random.Random(seed)
    clusters = ("A", "B", "C", "D", "E")
    p, net, reps = build(clusters=clusters, servers=1)
    oracle = {}
    for i in range(15):
        k = rng.choice("abc")
        w = WriteRecord(k, bytes([i]), rng.randrange(1, 9) * 10000 + i)
        reps[f"{rng.choice(clusters)}.s0"].lww_merge(w)
        if k not in oracle or w.ts > oracle[k].ts:
            oracle[k] = w
    # fire anti-entropy timers in random order until nothing is left
    while net.timers or net.outbox:
        if net.timers and (not net.outbox or rng.random() < 0.3):
            net.timers.pop(rng.randrange(len(net.timers)))()
        else:
            deliver_all(net, reps, rng)
    for r in reps.values():
        assert r.good == oracle


def test_partitioned_anti_entropy_applies_after_heal():
    from hatkv.simnet import SimNet, load_rtt_matrix

    net = SimNet(load_rtt_matrix().subset(["VA", "OR"]))
    p = Placement(["VA", "OR"], 1)
    reps = {s: Replica(s, p, ReplicaConfig(), net) for s in p.servers()}
    for s, r in reps.items():
        net.register(s, r.cluster, r.receive)
    net.partition([["VA"], ["OR"]])
    reps["VA.s0"].lww_merge(WriteRecord("k", b"v", 10001))
    net.run()
    assert "k" not in reps["OR.s0"].good
    net.heal()
    net.run_until_quiescent()
    assert reps["OR.s0"].good["k"].ts == 10001


# ---------------------------------------------------------- reveal gate
def test_reveal_gate_open_when_deps_replicated():
    p, net, reps = build(clusters=("A", "B"), servers=1, gate="global")
    a = reps["A.s0"]
    a.lww_merge(WriteRecord("x", b"1", 10001))
    a.peer_good["B.s0"]["x"] = 10001
    assert a.reveal_gate(WriteRecord("y", b"1", 20001, deps=(("x", 10001),)))
    a.peer_good["B.s0"]["x"] = -1
    assert not a.reveal_gate(WriteRecord("y", b"1", 20001, deps=(("x", 10001),)))


def test_gated_write_invisible_until_dependency_everywhere():
    # T1 w_x(1) then T2 w_y(1) from one session: y may not be revealed
    # while some replica of x still lacks T1's write
    from hatkv.simnet import SimNet, load_rtt_matrix

    net = SimNet(load_rtt_matrix().subset(["VA", "OR"]))
    p = Placement(["VA", "OR"], 1)
    reps = {s: Replica(s, p, ReplicaConfig(gate="global"), net) for s in p.servers()}
    for s, r in reps.items():
        net.register(s, r.cluster, r.receive)
    net.register("c1", "VA", lambda m: None)
    wx = WriteRecord("x", b"\x01", 10001)
    wy = WriteRecord("y", b"\x01", 20001, deps=(("x", 10001),))
    net.partition([["VA.s0", "c1"], ["OR.s0"]])
    net.send(Message("write_put", "c1", "VA.s0", ((1, 1), (wx,), True, False)))
    net.run()
    net.send(Message("write_put", "c1", "VA.s0", ((1, 2), (wy,), True, False)))
    net.run()
    assert reps["VA.s0"].serve_get("y", None) == (True, None)
    net.heal()
    net.run_until_quiescent()
    for r in reps.values():
        assert r.good["y"] == wy and r.good["x"] == wx


# ------------------------------------------------------------ predicate
def test_predicate_singleton_and_empty():
    _, _, reps = build(servers=1)
    r = reps["A.s0"]
    assert r.serve_predicate(Predicate("a", "z"), {}) == {}
    w = WriteRecord("x", b"\x01", 10001)
    r.lww_merge(w)
    assert r.serve_predicate(Predicate("a", "z"), {}) == {"x": w}
    assert r.serve_predicate(Predicate("a", "x"), {}) == {}


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abc"), st.integers(1, 5), st.booleans()), max_size=10),
       st.dictionaries(st.sampled_from("abc"), st.integers(1, 5), max_size=3))
def test_predicate_matches_pointwise_get(writes, req):
    _, _, reps = build(servers=1, stability="sibs")
    r = reps["A.s0"]
    for k, seq, stable in writes:
        r.apply_put(WriteRecord(k, b"", seq * 10000 + 1, frozenset({k} if stable else {k, "zz"})))
    required = {k: s * 10000 + 1 for k, s in req.items()}
    res = r.serve_predicate(Predicate("a", "d"), required)
    point = {k: r.serve_get(k, required.get(k)) for k in "abc"}
    if any(not ok for ok, _ in point.values()):
        assert res is None
    else:
        assert res == {k: w for k, (_, w) in point.items() if w is not None}


# --------------------------------------------------------------- master
def test_master_write_then_read():
    p, net, reps = build(clusters=("A", "B"), servers=1, master=True)
    m = reps[p.master("k")]
    w = WriteRecord("k", b"v", 10001)
    m.receive(Message("master_op", "c1", m.node_id, ((1, 1), (("w", "k", w),))))
    m.receive(Message("master_op", "c1", m.node_id, ((1, 2), (("r", "k"),))))
    resp = net.take("master_resp")
    assert resp[1].payload == ((1, 2), (w,))
    other = reps[next(s for s in reps if s != m.node_id)]
    with pytest.raises(RoutingError):
        other.master_apply("c1", (1, 3), (("r", "k"),))


# ------------------------------------------------------------------- gc
def test_gc_discards_pending_below_good():
    _, _, reps = build(servers=1, stability="sibs")
    r = reps["A.s0"]
    r.apply_put(WriteRecord("k", b"p", 10001, frozenset({"k", "j"})))
    r.apply_put(WriteRecord("k", b"q", 20001, frozenset({"k", "j"})))
    r.good["k"] = WriteRecord("k", b"g", 20001)
    r.gc_pending()
    # equal ts is kept for the promotion logic to consume
    assert list(r.pending["k"]) == [20001]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_sibling_invariant_holds_before_and_after_gc(seed):
    rng = random.Random(seed)
    p, net, reps = build(clusters=("A", "B"), servers=2, stability="sibs")
    keys = ["x", "y", "d", "e"]
    for i in range(rng.randint(1, 6)):
        sibs = frozenset(rng.sample(keys, rng.randint(1, 3)))
        ts = rng.randint(1, 5) * 10000 + i + 1
        for k in sorted(sibs):
            origin = reps[p.replica_in(k, rng.choice(["A", "B"]))]
            origin.on_put("c", (i, k), (WriteRecord(k, b"", ts, sibs),), True, False)
        for _ in range(rng.randint(0, 8)):
            if net.outbox:
                m = net.outbox.pop(rng.randrange(len(net.outbox)))
                if m.dst in reps:
                    reps[m.dst].receive(m)
        assert mav_invariant_violations(reps, p) == []
        for r in reps.values():
            r.gc_pending()
        assert mav_invariant_violations(reps, p) == []
    deliver_all(net, reps, rng)
    assert mav_invariant_violations(reps, p) == []


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_good_timestamp_never_decreases(seed):
    rng = random.Random(seed)
    p, net, reps = build(clusters=("A", "B"), servers=1, stability="sibs")
    for r in reps.values():
        r.audit = []
    for i in range(8):
        sibs = frozenset(rng.sample(["x", "y", "z"], rng.randint(1, 3)))
        ts = rng.randint(1, 4) * 10000 + i + 1
        for k in sorted(sibs):
            reps[rng.choice(["A.s0", "B.s0"])].on_put("c", (i, k), (WriteRecord(k, b"", ts, sibs),), True, False)
    while net.outbox or net.timers:
        if net.timers and rng.random() < 0.2:
            net.timers.pop(0)()
        elif net.outbox:
            deliver_all(net, reps, rng)
        else:
            net.timers.pop(0)()
    for r in reps.values():
        last = {}
        for entry in r.audit:
            if entry[0] == "good":
                w = entry[1]
                assert w.ts > last.get(w.key, -1)
                last[w.key] = w.ts
    assert reps["A.s0"].good == reps["B.s0"].good
