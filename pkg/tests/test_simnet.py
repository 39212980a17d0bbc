import hashlib

import pytest
from hypothesis import given, settings, strategies as st

from hatkv.simnet import (NS_PER_MS, ConfigError, DivergenceError, Message, RttMatrix, SimNet,
                          load_rtt_matrix, parse_rtt_matrix, parse_scenario)


class Sink:
    def __init__(self, net):
        self.net = net
        self.got = []

    def __call__(self, msg):
        self.got.append((self.net.now, msg.kind, msg.src, msg.payload))


def make_net(clusters=("VA", "OR", "CA"), jitter=0.0, seed=0, **kw):
    net = SimNet(load_rtt_matrix().subset(clusters), seed=seed, jitter=jitter, **kw)
    sinks = {}
    for c in clusters:
        node = f"{c}.n"
        sinks[node] = Sink(net)
        net.register(node, c, sinks[node])
    return net, sinks


def test_bundled_matrix_values():
    m = load_rtt_matrix()
    assert m.rtt("CA", "OR") == 22.5
    assert m.rtt("OR", "VA") == 82.9
    assert m.rtt("VA", "VA") == 0.55
    assert parse_rtt_matrix(m.to_text()) == m


@pytest.mark.parametrize("src, dst, ms", [("CA", "OR", 11.25), ("OR", "VA", 41.45)])
def test_one_way_latency_is_half_rtt(src, dst, ms):
    net, sinks = make_net()
    net.send(Message("m", f"{src}.n", f"{dst}.n"))
    net.run()
    assert sinks[f"{dst}.n"].got[0][0] == round(ms * NS_PER_MS)


def test_self_delivery_is_immediate():
    net, sinks = make_net()
    net.run(until_ns=5 * NS_PER_MS)
    net.send(Message("m", "VA.n", "VA.n"))
    net.run()
    assert sinks["VA.n"].got[0][0] == 5 * NS_PER_MS


def test_unknown_node_is_config_error():
    net, _ = make_net()
    with pytest.raises(ConfigError):
        net.send(Message("m", "VA.n", "nowhere"))


def test_partition_holds_until_heal():
    net, sinks = make_net()
    net.partition([["VA"], ["OR", "CA"]])
    net.send(Message("m", "VA.n", "OR.n"))
    net.send(Message("m", "OR.n", "CA.n"))  # same side: unaffected
    net.run()
    assert sinks["OR.n"].got == []
    assert sinks["CA.n"].got[0][0] == round(11.25 * NS_PER_MS)
    assert net.held == 1
    net.run(until_ns=500 * NS_PER_MS)
    net.heal()
    net.run()
    t, *_ = sinks["OR.n"].got[0]
    assert t == 500 * NS_PER_MS + round(41.45 * NS_PER_MS)
    assert net.held == 0


def test_partition_groups_must_be_disjoint_and_cover():
    net, _ = make_net()
    with pytest.raises(ConfigError):
        net.partition([["VA", "OR"], ["OR", "CA"]])
    with pytest.raises(ConfigError):
        net.partition([["VA"], ["OR"]])
    with pytest.raises(ConfigError):
        net.partition([["VA"], ["OR", "CA", "XX"]])


def test_park_then_heal_preserves_fifo():
    net, sinks = make_net()
    net.send(Message("m", "VA.n", "OR.n", 0))
    net.partition([["VA"], ["OR", "CA"]])
    for i in range(1, 6):
        net.send(Message("m", "VA.n", "OR.n", i))
    net.heal()
    net.run()
    assert [p for *_, p in sinks["OR.n"].got] == list(range(6))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.0, 0.9))
def test_fifo_per_pair_under_jitter(seed, jitter):
    net, sinks = make_net(jitter=jitter, seed=seed)
    for i in range(40):
        net.schedule(i * 1000, lambda i=i: net.send(Message("m", "VA.n", "OR.n", i)))
    net.run()
    times = [t for t, *_ in sinks["OR.n"].got]
    assert [p for *_, p in sinks["OR.n"].got] == list(range(40))
    assert times == sorted(times)


def test_handlers_observe_monotone_time():
    net, sinks = make_net(jitter=0.5, seed=3)
    seen = []
    net.step_hooks.append(lambda n, item: seen.append(n.now))
    for i in range(50):
        src, dst = ("VA.n", "OR.n") if i % 2 else ("CA.n", "VA.n")
        net.send(Message("m", src, dst, i))
    net.run()
    assert seen == sorted(seen) and len(seen) == 50


def test_idle_network_quiescent_immediately():
    net, _ = make_net()
    assert net.run_until_quiescent() == 0


def test_quiescence_requires_healed_network():
    net, _ = make_net()
    net.partition([["VA"], ["OR", "CA"]])
    with pytest.raises(ConfigError):
        net.run_until_quiescent()


def test_divergence_bound():
    net, _ = make_net()

    def forever():
        net.schedule(1, forever)

    net.schedule(0, forever)
    with pytest.raises(DivergenceError):
        net.run_until_quiescent(max_events=1000)


def _trace(seed):
    net, sinks = make_net(jitter=0.4, seed=seed, duplicate_delivery=True)
    for i in range(100):
        net.send(Message("m", "VA.n", ("OR.n", "CA.n")[i % 2], i))
    end = net.run_until_quiescent()
    blob = repr([(n, s.got) for n, s in sorted(sinks.items())]).encode()
    return end, hashlib.sha256(blob).hexdigest()


def test_same_seed_same_trace():
    assert _trace(11) == _trace(11)
    assert _trace(11) != _trace(12)


def test_message_counts_by_kind():
    net, _ = make_net()
    net.send(Message("a", "VA.n", "VA.n"))
    net.send(Message("b", "VA.n", "OR.n"))
    net.send(Message("b", "OR.n", "VA.n"))
    assert net.message_counts == {"a": 1, "b": 2}
    assert net.cross_cluster_counts == {"b": 2}


def test_rtt_matrix_validation():
    with pytest.raises(ConfigError):
        RttMatrix(["A", "B"], [[0.5, 1.0], [2.0, 0.5]])
    with pytest.raises(ConfigError):
        RttMatrix(["A", "B"], [[3.0, 1.0], [1.0, 0.5]])
    with pytest.raises(ConfigError):
        parse_rtt_matrix("A B\nA 0.5 x\nB 1 0.5\n")


def test_scaled_matrix_keeps_intra_cluster():
    m = load_rtt_matrix().subset(["VA", "OR"]).scaled(10)
    assert m.rtt("VA", "OR") == pytest.approx(829.0)
    assert m.rtt("VA", "VA") == 0.55


def test_parse_scenario():
    ev = parse_scenario("# comment\nat 600 heal\nat 100 partition VA,CA|OR\nat 900 stop\n")
    assert [(e.at_ms, e.action) for e in ev] == [(100, "partition"), (600, "heal"), (900, "stop")]
    assert ev[0].groups == (("VA", "CA"), ("OR",))
    for bad in ("at x heal", "heal", "at 5 partition", "at 5 explode"):
        with pytest.raises(ConfigError):
            parse_scenario(bad)


def test_node_registered_mid_partition_joins_its_cluster_side():
    net, sinks = make_net()
    net.partition([["VA"], ["OR", "CA"]])
    net.register("OR.c", "OR", Sink(net))
    assert net.reachable("OR.c", "CA.n") and not net.reachable("OR.c", "VA.n")
    net.partition([["VA.n", "OR.c"], ["OR.n", "CA.n"]])
    with pytest.raises(ConfigError):
        net.register("OR.d", "OR", Sink(net))
