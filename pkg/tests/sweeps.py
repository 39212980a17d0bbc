"""Randomised run configurations shared by the soundness tests."""

import random

from hatkv.harness.runner import RunConfig, SystemConfig
from hatkv.harness.workload import WorkloadSpec
from hatkv.simnet import ScenarioEvent
from hatkv.txclient import Modes


def partition_scenario(rng: random.Random, clusters) -> list:
    """One to three partition windows over the first second of sim time."""
    events = []
    t = rng.uniform(0, 100)
    for _ in range(rng.randint(1, 3)):
        names = list(clusters)
        rng.shuffle(names)
        cut = rng.randint(1, len(names) - 1)
        events.append(ScenarioEvent(t, "partition", (tuple(names[:cut]), tuple(names[cut:]))))
        t += rng.uniform(50, 400)
        events.append(ScenarioEvent(t, "heal"))
        t += rng.uniform(0, 200)
    return events


def soundness_config(mode: str, seed: int, txns: int = 1000, audit: bool = False) -> RunConfig:
    rng = random.Random(f"{mode}:{seed}")
    clusters = rng.choice([2, 2, 3])
    names = ("VA", "OR", "CA")[:clusters]
    workload = WorkloadSpec(key_count=rng.choice([8, 20, 50]), value_size=2,
                            txn_len=rng.choice([2, 4, 6]), read_fraction=rng.uniform(0.3, 0.7),
                            clients=rng.choice([3, 4, 6]), duration_txns=txns,
                            abort_fraction=0.05, predicate_fraction=rng.choice([0.0, 0.1]),
                            predicate_span=3)
    system = SystemConfig(clusters=clusters, servers=rng.choice([1, 2]),
                          modes=Modes(isolation=mode), seed=seed, cluster_names=names,
                          jitter=0.3, duplicate_delivery=rng.random() < 0.3,
                          audit_mav=audit and mode == "mav")
    return RunConfig(workload=workload, system=system,
                     scenario=partition_scenario(rng, names), check=True)
