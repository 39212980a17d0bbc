"""YCSB-style transactional workload generator."""

from __future__ import annotations

import random
from dataclasses import dataclass


class SpecError(ValueError):
    pass


@dataclass
class WorkloadSpec:
    key_count: int = 100_000
    value_size: int = 1024
    txn_len: int = 8
    read_fraction: float = 0.5
    clients: int = 4
    duration_txns: int = 1000
    # extras used by the correctness sweeps; zero by default
    abort_fraction: float = 0.0
    predicate_fraction: float = 0.0
    predicate_span: int = 4

    def validate(self) -> None:
        if not 0 <= self.read_fraction <= 1:
            raise SpecError("read_fraction must be within [0, 1]")
        if self.txn_len < 1:
            raise SpecError("txn_len must be >= 1")
        if self.key_count < 1:
            raise SpecError("key_count must be >= 1")
        if self.value_size < 0:
            raise SpecError("value_size must be >= 0")
        if self.clients < 1:
            raise SpecError("clients must be >= 1")
        if self.duration_txns < 0:
            raise SpecError("duration_txns must be >= 0")
        for name in ("abort_fraction", "predicate_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise SpecError(f"{name} must be within [0, 1]")


def key_name(i: int, width: int) -> str:
    return f"k{i:0{width}d}"


def gen_workload(spec: WorkloadSpec, seed: int) -> list:
    """Deterministic list of transactions.

    Each transaction is a tuple of ops: ``("r", key)``, ``("w", key, value)``,
    ``("p", lo, hi)`` and, when ``abort_fraction`` > 0, a trailing
    ``("abort",)`` marking a client-requested abort.
    """
    spec.validate()
    rng = random.Random(seed)
    width = len(str(spec.key_count - 1))
    txns = []
    for _ in range(spec.duration_txns):
        ops = []
        for _ in range(spec.txn_len):
            k = rng.randrange(spec.key_count)
            if spec.predicate_fraction and rng.random() < spec.predicate_fraction:
                hi = min(spec.key_count, k + spec.predicate_span)
                # "k~" sorts after every key name
                ops.append(("p", key_name(k, width), key_name(hi, width) if hi < spec.key_count else "k~"))
            elif rng.random() < spec.read_fraction:
                ops.append(("r", key_name(k, width)))
            else:
                ops.append(("w", key_name(k, width), rng.randbytes(spec.value_size)))
        if spec.abort_fraction and rng.random() < spec.abort_fraction:
            ops.append(("abort",))
        txns.append(tuple(ops))
    return txns
