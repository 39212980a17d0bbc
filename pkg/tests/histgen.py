"""Random small histories for checker property tests."""

import random

from hatkv.core import HistoryEvent, Predicate, int_bytes, make_timestamp


def random_history(rng: random.Random, max_txns=4, keys="abc", predicates=False,
                   sessions=True, abort_p=0.15) -> list:
    n = rng.randint(1, max_txns)
    ts_list = [make_timestamp(i + 1, rng.randint(1, 3)) for i in range(n)]
    status = ["abort" if rng.random() < abort_p else "commit" for _ in range(n)]
    session = [rng.choice([None, "S1", "S2"]) if sessions else None for _ in range(n)]
    # decide writes first so reads can name real writers
    writes = []
    for i in range(n):
        w = []
        for _ in range(rng.randint(0, 3)):
            w.append((rng.choice(keys), rng.randint(1, 9)))
        writes.append(w)
    finals = [{} for _ in range(n)]
    for i, w in enumerate(writes):
        for k, v in w:
            finals[i][k] = v

    def pick_source(i, key):
        cands = [j for j in range(n) if j != i and key in finals[j]]
        if not cands or rng.random() < 0.25:
            return None, None
        j = rng.choice(cands)
        vals = [v for k, v in writes[j] if k == key]
        v = rng.choice(vals) if rng.random() < 0.2 else finals[j][key]
        return ts_list[j], int_bytes(v)

    blocks = []
    for i in range(n):
        ops = [("w", k, v) for k, v in writes[i]]
        for _ in range(rng.randint(0, 3)):
            if predicates and rng.random() < 0.3:
                lo, hi = sorted(rng.sample(list(keys) + ["~"], 2))
                ops.append(("p", lo, hi))  # "~" sorts after every key
            else:
                ops.append(("r", rng.choice(keys)))
        rng.shuffle(ops)
        events = [("begin",)]
        own: dict = {}
        for op in ops:
            if op[0] == "w":
                own[op[1]] = op[2]
                events.append(("write", op[1], int_bytes(op[2]), ts_list[i]))
            elif op[0] == "r":
                if op[1] in own:
                    events.append(("read", op[1], int_bytes(own[op[1]]), ts_list[i]))
                else:
                    src, val = pick_source(i, op[1])
                    events.append(("read", op[1], val, src))
            else:
                eq = int_bytes(rng.randint(1, 9)) if rng.random() < 0.3 else None
                pred = Predicate(op[1], op[2], eq)
                vset = []
                for k in keys:
                    if pred.covers(k):
                        src, _ = pick_source(i, k)
                        if src is not None:
                            vset.append((k, src))
                events.append(("pred_read", pred.range_text(), eq, None, tuple(sorted(vset))))
        events.append((status[i],))
        blocks.append((i, events))
    # interleave whole transactions in a random order
    rng.shuffle(blocks)
    out = []
    for i, events in blocks:
        for ev in events:
            kind = ev[0]
            key = value = obs = None
            vset = ()
            if kind in ("write", "read"):
                _, key, value, obs = ev
            elif kind == "pred_read":
                _, key, value, obs, vset = ev
            out.append(HistoryEvent(len(out), len(out), session[i], ts_list[i], kind, key,
                                    value, obs, vset))
    return out
