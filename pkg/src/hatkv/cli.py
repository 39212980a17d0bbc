"""Command-line entry point: ``hatkv run | check | demo``.

Exit codes: 0 success, 2 prohibited anomaly findings, 1 error.
"""

from __future__ import annotations

import argparse
import os
import sys

from .checker import (Analysis, MalformedHistory, build_history, detect, findings_text,
                      resolve_phenomena, summary_json)
from .core import EncodingError, HistoryParseError, read_history_file
from .harness.demos import (HAT_MODES, SESSION_PHENOMENA, demo_lost_update, demo_otv,
                            demo_ryw_stickiness)
from .harness.report import emit_report
from .harness.runner import InvariantViolation, RunConfig, SystemConfig, run_scenario
from .harness.workload import SpecError, WorkloadSpec
from .simnet import ConfigError, DivergenceError, load_rtt_matrix, parse_scenario
from .txclient import CUT_MODES, ISOLATION_MODES, SESSION_MODES, Modes

EXIT_OK, EXIT_ERROR, EXIT_ANOMALY = 0, 1, 2


def _sessions(text: str) -> frozenset:
    names = frozenset(s.strip() for s in text.split(",") if s.strip())
    bad = sorted(names - set(SESSION_MODES))
    if bad:
        raise argparse.ArgumentTypeError(f"unknown session guarantee(s): {', '.join(bad)}")
    return names


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for anomalies here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hatkv", description="Simulated HAT key-value store and history checker.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run a workload over the simulated network")
    r.add_argument("--scenario", help="file of 'at <ms> partition|heal|stop' lines")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--mode", choices=ISOLATION_MODES, default="mav")
    r.add_argument("--cut", choices=CUT_MODES, default="none")
    r.add_argument("--session", type=_sessions, default=frozenset(),
                   help="comma-separated: " + ",".join(SESSION_MODES))
    r.add_argument("--clusters", type=int, default=2)
    r.add_argument("--servers", type=int, default=5)
    r.add_argument("--clients", type=int, default=4)
    r.add_argument("--keys", type=int, default=100_000)
    r.add_argument("--value-size", type=int, default=1024)
    r.add_argument("--txn-len", type=int, default=8)
    r.add_argument("--read-frac", type=float, default=0.5)
    r.add_argument("--txns", type=int, default=1000)
    r.add_argument("--rtt-matrix", help="RTT matrix file (defaults to the bundled EC2 matrix)")
    r.add_argument("--commit-acks", type=int, default=0,
                   help="other replicas that must hold a write before commit returns")
    r.add_argument("--check", action="store_true", help="run the anomaly checker on the history")
    r.add_argument("--out", help="directory for history.log, metrics.csv and summary.txt")

    c = sub.add_parser("check", help="check a history log for anomalies")
    c.add_argument("--history", required=True)
    c.add_argument("--phenomena", default="all", help="'all' or comma-separated names")
    c.add_argument("--json", action="store_true", help="print a JSON summary instead of findings")

    d = sub.add_parser("demo", help="run a scripted anomaly demonstration")
    d.add_argument("name", choices=("lost-update", "ryw", "otv"))
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--seeds", type=int, default=100, help="seed sweep size for the ryw demo")
    return p


def cmd_run(args) -> int:
    modes = Modes(isolation=args.mode, cut=args.cut, sessions=args.session)
    scenario = []
    if args.scenario:
        with open(args.scenario, encoding="utf-8") as fh:
            scenario = parse_scenario(fh.read())
    rtt = load_rtt_matrix(args.rtt_matrix) if args.rtt_matrix else None
    workload = WorkloadSpec(key_count=args.keys, value_size=args.value_size, txn_len=args.txn_len,
                            read_fraction=args.read_frac, clients=args.clients,
                            duration_txns=args.txns)
    system = SystemConfig(clusters=args.clusters, servers=args.servers, modes=modes,
                          seed=args.seed, rtt=rtt, commit_acks=args.commit_acks)
    cfg = RunConfig(workload=workload, system=system, scenario=scenario, check=args.check,
                    out_dir=args.out)
    _, m = run_scenario(cfg)
    text = emit_report(m, "text")
    if args.out:
        with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(emit_report(m, "csv"))
        with open(os.path.join(args.out, "summary.txt"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        if args.check:
            with open(os.path.join(args.out, "findings.txt"), "w", encoding="utf-8", newline="\n") as fh:
                fh.write(findings_text(m.findings_detail))
    sys.stdout.write(text)
    return EXIT_ANOMALY if m.prohibited_findings else EXIT_OK


def cmd_check(args) -> int:
    phenomena = resolve_phenomena(args.phenomena)
    found = detect(Analysis(build_history(read_history_file(args.history))), phenomena)
    if args.json:
        sys.stdout.write(summary_json(found) + "\n")
    else:
        sys.stdout.write(findings_text(found))
        counts = ", ".join(f"{p}={len(found[p])}" for p in phenomena)
        sys.stdout.write(f"# {counts}\n")
    return EXIT_ANOMALY if any(found.values()) else EXIT_OK


def _demo_lost_update(seed: int) -> bool:
    ok = True
    for mode in HAT_MODES + ("master",):
        r = demo_lost_update(mode, seed=seed)
        n = r.count("LostUpdate")
        want = 0 if mode == "master" else 1
        part = "no partition" if mode == "master" else "partitioned"
        print(f"{mode:7s} {part:13s} LostUpdate findings: {n} (expected {want})")
        ok &= n == want
    return ok


def _demo_ryw(seed: int, seeds: int) -> bool:
    r = demo_ryw_stickiness(sticky=False, seed=seed)
    print(f"non-sticky client: MYR findings: {r.count('MYR')} (expected >= 1)")
    ok = r.count("MYR") >= 1
    worst = 0
    for s in range(seed, seed + seeds):
        worst = max(worst, demo_ryw_stickiness(sticky=True, seed=s).total(SESSION_PHENOMENA))
    print(f"sticky causal client over {seeds} seeds: max session findings per run: {worst} (expected 0)")
    return ok and worst == 0


def _demo_otv(seed: int) -> bool:
    rc = demo_otv("rc", seed=seed).count("OTV")
    mav = demo_otv("mav", seed=seed).count("OTV")
    print(f"rc  OTV findings: {rc} (expected >= 1)")
    print(f"mav OTV findings: {mav} (expected 0)")
    return rc >= 1 and mav == 0


def cmd_demo(args) -> int:
    if args.name == "lost-update":
        ok = _demo_lost_update(args.seed)
    elif args.name == "ryw":
        ok = _demo_ryw(args.seed, args.seeds)
    else:
        ok = _demo_otv(args.seed)
    print("demonstration " + ("holds" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_ERROR


COMMANDS = {"run": cmd_run, "check": cmd_check, "demo": cmd_demo}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, SpecError, ValueError, OSError, HistoryParseError, EncodingError,
            MalformedHistory, InvariantViolation, DivergenceError) as e:
        print(f"hatkv: error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
