"""CSV and plain-text rendering of run metrics."""

from __future__ import annotations

import csv
import io

from .runner import RunMetrics

COLUMNS = (
    "mode", "seed", "issued", "committed", "internal_aborts", "external_aborts",
    "mean_op_latency_ms", "mean_remote_op_latency_ms", "p99_op_latency_ms",
    "mean_txn_latency_ms", "mean_write_metadata_bytes", "remote_ops", "messages_total",
    "cross_cluster_messages_total", "messages", "sim_time_ms", "converged", "divergent_keys",
    "mav_checks", "prohibited_findings", "findings", "history_sha256",
)


def _pairs(d: dict) -> str:
    return ";".join(f"{k}={d[k]}" for k in sorted(d))


def metrics_row(m: RunMetrics) -> dict:
    row = {}
    for col in COLUMNS:
        if col == "messages_total":
            v = sum(m.messages.values())
        elif col == "cross_cluster_messages_total":
            v = sum(m.cross_cluster_messages.values())
        elif col in ("messages", "findings"):
            v = _pairs(getattr(m, col))
        else:
            v = getattr(m, col)
        if isinstance(v, float):
            v = f"{v:.6f}"
        elif isinstance(v, bool):
            v = int(v)
        row[col] = v
    return row


def to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for m in rows:
        w.writerow(metrics_row(m))
    return buf.getvalue()


def to_text(m: RunMetrics) -> str:
    lines = [
        f"mode {m.mode}  seed {m.seed}",
        f"transactions: {m.issued} issued, {m.committed} committed, "
        f"{m.internal_aborts} internal aborts, {m.external_aborts} external aborts",
        f"latency: mean op {m.mean_op_latency_ms:.3f} ms, p99 op {m.p99_op_latency_ms:.3f} ms, "
        f"mean txn {m.mean_txn_latency_ms:.3f} ms",
        f"remote ops: {m.remote_ops} (mean {m.mean_remote_op_latency_ms:.3f} ms)",
        f"write metadata: {m.mean_write_metadata_bytes:.1f} bytes per write",
        f"messages: {sum(m.messages.values())} total, "
        f"{sum(m.cross_cluster_messages.values())} cross-cluster",
        f"converged: {'yes' if m.converged else f'no ({m.divergent_keys} keys differ)'}",
        f"sim time: {m.sim_time_ms:.3f} ms",
    ]
    if m.mav_checks:
        lines.append(f"sibling invariant checks: {m.mav_checks}")
    if m.findings:
        lines.append("findings: " + ", ".join(f"{k}={m.findings[k]}" for k in sorted(m.findings)))
        lines.append(f"prohibited findings: {m.prohibited_findings}")
    return "\n".join(lines) + "\n"


def emit_report(metrics, fmt: str = "csv") -> str:
    """Render one RunMetrics or a list of them as ``csv`` or ``text``."""
    rows = metrics if isinstance(metrics, (list, tuple)) else [metrics]
    if fmt == "csv":
        return to_csv(rows)
    if fmt == "text":
        return "\n".join(to_text(m) for m in rows)
    raise ValueError(f"unknown report format {fmt!r}")
