"""Latency decomposition and cross-run summaries.

A relQuery's total latency splits exactly into waiting (arrival to first
prefill start), core running (first prefill start to last prefill end) and
tail running (last prefill end to last decode end).  Summaries aggregate
per-relQuery latencies by (policy, rate) and report speedups against a named
baseline policy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .engine import RunResult, TimestampLedger


class IncompleteLedgerError(ValueError):
    pass


@dataclass(frozen=True)
class LatencyBreakdown:
    rel_id: int
    waiting_s: float
    core_s: float
    tail_s: float

    @property
    def total_s(self) -> float:
        return self.waiting_s + self.core_s + self.tail_s


def decompose(rel_id: int, ledger: TimestampLedger) -> LatencyBreakdown:
    if (
        ledger.first_prefill_start is None
        or ledger.last_prefill_end is None
        or ledger.last_decode_end is None
    ):
        raise IncompleteLedgerError(f"relQuery {rel_id}: missing timestamps")
    return LatencyBreakdown(
        rel_id=rel_id,
        waiting_s=ledger.first_prefill_start - ledger.arrival,
        core_s=ledger.last_prefill_end - ledger.first_prefill_start,
        tail_s=ledger.last_decode_end - ledger.last_prefill_end,
    )


@dataclass(frozen=True)
class SummaryRow:
    policy: str
    rate: float
    num_runs: int
    avg_latency_s: float
    max_latency_s: float
    avg_waiting_share: float
    avg_core_share: float
    avg_tail_share: float
    avg_unit_waiting_time: float
    speedup_vs_baseline: float


@dataclass
class SummaryTable:
    baseline: str
    rows: list[SummaryRow]

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(
                ["policy", "rate", "num_runs", "avg_latency_s", "max_latency_s",
                 "avg_waiting_share", "avg_core_share", "avg_tail_share",
                 "avg_unit_waiting_time", "speedup_vs_" + self.baseline]
            )
            for r in self.rows:
                w.writerow(
                    [r.policy, r.rate, r.num_runs,
                     repr(r.avg_latency_s), repr(r.max_latency_s),
                     repr(r.avg_waiting_share), repr(r.avg_core_share),
                     repr(r.avg_tail_share), repr(r.avg_unit_waiting_time),
                     repr(r.speedup_vs_baseline)]
                )

    def write_long_csv(self, path: str | Path) -> None:
        """Plot-ready long format: policy, rate, metric, value."""
        metrics = [
            "avg_latency_s", "max_latency_s", "avg_waiting_share",
            "avg_core_share", "avg_tail_share", "avg_unit_waiting_time",
            "speedup_vs_baseline",
        ]
        with Path(path).open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["policy", "rate", "metric", "value"])
            for r in self.rows:
                for m in metrics:
                    w.writerow([r.policy, r.rate, m, repr(getattr(r, m))])


def summarize(runs: list[RunResult], baseline: str = "fcfs") -> SummaryTable:
    """Aggregate runs by (policy, rate); averages are over relQueries."""
    if not runs:
        raise ValueError("need at least one run")
    groups: dict[tuple[str, float], list[RunResult]] = {}
    for run in runs:
        groups.setdefault((run.policy, run.rate), []).append(run)
    # compared groups must cover the same relQueries
    key_sets = {tuple(sorted(r.ledgers.keys())) for r in runs}
    if len(key_sets) > 1:
        raise ValueError("runs cover different relQuery sets; traces mismatch")

    stats: dict[tuple[str, float], dict] = {}
    for key, group in sorted(groups.items()):
        totals, maxima = [], []
        w_sh, c_sh, t_sh, unit_w = [], [], [], []
        for run in group:
            for rel_id, led in run.ledgers.items():
                b = decompose(rel_id, led)
                totals.append(b.total_s)
                maxima.append(b.total_s)
                if b.total_s > 0:
                    w_sh.append(b.waiting_s / b.total_s)
                    c_sh.append(b.core_s / b.total_s)
                    t_sh.append(b.tail_s / b.total_s)
                unit_w.append(b.waiting_s / run.relquery_sizes[rel_id])
        stats[key] = {
            "num_runs": len(group),
            "avg": sum(totals) / len(totals),
            "max": max(maxima),
            "w": sum(w_sh) / len(w_sh) if w_sh else 0.0,
            "c": sum(c_sh) / len(c_sh) if c_sh else 0.0,
            "t": sum(t_sh) / len(t_sh) if t_sh else 0.0,
            "uw": sum(unit_w) / len(unit_w),
        }

    rows = []
    for (policy, rate), s in sorted(stats.items()):
        base = stats.get((baseline, rate))
        speedup = base["avg"] / s["avg"] if base else float("nan")
        rows.append(
            SummaryRow(
                policy=policy,
                rate=rate,
                num_runs=s["num_runs"],
                avg_latency_s=s["avg"],
                max_latency_s=s["max"],
                avg_waiting_share=s["w"],
                avg_core_share=s["c"],
                avg_tail_share=s["t"],
                avg_unit_waiting_time=s["uw"],
                speedup_vs_baseline=speedup,
            )
        )
    return SummaryTable(baseline=baseline, rows=rows)
