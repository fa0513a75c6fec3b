"""Deterministic discrete-event simulation of the serving loop.

Each iteration admits pending arrivals, lets the active policy refresh
priorities and pick the next batch, then advances the clock by the
ground-truth duration of that batch.  Prefill moves requests from the waiting
queue to the running queue and populates the prefix cache; decode generates
one token per running request and retires requests that hit their simulated
EOS point.  Per-relQuery timestamps are recorded for the latency breakdown.

The scheduler's belief (fitted cost model, sampled cache-miss ratios) is kept
separate from the world model that actually advances the clock, so estimator
error is a measurable quantity rather than an artifact.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arranger import (
    Action,
    CandidatePair,
    Case,
    Decision,
    build_decode_candidate,
    build_prefill_candidate,
    decide_next,
    project_delta,
)
from .cost_model import LinearCostModel, predict_decode, predict_prefill
from .prefix_cache import PrefixCache
from .priority import (
    DynamicPriorityUpdater,
    InfeasibleRequestError,
    SchedulerConstraints,
    static_relquery_prio,
)
from .workload import ArrivalTrace, RelQuery, Request

POLICIES = ("fcfs", "sp", "relserve", "relserve-pp", "relserve-dp")


class SimulationAborted(RuntimeError):
    pass


@dataclass
class TimestampLedger:
    arrival: float
    first_prefill_start: float | None = None
    last_prefill_end: float | None = None
    last_decode_end: float | None = None

    @property
    def complete(self) -> bool:
        return self.last_decode_end is not None


@dataclass
class DecisionLogEntry:
    iteration: int
    clock: float
    case: str
    m_plus: float | None
    m_minus: float | None
    delta_plus: float | None
    delta_minus: float | None
    delta_total: float | None
    action: str


@dataclass
class RunResult:
    policy: str
    rate: float
    seed: int
    ledgers: dict[int, TimestampLedger]
    relquery_sizes: dict[int, int]
    decision_log: list[DecisionLogEntry]
    iterations: int
    sim_duration: float       # final simulation clock, seconds
    dpu_wall_s: float         # measured wall time inside priority updates
    aba_wall_s: float         # measured wall time inside batch arrangement
    cache_hit_tokens: int
    cache_miss_tokens: int

    @property
    def cache_hit_ratio(self) -> float:
        total = self.cache_hit_tokens + self.cache_miss_tokens
        return self.cache_hit_tokens / total if total else 0.0

    @property
    def scheduler_overhead_fraction(self) -> float:
        """Scheduler wall time relative to the simulated serving duration."""
        if self.sim_duration <= 0:
            return 0.0
        return (self.dpu_wall_s + self.aba_wall_s) / self.sim_duration

    def write_relquery_csv(self, path: str | Path) -> None:
        from .report import decompose

        with Path(path).open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(
                ["rel_id", "size", "arrival_s", "waiting_s", "core_s", "tail_s", "total_s"]
            )
            for rel_id in sorted(self.ledgers):
                led = self.ledgers[rel_id]
                b = decompose(rel_id, led)
                w.writerow(
                    [
                        rel_id,
                        self.relquery_sizes[rel_id],
                        repr(led.arrival),
                        repr(b.waiting_s),
                        repr(b.core_s),
                        repr(b.tail_s),
                        repr(b.total_s),
                    ]
                )

    def write_decision_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(
                ["iteration", "clock_s", "case", "m_plus", "m_minus",
                 "delta_plus", "delta_minus", "delta_total", "action"]
            )
            for e in self.decision_log:
                w.writerow(
                    [e.iteration, repr(e.clock), e.case, e.m_plus, e.m_minus,
                     e.delta_plus, e.delta_minus, e.delta_total, e.action]
                )


@dataclass
class EngineConfig:
    constraints: SchedulerConstraints = field(
        default_factory=lambda: SchedulerConstraints(
            cap=200_000, max_num_seqs=256, max_num_batched_tokens=8192
        )
    )
    #: world model noise: stddev as a fraction of the batch duration
    noise_sigma: float = 0.0
    sample_size: int = 8
    tau: float = math.inf
    block_size: int = 16
    capacity_blocks: int = 8192
    iteration_limit: int = 5_000_000
    log_decisions: bool = True
    #: (L1, L2) mappings for the static-priority baseline; default: the
    #: policy model's slopes applied to input and output token counts
    sp_priority_fns: tuple | None = None


class _WaitingEntry:
    """A relQuery's not-yet-prefilled requests, queued in priority order."""

    __slots__ = ("relquery", "pending", "arrival_index")

    def __init__(self, relquery: RelQuery, arrival_index: int):
        self.relquery = relquery
        self.pending: list[Request] = list(relquery.requests)
        self.arrival_index = arrival_index

    @property
    def priority(self) -> float:
        return self.pending[0].priority if self.pending else 0.0

    def sort_key(self):
        return (self.priority, self.relquery.arrival, self.relquery.rel_id)


class Engine:
    def __init__(
        self,
        trace: ArrivalTrace,
        policy: str,
        world_model: LinearCostModel,
        config: EngineConfig | None = None,
        policy_model: LinearCostModel | None = None,
        seed: int = 0,
    ):
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}; choose from {POLICIES}")
        self.trace = trace
        self.policy = policy
        self.world_model = world_model
        # schedulers see the fitted model; default to a perfect belief
        self.policy_model = policy_model if policy_model is not None else world_model
        self.config = config or EngineConfig()
        self.seed = seed
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7]))

        c = self.config
        self.cache = PrefixCache(c.block_size, c.capacity_blocks)
        self.clock = 0.0
        self.iteration = 0
        self.waiting: list[_WaitingEntry] = []
        self.running: list[Request] = []
        self.kv_reserved = 0  # tokens committed by admitted requests (tok + limit)
        self.ledgers: dict[int, TimestampLedger] = {}
        self.live_relqueries: dict[int, RelQuery] = {}
        self.decision_log: list[DecisionLogEntry] = []
        self._next_arrival_idx = 0
        self._arrivals = sorted(
            trace.entries, key=lambda q: (q.arrival, q.rel_id)
        )
        self.dpu_wall = 0.0
        self.aba_wall = 0.0

        if self.policy in ("relserve", "relserve-pp", "relserve-dp"):
            self.dpu = DynamicPriorityUpdater(
                c.constraints,
                self.policy_model,
                self.cache,
                sample_size=c.sample_size,
                tau=c.tau,
                rng=np.random.default_rng(np.random.SeedSequence([seed, 0xD9])),
            )
        else:
            self.dpu = None

        for rq in trace.entries:
            for r in rq.requests:
                # traces are reusable across runs: clear simulation state
                r.generated = 0
                r.priority = 0.0
                r.prefilled = False
                if r.tok + r.output_limit > c.constraints.cap:
                    raise InfeasibleRequestError(
                        f"request {rq.rel_id}/{r.req_id} needs "
                        f"{r.tok + r.output_limit} KV tokens > cap {c.constraints.cap}"
                    )

    # -- queue management ---------------------------------------------------

    def admit_arrivals(self) -> int:
        """Move every trace entry with arrival <= clock into the waiting queue."""
        admitted = 0
        while (
            self._next_arrival_idx < len(self._arrivals)
            and self._arrivals[self._next_arrival_idx].arrival <= self.clock
        ):
            rq = self._arrivals[self._next_arrival_idx]
            self._next_arrival_idx += 1
            self.waiting.append(_WaitingEntry(rq, arrival_index=self._next_arrival_idx))
            self.ledgers[rq.rel_id] = TimestampLedger(arrival=rq.arrival)
            self.live_relqueries[rq.rel_id] = rq
            if self.policy == "sp":
                if self.config.sp_priority_fns is not None:
                    l1, l2 = self.config.sp_priority_fns
                else:
                    m = self.policy_model
                    l1 = lambda tok: m.alpha_p * tok
                    l2 = lambda ol: m.alpha_d * ol
                prio = static_relquery_prio(rq, l1, l2)
                for r in rq.requests:
                    r.priority = prio
            elif self.policy == "fcfs":
                for r in rq.requests:
                    r.priority = 0.0  # arrival-time tie-break yields FCFS order
            admitted += 1
        return admitted

    @property
    def next_arrival(self) -> float | None:
        if self._next_arrival_idx < len(self._arrivals):
            return self._arrivals[self._next_arrival_idx].arrival
        return None

    def _update_priorities(self) -> None:
        if self.dpu is not None:
            self.dpu.update(self.live_relqueries.values(), self.iteration, self.clock)
        self.waiting = [e for e in self.waiting if e.pending]
        self.waiting.sort(key=_WaitingEntry.sort_key)

    # -- candidate construction and execution -------------------------------

    def _build_candidates(self) -> CandidatePair:
        c = self.config.constraints
        decode_cand = build_decode_candidate(self.running, c.max_num_seqs)
        head: list[Request] = []
        if self.waiting:
            head = list(self.waiting[0].pending)
        prefill_cand, blocked = build_prefill_candidate(
            head,
            c,
            lambda r: self.cache.match_uncached(r, refresh=False),
            running_count=len(self.running),
            kv_headroom_tokens=c.cap - self.kv_reserved,
        )
        m_plus = (
            min(r.priority for r in decode_cand.requests)
            if decode_cand.requests
            else None
        )
        m_minus = (
            min(r.priority for r in prefill_cand.requests)
            if prefill_cand.requests
            else None
        )
        return CandidatePair(decode_cand, prefill_cand, m_plus, m_minus, blocked)

    def _world_duration(self, base: float) -> float:
        if self.config.noise_sigma > 0:
            base = max(0.0, base * (1.0 + self.config.noise_sigma * self.rng.standard_normal()))
        return base

    def _execute_prefill(self, batch) -> float:
        start = self.clock
        utok_total = 0
        rel_ids = set()
        # the cache updates online: later requests in the same batch reuse
        # blocks inserted by earlier ones (shared prefixes are computed once)
        for r in batch.requests:
            utok_total += self.cache.match_uncached(r, refresh=True, record=True)
            self.cache.insert(r)
            rel_ids.add(r.rel_id)
        duration = self._world_duration(predict_prefill(self.world_model, utok_total))
        for r in batch.requests:
            r.prefilled = True
            self.running.append(r)
            self.kv_reserved += r.tok + r.output_limit
        entry = self.waiting[0]
        taken = set(id(r) for r in batch.requests)
        entry.pending = [r for r in entry.pending if id(r) not in taken]
        if not entry.pending:
            self.waiting.pop(0)
        self.clock += duration
        for rel_id in rel_ids:
            led = self.ledgers[rel_id]
            if led.first_prefill_start is None:
                led.first_prefill_start = start
            led.last_prefill_end = self.clock
        return duration

    def _execute_decode(self, batch) -> float:
        duration = self._world_duration(
            predict_decode(self.world_model, batch.num_requests)
        )
        self.clock += duration
        finished_rels = set()
        done_ids = set()
        for r in batch.requests:
            r.generated += 1
            if r.done:
                done_ids.add(id(r))
                self.kv_reserved -= r.tok + r.output_limit
                rq = self.live_relqueries[r.rel_id]
                if all(x.done for x in rq.requests):
                    finished_rels.add(r.rel_id)
        if done_ids:
            self.running = [r for r in self.running if id(r) not in done_ids]
        for rel_id in finished_rels:
            self.ledgers[rel_id].last_decode_end = self.clock
            del self.live_relqueries[rel_id]
        return duration

    @property
    def kv_resident_tokens(self) -> int:
        return sum(r.tok + r.generated for r in self.running)

    # -- main loop -----------------------------------------------------------

    def run(self) -> RunResult:
        force = {"relserve-pp": "prefill", "relserve-dp": "decode"}.get(self.policy)
        prefill_first = self.policy in ("fcfs", "sp")
        log = self.config.log_decisions
        while self.live_relqueries or self.next_arrival is not None:
            if self.iteration >= self.config.iteration_limit:
                raise SimulationAborted(
                    f"iteration limit {self.config.iteration_limit} exceeded"
                )
            self.admit_arrivals()
            t0 = time.perf_counter()
            self._update_priorities()
            self.dpu_wall += time.perf_counter() - t0

            t0 = time.perf_counter()
            pair = self._build_candidates()
            if prefill_first:
                if pair.prefill_candidate.requests:
                    decision = Decision(Action.EXECUTE_PREFILL, Case.FORCED,
                                        pair.m_plus, pair.m_minus)
                elif pair.decode_candidate.requests:
                    decision = Decision(Action.EXECUTE_DECODE, Case.FORCED,
                                        pair.m_plus, pair.m_minus)
                else:
                    decision = Decision(Action.IDLE, Case.FORCED)
            else:
                projection = None
                if (
                    pair.prefill_candidate.requests
                    and pair.decode_candidate.requests
                    and pair.m_plus is not None
                    and pair.m_minus is not None
                    and pair.m_plus <= pair.m_minus
                ):
                    head_rq = self.waiting[0].relquery
                    running_rels = sorted(
                        {r.rel_id for r in pair.decode_candidate.requests}
                    )
                    projection = project_delta(
                        pair.prefill_candidate,
                        head_rq.output_limit,
                        [self.live_relqueries[i] for i in running_rels],
                        num_waiting_relqueries=len(self.waiting),
                        model=self.policy_model,
                    )
                decision = decide_next(pair, projection, force=force)
            self.aba_wall += time.perf_counter() - t0

            if log:
                proj = decision.projection
                self.decision_log.append(
                    DecisionLogEntry(
                        iteration=self.iteration,
                        clock=self.clock,
                        case=decision.case.value,
                        m_plus=decision.m_plus,
                        m_minus=decision.m_minus,
                        delta_plus=proj.delta_plus if proj else None,
                        delta_minus=proj.delta_minus if proj else None,
                        delta_total=proj.delta_total if proj else None,
                        action=decision.action.value,
                    )
                )

            if decision.action is Action.EXECUTE_PREFILL:
                self._execute_prefill(pair.prefill_candidate)
            elif decision.action is Action.EXECUTE_DECODE:
                self._execute_decode(pair.decode_candidate)
            else:
                nxt = self.next_arrival
                if nxt is None:
                    if self.live_relqueries:
                        raise SimulationAborted(
                            "engine idle with live relQueries and no future arrivals"
                        )
                    break
                self.clock = max(self.clock, nxt)
            self.iteration += 1

        return RunResult(
            policy=self.policy,
            rate=self.trace.rate,
            seed=self.seed,
            ledgers=self.ledgers,
            relquery_sizes={q.rel_id: q.size for q in self.trace.entries},
            decision_log=self.decision_log,
            iterations=self.iteration,
            sim_duration=self.clock,
            dpu_wall_s=self.dpu_wall,
            aba_wall_s=self.aba_wall,
            cache_hit_tokens=self.cache.hit_tokens_total,
            cache_miss_tokens=self.cache.miss_tokens_total,
        )


def run(
    trace: ArrivalTrace,
    policy: str,
    world_model: LinearCostModel,
    config: EngineConfig | None = None,
    policy_model: LinearCostModel | None = None,
    seed: int = 0,
) -> RunResult:
    """Simulate serving the trace under the given policy to completion."""
    return Engine(trace, policy, world_model, config, policy_model, seed).run()
