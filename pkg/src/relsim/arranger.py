"""Per-iteration choice between the candidate prefill and decode batches.

Each iteration the engine builds two candidates: a decode batch holding every
running request (decoding is memory-bound, so bigger is better) and a prefill
batch drawn from the head of the priority-sorted waiting queue, restricted to
a single relQuery so the transition between relQueries stays visible.  The
choice between them falls into three cases by comparing the minimum priority
value on each side:

* preemption (waiting side strictly smaller): run the prefill, pausing the
  longer running work;
* internal (both minima from the same relQuery): run the prefill to grow that
  relQuery's own decode parallelism;
* transitional (running side smaller): the running relQuery is almost done and
  the trade-off is quantitative -- project the latency added to running
  relQueries against the latency saved for waiting ones, and prefill only if
  the projected net change is negative.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .cost_model import LinearCostModel, predict_prefill
from .priority import DecodeBatch, PrefillBatch, SchedulerConstraints
from .workload import RelQuery, Request


class Action(Enum):
    EXECUTE_PREFILL = "prefill"
    EXECUTE_DECODE = "decode"
    IDLE = "idle"


class Case(Enum):
    PREEMPTION = "preempt"
    INTERNAL = "internal"
    TRANSITIONAL = "transitional"
    FORCED = "forced"  # one candidate empty (or idle)


@dataclass(frozen=True)
class CandidatePair:
    decode_candidate: DecodeBatch
    prefill_candidate: PrefillBatch
    m_plus: float | None   # min priority in the decode candidate
    m_minus: float | None  # min priority in the prefill candidate
    prefill_blocked: bool = False  # head request infeasible against cap


@dataclass(frozen=True)
class DeltaProjection:
    delta_plus: float   # latency added to running relQueries (>= 0)
    delta_minus: float  # latency removed from waiting ones (stored <= 0)

    @property
    def delta_total(self) -> float:
        return self.delta_plus + self.delta_minus


@dataclass(frozen=True)
class Decision:
    action: Action
    case: Case
    m_plus: float | None = None
    m_minus: float | None = None
    projection: DeltaProjection | None = None


def build_decode_candidate(running: list[Request], max_num_seqs: int) -> DecodeBatch:
    """All running requests, truncated oldest-first when over the batch bound."""
    if len(running) > max_num_seqs:
        running = sorted(running, key=lambda r: (r.arrival, r.rel_id, r.req_id))[
            :max_num_seqs
        ]
    return DecodeBatch(tuple(running))


def build_prefill_candidate(
    waiting_head: list[Request],
    constraints: SchedulerConstraints,
    utok_of,
    running_count: int,
    kv_headroom_tokens: int,
) -> tuple[PrefillBatch, bool]:
    """Pop head-of-queue requests of one relQuery while constraints allow.

    ``waiting_head`` must be the leading run of same-rel_id requests in the
    priority-sorted waiting queue.  Returns (batch, blocked): blocked means
    even the head request cannot fit the KV capacity headroom, so the engine
    must drain running work first.  A single request whose uncached tokens
    exceed the prefill token bound is still admitted alone (the bound caps
    batching, it cannot shrink a request).
    """
    taken: list[Request] = []
    utok_sum = 0
    kv_need = 0
    for r in waiting_head:
        utok = utok_of(r)
        kv = r.tok + r.output_limit
        if taken and utok_sum + utok > constraints.max_num_batched_tokens:
            break
        if running_count + len(taken) + 1 > constraints.max_num_seqs:
            break
        if kv_need + kv > kv_headroom_tokens:
            break
        taken.append(r)
        utok_sum += utok
        kv_need += kv
    blocked = not taken and bool(waiting_head)
    return PrefillBatch(tuple(taken), utok_sum), blocked


def project_delta(
    prefill_candidate: PrefillBatch,
    prefill_output_limit: int,
    running_relqueries: list[RelQuery],
    num_waiting_relqueries: int,
    model: LinearCostModel,
) -> DeltaProjection:
    """Projected latency change from running the prefill ahead of the decode.

    Added latency: every running relQuery is paused for the prefill itself and
    its future decode batches grow by the prefilled requests for as long as
    both live.  Removed latency: each waiting relQuery saves the decode-batch
    fixed cost over the iterations where decoding is combined instead of
    serialized.  A negative total favors the prefill.
    """
    l_prefill = predict_prefill(model, prefill_candidate.uncached_tokens)
    ol_p = prefill_output_limit
    delta_plus = l_prefill * len(running_relqueries)
    for rq in running_relqueries:
        delta_plus += (
            model.alpha_d
            * prefill_candidate.num_requests
            * min(rq.output_limit, ol_p)
        )
    max_ol_running = max((rq.output_limit for rq in running_relqueries), default=0)
    delta_minus = -(
        num_waiting_relqueries * model.beta_d * min(ol_p, max_ol_running)
    )
    return DeltaProjection(delta_plus=delta_plus, delta_minus=delta_minus)


def decide_next(
    pair: CandidatePair,
    projection: DeltaProjection | None = None,
    force: str | None = None,
) -> Decision:
    """Pick the batch to execute this iteration.

    ``force`` overrides only the transitional case: "prefill" and "decode"
    reproduce the static prefill-first / decode-first arrangements.
    """
    has_p = pair.prefill_candidate.num_requests > 0
    has_d = pair.decode_candidate.num_requests > 0
    if not has_p and not has_d:
        return Decision(Action.IDLE, Case.FORCED)
    if not has_d:
        return Decision(Action.EXECUTE_PREFILL, Case.FORCED, pair.m_plus, pair.m_minus)
    if not has_p:
        return Decision(Action.EXECUTE_DECODE, Case.FORCED, pair.m_plus, pair.m_minus)

    d_min = min(pair.decode_candidate.requests, key=lambda r: r.priority)
    p_min = min(pair.prefill_candidate.requests, key=lambda r: r.priority)
    # "equal minima" means both sides belong to the same relQuery; float
    # equality across distinct relQueries is an accident, treated as transitional
    if d_min.rel_id == p_min.rel_id:
        return Decision(Action.EXECUTE_PREFILL, Case.INTERNAL, pair.m_plus, pair.m_minus)
    if pair.m_plus > pair.m_minus:
        return Decision(Action.EXECUTE_PREFILL, Case.PREEMPTION, pair.m_plus, pair.m_minus)
    if force == "prefill":
        return Decision(Action.EXECUTE_PREFILL, Case.TRANSITIONAL, pair.m_plus, pair.m_minus, projection)
    if force == "decode":
        return Decision(Action.EXECUTE_DECODE, Case.TRANSITIONAL, pair.m_plus, pair.m_minus, projection)
    if projection is not None and projection.delta_total < 0:
        return Decision(Action.EXECUTE_PREFILL, Case.TRANSITIONAL, pair.m_plus, pair.m_minus, projection)
    return Decision(Action.EXECUTE_DECODE, Case.TRANSITIONAL, pair.m_plus, pair.m_minus, projection)
