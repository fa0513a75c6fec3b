"""Priority estimation and per-iteration priority maintenance.

A relQuery's priority value is its estimated remaining execution duration in
seconds; lower values are scheduled first.  The dynamic updater re-estimates
priorities each iteration by decomposing the relQuery remainder into the
prefill/decode batches it would need (under the engine's batching constraints)
and summing the linear duration predictions, with two shortcuts: fully-waiting
relQueries reuse their previous value, and uncached-token counts are
approximated from a sampled cache-miss ratio.  A starvation override forces
long-waiting relQueries to the front of the queue.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .cost_model import LinearCostModel, predict_decode, predict_prefill
from .prefix_cache import PrefixCache, sample_cache_miss_ratio, utok_approx
from .workload import RelQuery, Request


class InfeasibleRequestError(ValueError):
    """A single request cannot fit the accelerator capacity."""


@dataclass(frozen=True)
class SchedulerConstraints:
    cap: int                    # max tokens resident on the accelerator
    max_num_seqs: int           # max requests per decode batch (mns)
    max_num_batched_tokens: int  # max tokens per prefill batch (mnbt)

    def __post_init__(self):
        if min(self.cap, self.max_num_seqs, self.max_num_batched_tokens) <= 0:
            raise ValueError("constraints must be positive")
        if self.max_num_batched_tokens > self.cap:
            raise ValueError("max_num_batched_tokens must not exceed cap")


@dataclass(frozen=True)
class PrefillBatch:
    requests: tuple[Request, ...]
    uncached_tokens: int

    @property
    def num_requests(self) -> int:
        return len(self.requests)


@dataclass(frozen=True)
class DecodeBatch:
    requests: tuple[Request, ...]

    @property
    def num_requests(self) -> int:
        return len(self.requests)


@dataclass
class PriorityRecord:
    rel_id: int
    value: float
    iteration_computed: int
    reused: bool = False
    starvation_override: bool = False


@dataclass(frozen=True)
class RemainderItem:
    """One unfinished request of a relQuery remainder, as the estimator sees it."""

    request: Request
    utok: int       # uncached input tokens still to prefill (0 if prefilled)
    remaining: int  # decode iterations still to run (output_limit - generated)
    prefilled: bool


def remainder_items(
    relquery: RelQuery, utok_of: Callable[[Request], int]
) -> list[RemainderItem]:
    """Live requests of a relQuery with the utok values the estimator will use."""
    items = []
    for r in relquery.requests:
        remaining = r.output_limit - r.generated
        if r.done or (r.prefilled and remaining <= 0):
            continue
        items.append(
            RemainderItem(
                request=r,
                utok=0 if r.prefilled else utok_of(r),
                remaining=remaining,
                prefilled=r.prefilled,
            )
        )
    return items


def batch_decompose(
    items: Sequence[RemainderItem], constraints: SchedulerConstraints
) -> tuple[list[PrefillBatch], list[DecodeBatch]]:
    """Decompose a relQuery remainder into the batches needed to finish it.

    Requests accumulate into the current prefill batch ``p`` and decode batch
    ``d``.  When the next request would exceed the resident-token capacity or
    the decode batch size, the segment is flushed: ``p`` joins the prefill
    list, ``d`` is replayed once per remaining decode iteration (requests drop
    out at their own remaining depth), and the token accumulator resets since
    the flushed segment runs to completion.  Exceeding only the prefill batch
    token bound flushes ``p`` alone.  Already-prefilled requests carry utok 0
    and join only decode batches.
    """
    cap, mns, mnbt = (
        constraints.cap,
        constraints.max_num_seqs,
        constraints.max_num_batched_tokens,
    )
    prefills: list[PrefillBatch] = []
    decodes: list[DecodeBatch] = []
    p: list[Request] = []
    p_utok = 0
    d: list[RemainderItem] = []
    accum = 0

    def flush_segment():
        nonlocal p, p_utok, d, accum
        if p:
            prefills.append(PrefillBatch(tuple(p), p_utok))
        if d:
            max_rem = max(it.remaining for it in d)
            for depth in range(1, max_rem + 1):
                decodes.append(
                    DecodeBatch(
                        tuple(it.request for it in d if it.remaining >= depth)
                    )
                )
        p, p_utok, d, accum = [], 0, [], 0

    for it in items:
        if it.utok > cap:
            raise InfeasibleRequestError(
                f"request {it.request.rel_id}/{it.request.req_id}: "
                f"{it.utok} uncached tokens exceed cap {cap}"
            )
        if it.utok + accum > cap or len(d) + 1 > mns:
            flush_segment()
        if it.utok > 0 and it.utok + p_utok > mnbt:
            if p:
                prefills.append(PrefillBatch(tuple(p), p_utok))
            p, p_utok = [], 0
        if not it.prefilled:
            p.append(it.request)
            p_utok += it.utok
        if it.remaining > 0:
            d.append(it)
        accum += it.utok
    flush_segment()
    return prefills, decodes


def pem(
    items: Sequence[RemainderItem],
    constraints: SchedulerConstraints,
    model: LinearCostModel,
) -> float:
    """Estimated remaining duration: sum of predicted batch durations.

    Computes the decomposition's cost without materializing decode batches:
    within a segment the decode cost is alpha_d * (total remaining iterations)
    + beta_d * (deepest remaining count).
    """
    cap, mns, mnbt = (
        constraints.cap,
        constraints.max_num_seqs,
        constraints.max_num_batched_tokens,
    )
    total = 0.0
    p_utok = 0
    p_nonempty = False
    d_count = 0
    d_rem_sum = 0
    d_rem_max = 0
    accum = 0

    def flush_segment():
        nonlocal total, p_utok, p_nonempty, d_count, d_rem_sum, d_rem_max, accum
        if p_nonempty:
            total += predict_prefill(model, p_utok)
        if d_count:
            total += model.alpha_d * d_rem_sum + model.beta_d * d_rem_max
        p_utok, p_nonempty = 0, False
        d_count, d_rem_sum, d_rem_max = 0, 0, 0
        accum = 0

    for it in items:
        if it.utok > cap:
            raise InfeasibleRequestError(
                f"request {it.request.rel_id}/{it.request.req_id}: "
                f"{it.utok} uncached tokens exceed cap {cap}"
            )
        if it.utok + accum > cap or d_count + 1 > mns:
            flush_segment()
        if it.utok > 0 and it.utok + p_utok > mnbt:
            if p_nonempty:
                total += predict_prefill(model, p_utok)
            p_utok, p_nonempty = 0, False
        if not it.prefilled:
            p_nonempty = True
            p_utok += it.utok
        if it.remaining > 0:
            d_count += 1
            d_rem_sum += it.remaining
            d_rem_max = max(d_rem_max, it.remaining)
        accum += it.utok
    flush_segment()
    return total


def static_req_prio(
    request: Request,
    l1: Callable[[int], float],
    l2: Callable[[int], float],
) -> float:
    """Fixed per-request priority from input and output token counts."""
    return l1(request.tok) + l2(request.output_limit)


def static_relquery_prio(
    relquery: RelQuery,
    l1: Callable[[int], float],
    l2: Callable[[int], float],
) -> float:
    return sum(static_req_prio(r, l1, l2) for r in relquery.requests)


class DynamicPriorityUpdater:
    """Per-iteration priority refresh with reuse shortcut and starvation override."""

    def __init__(
        self,
        constraints: SchedulerConstraints,
        model: LinearCostModel,
        cache: PrefixCache,
        sample_size: int = 8,
        tau: float = math.inf,
        rng: np.random.Generator | None = None,
    ):
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.constraints = constraints
        self.model = model
        self.cache = cache
        self.sample_size = sample_size
        self.tau = tau
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._records: dict[int, PriorityRecord] = {}
        self._seen_last_iteration: set[int] = set()

    def _can_reuse(self, rq: RelQuery) -> bool:
        # "all requests of R_t and R_{t-1} are waiting" holds exactly when no
        # request was ever prefilled and none completed
        if rq.rel_id not in self._records or rq.rel_id not in self._seen_last_iteration:
            return False
        return not any(r.prefilled or r.done for r in rq.requests)

    def estimate(self, rq: RelQuery, iteration: int) -> float:
        """Recompute a relQuery's priority via the estimation model.

        Refreshes the relQuery's sampled cache-miss ratio first; unprefilled
        requests use the approximated uncached-token count.
        """
        live = [r for r in rq.requests if not r.done]
        if not live:
            return 0.0
        unprefilled = [r for r in live if not r.prefilled]
        if unprefilled:
            ratio = sample_cache_miss_ratio(
                self.cache, unprefilled, self.sample_size, self.rng, iteration
            ).ratio
        else:
            ratio = 0.0
        items = remainder_items(rq, lambda r: utok_approx(r, ratio))
        return pem(items, self.constraints, self.model)

    def update(
        self, relqueries: Iterable[RelQuery], iteration: int, clock: float
    ) -> dict[int, PriorityRecord]:
        """Refresh priorities for all unfinished relQueries at iteration start.

        Returns the record per rel_id; each member request's ``priority`` field
        is set to the shared relQuery value.
        """
        relqueries = list(relqueries)
        records: dict[int, PriorityRecord] = {}
        for rq in relqueries:
            if self._can_reuse(rq):
                prev = self._records[rq.rel_id]
                rec = PriorityRecord(
                    rq.rel_id, prev.value, prev.iteration_computed, reused=True
                )
            else:
                rec = PriorityRecord(rq.rel_id, self.estimate(rq, iteration), iteration)
            records[rq.rel_id] = rec
        # starvation override applies to relQueries still wholly waiting
        waiting = [rq for rq in relqueries if not any(r.prefilled for r in rq.requests)]
        apply_starvation_override(waiting, records, self.tau, clock)
        for rq in relqueries:
            value = records[rq.rel_id].value
            for r in rq.requests:
                r.priority = value
        self._records = records
        self._seen_last_iteration = {rq.rel_id for rq in relqueries}
        return records


def apply_starvation_override(
    waiting_relqueries: Iterable[RelQuery],
    records: dict[int, PriorityRecord],
    tau: float,
    clock: float,
) -> set[int]:
    """Zero the priority of relQueries whose per-request waiting time exceeds tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    overridden = set()
    if not math.isfinite(tau):
        return overridden
    for rq in waiting_relqueries:
        unit_waiting = (clock - rq.arrival) / rq.size
        if unit_waiting > tau:
            rec = records[rq.rel_id]
            rec.value = 0.0
            rec.starvation_override = True
            for r in rq.requests:
                r.priority = 0.0
            overridden.add(rq.rel_id)
    return overridden
