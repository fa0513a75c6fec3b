"""Synthetic relational-query workloads and timed arrival traces.

A relational query ("relQuery") is a batch of LLM requests created by filling
one task template with every row of a table.  The simulator never runs a real
model, so tokens are opaque 32-bit IDs; what matters is how many there are and
how much leading structure requests share (template literals plus common
attribute prefixes), because that is what the prefix cache exploits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

VOCAB_SIZE = 2**31

PLACEHOLDER = object()  # sentinel slot type marker (see TemplateSlot)


class QueryType(Enum):
    FILTERING = "filtering"
    CLASSIFICATION = "classification"
    RATING = "rating"
    SUMMARIZATION = "summarization"
    OPEN = "open"


#: Output-token limits per query type.
OUTPUT_LIMITS = {
    QueryType.FILTERING: 5,
    QueryType.CLASSIFICATION: 10,
    QueryType.RATING: 5,
    QueryType.SUMMARIZATION: 50,
    QueryType.OPEN: 100,
}


class SchemaError(ValueError):
    """A template placeholder references an attribute missing from the table."""


@dataclass(frozen=True)
class TaskTemplate:
    """A token-level prompt template: literal token IDs mixed with attribute slots.

    ``slots`` holds ints (literal token IDs) and strings (attribute names).
    """

    slots: tuple
    query_type: QueryType
    output_limit: int

    def __post_init__(self):
        if self.output_limit <= 0:
            raise ValueError("output_limit must be positive")
        if not any(isinstance(s, str) for s in self.slots):
            raise ValueError("template must reference at least one attribute")

    @property
    def attributes(self) -> list[str]:
        return [s for s in self.slots if isinstance(s, str)]

    @property
    def literal_prefix_len(self) -> int:
        """Number of leading literal tokens before the first placeholder."""
        n = 0
        for s in self.slots:
            if isinstance(s, str):
                break
            n += 1
        return n


@dataclass(frozen=True)
class SynthTable:
    """A synthetic table: attribute names and per-row token-ID values.

    ``rows[i][attr]`` is the token sequence for attribute ``attr`` of row ``i``.
    ``shared_prefix_len`` counts the leading tokens common to all values of
    each attribute (tunes the prefix-cache hit ratio of the workload).
    """

    schema: tuple[str, ...]
    rows: tuple
    shared_prefix_len: int = 0

    def __post_init__(self):
        for row in self.rows:
            for attr in self.schema:
                if attr not in row:
                    raise SchemaError(f"row missing attribute {attr!r}")
        if self.rows:
            shortest = min(
                len(row[attr]) for row in self.rows for attr in self.schema
            )
            if self.shared_prefix_len > shortest:
                raise ValueError("shared_prefix_len exceeds shortest value")


@dataclass
class Request:
    """One prompt: an input token sequence plus an output-length budget.

    ``actual_output_len`` is the simulated early-stop point (as if the model
    emitted EOS there); schedulers only ever see ``output_limit``.
    ``generated``, ``priority`` and ``prefilled`` are mutated by the engine.
    """

    rel_id: int
    req_id: int
    tokens: list[int]
    output_limit: int
    actual_output_len: int
    arrival: float = 0.0
    generated: int = 0
    priority: float = 0.0
    prefilled: bool = False

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("request tokens must be non-empty")
        if not (1 <= self.actual_output_len <= self.output_limit):
            raise ValueError("actual_output_len out of range")

    @property
    def tok(self) -> int:
        return len(self.tokens)

    @property
    def done(self) -> bool:
        return self.generated >= self.actual_output_len


@dataclass
class RelQuery:
    rel_id: int
    requests: list[Request]
    output_limit: int
    arrival: float
    #: shared leading-token count recorded at construction (serialized)
    prefix_len: int = 0

    @property
    def size(self) -> int:
        """Original request count, req(R0)."""
        return len(self.requests)


@dataclass
class ArrivalTrace:
    entries: list[RelQuery]
    rate: float
    seed: int

    def __post_init__(self):
        times = [q.arrival for q in self.entries]
        if times != sorted(times):
            raise ValueError("trace entries must be sorted by arrival")

    @property
    def num_requests(self) -> int:
        return sum(q.size for q in self.entries)


def instantiate_relquery(
    table: SynthTable,
    template: TaskTemplate,
    row_range: range,
    rel_id: int,
    arrival: float,
    actual_output_lens: Sequence[int] | None = None,
) -> RelQuery:
    """Fill ``template`` with each row in ``row_range``, one request per row.

    Placeholders are replaced in-place by the row's attribute token sequence,
    so all requests share the template's leading literal tokens.
    """
    for attr in template.attributes:
        if attr not in table.schema:
            raise SchemaError(f"unknown attribute placeholder {attr!r}")
    requests = []
    for j, i in enumerate(row_range):
        row = table.rows[i]
        tokens: list[int] = []
        for s in template.slots:
            if isinstance(s, str):
                tokens.extend(row[s])
            else:
                tokens.append(s)
        out = (
            actual_output_lens[j]
            if actual_output_lens is not None
            else template.output_limit
        )
        requests.append(
            Request(
                rel_id=rel_id,
                req_id=j,
                tokens=tokens,
                output_limit=template.output_limit,
                actual_output_len=out,
                arrival=arrival,
            )
        )
    prefix_len = template.literal_prefix_len
    if prefix_len < len(template.slots) and isinstance(template.slots[prefix_len], str):
        # literal prefix is immediately followed by an attribute slot: the
        # attribute's shared prefix extends the common prefix
        prefix_len += table.shared_prefix_len
    return RelQuery(
        rel_id=rel_id,
        requests=requests,
        output_limit=template.output_limit,
        arrival=arrival,
        prefix_len=prefix_len,
    )


@dataclass
class TraceConfig:
    num_relqueries: int = 100
    size_range: tuple[int, int] = (1, 100)
    rate: float = 1.0
    mean_input_len: int = 200
    #: if set, overrides the query-type output limit for every relQuery
    output_limit: int | None = None
    #: fraction of the mean input length shared across a relQuery's requests
    shared_fraction: float = 0.40
    seed: int = 0

    def validate(self):
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        lo, hi = self.size_range
        if not (1 <= lo <= hi):
            raise ValueError("size_range must be a non-empty positive range")
        if self.num_relqueries <= 0:
            raise ValueError("num_relqueries must be positive")
        if not (0.0 <= self.shared_fraction < 1.0):
            raise ValueError("shared_fraction must be in [0, 1)")


def _token_stream(seed: int, rel_id: int, stream: int, n: int) -> list[int]:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, rel_id, stream])))
    return rng.integers(0, VOCAB_SIZE, size=n).tolist()


def _materialize_tokens(seed: int, rel_id: int, req_id: int, tok: int, prefix_len: int) -> list[int]:
    """Deterministic token IDs for a request given only its counts.

    The first ``prefix_len`` tokens come from a per-relQuery stream (shared by
    all its requests); the remainder is unique per request.  Trace files store
    counts only and rebuild identical sequences through this function.
    """
    prefix = _token_stream(seed, rel_id, 0, prefix_len)
    suffix = _token_stream(seed, rel_id, req_id + 1, tok - prefix_len)
    return prefix + suffix


def generate_trace(config: TraceConfig) -> ArrivalTrace:
    """Generate a timed trace of relQueries with Poisson arrivals.

    Inter-arrival gaps are i.i.d. exponential(rate); relQuery sizes are uniform
    over ``size_range``; each request's early-stop output length is uniform in
    [max(1, limit // 2), limit].  Deterministic under a fixed seed.
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed])))
    query_types = list(QueryType)
    clock = 0.0
    entries = []
    lo, hi = config.size_range
    for rel_id in range(config.num_relqueries):
        clock += rng.exponential(1.0 / config.rate)
        size = int(rng.integers(lo, hi + 1))
        qt = query_types[rng.integers(0, len(query_types))]
        limit = config.output_limit if config.output_limit is not None else OUTPUT_LIMITS[qt]
        prefix_len = max(1, round(config.shared_fraction * config.mean_input_len))
        suffix_mean = max(1, config.mean_input_len - prefix_len)
        suffix_lens = rng.integers(
            max(1, suffix_mean // 2), suffix_mean + suffix_mean // 2 + 1, size=size
        )
        out_lens = rng.integers(max(1, limit // 2), limit + 1, size=size)

        # build the table + template so construction goes through the real
        # substitution path; token IDs come from the count-keyed streams so a
        # serialized trace reloads to identical sequences
        shared = _token_stream(config.seed, rel_id, 0, prefix_len)
        lit_len = max(1, prefix_len // 2)
        literals = shared[:lit_len]
        value_shared = shared[lit_len:]
        rows = tuple(
            {
                "value": value_shared
                + _token_stream(config.seed, rel_id, i + 1, int(suffix_lens[i]))
            }
            for i in range(size)
        )
        table = SynthTable(
            schema=("value",), rows=rows, shared_prefix_len=len(value_shared)
        )
        template = TaskTemplate(
            slots=tuple(literals) + ("value",), query_type=qt, output_limit=limit
        )
        rq = instantiate_relquery(
            table,
            template,
            range(size),
            rel_id=rel_id,
            arrival=clock,
            actual_output_lens=[int(x) for x in out_lens],
        )
        entries.append(rq)
    return ArrivalTrace(entries=entries, rate=config.rate, seed=config.seed)


# ---------------------------------------------------------------------------
# Trace serialization (line-delimited JSON; see docs/trace-schema.md)
# ---------------------------------------------------------------------------

def save_trace(trace: ArrivalTrace, path: str | Path) -> None:
    """Write one JSON record per relQuery.

    Token IDs are not stored; per-request counts plus the trace seed
    reconstruct identical sequences on load.
    """
    path = Path(path)
    with path.open("w") as f:
        header = {"schema": "relsim-trace-v1", "rate": trace.rate, "seed": trace.seed}
        f.write(json.dumps(header) + "\n")
        for q in trace.entries:
            rec = {
                "rel_id": q.rel_id,
                "arrival_s": q.arrival,
                "size": q.size,
                "output_limit": q.output_limit,
                "prefix_len": q.prefix_len,
                "requests": [
                    {"tok": r.tok, "prefix_len": q.prefix_len, "out": r.actual_output_len}
                    for r in q.requests
                ],
            }
            f.write(json.dumps(rec) + "\n")


def load_trace(path: str | Path) -> ArrivalTrace:
    path = Path(path)
    with path.open() as f:
        header = json.loads(f.readline())
        if header.get("schema") != "relsim-trace-v1":
            raise ValueError(f"unrecognized trace file {path}")
        seed = header["seed"]
        entries = []
        for line in f:
            rec = json.loads(line)
            rel_id = rec["rel_id"]
            requests = [
                Request(
                    rel_id=rel_id,
                    req_id=i,
                    tokens=_materialize_tokens(
                        seed, rel_id, i, rr["tok"], rr["prefix_len"]
                    ),
                    output_limit=rec["output_limit"],
                    actual_output_len=rr["out"],
                    arrival=rec["arrival_s"],
                )
                for i, rr in enumerate(rec["requests"])
            ]
            entries.append(
                RelQuery(
                    rel_id=rel_id,
                    requests=requests,
                    output_limit=rec["output_limit"],
                    arrival=rec["arrival_s"],
                    prefix_len=rec["prefix_len"],
                )
            )
    return ArrivalTrace(entries=entries, rate=header["rate"], seed=seed)


def load_preset(name: str) -> dict:
    """Load a named workload preset (table-like mean lengths) from package data."""
    preset_dir = Path(__file__).parent / "presets"
    path = preset_dir / f"{name}.json"
    if not path.exists():
        available = sorted(p.stem for p in preset_dir.glob("*.json"))
        raise SchemaError(f"unknown preset {name!r}; available: {available}")
    return json.loads(path.read_text())


def config_from_preset(name: str, **overrides) -> TraceConfig:
    preset = load_preset(name)
    kwargs = {"mean_input_len": preset["mean_input_len"]}
    kwargs.update(overrides)
    return TraceConfig(**kwargs)
