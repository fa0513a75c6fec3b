"""Scheduling simulator for templated LLM workloads over relational tables."""

from .cost_model import LinearCostModel, fit, predict_decode, predict_prefill, world_preset
from .engine import EngineConfig, RunResult, run
from .prefix_cache import PrefixCache, sample_cache_miss_ratio, utok_approx
from .priority import (
    DynamicPriorityUpdater,
    SchedulerConstraints,
    batch_decompose,
    pem,
    static_req_prio,
)
from .report import decompose, summarize
from .workload import (
    ArrivalTrace,
    RelQuery,
    Request,
    SynthTable,
    TaskTemplate,
    TraceConfig,
    generate_trace,
    instantiate_relquery,
    load_trace,
    save_trace,
)

__version__ = "0.1.0"
