"""Trace-driven simulator for cache-aware expert routing in MoE inference."""

__version__ = "0.1.0"

from .cache import ExpertCache, NextUse, brute_force_optimal_misses, finalize_lifetimes
from .errors import (ConfigError, EmptyCache, EmptyReport, FormatError, InvalidExpert, InvalidLogits,
                     InvalidParam, InvalidSubset, MoECacheError, TooLarge, UnsupportedCombination)
from .routing import (PRESETS, DeltaMode, DeltaTracker, ModelConfig, Selection, Strategy, promote,
                      rank, route, route_cache_prior, route_cumsum, route_max_rank, route_original,
                      route_pruned, softmax, swap_rank_random)
from .sim import (LatencyModel, RunConfig, RunMetrics, SweepResult, cache_size_ablation, compare,
                  estimate_latency, run, sweep)
from .trace import (LogitTrace, SynthParams, TraceHeader, generate_synthetic, import_jsonl,
                    read_trace, write_trace)
