"""Trace-driven simulation of cache-aware routing.

For every token and MoE layer the engine computes the router ranking,
applies the routing strategy against that layer's cache, performs the batch
access, and accumulates hit/miss, lifetime and quality-proxy statistics.
Shared experts are pinned in memory and never modelled.

The quality axis is the retained probability mass: the original router
probability of the chosen experts divided by that of the original top-K.
It is a proxy only; no model forward pass is run.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .cache import (HIGH_WEIGHT_FIRST, LOW_WEIGHT_FIRST, POLICIES, ExpertCache, LifetimeStats,
                    NextUse, finalize_lifetimes)
from .errors import ConfigError, InvalidParam, UnsupportedCombination
from .routing import DeltaTracker, ModelConfig, Strategy, _Routed, route
from .trace import LogitTrace

PHASES = ("all", "gen-only")
INIT_STATES = ("empty", "random")


@dataclass(frozen=True)
class LatencyModel:
    """Per-token latency: fixed compute time plus one flash load per miss.

    Defaults are order-of-magnitude figures for a phone-class device running
    a 4-bit granular MoE (about 4 MB per expert over UFS storage).
    """
    t_compute: float = 0.1
    t_load: float = 0.003

    def __post_init__(self):
        if self.t_compute < 0 or self.t_load < 0:
            raise InvalidParam("latency model times must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    strategy: Strategy = Strategy()
    policy: str = "lru"
    cache_size: Optional[int] = None  # routed experts per layer; None = N // 2
    phase: str = "all"
    init_cache: str = "empty"
    seed: int = 0
    renormalize: bool = True
    order: str = HIGH_WEIGHT_FIRST
    warmup: int = 0
    latency: LatencyModel = LatencyModel()

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        if self.init_cache not in INIT_STATES:
            raise ConfigError(f"unknown initial cache state {self.init_cache!r}")
        if self.order not in (HIGH_WEIGHT_FIRST, LOW_WEIGHT_FIRST):
            raise ConfigError(f"unknown intra-batch order {self.order!r}")
        if self.cache_size is not None and self.cache_size < 1:
            raise ConfigError("cache size must be >= 1")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if self.policy == "belady" and self.strategy.cache_aware:
            raise UnsupportedCombination(
                f"belady eviction needs the future routing decisions, but {self.strategy.kind} "
                "routing depends on the cache state; use original, prune or swap-random routing")

    def resolved_cache_size(self, model: ModelConfig) -> int:
        return self.cache_size if self.cache_size is not None else max(1, model.num_experts // 2)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self, extra: str = "") -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str) + extra
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class LayerMetrics:
    hits: int = 0
    misses: int = 0
    inactive: int = 0
    steps: int = 0
    swaps: int = 0
    mass_sum: float = 0.0
    lifetimes: LifetimeStats = field(default_factory=lambda: LifetimeStats([]))

    def slots(self, top_k) -> int:
        return top_k * self.steps

    def miss_rate(self, top_k) -> float:
        return self.misses / (top_k * self.steps) if self.steps else 0.0


@dataclass
class RunMetrics:
    """Aggregate outcome of one simulated run.

    ``miss_rate`` divides misses by K slots per step, so pruned slots lower
    it (they need no load) and ``hit_rate`` is its complement.
    ``active_hit_rate`` only looks at experts that were actually selected.
    """
    top_k: int
    num_tokens: int
    num_layers: int
    total_hits: int
    total_misses: int
    total_inactive: int
    miss_rate: float
    hit_rate: float
    active_hit_rate: float
    lifetime_mean: Optional[float]
    lifetime_std: Optional[float]
    lifetime_count: int
    censored_count: int
    censored_mean: Optional[float]
    retained_mass: float
    swap_rate: float
    steady_miss_rate: float
    prompt_miss_rate: Optional[float]
    gen_miss_rate: Optional[float]
    est_token_latency: float
    per_layer: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return self.num_tokens * self.num_layers

    def summary(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("per_layer")
        return d


@dataclass(frozen=True)
class StepRecord:
    token: int
    layer: int
    selection: object
    outcome: object
    cached_before: tuple
    original_top: tuple
    gated: bool  # True when the phase gate forced original routing


def _initial_cache(cache: ExpertCache, n: int, c: int, rng: np.random.Generator):
    cache.fill(rng.choice(n, size=min(c, n), replace=False).tolist(), 0)


def run(trace: LogitTrace, config: RunConfig = RunConfig(), model: Optional[ModelConfig] = None,
        on_step: Optional[Callable[[StepRecord], None]] = None, check: bool = False) -> RunMetrics:
    """Simulate ``config`` over ``trace``; deterministic for a given seed."""
    h = trace.header
    model = model or trace.model()
    if (model.num_layers, model.num_experts, model.top_k) != (h.num_layers, h.experts_per_layer, h.top_k):
        raise ConfigError(
            f"trace shape (layers={h.num_layers}, experts={h.experts_per_layer}, top_k={h.top_k}) "
            f"does not match model {model.name} ({model.num_layers}, {model.num_experts}, {model.top_k})")
    strategy = config.strategy
    strategy.validate(model)
    n, k, layers, tokens = model.num_experts, model.top_k, model.num_layers, h.num_tokens
    c = config.resolved_cache_size(model)
    gated_until = h.prompt_len if config.phase == "gen-only" else 0
    init_rng = np.random.default_rng([config.seed, 0])
    swap_rng = np.random.default_rng([config.seed, 1])
    logits = trace.logits

    planned = None
    next_uses = [None] * layers
    if config.policy == "belady":
        # Routing is cache-independent here, so the full decision stream is known upfront.
        planned = [[route(logits[t, l], None, strategy if t >= gated_until else Strategy(),
                          k, 0.0, swap_rng, config.renormalize)
                    for l in range(layers)] for t in range(tokens)]
        next_uses = [NextUse([planned[t][l].experts for t in range(tokens)]) for l in range(layers)]

    caches = [ExpertCache(c, n, config.policy, config.order, next_uses[l]) for l in range(layers)]
    if config.init_cache == "random":
        for cache in caches:
            _initial_cache(cache, n, c, init_rng)
    trackers = [DeltaTracker(strategy.delta, l, strategy.saturating) for l in range(layers)]
    stats = [LayerMetrics() for _ in range(layers)]
    phase_counts = np.zeros((2, 2), dtype=np.int64)  # [prompt, gen] x [misses, slots]
    steady = np.zeros(2, dtype=np.int64)
    plain = Strategy()

    for t in range(tokens):
        gated = t < gated_until
        active = plain if gated else strategy
        for l in range(layers):
            cache = caches[l]
            r = _Routed(logits[t, l])
            if planned is not None:
                sel = planned[t][l]
            else:
                delta = trackers[l].estimate(r.z) if active.kind == "prior" else 0.0
                sel = route(r, cache.bitmask, active, k, delta, swap_rng, config.renormalize)
            before = tuple(cache.resident) if on_step else ()
            out = cache.access(sel, t)
            trackers[l].observe(r.z)
            if check:
                cache.check()

            s = stats[l]
            s.steps += 1
            s.hits += out.hits
            s.misses += out.misses
            s.inactive += out.inactive
            s.swaps += sum(sel.swapped) + sel.inactive
            top = r.ranking[:k]
            s.mass_sum += math.fsum(sel.probs) / math.fsum(r.probs[top].tolist())
            ph = 1 if t >= h.prompt_len else 0
            phase_counts[ph, 0] += out.misses
            phase_counts[ph, 1] += k
            if t >= config.warmup:
                steady[0] += out.misses
                steady[1] += k
            if on_step:
                on_step(StepRecord(t, l, sel, out, before, tuple(int(e) for e in top), gated))

    for l, cache in enumerate(caches):
        stats[l].lifetimes = finalize_lifetimes(cache, tokens)
    return _metrics(stats, k, tokens, layers, phase_counts, steady, config.latency)


def _metrics(stats, k, tokens, layers, phase_counts, steady, latency) -> RunMetrics:
    hits = sum(s.hits for s in stats)
    misses = sum(s.misses for s in stats)
    inactive = sum(s.inactive for s in stats)
    steps = sum(s.steps for s in stats)
    slots = k * steps
    lifetimes = LifetimeStats.pooled(s.lifetimes for s in stats)
    miss_rate = misses / slots
    per_layer = []
    for s in stats:
        per_layer.append({
            "hits": s.hits, "misses": s.misses, "inactive": s.inactive,
            "miss_rate": s.miss_rate(k),
            "lifetime_mean": s.lifetimes.mean, "lifetime_std": s.lifetimes.std,
            "retained_mass": s.mass_sum / s.steps,
            "swap_rate": s.swaps / (k * s.steps),
        })

    def rate(row):
        return int(row[0]) / int(row[1]) if row[1] else None

    m = RunMetrics(
        top_k=k, num_tokens=tokens, num_layers=layers,
        total_hits=hits, total_misses=misses, total_inactive=inactive,
        miss_rate=miss_rate, hit_rate=1.0 - miss_rate,
        active_hit_rate=hits / (hits + misses) if hits + misses else 1.0,
        lifetime_mean=lifetimes.mean, lifetime_std=lifetimes.std,
        lifetime_count=len(lifetimes.samples), censored_count=len(lifetimes.censored),
        censored_mean=float(np.mean(lifetimes.censored)) if lifetimes.censored else None,
        retained_mass=math.fsum(s.mass_sum for s in stats) / steps,
        swap_rate=sum(s.swaps for s in stats) / slots,
        steady_miss_rate=rate(steady) if steady[1] else 0.0,
        prompt_miss_rate=rate(phase_counts[0]), gen_miss_rate=rate(phase_counts[1]),
        est_token_latency=0.0, per_layer=per_layer,
    )
    m.est_token_latency = estimate_latency(m, latency)
    return m


def estimate_latency(metrics: RunMetrics, latency: LatencyModel = LatencyModel(), model=None) -> float:
    """Seconds per token: compute time plus flash loads for every miss of the token."""
    return latency.t_compute + (metrics.total_misses / metrics.num_tokens) * latency.t_load


def relative_throughput(metrics: RunMetrics, baseline: RunMetrics, latency: LatencyModel = LatencyModel()) -> float:
    """Throughput of ``metrics`` relative to ``baseline`` (baseline = 1.0)."""
    return estimate_latency(baseline, latency) / estimate_latency(metrics, latency)


# -- sweeps -------------------------------------------------------------------

SWEEP_POINTS = 50


def sweep_grid(kind: str, top_k: int) -> list:
    if kind in ("prune", "maxrank"):
        return list(range(top_k + 1))
    if kind in ("cumsum", "prior"):
        return np.linspace(0.0, 1.0, SWEEP_POINTS).tolist()
    if kind == "swap-random":
        return list(range(1, top_k + 1))
    if kind == "original":
        return [0]
    raise InvalidParam(f"no sweep grid for strategy {kind!r}")


@dataclass
class SweepResult:
    kind: str
    points: list  # [(param, RunMetrics)]
    pareto: list  # indices into points, sorted by miss rate

    @property
    def pareto_front(self) -> list:
        return [self.points[i] for i in self.pareto]


def dominates(a, b) -> bool:
    """(miss, mass) pair ``a`` dominates ``b``: no worse on both, better on one."""
    return a[0] <= b[0] and a[1] >= b[1] and (a[0] < b[0] or a[1] > b[1])


def pareto_indices(pairs: Sequence[tuple]) -> list:
    """Non-dominated (miss_rate, retained_mass) pairs, ordered by miss rate.

    Exact duplicates keep their first occurrence only.
    """
    keep = []
    seen = set()
    for i, p in enumerate(pairs):
        if p in seen:
            continue
        if any(dominates(q, p) for q in pairs):
            continue
        seen.add(p)
        keep.append(i)
    return sorted(keep, key=lambda i: (pairs[i][0], -pairs[i][1], i))


def _run_point(args):
    trace, config, model = args
    return run(trace, config, model)


def resolve_jobs(jobs: Optional[int]) -> int:
    if jobs:
        return max(1, int(jobs))
    env = os.environ.get("MOE_SIM_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"MOE_SIM_JOBS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def run_many(trace, configs: Sequence[RunConfig], model=None, jobs: Optional[int] = 1) -> list:
    """Run independent configs, in parallel when ``jobs`` > 1; results keep input order."""
    jobs = resolve_jobs(jobs)
    tasks = [(trace, cfg, model) for cfg in configs]
    if jobs == 1 or len(tasks) < 2:
        return [_run_point(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(_run_point, tasks))


def sweep(trace: LogitTrace, model: Optional[ModelConfig], kind: str, policy: str = "lru",
          cache_size: Optional[int] = None, base: RunConfig = RunConfig(),
          jobs: Optional[int] = 1, grid: Optional[Sequence] = None) -> SweepResult:
    model = model or trace.model()
    grid = list(grid) if grid is not None else sweep_grid(kind, model.top_k)
    configs = []
    for value in grid:
        strategy = dataclasses.replace(base.strategy, kind=kind, param=value)
        configs.append(dataclasses.replace(base, strategy=strategy, policy=policy,
                                           cache_size=cache_size if cache_size is not None else base.cache_size))
    results = run_many(trace, configs, model, jobs)
    points = list(zip(grid, results))
    pairs = [(m.miss_rate, m.retained_mass) for m in results]
    return SweepResult(kind, points, pareto_indices(pairs))


# -- ablations and comparisons ------------------------------------------------

DEFAULT_MASS_THRESHOLDS = (0.99, 0.95, 0.90)


@dataclass
class AblationRow:
    cache_size: int
    lru: RunMetrics
    belady: RunMetrics
    prior: dict  # threshold -> (lambda, RunMetrics) or None


def best_under_threshold(points, threshold):
    """Lowest-miss point whose retained mass is at least ``threshold``."""
    ok = [(m.miss_rate, i) for i, (_, m) in enumerate(points) if m.retained_mass >= threshold]
    if not ok:
        return None
    _, i = min(ok)
    return points[i]


def cache_size_ablation(trace: LogitTrace, model: Optional[ModelConfig], sizes: Sequence[int],
                        base: RunConfig = RunConfig(), thresholds=DEFAULT_MASS_THRESHOLDS,
                        jobs: Optional[int] = 1, grid: Optional[Sequence] = None) -> list:
    model = model or trace.model()
    rows = []
    plain = dataclasses.replace(base.strategy, kind="original", param=0)
    for size in sizes:
        if not 1 <= size <= model.num_experts:
            raise InvalidParam(f"cache size {size} outside [1, {model.num_experts}]")
        lru, belady = run_many(trace, [
            dataclasses.replace(base, strategy=plain, policy="lru", cache_size=size),
            dataclasses.replace(base, strategy=plain, policy="belady", cache_size=size),
        ], model, jobs)
        prior = sweep(trace, model, "prior", "lru", size, base, jobs, grid)
        rows.append(AblationRow(size, lru, belady,
                                {th: best_under_threshold(prior.points, th) for th in thresholds}))
    return rows


def compare(trace: LogitTrace, model: Optional[ModelConfig], strategies: Sequence[Strategy],
            base: RunConfig = RunConfig(), jobs: Optional[int] = 1) -> list:
    """Run several strategies under one cache configuration; returns (strategy, metrics) pairs."""
    configs = [dataclasses.replace(base, strategy=s) for s in strategies]
    return list(zip(strategies, run_many(trace, configs, model, jobs)))
