"""Expert selection from router logits.

Every router is a pure function of the logits of one token at one layer,
the cache bitmask of that layer and the strategy parameters.  The only
mutable state is :class:`DeltaTracker`, which estimates the per-layer logit
range used by the cache-prior bias.

Rankings are computed on the logits directly.  Softmax is monotone, so this
is the same order as ranking the probabilities, except that it never merges
two distinct logits whose probabilities round to the same float.  Ties are
broken by ascending expert index everywhere.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidLogits, InvalidParam, InvalidSubset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    name: str
    num_layers: int
    num_experts: int
    top_k: int
    shared_experts: int = 0
    top_j: int = 1

    def __post_init__(self):
        if self.num_layers < 1 or self.num_experts < 1 or self.top_k < 1:
            raise InvalidParam(f"{self.name}: layers, experts and top_k must be positive")
        if self.top_k > self.num_experts:
            raise InvalidParam(f"{self.name}: top_k={self.top_k} exceeds num_experts={self.num_experts}")
        if not 0 <= self.top_j <= self.top_k:
            raise InvalidParam(f"{self.name}: top_j={self.top_j} must lie in [0, top_k]")
        if self.shared_experts < 0:
            raise InvalidParam(f"{self.name}: shared_experts must be non-negative")

    def with_layers(self, num_layers: int) -> "ModelConfig":
        return ModelConfig(self.name, num_layers, self.num_experts, self.top_k,
                           self.shared_experts, self.top_j)


# Layer counts count MoE layers only (DeepSeek-V2-Lite has one dense layer).
PRESETS = {
    "mixtral-8x7b": ModelConfig("mixtral-8x7b", 32, 8, 2, 0, 1),
    "phi-3.5-moe": ModelConfig("phi-3.5-moe", 32, 16, 2, 0, 1),
    "deepseek-v2-lite": ModelConfig("deepseek-v2-lite", 26, 64, 6, 2, 2),
    "qwen1.5-moe": ModelConfig("qwen1.5-moe", 24, 60, 4, 4, 2),
}


def default_top_j(top_k: int) -> int:
    """Top-J used when a trace does not match a preset: 1 for K<=2, else 2."""
    return 1 if top_k <= 2 else 2


def model_for(num_layers, num_experts, top_k, shared_experts=0, name="custom") -> ModelConfig:
    """Match a trace shape against the presets, falling back to a custom config."""
    for preset in PRESETS.values():
        if (preset.num_experts, preset.top_k, preset.shared_experts) == (num_experts, top_k, shared_experts):
            return ModelConfig(preset.name, num_layers, num_experts, top_k, shared_experts, preset.top_j)
    return ModelConfig(name, num_layers, num_experts, top_k, shared_experts, default_top_j(top_k))


# -- primitives ---------------------------------------------------------------

def _check_logits(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise InvalidLogits(f"expected a non-empty vector of logits, got shape {z.shape}")
    if not np.isfinite(z).all():
        raise InvalidLogits("logits contain NaN or Inf")
    return z


def softmax(logits) -> np.ndarray:
    z = _check_logits(logits)
    e = np.exp(z - z.max())
    return e / e.sum()


def rank(weights) -> np.ndarray:
    """Expert indices sorted by descending weight, ties by ascending index."""
    w = np.asarray(weights, dtype=np.float64)
    return np.argsort(-w, kind="stable")


def promote(subset: Sequence[int], ranking: Sequence[int]) -> list[int]:
    """Move ``subset`` (in its given order) to the front of ``ranking``.

    The remaining experts keep their relative order.
    """
    subset = [int(e) for e in subset]
    ranking = [int(e) for e in ranking]
    members = set(ranking)
    picked = set()
    for e in subset:
        if e not in members:
            raise InvalidSubset(f"expert {e} is not part of the ranking")
        if e in picked:
            raise InvalidSubset(f"expert {e} appears twice in the subset")
        picked.add(e)
    return subset + [e for e in ranking if e not in picked]


@dataclass(frozen=True)
class Selection:
    """Experts chosen for one token at one layer.

    ``probs`` are the original router probabilities of ``experts``;
    ``gate_weights`` are the same values, renormalized over the active
    experts when renormalization is on.  ``inactive`` counts slots dropped by
    pruning: they still count toward K but never touch the cache.
    """
    experts: tuple
    probs: tuple
    gate_weights: tuple
    swapped: tuple
    inactive: int = 0
    flagged: bool = False
    ranking: Optional[tuple] = field(default=None, compare=False)

    @property
    def slots(self) -> int:
        return len(self.experts) + self.inactive


class _Routed:
    """Logits of one step with their softmax and original ranking."""

    __slots__ = ("z", "probs", "ranking")

    def __init__(self, logits):
        self.z = _check_logits(logits)
        e = np.exp(self.z - self.z.max())
        self.probs = e / e.sum()
        self.ranking = np.argsort(-self.z, kind="stable")


def _selection(routed: _Routed, chosen, top_k, renormalize, inactive=0, flagged=False, ranking=None):
    chosen = [int(e) for e in chosen]
    original = set(int(e) for e in routed.ranking[:top_k])
    probs = tuple(float(routed.probs[e]) for e in chosen)
    if renormalize and chosen:
        total = math.fsum(probs)
        gates = tuple(p / total for p in probs)
    else:
        gates = probs
    swapped = tuple(e not in original for e in chosen)
    return Selection(tuple(chosen), probs, gates, swapped, inactive, flagged,
                     None if ranking is None else tuple(int(e) for e in ranking))


def _mask(cache_mask, n) -> np.ndarray:
    m = np.asarray(cache_mask, dtype=bool)
    if m.shape != (n,):
        raise InvalidParam(f"cache mask has shape {m.shape}, expected ({n},)")
    return m


# -- strategies ---------------------------------------------------------------

def route_original(logits, top_k, renormalize=True) -> Selection:
    r = logits if isinstance(logits, _Routed) else _Routed(logits)
    return _selection(r, r.ranking[:top_k], top_k, renormalize, ranking=r.ranking)


def route_pruned(logits, top_k, h, renormalize=True) -> Selection:
    """Keep only the experts ranked strictly above ``h`` (1-based ranks).

    ``h == 0`` is the sweep sentinel for "no pruning".
    """
    if h == 0:
        return route_original(logits, top_k, renormalize)
    if not 1 <= h <= top_k:
        raise InvalidParam(f"prune rank h={h} must lie in [1, {top_k}]")
    r = logits if isinstance(logits, _Routed) else _Routed(logits)
    active = h - 1
    return _selection(r, r.ranking[:active], top_k, renormalize, inactive=top_k - active)


def max_rank_ranking(ranking, cache_mask, max_rank, top_j) -> list[int]:
    """Promote cached experts among the top ``max_rank``, then the top ``top_j``."""
    ranking = [int(e) for e in ranking]
    m = np.asarray(cache_mask, dtype=bool)
    cached = [e for e in ranking[:max_rank] if m[e]]
    out = promote(cached, ranking)
    return promote(ranking[:top_j], out)


def route_max_rank(logits, cache_mask, top_k, max_rank, top_j, renormalize=True) -> Selection:
    r = logits if isinstance(logits, _Routed) else _Routed(logits)
    n = r.z.size
    if not 0 <= max_rank <= n:
        raise InvalidParam(f"max rank M={max_rank} must lie in [0, {n}]")
    if not 0 <= top_j <= top_k:
        raise InvalidParam(f"top_j={top_j} must lie in [0, {top_k}]")
    final = max_rank_ranking(r.ranking, _mask(cache_mask, n), max_rank, top_j)
    return _selection(r, final[:top_k], top_k, renormalize, ranking=final)


def cumsum_max_rank(probs, ranking, p) -> int:
    """Smallest rank count whose cumulative probability reaches ``p``."""
    cum = 0.0
    m = 0
    n = len(ranking)
    while cum < p and m < n:
        m += 1
        cum += probs[ranking[m - 1]]
    return m


def route_cumsum(logits, cache_mask, top_k, p, top_j, renormalize=True) -> Selection:
    if not 0.0 <= p <= 1.0:
        raise InvalidParam(f"cumulative threshold p={p} must lie in [0, 1]")
    r = logits if isinstance(logits, _Routed) else _Routed(logits)
    m = cumsum_max_rank(r.probs, r.ranking, p)
    return route_max_rank(r, cache_mask, top_k, m, top_j, renormalize)


def cache_prior_logits(z, cache_mask, lam, delta, top_j, ranking=None, augment_top_j=True) -> np.ndarray:
    """Logits boosted by ``lam * delta`` for cached (and top-J) experts."""
    z = np.asarray(z, dtype=np.float64)
    m = np.array(cache_mask, dtype=bool)
    if augment_top_j and top_j:
        if ranking is None:
            ranking = np.argsort(-z, kind="stable")
        m[np.asarray(ranking[:top_j])] = True
    return z + (lam * delta) * m


def route_cache_prior(logits, cache_mask, top_k, lam, delta, top_j,
                      renormalize=True, augment_top_j=True) -> Selection:
    if not 0.0 <= lam <= 1.0:
        raise InvalidParam(f"cache-prior lambda={lam} must lie in [0, 1]")
    if delta < 0 or not math.isfinite(delta):
        raise InvalidParam(f"logit range estimate must be finite and >= 0, got {delta}")
    r = logits if isinstance(logits, _Routed) else _Routed(logits)
    mask = _mask(cache_mask, r.z.size)
    biased = cache_prior_logits(r.z, mask, lam, delta, top_j, r.ranking, augment_top_j)
    final = np.argsort(-biased, kind="stable")
    if top_j and augment_top_j:
        # Boosting top-J together with the cache keeps them on top; this only
        # matters if float rounding merged a top-J logit with a lower one.
        final = promote(r.ranking[:top_j], final)
    return _selection(r, final[:top_k], top_k, renormalize, ranking=final)


def swap_rank_random(logits, top_k, k_swap, rng, renormalize=True) -> Selection:
    """Replace the expert at rank ``k_swap`` by a random expert outside the top-K.

    ``rng`` is a seed or a numpy Generator.  When every expert is already
    selected the original selection is returned with ``flagged`` set.
    """
    if not 1 <= k_swap <= top_k:
        raise InvalidParam(f"swap rank k={k_swap} must lie in [1, {top_k}]")
    r = logits if isinstance(logits, _Routed) else _Routed(logits)
    chosen = [int(e) for e in r.ranking[:top_k]]
    pool = [int(e) for e in r.ranking[top_k:]]
    if not pool:
        return _selection(r, chosen, top_k, renormalize, flagged=True)
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    pool.sort()
    chosen[k_swap - 1] = pool[int(gen.integers(len(pool)))]
    return _selection(r, chosen, top_k, renormalize)


# -- logit range estimation ---------------------------------------------------

DELTA_MODES = ("running", "ema", "calibrated", "exact")


@dataclass(frozen=True)
class DeltaMode:
    """How the per-layer logit range is estimated.

    ``running`` is the cumulative mean of max(z)-min(z); ``ema`` an
    exponential moving average; ``calibrated`` uses fixed per-layer
    constants; ``exact`` uses the range of the very logits being routed
    (not causal, kept for ablations and bound checks).
    """
    kind: str = "running"
    decay: float = 0.9
    constants: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in DELTA_MODES:
            raise InvalidParam(f"unknown delta mode {self.kind!r}; expected one of {DELTA_MODES}")
        if self.kind == "ema" and not 0.0 <= self.decay < 1.0:
            raise InvalidParam(f"EMA decay must lie in [0, 1), got {self.decay}")
        if self.kind == "calibrated":
            if not self.constants:
                raise InvalidParam("calibrated delta mode needs per-layer constants")
            if any(c < 0 or not math.isfinite(c) for c in self.constants):
                raise InvalidParam("calibrated constants must be finite and non-negative")


class DeltaTracker:
    """Running estimate of one layer's logit range.

    Callers read :meth:`estimate` before routing a token and call
    :meth:`observe` afterwards, so a fresh tracker reports 0 and the first
    token routes as if lambda were 0.
    """

    # Extra headroom for the saturating exact mode: the bias must strictly
    # exceed the token's logit range.
    SATURATION_MARGIN = 1e-6

    def __init__(self, mode: DeltaMode = DeltaMode(), layer: int = 0, saturating: bool = False):
        self.mode = mode
        self.layer = layer
        self.saturating = saturating
        self.count = 0
        self.value = 0.0
        if mode.kind == "calibrated":
            consts = mode.constants
            self.value = float(consts[layer] if len(consts) > 1 else consts[0])

    def estimate(self, logits=None) -> float:
        if self.mode.kind == "exact":
            if logits is None:
                return self.value
            z = np.asarray(logits, dtype=np.float64)
            spread = float(z.max() - z.min())
            if self.saturating:
                spread = spread * (1 + self.SATURATION_MARGIN) + self.SATURATION_MARGIN
            return spread
        return self.value

    def observe(self, logits) -> "DeltaTracker":
        z = np.asarray(logits, dtype=np.float64)
        spread = float(z.max() - z.min())
        kind = self.mode.kind
        self.count += 1
        if kind == "running":
            self.value += (spread - self.value) / self.count
        elif kind == "ema":
            if self.count == 1:
                self.value = spread
            else:
                d = self.mode.decay
                self.value = d * self.value + (1 - d) * spread
        elif kind == "exact":
            self.value = spread
        return self


def observe_delta(tracker: DeltaTracker, logits) -> DeltaTracker:
    return tracker.observe(_check_logits(logits))


def calibrate_deltas(logits) -> tuple:
    """Per-layer mean logit range of a [tokens, layers, experts] array."""
    arr = np.asarray(logits, dtype=np.float64)
    return tuple(float(v) for v in (arr.max(axis=2) - arr.min(axis=2)).mean(axis=0))


# -- strategy descriptors -----------------------------------------------------

STRATEGIES = ("original", "prune", "maxrank", "cumsum", "prior", "swap-random")
CACHE_AWARE = frozenset({"maxrank", "cumsum", "prior"})


@dataclass(frozen=True)
class Strategy:
    """A routing strategy plus its single trade-off parameter.

    ``param`` is h for prune, M for maxrank, p for cumsum, lambda for prior
    and the swapped rank for swap-random.
    """
    kind: str = "original"
    param: float = 0
    top_j: int = 0
    delta: DeltaMode = DeltaMode()
    saturating: bool = False
    augment_top_j: bool = True

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise InvalidParam(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if self.top_j < 0:
            raise InvalidParam("top_j must be non-negative")
        if self.kind in ("cumsum", "prior") and not 0.0 <= self.param <= 1.0:
            raise InvalidParam(f"{self.kind} parameter must lie in [0, 1], got {self.param}")
        if self.kind in ("prune", "maxrank", "swap-random"):
            if self.param != int(self.param) or self.param < 0:
                raise InvalidParam(f"{self.kind} parameter must be a non-negative integer, got {self.param}")
        if self.saturating and (self.kind != "prior" or self.delta.kind != "exact"):
            raise InvalidParam("saturating mode needs the prior strategy with the exact delta mode")

    @property
    def cache_aware(self) -> bool:
        return self.kind in CACHE_AWARE

    def validate(self, model: ModelConfig):
        k, n = model.top_k, model.num_experts
        if self.top_j > k:
            raise InvalidParam(f"top_j={self.top_j} exceeds top_k={k}")
        p = int(self.param) if self.kind in ("prune", "maxrank", "swap-random") else self.param
        if self.kind == "prune" and p > k:
            raise InvalidParam(f"prune rank h={p} must lie in [1, {k}] (0 disables pruning)")
        if self.kind == "prune" and p == 1:
            log.warning("prune h=1 drops every expert; only useful as a boundary case")
        if self.kind == "maxrank" and p > n:
            raise InvalidParam(f"max rank M={p} must lie in [0, {n}]")
        if self.kind == "swap-random" and not 1 <= p <= k:
            raise InvalidParam(f"swap rank k={p} must lie in [1, {k}]")

    def label(self) -> str:
        if self.kind == "original":
            return "original"
        value = int(self.param) if self.kind in ("prune", "maxrank", "swap-random") else self.param
        return f"{self.kind}@{value:g}"


def route(logits, cache_mask, strategy: Strategy, top_k, delta=0.0, rng=None, renormalize=True) -> Selection:
    """Dispatch one routing decision for ``strategy``."""
    r = logits if isinstance(logits, _Routed) else _Routed(logits)
    kind = strategy.kind
    if kind == "original":
        return route_original(r, top_k, renormalize)
    if kind == "prune":
        return route_pruned(r, top_k, int(strategy.param), renormalize)
    if kind == "maxrank":
        return route_max_rank(r, cache_mask, top_k, int(strategy.param), strategy.top_j, renormalize)
    if kind == "cumsum":
        return route_cumsum(r, cache_mask, top_k, strategy.param, strategy.top_j, renormalize)
    if kind == "prior":
        return route_cache_prior(r, cache_mask, top_k, strategy.param, delta, strategy.top_j,
                                 renormalize, strategy.augment_top_j)
    return swap_rank_random(r, top_k, int(strategy.param), rng, renormalize)
