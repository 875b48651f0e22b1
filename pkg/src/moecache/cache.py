"""Per-layer expert cache with batch accesses.

One token selects up to K experts at once.  Hits are judged against the
cache as it was before the token; experts of the current batch are never
evicted to make room for each other while an older resident is available.
Within a batch the recency order follows router weight: by default the
highest-weight expert is placed first and is therefore evicted first.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import EmptyCache, InvalidExpert, InvalidParam, TooLarge

NEVER = math.inf

POLICIES = ("lru", "belady")
HIGH_WEIGHT_FIRST = "high-first"
LOW_WEIGHT_FIRST = "low-first"


@dataclass
class AccessOutcome:
    hits: int
    misses: int
    inactive: int
    evicted: list
    token_index: int
    hit_experts: tuple = ()
    miss_experts: tuple = ()


@dataclass
class LifetimeStats:
    samples: list
    censored: list = field(default_factory=list)

    @property
    def mean(self) -> Optional[float]:
        return float(np.mean(self.samples)) if self.samples else None

    @property
    def std(self) -> Optional[float]:
        return float(np.std(self.samples)) if self.samples else None

    @classmethod
    def pooled(cls, stats: Iterable["LifetimeStats"]) -> "LifetimeStats":
        samples, censored = [], []
        for s in stats:
            samples.extend(s.samples)
            censored.extend(s.censored)
        return cls(samples, censored)


class NextUse:
    """Next-use lookup built from a full sequence of expert batches."""

    def __init__(self, batches: Sequence[Iterable[int]]):
        self.uses: dict = {}
        for t, batch in enumerate(batches):
            for e in batch:
                self.uses.setdefault(int(e), []).append(t)

    def __call__(self, expert: int, t: int) -> float:
        times = self.uses.get(expert)
        if not times:
            return NEVER
        i = bisect.bisect_right(times, t)
        return times[i] if i < len(times) else NEVER


class ExpertCache:
    """Bounded set of resident experts for one MoE layer.

    ``resident`` is kept least-recent first.  ``next_use`` is required for the
    Belady policy and maps (expert, token) to the next token that selects it.
    """

    def __init__(self, capacity: int, num_experts: int, policy: str = "lru",
                 order: str = HIGH_WEIGHT_FIRST, next_use: Optional[Callable] = None):
        if capacity < 1:
            raise InvalidParam(f"cache capacity must be >= 1, got {capacity}")
        if policy not in POLICIES:
            raise InvalidParam(f"unknown eviction policy {policy!r}")
        if order not in (HIGH_WEIGHT_FIRST, LOW_WEIGHT_FIRST):
            raise InvalidParam(f"unknown intra-batch order {order!r}")
        if policy == "belady" and next_use is None:
            raise InvalidParam("belady eviction needs a next-use oracle")
        self.capacity = capacity
        self.num_experts = num_experts
        self.policy = policy
        self.order = order
        self.next_use = next_use
        self.resident: list = []
        self.bitmask = np.zeros(num_experts, dtype=bool)
        self.insert_token: dict = {}
        self.lifetimes: list = []

    def __contains__(self, expert) -> bool:
        return bool(self.bitmask[expert])

    def __len__(self) -> int:
        return len(self.resident)

    def fill(self, experts: Sequence[int], token_index: int = 0):
        """Preload experts without counting misses (random initial state)."""
        for e in experts:
            e = int(e)
            if self.bitmask[e]:
                continue
            if len(self.resident) >= self.capacity:
                raise InvalidParam("preload exceeds cache capacity")
            self.resident.append(e)
            self.bitmask[e] = True
            self.insert_token[e] = token_index

    def check(self):
        assert len(self.resident) <= self.capacity, "cache over capacity"
        assert len(set(self.resident)) == len(self.resident), "duplicate resident"
        assert self.bitmask.sum() == len(self.resident), "bitmask out of sync"
        assert all(self.bitmask[e] for e in self.resident), "bitmask out of sync"

    def _remove(self, expert: int, token_index: int):
        self.resident.remove(expert)
        self.bitmask[expert] = False
        inserted = self.insert_token.pop(expert)
        # An expert loaded and dropped within one token still served it.
        self.lifetimes.append(max(1, token_index - inserted))

    def _batch_order(self, experts, probs) -> list:
        pairs = sorted(zip(experts, probs), key=lambda ep: (-ep[1], ep[0]))
        ordered = [int(e) for e, _ in pairs]
        return ordered if self.order == HIGH_WEIGHT_FIRST else ordered[::-1]

    def access(self, selection, token_index: int) -> AccessOutcome:
        experts = [int(e) for e in selection.experts]
        for e in experts:
            if not 0 <= e < self.num_experts:
                raise InvalidExpert(f"expert {e} outside [0, {self.num_experts})")
        batch = self._batch_order(experts, selection.probs)
        hit_experts = tuple(e for e in batch if self.bitmask[e])
        miss_experts = tuple(e for e in batch if not self.bitmask[e])
        evicted = []

        in_batch = set(batch)
        # Refresh: batch members leave the recency list and re-enter at the end.
        self.resident = [e for e in self.resident if e not in in_batch]
        while self.resident and len(self.resident) + len(batch) > self.capacity:
            victim = self._victim(self.resident, token_index)
            self._remove(victim, token_index)
            evicted.append(victim)
        for e in batch:
            self.resident.append(e)
            if not self.bitmask[e]:
                self.bitmask[e] = True
                self.insert_token[e] = token_index
        # Only when K exceeds the capacity: batch members compete among themselves.
        while len(self.resident) > self.capacity:
            victim = self._victim(self.resident, token_index)
            self._remove(victim, token_index)
            evicted.append(victim)

        return AccessOutcome(len(hit_experts), len(miss_experts), selection.inactive,
                             evicted, token_index, hit_experts, miss_experts)

    def _victim(self, candidates, token_index) -> int:
        if self.policy == "lru":
            return lru_victim(candidates)
        return belady_victim(candidates, self.next_use, token_index)


def lru_victim(recency: Sequence[int]) -> int:
    if not recency:
        raise EmptyCache("cannot evict from an empty cache")
    return recency[0]


def belady_victim(candidates: Sequence[int], next_use: Callable, token_index: int) -> int:
    """Candidate whose next use is farthest away; never-used ones first, lowest index on ties."""
    if not candidates:
        raise EmptyCache("cannot evict from an empty cache")
    return max(candidates, key=lambda e: (next_use(e, token_index), -e))


def lru_evict(cache: ExpertCache, token_index: int = 0) -> int:
    if not cache.resident:
        raise EmptyCache("cannot evict from an empty cache")
    victim = lru_victim(cache.resident)
    cache._remove(victim, token_index)
    return victim


def belady_evict(cache: ExpertCache, next_use: Callable, token_index: int = 0) -> int:
    if not cache.resident:
        raise EmptyCache("cannot evict from an empty cache")
    victim = belady_victim(cache.resident, next_use, token_index)
    cache._remove(victim, token_index)
    return victim


def access_batch(cache: ExpertCache, selection, token_index: int) -> AccessOutcome:
    return cache.access(selection, token_index)


def finalize_lifetimes(cache: ExpertCache, final_token: int) -> LifetimeStats:
    """Lifetimes of evicted experts plus censored spans of end-of-run residents."""
    censored = [final_token - cache.insert_token[e] for e in cache.resident]
    return LifetimeStats(list(cache.lifetimes), censored)


# -- exhaustive oracle --------------------------------------------------------

BRUTE_FORCE_LIMITS = {"batches": 12, "experts": 6, "capacity": 4}


def brute_force_optimal_misses(batches: Sequence[Iterable[int]], capacity: int) -> int:
    """Minimum miss count over every possible eviction schedule.

    After each batch the cache may hold any subset of (previous cache plus
    batch) of size <= capacity that contains the whole batch; when the batch
    is larger than the capacity the kept experts must come from the batch.
    Starts from an empty cache.
    """
    seq = [frozenset(int(e) for e in b) for b in batches]
    experts = frozenset().union(*seq) if seq else frozenset()
    if (len(seq) > BRUTE_FORCE_LIMITS["batches"] or len(experts) > BRUTE_FORCE_LIMITS["experts"]
            or capacity > BRUTE_FORCE_LIMITS["capacity"]):
        raise TooLarge(f"instance exceeds exhaustive-search bounds {BRUTE_FORCE_LIMITS}")
    if capacity < 1:
        raise InvalidParam("capacity must be >= 1")

    from itertools import combinations

    @lru_cache(maxsize=None)
    def best(t: int, state: frozenset) -> int:
        if t == len(seq):
            return 0
        batch = seq[t]
        cost = len(batch - state)
        options = []
        if len(batch) <= capacity:
            extra = sorted(state - batch)
            room = capacity - len(batch)
            for size in range(0, min(room, len(extra)) + 1):
                for keep in combinations(extra, size):
                    options.append(batch | frozenset(keep))
        else:
            for keep in combinations(sorted(batch), capacity):
                options.append(frozenset(keep))
        return cost + min(best(t + 1, nxt) for nxt in options)

    return best(0, frozenset())
