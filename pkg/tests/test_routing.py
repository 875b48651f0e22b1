import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moecache.errors import InvalidLogits, InvalidParam, InvalidSubset
from moecache.routing import (PRESETS, DeltaMode, DeltaTracker, ModelConfig, Strategy,
                              cache_prior_logits, calibrate_deltas, cumsum_max_rank,
                              max_rank_ranking, model_for, observe_delta, promote, rank, route,
                              route_cache_prior, route_cumsum, route_max_rank, route_original,
                              route_pruned, softmax, swap_rank_random)


# -- model presets ------------------------------------------------------------

@pytest.mark.parametrize("name,n,k,s,j", [
    ("mixtral-8x7b", 8, 2, 0, 1),
    ("phi-3.5-moe", 16, 2, 0, 1),
    ("deepseek-v2-lite", 64, 6, 2, 2),
    ("qwen1.5-moe", 60, 4, 4, 2),
])
def test_presets_match_architecture_table(name, n, k, s, j):
    p = PRESETS[name]
    assert (p.num_experts, p.top_k, p.shared_experts, p.top_j) == (n, k, s, j)


def test_model_config_invariants():
    with pytest.raises(InvalidParam):
        ModelConfig("x", 1, 4, 5)
    with pytest.raises(InvalidParam):
        ModelConfig("x", 1, 4, 2, top_j=3)
    with pytest.raises(InvalidParam):
        ModelConfig("x", 1, 4, 2, shared_experts=-1)


def test_model_for_matches_presets_by_shape():
    assert model_for(3, 60, 4, 4).name == "qwen1.5-moe"
    assert model_for(3, 60, 4, 4).num_layers == 3
    custom = model_for(2, 10, 3)
    assert custom.name == "custom" and custom.top_j == 2


# -- softmax / rank -----------------------------------------------------------

def test_softmax_uniform():
    assert softmax([0, 0, 0, 0]) == pytest.approx([0.25] * 4)


def test_softmax_is_stable_for_large_logits():
    w = softmax([1000.0, 0.0])
    assert w[0] == 1.0 and w[1] < 1e-300
    assert np.isfinite(w).all()


def test_softmax_against_arbitrary_precision():
    # mpmath, 40 digits
    assert softmax([1.0, 2.0, 3.0]) == pytest.approx([0.0900305731704, 0.244728471055, 0.665240955775], abs=1e-5)


@pytest.mark.parametrize("bad", [[1.0, float("nan")], [float("inf"), 0.0], []])
def test_softmax_rejects_invalid_logits(bad):
    with pytest.raises(InvalidLogits):
        softmax(bad)


@pytest.mark.parametrize("w,expected", [
    ([0.1, 0.7, 0.2], [1, 2, 0]),
    ([0.5, 0.5], [0, 1]),
    ([0.25] * 4, [0, 1, 2, 3]),
])
def test_rank(w, expected):
    assert rank(w).tolist() == expected


# -- promote ------------------------------------------------------------------

def test_promote_worked_example():
    r = ["E1", "E2", "E3", "E4", "E5", "E6"]
    idx = {e: i for i, e in enumerate(r)}
    out = promote([idx["E3"], idx["E4"]], range(6))
    assert [r[i] for i in out] == ["E3", "E4", "E1", "E2", "E5", "E6"]


def test_promote_identities():
    r = [3, 1, 0, 2]
    assert promote([], r) == r
    assert promote(r, r) == r


def test_promote_rejects_foreign_subset():
    with pytest.raises(InvalidSubset):
        promote([7], [0, 1, 2])


@st.composite
def ranking_and_subset(draw):
    n = draw(st.integers(1, 12))
    r = draw(st.permutations(list(range(n))))
    subset = draw(st.lists(st.sampled_from(r), unique=True, max_size=n))
    return r, subset


@given(ranking_and_subset())
def test_promote_is_permutation_and_idempotent(case):
    r, s = case
    out = promote(s, r)
    assert sorted(out) == sorted(r)
    assert out[:len(s)] == s
    assert promote(s, out) == out
    rest = [e for e in out if e not in s]
    assert rest == [e for e in r if e not in s]


# -- original / pruning -------------------------------------------------------

def test_route_original_examples():
    assert route_original([3, 1, 2], 2).experts == (0, 2)
    assert route_original([1, 1, 1, 1], 2).experts == (0, 1)
    assert route_original([0.5, 0.1, 0.9, 0.3], 1).experts == (2,)
    sel = route_original([3, 1, 2], 2)
    assert sel.swapped == (False, False)
    assert math.fsum(sel.gate_weights) == pytest.approx(1.0, abs=1e-12)


def test_route_pruned():
    sel = route_pruned([3, 1, 2], 2, 2)
    assert sel.experts == (0,) and sel.inactive == 1 and sel.slots == 2
    # h=K drops exactly the K-th ranked expert
    sel = route_pruned([4, 3, 2, 1], 3, 3)
    assert sel.experts == (0, 1) and sel.inactive == 1
    sel = route_pruned([4, 3, 2, 1], 4, 1)
    assert sel.experts == () and sel.inactive == 4
    assert route_pruned([3, 1, 2], 2, 0) == route_original([3, 1, 2], 2)
    with pytest.raises(InvalidParam):
        route_pruned([3, 1, 2], 2, 3)


# -- max-rank / cumsum --------------------------------------------------------

def test_max_rank_worked_example():
    # Ranking E1..E6 is expert indices 0..5; cache holds E3, E4, E6.
    logits = [6.0, 5.0, 4.0, 3.0, 2.0, 1.0]
    mask = [False, False, True, True, False, True]
    sel = route_max_rank(logits, mask, 2, 4, 1)
    assert list(sel.ranking) == [0, 2, 3, 1, 4, 5]
    assert sel.experts == (0, 2)
    assert sel.swapped == (False, True)


def test_max_rank_degenerate_cases():
    z = [0.3, 2.0, -1.0, 0.7, 1.1]
    orig = route_original(z, 2)
    assert route_max_rank(z, [True] * 5, 2, 0, 0).experts == orig.experts
    assert route_max_rank(z, [False] * 5, 2, 5, 0).experts == orig.experts


def test_cumsum_loop():
    w = np.array([0.5, 0.3, 0.1, 0.1])
    r = np.arange(4)
    assert cumsum_max_rank(w, r, 0.7) == 2
    assert cumsum_max_rank(w, r, 0.0) == 0
    w = softmax([0.3, 1.2, -0.4, 2.0, 0.0])
    assert cumsum_max_rank(w, rank(w), 1.0) == 5


def test_route_cumsum_p0_is_original():
    z = [0.3, 2.0, -1.0, 0.7, 1.1]
    assert route_cumsum(z, [True] * 5, 2, 0.0, 1).experts == route_original(z, 2).experts


# -- cache prior --------------------------------------------------------------

def test_cache_prior_examples():
    z = [3.0, 2.5, 0.5, 1.0]
    mask = [False, False, True, False]
    assert cache_prior_logits(z, mask, 0.9, 2.5, 0).tolist() == pytest.approx([3.0, 2.5, 2.75, 1.0])
    assert route_cache_prior(z, mask, 2, 0.9, 2.5, 0).experts == (0, 2)
    assert cache_prior_logits(z, mask, 0.5, 2.5, 0).tolist() == pytest.approx([3.0, 2.5, 1.75, 1.0])
    assert set(route_cache_prior(z, mask, 2, 0.5, 2.5, 0).experts) == {0, 1}


def test_cache_prior_gate_weights_use_unbiased_logits():
    z = [3.0, 2.5, 0.5, 1.0]
    sel = route_cache_prior(z, [False, False, True, False], 2, 0.9, 2.5, 0, renormalize=False)
    w = softmax(z)
    assert sel.probs == (w[0], w[2])
    assert sel.gate_weights == sel.probs


def test_cache_prior_rejects_bad_lambda():
    with pytest.raises(InvalidParam):
        route_cache_prior([1.0, 2.0], [True, False], 1, 1.5, 1.0, 0)


def test_top_j_augments_the_bitmask():
    z = [5.0, 1.0, 0.9, 0.8]
    mask = [False, True, True, True]
    # Without augmentation a huge bias pushes expert 0 out.
    assert 0 not in route_cache_prior(z, mask, 2, 1.0, 100.0, 1, augment_top_j=False).experts
    assert route_cache_prior(z, mask, 2, 1.0, 100.0, 1).experts[0] == 0


logit_vectors = st.integers(2, 10).flatmap(lambda n: st.tuples(
    st.lists(st.floats(-20, 20, allow_nan=False, allow_subnormal=False), min_size=n, max_size=n),
    st.lists(st.booleans(), min_size=n, max_size=n),
))


@given(logit_vectors, st.data())
def test_lambda_zero_is_original(case, data):
    z, mask = case
    k = data.draw(st.integers(1, len(z)))
    j = data.draw(st.integers(0, k))
    delta = data.draw(st.floats(0, 50))
    a = route_cache_prior(z, mask, k, 0.0, delta, j)
    b = route_original(z, k)
    assert a.experts == b.experts and a.gate_weights == b.gate_weights


@given(logit_vectors, st.data())
def test_strategy_invariants(case, data):
    z, mask = case
    n = len(z)
    k = data.draw(st.integers(1, n))
    j = data.draw(st.integers(0, k))
    w = softmax(z)
    top = [int(e) for e in rank(z)[:k]]
    sels = [
        route_max_rank(z, mask, k, data.draw(st.integers(0, n)), j),
        route_cumsum(z, mask, k, data.draw(st.floats(0, 1)), j),
        route_cache_prior(z, mask, k, data.draw(st.floats(0, 1)), data.draw(st.floats(0, 50)), j),
    ]
    for sel in sels:
        assert len(set(sel.experts)) == k
        # gate weights are the untouched router probabilities
        assert sel.probs == tuple(float(w[e]) for e in sel.experts)
        assert math.fsum(sel.gate_weights) == pytest.approx(1.0, abs=1e-9)
        assert set(top[:j]) <= set(sel.experts)
        assert sel.swapped == tuple(e not in top for e in sel.experts)


@given(logit_vectors, st.data())
def test_max_rank_cached_selection_grows_with_m(case, data):
    z, mask = case
    n = len(z)
    k = data.draw(st.integers(1, n))
    j = data.draw(st.integers(0, k))
    r = rank(z)
    prev_candidates = set()
    for m in range(n + 1):
        candidates = {int(e) for e in r[:m] if mask[e]}
        assert prev_candidates <= candidates
        prev_candidates = candidates
        sel = route_max_rank(z, mask, k, m, j)
        cached_sel = {e for e in sel.experts if mask[e]}
        # every cached pick is an original top-K member or a promotion candidate
        assert cached_sel <= candidates | {int(e) for e in r[:k]}


@given(logit_vectors, st.floats(0, 1), st.data())
def test_cumsum_reduces_to_max_rank(case, p, data):
    z, mask = case
    k = data.draw(st.integers(1, len(z)))
    j = data.draw(st.integers(0, k))
    w = softmax(z)
    order = sorted(range(len(z)), key=lambda e: (-z[e], e))
    m, acc = 0, 0.0
    while acc < p and m < len(z):
        acc += w[order[m]]
        m += 1
    assert route_cumsum(z, mask, k, p, j).experts == route_max_rank(z, mask, k, m, j).experts


@given(logit_vectors, st.data())
def test_saturating_prior_puts_cache_first(case, data):
    z, mask = case
    n = len(z)
    k = data.draw(st.integers(1, n))
    j = data.draw(st.integers(0, k))
    tracker = DeltaTracker(DeltaMode("exact"), saturating=True)
    delta = tracker.estimate(z)
    assert delta > max(z) - min(z)
    sel = route_cache_prior(z, mask, k, 1.0, delta, j)
    top_j = {int(e) for e in rank(z)[:j]}
    boosted = {e for e in range(n) if mask[e]} | top_j
    chosen = set(sel.experts)
    if len(boosted) >= k:
        assert chosen <= boosted
    else:
        assert boosted <= chosen


# -- swap random --------------------------------------------------------------

def test_swap_rank_random_pool():
    seen = set()
    for seed in range(40):
        sel = swap_rank_random([9, 1, 1, 1], 2, 1, seed)
        assert sel.experts[1] == 1
        seen.add(sel.experts[0])
        assert sel.swapped == (True, False)
    assert seen == {2, 3}


def test_swap_rank_random_deterministic_and_exhausted():
    z = [0.2, 1.4, -0.3, 0.9, 0.0, 0.5]
    assert swap_rank_random(z, 3, 2, 11) == swap_rank_random(z, 3, 2, 11)
    sel = swap_rank_random([1.0, 2.0], 2, 1, 0)
    assert sel.flagged and sel.experts == (1, 0)


# -- delta tracking -----------------------------------------------------------

def test_running_mean_tracker():
    t = DeltaTracker()
    assert t.estimate() == 0.0
    observe_delta(t, [0.0, 2.0])
    observe_delta(t, [1.0, 5.0, 3.0])
    assert t.estimate() == 3.0
    fresh = observe_delta(DeltaTracker(), [5.0, 0.0])
    assert fresh.estimate() == 5.0


def test_ema_tracker():
    t = DeltaTracker(DeltaMode("ema", decay=0.5))
    observe_delta(t, [0.0, 2.0])
    assert t.estimate() == 2.0
    observe_delta(t, [0.0, 4.0])
    assert t.estimate() == 3.0


def test_calibrated_and_exact_trackers():
    logits = np.array([[[0.0, 2.0], [0.0, 1.0]], [[0.0, 4.0], [1.0, 2.0]]])
    consts = calibrate_deltas(logits)
    assert consts == (3.0, 1.0)
    t = DeltaTracker(DeltaMode("calibrated", constants=consts), layer=1)
    observe_delta(t, [0.0, 100.0])
    assert t.estimate() == 1.0
    ex = DeltaTracker(DeltaMode("exact"))
    assert ex.estimate([1.0, 4.0, 2.0]) == 3.0
    observe_delta(ex, [0.0, 7.0])
    assert ex.estimate() == 7.0


def test_strategy_validation():
    with pytest.raises(InvalidParam):
        Strategy("prior", 1.5)
    with pytest.raises(InvalidParam):
        Strategy("maxrank", 1.5)
    model = ModelConfig("m", 1, 8, 2, top_j=1)
    with pytest.raises(InvalidParam):
        Strategy("prune", 3).validate(model)
    with pytest.raises(InvalidParam):
        Strategy("maxrank", 9).validate(model)
    with pytest.raises(InvalidParam):
        Strategy("original", top_j=3).validate(model)
    with pytest.raises(InvalidParam):
        Strategy("prior", 0.5, saturating=True)
    assert Strategy("prior", 0.5).cache_aware and not Strategy("prune", 1).cache_aware


def test_route_dispatch_matches_direct_calls():
    z = [0.3, 2.0, -1.0, 0.7, 1.1]
    mask = [True, False, True, False, False]
    assert route(z, mask, Strategy("maxrank", 3, top_j=1), 2) == route_max_rank(z, mask, 2, 3, 1)
    assert route(z, mask, Strategy("prior", 0.4, top_j=1), 2, delta=2.0) == \
        route_cache_prior(z, mask, 2, 0.4, 2.0, 1)
