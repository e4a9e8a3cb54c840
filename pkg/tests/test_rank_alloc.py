import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedara.adapters import AdapterConfig, Flavor, SvdAdapter, apply_mask, new_lora_adapter
from fedara.numerics import ContractError, Rng
from fedara.rank_alloc import (
    BudgetSchedule,
    arbitrate,
    budget,
    flatten,
    gen_local_mask,
    is_submask,
    mask_count,
    split_flat,
    triplet_importance,
)
from oracles import adapters_with_scores, all_vote_patterns, arbitrate_oracle, local_mask_matches_oracle

SCHED = BudgetSchedule(32, 8, 5, 50, 100)


def test_budget_examples():
    assert budget(SCHED, 0) == 32
    assert budget(SCHED, 50) == 8
    assert budget(SCHED, 28) == 10
    assert budget(SCHED, 100) == 8


def test_budget_joint_at_warmup_end():
    assert budget(SCHED, 4) == 32
    assert budget(SCHED, 5) == 32


def test_budget_matches_float_formula():
    s = SCHED
    for t in range(s.t_w, s.T - s.t_f):
        p = (t - s.t_w) / (s.T - s.t_f - s.t_w)
        assert budget(s, t) == s.bT + int(np.floor((s.b0 - s.bT) * (1 - p) ** 3 + 1e-12))


schedules = st.integers(1, 60).flatmap(
    lambda T: st.tuples(st.integers(0, 200), st.integers(0, 200), st.integers(0, T - 1), st.just(T))
).flatmap(
    lambda x: st.tuples(st.just(max(x[0], x[1])), st.just(min(x[0], x[1])), st.just(x[2]),
                        st.integers(0, x[3] - x[2] - 1), st.just(x[3]))
)


@settings(max_examples=200, deadline=None)
@given(schedules)
def test_budget_non_increasing_with_exact_endpoints(args):
    s = BudgetSchedule(*args)
    values = [budget(s, t) for t in range(s.T + 1)]
    assert values[0] == s.b0
    assert values[s.T - s.t_f] == s.bT
    assert all(a >= b for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("args", [(8, 9, 0, 0, 10), (8, 2, 5, 5, 10), (8, 2, -1, 0, 10)])
def test_bad_schedule(args):
    with pytest.raises(ContractError):
        BudgetSchedule(*args)


def test_budget_out_of_range():
    with pytest.raises(ContractError):
        budget(SCHED, 101)


def test_importance_hand_example():
    cfg = AdapterConfig(1)
    base = np.zeros((2, 3))
    ad = SvdAdapter(base, np.array([[0.2], [-0.4]]), np.array([0.5]), np.array([[0.1, -0.1, 0.4]]), cfg)
    assert triplet_importance(ad)[0] == pytest.approx(1.0, abs=1e-15)


def test_importance_zero_and_sign_invariant():
    rng = Rng(1)
    cfg = AdapterConfig(3)
    ad = SvdAdapter(np.zeros((6, 6)), rng.normal((6, 3)), rng.normal(3), rng.normal((3, 6)), cfg)
    flipped = SvdAdapter(np.zeros((6, 6)), -ad.B, -ad.E, ad.A * np.sign(rng.normal((3, 6))), cfg)
    assert np.array_equal(triplet_importance(ad), triplet_importance(flipped))
    zero = SvdAdapter(np.zeros((6, 6)), np.zeros((6, 3)), np.zeros(3), np.zeros((3, 6)), cfg)
    assert not triplet_importance(zero).any()


def test_importance_dead_is_neg_inf_and_lora_rejected():
    ad = adapters_with_scores([3.0, 1.0], 2)[0]
    apply_mask(ad, np.array([True, False]))
    assert triplet_importance(ad)[1] == -np.inf
    lora = new_lora_adapter(Rng(0), np.zeros((4, 4)), AdapterConfig(2, flavor=Flavor.LORA))
    with pytest.raises(ContractError):
        triplet_importance(lora)


def test_local_mask_example():
    adapters = adapters_with_scores([1.0, 0.2, 0.9, 0.8], 2)
    mask = gen_local_mask(adapters, 0, BudgetSchedule(2, 2, 0, 0, 1))
    assert [m.tolist() for m in mask] == [[True, False], [True, False]]


def test_local_mask_keeps_all_when_budget_large():
    adapters = adapters_with_scores([1.0, 0.2, 0.9, 0.8], 2)
    apply_mask(adapters[1], np.array([False, True]))
    mask = gen_local_mask(adapters, 0, BudgetSchedule(10, 10, 0, 0, 1))
    assert flatten(mask).tolist() == [True, True, False, True]


def test_local_mask_ties_prefer_lower_index():
    adapters = adapters_with_scores([0.5, 0.5, 0.5, 0.5], 2)
    mask = gen_local_mask(adapters, 0, BudgetSchedule(3, 3, 0, 0, 1))
    assert flatten(mask).tolist() == [True, True, True, False]


def test_local_mask_matches_sort_oracle():
    rng = Rng(2)
    for trial in range(200):
        scores = np.abs(rng.fork(str(trial)).normal(12))
        assert local_mask_matches_oracle(scores, 3, trial % 13)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 100))
def test_local_mask_budget_compliance(seed, t):
    scores = np.round(Rng(seed).normal(16), 1)
    adapters = adapters_with_scores(scores, 4)
    mask = gen_local_mask(adapters, t, SCHED)
    assert mask_count(mask) == min(budget(SCHED, t), 16)


def one_site(*bits):
    return [np.array(bits, dtype=bool)]


def test_arbitrate_examples():
    prev = one_site(True)
    six = [one_site(True)] * 6 + [one_site(False)] * 4
    five = [one_site(True)] * 5 + [one_site(False)] * 5
    assert arbitrate(six, 0.5, prev)[0].tolist() == [True]
    assert arbitrate(five, 0.5, prev)[0].tolist() == [False]
    assert arbitrate([one_site(True)] * 10, 0.5, one_site(False))[0].tolist() == [False]


def test_arbitrate_empty_and_shape_errors():
    with pytest.raises(ContractError):
        arbitrate([], 0.5, one_site(True))
    with pytest.raises(ContractError):
        arbitrate([one_site(True, True)], 0.5, one_site(True))
    with pytest.raises(ContractError):
        arbitrate([one_site(True)], 1.0, one_site(True))


@pytest.mark.parametrize("threshold", [0.3, 0.5, 0.7])
def test_arbitrate_exhaustive(threshold):
    prev = [[True, True, True, False]]
    for masks in all_vote_patterns():
        got = arbitrate([[np.array(s) for s in m] for m in masks], threshold, [np.array(prev[0])])
        assert [g.tolist() for g in got] == arbitrate_oracle(masks, threshold, prev)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=6, max_size=6), st.lists(st.booleans(), min_size=6, max_size=6),
       st.integers(1, 8), st.floats(0, 0.99))
def test_arbitrate_unanimity(bits, extra, k, threshold):
    prev = np.array([a or b for a, b in zip(bits, extra)])
    mask = split_flat(np.array(bits), [2, 4])
    got = arbitrate([mask] * k, threshold, split_flat(prev, [2, 4]))
    assert flatten(got).tolist() == bits


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_global_masks_monotone(seed):
    rng = Rng(seed)
    prev = split_flat(np.ones(8, dtype=bool), [4, 4])
    for rnd in range(5):
        votes = [split_flat(rng.fork(f"{rnd}/{c}").normal(8) > 0, [4, 4]) for c in range(5)]
        nxt = arbitrate(votes, 0.5, prev)
        assert is_submask(nxt, prev)
        assert mask_count(nxt) <= mask_count(prev)
        prev = nxt
