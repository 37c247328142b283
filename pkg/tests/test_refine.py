import math

import numpy as np
import pytest

from longattn.attention import AttentionInput, full_attention, random_input
from longattn.errors import ConfigurationError, DimensionError, EmptyCalibrationError
from longattn.planted import planted_input
from longattn.refine import (
    RefineConfig,
    attention_recall,
    head_recall,
    offline_search,
    refine_plan,
)
from longattn.vertical_slash import (
    CriticalSet,
    HeadBudget,
    SparsityPlan,
    select_for_input,
    sparse_attention,
)


def _truncate(inp: AttentionInput, n: int) -> AttentionInput:
    return AttentionInput(
        inp.q[:n], inp.k[:n], inp.v[:n], inp.positions_q[:n], inp.positions_k[:n], inp.rope_base
    )


def test_recall_identical_sets():
    lse = np.array([0.3, -2.0, 5.0])
    rep = attention_recall(lse, lse)
    assert rep.per_query.tolist() == [1.0, 1.0, 1.0] and rep.aggregate == 1.0


def test_recall_two_equal_keys_one_selected():
    q = np.array([[1.0, 0.0], [1.0, 0.0]])
    k = np.array([[1.0, 0.0], [1.0, 0.0]])
    inp = AttentionInput(q, k, np.eye(2), [0, 0], [0, 0])
    crit = CriticalSet((0,), (), 2)
    rep = attention_recall(sparse_attention(inp, crit).lse, full_attention(inp).lse)
    assert rep.per_query[1] == pytest.approx(0.5, abs=1e-12)


def test_recall_three_keys_hand_case():
    lse_full = math.log(math.exp(0) + math.exp(0) + math.exp(math.log(2)))
    lse_sparse = math.log(2)
    assert lse_full == pytest.approx(math.log(4), abs=1e-15)
    assert attention_recall([lse_sparse], [lse_full]).aggregate == pytest.approx(0.5, abs=1e-12)


def test_recall_is_clamped_and_checked():
    assert attention_recall([1.0 + 1e-15], [1.0]).per_query[0] == 1.0
    with pytest.raises(DimensionError):
        attention_recall([1.0, 2.0], [1.0])


def test_recall_monotone_under_superset():
    rng = np.random.default_rng(0)
    for trial in range(50):
        n = int(rng.integers(2, 80))
        inp = random_input(n, 8, seed=trial)
        small = CriticalSet(rng.choice(n, 2), rng.choice(n, 2), n)
        big = small.union(CriticalSet(rng.choice(n, 3), rng.choice(n, 3), n))
        full = full_attention(inp).lse
        a = attention_recall(sparse_attention(inp, small).lse, full).aggregate
        b = attention_recall(sparse_attention(inp, big).lse, full).aggregate
        assert b >= a - 1e-12


def test_refine_already_good_head_unchanged():
    inp = planted_input(96, 32, columns=[1], seed=0)
    plan = SparsityPlan.uniform(1, 1, HeadBudget(96, 96))
    out, rep = refine_plan({(0, 0): [inp]}, plan, RefineConfig(threshold=0.9, last_q=16))
    assert out == plan and rep.heads[0].rounds == 0
    assert rep.heads[0].final_recall == 1.0


def test_refine_planted_column_from_empty_budget():
    inp = planted_input(128, 64, columns=[2], seed=0)
    cfg = RefineConfig(
        threshold=0.9, vertical_increment=1, slash_increment=1, last_q=32, forced=False
    )
    out, rep = refine_plan({(0, 0): [inp]}, SparsityPlan.uniform(1, 1, HeadBudget(0, 0)), cfg)
    head = rep.heads[0]
    assert head.initial_recall < 0.9
    assert out[(0, 0)].vertical >= 1 and head.final_recall > 0.99
    assert head.rounds == 1


def test_refine_budgets_never_decrease():
    rng = np.random.default_rng(1)
    for trial in range(200):
        n = int(rng.integers(4, 40))
        start = HeadBudget(int(rng.integers(0, 6)), int(rng.integers(0, 6)))
        cfg = RefineConfig(
            threshold=float(rng.uniform(0.05, 0.99)),
            vertical_increment=int(rng.integers(1, 4)),
            slash_increment=int(rng.integers(1, 4)),
            max_rounds=int(rng.integers(1, 4)),
            budget_cap=HeadBudget(int(rng.integers(0, 12)), int(rng.integers(0, 12))),
            last_q=int(rng.integers(1, n + 1)),
            forced=bool(rng.integers(2)),
        )
        out, rep = refine_plan(
            {(0, 0): [random_input(n, 4, seed=trial)]}, SparsityPlan({(0, 0): start}), cfg
        )
        assert out[(0, 0)].dominates(start)
        assert rep.heads[0].rounds <= cfg.max_rounds
        budgets = [b for b, _ in rep.heads[0].history]
        assert all(b2.dominates(b1) for b1, b2 in zip(budgets, budgets[1:]))


def test_refine_report_is_reproducible():
    inp = planted_input(128, 32, columns=[3, 50], slashes=[7], seed=2)
    calib = {(0, 0): [inp], (0, 1): [planted_input(128, 32, slashes=[20], seed=3)]}
    cfg = RefineConfig(threshold=0.95, last_q=16)
    plan = SparsityPlan.uniform(1, 2, HeadBudget(0, 0))
    out, rep = refine_plan(calib, plan, cfg)
    for head in rep.heads:
        again = head_recall(calib[(head.layer, head.head)], head.final_budget, last_q=16).mean()
        assert again == head.final_recall
    assert refine_plan(calib, plan, cfg)[1].to_csv() == rep.to_csv()
    assert rep.to_csv().splitlines()[0] == (
        "layer,head,rounds,initial_vertical,initial_slash,"
        "final_vertical,final_slash,initial_recall,final_recall"
    )


def test_refine_fraction_reduction():
    inp = planted_input(96, 32, columns=[1], seed=4)
    cfg = RefineConfig(threshold=0.9, last_q=16, reduction="fraction")
    _, rep = refine_plan({(0, 0): [inp]}, SparsityPlan.uniform(1, 1, HeadBudget(0, 0)), cfg)
    assert 0 <= rep.heads[0].final_recall <= 1


def test_refine_stops_at_cap():
    inp = random_input(64, 8, seed=5)
    cfg = RefineConfig(threshold=0.999, budget_cap=HeadBudget(4, 4), last_q=8, forced=False)
    out, rep = refine_plan({(0, 0): [inp]}, SparsityPlan.uniform(1, 1, HeadBudget(0, 0)), cfg)
    assert out[(0, 0)] == HeadBudget(4, 4) and rep.heads[0].hit_cap


def test_refine_errors():
    plan = SparsityPlan.uniform(1, 1, HeadBudget(0, 0))
    with pytest.raises(EmptyCalibrationError) as e:
        refine_plan({}, plan, RefineConfig())
    assert e.value.kind == "empty_calibration"
    with pytest.raises(EmptyCalibrationError):
        refine_plan({(0, 0): []}, plan, RefineConfig())
    with pytest.raises(EmptyCalibrationError):
        refine_plan({(0, 1): [random_input(4, 2)]}, plan, RefineConfig())
    for bad in (dict(threshold=1.0), dict(max_rounds=0), dict(slash_increment=0)):
        with pytest.raises(ConfigurationError):
            RefineConfig(**bad)


def test_offline_search_examples():
    inp = planted_input(128, 64, columns=[2], slashes=[1], seed=0)
    calib = {(0, 0): [inp]}
    grid = [HeadBudget(1, 1), HeadBudget(4, 4), HeadBudget(16, 16)]
    assert offline_search(calib, grid, 0.95, last_q=32, forced=False) == {(0, 0): HeadBudget(1, 1)}
    rnd = {(0, 0): [random_input(64, 8)], (1, 0): [random_input(64, 8, seed=1)]}
    assert set(offline_search(rnd, grid, 0.0, last_q=8).values()) == {HeadBudget(1, 1)}
    single = [HeadBudget(3, 2)]
    assert set(offline_search(rnd, single, 0.99, last_q=8).values()) == {HeadBudget(3, 2)}
    with pytest.raises(ConfigurationError):
        offline_search(rnd, [], 0.5)


def test_long_calibration_fixes_short_search():
    # the planted slash at offset 200 cannot appear in a 128-token sample
    for seed in range(3):
        long = planted_input(256, 64, columns=[5], slashes=[200], seed=seed)
        short = _truncate(long, 128)
        grid = [HeadBudget(1, 0), HeadBudget(1, 1), HeadBudget(4, 4)]
        plan = offline_search({(0, 0): [short]}, grid, 0.95, last_q=64)
        assert plan[(0, 0)] == HeadBudget(1, 0)
        cfg = RefineConfig(threshold=0.95, vertical_increment=1, slash_increment=1, last_q=64)
        refined, rep = refine_plan({(0, 0): [long]}, plan, cfg)
        head = rep.heads[0]
        assert head.initial_recall < 0.95 <= head.final_recall
        assert head.final_recall > head.initial_recall
        assert 200 in select_for_input(long, refined[(0, 0)], 64).slashes
