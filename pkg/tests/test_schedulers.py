"""Tests for PBT, PBT with backtracking and Hyperband planning."""

import warnings

import pytest

from tune_mbrl.confspace import Configuration
from tune_mbrl.errors import InvalidBudget, PopulationTooSmall
from tune_mbrl.schedulers import (
    CLONE_FROM,
    CONTINUE,
    Elite,
    EliteArchive,
    PbtOptions,
    hyperband_plan,
    pbt_bt_step,
    pbt_step,
    plan_total_trials,
    random_search_plan,
    successive_halving_promote,
)
from tune_mbrl.trainable import synthetic_space

def _population(n):
    scores = [(m, float(m)) for m in range(n)]
    configs = {m: Configuration({"h": 0.05 + 0.09 * m}) for m in range(n)}
    return scores, configs

def _clones(directives):
    return {d.member: d for d in directives if d.action == CLONE_FROM}

def test_pbt_replaces_bottom_with_top():
    scores, configs = _population(10)
    directives = pbt_step(scores, PbtOptions(population_size=10), synthetic_space(), 0, configs)
    clones = _clones(directives)
    assert sorted(clones) == [0, 1]
    assert all(d.donor in (8, 9) for d in clones.values())
    assert [d.member for d in directives] == list(range(10))
    assert all(d.action == CONTINUE for d in directives if d.member not in clones)

def test_pbt_small_population_replaces_one():
    scores, configs = _population(5)
    directives = pbt_step(scores, PbtOptions(population_size=5), synthetic_space(), 1, configs)
    assert list(_clones(directives)) == [0]

def test_pbt_too_small_population_warns():
    scores, configs = _population(4)
    with pytest.warns(PopulationTooSmall):
        directives = pbt_step(scores, PbtOptions(population_size=4, quantile=0.2), synthetic_space(), 0, configs)
    assert all(d.action == CONTINUE for d in directives)

def test_pbt_is_deterministic():
    scores, configs = _population(10)
    opts = PbtOptions(population_size=10)
    first = pbt_step(scores, opts, synthetic_space(), 5, configs)
    second = pbt_step(scores, opts, synthetic_space(), 5, configs)
    assert first == second

def test_pbt_explore_split():
    scores, configs = _population(10)
    opts = PbtOptions(population_size=10, p_perturb=0.75)
    kinds = []
    for seed in range(5000):
        kinds += [d.explore for d in _clones(pbt_step(scores, opts, synthetic_space(), seed, configs)).values()]
    assert abs(kinds.count("perturb") / len(kinds) - 0.75) <= 0.02

def test_pbt_clone_records_copy_history():
    scores, configs = _population(10)
    opts = PbtOptions(population_size=10, copy_history=False)
    assert all(not d.copy_history for d in _clones(pbt_step(scores, opts, synthetic_space(), 0, configs)).values())

def test_hyperband_plan_matches_budget_ladder():
    plan = hyperband_plan(33, 300, 3)
    assert plan.s_max == 2
    first_rungs = [(b.n_configs, b.rungs[0].budget) for b in plan.brackets]
    assert first_rungs == [(9, 33), (5, 100), (3, 300)]
    assert [r.budget for r in plan.brackets[0].rungs] == [33, 100, 300]
    assert [r.n_configs for r in plan.brackets[0].rungs] == [9, 3, 1]

def test_hyperband_collapsed_budget():
    plan = hyperband_plan(1, 1, 3)
    assert plan.s_max == 0
    assert len(plan.brackets) == 1
    assert (plan.brackets[0].n_configs, plan.brackets[0].rungs[0].budget) == (1, 1)

def test_hyperband_pusher_budgets():
    plan = hyperband_plan(8, 80, 3)
    assert plan.s_max == 2
    assert plan.brackets[0].rungs[0].budget == 9

def test_hyperband_rejects_inverted_budgets():
    with pytest.raises(InvalidBudget):
        hyperband_plan(10, 5, 3)

def test_hyperband_iterations_cycle_brackets():
    plan = hyperband_plan(1, 9, 3, n_iterations=4)
    assert [b.s for _, b in plan.iter_brackets()] == [2, 1, 0, 2]

def test_continuation_accounting():
    plan = hyperband_plan(33, 300, 3)
    first = 9 * 33 + 3 * (100 - 33) + 1 * (300 - 100)
    second = 5 * 100 + 1 * (300 - 100)
    third = 3 * 300
    assert plan_total_trials(plan) == first + second + third

def test_random_search_plan():
    plan = random_search_plan(4, 3)
    assert plan_total_trials(plan) == 12

@pytest.mark.parametrize("n, eta, survivors", [(9, 3, 3), (5, 3, 1), (2, 3, 0)])
def test_successive_halving_counts(n, eta, survivors):
    scores = [(i, float(i)) for i in range(n)]
    kept = successive_halving_promote(scores, eta)
    assert len(kept) == survivors
    assert kept == list(range(n - 1, n - 1 - survivors, -1))

def test_successive_halving_ties_favor_earlier():
    assert successive_halving_promote([("a", 1.0), ("b", 1.0), ("c", 1.0)], 3) == ["a"]

def test_archive_keeps_best_within_capacity():
    archive = EliteArchive(capacity=2)
    for score in (1.0, 3.0, 2.0, 0.5):
        archive.offer(Elite(score, b"", Configuration({"h": 0.1}), 0, 1, 1))
    assert [e.score for e in archive.entries] == [3.0, 2.0]
    assert not archive.accepts(float("-inf"))

def _bt_step(step_index, archive):
    scores, configs = _population(10)
    opts = PbtOptions(population_size=10)
    return pbt_bt_step(
        scores, archive, opts, synthetic_space(), 11, configs, step_index,
        checkpoint_of=lambda m: bytes([m]), backtrack_every=30,
    )

def _seeded_archive():
    archive = EliteArchive(capacity=10)
    archive.offer(Elite(100.0, b"elite", Configuration({"h": 0.5}), 9, 3, 15))
    return archive

def test_backtracking_waits_for_gate():
    directives, archive = _bt_step(29, _seeded_archive())
    clones = _clones(directives)
    assert all(d.elite is None and d.donor is not None for d in clones.values())
    assert len(archive) == 3

def test_backtracking_fires_on_gate():
    directives, archive = _bt_step(30, _seeded_archive())
    clones = _clones(directives)
    assert sorted(clones) == [0, 1]
    assert all(d.elite is not None for d in clones.values())
    live = [d.new_config if d.member in clones else Configuration({"h": 0.05 + 0.09 * d.member}) for d in directives]
    keys = [c.key() for c in live]
    assert len(set(keys)) == len(keys)

def test_backtracking_skipped_with_empty_archive():
    scores, configs = _population(10)
    opts = PbtOptions(population_size=10, quantile=0.2)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        directives, archive = pbt_bt_step(
            [(m, float("-inf")) for m, _ in scores], EliteArchive(), opts, synthetic_space(), 0, configs, 30,
            checkpoint_of=lambda m: b"",
        )
    assert len(archive) == 0
    assert all(d.elite is None for d in directives)

def test_backtracking_offers_top_members():
    _, archive = _bt_step(1, EliteArchive(capacity=10))
    assert [e.member for e in archive.entries] == [9, 8]
    assert archive.entries[0].checkpoint == bytes([9])
