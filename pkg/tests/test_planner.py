"""Tests for CEM planning and trajectory sampling."""

import math

import numpy as np
import pytest

from tune_mbrl.envs import make_env, pendulum_state, rollout
from tune_mbrl.errors import ConfigError, DegenerateVariance, NonFiniteInput
from tune_mbrl.planner import (
    ActionDistribution,
    CemConfig,
    EnvironmentModel,
    TrajectorySampler,
    cem_optimize,
    evaluate_sequence,
    mpc_act,
)

LOW, HIGH = np.array([-5.0]), np.array([5.0])

def quadratic(batch):
    return -((batch[:, 0, 0] - 2.0) ** 2)

def test_cem_finds_quadratic_optimum():
    cfg = CemConfig(plan_horizon=1, population_size=100, elites_ratio=0.1, iterations=8)
    init = ActionDistribution.initial(LOW, HIGH, 1)
    hits = sum(
        abs(cem_optimize(quadratic, (LOW, HIGH), cfg, init, seed).mean[0, 0] - 2.0) < 0.1
        for seed in range(100)
    )
    assert hits >= 95

def test_full_retention_returns_init():
    cfg = CemConfig(plan_horizon=1, population_size=50, alpha=1.0, iterations=4)
    init = ActionDistribution.initial(LOW, HIGH, 1)
    final = cem_optimize(quadratic, (LOW, HIGH), cfg, init, 0)
    np.testing.assert_array_equal(final.mean, init.mean)
    np.testing.assert_array_equal(final.variance, init.variance)

def test_degenerate_variance():
    cfg = CemConfig(plan_horizon=1, population_size=10, alpha=1.0)
    init = ActionDistribution(np.zeros((1, 1)), np.zeros((1, 1)))
    with pytest.raises(DegenerateVariance):
        cem_optimize(quadratic, (LOW, HIGH), cfg, init, 0)

def test_elite_count():
    assert CemConfig(population_size=500, elites_ratio=0.1).n_elites == 50

def test_invalid_cem_settings():
    with pytest.raises(ConfigError):
        CemConfig(elites_ratio=0.0)
    with pytest.raises(ConfigError):
        CemConfig(alpha=1.5)

def test_non_finite_scores_rank_last():
    def objective(batch):
        scores = -np.abs(batch[:, 0, 0])
        return np.where(batch[:, 0, 0] > 0, np.nan, scores)

    cfg = CemConfig(plan_horizon=1, population_size=200, elites_ratio=0.1, iterations=5)
    final = cem_optimize(objective, (LOW, HIGH), cfg, ActionDistribution.initial(LOW, HIGH, 1), 0)
    assert final.mean[0, 0] <= 0.0

def test_warm_start_shift():
    low, high = np.array([-2.0]), np.array([2.0])
    dist = ActionDistribution(np.arange(4.0)[:, None] * 0.1, np.full((4, 1), 0.01))
    shifted = dist.shifted(low, high, 4)
    np.testing.assert_allclose(shifted.mean[:, 0], [0.1, 0.2, 0.3, 0.0])
    np.testing.assert_allclose(shifted.variance, np.ones((4, 1)))

class DeterministicEnsemble:
    ensemble_size = 3

    def sample_next(self, states, actions, members, rng):
        return 0.5 * states + actions

def _reward(states, actions):
    return -np.sum(states ** 2, axis=-1)

def test_identical_members_give_identical_particles():
    sequence = np.linspace(-1, 1, 6)[:, None]
    state = np.array([0.4])
    many = evaluate_sequence(DeterministicEnsemble(), _reward, state, sequence, particles=8, seed=0)
    one = evaluate_sequence(DeterministicEnsemble(), _reward, state, sequence, particles=1, seed=1)
    assert many == pytest.approx(one, abs=1e-12)

def test_horizon_one_is_immediate_reward():
    env = make_env("pendulum")
    state = pendulum_state(1.0, 0.5)
    action = np.array([[0.7]])
    value = evaluate_sequence(EnvironmentModel(env), env.reward, state, action)
    assert value == pytest.approx(float(env.reward(state, action[0])))

def test_environment_as_oracle_matches_rollout():
    env = make_env("pendulum")
    start = pendulum_state(math.pi, 0.0)
    _, _, _, rewards = rollout(env, lambda s, t: np.zeros(1), seed=0, initial_state=start)
    planned = evaluate_sequence(EnvironmentModel(env), env.reward, start, np.zeros((env.horizon, 1)))
    assert planned == pytest.approx(rewards.sum(), abs=1e-9)

def test_sampler_counts_model_steps():
    env = make_env("pendulum")
    sampler = TrajectorySampler(EnvironmentModel(env), env.reward, particles=3)
    sampler(pendulum_state(0.0, 0.0), np.zeros((4, 7, 1)), np.random.default_rng(0))
    assert sampler.calls == 4 * 3 * 7

def test_zero_alpha_with_all_elites_refits_the_samples():
    seen = []

    def objective(batch):
        seen.append(batch.copy())
        return quadratic(batch)

    cfg = CemConfig(plan_horizon=3, population_size=64, elites_ratio=1.0, alpha=0.0, iterations=1)
    low, high = np.full(2, -5.0), np.full(2, 5.0)
    final = cem_optimize(objective, (low, high), cfg, ActionDistribution.initial(low, high, 3), 5)
    np.testing.assert_allclose(final.mean, seen[0].mean(axis=0))
    np.testing.assert_allclose(final.variance, seen[0].var(axis=0))

def _plan_with(reward, seed=3):
    cfg = CemConfig(plan_horizon=4, population_size=60, elites_ratio=0.2, iterations=3, particles=2)
    rng = np.random.default_rng(seed)
    sampler = TrajectorySampler(DeterministicEnsemble(), reward, particles=cfg.particles)
    state = np.array([0.8])
    final = cem_optimize(lambda seqs: sampler(state, seqs, rng), (LOW, HIGH), cfg, ActionDistribution.initial(LOW, HIGH, 4), rng)
    return final.mean[0]

def test_constant_reward_shift_keeps_the_plan():
    shifted = _plan_with(lambda s, a: _reward(s, a) + 10.0)
    np.testing.assert_allclose(_plan_with(_reward), shifted, atol=1e-12)

@pytest.mark.parametrize("population, particles, horizon", [(10, 1, 3), (20, 4, 5), (7, 3, 12)])
def test_model_calls_scale_with_population_particles_and_horizon(population, particles, horizon):
    cfg = CemConfig(plan_horizon=horizon, population_size=population, iterations=3, particles=particles)
    sampler = TrajectorySampler(DeterministicEnsemble(), _reward, particles=particles)
    rng = np.random.default_rng(0)
    state = np.array([0.2])
    cem_optimize(lambda seqs: sampler(state, seqs, rng), (LOW, HIGH), cfg, ActionDistribution.initial(LOW, HIGH, horizon), rng)
    assert sampler.calls == cfg.iterations * population * particles * horizon


def test_mpc_actions_stay_in_bounds():
    env = make_env("pendulum")
    model = EnvironmentModel(env)
    cfg = CemConfig(plan_horizon=5, population_size=20, iterations=2, particles=1)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        state = pendulum_state(rng.uniform(-math.pi, math.pi), rng.uniform(-8, 8))
        action, dist = mpc_act(model, env, state, cfg, None, rng)
        assert -2.0 <= action[0] <= 2.0
        assert dist.horizon == 5

def test_mpc_is_deterministic():
    env = make_env("pendulum")
    cfg = CemConfig(plan_horizon=10, population_size=50, iterations=3, particles=2)
    state = pendulum_state(2.5, 0.0)
    first, _ = mpc_act(EnvironmentModel(env), env, state, cfg, None, 7)
    second, _ = mpc_act(EnvironmentModel(env), env, state, cfg, None, 7)
    np.testing.assert_array_equal(first, second)

def test_mpc_rejects_non_finite_state():
    env = make_env("pendulum")
    with pytest.raises(NonFiniteInput):
        mpc_act(EnvironmentModel(env), env, np.array([np.nan, 0.0, 0.0]), CemConfig(), None, 0)
