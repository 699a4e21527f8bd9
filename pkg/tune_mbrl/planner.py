"""Cross-entropy method model-predictive control over a dynamics model."""

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .confspace import Configuration, round_half_away
from .envs import EnvSpec
from .errors import ConfigError, DegenerateVariance, NonFiniteInput
from .utils import get_logger

logger = get_logger(__name__)

PARTICLES = 5

@dataclass(frozen=True)
class CemConfig:
    plan_horizon: int = 30
    population_size: int = 500
    elites_ratio: float = 0.1
    alpha: float = 0.1
    iterations: int = 5
    particles: int = PARTICLES

    def __post_init__(self):
        if self.plan_horizon < 1 or self.population_size < 1 or self.iterations < 0 or self.particles < 1:
            raise ConfigError(f"Invalid CEM settings: {self}")
        if not 0.0 < self.elites_ratio <= 1.0:
            raise ConfigError(f"Elites ratio must lie in (0, 1], got {self.elites_ratio}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"CEM alpha must lie in [0, 1], got {self.alpha}")

    @property
    def n_elites(self) -> int:
        count = max(1, int(round_half_away(self.elites_ratio * self.population_size)))
        return min(count, self.population_size)

    @classmethod
    def from_configuration(cls, config: Configuration, particles: int = PARTICLES) -> "CemConfig":
        return cls(
            plan_horizon=config.as_int("plan_horizon"),
            population_size=config.as_int("cem_population_size"),
            elites_ratio=float(config["cem_elites_ratio"]),
            alpha=float(config["cem_alpha"]),
            iterations=config.as_int("cem_iterations"),
            particles=particles,
        )

@dataclass
class ActionDistribution:
    """Diagonal Gaussian over a horizon x action-dim action sequence."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.variance = np.asarray(self.variance, dtype=np.float64)
        if self.mean.shape != self.variance.shape or self.mean.ndim != 2:
            raise ValueError(f"Mean {self.mean.shape} and variance {self.variance.shape} must be equal 2-D shapes")
        if not np.all(np.isfinite(self.variance)) or np.any(self.variance < 0):
            raise ValueError("Variance must be finite and non-negative")

    @property
    def horizon(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def initial(cls, low: np.ndarray, high: np.ndarray, horizon: int) -> "ActionDistribution":
        """Midpoint mean and variance ((high - low) / 4)^2 at every step."""
        mid = (low + high) / 2.0
        var = ((high - low) / 4.0) ** 2
        return cls(np.tile(mid, (horizon, 1)), np.tile(var, (horizon, 1)))

    def shifted(self, low: np.ndarray, high: np.ndarray, horizon: int) -> "ActionDistribution":
        """Warm start for the next control step.

        The mean drops its first step and is padded with the midpoint (or cut)
        to `horizon`; the variance restarts from the initial width.
        """
        fresh = ActionDistribution.initial(low, high, horizon)
        tail = self.mean[1:horizon + 1]
        fresh.mean[:len(tail)] = tail
        return fresh

def cem_optimize(
    objective: Callable[[np.ndarray], np.ndarray],
    bounds: Tuple[np.ndarray, np.ndarray],
    cfg: CemConfig,
    init: ActionDistribution,
    seed,
) -> ActionDistribution:
    """Maximize objective over action sequences with the cross-entropy method.

    objective maps a (population, horizon, action_dim) batch to one score per
    sequence; non-finite scores rank last.
    """
    low, high = (np.asarray(b, dtype=np.float64) for b in bounds)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mean = init.mean.copy()
    var = init.variance.copy()
    if cfg.alpha == 1.0 and not np.any(var > 0):
        raise DegenerateVariance("Zero initial variance with alpha = 1 leaves nothing to optimize")

    n_elites = cfg.n_elites
    for iteration in range(cfg.iterations):
        noise = rng.standard_normal((cfg.population_size,) + mean.shape)
        samples = np.clip(mean + np.sqrt(var) * noise, low, high)
        scores = np.asarray(objective(samples), dtype=np.float64)
        scores = np.where(np.isfinite(scores), scores, -np.inf)
        elite_idx = np.argsort(-scores, kind="stable")[:n_elites]
        elites = samples[elite_idx]
        mean = cfg.alpha * mean + (1.0 - cfg.alpha) * elites.mean(axis=0)
        var = cfg.alpha * var + (1.0 - cfg.alpha) * elites.var(axis=0)
        logger.debug(f"CEM iteration {iteration + 1}/{cfg.iterations}: best {scores[elite_idx[0]]:.3f}")
    return ActionDistribution(mean, var)

class EnvironmentModel:
    """The true environment dynamics behind the ensemble sampling interface."""

    ensemble_size = 1

    def __init__(self, env: EnvSpec):
        self.env = env

    def sample_next(self, states: np.ndarray, actions: np.ndarray, members: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.env.step(states, actions)

class TrajectorySampler:
    """Scores action sequences by rolling particles through a dynamics model.

    Each particle commits to one ensemble member for its whole rollout. The
    sampler counts per-particle model steps in `calls`.
    """

    def __init__(self, model, reward: Callable[[np.ndarray, np.ndarray], np.ndarray], particles: int = PARTICLES):
        if particles < 1:
            raise ConfigError("Need at least one particle")
        self.model = model
        self.reward = reward
        self.particles = particles
        self.calls = 0

    def __call__(self, state: np.ndarray, sequences: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n_seq, horizon, _ = sequences.shape
        n_rows = n_seq * self.particles
        states = np.repeat(np.asarray(state, dtype=np.float64)[None, :], n_rows, axis=0)
        members = rng.integers(self.model.ensemble_size, size=n_rows)
        totals = np.zeros(n_rows)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for t in range(horizon):
                actions = np.repeat(sequences[:, t, :], self.particles, axis=0)
                totals += self.reward(states, actions)
                states = self.model.sample_next(states, actions, members, rng)
                self.calls += n_rows
            values = totals.reshape(n_seq, self.particles).mean(axis=1)
        return np.where(np.isfinite(values), values, -np.inf)

def evaluate_sequence(model, reward, state, actions, particles: int = PARTICLES, seed=0) -> float:
    """Mean particle return of one action sequence; -inf when a rollout blows up."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sequences = np.asarray(actions, dtype=np.float64)
    if sequences.ndim == 1:
        sequences = sequences[:, None]
    sampler = TrajectorySampler(model, reward, particles)
    return float(sampler(state, sequences[None], rng)[0])

def mpc_act(
    model,
    env: EnvSpec,
    state,
    cfg: CemConfig,
    previous: Optional[ActionDistribution],
    seed,
) -> Tuple[np.ndarray, ActionDistribution]:
    """Plan from state and return the first action plus the distribution for warm starts."""
    state = np.asarray(state, dtype=np.float64)
    if not np.all(np.isfinite(state)):
        raise NonFiniteInput("Cannot plan from a non-finite state")
    low, high = env.bounds
    if previous is None:
        init = ActionDistribution.initial(low, high, cfg.plan_horizon)
    else:
        init = previous.shifted(low, high, cfg.plan_horizon)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sampler = TrajectorySampler(model, env.reward, cfg.particles)
    final = cem_optimize(lambda sequences: sampler(state, sequences, rng), (low, high), cfg, init, rng)
    action = np.clip(final.mean[0], low, high)
    return action, final
