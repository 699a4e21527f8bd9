"""Deterministic toy environments with known reward functions.

Step and reward functions are pure and vectorized: they accept a single
state/action or stacked arrays of shape (N, dim), which is what the planner
feeds them when an environment stands in for the learned model.
"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .errors import ConfigError
from .utils import get_logger

logger = get_logger(__name__)

@dataclass(frozen=True, eq=False)
class EnvSpec:
    """Dimensions, bounds, episode length and the pure dynamics of one task."""

    name: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    horizon: int
    n_trials: int
    reward: Callable[[np.ndarray, np.ndarray], np.ndarray]
    step: Callable[[np.ndarray, np.ndarray], np.ndarray]
    reset: Callable[[object], np.ndarray]

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError(f"{self.name}: horizon must be at least one step")
        if self.action_low.shape != (self.action_dim,) or self.action_high.shape != (self.action_dim,):
            raise ConfigError(f"{self.name}: action bounds must have shape ({self.action_dim},)")

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.action_low, self.action_high

    def clip_action(self, action: np.ndarray) -> np.ndarray:
        return np.clip(action, self.action_low, self.action_high)

    def random_action(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.action_low, self.action_high)

# -- pendulum swing-up ------------------------------------------------------

PENDULUM_DT = 0.05
PENDULUM_GRAVITY = 10.0
PENDULUM_MASS = 1.0
PENDULUM_LENGTH = 1.0
PENDULUM_MAX_SPEED = 8.0
PENDULUM_MAX_TORQUE = 2.0

def wrap_angle(theta):
    return ((theta + np.pi) % (2 * np.pi)) - np.pi

def pendulum_state(theta: float, theta_dot: float) -> np.ndarray:
    return np.array([math.cos(theta), math.sin(theta), theta_dot])

def _pendulum_angle(state: np.ndarray) -> np.ndarray:
    return np.arctan2(state[..., 1], state[..., 0])

def pendulum_reward(state, action):
    """-(wrap(theta)^2 + 0.1 theta_dot^2 + 0.001 u^2); 0 only upright and at rest."""
    state = np.asarray(state, dtype=np.float64)
    u = np.clip(np.asarray(action, dtype=np.float64)[..., 0], -PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE)
    theta = wrap_angle(_pendulum_angle(state))
    return -(theta ** 2 + 0.1 * state[..., 2] ** 2 + 0.001 * u ** 2)

def pendulum_step(state, action):
    state = np.asarray(state, dtype=np.float64)
    u = np.clip(np.asarray(action, dtype=np.float64)[..., 0], -PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE)
    theta = _pendulum_angle(state)
    theta_dot = state[..., 2]
    g, m, l = PENDULUM_GRAVITY, PENDULUM_MASS, PENDULUM_LENGTH
    theta_dot = theta_dot + (3 * g / (2 * l) * np.sin(theta) + 3.0 / (m * l ** 2) * u) * PENDULUM_DT
    theta_dot = np.clip(theta_dot, -PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED)
    theta = theta + theta_dot * PENDULUM_DT
    return np.stack([np.cos(theta), np.sin(theta), theta_dot], axis=-1)

def pendulum_reset(seed) -> np.ndarray:
    """Hanging position with a little angle and velocity noise."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    theta = np.pi + rng.uniform(-0.1, 0.1)
    theta_dot = rng.uniform(-0.1, 0.1)
    return pendulum_state(theta, theta_dot)

def pendulum_swingup() -> EnvSpec:
    return EnvSpec(
        name="pendulum",
        state_dim=3,
        action_dim=1,
        action_low=np.array([-PENDULUM_MAX_TORQUE]),
        action_high=np.array([PENDULUM_MAX_TORQUE]),
        horizon=200,
        n_trials=30,
        reward=pendulum_reward,
        step=pendulum_step,
        reset=pendulum_reset,
    )

# -- point pusher -----------------------------------------------------------

PUSHER_DT = 0.1
PUSHER_DAMPING = 0.9
PUSHER_FRICTION = 0.8
CONTACT_RADIUS = 0.15
PUSHER_GOAL = np.array([1.0, 0.5])

def _pusher_parts(state: np.ndarray):
    return state[..., 0:2], state[..., 2:4], state[..., 4:6], state[..., 6:8]

def pusher_reward(state, action):
    """-(|puck - goal| + 0.1 |robot - puck| + 0.01 |u|^2)."""
    state = np.asarray(state, dtype=np.float64)
    u = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    robot, _, puck, _ = _pusher_parts(state)
    return -(
        np.linalg.norm(puck - PUSHER_GOAL, axis=-1)
        + 0.1 * np.linalg.norm(robot - puck, axis=-1)
        + 0.01 * np.sum(u ** 2, axis=-1)
    )

def pusher_step(state, action):
    """Damped point mass; contact hands the robot's normal velocity to the puck."""
    state = np.asarray(state, dtype=np.float64)
    u = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    robot, robot_vel, puck, puck_vel = _pusher_parts(state)
    robot_vel = PUSHER_DAMPING * robot_vel + PUSHER_DT * u
    robot = robot + PUSHER_DT * robot_vel

    offset = puck - robot
    dist = np.linalg.norm(offset, axis=-1, keepdims=True)
    normal = np.divide(offset, dist, out=np.zeros_like(offset), where=dist > 1e-9)
    approach = np.sum(robot_vel * normal, axis=-1, keepdims=True)
    in_contact = (dist < CONTACT_RADIUS) & (approach > 0)
    transfer = np.where(in_contact, approach, 0.0) * normal

    puck_vel = PUSHER_FRICTION * puck_vel + transfer
    robot_vel = robot_vel - transfer
    puck = puck + PUSHER_DT * puck_vel
    return np.concatenate([robot, robot_vel, puck, puck_vel], axis=-1)

def pusher_reset(seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    robot = np.array([-0.5, 0.0]) + rng.uniform(-0.05, 0.05, size=2)
    puck = np.array([0.0, 0.0]) + rng.uniform(-0.05, 0.05, size=2)
    return np.concatenate([robot, np.zeros(2), puck, np.zeros(2)])

def point_pusher() -> EnvSpec:
    return EnvSpec(
        name="pusher2d",
        state_dim=8,
        action_dim=2,
        action_low=-np.ones(2),
        action_high=np.ones(2),
        horizon=150,
        n_trials=40,
        reward=pusher_reward,
        step=pusher_step,
        reset=pusher_reset,
    )

ENVIRONMENTS: Dict[str, Callable[[], EnvSpec]] = {
    "pendulum": pendulum_swingup,
    "pusher2d": point_pusher,
}

def make_env(name: str) -> EnvSpec:
    """Look up an environment by its registry name."""
    try:
        return ENVIRONMENTS[name]()
    except KeyError:
        raise ConfigError(f"Unknown environment '{name}' (available: {', '.join(sorted(ENVIRONMENTS))})") from None

def rollout(
    env: EnvSpec,
    policy: Callable[[np.ndarray, int], np.ndarray],
    seed,
    initial_state: Optional[np.ndarray] = None,
):
    """Run one episode; returns (states, actions, next_states, rewards)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    state = env.reset(rng) if initial_state is None else np.asarray(initial_state, dtype=np.float64)
    states, actions, next_states, rewards = [], [], [], []
    for t in range(env.horizon):
        action = env.clip_action(np.asarray(policy(state, t), dtype=np.float64))
        reward = float(env.reward(state, action))
        next_state = env.step(state, action)
        states.append(state)
        actions.append(action)
        next_states.append(next_state)
        rewards.append(reward)
        state = next_state
    return np.array(states), np.array(actions), np.array(next_states), np.array(rewards)

def random_policy_baseline(env: EnvSpec, episodes: int = 100, seed: int = 0) -> float:
    """Mean episode return of uniformly random actions; fixed for a given seed."""
    rng = np.random.default_rng(seed)
    returns = []
    for _ in range(episodes):
        _, _, _, rewards = rollout(env, lambda state, t: env.random_action(rng), rng)
        returns.append(rewards.sum())
    baseline = float(np.mean(returns))
    logger.debug(f"Random-policy baseline on {env.name}: {baseline:.2f} over {episodes} episodes")
    return baseline
