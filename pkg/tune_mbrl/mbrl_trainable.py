"""PETS-style optimizee: ensemble dynamics, CEM planning and a toy environment."""

from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .confspace import JOINT, Configuration, ParamSpace, load_space
from .dynamics import HIDDEN, ENSEMBLE_SIZE, GaussianEnsemble, ModelTrainHp, TrainingReport, TransitionDataset
from .envs import EnvSpec, make_env, rollout
from .errors import NonFiniteInput, NumericalOverflow
from .planner import PARTICLES, ActionDistribution, CemConfig, EnvironmentModel, mpc_act
from .trainable import SCORE_WINDOW, Trainable
from .utils import get_logger

logger = get_logger(__name__)

DEFAULT_SPACE = "reacher"

class PetsTrainable(Trainable):
    """One population member: learn a dynamics model, then act with MPC.

    Each trial retrains the ensemble on the whole dataset (continuing from the
    current weights), runs one episode with CEM planning and appends the
    episode's transitions. Trial 0 acts uniformly at random. Parameters of the
    group that is not being tuned take the defaults of `space_file`.
    """

    def __init__(
        self,
        env: Union[str, EnvSpec] = "pendulum",
        group: str = JOINT,
        space_file: str = DEFAULT_SPACE,
        space: Optional[ParamSpace] = None,
        seed: int = 0,
        window: int = SCORE_WINDOW,
        oracle: bool = False,
        ensemble_size: int = ENSEMBLE_SIZE,
        hidden: Sequence[int] = HIDDEN,
        particles: int = PARTICLES,
    ):
        joint = load_space(space_file, JOINT)
        super().__init__(space if space is not None else load_space(space_file, group), seed=seed, window=window)
        self.env = make_env(env) if isinstance(env, str) else env
        self.defaults = joint.defaults()
        self.oracle = oracle
        self.particles = particles
        self.model = GaussianEnsemble(
            self.env.state_dim, self.env.action_dim, ensemble_size=ensemble_size, hidden=hidden, seed=seed
        )
        self.dataset = TransitionDataset(self.env.state_dim, self.env.action_dim)
        self.warm_start: Optional[ActionDistribution] = None
        self.last_report: Optional[TrainingReport] = None

    def full_config(self, config: Configuration) -> Configuration:
        """Tuned values on top of the defaults for everything else."""
        return self.defaults.merged(config)

    def _run_trial(self, config: Configuration, rng: np.random.Generator) -> float:
        trial = self.trial_index
        hp = self.full_config(config)
        if trial == 0:
            def policy(state, t):
                return self.env.random_action(rng)
        else:
            if not self.oracle:
                self.last_report = self.model.train(self.dataset, ModelTrainHp.from_configuration(hp), rng)
            cem = CemConfig.from_configuration(hp, particles=self.particles)
            model = EnvironmentModel(self.env) if self.oracle else self.model
            self.warm_start = None

            def policy(state, t):
                action, self.warm_start = mpc_act(model, self.env, state, cem, self.warm_start, rng)
                return action

        try:
            states, actions, next_states, rewards = rollout(self.env, policy, rng)
        except NonFiniteInput as e:
            raise NumericalOverflow(f"Trial {trial}: {e}") from e
        if not (np.all(np.isfinite(next_states)) and np.all(np.isfinite(rewards))):
            raise NumericalOverflow(f"Trial {trial}: environment produced non-finite values")
        self.dataset.append(states, actions, next_states, rewards, trial=trial)
        episode_return = float(rewards.sum())
        logger.debug(f"{self.env.name} trial {trial}: return {episode_return:.2f}, {len(self.dataset)} transitions")
        return episode_return

    def _save_model(self) -> bytes:
        return self.model.to_bytes()

    def _load_model(self, data: bytes):
        self.model.load_bytes(data)

    def _save_history(self) -> bytes:
        return self.dataset.to_bytes()

    def _load_history(self, data: bytes):
        self.dataset = TransitionDataset.from_bytes(data)

    @property
    def history_size(self) -> int:
        return len(self.dataset)

def run_trial(trainable: PetsTrainable, hp: Configuration, seed=None) -> Tuple[PetsTrainable, float]:
    """One outer-loop iteration: retrain, act for an episode, aggregate the data."""
    value = trainable.step(hp, seed)
    return trainable, value
