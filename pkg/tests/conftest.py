"""Shared fixtures."""

import numpy as np
import pytest

from tune_mbrl.config import RunConfig
from tune_mbrl.confspace import CONTINUOUS, INTEGER, JOINT, ParamSpace, ParamSpec
from tune_mbrl.dynamics import TransitionDataset
from tune_mbrl.storage import RunLog, make_event

@pytest.fixture
def small_space():
    return ParamSpace(
        specs=(
            ParamSpec("learning_rate", CONTINUOUS, 3e-5, 3e-3, True, 3e-4),
            ParamSpec("plan_horizon", INTEGER, 5, 40, False, 30),
            ParamSpec("cem_alpha", CONTINUOUS, 0.05, 0.5, False, 0.1),
        ),
        group=JOINT,
    )

@pytest.fixture
def linear_dataset():
    """s' = 0.9 s + 0.1 a with tiny noise: 2 000 transitions, one dim each."""
    rng = np.random.default_rng(0)
    states = rng.uniform(-1, 1, size=(2000, 1))
    actions = rng.uniform(-1, 1, size=(2000, 1))
    next_states = 0.9 * states + 0.1 * actions + 1e-3 * rng.standard_normal((2000, 1))
    data = TransitionDataset(1, 1)
    for trial in range(10):
        rows = slice(trial * 200, (trial + 1) * 200)
        data.append(states[rows], actions[rows], next_states[rows], np.zeros(200), trial=trial)
    return data

@pytest.fixture
def synthetic_run_config(tmp_path):
    def build(**overrides):
        settings = dict(
            scheduler="pbt",
            env="synthetic",
            population=6,
            budget=10,
            interval=2,
            seed=3,
            out=str(tmp_path / "run"),
        )
        settings.update(overrides)
        return RunConfig(**settings)
    return build

def make_runlog(rows, directives=()):
    """RunLog from (step, member, trial, h, score) rows and directive dicts."""
    events = [make_event("header", scheduler="pbt", members=sorted({r[1] for r in rows}))]
    for step, member, trial, h, score in rows:
        events.append(make_event(
            "trial", step=step, member=member, trial=trial, config={"h": h}, score=score, failed=False,
            **{"return": score},
        ))
    for d in directives:
        events.append(make_event("directive", **d))
    return RunLog(events)

@pytest.fixture
def runlog_factory():
    return make_runlog
