"""Tests for search spaces and configuration sampling."""

import math

import numpy as np
import pytest

from tune_mbrl.confspace import (
    CEM_OPTIMIZER,
    CONTINUOUS,
    INTEGER,
    JOINT,
    MODEL_TRAIN,
    Configuration,
    ParamSpace,
    ParamSpec,
    explore,
    load_space,
    perturb,
    perturb_value,
    resample_or_perturb,
    sample,
)
from tune_mbrl.errors import ConfigError, ValidationError

def test_degenerate_range_samples_its_only_value():
    space = ParamSpace((ParamSpec("x", CONTINUOUS, 5.0, 5.0, False, 5.0),))
    assert sample(space, 0)["x"] == 5.0

def test_log_scaled_samples_stay_in_bounds(small_space):
    for seed in range(200):
        value = sample(small_space, seed)["learning_rate"]
        assert 3e-5 <= value <= 3e-3

def test_log_scaled_sampling_is_log_uniform(small_space):
    values = np.array([sample(small_space, seed)["learning_rate"] for seed in range(10_000)])
    geometric_mean = math.sqrt(3e-5 * 3e-3)
    assert abs(np.median(values) - geometric_mean) <= 0.25 * geometric_mean
    assert abs(np.mean(values < geometric_mean) - 0.5) <= 0.02

def test_integer_samples_are_integral(small_space):
    for seed in range(100):
        value = sample(small_space, seed)["plan_horizon"]
        assert value == int(value)
        assert 5 <= value <= 40

@pytest.mark.parametrize("value, factor, expected", [
    (0.1, 1.2, 0.12),
    (0.5, 1.2, 0.5),
])
def test_perturb_value_scales_and_clamps(small_space, value, factor, expected):
    assert perturb_value(value, small_space.spec("cem_alpha"), factor) == pytest.approx(expected)

def test_perturb_rounds_integers(small_space):
    assert perturb_value(30, small_space.spec("plan_horizon"), 0.8) == 24

def test_perturb_without_bounds_is_exactly_multiplicative():
    spec = ParamSpec("x", CONTINUOUS, -math.inf, math.inf, False, 0.0)
    once = perturb_value(2.5, spec, 0.8)
    assert perturb_value(once, spec, 1.2) == pytest.approx(2.5 * 0.96, rel=1e-15)
    assert perturb_value(perturb_value(-7.0, spec, 0.8), spec, 1.2) == pytest.approx(-7.0 * 0.96, rel=1e-15)

def _random_space(rng, n_params=4):
    specs = []
    for i in range(n_params):
        kind = INTEGER if rng.random() < 0.4 else CONTINUOUS
        if kind == INTEGER:
            lower = float(rng.integers(-20, 20))
            upper = lower + float(rng.integers(0, 30))
            log_scale = False
        else:
            log_scale = rng.random() < 0.5
            if log_scale:
                lower = 10.0 ** rng.uniform(-6, 0)
                upper = lower * 10.0 ** rng.uniform(0, 4)
            else:
                lower = rng.uniform(-10, 10)
                upper = lower + rng.uniform(0, 20)
        specs.append(ParamSpec(f"p{i}", kind, lower, upper, log_scale, lower))
    return ParamSpace(tuple(specs))

def test_sample_and_perturb_stay_inside_random_spaces():
    rng = np.random.default_rng(11)
    for trial in range(100):
        space = _random_space(rng)
        config = sample(space, trial)
        for step in range(5):
            for spec in space:
                assert spec.contains(config[spec.name]), (spec, config[spec.name])
            config = perturb(config, space, 1000 * trial + step)


def test_explore_extremes(small_space):
    config = small_space.defaults()
    for seed in range(50):
        perturbed, how = explore(config, small_space, 1.0, seed)
        assert how == "perturb"
        for name in small_space.names:
            spec = small_space.spec(name)
            candidates = {perturb_value(config[name], spec, f) for f in (0.8, 1.2)}
            assert perturbed[name] in candidates
        _, how = explore(config, small_space, 0.0, seed)
        assert how == "resample"

def test_explore_split_matches_probability(small_space):
    config = small_space.defaults()
    kinds = [explore(config, small_space, 0.75, seed)[1] for seed in range(10_000)]
    assert 0.73 <= kinds.count("perturb") / len(kinds) <= 0.77

def test_resample_or_perturb_returns_valid_config(small_space):
    config = resample_or_perturb(small_space.defaults(), small_space, 0.5, 7)
    small_space.validate(config)

def test_sampling_is_deterministic(small_space):
    assert sample(small_space, 42) == sample(small_space, 42)

def test_validate_rejects_bad_configs(small_space):
    with pytest.raises(ValidationError):
        small_space.validate(Configuration({"learning_rate": 1e-3}))
    bad = small_space.defaults().merged(Configuration({"cem_alpha": math.nan}))
    with pytest.raises(ValidationError):
        small_space.validate(bad)
    with pytest.raises(ValidationError):
        small_space.validate(small_space.defaults().merged(Configuration({"plan_horizon": 7.5})))

def test_spec_rejects_default_outside_bounds():
    with pytest.raises(ConfigError):
        ParamSpec("x", CONTINUOUS, 0.0, 1.0, False, 2.0)
    with pytest.raises(ConfigError):
        ParamSpec("x", CONTINUOUS, 0.0, 1.0, True, 0.5)
    with pytest.raises(ConfigError):
        ParamSpec("n", INTEGER, 1.5, 4, False, 2)

@pytest.mark.parametrize("name", ["pusher", "reacher", "hopper_cheetah_daisy", "reacher.space"])
def test_shipped_spaces_load(name):
    model = load_space(name, MODEL_TRAIN)
    cem = load_space(name, CEM_OPTIMIZER)
    joint = load_space(name, JOINT)
    assert set(joint.names) == set(model.names) | set(cem.names)
    assert "learning_rate" in model.names
    assert "plan_horizon" in cem.names
    joint.validate(joint.defaults())

def test_pusher_learning_rate_range():
    spec = load_space("pusher", MODEL_TRAIN).spec("learning_rate")
    assert (spec.lower, spec.upper, spec.log_scale) == (3e-5, 3e-3, True)

def test_unknown_space_and_group():
    with pytest.raises(ConfigError):
        load_space("no_such_space")
    with pytest.raises(ConfigError):
        load_space("reacher", "everything")

def test_space_file_with_bad_default(tmp_path):
    path = tmp_path / "broken.space"
    path.write_text(
        '[model_train.learning_rate]\nkind = "continuous"\nlower = 0.1\nupper = 0.2\ndefault = 0.5\nlog_scale = false\n'
        '[cem_optimizer.plan_horizon]\nkind = "integer"\nlower = 5\nupper = 40\ndefault = 25\nlog_scale = false\n'
    )
    with pytest.raises(ConfigError):
        load_space(path, JOINT)

def test_space_round_trips_through_dict(small_space):
    assert ParamSpace.from_dict(small_space.to_dict()) == small_space
