"""End-to-end searches on the synthetic trainable."""

import statistics
from pathlib import Path

import pytest

from tune_mbrl import orchestrator
from tune_mbrl.analysis import cross_fidelity_correlation, read_schedule_csv, rung_budgets
from tune_mbrl.confspace import Configuration
from tune_mbrl.errors import NumericalOverflow, ResumeMismatch
from tune_mbrl.orchestrator import Orchestrator, run
from tune_mbrl.schedulers import plan_total_trials
from tune_mbrl.storage import RUNLOG_FILE, SCHEDULE_FILE, RunLog, read_state
from tune_mbrl.trainable import SyntheticTrainable

def runlog_bytes(run_dir):
    return (run_dir / RUNLOG_FILE).read_bytes()

def test_random_search_trains_every_member_to_budget(synthetic_run_config):
    log = run(synthetic_run_config(scheduler="random", population=4, budget=3, interval=3))
    assert len(log.trials()) == 12
    assert sorted({(t["member"], t["trial"]) for t in log.trials()}) == [(m, t) for m in range(4) for t in range(3)]
    assert all(d["action"] == "stop" for d in log.directives())

def test_pbt_issues_directives_every_interval(synthetic_run_config):
    log = run(synthetic_run_config(budget=30, interval=5))
    assert log.directive_batches() == 6
    assert len(log.trials()) == 6 * 30
    assert log.header["options"]["interval"] == 5
    assert "out" not in log.header["options"]

def test_uneven_interval_gets_a_short_last_barrier(synthetic_run_config):
    orch = Orchestrator(synthetic_run_config(scheduler="random", population=2, budget=7, interval=3))
    assert [b.n_trials for b in orch.barriers] == [3, 3, 1]
    assert len(orch.run().trials()) == 14

def test_clones_train_with_their_new_config(synthetic_run_config):
    log = run(synthetic_run_config(budget=12, interval=3))
    clones = [d for d in log.directives() if d["action"] == "clone_from"]
    assert clones
    for d in clones:
        following = [t for t in log.trials() if t["member"] == d["member"] and t["step"] == d["step"] + 1]
        assert all(t["config"] == d["new_config"] for t in following)
        assert d["donor_step"] == d["step"]

def test_replay_is_byte_identical(synthetic_run_config, tmp_path):
    rc = synthetic_run_config(budget=12, interval=3)
    run(rc, out_dir=tmp_path / "a")
    run(rc, out_dir=tmp_path / "b")
    assert runlog_bytes(tmp_path / "a") == runlog_bytes(tmp_path / "b")

def test_resume_continues_where_it_stopped(synthetic_run_config, tmp_path):
    rc = synthetic_run_config(budget=12, interval=3)
    run(rc, out_dir=tmp_path / "full")

    partial = tmp_path / "partial"
    run(rc, out_dir=partial, max_barriers=2)
    state = read_state(partial)
    assert state["step"] == 2 and not state["finished"]
    assert RunLog.load(partial).summary() is None

    run(rc, out_dir=partial)
    assert runlog_bytes(partial) == runlog_bytes(tmp_path / "full")
    assert read_state(partial)["finished"]

def test_finished_run_is_not_repeated(synthetic_run_config, tmp_path):
    rc = synthetic_run_config(scheduler="random", population=2, budget=2, interval=1)
    run(rc, out_dir=tmp_path / "done")
    before = runlog_bytes(tmp_path / "done")
    run(rc, out_dir=tmp_path / "done")
    assert runlog_bytes(tmp_path / "done") == before

def test_resume_with_other_settings_is_refused(synthetic_run_config, tmp_path):
    run(synthetic_run_config(budget=12, interval=3), out_dir=tmp_path / "run", max_barriers=1)
    with pytest.raises(ResumeMismatch):
        run(synthetic_run_config(budget=12, interval=3, seed=4), out_dir=tmp_path / "run")

def test_summary_and_schedule_file(synthetic_run_config):
    rc = synthetic_run_config(budget=12, interval=3)
    log = run(rc)
    summary = log.summary()
    final = [s for s in log.snapshots() if s["step"] == 4]
    best = max(final, key=lambda s: (s["score"], -s["member"]))
    assert summary["best_member"] == best["member"]
    assert summary["best_score"] == best["score"]
    schedule = read_schedule_csv(Path(rc.out) / SCHEDULE_FILE)
    assert [[t, c.to_dict()] for t, c in schedule.entries] == summary["schedule"]

def test_hyperband_promotes_the_top_third(synthetic_run_config):
    rc = synthetic_run_config(scheduler="hyperband", b_min=1, budget=9, eta=3, iterations=1)
    orch = Orchestrator(rc)
    log = orch.run()
    assert rung_budgets(log) == [1, 3, 9]
    assert len(log.trials()) == plan_total_trials(orch.plan)
    first_rung = [d for d in log.directives() if d["step"] == 1]
    assert sum(d["action"] == "promote" for d in first_rung) == 3
    assert all(d["budget"] == 3 for d in first_rung if d["action"] == "promote")
    report = cross_fidelity_correlation(log, 1, 3)
    assert report.n == 3
    assert log.summary()["best_member"] in {t["member"] for t in log.trials() if t["trial"] == 8}

def test_hyperband_members_are_numbered_across_brackets(synthetic_run_config):
    orch = Orchestrator(synthetic_run_config(scheduler="hyperband", b_min=1, budget=9, eta=3, iterations=3))
    log = orch.run()
    assert orch.member_ids() == list(range(17))
    assert {t["member"] for t in log.trials() if t["trial"] == 0} == set(range(17))

def test_pbt_bt_run_completes(synthetic_run_config):
    rc = synthetic_run_config(scheduler="pbt_bt", budget=12, interval=2, backtrack_every=2, archive_capacity=3)
    log = run(rc)
    assert len(log.trials()) == 6 * 12
    assert log.directive_batches() == 6
    assert len(read_state(Path(rc.out))["archive"]) <= 3

class FlakyTrainable(SyntheticTrainable):
    def __init__(self, member, **kwargs):
        super().__init__(**kwargs)
        self.member = member

    def _run_trial(self, config, rng):
        if self.member == 0 and self.trial_index == 3:
            raise NumericalOverflow("diverged")
        return super()._run_trial(config, rng)

def test_failed_member_stops_training(synthetic_run_config, monkeypatch):
    monkeypatch.setattr(orchestrator, "build_trainable", lambda rc, member: FlakyTrainable(member, seed=member))
    log = run(synthetic_run_config(scheduler="random", population=3, budget=6, interval=2))
    member0 = [t for t in log.trials() if t["member"] == 0]
    assert [t["trial"] for t in member0] == [0, 1, 2, 3]
    assert member0[-1]["failed"] and member0[-1]["score"] is None
    assert [(f["member"], f["trial"]) for f in log.failures()] == [(0, 3)]
    assert len(log.trials()) == 16
    assert log.summary()["best_member"] != 0

def _last_step_median(log):
    last = max(s["step"] for s in log.snapshots())
    return statistics.median(s["score"] for s in log.snapshots() if s["step"] == last)

@pytest.mark.slow
def test_pbt_tracks_a_drifting_optimum(synthetic_run_config, tmp_path):
    settings = dict(population=20, budget=250, interval=5, env_options={"drift_period": 250})
    wins = 0
    for seed in range(10):
        pbt = run(synthetic_run_config(seed=seed, **settings), out_dir=tmp_path / f"pbt-{seed}")
        static = run(synthetic_run_config(scheduler="random", seed=seed, **settings), out_dir=tmp_path / f"random-{seed}")
        wins += _last_step_median(pbt) > static.summary()["best_score"]
    assert wins >= 8

def test_initial_configs_do_not_depend_on_population_size(synthetic_run_config):
    small = Orchestrator(synthetic_run_config(population=4))
    large = Orchestrator(synthetic_run_config(population=8))
    assert all(small._initial_config(m) == large._initial_config(m) for m in range(4))
    assert isinstance(small._initial_config(0), Configuration)

@pytest.mark.slow
def test_copying_history_does_not_hurt_pbt(synthetic_run_config, tmp_path):
    finals = {True: [], False: []}
    for seed in range(5):
        for copy_history in (True, False):
            rc = synthetic_run_config(
                env="pendulum", space="reacher", group="joint", population=8, budget=30, interval=5,
                copy_history=copy_history, seed=seed,
            )
            log = run(rc, out_dir=tmp_path / f"s{seed}-{copy_history}")
            finals[copy_history].append(log.summary()["best_score"])
    assert sorted(finals[True])[2] >= sorted(finals[False])[2]

def test_worker_count_resolution(synthetic_run_config, monkeypatch):
    monkeypatch.delenv("TUNE_MBRL_WORKERS", raising=False)
    rc = synthetic_run_config(workers=2)
    assert Orchestrator(rc).workers == 2
    monkeypatch.setenv("TUNE_MBRL_WORKERS", "3")
    assert Orchestrator(rc).workers == 3
    assert Orchestrator(rc, workers=1).workers == 1

def test_module_run_honours_worker_environment(synthetic_run_config, monkeypatch):
    seen = []
    original = Orchestrator._train

    def record(self, tasks):
        seen.append(self.workers)
        return original(self, tasks)

    monkeypatch.setenv("TUNE_MBRL_WORKERS", "1")
    monkeypatch.setattr(Orchestrator, "_train", record)
    run(synthetic_run_config(scheduler="random", population=2, budget=2, interval=2, workers=4))
    assert seen and set(seen) == {1}

@pytest.mark.parametrize("settings", [
    dict(scheduler="pbt", budget=12, interval=3),
    dict(scheduler="pbt_bt", budget=12, interval=3, backtrack_every=2),
    dict(scheduler="hyperband", b_min=1, budget=9, eta=3, iterations=2),
    dict(scheduler="random", population=3, budget=4, interval=2),
])
def test_directives_only_name_members_from_the_header(synthetic_run_config, settings):
    log = run(synthetic_run_config(**settings))
    members = set(log.header["members"])
    assert log.directives()
    for d in log.directives():
        assert d["member"] in members
        if d.get("donor") is not None:
            assert d["donor"] in members
