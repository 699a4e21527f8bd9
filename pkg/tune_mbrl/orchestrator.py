"""Barrier-synchronous search runner with a worker pool, persistence and resume."""

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

from .analysis import LINEAGE_BEST, Schedule, extract_schedule, write_schedule_csv
from .config import SYNTHETIC_ENV, RunConfig, config
from .confspace import Configuration, ParamSpace, load_space, sample
from .errors import EmptyLog, NumericalOverflow, ResumeMismatch, WorkerCrash
from .mbrl_trainable import PetsTrainable
from .schedulers import (
    CLONE_FROM,
    PROMOTE,
    STOP,
    Bracket,
    Elite,
    EliteArchive,
    PbtOptions,
    SchedulerDirective,
    hyperband_plan,
    pbt_bt_step,
    pbt_step,
    successive_halving_promote,
)
from .storage import (
    DIRECTIVE,
    FAILURE,
    HEADER,
    RUN_CONFIG_FILE,
    RUNLOG_FILE,
    SCHEDULE_FILE,
    SEARCH_LOG_FILE,
    SNAPSHOT,
    SUMMARY,
    TIMINGS_FILE,
    TRIAL,
    CheckpointStore,
    RunLog,
    RunLogWriter,
    append_timing,
    make_event,
    read_state,
    write_state,
)
from .trainable import FAILED_SCORE, SyntheticTrainable, Trainable, TrainableCheckpoint, synthetic_space
from .utils import add_file_logging, get_logger, remove_file_logging, seed_tree

logger = get_logger(__name__)

INIT_SALT = "init"
CONFIG_SALT = "config"
SCHEDULER_SALT = "scheduler"

def run_space(run_config: RunConfig) -> ParamSpace:
    """The space a run searches."""
    if run_config.env == SYNTHETIC_ENV:
        return synthetic_space()
    return load_space(run_config.space, run_config.group)

def build_trainable(run_config: RunConfig, member: int) -> Trainable:
    """A fresh trainable for one member; its initial weights depend on the member id."""
    seed = seed_tree(run_config.seed, member, -1, salt=INIT_SALT)
    if run_config.env == SYNTHETIC_ENV:
        return SyntheticTrainable(seed=seed, window=run_config.window, **run_config.env_options)
    return PetsTrainable(
        env=run_config.env,
        group=run_config.group,
        space_file=run_config.space,
        seed=seed,
        window=run_config.window,
        **run_config.env_options,
    )

@dataclass(frozen=True)
class TrainTask:
    member: int
    checkpoint: Optional[bytes]
    config: Configuration
    n_trials: int

@dataclass
class TrialResult:
    trial: int
    value: Optional[float]
    score: float
    wall_time: float
    failed: bool = False

@dataclass
class MemberResult:
    member: int
    checkpoint: Optional[bytes]
    trials: List[TrialResult]
    trial_index: int
    score: float
    failed: bool = False
    error: Optional[str] = None

def train_member(run_config: RunConfig, task: TrainTask) -> MemberResult:
    """Worker entry point: train one member for task.n_trials trials."""
    trainable = build_trainable(run_config, task.member)
    if task.checkpoint is not None:
        trainable.restore(TrainableCheckpoint.from_bytes(task.checkpoint))
    trials = []
    error = None
    for _ in range(task.n_trials):
        trial = trainable.trial_index
        start = time.perf_counter()
        try:
            value = trainable.step(task.config, seed=seed_tree(run_config.seed, task.member, trial))
        except NumericalOverflow as e:
            error = f"{type(e).__name__}: {e}"
            trials.append(TrialResult(trial, None, FAILED_SCORE, time.perf_counter() - start, failed=True))
            break
        trials.append(TrialResult(trial, value, trainable.score(), time.perf_counter() - start))
    return MemberResult(
        member=task.member,
        checkpoint=trainable.checkpoint(copy_history=True).to_bytes(),
        trials=trials,
        trial_index=trainable.trial_index,
        score=trainable.score(),
        failed=trainable.failed,
        error=error,
    )

@dataclass
class MemberState:
    member: int
    config: Configuration
    checkpoint: Optional[bytes] = None
    trial_index: int = 0
    score: float = FAILED_SCORE
    failed: bool = False

    def to_state(self) -> Dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "trial_index": self.trial_index,
            "score": self.score,
            "failed": self.failed,
            "has_checkpoint": self.checkpoint is not None,
        }

@dataclass(frozen=True)
class Barrier:
    """One synchronization point: how many trials to train before it."""

    n_trials: int = 0
    iteration: int = 0
    bracket: Optional[Bracket] = None
    rung: int = 0
    first_member: int = 0

def _elite_key(elite: Elite) -> str:
    return f"s{elite.step:05d}_m{elite.member:04d}"

class Orchestrator:
    """Runs one search: members train between barriers, the scheduler decides at each."""

    def __init__(self, run_config: RunConfig, out_dir: Optional[Path] = None, workers: Optional[int] = None):
        self.rc = run_config
        if out_dir is None:
            out_dir = Path(run_config.out) if run_config.out else config.runs_dir / f"{run_config.scheduler}-{run_config.env}-s{run_config.seed}"
        self.run_dir = Path(out_dir)
        self.workers = config.resolve_workers(workers, run_config.workers)
        self.space = run_space(run_config)
        self.store = CheckpointStore(self.run_dir)
        self.members: Dict[int, MemberState] = {}
        self.archive = EliteArchive(capacity=run_config.archive_capacity)
        self.active: List[int] = []
        self.paid = 0
        self.step = 0
        self.finished = False
        self.writer: Optional[RunLogWriter] = None
        if run_config.scheduler in ("pbt", "pbt_bt"):
            self.pbt_options = PbtOptions(
                population_size=run_config.population,
                quantile=run_config.quantile,
                interval=run_config.interval,
                p_perturb=run_config.p_perturb,
                copy_history=run_config.copy_history,
            )
        self.plan = None
        if run_config.scheduler == "hyperband":
            self.plan = hyperband_plan(run_config.b_min, run_config.budget, run_config.eta, run_config.iterations)
        self.barriers = self._plan_barriers()

    # -- planning ---------------------------------------------------------

    def _plan_barriers(self) -> List[Barrier]:
        if self.plan is None:
            rc = self.rc
            counts = [rc.interval] * (rc.budget // rc.interval)
            if rc.budget % rc.interval:
                counts.append(rc.budget % rc.interval)
            return [Barrier(n_trials=n) for n in counts]
        barriers = []
        first_member = 0
        for iteration, bracket in self.plan.iter_brackets():
            paid = 0
            for index, rung in enumerate(bracket.rungs):
                barriers.append(Barrier(
                    n_trials=rung.budget - paid,
                    iteration=iteration,
                    bracket=bracket,
                    rung=index,
                    first_member=first_member,
                ))
                paid = rung.budget
            first_member += bracket.n_configs
        return barriers

    def member_ids(self) -> List[int]:
        if self.plan is None:
            return list(range(self.rc.population))
        total = sum(bracket.n_configs for _, bracket in self.plan.iter_brackets())
        return list(range(total))

    def _initial_config(self, member: int) -> Configuration:
        return sample(self.space, seed_tree(self.rc.seed, member, 0, salt=CONFIG_SALT))

    def _header(self) -> Dict[str, Any]:
        options = {k: v for k, v in self.rc.to_dict().items() if k not in RunConfig.RUNTIME_ONLY}
        if self.plan is not None:
            options["rungs"] = sorted({r.budget for _, b in self.plan.iter_brackets() for r in b.rungs})
        return make_event(
            HEADER,
            run_id=self.rc.config_hash()[:12],
            scheduler=self.rc.scheduler,
            env=self.rc.env,
            space=self.rc.space,
            group=self.space.group,
            seed=self.rc.seed,
            members=self.member_ids(),
            options=options,
            space_spec=self.space.to_dict(),
        )

    # -- persistence ------------------------------------------------------

    def _timings_offset(self) -> int:
        path = self.run_dir / TIMINGS_FILE
        return path.stat().st_size if path.exists() else 0

    def _start(self):
        self.rc.save(self.run_dir / RUN_CONFIG_FILE)
        timings = self.run_dir / TIMINGS_FILE
        if timings.exists():
            timings.unlink()
        self.writer = RunLogWriter(self.run_dir / RUNLOG_FILE)
        if self.plan is None:
            for m in self.member_ids():
                self.members[m] = MemberState(m, self._initial_config(m))
            self.active = self.member_ids()
        self.writer.write(self._header())
        logger.info(f"Starting {self.rc.scheduler} search on {self.rc.env} in {self.run_dir}")

    def _resume(self) -> bool:
        state = read_state(self.run_dir)
        if state is None:
            return False
        if state["config_hash"] != self.rc.config_hash():
            raise ResumeMismatch(f"{self.run_dir} holds a run with different settings")
        self.step = state["step"]
        self.finished = state["finished"]
        self.active = list(state["active"])
        self.paid = state["paid"]
        for key, data in state["members"].items():
            member = int(key)
            st = MemberState(
                member=member,
                config=Configuration(data["config"]),
                trial_index=data["trial_index"],
                score=data["score"],
                failed=data["failed"],
            )
            if data["has_checkpoint"]:
                st.checkpoint = self.store.load_member(self.step, member)
            self.members[member] = st
        for entry in state["archive"]:
            self.archive.entries.append(Elite(
                score=entry["score"],
                checkpoint=self.store.load_elite(entry["key"]),
                config=Configuration(entry["config"]),
                member=entry["member"],
                step=entry["step"],
                trial=entry["trial"],
            ))
        if not self.finished:
            self.writer = RunLogWriter(self.run_dir / RUNLOG_FILE, truncate_at=state["runlog_offset"])
            timings = self.run_dir / TIMINGS_FILE
            if timings.exists():
                with open(timings, "r+b") as f:
                    f.truncate(state["timings_offset"])
        logger.info(f"Resuming {self.run_dir} after barrier {self.step}/{len(self.barriers)}")
        return True

    def _persist(self):
        for m, st in self.members.items():
            if st.checkpoint is not None:
                self.store.save_member(self.step, m, st.checkpoint)
        for elite in self.archive.entries:
            self.store.save_elite(_elite_key(elite), elite.checkpoint)
        write_state(self.run_dir, {
            "config_hash": self.rc.config_hash(),
            "step": self.step,
            "finished": self.finished,
            "runlog_offset": self.writer.offset if self.writer else 0,
            "timings_offset": self._timings_offset(),
            "members": {str(m): st.to_state() for m, st in sorted(self.members.items())},
            "archive": [
                {
                    "key": _elite_key(e),
                    "score": e.score,
                    "config": e.config.to_dict(),
                    "member": e.member,
                    "step": e.step,
                    "trial": e.trial,
                }
                for e in self.archive.entries
            ],
            "active": self.active,
            "paid": self.paid,
        })
        self.store.prune_steps(keep=self.step)
        self.store.prune_elites(_elite_key(e) for e in self.archive.entries)

    # -- training ---------------------------------------------------------

    def _train(self, tasks: List[TrainTask]) -> List[MemberResult]:
        if self.workers <= 1 or len(tasks) <= 1:
            return [train_member(self.rc, task) for task in tasks]
        results = []
        with ProcessPoolExecutor(max_workers=min(self.workers, len(tasks))) as pool:
            futures = [(task, pool.submit(train_member, self.rc, task)) for task in tasks]
            for task, future in futures:
                try:
                    results.append(future.result())
                except Exception as e:
                    crash = WorkerCrash(f"Member {task.member}: worker died ({type(e).__name__}: {e})")
                    logger.warning(str(crash))
                    current = self.members[task.member]
                    results.append(MemberResult(
                        member=task.member,
                        checkpoint=task.checkpoint,
                        trials=[],
                        trial_index=current.trial_index,
                        score=FAILED_SCORE,
                        failed=True,
                        error=str(crash),
                    ))
        return results

    def _record(self, step: int, results: List[MemberResult]):
        for result in sorted(results, key=lambda r: r.member):
            st = self.members[result.member]
            for trial in result.trials:
                self.writer.write(make_event(
                    TRIAL,
                    step=step,
                    member=result.member,
                    trial=trial.trial,
                    config=st.config.to_dict(),
                    score=None if trial.failed else trial.score,
                    failed=trial.failed,
                    **{"return": trial.value},
                ))
                append_timing(self.run_dir, step, result.member, trial.trial, trial.wall_time)
            if result.failed:
                logger.warning(f"Member {result.member} failed at trial {result.trial_index}: {result.error}")
                self.writer.write(make_event(
                    FAILURE, step=step, member=result.member, trial=result.trial_index, error=result.error
                ))
            if result.checkpoint is not None:
                st.checkpoint = result.checkpoint
            st.trial_index = result.trial_index
            st.score = result.score
            st.failed = result.failed

    def _snapshot(self, step: int, members: List[int]):
        for m in sorted(members):
            st = self.members[m]
            self.writer.write(make_event(
                SNAPSHOT, step=step, member=m, trial=st.trial_index, config=st.config.to_dict(), score=st.score
            ))

    def _tasks(self, members: List[int], n_trials: int) -> List[TrainTask]:
        return [
            TrainTask(m, self.members[m].checkpoint, self.members[m].config, n_trials)
            for m in sorted(members)
            if not self.members[m].failed
        ]

    # -- decisions --------------------------------------------------------

    def _population_directives(self, step: int, is_last: bool) -> List[SchedulerDirective]:
        ids = sorted(self.members)
        if is_last:
            return [SchedulerDirective(member=m, action=STOP) for m in ids]
        if self.rc.scheduler == "random":
            return [SchedulerDirective(member=m) for m in ids]
        scores = [(m, self.members[m].score) for m in ids]
        configs = {m: self.members[m].config for m in ids}
        seed = seed_tree(self.rc.seed, -1, step, salt=SCHEDULER_SALT)
        if self.rc.scheduler == "pbt":
            return pbt_step(scores, self.pbt_options, self.space, seed, configs)
        directives, self.archive = pbt_bt_step(
            scores,
            self.archive,
            self.pbt_options,
            self.space,
            seed,
            configs,
            step_index=step,
            checkpoint_of=lambda m: self.members[m].checkpoint,
            backtrack_every=self.rc.backtrack_every,
            trial_of={m: self.members[m].trial_index for m in ids},
        )
        return directives

    def _clone(self, directive: SchedulerDirective, donor: bytes):
        st = self.members[directive.member]
        trainable = build_trainable(self.rc, directive.member)
        if st.checkpoint is not None:
            trainable.restore(TrainableCheckpoint.from_bytes(st.checkpoint))
        trainable.apply_directive(directive, TrainableCheckpoint.from_bytes(donor))
        st.checkpoint = trainable.checkpoint(copy_history=True).to_bytes()
        st.config = directive.new_config if directive.new_config is not None else trainable.hyperparameters
        st.trial_index = trainable.trial_index
        st.score = trainable.score()
        st.failed = trainable.failed

    def _apply(self, step: int, directives: List[SchedulerDirective]):
        donors = {m: (st.checkpoint, st.trial_index) for m, st in self.members.items()}
        for d in sorted(directives, key=lambda d: d.member):
            donor = donor_step = donor_trial = None
            if d.action == CLONE_FROM:
                if d.elite is not None:
                    elite = self.archive.entries[d.elite]
                    donor_bytes, donor, donor_step, donor_trial = elite.checkpoint, elite.member, elite.step, elite.trial
                else:
                    donor_bytes, donor_trial = donors[d.donor]
                    donor, donor_step = d.donor, step
                self._clone(d, donor_bytes)
                logger.debug(f"Step {step}: member {d.member} cloned member {donor} ({d.explore})")
            self.writer.write(make_event(
                DIRECTIVE,
                step=step,
                member=d.member,
                action=d.action,
                donor=donor,
                donor_step=donor_step,
                donor_trial=donor_trial,
                elite=d.elite,
                copy_history=d.copy_history if d.action == CLONE_FROM else None,
                explore=d.explore,
                budget=d.budget,
                new_config=d.new_config.to_dict() if d.new_config is not None else None,
            ))

    # -- barriers ---------------------------------------------------------

    def _population_barrier(self, step: int, barrier: Barrier, is_last: bool):
        ids = sorted(self.members)
        self._record(step, self._train(self._tasks(ids, barrier.n_trials)))
        self._snapshot(step, ids)
        self._apply(step, self._population_directives(step, is_last))

    def _hyperband_barrier(self, step: int, barrier: Barrier):
        bracket = barrier.bracket
        if barrier.rung == 0:
            ids = list(range(barrier.first_member, barrier.first_member + bracket.n_configs))
            for m in ids:
                self.members[m] = MemberState(m, self._initial_config(m))
            self.active = ids
            self.paid = 0
            logger.info(f"Bracket s={bracket.s} (iteration {barrier.iteration}): {bracket.n_configs} configurations")
        rung = bracket.rungs[barrier.rung]
        self._record(step, self._train(self._tasks(self.active, rung.budget - self.paid)))
        self._snapshot(step, self.active)

        if barrier.rung == len(bracket.rungs) - 1:
            survivors = []
        else:
            survivors = successive_halving_promote(
                [(m, self.members[m].score) for m in self.active], self.rc.eta
            )
        next_budget = bracket.rungs[barrier.rung + 1].budget if survivors else None
        directives = [
            SchedulerDirective(member=m, action=PROMOTE, budget=next_budget) if m in survivors
            else SchedulerDirective(member=m, action=STOP)
            for m in self.active
        ]
        self._apply(step, directives)
        for m in self.active:
            if m not in survivors:
                self.members[m].checkpoint = None
        self.active = sorted(survivors)
        self.paid = rung.budget

    def _finish(self):
        if self.plan is None:
            candidates = sorted(self.members)
        else:
            top = max(st.trial_index for st in self.members.values())
            candidates = sorted(m for m, st in self.members.items() if st.trial_index == top)
        best = max(candidates, key=lambda m: (self.members[m].score, -m))
        log = RunLog.load(self.run_dir / RUNLOG_FILE)
        schedule: Optional[Schedule] = None
        try:
            schedule = extract_schedule(log, LINEAGE_BEST, member=best)
        except EmptyLog:
            logger.warning(f"Best member {best} has no trial records; no schedule extracted")
        self.writer.write(make_event(
            SUMMARY,
            best_member=best,
            best_score=self.members[best].score,
            best_config=self.members[best].config.to_dict(),
            schedule=[[t, c.to_dict()] for t, c in schedule.entries] if schedule else None,
        ))
        if schedule is not None:
            write_schedule_csv(self.run_dir / SCHEDULE_FILE, schedule)
        self.finished = True
        self._persist()
        score = self.members[best].score
        logger.info(f"Search finished: best member {best} scored {score:.3f}" if math.isfinite(score)
                    else "Search finished: every member failed")

    def run(self, max_barriers: Optional[int] = None) -> RunLog:
        """Run (or resume) the search; stop after max_barriers barriers when given."""
        self.run_dir.mkdir(parents=True, exist_ok=True)
        handler = add_file_logging(self.run_dir / SEARCH_LOG_FILE)
        try:
            if not self._resume():
                self._start()
            if self.finished:
                logger.info(f"{self.run_dir} already holds a finished run")
                return RunLog.load(self.run_dir)
            completed_now = 0
            for index in range(self.step, len(self.barriers)):
                if max_barriers is not None and completed_now >= max_barriers:
                    logger.info(f"Stopping after {completed_now} barriers as requested")
                    break
                step = index + 1
                barrier = self.barriers[index]
                started = time.perf_counter()
                if self.plan is None:
                    self._population_barrier(step, barrier, is_last=step == len(self.barriers))
                else:
                    self._hyperband_barrier(step, barrier)
                self.step = step
                self._persist()
                completed_now += 1
                logger.info(f"Barrier {step}/{len(self.barriers)} done in {time.perf_counter() - started:.1f}s")
            if self.step == len(self.barriers):
                self._finish()
        except KeyboardInterrupt:
            logger.warning(f"Interrupted after barrier {self.step}; rerun with the same output directory to resume")
            raise
        finally:
            if self.writer is not None:
                self.writer.close()
                self.writer = None
            remove_file_logging(handler)
        return RunLog.load(self.run_dir)

def run(run_config: RunConfig, out_dir: Optional[Path] = None, max_barriers: Optional[int] = None) -> RunLog:
    """Execute a search described by run_config and return its RunLog."""
    return Orchestrator(run_config, out_dir=out_dir).run(max_barriers=max_barriers)
