"""CLI commands for tune-mbrl."""

import sys
from contextlib import contextmanager
from functools import partial
from pathlib import Path
from typing import Optional

import click

from .config import SCHEDULERS, RunConfig, config, load_preset
from .confspace import CEM_OPTIMIZER, GROUPS, JOINT, MODEL_TRAIN, load_space
from .errors import ConfigError, InsufficientOverlap
from .storage import RUN_CONFIG_FILE, SCHEDULE_FILE
from .utils import format_duration, get_logger, print_error, print_info, print_success, setup_logging

logger = get_logger(__name__)

EXIT_CONFIG = 2
EXIT_RUNTIME = 3

@contextmanager
def _exit_codes(action: str):
    """Map configuration errors to exit 2 and everything else to exit 3."""
    try:
        yield
    except ConfigError as e:
        print_error(str(e))
        sys.exit(EXIT_CONFIG)
    except KeyboardInterrupt:
        click.echo("\nInterrupted.")
        sys.exit(EXIT_RUNTIME)
    except Exception as e:
        logger.exception(f"{action} error")
        print_error(f"{action} failed: {e}")
        sys.exit(EXIT_RUNTIME)

@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose logging")
@click.pass_context
def cli(ctx, verbose):
    """tune-mbrl - Hyperparameter search for model-based reinforcement learning."""
    ctx.ensure_object(dict)
    ctx.obj["verbose"] = verbose
    setup_logging(verbose, config.log_level)

@cli.command()
@click.option("--config", "preset", type=click.Path(dir_okay=False), help="YAML experiment preset")
@click.option("--scheduler", type=click.Choice(SCHEDULERS), help="Tuner to run")
@click.option("--space", help="Search space name or .space file")
@click.option("--group", type=click.Choice(GROUPS), help="Parameter group to tune")
@click.option("--env", help="Environment (pendulum, pusher2d, synthetic)")
@click.option("--pop", "population", type=int, help="Population size (random search, PBT)")
@click.option("--interval", type=int, help="Trials between PBT barriers")
@click.option("--budget", type=int, help="Trials per member (b_max for Hyperband)")
@click.option("--copy-history", type=click.BOOL, help="Copy the donor's data when cloning")
@click.option("--quantile", type=float, help="PBT truncation quantile")
@click.option("--b-min", type=int, help="Smallest Hyperband budget")
@click.option("--eta", type=int, help="Hyperband reduction factor")
@click.option("--iterations", type=int, help="Hyperband iterations")
@click.option("--backtrack-every", type=int, help="Barriers between PBT-BT backtracking steps")
@click.option("--seed", type=int, help="Master seed")
@click.option("--out", type=click.Path(file_okay=False), help="Run directory (resumed when it exists)")
@click.option("--workers", "-w", type=int, help="Worker processes (default: TUNE_MBRL_WORKERS or config)")
@click.option("--max-barriers", type=int, help="Stop after this many barriers; rerun to resume")
def search(preset, max_barriers, **options):
    """Run or resume a hyperparameter search."""
    from .orchestrator import Orchestrator

    with _exit_codes("Search"):
        settings = load_preset(preset) if preset else {}
        settings.update({k: v for k, v in options.items() if v is not None})
        if "workers" not in settings:
            settings["workers"] = config.workers
        run_config = RunConfig.from_mapping(settings)
        orchestrator = Orchestrator(run_config, workers=options["workers"])
        click.echo(f"Run directory: {orchestrator.run_dir}")
        click.echo(f"Scheduler: {run_config.scheduler}, env: {run_config.env}, {len(orchestrator.barriers)} barriers")
        log = orchestrator.run(max_barriers=max_barriers)
        summary = log.summary()
        if summary is None:
            print_info(f"Stopped after barrier {orchestrator.step}; rerun the same command to resume.")
            return
        if summary["best_score"] is None:
            print_error("Search finished but every member failed")
            sys.exit(EXIT_RUNTIME)
        print_success(f"Best member {summary['best_member']} scored {summary['best_score']:.3f}")
        for name, value in sorted(summary["best_config"].items()):
            click.echo(f"  {name} = {value:g}")
        click.echo(f"Schedule written to {orchestrator.run_dir / SCHEDULE_FILE}")

def _infer_group(space: str, names) -> str:
    names = set(names)
    for group in (MODEL_TRAIN, CEM_OPTIMIZER):
        if names <= set(load_space(space, group).names):
            return group
    return JOINT

def make_eval_trainable(env: str, space: str, group: str, env_options: dict, seed: int):
    """Fresh trainable for schedule evaluation (module level so workers can pickle it)."""
    from .config import SYNTHETIC_ENV
    from .mbrl_trainable import PetsTrainable
    from .trainable import SyntheticTrainable

    if env == SYNTHETIC_ENV:
        return SyntheticTrainable(seed=seed, **env_options)
    return PetsTrainable(env=env, group=group, space_file=space, seed=seed, **env_options)

@cli.command()
@click.option("--schedule", "schedule_path", required=True, type=click.Path(exists=True),
              help="schedule.csv or a run directory holding one")
@click.option("--env", help="Environment (defaults to the run's environment when available)")
@click.option("--space", help="Search space the schedule came from")
@click.option("--group", type=click.Choice(GROUPS), help="Parameter group (inferred from the schedule)")
@click.option("--seeds", default=5, show_default=True, help="Number of evaluation seeds")
@click.option("--trials", type=int, help="Trials per seed (defaults to the environment's trial count)")
@click.option("--seed", default=0, show_default=True, help="Master seed")
@click.option("--aggregate", type=click.Choice(["max_of_mean", "mean_of_max"]), default="max_of_mean",
              show_default=True, help="Curve aggregation")
@click.option("--workers", "-w", type=int, help="Worker processes")
@click.option("--out", type=click.Path(dir_okay=False), help="Output CSV (default: curve.csv next to the schedule)")
def evaluate(schedule_path, env, space, group, seeds, trials, seed, aggregate, workers, out):
    """Train fresh agents under a schedule and write the learning curve."""
    from .analysis import evaluate_schedule, read_schedule_csv, write_curve_csv
    from .config import SYNTHETIC_ENV
    from .envs import make_env

    with _exit_codes("Evaluation"):
        path = Path(schedule_path)
        run_dir = path if path.is_dir() else path.parent
        if path.is_dir():
            path = path / SCHEDULE_FILE
        schedule = read_schedule_csv(path)
        env_options = {}
        if (run_dir / RUN_CONFIG_FILE).exists():
            run_config = RunConfig.load(run_dir / RUN_CONFIG_FILE)
            env = env or run_config.env
            space = space or run_config.space
            env_options = run_config.env_options
        env = env or "pendulum"
        space = space or "reacher"
        if env != SYNTHETIC_ENV:
            group = group or _infer_group(space, schedule.names)
            trials = trials or make_env(env).n_trials
        elif trials is None:
            raise ConfigError("--trials is required for the synthetic environment")
        make_trainable = partial(make_eval_trainable, env, space, group or JOINT, env_options)
        curve = evaluate_schedule(
            schedule,
            make_trainable,
            n_trials=trials,
            n_seeds=seeds,
            master_seed=seed,
            workers=workers or config.workers,
            aggregate=aggregate,
        )
        out_path = Path(out) if out else path.parent / "curve.csv"
        write_curve_csv(out_path, curve)
        print_success(f"Best mean return {curve.curve[-1]:.3f} over {seeds} seeds; curve written to {out_path}")

@cli.group()
def analyze():
    """Analyses over finished runs."""

def _expand_runs(paths):
    """Run directories given directly, or every run directory one level below."""
    from .storage import RUNLOG_FILE

    runs = []
    for raw in paths:
        path = Path(raw)
        if (path / RUNLOG_FILE).exists() or path.is_file():
            runs.append(path)
        else:
            runs.extend(sorted(p for p in path.iterdir() if (p / RUNLOG_FILE).exists()))
    return runs

@analyze.command()
@click.option("--log", "log_path", required=True, type=click.Path(exists=True), help="Hyperband run directory")
@click.option("--out", type=click.Path(dir_okay=False), help="Output CSV (default: corr.csv in the run)")
def corr(log_path, out):
    """Spearman correlation of member scores between rung budgets."""
    from .analysis import cross_fidelity_correlation, rung_budgets, write_corr_csv
    from .storage import RunLog

    with _exit_codes("Correlation"):
        log = RunLog.load(log_path)
        budgets = rung_budgets(log)
        rows = []
        for i, low in enumerate(budgets):
            for high in budgets[i + 1:]:
                try:
                    rows.append((low, high, cross_fidelity_correlation(log, low, high)))
                except InsufficientOverlap as e:
                    logger.warning(f"Skipping budgets {low}/{high}: {e}")
        if not rows:
            raise InsufficientOverlap("No pair of budgets shares two or more members")
        click.echo(f"{'low':>5} {'high':>5} {'n':>4} {'cor':>8} {'p':>8}")
        for low, high, report in rows:
            note = "  (degenerate)" if report.degenerate else ""
            click.echo(f"{low:>5} {high:>5} {report.n:>4} {report.cor:>8.3f} {report.p:>8.4f}{note}")
        out_path = Path(out) if out else Path(log_path) / "corr.csv"
        write_corr_csv(out_path, rows)
        print_success(f"Correlations written to {out_path}")

@analyze.command()
@click.option("--log", "log_paths", required=True, multiple=True, type=click.Path(exists=True),
              help="Run directory, or a directory of runs (repeatable)")
@click.option("--bins", default=20, show_default=True, help="Number of bins")
@click.option("--out", type=click.Path(dir_okay=False), help="Output CSV (default: hist.csv in the first --log path)")
def hist(log_paths, bins, out):
    """Histogram of best final scores per tuner across runs."""
    from .analysis import final_return_histogram, write_hist_csv
    from .storage import RunLog

    with _exit_codes("Histogram"):
        logs = [RunLog.load(p) for p in _expand_runs(log_paths)]
        histogram = final_return_histogram(logs, bins=bins)
        first = Path(log_paths[0])
        out_path = Path(out) if out else (first.parent if first.is_file() else first) / "hist.csv"
        write_hist_csv(out_path, histogram)
        for method in sorted(histogram.counts):
            click.echo(f"  {method}: {int(histogram.counts[method].sum())} runs")
        print_success(f"Histogram of {histogram.total} runs written to {out_path}")

@analyze.command()
@click.option("--log", "log_path", required=True, type=click.Path(exists=True), help="Run directory")
@click.option("--k", default=5, show_default=True, help="Members averaged per barrier")
@click.option("--worst", is_flag=True, help="Average the bottom members instead of the top")
@click.option("--out", type=click.Path(dir_okay=False), help="Output CSV (default: trends.csv in the run)")
def trends(log_path, k, worst, out):
    """Per-barrier mean configuration of the top (or bottom) k members."""
    from .analysis import TOP_K_MEAN, extract_schedule, write_schedule_csv
    from .storage import RunLog

    with _exit_codes("Trends"):
        schedule = extract_schedule(RunLog.load(log_path), TOP_K_MEAN, k=k, worst=worst)
        out_path = Path(out) if out else Path(log_path) / "trends.csv"
        write_schedule_csv(out_path, schedule)
        print_success(f"{len(schedule)} trend points written to {out_path}")

def _member_trainable(run_dir: Path, member: int):
    from .orchestrator import build_trainable
    from .storage import CheckpointStore, read_state
    from .trainable import TrainableCheckpoint

    state = read_state(run_dir)
    if state is None:
        raise ConfigError(f"{run_dir} holds no barrier state")
    info = state["members"].get(str(member))
    if info is None or not info["has_checkpoint"]:
        raise ConfigError(f"Member {member} has no stored checkpoint in {run_dir}")
    run_config = RunConfig.load(run_dir / RUN_CONFIG_FILE)
    trainable = build_trainable(run_config, member)
    data = CheckpointStore(run_dir).load_member(state["step"], member)
    trainable.restore(TrainableCheckpoint.from_bytes(data))
    return trainable

def _external_dataset(path: Path):
    from .dynamics import TransitionDataset
    from .trainable import TrainableCheckpoint

    ckpt = TrainableCheckpoint.from_bytes(path.read_bytes())
    if ckpt.history is None:
        raise ConfigError(f"{path} carries no transition history")
    return TransitionDataset.from_bytes(ckpt.history)

@analyze.command()
@click.option("--log", "log_path", required=True, type=click.Path(exists=True, file_okay=False), help="Run directory")
@click.option("--member", required=True, type=int, help="Member whose model is evaluated")
@click.option("--window", default=20, show_default=True, help="Trials of on-policy history")
@click.option("--external", type=click.Path(exists=True, dir_okay=False),
              help="Member checkpoint whose history is used as off-policy data")
def nll(log_path, member, window, external):
    """One-step NLL of a member's dynamics model."""
    from .analysis import model_nll_eval

    with _exit_codes("NLL"):
        trainable = _member_trainable(Path(log_path), member)
        if not hasattr(trainable, "model"):
            raise ConfigError("Only PETS runs carry a dynamics model")
        if external:
            value = model_nll_eval(trainable.model, external=_external_dataset(Path(external)))
            click.echo(f"Off-policy NLL of member {member}: {value:.4f}")
        else:
            value = model_nll_eval(trainable.model, trainable.dataset, window=window)
            click.echo(f"On-policy NLL of member {member} (last {window} trials): {value:.4f}")

@cli.command()
@click.option("--env", default="pendulum", show_default=True, help="Environment")
@click.option("--episodes", default=100, show_default=True, help="Episodes to average")
@click.option("--seed", default=0, show_default=True, help="Seed")
def baseline(env, episodes, seed):
    """Mean return of the uniform random policy."""
    import time

    from .envs import make_env, random_policy_baseline

    with _exit_codes("Baseline"):
        started = time.perf_counter()
        value = random_policy_baseline(make_env(env), episodes=episodes, seed=seed)
        click.echo(f"Random policy on {env}: {value:.3f} ({format_duration(time.perf_counter() - started)})")

def main(argv: Optional[list] = None):
    """Entry point for CLI."""
    cli(args=argv)

if __name__ == "__main__":
    main()
