"""Post-hoc analysis of run logs: rank correlation, schedules, evaluation curves, histograms, model NLL."""

import bisect
import csv
import itertools
import math
import warnings
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats
from scipy.stats import rankdata

from .confspace import Configuration, ParamSpace
from .dynamics import GaussianEnsemble, TransitionDataset, gaussian_nll
from .errors import DimensionMismatch, EmptyLog, EmptyWindow, InsufficientOverlap, NumericalOverflow
from .storage import RunLog
from .trainable import Trainable
from .utils import get_logger, seed_tree

logger = get_logger(__name__)

HISTOGRAM_BINS = 20
NLL_WINDOW = 20
TOP_K = 5
EXACT_P_LIMIT = 10
EVAL_SALT = "evaluate"

LINEAGE_BEST = "lineage_best"
TOP_K_MEAN = "top_k_mean"

MAX_OF_MEAN = "max_of_mean"
MEAN_OF_MAX = "mean_of_max"

# -- rank correlation -------------------------------------------------------

@dataclass(frozen=True)
class CorrelationReport:
    cor: float
    p: float
    n: int
    degenerate: bool = False

def _centered_dot(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    return float(np.dot(a, b) / math.sqrt(np.dot(a, a) * np.dot(b, b)))

def _exact_p(rx: np.ndarray, ry: np.ndarray, cor: float) -> float:
    """Share of all orderings of ry whose |correlation| reaches |cor|."""
    n = len(rx)
    a = rx - rx.mean()
    perms = np.array(list(itertools.permutations(range(n))))
    b = ry[perms] - ry.mean()
    denom = math.sqrt(np.dot(a, a) * np.dot(b[0], b[0]))
    cors = (b @ a) / denom
    return float(np.mean(np.abs(cors) >= abs(cor) - 1e-12))

def _t_p(cor: float, n: int) -> float:
    if abs(cor) >= 1.0:
        return 0.0
    t = cor * math.sqrt((n - 2) / (1.0 - cor ** 2))
    return float(2.0 * stats.t.sf(abs(t), n - 2))

def spearman(x: Sequence[float], y: Sequence[float]) -> CorrelationReport:
    """Spearman rank correlation with average ranks for ties.

    The p-value is exact (all orderings) below 10 samples and uses the
    t-approximation from there on. Constant input yields a degenerate report
    with cor 0 and p 1.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionMismatch(f"Need two equal-length vectors, got {x.shape} and {y.shape}")
    n = len(x)
    if n < 2:
        raise InsufficientOverlap(f"Spearman correlation needs at least 2 pairs, got {n}")
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        return CorrelationReport(cor=0.0, p=1.0, n=n, degenerate=True)
    cor = min(1.0, max(-1.0, _centered_dot(rx, ry)))
    p = _exact_p(rx, ry, cor) if n < EXACT_P_LIMIT else _t_p(cor, n)
    return CorrelationReport(cor=cor, p=p, n=n)

def _score_at_budget(runlog: RunLog, budget: int) -> Dict[int, float]:
    """Member -> score recorded right after its `budget`-th trial."""
    scores = {}
    for record in runlog.trials():
        if record["trial"] + 1 == budget and record["score"] is not None:
            scores[record["member"]] = record["score"]
    return scores

def cross_fidelity_correlation(runlog: RunLog, low_budget: int, high_budget: int) -> CorrelationReport:
    """Rank agreement between scores at a low and a high trial budget."""
    if not runlog.trials():
        raise EmptyLog("Run log holds no trial records")
    low = _score_at_budget(runlog, low_budget)
    high = _score_at_budget(runlog, high_budget)
    members = sorted(set(low) & set(high))
    if len(members) < 2:
        raise InsufficientOverlap(
            f"Only {len(members)} configurations reached both {low_budget} and {high_budget} trials"
        )
    return spearman([low[m] for m in members], [high[m] for m in members])

def rung_budgets(runlog: RunLog) -> List[int]:
    header = runlog.header or {}
    options = header.get("options") or {}
    return sorted(set(options.get("rungs", [])))

# -- schedules --------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    """Configurations keyed by the trial index from which they apply."""

    entries: Tuple[Tuple[int, Configuration], ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.entries:
            raise EmptyLog("A schedule needs at least one entry")
        if self.entries[0][0] != 0:
            raise ValueError("Schedules start at trial 0")
        trials = [t for t, _ in self.entries]
        if any(b <= a for a, b in zip(trials, trials[1:])):
            raise ValueError(f"Schedule trial indices must increase strictly: {trials}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> List[str]:
        return sorted(self.entries[0][1].values)

    def config_at(self, trial: int) -> Configuration:
        """Entry in force at `trial`; the last one holds forever."""
        trials = [t for t, _ in self.entries]
        return self.entries[bisect.bisect_right(trials, trial) - 1][1]

    @classmethod
    def static(cls, config: Configuration) -> "Schedule":
        return cls(((0, config),))

    @classmethod
    def from_points(cls, points: Sequence[Tuple[int, Configuration]]) -> "Schedule":
        """Keep only the points where the configuration changes."""
        entries = []
        for trial, config in points:
            if not entries or entries[-1][1].key() != config.key():
                entries.append((trial, config))
        return cls(tuple(entries))

def final_scores(runlog: RunLog) -> Dict[int, float]:
    """Latest score per member (failed members score -inf)."""
    scores: Dict[int, float] = {}
    for record in runlog.trials():
        scores[record["member"]] = record["score"]
    for record in runlog.snapshots():
        scores[record["member"]] = record["score"]
    return {m: (s if s is not None else -math.inf) for m, s in scores.items()}

def best_member(runlog: RunLog) -> int:
    summary = runlog.summary()
    if summary is not None and summary.get("best_member") is not None:
        return summary["best_member"]
    scores = final_scores(runlog)
    if not scores:
        raise EmptyLog("Run log holds no trial records")
    return max(sorted(scores), key=lambda m: scores[m])

def _lineage_points(runlog: RunLog, member: int) -> List[Tuple[int, Configuration]]:
    by_member = defaultdict(list)
    for record in runlog.trials():
        by_member[record["member"]].append(record)
    clones = defaultdict(list)
    for d in runlog.directives():
        if d["action"] == "clone_from":
            clones[d["member"]].append(d)

    segments = []
    current, upto = member, math.inf
    while True:
        prior = [d for d in clones[current] if d["step"] < upto]
        last = prior[-1] if prior else None
        after = last["step"] if last is not None else -math.inf
        segments.append([r for r in by_member[current] if after < r["step"] <= upto])
        if last is None:
            break
        current, upto = last["donor"], last["donor_step"]
    records = [r for segment in reversed(segments) for r in segment]
    return [(r["trial"], Configuration(r["config"])) for r in records]

def _aggregate_configs(configs: Sequence[Configuration], space: ParamSpace) -> Configuration:
    values = {}
    for spec in space.specs:
        column = np.array([c[spec.name] for c in configs], dtype=np.float64)
        if spec.log_scale:
            value = float(np.exp(np.mean(np.log(column))))
        else:
            value = float(np.mean(column))
        values[spec.name] = spec.clamp(value)
    return Configuration(values)

def _top_k_points(runlog: RunLog, k: int, worst: bool) -> List[Tuple[int, Configuration]]:
    header = runlog.header
    if header is None or not header.get("space_spec"):
        raise EmptyLog("Run log has no header describing its search space")
    space = ParamSpace.from_dict(header["space_spec"])
    per_step = defaultdict(list)
    for record in runlog.snapshots():
        per_step[record["step"]].append(record)
    trials_per_step = defaultdict(lambda: defaultdict(int))
    for record in runlog.trials():
        trials_per_step[record["step"]][record["member"]] += 1

    points = []
    clock = 0
    for step in sorted(per_step):
        snaps = per_step[step]
        sign = 1.0 if worst else -1.0
        ranked = sorted(
            snaps,
            key=lambda r: (sign * (r["score"] if r["score"] is not None else -math.inf), r["member"]),
        )
        chosen = [Configuration(r["config"]) for r in ranked[:k]]
        points.append((clock, _aggregate_configs(chosen, space)))
        counts = trials_per_step.get(step)
        clock += max(counts.values()) if counts else 0
    return points

def extract_schedule(
    runlog: RunLog,
    mode: str = LINEAGE_BEST,
    k: int = TOP_K,
    worst: bool = False,
    member: Optional[int] = None,
) -> Schedule:
    """Recover a hyperparameter schedule from a finished run.

    lineage_best follows the clone ancestry of the best (or given) member;
    top_k_mean averages the top (or, with worst=True, bottom) k members per
    barrier, geometrically for log-scaled parameters.
    """
    if not runlog.trials():
        raise EmptyLog("Run log holds no trial records")
    if mode == LINEAGE_BEST:
        target = best_member(runlog) if member is None else member
        points = _lineage_points(runlog, target)
        if not points:
            raise EmptyLog(f"Member {target} has no trial records")
    elif mode == TOP_K_MEAN:
        if k < 1:
            raise ValueError("k must be positive")
        points = _top_k_points(runlog, k, worst)
        if not points:
            raise EmptyLog("Run log holds no population snapshots")
    else:
        raise ValueError(f"Unknown schedule mode '{mode}'")
    return Schedule.from_points(points)

# -- schedule evaluation ----------------------------------------------------

@dataclass
class EvaluationCurve:
    returns: np.ndarray
    curve: np.ndarray
    aggregate: str = MAX_OF_MEAN

    @property
    def mean_returns(self) -> np.ndarray:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanmean(self.returns, axis=0)

def evaluation_seed(master_seed: int, seed_index: int, trial: int = -1) -> int:
    """Seed for building (trial -1) or stepping a trainable during evaluation."""
    return seed_tree(master_seed, seed_index, trial, salt=EVAL_SALT)

def _evaluate_seed(
    make_trainable: Callable[[int], Trainable],
    schedule: Schedule,
    n_trials: int,
    master_seed: int,
    seed_index: int,
) -> List[float]:
    trainable = make_trainable(evaluation_seed(master_seed, seed_index))
    returns = []
    last = math.nan
    failed = False
    for t in range(n_trials):
        if not failed:
            try:
                last = trainable.step(schedule.config_at(t), seed=evaluation_seed(master_seed, seed_index, t))
            except NumericalOverflow as e:
                failed = True
                logger.warning(f"Evaluation seed {seed_index} failed at trial {t}: {e}")
        returns.append(last)
    return returns

def aggregate_curve(returns: np.ndarray, aggregate: str = MAX_OF_MEAN) -> np.ndarray:
    """Running maximum of the seed mean, or the mean of per-seed running maxima."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if aggregate == MAX_OF_MEAN:
            return np.fmax.accumulate(np.nanmean(returns, axis=0))
        if aggregate == MEAN_OF_MAX:
            return np.nanmean(np.fmax.accumulate(returns, axis=1), axis=0)
    raise ValueError(f"Unknown aggregate '{aggregate}'")

def evaluate_schedule(
    schedule: Schedule,
    make_trainable: Callable[[int], Trainable],
    n_trials: int,
    n_seeds: int = 5,
    master_seed: int = 0,
    workers: int = 1,
    aggregate: str = MAX_OF_MEAN,
) -> EvaluationCurve:
    """Train fresh trainables under a schedule and summarize their returns.

    make_trainable receives a seed and must be picklable when workers > 1.
    A seed that fails keeps contributing its last finite return.
    """
    if n_seeds < 1 or n_trials < 1:
        raise ValueError("Need at least one seed and one trial")
    run_seed = partial(_evaluate_seed, make_trainable, schedule, n_trials, master_seed)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(run_seed, range(n_seeds)))
    else:
        per_seed = [run_seed(i) for i in range(n_seeds)]
    returns = np.array(per_seed, dtype=np.float64)
    return EvaluationCurve(returns=returns, curve=aggregate_curve(returns, aggregate), aggregate=aggregate)

# -- histograms -------------------------------------------------------------

@dataclass
class Histogram:
    edges: np.ndarray
    counts: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(sum(int(c.sum()) for c in self.counts.values()))

def best_final_score(runlog: RunLog) -> float:
    summary = runlog.summary()
    if summary is not None and summary.get("best_score") is not None:
        return float(summary["best_score"])
    scores = final_scores(runlog)
    return max(scores.values()) if scores else -math.inf

def final_return_histogram(
    runlogs: Union[Mapping[str, Sequence[RunLog]], Sequence[RunLog]],
    bins: int = HISTOGRAM_BINS,
) -> Histogram:
    """Fixed-width bins over the best final scores of runs, counted per method."""
    if not isinstance(runlogs, Mapping):
        grouped = defaultdict(list)
        for log in runlogs:
            grouped[(log.header or {}).get("scheduler", "run")].append(log)
        runlogs = grouped
    values = {}
    for method, logs in runlogs.items():
        scores = np.array([best_final_score(log) for log in logs], dtype=np.float64)
        values[method] = scores[np.isfinite(scores)]
    pooled = np.concatenate(list(values.values())) if values else np.zeros(0)
    if len(pooled) == 0:
        raise EmptyLog("No finite final scores to bin")
    low, high = float(pooled.min()), float(pooled.max())
    if low == high:
        edges = np.array([low, high])
        return Histogram(edges, {m: np.array([len(v)]) for m, v in values.items()})
    edges = np.histogram_bin_edges(pooled, bins=bins, range=(low, high))
    return Histogram(edges, {m: np.histogram(v, bins=edges)[0] for m, v in values.items()})

# -- model diagnostics ------------------------------------------------------

def model_nll_eval(
    model: GaussianEnsemble,
    history: Optional[TransitionDataset] = None,
    window: int = NLL_WINDOW,
    external: Optional[TransitionDataset] = None,
) -> float:
    """Mean one-step NLL over the last `window` trials of history, or over external data."""
    if external is not None:
        data = external
    elif history is not None:
        data = history.last_trials(window)
    else:
        raise EmptyWindow("Need a history or an external dataset")
    if len(data) == 0:
        raise EmptyWindow("No transitions to evaluate")
    means, variances = model.predict_batch(data.states, data.actions)
    targets = data.targets()
    per_member = [gaussian_nll(means[b], np.log(variances[b]), targets) for b in range(model.ensemble_size)]
    return float(np.mean(per_member))

# -- CSV outputs ------------------------------------------------------------

def write_curve_csv(path: Path, curve: EvaluationCurve):
    """Columns: trial, mean_return, best_so_far."""
    mean = curve.mean_returns
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["trial", "mean_return", "best_so_far"])
        for t, (m, c) in enumerate(zip(mean, curve.curve)):
            writer.writerow([t, repr(float(m)), repr(float(c))])

def write_hist_csv(path: Path, hist: Histogram):
    """Columns: method, bin_low, bin_high, count."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "bin_low", "bin_high", "count"])
        for method in sorted(hist.counts):
            for i, count in enumerate(hist.counts[method]):
                writer.writerow([method, repr(float(hist.edges[i])), repr(float(hist.edges[i + 1])), int(count)])

def write_corr_csv(path: Path, rows: Sequence[Tuple[int, int, CorrelationReport]]):
    """Columns: low_budget, high_budget, n, cor, p, degenerate."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["low_budget", "high_budget", "n", "cor", "p", "degenerate"])
        for low, high, report in rows:
            writer.writerow([low, high, report.n, repr(report.cor), repr(report.p), int(report.degenerate)])

def write_schedule_csv(path: Path, schedule: Schedule):
    """Columns: trial followed by one column per parameter (sorted)."""
    names = schedule.names
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["trial"] + names)
        for trial, config in schedule.entries:
            writer.writerow([trial] + [repr(float(config[n])) for n in names])

def read_schedule_csv(path: Path) -> Schedule:
    try:
        with open(path, "r", newline="") as f:
            rows = list(csv.DictReader(f))
    except FileNotFoundError:
        raise EmptyLog(f"No schedule file at {path}") from None
    if not rows:
        raise EmptyLog(f"Schedule file {path} has no entries")
    entries = []
    for row in rows:
        trial = int(row.pop("trial"))
        entries.append((trial, Configuration({k: float(v) for k, v in row.items()})))
    return Schedule(tuple(entries))
