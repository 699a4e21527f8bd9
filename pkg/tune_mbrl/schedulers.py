"""Search strategies as pure decision procedures over member scores.

Random search, Successive Halving/Hyperband, PBT and PBT with backtracking
(PBT-BT) never touch a trainable. They turn a snapshot of scores into
SchedulerDirective objects that the orchestrator executes.
"""

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .confspace import Configuration, ParamSpace, explore, perturb, sample
from .errors import ConfigError, InvalidBudget, PopulationTooSmall
from .utils import get_logger

logger = get_logger(__name__)

CONTINUE = "continue"
CLONE_FROM = "clone_from"
STOP = "stop"
PROMOTE = "promote"
ACTIONS = (CONTINUE, CLONE_FROM, STOP, PROMOTE)

ARCHIVE_CAPACITY = 10
BACKTRACK_EVERY = 30
MAX_UNIQUE_ATTEMPTS = 100

@dataclass(frozen=True)
class PbtOptions:
    """Population size, truncation quantile and exploit cadence."""

    population_size: int = 40
    quantile: float = 0.20
    interval: int = 5
    p_perturb: float = 0.75
    copy_history: bool = True

    def __post_init__(self):
        if not 0.0 < self.quantile <= 0.5:
            raise ConfigError(f"Truncation quantile must lie in (0, 0.5], got {self.quantile}")
        if self.interval < 1:
            raise ConfigError("PBT interval must be at least one trial")
        if self.population_size < 2:
            raise ConfigError("PBT needs a population of at least two members")
        if not 0.0 <= self.p_perturb <= 1.0:
            raise ConfigError(f"p_perturb must lie in [0, 1], got {self.p_perturb}")

    def truncation(self, n_members: int) -> int:
        return int(math.floor(self.quantile * n_members))

@dataclass(frozen=True)
class SchedulerDirective:
    """What one member does after a barrier."""

    member: int
    action: str = CONTINUE
    donor: Optional[int] = None
    copy_history: bool = True
    new_config: Optional[Configuration] = None
    budget: Optional[int] = None
    explore: Optional[str] = None
    elite: Optional[int] = None

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"Unknown directive action '{self.action}'")
        if self.action == CLONE_FROM:
            if self.donor is None and self.elite is None:
                raise ValueError("clone_from needs a donor member or an elite")
            if self.donor == self.member:
                raise ValueError(f"Member {self.member} cannot clone itself")
        if self.action == PROMOTE and (self.budget is None or self.budget < 1):
            raise ValueError("promote needs a positive budget")

def _rank(scores: Sequence[Tuple[int, float]]) -> List[Tuple[int, float]]:
    """Ascending by score; ties broken by member id so the order is total."""
    return sorted(scores, key=lambda item: (item[1], item[0]))

def _continue_all(scores: Sequence[Tuple[int, float]]) -> List[SchedulerDirective]:
    return [SchedulerDirective(member=m) for m, _ in sorted(scores)]

def pbt_step(
    scores: Sequence[Tuple[int, float]],
    opts: PbtOptions,
    space: ParamSpace,
    seed: int,
    configs: Mapping[int, Configuration],
) -> List[SchedulerDirective]:
    """Truncation selection: bottom quantile clones a random top-quantile member."""
    n_members = len(scores)
    k = opts.truncation(n_members)
    if k == 0:
        if n_members >= 2:
            warnings.warn(
                f"floor({opts.quantile} * {n_members}) = 0; exploit step skipped",
                PopulationTooSmall,
            )
            logger.warning(f"Population of {n_members} too small for quantile {opts.quantile}")
        return _continue_all(scores)

    rng = np.random.default_rng(seed)
    ranked = _rank(scores)
    bottom = sorted(m for m, _ in ranked[:k])
    top = [m for m, _ in ranked[-k:]]

    directives = {m: SchedulerDirective(member=m) for m, _ in scores}
    for receiver in bottom:
        donor = top[int(rng.integers(len(top)))]
        new_config, how = explore(configs[donor], space, opts.p_perturb, int(rng.integers(2**63)))
        directives[receiver] = SchedulerDirective(
            member=receiver,
            action=CLONE_FROM,
            donor=donor,
            copy_history=opts.copy_history,
            new_config=new_config,
            explore=how,
        )
    return [directives[m] for m in sorted(directives)]

@dataclass(frozen=True)
class Rung:
    budget: int
    n_configs: int
    survivors: int

@dataclass(frozen=True)
class Bracket:
    s: int
    n_configs: int
    rungs: Tuple[Rung, ...]

@dataclass(frozen=True)
class HyperbandPlan:
    """Budgets, brackets and rungs of a Hyperband run."""

    b_min: int
    b_max: int
    eta: int
    s_max: int
    brackets: Tuple[Bracket, ...]
    n_iterations: int = 1

    def iter_brackets(self) -> Iterator[Tuple[int, Bracket]]:
        """One Successive Halving run per iteration, cycling through the brackets."""
        for iteration in range(self.n_iterations):
            yield iteration, self.brackets[iteration % len(self.brackets)]

def _s_max(b_min: int, b_max: int, eta: int) -> int:
    # integer search avoids float error in log(b_max / b_min, eta)
    s = 0
    while b_min * eta ** (s + 1) <= b_max:
        s += 1
    return s

def _rung_budget(b_max: int, eta: int, exponent: int) -> int:
    return max(1, int(math.floor(b_max / eta ** exponent + 0.5)))

def hyperband_plan(b_min: int, b_max: int, eta: int = 3, n_iterations: int = 1) -> HyperbandPlan:
    """Geometric budget ladder b = b_max * eta**-s for s = s_max .. 0."""
    if b_min < 1 or b_max < 1:
        raise InvalidBudget("Budgets must be at least one trial")
    if b_min > b_max:
        raise InvalidBudget(f"b_min={b_min} exceeds b_max={b_max}")
    if eta < 2:
        raise InvalidBudget(f"eta must be at least 2, got {eta}")
    if n_iterations < 1:
        raise InvalidBudget("n_iterations must be at least one")

    s_max = _s_max(b_min, b_max, eta)
    brackets = []
    for s in range(s_max, -1, -1):
        n = int(math.ceil((s_max + 1) / (s + 1) * eta ** s))
        rungs = []
        n_i = n
        for i in range(s + 1):
            budget = _rung_budget(b_max, eta, s - i)
            survivors = n_i // eta if i < s else 0
            rungs.append(Rung(budget=budget, n_configs=n_i, survivors=survivors))
            n_i = survivors
        brackets.append(Bracket(s=s, n_configs=n, rungs=tuple(rungs)))
    return HyperbandPlan(
        b_min=b_min, b_max=b_max, eta=eta, s_max=s_max,
        brackets=tuple(brackets), n_iterations=n_iterations,
    )

def random_search_plan(n_configs: int, budget: int) -> HyperbandPlan:
    """Random search as a degenerate plan: one rung at full budget, no promotions."""
    if n_configs < 1:
        raise ConfigError("Random search needs at least one configuration")
    if budget < 1:
        raise InvalidBudget("Budget must be at least one trial")
    bracket = Bracket(s=0, n_configs=n_configs, rungs=(Rung(budget=budget, n_configs=n_configs, survivors=0),))
    return HyperbandPlan(b_min=budget, b_max=budget, eta=2, s_max=0, brackets=(bracket,), n_iterations=1)

def plan_total_trials(plan: HyperbandPlan) -> int:
    """Trials charged under continuation: promoted configs only pay the increment."""
    total = 0
    for _, bracket in plan.iter_brackets():
        previous = 0
        for rung in bracket.rungs:
            total += rung.n_configs * (rung.budget - previous)
            previous = rung.budget
    return total

def successive_halving_promote(rung_scores: Sequence[Tuple[Hashable, float]], eta: int) -> List[Hashable]:
    """Keys of the top floor(n / eta) entries; ties go to the earlier entry."""
    keep = len(rung_scores) // eta
    order = sorted(range(len(rung_scores)), key=lambda i: (-rung_scores[i][1], i))
    return [rung_scores[i][0] for i in order[:keep]]

@dataclass
class Elite:
    score: float
    checkpoint: bytes
    config: Configuration
    member: int
    step: int
    trial: int

@dataclass
class EliteArchive:
    """Best (checkpoint, config) pairs seen at any step, best first."""

    capacity: int = ARCHIVE_CAPACITY
    entries: List[Elite] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError("Elite archive capacity must be positive")

    def __len__(self) -> int:
        return len(self.entries)

    def accepts(self, score: float) -> bool:
        if not math.isfinite(score):
            return False
        return len(self.entries) < self.capacity or score > self.entries[-1].score

    def offer(self, elite: Elite) -> bool:
        """Insert if better than the current worst; keeps order and capacity."""
        if not self.accepts(elite.score):
            return False
        position = len(self.entries)
        for i, existing in enumerate(self.entries):
            if elite.score > existing.score:
                position = i
                break
        self.entries.insert(position, elite)
        del self.entries[self.capacity:]
        return True

    def copy(self) -> "EliteArchive":
        return EliteArchive(capacity=self.capacity, entries=list(self.entries))

def _unique_config(
    start: Configuration,
    space: ParamSpace,
    taken: List[Configuration],
    rng: np.random.Generator,
) -> Configuration:
    """Perturb until no live member uses the same hyperparameters."""
    taken_keys = {c.key() for c in taken}
    candidate = perturb(start, space, int(rng.integers(2**63)))
    attempts = 1
    while candidate.key() in taken_keys and attempts < MAX_UNIQUE_ATTEMPTS:
        candidate = perturb(candidate, space, int(rng.integers(2**63)))
        attempts += 1
    while candidate.key() in taken_keys:
        # clamped perturbations can cycle; a fresh sample breaks the tie
        candidate = sample(space, int(rng.integers(2**63)))
    return candidate

def pbt_bt_step(
    scores: Sequence[Tuple[int, float]],
    archive: EliteArchive,
    opts: PbtOptions,
    space: ParamSpace,
    seed: int,
    configs: Mapping[int, Configuration],
    step_index: int,
    checkpoint_of: Callable[[int], bytes],
    backtrack_every: int = BACKTRACK_EVERY,
    trial_of: Optional[Mapping[int, int]] = None,
) -> Tuple[List[SchedulerDirective], EliteArchive]:
    """PBT step plus an elite archive that bottom members backtrack to.

    Every step the top-quantile members are offered to the archive. On every
    `backtrack_every`-th step (and only when the archive is non-empty) the
    bottom-quantile members are replaced by randomly drawn elites whose
    hyperparameters are then perturbed until no live member shares them.
    """
    if backtrack_every < 1:
        raise ConfigError("backtrack_every must be positive")
    updated = archive.copy()
    k = max(1, opts.truncation(len(scores)))
    ranked = _rank(scores)
    for member, score in reversed(ranked[-k:]):
        if updated.accepts(score):
            updated.offer(Elite(
                score=score,
                checkpoint=checkpoint_of(member),
                config=configs[member],
                member=member,
                step=step_index,
                trial=trial_of[member] if trial_of is not None else step_index,
            ))

    gate = step_index > 0 and step_index % backtrack_every == 0
    if not gate:
        return pbt_step(scores, opts, space, seed, configs), updated
    if len(updated) == 0:
        logger.info(f"Step {step_index}: elite archive empty, backtracking skipped")
        return pbt_step(scores, opts, space, seed, configs), updated
    if opts.truncation(len(scores)) == 0:
        return pbt_step(scores, opts, space, seed, configs), updated

    rng = np.random.default_rng(seed)
    receivers = sorted(m for m, _ in ranked[:opts.truncation(len(scores))])
    live = {m: configs[m] for m, _ in scores if m not in receivers}
    directives = {m: SchedulerDirective(member=m) for m, _ in scores}
    for receiver in receivers:
        elite_index = int(rng.integers(len(updated)))
        elite = updated.entries[elite_index]
        new_config = _unique_config(elite.config, space, list(live.values()), rng)
        live[receiver] = new_config
        directives[receiver] = SchedulerDirective(
            member=receiver,
            action=CLONE_FROM,
            elite=elite_index,
            copy_history=opts.copy_history,
            new_config=new_config,
            explore="perturb",
        )
    logger.info(f"Step {step_index}: backtracked {len(receivers)} members to elites")
    return [directives[m] for m in sorted(directives)], updated
