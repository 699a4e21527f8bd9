"""Hyperparameter spaces: sampling, PBT perturbation and clamping."""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np

from .errors import ConfigError, ValidationError
from .utils import get_logger

# Try to import tomllib (Python 3.11+), fallback to tomli for older versions
try:
    import tomllib
except ImportError:
    import tomli as tomllib

logger = get_logger(__name__)

CONTINUOUS = "continuous"
INTEGER = "integer"
KINDS = (CONTINUOUS, INTEGER)

MODEL_TRAIN = "model_train"
CEM_OPTIMIZER = "cem_optimizer"
JOINT = "joint"
GROUPS = (MODEL_TRAIN, CEM_OPTIMIZER, JOINT)

PERTURB_FACTORS = (0.8, 1.2)

SPACES_DIR = Path(__file__).parent / "spaces"

def round_half_away(value: float) -> float:
    """Round to the nearest integer, halves away from zero."""
    return math.copysign(math.floor(abs(value) + 0.5), value)

@dataclass(frozen=True)
class ParamSpec:
    """One tunable hyperparameter."""

    name: str
    kind: str
    lower: float
    upper: float
    log_scale: bool
    default: float

    def __post_init__(self):
        if not self.name.isidentifier():
            raise ConfigError(f"Parameter name '{self.name}' is not an identifier")
        if self.kind not in KINDS:
            raise ConfigError(f"{self.name}: unknown kind '{self.kind}'")
        if not self.lower <= self.upper:
            raise ConfigError(f"{self.name}: lower bound {self.lower} exceeds upper bound {self.upper}")
        if self.log_scale and self.lower <= 0:
            raise ConfigError(f"{self.name}: log-scaled parameters need a positive lower bound")
        if not self.lower <= self.default <= self.upper:
            raise ConfigError(
                f"{self.name}: default {self.default} outside [{self.lower}, {self.upper}]"
            )
        if self.kind == INTEGER:
            for label, value in (("lower", self.lower), ("upper", self.upper), ("default", self.default)):
                if math.isfinite(value) and value != int(value):
                    raise ConfigError(f"{self.name}: integer parameter has non-integer {label} {value}")

    def clamp(self, value: float) -> float:
        """Round integers, then clamp to bounds."""
        if self.kind == INTEGER:
            value = round_half_away(value)
        value = min(max(value, self.lower), self.upper)
        return float(int(value)) if self.kind == INTEGER else float(value)

    def contains(self, value: float) -> bool:
        if not math.isfinite(value):
            return False
        if self.kind == INTEGER and value != int(value):
            return False
        return self.lower <= value <= self.upper

    def to_dict(self) -> Dict[str, object]:
        return {
            "kind": self.kind,
            "lower": self.lower,
            "upper": self.upper,
            "default": self.default,
            "log_scale": self.log_scale,
        }

    @classmethod
    def from_dict(cls, name: str, data: Mapping[str, object]) -> "ParamSpec":
        """Build a spec from a `.space` table or a RunLog header entry."""
        try:
            kind = str(data.get("kind", CONTINUOUS))
            return cls(
                name=name,
                kind=kind,
                lower=float(data["lower"]),
                upper=float(data["upper"]),
                log_scale=bool(data.get("log_scale", False)),
                default=float(data["default"]),
            )
        except KeyError as e:
            raise ConfigError(f"{name}: missing field {e}") from e
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{name}: {e}") from e

@dataclass(frozen=True, eq=True)
class Configuration:
    """A concrete assignment of values to parameter names."""

    values: Mapping[str, float] = field(default_factory=dict)

    def __getitem__(self, name: str) -> float:
        return self.values[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def __hash__(self):
        return hash(self.key())

    def get(self, name: str, default: Optional[float] = None) -> Optional[float]:
        return self.values.get(name, default)

    def key(self) -> Tuple[Tuple[str, float], ...]:
        """Order-independent identity used for collision checks."""
        return tuple(sorted(self.values.items()))

    def to_dict(self) -> Dict[str, float]:
        return dict(self.values)

    def merged(self, other: "Configuration") -> "Configuration":
        """Values of `other` override values of self."""
        merged = dict(self.values)
        merged.update(other.values)
        return Configuration(merged)

    def as_int(self, name: str) -> int:
        return int(round_half_away(self.values[name]))

@dataclass(frozen=True)
class ParamSpace:
    """An ordered collection of parameter specs belonging to one group."""

    specs: Tuple[ParamSpec, ...]
    group: str = JOINT

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        if self.group not in GROUPS:
            raise ConfigError(f"Unknown parameter group '{self.group}'")
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise ConfigError(f"Duplicate parameter names in space: {names}")

    def __len__(self) -> int:
        return len(self.specs)

    def __iter__(self) -> Iterator[ParamSpec]:
        return iter(self.specs)

    @property
    def names(self) -> List[str]:
        return [s.name for s in self.specs]

    def spec(self, name: str) -> ParamSpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise KeyError(name)

    def defaults(self) -> Configuration:
        return Configuration({s.name: s.default for s in self.specs})

    def validate(self, config: Configuration):
        """Raise ValidationError unless config fits this space exactly."""
        if set(config.values) != set(self.names):
            missing = sorted(set(self.names) - set(config.values))
            extra = sorted(set(config.values) - set(self.names))
            raise ValidationError(f"Configuration keys mismatch (missing={missing}, extra={extra})")
        for s in self.specs:
            value = config[s.name]
            if not isinstance(value, (int, float)) or not s.contains(float(value)):
                raise ValidationError(f"{s.name}={value!r} is invalid for [{s.lower}, {s.upper}] ({s.kind})")

    def to_dict(self) -> Dict[str, object]:
        return {"group": self.group, "specs": {s.name: s.to_dict() for s in self.specs}}

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "ParamSpace":
        specs = data.get("specs", {})
        return cls(
            specs=tuple(ParamSpec.from_dict(name, spec) for name, spec in specs.items()),
            group=str(data.get("group", JOINT)),
        )

    @classmethod
    def union(cls, first: "ParamSpace", second: "ParamSpace") -> "ParamSpace":
        """Joint space over both groups; names must be disjoint."""
        overlap = set(first.names) & set(second.names)
        if overlap:
            raise ConfigError(f"Groups share parameters: {sorted(overlap)}")
        return cls(specs=first.specs + second.specs, group=JOINT)

def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)

def sample_value(spec: ParamSpec, rng: np.random.Generator) -> float:
    """Draw one value uniformly (log-uniformly when log_scale)."""
    if not (math.isfinite(spec.lower) and math.isfinite(spec.upper)):
        raise ConfigError(f"{spec.name}: cannot sample from unbounded range")
    if spec.log_scale:
        value = 10.0 ** rng.uniform(math.log10(spec.lower), math.log10(spec.upper))
    else:
        value = rng.uniform(spec.lower, spec.upper)
    return spec.clamp(value)

def perturb_value(value: float, spec: ParamSpec, factor: float) -> float:
    """Multiply a raw value by a factor, round integers and clamp."""
    return spec.clamp(value * factor)

def sample(space: ParamSpace, seed) -> Configuration:
    """Sample a configuration uniformly from the space."""
    if len(space) == 0:
        raise ConfigError("Cannot sample from an empty space")
    rng = _rng(seed)
    return Configuration({s.name: sample_value(s, rng) for s in space.specs})

def perturb(config: Configuration, space: ParamSpace, seed) -> Configuration:
    """Multiply each value by 0.8 or 1.2, drawn independently per parameter."""
    rng = _rng(seed)
    values = dict(config.values)
    for s in space.specs:
        factor = PERTURB_FACTORS[int(rng.integers(2))]
        values[s.name] = perturb_value(config[s.name], s, factor)
    return Configuration(values)

def explore(config: Configuration, space: ParamSpace, p_perturb: float, seed) -> Tuple[Configuration, str]:
    """PBT explore step; returns the new config and 'perturb' or 'resample'."""
    if not 0.0 <= p_perturb <= 1.0:
        raise ConfigError(f"p_perturb must lie in [0, 1], got {p_perturb}")
    rng = _rng(seed)
    if rng.random() < p_perturb:
        return perturb(config, space, rng), "perturb"
    return sample(space, rng), "resample"

def resample_or_perturb(config: Configuration, space: ParamSpace, p_perturb: float, seed) -> Configuration:
    """Perturb the whole config with probability p_perturb, else resample it."""
    new_config, _ = explore(config, space, p_perturb, seed)
    return new_config

def resolve_space_file(name_or_path: Union[str, Path]) -> Path:
    """Find a shipped space by name, or accept a filesystem path."""
    path = Path(name_or_path)
    if path.exists():
        return path
    stem = path.name[:-len(".space")] if path.name.endswith(".space") else path.name
    shipped = SPACES_DIR / f"{stem}.space"
    if shipped.exists():
        return shipped
    available = ", ".join(shipped_spaces())
    raise ConfigError(f"Search space '{name_or_path}' not found (shipped: {available})")

def _group_from_tables(tables: Mapping[str, object], group: str, source: str) -> ParamSpace:
    if group not in tables or not isinstance(tables[group], dict):
        raise ConfigError(f"{source}: missing [{group}] tables")
    specs = []
    for name, data in tables[group].items():
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: [{group}.{name}] must be a table")
        specs.append(ParamSpec.from_dict(name, data))
    return ParamSpace(specs=tuple(specs), group=group)

def load_space(name_or_path: Union[str, Path], group: str = JOINT) -> ParamSpace:
    """Load one group (or the joint union) from a `.space` file."""
    if group not in GROUPS:
        raise ConfigError(f"Unknown parameter group '{group}' (expected one of {', '.join(GROUPS)})")
    path = resolve_space_file(name_or_path)
    try:
        with open(path, "rb") as f:
            tables = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    logger.debug(f"Loaded search space from {path}")
    if group == JOINT:
        return ParamSpace.union(
            _group_from_tables(tables, MODEL_TRAIN, str(path)),
            _group_from_tables(tables, CEM_OPTIMIZER, str(path)),
        )
    return _group_from_tables(tables, group, str(path))

def shipped_spaces() -> Iterable[str]:
    return sorted(p.stem for p in SPACES_DIR.glob("*.space"))
