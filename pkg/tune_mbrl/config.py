"""Configuration management for tune-mbrl."""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import tomli_w
import yaml

from .confspace import GROUPS, JOINT
from .envs import ENVIRONMENTS
from .errors import ConfigError, InvalidBudget
from .utils import get_logger

# Try to import tomllib (Python 3.11+), fallback to tomli for older versions
try:
    import tomllib
except ImportError:
    import tomli as tomllib

logger = get_logger(__name__)

# Default config directory
CONFIG_DIR = Path.home() / ".tune_mbrl"
CONFIG_FILE = CONFIG_DIR / "config.toml"

DEFAULT_RUNS_DIR = "runs"
DEFAULT_WORKERS = 1
WORKERS_ENV = "TUNE_MBRL_WORKERS"

SCHEDULERS = ("random", "hyperband", "pbt", "pbt_bt")
SYNTHETIC_ENV = "synthetic"

class Config:
    """Manages application configuration."""

    def __init__(self, config_file: Optional[Path] = None):
        self.config_dir = CONFIG_DIR if config_file is None else config_file.parent
        self.config_file = CONFIG_FILE if config_file is None else config_file
        self._config_data: Dict[str, Any] = {}
        self._load_config()

    def _load_config(self):
        """Load configuration from file."""
        if self.config_file.exists():
            try:
                with open(self.config_file, "rb") as f:
                    self._config_data = tomllib.load(f)
            except (OSError, tomllib.TOMLDecodeError) as e:
                # If config is invalid, use defaults
                logger.warning(f"Ignoring unreadable config file {self.config_file}: {e}")
                self._config_data = {}

    def ensure_config_dir(self):
        """Ensure config directory exists."""
        self.config_dir.mkdir(parents=True, exist_ok=True)

    def get(self, key: str, default: Any = None) -> Any:
        """Get config value."""
        keys = key.split(".")
        value = self._config_data
        for k in keys:
            if isinstance(value, dict):
                value = value.get(k)
                if value is None:
                    return default
            else:
                return default
        return value if value is not None else default

    def set(self, key: str, value: Any):
        """Set config value (in memory only, doesn't persist)."""
        keys = key.split(".")
        config = self._config_data
        for k in keys[:-1]:
            if k not in config:
                config[k] = {}
            config = config[k]
        config[keys[-1]] = value

    def save(self):
        """Save configuration to file."""
        self.ensure_config_dir()
        with open(self.config_file, "wb") as f:
            tomli_w.dump(self._config_data, f)

    @property
    def workers(self) -> int:
        """Worker processes; TUNE_MBRL_WORKERS wins over the config file."""
        raw = os.getenv(WORKERS_ENV, self.get("workers", DEFAULT_WORKERS))
        try:
            workers = int(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"Worker count must be an integer, got {raw!r}") from None
        if workers < 1:
            raise ConfigError(f"Worker count must be positive, got {workers}")
        return workers

    def resolve_workers(self, explicit: Optional[int], run_workers: int) -> int:
        """Explicit count, else TUNE_MBRL_WORKERS when set, else the run setting."""
        if explicit is not None:
            return explicit
        if os.getenv(WORKERS_ENV) is not None:
            return self.workers
        return run_workers

    @property
    def runs_dir(self) -> Path:
        return Path(os.getenv("TUNE_MBRL_RUNS_DIR", self.get("runs_dir", DEFAULT_RUNS_DIR)))

    @property
    def log_level(self) -> str:
        return str(self.get("log_level", "INFO"))

# Global config instance
config = Config()

@dataclass
class RunConfig:
    """Everything that defines one search run.

    `population` is the number of members for random search and PBT;
    `budget` is the per-member trial budget (b_max for Hyperband).
    """

    scheduler: str = "pbt"
    env: str = "pendulum"
    space: str = "reacher"
    group: str = JOINT
    population: int = 40
    budget: int = 30
    interval: int = 5
    quantile: float = 0.2
    p_perturb: float = 0.75
    copy_history: bool = True
    b_min: int = 1
    eta: int = 3
    iterations: int = 1
    backtrack_every: int = 30
    archive_capacity: int = 10
    window: int = 3
    seed: int = 0
    workers: int = DEFAULT_WORKERS
    out: str = ""
    env_options: Dict[str, Any] = field(default_factory=dict)

    # fields that never change results
    RUNTIME_ONLY = ("workers", "out")

    def __post_init__(self):
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"Unknown scheduler '{self.scheduler}' (expected one of {', '.join(SCHEDULERS)})")
        if self.env != SYNTHETIC_ENV and self.env not in ENVIRONMENTS:
            known = ", ".join(sorted(ENVIRONMENTS) + [SYNTHETIC_ENV])
            raise ConfigError(f"Unknown environment '{self.env}' (expected one of {known})")
        if self.group not in GROUPS:
            raise ConfigError(f"Unknown parameter group '{self.group}'")
        for name in ("population", "budget", "interval", "iterations", "backtrack_every", "archive_capacity", "window", "workers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.scheduler in ("pbt", "pbt_bt") and self.population < 2:
            raise ConfigError("PBT needs a population of at least two members")
        if not 0.0 < self.quantile <= 0.5:
            raise ConfigError(f"quantile must lie in (0, 0.5], got {self.quantile}")
        if not 0.0 <= self.p_perturb <= 1.0:
            raise ConfigError(f"p_perturb must lie in [0, 1], got {self.p_perturb}")
        if self.scheduler == "hyperband":
            if self.eta < 2:
                raise ConfigError(f"eta must be at least 2, got {self.eta}")
            if not 1 <= self.b_min <= self.budget:
                raise InvalidBudget(f"Need 1 <= b_min <= b_max, got b_min={self.b_min}, b_max={self.budget}")
        if not isinstance(self.env_options, dict):
            raise ConfigError("env_options must be a mapping")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        """SHA-256 over every field that influences results."""
        data = {k: v for k, v in self.to_dict().items() if k not in self.RUNTIME_ONLY}
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown run settings: {', '.join(unknown)}")
        try:
            return cls(**dict(data))
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def save(self, path: Path):
        """Write the resolved run configuration as TOML."""
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            tomli_w.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        try:
            with open(path, "rb") as f:
                return cls.from_mapping(tomllib.load(f))
        except FileNotFoundError:
            raise ConfigError(f"No run configuration at {path}") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e

def load_preset(path: Union[str, Path]) -> Dict[str, Any]:
    """Read an experiment preset (YAML mapping of RunConfig fields)."""
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise ConfigError(f"Preset file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: preset must be a mapping of run settings")
    return data
