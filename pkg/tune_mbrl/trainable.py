"""The trainable contract, checkpoint format and a synthetic non-stationary trainable.

Checkpoint byte layout (all integers little-endian)::

    magic        4 bytes   b"TMCK"
    version      uint16    FORMAT_VERSION
    flags        uint8     bit 0 set when the history section is present
    4 sections   each: uint64 length + payload, in this order
        model_state      opaque bytes owned by the trainable
        history          opaque bytes (zero length when flag bit 0 is clear)
        hyperparameters  UTF-8 JSON object name -> value
        counters         UTF-8 JSON object: trial_index, window, returns,
                         failed, rng_state
"""

import io
import json
import math
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .confspace import CONTINUOUS, JOINT, Configuration, ParamSpace, ParamSpec
from .errors import CorruptCheckpoint, EmptyHistory, NumericalOverflow, VersionMismatch
from .utils import get_logger

logger = get_logger(__name__)

MAGIC = b"TMCK"
FORMAT_VERSION = 1
SCORE_WINDOW = 3
FAILED_SCORE = -math.inf

_HEADER = struct.Struct("<4sHB")
_LENGTH = struct.Struct("<Q")
_FLAG_HISTORY = 0x01

def _pack_sections(sections: Sequence[bytes]) -> bytes:
    out = bytearray()
    for payload in sections:
        out += _LENGTH.pack(len(payload))
        out += payload
    return bytes(out)

def _unpack_sections(data: bytes, offset: int, count: int) -> List[bytes]:
    sections = []
    for _ in range(count):
        if offset + _LENGTH.size > len(data):
            raise CorruptCheckpoint("Truncated section length")
        (length,) = _LENGTH.unpack_from(data, offset)
        offset += _LENGTH.size
        if offset + length > len(data):
            raise CorruptCheckpoint("Truncated section payload")
        sections.append(bytes(data[offset:offset + length]))
        offset += length
    if offset != len(data):
        raise CorruptCheckpoint("Trailing bytes after last section")
    return sections

def pack_arrays(arrays: Sequence[np.ndarray]) -> bytes:
    """Serialize arrays as length-prefixed .npy blobs (deterministic bytes)."""
    blobs = []
    for array in arrays:
        buf = io.BytesIO()
        np.save(buf, np.ascontiguousarray(array), allow_pickle=False)
        blobs.append(buf.getvalue())
    return _LENGTH.pack(len(blobs)) + _pack_sections(blobs)

def unpack_arrays(data: bytes) -> List[np.ndarray]:
    """Inverse of pack_arrays."""
    try:
        (count,) = _LENGTH.unpack_from(data, 0)
        blobs = _unpack_sections(data, _LENGTH.size, count)
        return [np.load(io.BytesIO(blob), allow_pickle=False) for blob in blobs]
    except CorruptCheckpoint:
        raise
    except (struct.error, ValueError, OSError) as e:
        raise CorruptCheckpoint(f"Malformed array payload: {e}") from e

@dataclass
class ScoreWindow:
    """Per-trial returns and the moving-window objective."""

    window: int = SCORE_WINDOW
    returns: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("Score window must be a positive integer")

    def record(self, value: float):
        self.returns.append(float(value))

    def score(self) -> float:
        """Mean of the last min(window, n) returns."""
        if not self.returns:
            raise EmptyHistory("No returns recorded yet")
        recent = self.returns[-self.window:]
        return math.fsum(recent) / len(recent)

    def __len__(self) -> int:
        return len(self.returns)

@dataclass
class TrainableCheckpoint:
    """Everything PBT copies when one member exploits another."""

    model_state: bytes
    history: Optional[bytes]
    hyperparameters: Optional[Configuration]
    trial_index: int
    rng_state: Dict[str, Any]
    returns: List[float] = field(default_factory=list)
    window: int = SCORE_WINDOW
    failed: bool = False

    @property
    def copy_history(self) -> bool:
        return self.history is not None

    def to_bytes(self) -> bytes:
        flags = _FLAG_HISTORY if self.history is not None else 0
        hyper = self.hyperparameters.to_dict() if self.hyperparameters is not None else None
        counters = {
            "trial_index": self.trial_index,
            "window": self.window,
            "returns": self.returns,
            "failed": self.failed,
            "rng_state": self.rng_state,
        }
        sections = [
            self.model_state,
            self.history if self.history is not None else b"",
            json.dumps(hyper, separators=(",", ":")).encode("utf-8"),
            json.dumps(counters, separators=(",", ":")).encode("utf-8"),
        ]
        return _HEADER.pack(MAGIC, FORMAT_VERSION, flags) + _pack_sections(sections)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TrainableCheckpoint":
        if len(data) < _HEADER.size:
            raise CorruptCheckpoint("Checkpoint shorter than its header")
        magic, version, flags = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise CorruptCheckpoint(f"Bad magic bytes {magic!r}")
        if version != FORMAT_VERSION:
            raise VersionMismatch(f"Checkpoint format {version}, expected {FORMAT_VERSION}")
        model_state, history, hyper_raw, counters_raw = _unpack_sections(data, _HEADER.size, 4)
        try:
            hyper = json.loads(hyper_raw.decode("utf-8"))
            counters = json.loads(counters_raw.decode("utf-8"))
            return cls(
                model_state=model_state,
                history=history if flags & _FLAG_HISTORY else None,
                hyperparameters=Configuration(hyper) if hyper is not None else None,
                trial_index=int(counters["trial_index"]),
                rng_state=counters["rng_state"],
                returns=[float(r) for r in counters["returns"]],
                window=int(counters["window"]),
                failed=bool(counters["failed"]),
            )
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise CorruptCheckpoint(f"Malformed checkpoint metadata: {e}") from e

class Trainable(ABC):
    """Something a scheduler can train one trial at a time.

    Subclasses implement a single trial plus (de)serialization of their model
    and history; the base class owns validation, counters, scoring and the
    checkpoint/clone semantics.
    """

    def __init__(self, space: ParamSpace, seed: int = 0, window: int = SCORE_WINDOW):
        self.space = space
        self.trial_index = 0
        self.returns = ScoreWindow(window)
        self.hyperparameters: Optional[Configuration] = None
        self.failed = False
        self._rng = np.random.default_rng(seed)

    @abstractmethod
    def _run_trial(self, config: Configuration, rng: np.random.Generator) -> float:
        """Execute one trial and return its return."""

    @abstractmethod
    def _save_model(self) -> bytes:
        ...

    @abstractmethod
    def _load_model(self, data: bytes):
        ...

    @abstractmethod
    def _save_history(self) -> bytes:
        ...

    @abstractmethod
    def _load_history(self, data: bytes):
        ...

    @property
    @abstractmethod
    def history_size(self) -> int:
        ...

    def step(self, config: Configuration, seed: Optional[int] = None) -> float:
        """Run exactly one trial under config and record its return."""
        self.space.validate(config)
        if self.failed:
            raise NumericalOverflow("Member already failed; restore a checkpoint first")
        rng = self._rng if seed is None else np.random.default_rng(seed)
        self.hyperparameters = config
        try:
            value = float(self._run_trial(config, rng))
        except NumericalOverflow:
            self.failed = True
            raise
        if not math.isfinite(value):
            self.failed = True
            raise NumericalOverflow(f"Trial {self.trial_index} returned {value}")
        self.trial_index += 1
        self.returns.record(value)
        return value

    def score(self) -> float:
        """Moving-window score; failed or untrained members get the sentinel."""
        if self.failed or not self.returns.returns:
            return FAILED_SCORE
        return self.returns.score()

    def checkpoint(self, copy_history: bool = True) -> TrainableCheckpoint:
        return TrainableCheckpoint(
            model_state=self._save_model(),
            history=self._save_history() if copy_history else None,
            hyperparameters=self.hyperparameters,
            trial_index=self.trial_index,
            rng_state=self._rng.bit_generator.state,
            returns=list(self.returns.returns),
            window=self.returns.window,
            failed=self.failed,
        )

    def restore(self, ckpt: TrainableCheckpoint, copy_history: Optional[bool] = None):
        """Overwrite this instance from ckpt; history only when both sides agree."""
        take_history = ckpt.history is not None if copy_history is None else copy_history
        if take_history and ckpt.history is None:
            logger.warning("Checkpoint carries no history; keeping the receiver's own")
            take_history = False
        self._load_model(ckpt.model_state)
        if take_history:
            self._load_history(ckpt.history)
        self.hyperparameters = ckpt.hyperparameters
        self.trial_index = ckpt.trial_index
        self.returns = ScoreWindow(ckpt.window, list(ckpt.returns))
        self.failed = ckpt.failed
        self._rng.bit_generator.state = ckpt.rng_state

    def apply_directive(self, directive, donor: Optional[TrainableCheckpoint] = None) -> Optional[Configuration]:
        """Apply a scheduler directive addressed to this member.

        Returns the hyperparameters that will be active at the next trial.
        """
        if directive.action == "clone_from":
            if donor is None:
                raise CorruptCheckpoint(f"Member {directive.member}: clone directive without donor checkpoint")
            self.restore(donor, copy_history=directive.copy_history)
        if directive.new_config is not None:
            self.hyperparameters = directive.new_config
        return self.hyperparameters

SYNTHETIC_PARAM = "h"

def synthetic_space() -> ParamSpace:
    """The one-parameter space of the SyntheticTrainable."""
    return ParamSpace(
        specs=(ParamSpec(SYNTHETIC_PARAM, CONTINUOUS, 0.0, 1.0, False, 0.5),),
        group=JOINT,
    )

class SyntheticTrainable(Trainable):
    """Cheap trainable whose best hyperparameter drifts over time.

    The response surface is f(h, t) = -(h - m(t))**2 with m(t) a sawtooth:
    constant `base` for the first `hold` trials, then rising by `amplitude`
    over every `drift_period` trials. theta is the regret accumulated so far,
    sum of -f over past trials, and is checkpointed with the model. A trial
    returns f(h, t) - memory * theta, so a fresh member at the optimum returns
    the surface maximum 0 and a lineage that tracked m(t) keeps a higher
    return than any fixed h.
    """

    def __init__(
        self,
        drift_period: int = 100,
        base: float = 0.2,
        amplitude: float = 0.6,
        hold: int = 0,
        memory: float = 1.0,
        noise: float = 0.0,
        seed: int = 0,
        window: int = SCORE_WINDOW,
    ):
        if drift_period < 1:
            raise ValueError("drift_period must be a positive integer")
        if memory < 0:
            raise ValueError("memory must be non-negative")
        super().__init__(synthetic_space(), seed=seed, window=window)
        self.drift_period = drift_period
        self.base = base
        self.amplitude = amplitude
        self.hold = hold
        self.memory = memory
        self.noise = noise
        self.theta = 0.0
        self._history: List[List[float]] = []

    @property
    def t(self) -> int:
        return self.trial_index

    def optimum(self, t: int) -> float:
        if t < self.hold:
            return self.base
        phase = ((t - self.hold) % self.drift_period) / self.drift_period
        return self.base + self.amplitude * phase

    def surface(self, h: float, t: int) -> float:
        return -(h - self.optimum(t)) ** 2

    def _run_trial(self, config: Configuration, rng: np.random.Generator) -> float:
        h = config[SYNTHETIC_PARAM]
        value = self.surface(h, self.trial_index)
        ret = value - self.memory * self.theta
        if self.noise:
            ret += self.noise * rng.normal()
        self.theta -= value
        self._history.append([float(self.trial_index), h, value])
        return ret

    def _save_model(self) -> bytes:
        return pack_arrays([np.array([self.theta], dtype=np.float64)])

    def _load_model(self, data: bytes):
        (theta,) = unpack_arrays(data)
        self.theta = float(theta[0])

    def _save_history(self) -> bytes:
        return pack_arrays([np.array(self._history, dtype=np.float64).reshape(-1, 3)])

    def _load_history(self, data: bytes):
        (records,) = unpack_arrays(data)
        self._history = records.reshape(-1, 3).tolist()

    @property
    def history_size(self) -> int:
        return len(self._history)
