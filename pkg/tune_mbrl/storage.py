"""Run directory persistence: the RunLog, wall-time sidecar, checkpoints and barrier state.

Layout of a run directory::

    run.toml          resolved RunConfig
    runlog.ndjson     one event per line, fixed field order
    timings.ndjson    wall time per trial (kept out of the RunLog)
    state.json        last completed barrier, for resume
    checkpoints/      step_<k>/member_<id>.ckpt and elites/<key>.ckpt
    search.log        mirrored log records
"""

import json
import math
import os
import shutil
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

from .errors import CorruptCheckpoint, EmptyLog
from .utils import get_logger

logger = get_logger(__name__)

RUNLOG_FILE = "runlog.ndjson"
TIMINGS_FILE = "timings.ndjson"
STATE_FILE = "state.json"
RUN_CONFIG_FILE = "run.toml"
SEARCH_LOG_FILE = "search.log"
SCHEDULE_FILE = "schedule.csv"
CHECKPOINT_DIR = "checkpoints"

HEADER = "header"
TRIAL = "trial"
DIRECTIVE = "directive"
FAILURE = "failure"
SNAPSHOT = "snapshot"
SUMMARY = "summary"

EVENT_FIELDS = {
    HEADER: ("event", "run_id", "scheduler", "env", "space", "group", "seed", "members", "options", "space_spec"),
    TRIAL: ("event", "step", "member", "trial", "config", "return", "score", "failed"),
    DIRECTIVE: ("event", "step", "member", "action", "donor", "donor_step", "donor_trial", "elite",
                "copy_history", "explore", "budget", "new_config"),
    FAILURE: ("event", "step", "member", "trial", "error"),
    SNAPSHOT: ("event", "step", "member", "trial", "config", "score"),
    SUMMARY: ("event", "best_member", "best_score", "best_config", "schedule"),
}

def _finite_or_none(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value

def make_event(kind: str, **values) -> Dict[str, Any]:
    """Build an event dict in its fixed field order; non-finite floats become null."""
    if kind not in EVENT_FIELDS:
        raise ValueError(f"Unknown event kind '{kind}'")
    unknown = set(values) - set(EVENT_FIELDS[kind])
    if unknown:
        raise ValueError(f"{kind} events have no fields {sorted(unknown)}")
    event = {"event": kind}
    for name in EVENT_FIELDS[kind][1:]:
        event[name] = _finite_or_none(values.get(name))
    return event

def encode_event(event: Dict[str, Any]) -> str:
    return json.dumps(event, separators=(",", ":"), allow_nan=False)

class RunLog:
    """In-memory view of an event stream, loadable from a run directory."""

    def __init__(self, events: Optional[Iterable[Dict[str, Any]]] = None):
        self.events: List[Dict[str, Any]] = list(events or [])

    def __len__(self) -> int:
        return len(self.events)

    def _of(self, kind: str) -> List[Dict[str, Any]]:
        return [e for e in self.events if e.get("event") == kind]

    @property
    def header(self) -> Optional[Dict[str, Any]]:
        headers = self._of(HEADER)
        return headers[0] if headers else None

    def trials(self) -> List[Dict[str, Any]]:
        return self._of(TRIAL)

    def directives(self) -> List[Dict[str, Any]]:
        return self._of(DIRECTIVE)

    def snapshots(self) -> List[Dict[str, Any]]:
        return self._of(SNAPSHOT)

    def failures(self) -> List[Dict[str, Any]]:
        return self._of(FAILURE)

    def summary(self) -> Optional[Dict[str, Any]]:
        summaries = self._of(SUMMARY)
        return summaries[-1] if summaries else None

    def directive_batches(self) -> int:
        """Number of barriers at which directives were issued."""
        return len({e["step"] for e in self.directives()})

    @classmethod
    def load(cls, path) -> "RunLog":
        """Read runlog.ndjson from a run directory (or a direct file path)."""
        path = Path(path)
        if path.is_dir():
            path = path / RUNLOG_FILE
        if not path.exists():
            raise EmptyLog(f"No run log at {path}")
        events = []
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    events.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise EmptyLog(f"{path}:{line_no}: unreadable event ({e})") from e
        return cls(events)

class RunLogWriter:
    """Appends events to runlog.ndjson, optionally truncating to a resume offset."""

    def __init__(self, path: Path, truncate_at: Optional[int] = None):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        if truncate_at is not None and path.exists():
            with open(path, "r+b") as f:
                f.truncate(truncate_at)
        elif truncate_at is None and path.exists():
            path.unlink()
        self._file = open(path, "ab")

    def write(self, event: Dict[str, Any]):
        self._file.write((encode_event(event) + "\n").encode("utf-8"))
        self._file.flush()

    @property
    def offset(self) -> int:
        return self._file.tell()

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

def append_timing(run_dir: Path, step: int, member: int, trial: int, wall_time: float):
    """Record one trial's wall time in the sidecar file."""
    record = {"step": step, "member": member, "trial": trial, "wall_time": round(wall_time, 6)}
    with open(run_dir / TIMINGS_FILE, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, separators=(",", ":")) + "\n")

def atomic_write_bytes(path: Path, data: bytes):
    """Whole-file replace: readers see the old or the new file, never a mix."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)

class CheckpointStore:
    """Member checkpoints per barrier step plus elite-archive checkpoints."""

    def __init__(self, run_dir: Path):
        self.root = run_dir / CHECKPOINT_DIR
        self.elite_dir = self.root / "elites"

    def step_dir(self, step: int) -> Path:
        return self.root / f"step_{step:05d}"

    def member_path(self, step: int, member: int) -> Path:
        return self.step_dir(step) / f"member_{member:04d}.ckpt"

    def save_member(self, step: int, member: int, data: bytes):
        atomic_write_bytes(self.member_path(step, member), data)

    def load_member(self, step: int, member: int) -> bytes:
        path = self.member_path(step, member)
        if not path.exists():
            raise CorruptCheckpoint(f"Missing checkpoint {path}")
        return path.read_bytes()

    def latest_step(self) -> Optional[int]:
        steps = sorted(int(p.name.split("_")[1]) for p in self.root.glob("step_*") if p.is_dir())
        return steps[-1] if steps else None

    def prune_steps(self, keep: int):
        """Drop every step directory except `keep`."""
        for path in self.root.glob("step_*"):
            if path.is_dir() and path != self.step_dir(keep):
                shutil.rmtree(path)

    def elite_path(self, key: str) -> Path:
        return self.elite_dir / f"{key}.ckpt"

    def save_elite(self, key: str, data: bytes):
        path = self.elite_path(key)
        if not path.exists():
            atomic_write_bytes(path, data)

    def load_elite(self, key: str) -> bytes:
        path = self.elite_path(key)
        if not path.exists():
            raise CorruptCheckpoint(f"Missing elite checkpoint {path}")
        return path.read_bytes()

    def prune_elites(self, keep_keys: Iterable[str]):
        keep = set(keep_keys)
        for path in self.elite_dir.glob("*.ckpt"):
            if path.stem not in keep:
                path.unlink()

def write_state(run_dir: Path, state: Dict[str, Any]):
    atomic_write_bytes(run_dir / STATE_FILE, json.dumps(state, sort_keys=True, indent=2).encode("utf-8"))

def read_state(run_dir: Path) -> Optional[Dict[str, Any]]:
    path = run_dir / STATE_FILE
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CorruptCheckpoint(f"Unreadable barrier state {path}: {e}") from e
