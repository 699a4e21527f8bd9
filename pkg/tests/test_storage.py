"""Tests for run log events and run directory persistence."""

import json
import math

import pytest

from tune_mbrl.errors import CorruptCheckpoint, EmptyLog
from tune_mbrl.storage import (
    RUNLOG_FILE,
    CheckpointStore,
    RunLog,
    RunLogWriter,
    append_timing,
    encode_event,
    make_event,
    read_state,
    write_state,
)

def test_event_fields_keep_fixed_order():
    event = make_event("trial", score=1.5, member=2, step=1, trial=0, failed=False, config={"h": 0.1}, **{"return": 1.5})
    assert list(event) == ["event", "step", "member", "trial", "config", "return", "score", "failed"]

def test_non_finite_values_become_null():
    event = make_event("trial", step=1, member=0, trial=0, score=-math.inf, failed=True, **{"return": math.nan})
    assert event["score"] is None
    assert event["return"] is None
    assert '"score":null' in encode_event(event)

def test_unknown_fields_are_rejected():
    with pytest.raises(ValueError):
        make_event("trial", wall_time=1.0)
    with pytest.raises(ValueError):
        make_event("heartbeat")

def test_writer_and_loader(tmp_path):
    path = tmp_path / RUNLOG_FILE
    with RunLogWriter(path) as writer:
        writer.write(make_event("header", scheduler="random", members=[0]))
        writer.write(make_event("trial", step=1, member=0, trial=0, score=2.0, failed=False, **{"return": 2.0}))
    log = RunLog.load(tmp_path)
    assert log.header["scheduler"] == "random"
    assert [t["score"] for t in log.trials()] == [2.0]
    assert log.summary() is None

def test_writer_truncates_to_offset(tmp_path):
    path = tmp_path / RUNLOG_FILE
    with RunLogWriter(path) as writer:
        writer.write(make_event("header", scheduler="pbt"))
        offset = writer.offset
        writer.write(make_event("failure", step=1, member=0, trial=0, error="boom"))
    with RunLogWriter(path, truncate_at=offset):
        pass
    assert len(RunLog.load(path)) == 1

def test_fresh_writer_replaces_old_log(tmp_path):
    path = tmp_path / RUNLOG_FILE
    path.write_text(encode_event(make_event("header", scheduler="pbt")) + "\n")
    with RunLogWriter(path):
        pass
    assert path.read_text() == ""

def test_missing_or_garbled_log(tmp_path):
    with pytest.raises(EmptyLog):
        RunLog.load(tmp_path)
    (tmp_path / RUNLOG_FILE).write_text("{not json\n")
    with pytest.raises(EmptyLog):
        RunLog.load(tmp_path)

def test_directive_batches_count_steps():
    log = RunLog([
        make_event("directive", step=1, member=0, action="continue"),
        make_event("directive", step=1, member=1, action="continue"),
        make_event("directive", step=2, member=0, action="stop"),
    ])
    assert log.directive_batches() == 2

def test_timings_sidecar(tmp_path):
    append_timing(tmp_path, 1, 0, 0, 0.1234567)
    append_timing(tmp_path, 1, 1, 0, 0.5)
    lines = (tmp_path / "timings.ndjson").read_text().splitlines()
    assert json.loads(lines[0])["wall_time"] == 0.123457
    assert len(lines) == 2

def test_checkpoint_store_prunes_old_steps(tmp_path):
    store = CheckpointStore(tmp_path)
    store.save_member(1, 0, b"one")
    store.save_member(2, 0, b"two")
    assert store.latest_step() == 2
    store.prune_steps(keep=2)
    assert store.load_member(2, 0) == b"two"
    with pytest.raises(CorruptCheckpoint):
        store.load_member(1, 0)

def test_elites_are_written_once_and_pruned(tmp_path):
    store = CheckpointStore(tmp_path)
    store.save_elite("s00001_m0000", b"first")
    store.save_elite("s00001_m0000", b"second")
    store.save_elite("s00002_m0003", b"other")
    assert store.load_elite("s00001_m0000") == b"first"
    store.prune_elites(["s00002_m0003"])
    with pytest.raises(CorruptCheckpoint):
        store.load_elite("s00001_m0000")
    assert store.load_elite("s00002_m0003") == b"other"

def test_state_file(tmp_path):
    assert read_state(tmp_path) is None
    state = {"step": 3, "finished": False, "members": [{"member": 0, "score": 1.0}]}
    write_state(tmp_path, state)
    assert read_state(tmp_path) == state
    (tmp_path / "state.json").write_text("{")
    with pytest.raises(CorruptCheckpoint):
        read_state(tmp_path)
