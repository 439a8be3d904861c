from pathlib import Path

import pytest

from rpbt.const import LOCK_FILE
from rpbt.output import RecordWriter, read_records
from rpbt.rundir import RunDirectoryError, open_run


def test_fresh_run_writes_and_releases_lock(tmp_path: Path) -> None:
    target = tmp_path / "run"
    with open_run(target) as run:
        assert (target / LOCK_FILE).exists()
        run.write_config({"risk": {"lambda": 0.95}})
        assert run.checkpoint("tau-0.5") == target / "checkpoints" / "tau-0.5.ckpt"
    assert not (target / LOCK_FILE).exists()
    assert run.read_config() == {"risk": {"lambda": 0.95}}


def test_existing_run_is_refused(tmp_path: Path) -> None:
    with open_run(tmp_path) as run:
        run.write_config({})
    with pytest.raises(RunDirectoryError):
        with open_run(tmp_path):
            pass


def test_locked_directory_is_refused(tmp_path: Path) -> None:
    with open_run(tmp_path):
        with pytest.raises(RunDirectoryError):
            with open_run(tmp_path, force=True):
                pass


def test_force_truncates_streams(tmp_path: Path) -> None:
    with open_run(tmp_path, streams=("metrics",)) as run:
        run.write_config({})
        with RecordWriter(run.stream("metrics")) as writer:
            writer.write({"step": 1})
    with open_run(tmp_path, force=True, streams=("metrics",)) as run:
        assert not run.stream("metrics").exists()


def test_resume_appends(tmp_path: Path) -> None:
    for step in (1, 2):
        with open_run(tmp_path, resume=True, streams=("metrics",)) as run:
            run.write_config({})
            with RecordWriter(run.stream("metrics")) as writer:
                writer.write({"step": step})
    assert [r["step"] for r in read_records(tmp_path / "metrics.jsonl")] == [1, 2]


def test_lock_released_on_error(tmp_path: Path) -> None:
    with pytest.raises(KeyError):
        with open_run(tmp_path):
            raise KeyError("x")
    assert not (tmp_path / LOCK_FILE).exists()
