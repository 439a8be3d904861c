"""Run directories: one per experiment, owned by one process at a time through a lock file."""
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, Mapping, Sequence, Union

from rpbt.const import CHECKPOINT_SUFFIX, LOCK_FILE
from rpbt.model import RpbtError
from rpbt.output import write_json

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
SEEDS_FILE = "seeds.json"


class RunDirectoryError(RpbtError):
    """The run directory is already in use or holds a previous run."""


@dataclass(frozen=True)
class RunDirectory:
    path: Path

    @property
    def checkpoints(self) -> Path:
        return self.path / "checkpoints"

    @property
    def pool(self) -> Path:
        return self.path / "pool"

    def stream(self, name: str) -> Path:
        return self.path / f"{name}.jsonl"

    def checkpoint(self, name: str) -> Path:
        return self.checkpoints / f"{name}{CHECKPOINT_SUFFIX}"

    def write_config(self, config: Mapping[str, Any]) -> Path:
        return write_json(config, self.path / CONFIG_FILE)

    def write_seeds(self, seeds: Mapping[str, Any]) -> Path:
        return write_json(seeds, self.path / SEEDS_FILE)

    def read_config(self) -> Dict[str, Any]:
        return json.loads((self.path / CONFIG_FILE).read_text(encoding="utf-8"))


def _acquire(lock: Path) -> None:
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunDirectoryError(
            f"{lock.parent} is locked by another run (remove {lock.name} if that run is gone)"
        ) from None
    with os.fdopen(fd, "w") as f:
        f.write(f"{os.getpid()}\n")


@contextmanager
def open_run(
    path: Union[str, Path], *, force: bool = False, resume: bool = False, streams: Sequence[str] = ()
) -> Iterator[RunDirectory]:
    """Claim `path` for one run.

    A directory that already holds a run is refused unless `force` (start over: the listed
    metric streams are truncated) or `resume` (continue from its checkpoints, appending).
    """
    run = RunDirectory(Path(path))
    existing = (run.path / CONFIG_FILE).exists()
    if existing and not (force or resume):
        raise RunDirectoryError(f"{run.path} already contains a run; pass --force to overwrite or --resume")
    run.path.mkdir(parents=True, exist_ok=True)
    lock = run.path / LOCK_FILE
    _acquire(lock)
    try:
        if existing and force and not resume:
            logger.info("overwriting the run in %s", run.path)
            for name in streams:
                run.stream(name).unlink(missing_ok=True)
        yield run
    finally:
        lock.unlink(missing_ok=True)
