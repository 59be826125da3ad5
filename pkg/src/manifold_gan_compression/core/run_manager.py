"""
Manager for a run directory: its lock, stage registry and versioned stage outputs.
"""

from typing import Any, Dict, List, Optional
import json
import os
from pathlib import Path
import logging
from datetime import datetime

from ..config import RunConfig
from ..utils.exceptions import DataError, MissingArtifactError, RunLockedError

logger = logging.getLogger(__name__)

STAGES = (
    "gen-data",
    "pretrain",
    "train-encoder",
    "build-index",
    "prune",
    "finalize",
    "finetune",
    "eval",
    "ablate",
    "report",
)


class RunManager:
    """
    Tracks which stages of a run have produced artifacts.

    Stage outputs are append-only: the first execution of a stage writes
    ``<stage>/``, later ones ``<stage>.v2/``, ``<stage>.v3/``... and
    ``stages.json`` records every version. Downstream stages read the latest.
    """

    def __init__(self, run_dir: Path):
        """Initialize the manager; the directory is created on demand."""
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.state_file = self.run_dir / "stages.json"
        self.lock_file = self.run_dir / ".lock"
        self._lock_fd: Optional[int] = None

        self.stages = self._load_state()

    def __enter__(self) -> "RunManager":
        self.acquire()
        return self

    def __exit__(self, *exc: Any) -> None:
        self.release()

    def acquire(self) -> None:
        """Take the single-process lock on the run directory."""
        try:
            self._lock_fd = os.open(self.lock_file, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockedError(
                f"run directory {self.run_dir} is locked by another process",
                details={"lock": str(self.lock_file)}
            ) from None
        os.write(self._lock_fd, str(os.getpid()).encode())

    def release(self) -> None:
        if self._lock_fd is None:
            return
        os.close(self._lock_fd)
        self._lock_fd = None
        try:
            self.lock_file.unlink()
        except FileNotFoundError:
            logger.warning(f"Lock file {self.lock_file} vanished before release")

    def new_stage_dir(self, stage: str) -> Path:
        """Directory for a fresh execution of ``stage``."""
        version = len(self.stages.get(stage, [])) + 1
        name = stage if version == 1 else f"{stage}.v{version}"
        path = self.run_dir / name
        while path.exists():
            version += 1
            path = self.run_dir / f"{stage}.v{version}"
        path.mkdir(parents=True)
        return path

    def register(
        self,
        stage: str,
        path: Path,
        artifacts: Optional[Dict[str, str]] = None,
        metadata: Optional[Dict[str, Any]] = None
    ) -> None:
        """Record a completed stage execution."""
        self.stages.setdefault(stage, []).append({
            "path": Path(path).name,
            "artifacts": artifacts or {},
            "metadata": metadata or {},
            "completed_at": datetime.now().isoformat()
        })
        self._save_state()

    def latest(self, stage: str) -> Path:
        """Directory of the most recent execution of ``stage``."""
        versions = self.stages.get(stage)
        if not versions:
            raise MissingArtifactError(
                f"stage `{stage}` has not been run in {self.run_dir}; run `{stage}` first",
                prerequisite=stage,
                details={"run_dir": str(self.run_dir)}
            )
        return self.run_dir / versions[-1]["path"]

    def latest_record(self, stage: str) -> Dict[str, Any]:
        self.latest(stage)
        return self.stages[stage][-1]

    def versions(self, stage: str) -> List[Dict[str, Any]]:
        return list(self.stages.get(stage, []))

    def has(self, stage: str) -> bool:
        return bool(self.stages.get(stage))

    @staticmethod
    def snapshot_config(stage_dir: Path, cfg: RunConfig) -> Path:
        """Write the resolved configuration before a stage does any work."""
        path = Path(stage_dir) / "config.yaml"
        path.write_text(cfg.to_yaml())
        return path

    def _load_state(self) -> Dict[str, List[Dict[str, Any]]]:
        """Load the stage registry."""
        if not self.state_file.exists():
            return {}
        try:
            with open(self.state_file) as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"corrupt stage registry {self.state_file}: {e}",
                            details={"path": str(self.state_file)}) from e

    def _save_state(self) -> None:
        """Save the stage registry."""
        tmp = self.state_file.with_suffix(".json.tmp")
        with open(tmp, "w") as f:
            json.dump(self.stages, f, indent=2)
        tmp.replace(self.state_file)
