"""Provenance record written next to every command's outputs."""

import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

from pydantic import BaseModel, Field

from workflow_predictor import __version__
from workflow_predictor.errors import DataIoError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MANIFEST_NAME = "manifest.json"


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as handle:
            for block in iter(lambda: handle.read(1 << 16), b""):
                digest.update(block)
    except OSError as e:
        raise DataIoError(f"cannot hash {path}: {e}") from e
    return digest.hexdigest()


class RunManifest(BaseModel):
    """What ran, with which settings, reading and writing which files."""

    command: str
    version: str = __version__
    config: Dict[str, Any] = Field(default_factory=dict)
    seeds: Dict[str, int] = Field(default_factory=dict)
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    timings: Dict[str, float] = Field(default_factory=dict)
    notes: Dict[str, Any] = Field(default_factory=dict)

    def add_inputs(self, paths: Iterable[PathLike]) -> None:
        for path in paths:
            self.inputs[str(path)] = file_sha256(path)

    def add_outputs(self, paths: Iterable[PathLike]) -> None:
        for path in paths:
            self.outputs[str(path)] = file_sha256(path)

    def write(self, out_dir: PathLike) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        try:
            path.write_text(json.dumps(self.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as e:
            raise DataIoError(f"cannot write manifest {path}: {e}") from e
        logger.info(f"Wrote manifest {path}")
        return path


class Stopwatch:
    """Collects wall-clock durations of named stages."""

    def __init__(self):
        self.timings: Dict[str, float] = {}
        self._started: Optional[float] = None
        self._stage: Optional[str] = None

    def start(self, stage: str) -> None:
        self.stop()
        self._stage, self._started = stage, time.time()

    def stop(self) -> None:
        if self._stage is not None and self._started is not None:
            self.timings[self._stage] = round(time.time() - self._started, 6)
        self._stage, self._started = None, None
