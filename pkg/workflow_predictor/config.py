"""Run configuration: defaults, JSON config files, environment and flag overrides."""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from workflow_predictor.dataset_pipeline import FILTER_PRESETS, DomainConfig
from workflow_predictor.errors import ConfigError, DataIoError
from workflow_predictor.metrics import MetricsConfig
from workflow_predictor.predictor import PredictorConfig
from workflow_predictor.text_encode import EmbeddingConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ENV_LOG_LEVEL = "WORKFLOW_PREDICTOR_LOG_LEVEL"
ENV_THREADS = "WORKFLOW_PREDICTOR_THREADS"

SEED_NAMES = ("generation", "tasks", "probe", "split", "init", "train", "search", "random_reward")


class SearchSettings(BaseModel):
    """Search parameters that do not depend on loaded data."""

    model_config = ConfigDict(frozen=True)

    reward: Literal["gnn", "ground_truth", "random"] = "gnn"
    budget: int = Field(default=50, ge=1)
    beam: int = Field(default=1, ge=1)
    train_tasks: int = Field(default=20, ge=1)
    test_tasks: Optional[int] = Field(default=None, ge=1)
    max_graph_nodes: int = Field(default=10, ge=1)
    executor_cost: float = Field(default=1.0, ge=0.0)
    predictor_cost: float = Field(default=0.01, ge=0.0)


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int = Field(default=0, ge=0, le=2 ** 64 - 1)
    threads: int = Field(default=1, ge=1)
    filter_preset: Optional[str] = None
    domain: DomainConfig = DomainConfig()
    embedding: EmbeddingConfig = EmbeddingConfig()
    predictor: PredictorConfig = PredictorConfig()
    search: SearchSettings = SearchSettings()
    metrics: MetricsConfig = MetricsConfig()

    @model_validator(mode="after")
    def _consistent(self) -> "RunConfig":
        if self.embedding.dim != self.predictor.input_dim:
            raise ValueError(
                f"embedding dim {self.embedding.dim} does not match predictor input_dim {self.predictor.input_dim}"
            )
        if self.filter_preset is not None and self.filter_preset not in FILTER_PRESETS:
            raise ValueError(f"unknown filter preset {self.filter_preset!r}; known: {sorted(FILTER_PRESETS)}")
        return self

    def resolved_domain(self) -> DomainConfig:
        """Domain settings with the named filter preset applied."""
        if self.filter_preset is None:
            return self.domain
        return self.domain.model_copy(update={"filter": FILTER_PRESETS[self.filter_preset]})


def derive_seed(root: int, name: str) -> int:
    """Independent 63-bit sub-seed for one named source of randomness."""
    digest = hashlib.sha256(f"{root}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def named_seeds(root: int) -> Dict[str, int]:
    return {name: derive_seed(root, name) for name in SEED_NAMES}


def _merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def env_overrides() -> Dict[str, Any]:
    raw = os.environ.get(ENV_THREADS)
    if not raw:
        return {}
    try:
        return {"threads": int(raw)}
    except ValueError:
        raise ConfigError(f"{ENV_THREADS}={raw!r} is not an integer") from None


def read_config_file(path: PathLike) -> Dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as handle:
            data = json.load(handle)
    except OSError as e:
        raise DataIoError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON (line {e.lineno}): {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def load_run_config(path: Optional[PathLike] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Build the effective configuration.

    Precedence, lowest first: model defaults, environment, the JSON config
    file, then ``overrides`` (nested dicts, usually from command-line flags).

    Raises:
        ConfigError: If the merged settings fail validation
        DataIoError: If the config file cannot be read
    """
    data = _merge(RunConfig().model_dump(), env_overrides())
    if path is not None:
        data = _merge(data, read_config_file(path))
    if overrides:
        data = _merge(data, overrides)
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigError(f"{where}: {first['msg']}") from e
    logger.debug(f"Effective config: {config.model_dump_json()}")
    return config
