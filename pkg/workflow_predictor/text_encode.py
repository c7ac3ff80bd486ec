"""Fixed-width text features for prompts and task instructions.

Two encoders are available: a signed feature-hashing encoder that needs no
model at all, and a lookup into an embedding file exported offline.
"""

import logging
import re
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from workflow_predictor.errors import ConfigError, EmbeddingMiss, FormatError
from workflow_predictor.graph_core import WorkflowGraph
from workflow_predictor.workflow_dsl import iter_jsonl

logger = logging.getLogger(__name__)

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK_64 = 0xFFFFFFFFFFFFFFFF
TOP_BIT = 1 << 63

TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


class EmbeddingConfig(BaseModel):
    """Encoder settings; ``dim`` is the feature width of every node and task vector."""

    model_config = ConfigDict(frozen=True)

    dim: int = Field(default=384, ge=1)
    mode: Literal["hashing", "file"] = "hashing"
    seed: int = Field(default=0, ge=0, le=MASK_64)
    file_path: Optional[str] = None

    @model_validator(mode="after")
    def _file_mode_needs_path(self) -> "EmbeddingConfig":
        if self.mode == "file" and not self.file_path:
            raise ValueError("file mode requires file_path")
        return self


def fnv1a_64(data: bytes, seed: int = 0) -> int:
    """64-bit FNV-1a with the seed XOR-folded into the offset basis."""
    h = (FNV_OFFSET_BASIS ^ seed) & MASK_64
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK_64
    return h


def tokenize(text: str) -> List[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return [token for token in TOKEN_SPLIT.split(text.lower()) if token]


def hash_text(text: str, dim: int, seed: int) -> np.ndarray:
    vec = np.zeros(dim, dtype=np.float64)
    for token in tokenize(text):
        h = fnv1a_64(token.encode("utf-8"), seed)
        vec[h % dim] += -1.0 if h & TOP_BIT else 1.0
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


class EmbeddingTable:
    """Read-only text -> vector lookup loaded from a JSONL export."""

    def __init__(self, path: str, dim: int):
        self.path = path
        self.dim = dim
        self.vectors: Dict[str, np.ndarray] = {}
        for number, record in iter_jsonl(path):
            text, vec = record.get("text"), record.get("vec")
            if not isinstance(text, str) or not isinstance(vec, list):
                raise FormatError(number, "embedding record needs 'text' and 'vec'")
            if text in self.vectors:
                raise FormatError(number, f"duplicate embedding key {text[:60]!r}")
            if len(vec) != dim:
                raise ConfigError(f"embedding dimension {len(vec)} on line {number} does not match dim={dim}")
            array = np.asarray(vec, dtype=np.float64)
            if not np.all(np.isfinite(array)):
                raise FormatError(number, "embedding vector has non-finite entries")
            array.setflags(write=False)
            self.vectors[text] = array
        logger.info(f"Loaded {len(self.vectors)} embeddings from {path}")

    def lookup(self, text: str) -> np.ndarray:
        try:
            return self.vectors[text]
        except KeyError:
            raise EmbeddingMiss(text) from None


class TextEncoder:
    """Encoder bound to one configuration, with a per-text cache."""

    def __init__(self, cfg: EmbeddingConfig):
        self.cfg = cfg
        self.table = EmbeddingTable(str(Path(cfg.file_path)), cfg.dim) if cfg.mode == "file" else None
        self._cache: Dict[str, np.ndarray] = {}

    def encode(self, text: str) -> np.ndarray:
        cached = self._cache.get(text)
        if cached is not None:
            return cached
        if self.table is not None:
            vec = self.table.lookup(text)
        else:
            vec = hash_text(text, self.cfg.dim, self.cfg.seed)
            vec.setflags(write=False)
        self._cache[text] = vec
        return vec

    def encode_nodes(self, graph: WorkflowGraph) -> np.ndarray:
        """Stack node prompt encodings in node order (N x dim)."""
        if not graph.nodes:
            return np.zeros((0, self.cfg.dim))
        return np.vstack([self.encode(node.prompt) for node in graph.nodes])


@lru_cache(maxsize=16)
def get_encoder(cfg: EmbeddingConfig) -> TextEncoder:
    return TextEncoder(cfg)


def encode_text(cfg: EmbeddingConfig, text: str) -> np.ndarray:
    """Encode one string to a ``cfg.dim`` vector.

    Raises:
        EmbeddingMiss: In file mode when the text has no stored vector
    """
    return get_encoder(cfg).encode(text)


def encode_nodes(cfg: EmbeddingConfig, graph: WorkflowGraph) -> np.ndarray:
    """Build the node feature matrix: row ``i`` encodes the prompt of node ``i``."""
    return get_encoder(cfg).encode_nodes(graph)
