"""Labeled dataset construction: generation, task filtering, labeling and splits."""

import logging
import math
import random
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Set, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from workflow_predictor.errors import EmptyProbeSet, FormatError, TooFewSamples, UnresolvedId
from workflow_predictor.graph_core import AgentNode, TaskInstance, WorkflowGraph
from workflow_predictor.sim_executor import SyntheticEvalSpec, execute_workflow, success_rate
from workflow_predictor.workflow_dsl import (
    dump_graphs,
    dump_tasks,
    iter_jsonl,
    load_graphs,
    load_tasks,
    write_jsonl,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MAX_GENERATED_NODES = 12

DEFAULT_PROMPTS: Tuple[str, ...] = (
    "Project Manager: plan the overall approach before any work starts",
    "Algorithm Designer: solve the core problem step by step",
    "Programming Expert: code a complete implementation of the required function",
    "Test Analyst: test the current implementation against edge cases",
    "Bug Fixer: fix every defect reported by earlier agents",
    "Senior Reviewer: review the draft carefully and point out weaknesses",
    "Final Checker: verify the final answer for correctness",
    "Aggregator: aggregate the candidate answers into one response",
    "Assistant: restate the question in simple words",
    "Note Taker: write brief notes about the question",
)

# Required skills are always drawn in this pipeline order, so the set of
# skills named in a task's text determines its required sequence.
SKILL_PIPELINE: Tuple[str, ...] = ("plan", "solve", "code", "test", "fix", "review", "verify", "aggregate")

FILLER_WORDS: Tuple[str, ...] = (
    "inventory", "schedule", "matrix", "parser", "budget", "weather", "library", "invoice",
    "playlist", "recipe", "calendar", "tournament", "warehouse", "journey", "ledger", "sensor",
)


class LabeledSample(BaseModel):
    """One (workflow, task, label) triple."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    workflow_id: str = Field(alias="workflow")
    task_id: str = Field(alias="task")
    label: Literal[0, 1]

    def to_record(self) -> Dict[str, object]:
        return {"workflow": self.workflow_id, "task": self.task_id, "label": self.label}


class SplitSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0

    @field_validator("ratios")
    @classmethod
    def _ratios_valid(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(r <= 0 for r in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError("ratios must be positive and sum to 1")
        return value


class FilterSpec(BaseModel):
    """Inclusive success-rate band a task must fall in to be kept."""

    model_config = ConfigDict(frozen=True)

    low: float = Field(default=0.1, ge=0.0, le=1.0)
    high: float = Field(default=0.9, ge=0.0, le=1.0)
    probe_size: int = Field(default=26, ge=1)

    @model_validator(mode="after")
    def _ordered(self) -> "FilterSpec":
        if not self.low < self.high:
            raise ValueError("filter bounds need low < high")
        return self


FILTER_PRESETS: Dict[str, FilterSpec] = {
    "humaneval": FilterSpec(low=0.1, high=0.9, probe_size=26),
    "mbpp": FilterSpec(low=0.2, high=0.8, probe_size=30),
    "math": FilterSpec(low=0.2, high=0.8, probe_size=150),
    "gsm8k": FilterSpec(low=0.3, high=0.9, probe_size=42),
    "mmlu": FilterSpec(low=0.25, high=0.75, probe_size=20),
}


class DomainConfig(BaseModel):
    """Shape of a synthetic benchmark domain."""

    model_config = ConfigDict(frozen=True)

    name: str = "synthetic"
    n_workflows: int = Field(default=200, ge=1)
    node_range: Tuple[int, int] = (3, 9)
    edge_prob: float = Field(default=0.4, ge=0.0, le=1.0)
    n_candidate_tasks: int = Field(default=200, ge=1)
    n_tasks: int = Field(default=50, ge=1)
    seq_len: Tuple[int, int] = (1, 3)
    max_nodes: int = Field(default=10, ge=1)
    noise: float = Field(default=0.0, ge=0.0, le=1.0)
    filter: FilterSpec = FilterSpec()
    split: SplitSpec = SplitSpec()

    @field_validator("node_range")
    @classmethod
    def _node_range(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        low, high = value
        if not 1 <= low <= high <= MAX_GENERATED_NODES:
            raise ValueError(f"node_range must lie within [1, {MAX_GENERATED_NODES}]")
        return value

    @field_validator("seq_len")
    @classmethod
    def _seq_len(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if not 1 <= value[0] <= value[1] <= len(SKILL_PIPELINE):
            raise ValueError("seq_len must lie within [1, number of skills]")
        return value


class FilterResult(BaseModel):
    retained: List[TaskInstance]
    rates: Dict[str, float]


class BuiltDataset(BaseModel):
    """Everything a dataset directory holds."""

    domain: str
    graphs: List[WorkflowGraph]
    tasks: List[TaskInstance]
    samples: List[LabeledSample]
    train: List[LabeledSample]
    val: List[LabeledSample]
    test: List[LabeledSample]
    filter_rates: Dict[str, float] = Field(default_factory=dict)
    info: Dict[str, object] = Field(default_factory=dict)


def generate_workflows(n: int, node_range: Tuple[int, int], vocabulary: Sequence[str], seed: int,
                       edge_prob: float = 0.4, id_prefix: str = "wf") -> List[WorkflowGraph]:
    """Sample random workflow DAGs.

    Node ids run 1..N. A random permutation fixes a hidden order and each
    forward pair in that order becomes an edge with probability ``edge_prob``,
    so every graph is acyclic.
    """
    low, high = node_range
    if not 1 <= low <= high <= MAX_GENERATED_NODES:
        raise ValueError(f"node_range {node_range} outside [1, {MAX_GENERATED_NODES}]")
    rng = random.Random(seed)
    width = len(str(n))
    graphs = []
    for index in range(n):
        size = rng.randint(low, high)
        nodes = tuple(AgentNode(id=i, prompt=rng.choice(vocabulary)) for i in range(1, size + 1))
        order = list(range(1, size + 1))
        rng.shuffle(order)
        edges = []
        for a in range(size):
            for b in range(a + 1, size):
                if rng.random() < edge_prob:
                    edges.append((order[a], order[b]))
        edges.sort()
        graphs.append(WorkflowGraph(id=f"{id_prefix}-{index:0{width}d}", nodes=nodes, edges=tuple(edges)))
    logger.info(f"Generated {n} workflows with {low}-{high} nodes")
    return graphs


def task_text(required: Sequence[str], max_nodes: int, rng: random.Random) -> str:
    steps = ", then ".join(required)
    topic = " ".join(rng.sample(FILLER_WORDS, 2))
    return f"{steps.capitalize()} for the {topic} request using at most {max_nodes} agents."


def generate_tasks(n: int, seed: int, seq_len: Tuple[int, int] = (1, 3), max_nodes: int = 10,
                   noise: float = 0.0, noise_seed: int = 0, domain: str = "synthetic",
                   id_prefix: str = "task") -> List[TaskInstance]:
    """Sample tasks whose instruction names the required skills in pipeline order."""
    rng = random.Random(seed)
    width = len(str(n))
    tasks = []
    for index in range(n):
        length = rng.randint(*seq_len)
        picked = set(rng.sample(SKILL_PIPELINE, length))
        required = [skill for skill in SKILL_PIPELINE if skill in picked]
        spec = SyntheticEvalSpec(seq=tuple(required), max_nodes=max_nodes, noise=noise, noise_seed=noise_seed)
        tasks.append(TaskInstance(
            id=f"{id_prefix}-{index:0{width}d}",
            text=task_text(required, max_nodes, rng),
            domain=domain,
            eval=spec.to_record(),
        ))
    return tasks


def select_probes(graphs: Sequence[WorkflowGraph], size: int, seed: int) -> List[WorkflowGraph]:
    if size >= len(graphs):
        return list(graphs)
    return random.Random(seed).sample(list(graphs), size)


def filter_tasks(tasks: Sequence[TaskInstance], probes: Sequence[WorkflowGraph], spec: FilterSpec) -> FilterResult:
    """Keep tasks whose success rate over the probe workflows lies in ``[low, high]``.

    Raises:
        EmptyProbeSet: If ``probes`` is empty
    """
    if not probes:
        raise EmptyProbeSet("task filtering needs at least one probe workflow")
    rates: Dict[str, float] = {}
    retained = []
    for task in tasks:
        solved = sum(execute_workflow(graph, task) for graph in probes)
        rate = solved / len(probes)
        rates[task.id] = rate
        if spec.low <= rate <= spec.high:
            retained.append(task)
    logger.info(f"Retained {len(retained)}/{len(tasks)} tasks in [{spec.low}, {spec.high}]")
    return FilterResult(retained=retained, rates=rates)


def label_dataset(graphs: Sequence[WorkflowGraph], tasks: Sequence[TaskInstance], threads: int = 1) -> List[LabeledSample]:
    """Label every (graph, task) pair, graph-major."""

    def label_graph(graph: WorkflowGraph) -> List[LabeledSample]:
        return [
            LabeledSample(workflow=graph.id, task=task.id, label=execute_workflow(graph, task))
            for task in tasks
        ]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_graph = list(pool.map(label_graph, graphs))
    else:
        per_graph = [label_graph(graph) for graph in graphs]
    samples = [sample for chunk in per_graph for sample in chunk]
    positives = sum(s.label for s in samples)
    logger.info(f"Labeled {len(samples)} pairs, {positives} successes")
    return samples


def _floored_share(n: int, ratio: float) -> int:
    # str() keeps 0.29 as 29/100 rather than its binary approximation
    return math.floor(n * Fraction(str(ratio)))


def split(samples: Sequence[LabeledSample], spec: SplitSpec) -> Tuple[List[LabeledSample], List[LabeledSample], List[LabeledSample]]:
    """Shuffle with the split seed and cut into train/val/test.

    Validation and test sizes are floored; the remainder goes to train.

    Raises:
        TooFewSamples: With fewer than 10 samples
    """
    if len(samples) < 10:
        raise TooFewSamples(f"need at least 10 samples to split, got {len(samples)}")
    shuffled = list(samples)
    random.Random(spec.split_seed).shuffle(shuffled)
    n = len(shuffled)
    n_val = _floored_share(n, spec.ratios[1])
    n_test = _floored_share(n, spec.ratios[2])
    n_train = n - n_val - n_test
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


def load_labels(path: PathLike, workflow_ids: Optional[Iterable[str]] = None,
                task_ids: Optional[Iterable[str]] = None) -> List[LabeledSample]:
    """Load a label JSONL file, optionally resolving ids against loaded graphs and tasks.

    Raises:
        DataIoError: If the file cannot be read
        FormatError: On a malformed record or a label other than 0/1
        UnresolvedId: If any id is unknown; every offending line is reported
    """
    known_workflows: Optional[Set[str]] = set(workflow_ids) if workflow_ids is not None else None
    known_tasks: Optional[Set[str]] = set(task_ids) if task_ids is not None else None
    samples = []
    unresolved, bad_lines = [], []
    for number, record in iter_jsonl(path):
        label = record.get("label")
        if isinstance(label, bool) or label not in (0, 1):
            raise FormatError(number, f"label must be 0 or 1, got {label!r}")
        try:
            sample = LabeledSample.model_validate(record)
        except ValidationError as e:
            raise FormatError(number, f"malformed label record: {e.errors()[0]['msg']}") from e
        if known_workflows is not None and sample.workflow_id not in known_workflows:
            unresolved.append(sample.workflow_id)
            bad_lines.append(number)
        if known_tasks is not None and sample.task_id not in known_tasks:
            unresolved.append(sample.task_id)
            bad_lines.append(number)
        samples.append(sample)
    if unresolved:
        raise UnresolvedId(unresolved, bad_lines)
    return samples


def reduce_majority(samples: Sequence[LabeledSample]) -> List[LabeledSample]:
    """Collapse repeated runs of a pair to their majority label; ties count as failure."""
    votes: Dict[Tuple[str, str], List[int]] = {}
    for sample in samples:
        votes.setdefault((sample.workflow_id, sample.task_id), []).append(sample.label)
    return [
        LabeledSample(workflow=wid, task=tid, label=int(sum(runs) * 2 > len(runs)))
        for (wid, tid), runs in votes.items()
    ]


def dump_labels(path: PathLike, samples: Sequence[LabeledSample]) -> None:
    write_jsonl(path, [s.to_record() for s in samples])


def build_dataset(domain: DomainConfig, generation_seed: int, task_seed: int, probe_seed: int,
                  threads: int = 1) -> BuiltDataset:
    """Run generation, filtering, labeling and splitting for one synthetic domain."""
    graphs = generate_workflows(domain.n_workflows, domain.node_range, DEFAULT_PROMPTS, generation_seed,
                                edge_prob=domain.edge_prob)
    candidates = generate_tasks(domain.n_candidate_tasks, task_seed, seq_len=domain.seq_len,
                                max_nodes=domain.max_nodes, noise=domain.noise, noise_seed=task_seed)
    probes = select_probes(graphs, domain.filter.probe_size, probe_seed)
    filtered = filter_tasks(candidates, probes, domain.filter)
    tasks = filtered.retained[:domain.n_tasks]
    if len(tasks) < domain.n_tasks:
        logger.warning(f"Only {len(tasks)} tasks survived filtering, {domain.n_tasks} requested")
    samples = label_dataset(graphs, tasks, threads=threads)
    train_set, val_set, test_set = split(samples, domain.split)
    info = {
        "candidate_tasks": len(candidates),
        "retained_tasks": len(filtered.retained),
        "tasks": len(tasks),
        "workflows": len(graphs),
        "samples": len(samples),
        "expected_pairs": len(graphs) * len(tasks),
        "mean_nodes": sum(g.num_nodes for g in graphs) / len(graphs),
        "positive_rate": sum(s.label for s in samples) / max(len(samples), 1),
        "split": [len(train_set), len(val_set), len(test_set)],
    }
    return BuiltDataset(
        domain=domain.name, graphs=graphs, tasks=tasks, samples=samples,
        train=train_set, val=val_set, test=test_set, filter_rates=filtered.rates, info=info,
    )


DATASET_FILES = {
    "graphs": "graphs.jsonl",
    "tasks": "tasks.jsonl",
    "labels": "labels.jsonl",
    "train": "train.jsonl",
    "val": "val.jsonl",
    "test": "test.jsonl",
    "filter": "filter.jsonl",
}


def write_dataset(out_dir: PathLike, dataset: BuiltDataset) -> Dict[str, Path]:
    """Write the dataset files and return their paths by role."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {role: out / name for role, name in DATASET_FILES.items()}
    dump_graphs(paths["graphs"], dataset.graphs)
    dump_tasks(paths["tasks"], dataset.tasks)
    dump_labels(paths["labels"], dataset.samples)
    dump_labels(paths["train"], dataset.train)
    dump_labels(paths["val"], dataset.val)
    dump_labels(paths["test"], dataset.test)
    kept = {t.id for t in dataset.tasks}
    write_jsonl(paths["filter"], [
        {"task": tid, "rate": rate, "retained": tid in kept} for tid, rate in sorted(dataset.filter_rates.items())
    ])
    return paths


def read_dataset(data_dir: PathLike, domain: Optional[str] = None) -> BuiltDataset:
    """Load a dataset directory written by ``write_dataset``.

    Raises:
        DataIoError: If a required file is missing
    """
    root = Path(data_dir)
    graphs = load_graphs(root / DATASET_FILES["graphs"])
    tasks = load_tasks(root / DATASET_FILES["tasks"])
    workflow_ids = [g.id for g in graphs]
    task_ids = [t.id for t in tasks]

    def labels(role: str) -> List[LabeledSample]:
        return load_labels(root / DATASET_FILES[role], workflow_ids, task_ids)

    samples = labels("labels")
    expected = len(graphs) * len(tasks)
    if len(samples) != expected:
        logger.warning(f"{root}: {len(samples)} samples, Cartesian product would give {expected}")
    return BuiltDataset(
        domain=domain or root.name, graphs=graphs, tasks=tasks, samples=samples,
        train=labels("train"), val=labels("val"), test=labels("test"),
        info={"samples": len(samples), "expected_pairs": expected},
    )
