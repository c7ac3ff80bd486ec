"""Deterministic stand-in for running a workflow on a task and grading the result.

Each agent contributes the skill keywords its prompt mentions. A run succeeds
when some directed path visits agents whose skills cover the task's required
skills in order (each agent covering at most one requirement) and the workflow
stays within the task's node budget. Optional label noise flips the outcome
for a fixed, hash-selected subset of (workflow, task) pairs.
"""

import hashlib
import logging
from typing import Dict, FrozenSet, Iterable, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from workflow_predictor.errors import DataValidationError, EmptyTaskSet
from workflow_predictor.graph_core import TaskInstance, WorkflowGraph, topo_order
from workflow_predictor.text_encode import tokenize

logger = logging.getLogger(__name__)

SKILL_VOCABULARY: Tuple[str, ...] = ("plan", "code", "review", "test", "fix", "solve", "verify", "aggregate")


class AgentSkill(BaseModel):
    model_config = ConfigDict(frozen=True)

    tags: FrozenSet[str]


class SyntheticEvalSpec(BaseModel):
    """Grading rule carried in a task's ``eval`` descriptor."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    required_sequence: Tuple[str, ...] = Field(alias="seq")
    max_nodes: int = Field(default=10, ge=1)
    noise_rate: float = Field(default=0.0, ge=0.0, le=1.0, alias="noise")
    noise_seed: int = 0

    @field_validator("required_sequence")
    @classmethod
    def _known_skills(cls, value: Tuple[str, ...]) -> Tuple[str, ...]:
        if not value:
            raise ValueError("required_sequence must be non-empty")
        unknown = [tag for tag in value if tag not in SKILL_VOCABULARY]
        if unknown:
            raise ValueError(f"unknown skill tags {unknown}")
        return value

    def to_record(self) -> Dict[str, object]:
        return {
            "seq": list(self.required_sequence),
            "max_nodes": self.max_nodes,
            "noise": self.noise_rate,
            "noise_seed": self.noise_seed,
        }


def agent_skill(prompt: str, vocabulary: Iterable[str] = SKILL_VOCABULARY) -> AgentSkill:
    """Skill tags of a prompt: its lowercased tokens that are vocabulary words."""
    return AgentSkill(tags=frozenset(tokenize(prompt)).intersection(vocabulary))


def eval_spec_of(task: TaskInstance) -> SyntheticEvalSpec:
    """Parse the grading rule of ``task``.

    Raises:
        DataValidationError: If the task has no usable synthetic eval descriptor
    """
    try:
        return SyntheticEvalSpec.model_validate(task.eval_spec)
    except ValidationError as e:
        raise DataValidationError(f"task {task.id!r} has an invalid eval descriptor: {e.errors()[0]['msg']}") from e


def noise_draw(graph_id: str, task_id: str, noise_seed: int) -> float:
    """Uniform number in [0, 1) fixed by the (graph, task, seed) triple."""
    digest = hashlib.blake2b(f"{graph_id}\x1f{task_id}\x1f{noise_seed}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2.0 ** 64


def covers_sequence(graph: WorkflowGraph, required: Sequence[str]) -> bool:
    """True when a directed path matches ``required`` as an in-order subsequence.

    Dynamic programme over the topological order: ``progress[v]`` is the most
    requirements any path ending at ``v`` can match greedily.
    """
    preds: Dict[int, list] = {node_id: [] for node_id in graph.node_ids}
    for src, dst in graph.edges:
        preds[dst].append(src)
    progress: Dict[int, int] = {}
    target = len(required)
    for node_id in topo_order(graph):
        start = max((progress[p] for p in preds[node_id]), default=0)
        if start < target and required[start] in agent_skill(graph.prompt_of(node_id)).tags:
            start += 1
        if start >= target:
            return True
        progress[node_id] = start
    return False


def execute_workflow(graph: WorkflowGraph, task: TaskInstance, spec: Optional[SyntheticEvalSpec] = None) -> int:
    """Run ``graph`` on ``task`` and grade it.

    Args:
        graph: Workflow to run
        task: Task to solve
        spec: Grading rule; parsed from ``task.eval_spec`` when omitted

    Returns:
        1 on success, 0 on failure

    Raises:
        CyclicGraph: If the workflow is not a DAG
    """
    if spec is None:
        spec = eval_spec_of(task)
    success = covers_sequence(graph, spec.required_sequence) and graph.num_nodes <= spec.max_nodes
    if spec.noise_rate > 0 and noise_draw(graph.id, task.id, spec.noise_seed) < spec.noise_rate:
        success = not success
    return int(success)


def success_rate(graph: WorkflowGraph, tasks: Sequence[TaskInstance]) -> float:
    """Fraction of ``tasks`` the workflow solves.

    Raises:
        EmptyTaskSet: If ``tasks`` is empty
    """
    if not tasks:
        raise EmptyTaskSet("success rate over zero tasks")
    return sum(execute_workflow(graph, task) for task in tasks) / len(tasks)
