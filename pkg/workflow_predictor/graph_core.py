"""Workflow DAG data model, validation and topological utilities."""

import logging
from collections import Counter
from typing import Any, Dict, FrozenSet, List, Literal, Mapping, Optional, Tuple

import networkx as nx
from pydantic import BaseModel, ConfigDict, Field, field_validator

from workflow_predictor.errors import CyclicGraph, DataValidationError, UnknownNode

logger = logging.getLogger(__name__)

Edge = Tuple[int, int]
TaskDomain = Literal["coding", "math", "reason", "synthetic"]


class AgentNode(BaseModel):
    """One agent of a workflow: a node id and its system prompt."""

    model_config = ConfigDict(frozen=True)

    id: int
    prompt: str


class WorkflowGraph(BaseModel):
    """An attributed workflow graph.

    Nodes keep their insertion order, which is also the row order of every
    feature matrix derived from the graph. Construction does not enforce the
    DAG invariants; use ``validate`` to check them.
    """

    model_config = ConfigDict(frozen=True)

    id: str = ""
    nodes: Tuple[AgentNode, ...]
    edges: Tuple[Edge, ...] = ()

    @property
    def node_ids(self) -> List[int]:
        return [node.id for node in self.nodes]

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def prompt_of(self, node_id: int) -> str:
        for node in self.nodes:
            if node.id == node_id:
                return node.prompt
        raise UnknownNode(node_id)

    def index_of(self) -> Dict[int, int]:
        """Map node id to its row position."""
        return {node.id: i for i, node in enumerate(self.nodes)}


class TaskInstance(BaseModel):
    """A task instruction with its domain tag and evaluation descriptor."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    id: str
    text: str
    domain: TaskDomain = "synthetic"
    eval_spec: Dict[str, Any] = Field(default_factory=dict, alias="eval")

    @field_validator("text")
    @classmethod
    def _text_not_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("task text must be non-empty")
        return value


class ValidationReport(BaseModel):
    """Outcome of ``validate``: zero violations means every invariant holds."""

    graph_id: str = ""
    violations: List[str] = Field(default_factory=list)
    cycle: Optional[List[int]] = None

    @property
    def ok(self) -> bool:
        return not self.violations


def to_digraph(graph: WorkflowGraph) -> nx.DiGraph:
    """Build a networkx view of the graph (nodes in graph order)."""
    digraph = nx.DiGraph()
    digraph.add_nodes_from(graph.node_ids)
    digraph.add_edges_from(graph.edges)
    return digraph


def _canonical_cycle(cycle: List[int]) -> List[int]:
    start = cycle.index(min(cycle))
    return cycle[start:] + cycle[:start]


def validate(graph: WorkflowGraph) -> ValidationReport:
    """Check every WorkflowGraph invariant.

    Args:
        graph: The graph to check

    Returns:
        A report listing one message per violation. When the graph has a
        directed cycle, ``cycle`` names one of them.
    """
    violations: List[str] = []
    ids = graph.node_ids
    known = set(ids)

    if not ids:
        violations.append("graph has no nodes")
    for node_id, count in sorted(Counter(ids).items()):
        if count > 1:
            violations.append(f"duplicate node id {node_id}")
    for node in graph.nodes:
        if not node.prompt.strip():
            violations.append(f"node {node.id} has an empty prompt")

    seen = set()
    for src, dst in graph.edges:
        if src == dst:
            violations.append(f"self-loop on node {src}")
        if (src, dst) in seen:
            violations.append(f"duplicate edge ({src}, {dst})")
        seen.add((src, dst))
        for endpoint in (src, dst):
            if endpoint not in known:
                violations.append(f"edge ({src}, {dst}) references unknown node {endpoint}")

    cycle = None
    digraph = nx.DiGraph()
    digraph.add_nodes_from(ids)
    digraph.add_edges_from((s, d) for s, d in graph.edges if s != d and s in known and d in known)
    try:
        cycle_edges = nx.find_cycle(digraph)
    except nx.NetworkXNoCycle:
        cycle_edges = None
    if cycle_edges:
        cycle = _canonical_cycle([edge[0] for edge in cycle_edges])
        violations.append(f"directed cycle {cycle}")

    return ValidationReport(graph_id=graph.id, violations=violations, cycle=cycle)


def ensure_valid(graph: WorkflowGraph) -> None:
    """Raise if the graph violates any invariant."""
    report = validate(graph)
    if report.cycle is not None:
        raise CyclicGraph(report.cycle, graph.id)
    if not report.ok:
        raise DataValidationError(f"graph {graph.id!r}: {'; '.join(report.violations)}")


def topo_order(graph: WorkflowGraph) -> List[int]:
    """Return node ids so every edge points forward; ties go to the smaller id.

    Raises:
        CyclicGraph: If the graph contains a directed cycle
    """
    ensure_valid(graph)
    return list(nx.lexicographical_topological_sort(to_digraph(graph)))


def in_neighbors(graph: WorkflowGraph, node_id: int) -> FrozenSet[int]:
    """Return the predecessors of ``node_id``.

    Raises:
        UnknownNode: If ``node_id`` is not in the graph
    """
    if node_id not in set(graph.node_ids):
        raise UnknownNode(node_id)
    return frozenset(src for src, dst in graph.edges if dst == node_id)


def out_neighbors(graph: WorkflowGraph, node_id: int) -> FrozenSet[int]:
    if node_id not in set(graph.node_ids):
        raise UnknownNode(node_id)
    return frozenset(dst for src, dst in graph.edges if src == node_id)


def relabel(graph: WorkflowGraph, mapping: Mapping[int, int], graph_id: Optional[str] = None) -> WorkflowGraph:
    """Rename node ids through ``mapping``, keeping node and edge order."""
    return WorkflowGraph(
        id=graph.id if graph_id is None else graph_id,
        nodes=tuple(AgentNode(id=mapping[n.id], prompt=n.prompt) for n in graph.nodes),
        edges=tuple((mapping[s], mapping[d]) for s, d in graph.edges),
    )
