"""Graph and task builders shared by the test modules."""

import random
from typing import Iterable, Sequence, Tuple

from workflow_predictor.graph_core import AgentNode, TaskInstance, WorkflowGraph
from workflow_predictor.sim_executor import SyntheticEvalSpec

PROMPTS = (
    "Planner: plan the approach",
    "Coder: code the function",
    "Tester: test the function",
    "Reviewer: review the draft",
    "Helper: restate the question",
)

# Node 1 fans out to 2, 3, 4 which join at 5; 5 -> 6 -> 7; 1 and 7 feed 8.
CODING_EDGES = ((1, 2), (1, 3), (1, 4), (2, 5), (3, 5), (4, 5), (5, 6), (6, 7), (1, 8), (7, 8))


def make_graph(prompts: Sequence[str], edges: Iterable[Tuple[int, int]] = (), graph_id: str = "g") -> WorkflowGraph:
    nodes = tuple(AgentNode(id=i, prompt=p) for i, p in enumerate(prompts, start=1))
    return WorkflowGraph(id=graph_id, nodes=nodes, edges=tuple(edges))


def chain(prompts: Sequence[str], graph_id: str = "chain") -> WorkflowGraph:
    return make_graph(prompts, [(i, i + 1) for i in range(1, len(prompts))], graph_id)


def random_dag(rng: random.Random, n: int, edge_prob: float = 0.4, prompts: Sequence[str] = PROMPTS,
               graph_id: str = "rand") -> WorkflowGraph:
    """Random DAG over ids 1..n with edges along a shuffled order."""
    order = list(range(1, n + 1))
    rng.shuffle(order)
    edges = [(order[a], order[b]) for a in range(n) for b in range(a + 1, n) if rng.random() < edge_prob]
    return make_graph([rng.choice(prompts) for _ in range(n)], edges, graph_id)


def make_task(seq: Sequence[str], task_id: str = "t", max_nodes: int = 10, noise: float = 0.0,
              text: str = "") -> TaskInstance:
    spec = SyntheticEvalSpec(seq=tuple(seq), max_nodes=max_nodes, noise=noise)
    return TaskInstance(id=task_id, text=text or " then ".join(seq), eval=spec.to_record())
