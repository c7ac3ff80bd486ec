"""Workflow search driven by a pluggable reward source.

A greedy (beam width 1) or beam hill climber mutates workflow DAGs and scores
each candidate on the training tasks with either the trained predictor, the
executor, or seeded random numbers. The best workflow found is always scored
with the executor on held-out test tasks, outside the call ledger.
"""

import logging
import random
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from workflow_predictor.dataset_pipeline import DEFAULT_PROMPTS
from workflow_predictor.errors import ConfigError, NoApplicableMove
from workflow_predictor.graph_core import AgentNode, TaskInstance, WorkflowGraph, ensure_valid, to_digraph
from workflow_predictor.predictor import predict_graph_on_tasks
from workflow_predictor.sim_executor import success_rate
from workflow_predictor.text_encode import EmbeddingConfig

logger = logging.getLogger(__name__)

RewardKind = Literal["gnn", "ground_truth", "random"]
MoveName = Literal["add_node", "delete_node", "add_edge", "remove_edge", "replace_prompt"]
ALL_MOVES: Tuple[str, ...] = ("add_node", "delete_node", "add_edge", "remove_edge", "replace_prompt")
MUTATIONS_PER_BEAM = 4


class RewardSource(BaseModel):
    """Which scorer ranks candidates during search."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    kind: RewardKind
    model: Optional[Any] = None
    embedding: Optional[EmbeddingConfig] = None
    seed: int = 0

    @model_validator(mode="after")
    def _model_for_gnn(self) -> "RewardSource":
        if self.kind == "gnn" and (self.model is None or self.embedding is None):
            raise ValueError("the gnn reward needs a trained model and its embedding config")
        return self


class SearchConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    budget: int = Field(default=50, ge=1)
    beam: int = Field(default=1, ge=1)
    mutation_seed: int = 0
    train_tasks: Tuple[TaskInstance, ...] = ()
    test_tasks: Tuple[TaskInstance, ...] = ()
    max_graph_nodes: int = Field(default=10, ge=1)
    executor_cost: float = Field(default=1.0, ge=0.0)
    predictor_cost: float = Field(default=0.01, ge=0.0)
    threads: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _disjoint_tasks(self) -> "SearchConfig":
        overlap = {t.id for t in self.train_tasks} & {t.id for t in self.test_tasks}
        if overlap:
            raise ValueError(f"train and test task sets overlap: {sorted(overlap)[:5]}")
        return self


class CallLedger(BaseModel):
    executor_calls: int = 0
    predictor_calls: int = 0

    def cost(self, config: SearchConfig) -> float:
        return self.executor_calls * config.executor_cost + self.predictor_calls * config.predictor_cost


class TraceStep(BaseModel):
    step: int
    evaluations: int
    best_reward: float
    cumulative_cost: float
    test_score: float


class SearchReport(BaseModel):
    reward: RewardKind
    best_workflow: WorkflowGraph
    best_reward: float
    score: float
    executor_calls: int
    predictor_calls: int
    evaluations: int
    seconds: float
    trace: List[TraceStep]


def _deletable(graph: WorkflowGraph) -> List[int]:
    if graph.num_nodes < 2:
        return []
    digraph = to_digraph(graph)
    components = nx.number_weakly_connected_components(digraph)
    deletable = []
    for node_id in sorted(graph.node_ids):
        reduced = digraph.copy()
        reduced.remove_node(node_id)
        if nx.number_weakly_connected_components(reduced) <= components:
            deletable.append(node_id)
    return deletable


def _addable_edges(graph: WorkflowGraph) -> List[Tuple[int, int]]:
    digraph = to_digraph(graph)
    existing = set(graph.edges)
    ids = sorted(graph.node_ids)
    return [
        (u, v) for u in ids for v in ids
        if u != v and (u, v) not in existing and not nx.has_path(digraph, v, u)
    ]


def _options(graph: WorkflowGraph, move: str, vocabulary: Sequence[str], max_nodes: int) -> list:
    if move == "add_node":
        return list(vocabulary) if graph.num_nodes < max_nodes else []
    if move == "delete_node":
        return _deletable(graph)
    if move == "add_edge":
        return _addable_edges(graph)
    if move == "remove_edge":
        return list(graph.edges)
    return [
        (node.id, prompt) for node in graph.nodes for prompt in sorted(set(vocabulary)) if prompt != node.prompt
    ]


def _apply(graph: WorkflowGraph, move: str, option: Any, rng: random.Random, graph_id: str) -> WorkflowGraph:
    nodes, edges = list(graph.nodes), list(graph.edges)
    if move == "add_node":
        new_id = max(graph.node_ids, default=0) + 1
        if nodes:
            edges.append((rng.choice(sorted(graph.node_ids)), new_id))
        nodes.append(AgentNode(id=new_id, prompt=option))
    elif move == "delete_node":
        nodes = [n for n in nodes if n.id != option]
        edges = [e for e in edges if option not in e]
    elif move == "add_edge":
        edges.append(option)
    elif move == "remove_edge":
        edges.remove(option)
    else:
        node_id, prompt = option
        nodes = [AgentNode(id=n.id, prompt=prompt) if n.id == node_id else n for n in nodes]
    return WorkflowGraph(id=graph_id, nodes=tuple(nodes), edges=tuple(edges))


def mutate(graph: WorkflowGraph, rng: random.Random, vocabulary: Sequence[str] = DEFAULT_PROMPTS,
           max_nodes: int = 10, moves: Sequence[str] = ALL_MOVES, graph_id: Optional[str] = None) -> WorkflowGraph:
    """Apply one random structural or prompt edit to a valid workflow.

    The move is picked uniformly among the applicable ones in ``moves``, then
    its target uniformly among that move's options. When none of ``moves``
    applies, a node addition is forced.

    Raises:
        NoApplicableMove: If not even a node addition is possible
    """
    ensure_valid(graph)
    new_id = graph.id if graph_id is None else graph_id
    applicable = [(m, opts) for m in moves if (opts := _options(graph, m, vocabulary, max_nodes))]
    if not applicable:
        forced = _options(graph, "add_node", vocabulary, max_nodes)
        if not forced:
            raise NoApplicableMove(f"no move among {list(moves)} applies to graph {graph.id!r}")
        logger.debug(f"No move in {list(moves)} applies to {graph.id!r}; forcing add_node")
        applicable = [("add_node", forced)]
    move, options = applicable[rng.randrange(len(applicable))]
    option = options[rng.randrange(len(options))]
    return _apply(graph, move, option, rng, new_id)


def reward_function(reward: RewardSource, tasks: Sequence[TaskInstance]) -> Callable[[int, WorkflowGraph], float]:
    """Build the scorer for candidate ``index`` and its workflow."""
    if reward.kind == "gnn":
        def score(index: int, graph: WorkflowGraph) -> float:
            return float(np.mean(predict_graph_on_tasks(reward.model, reward.embedding, graph, tasks)))
    elif reward.kind == "ground_truth":
        def score(index: int, graph: WorkflowGraph) -> float:
            return success_rate(graph, tasks)
    else:
        def score(index: int, graph: WorkflowGraph) -> float:
            return float(np.random.default_rng([reward.seed, index]).random())
    return score


def _charge(ledger: CallLedger, kind: str, candidates: int, tasks: int) -> None:
    if kind == "gnn":
        ledger.predictor_calls += candidates * tasks
    elif kind == "ground_truth":
        ledger.executor_calls += candidates * tasks


def optimize(seed_graph: WorkflowGraph, reward: RewardSource, config: SearchConfig,
             vocabulary: Sequence[str] = DEFAULT_PROMPTS) -> SearchReport:
    """Search for a better workflow starting from ``seed_graph``.

    Every step mutates each beam member in turn until ``beam * 4`` candidates
    exist, scores them on the training tasks, and keeps the best ``beam`` of
    the old beam plus the new candidates (ties go to the earlier one). The
    seed itself is never scored; each candidate spends one unit of budget.

    Args:
        seed_graph: Starting workflow
        reward: Scorer used during search
        config: Budget, beam width, task sets and cost weights
        vocabulary: Prompts available to node additions and replacements

    Returns:
        The best workflow, its executor score on the test tasks, the call ledger and a per-step trace

    Raises:
        ConfigError: If either task set is empty
    """
    if not config.train_tasks or not config.test_tasks:
        raise ConfigError("search needs non-empty train and test task sets")
    ensure_valid(seed_graph)
    started = time.time()
    rng = random.Random(config.mutation_seed)
    score = reward_function(reward, config.train_tasks)
    ledger = CallLedger()
    m = len(config.train_tasks)
    prefix = seed_graph.id or "seed"

    # (reward, evaluation index, graph); the seed has no reward yet.
    beam: List[Tuple[float, int, WorkflowGraph]] = []
    parents = [seed_graph]
    evaluations, step = 0, 0
    trace: List[TraceStep] = []

    while evaluations < config.budget:
        step += 1
        wanted = min(config.beam * MUTATIONS_PER_BEAM, config.budget - evaluations)
        candidates = []
        for i in range(wanted):
            index = evaluations + i
            candidates.append((index, mutate(parents[i % len(parents)], rng, vocabulary, config.max_graph_nodes,
                                             graph_id=f"{prefix}-c{index:04d}")))
        if config.threads > 1:
            with ThreadPoolExecutor(max_workers=config.threads) as pool:
                rewards = list(pool.map(lambda item: score(*item), candidates))
        else:
            rewards = [score(index, graph) for index, graph in candidates]
        _charge(ledger, reward.kind, len(candidates), m)
        evaluations += len(candidates)

        pool_entries = beam + [(r, index, graph) for r, (index, graph) in zip(rewards, candidates)]
        beam = sorted(pool_entries, key=lambda entry: (-entry[0], entry[1]))[:config.beam]
        parents = [graph for _, _, graph in beam]
        best_reward, _, best_graph = beam[0]
        test_score = success_rate(best_graph, config.test_tasks)
        trace.append(TraceStep(
            step=step, evaluations=evaluations, best_reward=best_reward,
            cumulative_cost=ledger.cost(config), test_score=test_score,
        ))
        logger.info(f"Step {step}: {evaluations}/{config.budget} evaluations, best reward {best_reward:.4f}")
        logger.debug(f"Step {step} best workflow {best_graph.id} with {best_graph.num_nodes} nodes")

    best_reward, _, best_graph = beam[0]
    report = SearchReport(
        reward=reward.kind,
        best_workflow=best_graph,
        best_reward=best_reward,
        score=success_rate(best_graph, config.test_tasks),
        executor_calls=ledger.executor_calls,
        predictor_calls=ledger.predictor_calls,
        evaluations=evaluations,
        seconds=time.time() - started,
        trace=trace,
    )
    logger.info(
        f"Search with {reward.kind} reward finished: score={report.score:.4f}, "
        f"executor_calls={report.executor_calls}, predictor_calls={report.predictor_calls}"
    )
    return report


def trace_records(report: SearchReport) -> List[Dict[str, object]]:
    return [{"reward": report.reward, **step.model_dump()} for step in report.trace]
