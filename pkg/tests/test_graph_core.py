"""Tests for the workflow graph model and its utilities."""

import itertools
import random
import unittest

from pydantic import ValidationError

from tests.helpers import CODING_EDGES, PROMPTS, chain, make_graph, random_dag
from workflow_predictor.errors import CyclicGraph, UnknownNode
from workflow_predictor.graph_core import (
    AgentNode,
    TaskInstance,
    WorkflowGraph,
    in_neighbors,
    out_neighbors,
    relabel,
    topo_order,
    validate,
)


def has_cycle_by_paths(graph: WorkflowGraph) -> bool:
    """Brute force: a cycle exists iff some node reaches itself."""
    succ = {n: [d for s, d in graph.edges if s == n] for n in graph.node_ids}
    for start in graph.node_ids:
        stack, seen = list(succ[start]), set()
        while stack:
            node = stack.pop()
            if node == start:
                return True
            if node not in seen:
                seen.add(node)
                stack.extend(succ[node])
    return False


class TestValidate(unittest.TestCase):
    """Test graph validation."""

    def test_single_node_is_valid(self):
        """Test that a lone node without edges is a valid DAG."""
        report = validate(make_graph(["Solo: do it"]))
        self.assertTrue(report.ok)
        self.assertIsNone(report.cycle)

    def test_two_cycle_is_named(self):
        """Test that the smallest cycle is reported starting at its smallest id."""
        report = validate(make_graph(["A: x", "B: y"], [(1, 2), (2, 1)]))
        self.assertFalse(report.ok)
        self.assertEqual(report.cycle, [1, 2])

    def test_empty_graph_is_invalid(self):
        """Test a graph without nodes is reported."""
        report = validate(WorkflowGraph(id="empty", nodes=()))
        self.assertFalse(report.ok)
        self.assertEqual(report.violations, ["graph has no nodes"])

    def test_structural_violations(self):
        """Test self-loops, duplicate edges, unknown endpoints, duplicate ids and empty prompts."""
        # Setup
        graph = WorkflowGraph(
            id="bad",
            nodes=(AgentNode(id=1, prompt="A: x"), AgentNode(id=1, prompt="B: y"), AgentNode(id=3, prompt="  ")),
            edges=((1, 1), (1, 3), (1, 3), (3, 9)),
        )

        # Execute
        report = validate(graph)

        # Assert
        text = " | ".join(report.violations)
        self.assertIn("duplicate node id 1", text)
        self.assertIn("empty prompt", text)
        self.assertIn("self-loop on node 1", text)
        self.assertIn("duplicate edge (1, 3)", text)
        self.assertIn("unknown node 9", text)

    def test_matches_brute_force_cycle_check(self):
        """Test validation agrees with path enumeration on random digraphs."""
        rng = random.Random(7)
        for _ in range(300):
            n = rng.randint(1, 8)
            edges = {(a, b) for a in range(1, n + 1) for b in range(1, n + 1) if a != b and rng.random() < 0.15}
            graph = make_graph(["A: x"] * n, sorted(edges))
            self.assertEqual(validate(graph).cycle is not None, has_cycle_by_paths(graph))

    def test_random_dags_are_valid(self):
        """Test shuffled-order DAGs pass validation."""
        rng = random.Random(3)
        for _ in range(100):
            self.assertTrue(validate(random_dag(rng, 8)).ok)

    def test_task_text_must_not_be_empty(self):
        """Test that a blank task instruction is rejected."""
        with self.assertRaises(ValidationError):
            TaskInstance(id="t", text="   ")


class TestTopoOrder(unittest.TestCase):
    """Test topological ordering."""

    def test_chain(self):
        """Test a chain has its unique order."""
        self.assertEqual(topo_order(chain(["A: a", "B: b", "C: c"])), [1, 2, 3])

    def test_star_tie_break(self):
        """Test independent nodes come out in ascending id order."""
        graph = make_graph(["A: a", "B: b", "C: c"], [(1, 3), (1, 2)])
        self.assertEqual(topo_order(graph), [1, 2, 3])

    def test_coding_workflow_shape(self):
        """Test the eight-node fan-out/fan-in workflow starts at 1 and ends at 8."""
        order = topo_order(make_graph(["A: a"] * 8, CODING_EDGES))
        self.assertEqual(order[0], 1)
        self.assertEqual(order[-1], 8)

    def test_cycle_raises(self):
        """Test ordering a cyclic graph raises CyclicGraph."""
        with self.assertRaises(CyclicGraph) as ctx:
            topo_order(make_graph(["A: a", "B: b", "C: c"], [(1, 2), (2, 3), (3, 1)]))
        self.assertEqual(ctx.exception.cycle, [1, 2, 3])

    def test_order_is_permutation_respecting_edges(self):
        """Test every edge points forward in the order over random DAGs."""
        rng = random.Random(11)
        for _ in range(200):
            graph = random_dag(rng, rng.randint(1, 10))
            order = topo_order(graph)
            self.assertEqual(sorted(order), sorted(graph.node_ids))
            position = {n: i for i, n in enumerate(order)}
            for src, dst in graph.edges:
                self.assertLess(position[src], position[dst])


class TestNeighbours(unittest.TestCase):
    """Test neighbourhood queries."""

    def test_chain_predecessor(self):
        """Test the predecessor of the second chain node."""
        graph = chain(["A: a", "B: b"])
        self.assertEqual(in_neighbors(graph, 2), frozenset({1}))
        self.assertEqual(in_neighbors(graph, 1), frozenset())
        self.assertEqual(out_neighbors(graph, 1), frozenset({2}))

    def test_fan_in(self):
        """Test the join node of the coding workflow."""
        graph = make_graph(["A: a"] * 8, CODING_EDGES)
        self.assertEqual(in_neighbors(graph, 5), frozenset({2, 3, 4}))

    def test_unknown_node(self):
        """Test querying a missing node raises UnknownNode."""
        with self.assertRaises(UnknownNode):
            in_neighbors(chain(["A: a"]), 42)

    def test_consistent_under_relabeling(self):
        """Test in_neighbors commutes with node relabeling."""
        rng = random.Random(5)
        for _ in range(50):
            graph = random_dag(rng, 6)
            targets = list(range(100, 106))
            rng.shuffle(targets)
            mapping = dict(zip(graph.node_ids, targets))
            renamed = relabel(graph, mapping)
            for node_id in graph.node_ids:
                expected = frozenset(mapping[u] for u in in_neighbors(graph, node_id))
                self.assertEqual(in_neighbors(renamed, mapping[node_id]), expected)

    def test_prompt_lookup(self):
        """Test prompt_of finds prompts and rejects unknown ids."""
        graph = make_graph(PROMPTS[:2])
        self.assertEqual(graph.prompt_of(2), PROMPTS[1])
        with self.assertRaises(UnknownNode):
            graph.prompt_of(3)
        self.assertEqual(list(itertools.islice(graph.index_of().items(), 2)), [(1, 0), (2, 1)])


if __name__ == "__main__":
    unittest.main()
