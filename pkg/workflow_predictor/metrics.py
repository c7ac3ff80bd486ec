"""Evaluation metrics: sample accuracy, top-k ranking utility, node-count analysis."""

import logging
import math
from fractions import Fraction
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field

from workflow_predictor.dataset_pipeline import LabeledSample
from workflow_predictor.errors import EmptyInput, KOutOfRange, LengthMismatch, MissingWorkflow
from workflow_predictor.graph_core import WorkflowGraph

logger = logging.getLogger(__name__)


class MetricsConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    k: Optional[int] = Field(default=None, ge=1)


class RankingResult(BaseModel):
    """Top-k workflows by true and by predicted success rate, and their overlap."""

    true_top: List[str]
    predicted_top: List[str]
    k: int
    utility: float


def accuracy(predicted: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of positions where the predicted label equals the true one.

    Raises:
        LengthMismatch: If the sequences differ in length
        EmptyInput: If both are empty
    """
    if len(predicted) != len(labels):
        raise LengthMismatch(f"{len(predicted)} predictions for {len(labels)} labels")
    if not labels:
        raise EmptyInput("accuracy of zero samples")
    return sum(int(p == e) for p, e in zip(predicted, labels)) / len(labels)


def default_k(num_workflows: int) -> int:
    return max(1, math.ceil(0.1 * num_workflows))


def rank_workflows(rates: Mapping[str, Fraction]) -> List[str]:
    """Workflow ids by descending rate, ties by ascending id."""
    return sorted(rates, key=lambda wid: (-rates[wid], wid))


def workflow_rates(labels_by_workflow: Mapping[str, Sequence[int]]) -> Dict[str, Fraction]:
    rates = {}
    for wid, labels in labels_by_workflow.items():
        if not labels:
            raise MissingWorkflow(f"workflow {wid!r} has no test samples")
        rates[wid] = Fraction(sum(labels), len(labels))
    return rates


def utility_at_k(predicted_by_workflow: Mapping[str, Sequence[int]],
                 true_by_workflow: Mapping[str, Sequence[int]], k: int) -> RankingResult:
    """Overlap between the predicted and true top-k workflows.

    Rates are exact per-workflow means, so equal rates tie exactly and fall
    back to workflow id order.

    Args:
        predicted_by_workflow: Predicted labels per workflow over its test tasks
        true_by_workflow: Ground-truth labels per workflow over the same tasks
        k: Number of top workflows compared

    Raises:
        MissingWorkflow: If the two tables cover different workflows or one has no samples
        KOutOfRange: If ``k`` is not in ``[1, number of workflows]``
    """
    if set(predicted_by_workflow) != set(true_by_workflow):
        missing = sorted(set(predicted_by_workflow) ^ set(true_by_workflow))
        raise MissingWorkflow(f"workflows present in only one table: {missing[:5]}")
    n = len(true_by_workflow)
    if not 1 <= k <= n:
        raise KOutOfRange(f"k={k} outside [1, {n}]")
    true_top = rank_workflows(workflow_rates(true_by_workflow))[:k]
    predicted_top = rank_workflows(workflow_rates(predicted_by_workflow))[:k]
    overlap = len(set(true_top) & set(predicted_top))
    return RankingResult(true_top=true_top, predicted_top=predicted_top, k=k, utility=overlap / k)


def group_by_workflow(samples: Sequence[LabeledSample],
                      predicted: Sequence[int]) -> Tuple[Dict[str, List[int]], Dict[str, List[int]]]:
    """Split flat predictions and labels into per-workflow lists, in sample order."""
    if len(samples) != len(predicted):
        raise LengthMismatch(f"{len(predicted)} predictions for {len(samples)} samples")
    pred_by_wf: Dict[str, List[int]] = {}
    true_by_wf: Dict[str, List[int]] = {}
    for sample, label in zip(samples, predicted):
        pred_by_wf.setdefault(sample.workflow_id, []).append(int(label))
        true_by_wf.setdefault(sample.workflow_id, []).append(sample.label)
    return pred_by_wf, true_by_wf


def success_by_node_count(graphs: Sequence[WorkflowGraph], samples: Sequence[LabeledSample]) -> Dict[int, float]:
    """Mean label per workflow size; sizes without samples are left out.

    Raises:
        MissingWorkflow: If a sample names a workflow not in ``graphs``
    """
    sizes = {g.id: g.num_nodes for g in graphs}
    totals: Dict[int, List[int]] = {}
    for sample in samples:
        size = sizes.get(sample.workflow_id)
        if size is None:
            raise MissingWorkflow(f"label for unknown workflow {sample.workflow_id!r}")
        bucket = totals.setdefault(size, [0, 0])
        bucket[0] += sample.label
        bucket[1] += 1
    return {size: hits / count for size, (hits, count) in sorted(totals.items())}
