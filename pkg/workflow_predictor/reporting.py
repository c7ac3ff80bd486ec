"""Metric CSV files and SVG charts."""

import csv
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from pydantic import BaseModel  # noqa: E402

from workflow_predictor.errors import DataIoError, FormatError  # noqa: E402

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

METRIC_FIELDS = ("metric", "domain", "model", "value")
TRACE_FIELDS = ("reward", "step", "evaluations", "best_reward", "cumulative_cost", "test_score")

# Fixed salt and no date so the same data renders to the same bytes.
matplotlib.rcParams["svg.hashsalt"] = "workflow-predictor"
SVG_METADATA = {"Date": None}


class MetricRow(BaseModel):
    metric: str
    domain: str
    model: str
    value: float


def write_metrics_csv(path: PathLike, rows: Sequence[MetricRow]) -> None:
    write_csv(path, METRIC_FIELDS, [row.model_dump() for row in rows])


def write_csv(path: PathLike, fields: Sequence[str], records: Iterable[Mapping[str, object]]) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=list(fields), lineterminator="\n")
            writer.writeheader()
            for record in records:
                writer.writerow({field: _cell(record.get(field)) for field in fields})
    except OSError as e:
        raise DataIoError(f"cannot write {path}: {e}") from e


def _cell(value: object) -> object:
    if isinstance(value, float):
        return repr(value)
    return value


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    try:
        with open(path, encoding="utf-8", newline="") as handle:
            return list(csv.DictReader(handle))
    except OSError as e:
        raise DataIoError(f"cannot read {path}: {e}") from e


def read_metrics_csv(path: PathLike) -> List[MetricRow]:
    """Load a metric CSV written by ``write_metrics_csv``.

    Raises:
        FormatError: If a row lacks a column or has a non-numeric value
    """
    rows = []
    for number, record in enumerate(read_csv(path), start=2):
        try:
            rows.append(MetricRow(**{field: record[field] for field in METRIC_FIELDS}))
        except (KeyError, ValueError) as e:
            raise FormatError(number, f"bad metric row in {path}: {e}") from e
    return rows


def _save(fig, path: PathLike) -> None:
    try:
        fig.savefig(path, format="svg", metadata=SVG_METADATA, bbox_inches="tight")
    except OSError as e:
        raise DataIoError(f"cannot write {path}: {e}") from e
    finally:
        plt.close(fig)
    logger.info(f"Wrote chart {path}")


def plot_metric_bars(path: PathLike, rows: Sequence[MetricRow], metric: str) -> None:
    """One bar per (model, domain) for ``metric``."""
    selected = [row for row in rows if row.metric == metric]
    labels = [f"{row.model}\n{row.domain}" for row in selected]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(selected)), 3.5))
    ax.bar(range(len(selected)), [row.value for row in selected], color="#4c72b0")
    ax.set_xticks(range(len(selected)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel(metric)
    ax.set_title(f"{metric} by model")
    _save(fig, path)


def plot_search_traces(path: PathLike, traces: Mapping[str, Sequence[Mapping[str, object]]]) -> None:
    """Test score of the incumbent workflow against cumulative simulated cost, one line per reward source."""
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    for reward, steps in sorted(traces.items()):
        xs = [float(step["cumulative_cost"]) for step in steps]
        ys = [float(step["test_score"]) for step in steps]
        ax.plot(xs, ys, marker="o", markersize=3, label=reward)
    ax.set_xlabel("cumulative simulated cost")
    ax.set_ylabel("test score")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    _save(fig, path)


def plot_node_counts(path: PathLike, rates: Mapping[int, float]) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    sizes = sorted(rates)
    ax.plot(sizes, [rates[s] for s in sizes], marker="s", color="#dd8452")
    ax.set_xlabel("number of agents")
    ax.set_ylabel("success rate")
    ax.set_ylim(0.0, 1.0)
    _save(fig, path)
