"""Main entry point for the workflow predictor command line."""

import argparse
import json
import logging
import os
import random
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import load_dotenv

from workflow_predictor import __version__
from workflow_predictor.config import ENV_LOG_LEVEL, RunConfig, load_run_config, named_seeds
from workflow_predictor.dataset_pipeline import (
    DATASET_FILES,
    DEFAULT_PROMPTS,
    BuiltDataset,
    SplitSpec,
    build_dataset,
    generate_tasks,
    load_labels,
    read_dataset,
    reduce_majority,
    split,
    write_dataset,
)
from workflow_predictor.errors import ConfigError, DataIoError, DataValidationError, WorkflowPredictorError
from workflow_predictor.graph_core import AgentNode, TaskInstance, WorkflowGraph, ensure_valid
from workflow_predictor.manifest import RunManifest, Stopwatch
from workflow_predictor.metrics import accuracy, default_k, group_by_workflow, success_by_node_count, utility_at_k
from workflow_predictor.optimizer import RewardSource, SearchConfig, optimize, trace_records
from workflow_predictor.predictor import (
    FeatureStore,
    PredictorModel,
    labels_from_probabilities,
    predict_samples,
    train,
)
from workflow_predictor.reporting import (
    METRIC_FIELDS,
    TRACE_FIELDS,
    MetricRow,
    plot_metric_bars,
    plot_node_counts,
    plot_search_traces,
    read_csv,
    read_metrics_csv,
    write_csv,
    write_metrics_csv,
)
from workflow_predictor.workflow_dsl import dump_graphs, load_graphs, load_script, load_tasks, write_jsonl

# Configure logging to stderr; stdout carries one summary line per command
logging.basicConfig(
    level=logging.ERROR,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    stream=sys.stderr
)
logger = logging.getLogger(__name__)

DATASET_INFO = "dataset.json"
CHECKPOINT_NAME = "model.ckpt"


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: Any) -> Path:
    try:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise DataIoError(f"cannot write {path}: {e}") from e
    return path


def _dataset_domain(data_dir: Path) -> Optional[str]:
    info = data_dir / DATASET_INFO
    if not info.exists():
        return None
    try:
        return json.loads(info.read_text(encoding="utf-8")).get("domain")
    except (OSError, ValueError) as e:
        raise DataIoError(f"cannot read {info}: {e}") from e


def _load_dataset(data_dir: str) -> BuiltDataset:
    root = Path(data_dir)
    if not root.is_dir():
        raise DataIoError(f"dataset directory {root} does not exist")
    return read_dataset(root, _dataset_domain(root))


def _dataset_files(data_dir: str) -> List[Path]:
    return [Path(data_dir) / name for name in DATASET_FILES.values() if (Path(data_dir) / name).exists()]


def _load_workflow(path: str) -> WorkflowGraph:
    if path.endswith(".jsonl"):
        graphs = load_graphs(path)
        if not graphs:
            raise DataValidationError(f"{path} holds no workflows")
        return graphs[0]
    return load_script(path)


def default_seed_workflow() -> WorkflowGraph:
    """Single generic agent used when no starting workflow is given."""
    return WorkflowGraph(id="seed", nodes=(AgentNode(id=1, prompt=DEFAULT_PROMPTS[8]),))


def cmd_extract(args: argparse.Namespace, config: RunConfig) -> str:
    """Turn workflow scripts (or graph files) into one validated graph file."""
    out = _out_dir(args)
    graphs: List[WorkflowGraph] = []
    for path in args.inputs:
        loaded = load_graphs(path) if path.endswith(".jsonl") else [load_script(path)]
        for graph in loaded:
            ensure_valid(graph)
        graphs.extend(loaded)
    target = out / "graphs.jsonl"
    dump_graphs(target, graphs)
    manifest = RunManifest(command="extract")
    manifest.add_inputs(args.inputs)
    manifest.add_outputs([target])
    manifest.write(out)
    return f"extracted {len(graphs)} workflows to {target}"


def _external_dataset(args: argparse.Namespace, config: RunConfig, split_seed: int) -> BuiltDataset:
    if not (args.graphs and args.tasks):
        raise ConfigError("--labels needs --graphs and --tasks")
    graphs = load_graphs(args.graphs)
    tasks = load_tasks(args.tasks)
    samples = load_labels(args.labels, [g.id for g in graphs], [t.id for t in tasks])
    if args.majority:
        samples = reduce_majority(samples)
    expected = len(graphs) * len(tasks)
    if len(samples) != expected:
        logger.warning(f"{len(samples)} labeled pairs, Cartesian product would give {expected}")
    spec = SplitSpec(ratios=config.domain.split.ratios, split_seed=split_seed)
    train_set, val_set, test_set = split(samples, spec)
    return BuiltDataset(
        domain=args.domain or config.domain.name, graphs=graphs, tasks=tasks, samples=samples,
        train=train_set, val=val_set, test=test_set,
        info={
            "workflows": len(graphs), "tasks": len(tasks), "samples": len(samples),
            "expected_pairs": expected, "split": [len(train_set), len(val_set), len(test_set)],
        },
    )


def cmd_build(args: argparse.Namespace, config: RunConfig) -> str:
    """Generate (or assemble from external files) a labeled, split dataset."""
    out = _out_dir(args)
    seeds = named_seeds(config.seed)
    clock = Stopwatch()
    clock.start("build")
    domain = config.resolved_domain()
    domain = domain.model_copy(update={"split": SplitSpec(ratios=domain.split.ratios, split_seed=seeds["split"])})
    if args.labels:
        dataset = _external_dataset(args, config, seeds["split"])
        inputs = [args.graphs, args.tasks, args.labels]
    else:
        dataset = build_dataset(domain, seeds["generation"], seeds["tasks"], seeds["probe"], threads=config.threads)
        inputs = []
    clock.start("write")
    paths = write_dataset(out, dataset)
    discrepancy = dataset.info.get("samples") != dataset.info.get("expected_pairs")
    info = {
        "domain": dataset.domain,
        "seeds": seeds,
        "domain_config": domain.model_dump(mode="json"),
        "counts": dataset.info,
        "sample_count_matches_product": not discrepancy,
    }
    info_path = _write_json(out / DATASET_INFO, info)
    clock.stop()
    manifest = RunManifest(
        command="build", config=config.model_dump(mode="json"), seeds=seeds, timings=clock.timings,
        notes={"sample_count_matches_product": not discrepancy},
    )
    manifest.add_inputs(inputs)
    manifest.add_outputs(list(paths.values()) + [info_path])
    manifest.write(out)
    return (
        f"built {dataset.domain}: {len(dataset.graphs)} workflows, {len(dataset.tasks)} tasks, "
        f"{len(dataset.samples)} samples -> {out}"
    )


def _feature_store(model: PredictorModel, embedding, datasets: Sequence[BuiltDataset]) -> FeatureStore:
    graphs = {g.id: g for ds in datasets for g in ds.graphs}
    tasks = {t.id: t for ds in datasets for t in ds.tasks}
    return FeatureStore(model.config, embedding, graphs, tasks)


def cmd_train(args: argparse.Namespace, config: RunConfig) -> str:
    """Train a predictor on a dataset directory and write the selected checkpoint."""
    out = _out_dir(args)
    seeds = named_seeds(config.seed)
    dataset = _load_dataset(args.data)
    predictor_config = config.predictor.model_copy(update={"seed": seeds["train"]})
    model = PredictorModel(predictor_config, rng=np.random.default_rng(seeds["init"]))
    store = _feature_store(model, config.embedding, [dataset])
    result = train(predictor_config, model, dataset.train, dataset.val, store)
    checkpoint = out / CHECKPOINT_NAME
    model.save(str(checkpoint), config.embedding, extra={"domain": dataset.domain, "best_epoch": result.best_epoch})
    history = out / "history.csv"
    write_csv(history, ("epoch", "loss", "val_accuracy"), [r.model_dump() for r in result.history])
    manifest = RunManifest(
        command="train", config=config.model_dump(mode="json"), seeds=seeds,
        timings={"train": round(result.seconds, 6)},
        notes={"best_epoch": result.best_epoch, "best_val_accuracy": result.best_val_accuracy},
    )
    manifest.add_inputs(_dataset_files(args.data))
    manifest.add_outputs([checkpoint, history])
    manifest.write(out)
    return f"trained {predictor_config.arch}: best epoch {result.best_epoch}, val accuracy {result.best_val_accuracy:.4f}"


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> str:
    """Score a checkpoint on a dataset's test split: accuracy and utility@k."""
    out = _out_dir(args)
    model, embedding, meta = PredictorModel.load(args.checkpoint)
    if args.config:
        embedding = config.embedding
    data_dir = args.dataset or args.data
    if not data_dir:
        raise ConfigError("eval needs --data or --dataset")
    dataset = _load_dataset(data_dir)
    store = _feature_store(model, embedding, [dataset])
    probabilities = predict_samples(model, store, dataset.test, threads=config.threads)
    predicted = labels_from_probabilities(probabilities, model.config.threshold)
    acc = accuracy(predicted, [s.label for s in dataset.test])
    pred_by_wf, true_by_wf = group_by_workflow(dataset.test, predicted)
    k = config.metrics.k or default_k(len(true_by_wf))
    ranking = utility_at_k(pred_by_wf, true_by_wf, k)

    train_domain = meta.get("domain", "unknown")
    domain = f"{train_domain}->{dataset.domain}" if args.dataset else dataset.domain
    rows = [
        MetricRow(metric="accuracy", domain=domain, model=model.config.arch, value=acc),
        MetricRow(metric="utility_at_k", domain=domain, model=model.config.arch, value=ranking.utility),
        MetricRow(metric="k", domain=domain, model=model.config.arch, value=float(k)),
    ]
    metrics_path = out / "metrics.csv"
    write_metrics_csv(metrics_path, rows)
    ranking_path = _write_json(out / "ranking.json", ranking.model_dump())
    predictions_path = out / "predictions.jsonl"
    write_jsonl(predictions_path, [
        {**s.to_record(), "predicted": p, "probability": float(prob)}
        for s, p, prob in zip(dataset.test, predicted, probabilities)
    ])
    manifest = RunManifest(command="eval", config=config.model_dump(mode="json"), seeds=named_seeds(config.seed))
    manifest.add_inputs([args.checkpoint] + _dataset_files(data_dir))
    manifest.add_outputs([metrics_path, ranking_path, predictions_path])
    manifest.write(out)
    return f"{domain} {model.config.arch}: accuracy {acc:.4f}, utility@{k} {ranking.utility:.4f}"


def _search_tasks(args: argparse.Namespace, config: RunConfig, seeds: Dict[str, int]) -> Tuple[List[TaskInstance], List[TaskInstance]]:
    if args.data:
        tasks = list(_load_dataset(args.data).tasks)
    else:
        domain = config.domain
        tasks = generate_tasks(domain.n_tasks, seeds["tasks"], seq_len=domain.seq_len, max_nodes=domain.max_nodes,
                               noise=domain.noise, noise_seed=seeds["tasks"])
    random.Random(seeds["search"]).shuffle(tasks)
    n_train = config.search.train_tasks
    if len(tasks) <= n_train:
        raise ConfigError(f"{len(tasks)} tasks cannot supply {n_train} train tasks and a test set")
    rest = tasks[n_train:]
    if config.search.test_tasks is not None:
        rest = rest[:config.search.test_tasks]
    return tasks[:n_train], rest


def cmd_optimize(args: argparse.Namespace, config: RunConfig) -> str:
    """Search for a better workflow with the configured reward source."""
    out = _out_dir(args)
    seeds = named_seeds(config.seed)
    settings = config.search
    train_tasks, test_tasks = _search_tasks(args, config, seeds)
    seed_graph = _load_workflow(args.workflow) if args.workflow else default_seed_workflow()
    model, embedding = None, None
    if settings.reward == "gnn":
        if not args.checkpoint:
            raise ConfigError("the gnn reward needs --checkpoint")
        model, embedding, _ = PredictorModel.load(args.checkpoint)
    reward = RewardSource(kind=settings.reward, model=model, embedding=embedding, seed=seeds["random_reward"])
    search = SearchConfig(
        budget=settings.budget, beam=settings.beam, mutation_seed=seeds["search"],
        train_tasks=tuple(train_tasks), test_tasks=tuple(test_tasks), max_graph_nodes=settings.max_graph_nodes,
        executor_cost=settings.executor_cost, predictor_cost=settings.predictor_cost, threads=config.threads,
    )
    report = optimize(seed_graph, reward, search)
    report_path = _write_json(out / "report.json", report.model_dump(mode="json", exclude={"seconds"}))
    trace_path = out / "trace.csv"
    write_csv(trace_path, TRACE_FIELDS, trace_records(report))
    manifest = RunManifest(
        command="optimize", config=config.model_dump(mode="json"), seeds=seeds,
        timings={"search": round(report.seconds, 6)},
        notes={"train_tasks": [t.id for t in train_tasks], "test_tasks": [t.id for t in test_tasks]},
    )
    manifest.add_inputs([p for p in (args.checkpoint, args.workflow) if p] + (_dataset_files(args.data) if args.data else []))
    manifest.add_outputs([report_path, trace_path])
    manifest.write(out)
    return (
        f"{settings.reward}: score {report.score:.4f} after {report.evaluations} evaluations, "
        f"executor_calls={report.executor_calls}, predictor_calls={report.predictor_calls}"
    )


def cmd_report(args: argparse.Namespace, config: RunConfig) -> str:
    """Merge metric and trace CSVs into one report CSV plus SVG charts."""
    out = _out_dir(args)
    rows: List[MetricRow] = []
    traces: Dict[str, List[Dict[str, str]]] = {}
    for path in args.inputs:
        records = read_csv(path)
        if not records:
            logger.warning(f"{path} has no rows, skipping")
            continue
        fields = tuple(records[0])
        if fields == METRIC_FIELDS:
            rows.extend(read_metrics_csv(path))
        elif fields == TRACE_FIELDS:
            for record in records:
                traces.setdefault(record["reward"], []).append(record)
        else:
            raise DataValidationError(f"{path} is neither a metric nor a trace CSV")
    outputs = []
    if rows:
        merged = out / "report.csv"
        write_metrics_csv(merged, rows)
        outputs.append(merged)
        for metric in sorted({row.metric for row in rows} - {"k"}):
            chart = out / f"{metric}.svg"
            plot_metric_bars(chart, rows, metric)
            outputs.append(chart)
    if traces:
        chart = out / "search_traces.svg"
        plot_search_traces(chart, traces)
        outputs.append(chart)
    if args.data:
        dataset = _load_dataset(args.data)
        rates = success_by_node_count(dataset.graphs, dataset.samples)
        table = out / "node_counts.csv"
        write_csv(table, ("nodes", "success_rate"), [{"nodes": n, "success_rate": r} for n, r in rates.items()])
        chart = out / "node_counts.svg"
        plot_node_counts(chart, rates)
        outputs.extend([table, chart])
    manifest = RunManifest(command="report")
    manifest.add_inputs(list(args.inputs) + (_dataset_files(args.data) if args.data else []))
    manifest.add_outputs(outputs)
    manifest.write(out)
    return f"report with {len(rows)} metric rows and {len(traces)} traces -> {out}"


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], str]] = {
    "extract": cmd_extract,
    "build": cmd_build,
    "train": cmd_train,
    "eval": cmd_eval,
    "optimize": cmd_optimize,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON config file")
    common.add_argument("--seed", type=int, default=None, help="Root seed for every random stream")
    common.add_argument("--out", type=str, default=".", help="Output directory")
    common.add_argument("--threads", type=int, default=None, help="Worker threads for labeling and evaluation")
    common.add_argument("--log-level", type=str, default=None, help="Log level (default from environment, else error)")

    parser = argparse.ArgumentParser(description="Workflow success predictor")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    extract = sub.add_parser("extract", parents=[common], help="Extract workflow graphs from scripts")
    extract.add_argument("inputs", nargs="+", help="Workflow scripts or graph JSONL files")

    build = sub.add_parser("build", parents=[common], help="Build a labeled dataset")
    build.add_argument("--graphs", type=str, default=None, help="External graph JSONL")
    build.add_argument("--tasks", type=str, default=None, help="External task JSONL")
    build.add_argument("--labels", type=str, default=None, help="External label JSONL")
    build.add_argument("--majority", action="store_true", help="Reduce repeated label runs by majority vote")
    build.add_argument("--domain", type=str, default=None, help="Domain name for external data")

    train_cmd = sub.add_parser("train", parents=[common], help="Train a predictor")
    train_cmd.add_argument("--data", type=str, required=True, help="Dataset directory")
    train_cmd.add_argument("--arch", choices=["gcn", "gat", "mlp"], default=None, help="Predictor architecture")

    eval_cmd = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    eval_cmd.add_argument("--checkpoint", type=str, required=True, help="Checkpoint file")
    eval_cmd.add_argument("--data", type=str, default=None, help="Dataset directory")
    eval_cmd.add_argument("--dataset", type=str, default=None, help="Dataset of another domain to evaluate on")
    eval_cmd.add_argument("--k", type=int, default=None, help="Top-k size for utility")

    opt = sub.add_parser("optimize", parents=[common], help="Search for a better workflow")
    opt.add_argument("--reward", choices=["gnn", "ground_truth", "random"], default=None, help="Reward source")
    opt.add_argument("--checkpoint", type=str, default=None, help="Checkpoint for the gnn reward")
    opt.add_argument("--data", type=str, default=None, help="Dataset directory supplying tasks")
    opt.add_argument("--workflow", type=str, default=None, help="Starting workflow (script or graph JSONL)")

    report = sub.add_parser("report", parents=[common], help="Merge metric CSVs and draw charts")
    report.add_argument("inputs", nargs="*", help="Metric or trace CSV files")
    report.add_argument("--data", type=str, default=None, help="Dataset directory for the node-count analysis")
    return parser


def flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if getattr(args, "arch", None) is not None:
        overrides["predictor"] = {"arch": args.arch}
    if getattr(args, "reward", None) is not None:
        overrides["search"] = {"reward": args.reward}
    if getattr(args, "k", None) is not None:
        overrides["metrics"] = {"k": args.k}
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command and return its exit code."""
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)

    # Set log level
    level_name = args.log_level or os.environ.get(ENV_LOG_LEVEL, "error")
    log_level = getattr(logging, level_name.upper(), logging.ERROR)
    logging.getLogger().setLevel(log_level)

    try:
        config = load_run_config(args.config, flag_overrides(args))
        summary = COMMANDS[args.command](args, config)
    except WorkflowPredictorError as e:
        logger.error(f"{args.command} failed: {e}")
        message = str(e).replace("\n", " ")
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected error in {args.command}: {e}", exc_info=True)
        message = str(e).replace("\n", " ")
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return 1
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
