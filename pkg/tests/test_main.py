"""Tests for the command-line entry point."""

import contextlib
import csv
import io
import json
import os
import sys
import tempfile
import unittest
from pathlib import Path
from typing import List, Tuple

import pexpect

from workflow_predictor.main import build_parser, default_seed_workflow, flag_overrides, main

ROOT = Path(__file__).resolve().parent.parent

TINY_CONFIG = {
    "seed": 3,
    "domain": {
        "n_workflows": 20,
        "node_range": [2, 5],
        "n_candidate_tasks": 30,
        "n_tasks": 5,
        "filter": {"low": 0.0, "high": 1.0, "probe_size": 8},
    },
    "embedding": {"dim": 16},
    "predictor": {"input_dim": 16, "hidden": 8, "epochs": 3, "batch_size": 32},
    "search": {"budget": 4, "train_tasks": 3},
}

SCRIPT = '''x1 = agent("Planner", instruction="plan the work")(task)
x2 = agent("Coder", instruction="code the plan")(x1, task)
'''


def run(argv: List[str]) -> Tuple[int, str, str]:
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


class TestPipeline(unittest.TestCase):
    """Test the commands end to end on a tiny domain."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.dir = Path(cls.tmp.name)
        cls.config = cls.dir / "config.json"
        cls.config.write_text(json.dumps(TINY_CONFIG), encoding="utf-8")
        cls.data = cls.dir / "data"
        cls.model_dir = cls.dir / "model"
        cls.build = run(["build", "--config", str(cls.config), "--out", str(cls.data)])
        cls.train = run(["train", "--config", str(cls.config), "--data", str(cls.data), "--out", str(cls.model_dir)])
        cls.checkpoint = cls.model_dir / "model.ckpt"

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_build(self):
        """Test the dataset directory and its info file."""
        code, stdout, _ = self.build
        self.assertEqual(code, 0)
        self.assertIn("20 workflows, 5 tasks, 100 samples", stdout)
        info = json.loads((self.data / "dataset.json").read_text(encoding="utf-8"))
        self.assertEqual(info["counts"]["split"], [80, 10, 10])
        self.assertTrue(info["sample_count_matches_product"])
        manifest = json.loads((self.data / "manifest.json").read_text(encoding="utf-8"))
        self.assertEqual(manifest["command"], "build")
        self.assertEqual(len(manifest["outputs"]), 8)

    def test_pipeline_is_reproducible(self):
        """Test a second build, train and eval with the same seed writes identical files."""
        # Setup
        again = self.dir / "again"
        again_model = self.dir / "again-model"
        first_eval, second_eval = self.dir / "repro-eval-1", self.dir / "repro-eval-2"

        # Execute
        self.assertEqual(run(["build", "--config", str(self.config), "--out", str(again)])[0], 0)
        self.assertEqual(run(["train", "--config", str(self.config), "--data", str(again), "--out",
                              str(again_model)])[0], 0)
        for checkpoint, data, out in ((self.checkpoint, self.data, first_eval),
                                      (again_model / "model.ckpt", again, second_eval)):
            self.assertEqual(run(["eval", "--checkpoint", str(checkpoint), "--data", str(data),
                                  "--out", str(out)])[0], 0)

        # Assert
        for name in ("graphs.jsonl", "labels.jsonl", "train.jsonl", "test.jsonl"):
            self.assertEqual((again / name).read_bytes(), (self.data / name).read_bytes(), name)
        for name in ("model.ckpt", "history.csv"):
            self.assertEqual((again_model / name).read_bytes(), (self.model_dir / name).read_bytes(), name)
        self.assertEqual((second_eval / "metrics.csv").read_bytes(), (first_eval / "metrics.csv").read_bytes())

    def test_train(self):
        """Test the checkpoint and per-epoch history."""
        code, stdout, _ = self.train
        self.assertEqual(code, 0)
        self.assertIn("trained gcn", stdout)
        self.assertTrue(self.checkpoint.exists())
        with open(self.model_dir / "history.csv", encoding="utf-8", newline="") as handle:
            self.assertEqual(len(list(csv.DictReader(handle))), 3)

    def test_eval_and_report(self):
        """Test evaluation outputs feed the report command."""
        out = self.dir / "eval"
        code, stdout, _ = run(["eval", "--checkpoint", str(self.checkpoint), "--data", str(self.data),
                               "--out", str(out)])
        self.assertEqual(code, 0)
        self.assertIn("accuracy", stdout)
        with open(out / "metrics.csv", encoding="utf-8", newline="") as handle:
            rows = list(csv.DictReader(handle))
        self.assertEqual([r["metric"] for r in rows], ["accuracy", "utility_at_k", "k"])
        self.assertEqual(rows[0]["domain"], "synthetic")
        with open(out / "predictions.jsonl", encoding="utf-8") as handle:
            self.assertEqual(len(handle.readlines()), 10)

        cross = self.dir / "cross"
        self.assertEqual(run(["eval", "--checkpoint", str(self.checkpoint), "--dataset", str(self.data),
                              "--out", str(cross)])[0], 0)
        with open(cross / "metrics.csv", encoding="utf-8", newline="") as handle:
            self.assertEqual(next(csv.DictReader(handle))["domain"], "synthetic->synthetic")

        search = self.dir / "search"
        self.assertEqual(run(["optimize", "--config", str(self.config), "--reward", "random", "--data",
                              str(self.data), "--out", str(search)])[0], 0)
        report = self.dir / "report"
        code, stdout, _ = run(["report", str(out / "metrics.csv"), str(search / "trace.csv"),
                               "--data", str(self.data), "--out", str(report)])
        self.assertEqual(code, 0)
        for name in ("report.csv", "accuracy.svg", "utility_at_k.svg", "search_traces.svg", "node_counts.csv"):
            self.assertTrue((report / name).exists(), name)

    def test_optimize_rewards(self):
        """Test each reward source and its call ledger."""
        for reward, executor, predictor in (("gnn", 0, 12), ("ground_truth", 12, 0), ("random", 0, 0)):
            out = self.dir / f"opt-{reward}"
            code, stdout, err = run(["optimize", "--config", str(self.config), "--reward", reward, "--checkpoint",
                                     str(self.checkpoint), "--data", str(self.data), "--out", str(out)])
            self.assertEqual(code, 0, err)
            report = json.loads((out / "report.json").read_text(encoding="utf-8"))
            self.assertEqual(report["executor_calls"], executor)
            self.assertEqual(report["predictor_calls"], predictor)
            self.assertEqual(report["evaluations"], 4)
            self.assertNotIn("seconds", report)

    def test_optimize_from_script(self):
        """Test a starting workflow read from a script."""
        script = self.dir / "start.wf"
        script.write_text(SCRIPT, encoding="utf-8")
        out = self.dir / "opt-script"
        code, _, err = run(["optimize", "--config", str(self.config), "--reward", "ground_truth", "--workflow",
                            str(script), "--out", str(out)])
        self.assertEqual(code, 0, err)
        report = json.loads((out / "report.json").read_text(encoding="utf-8"))
        self.assertTrue(report["best_workflow"]["id"].startswith("start-c"))

    def test_gnn_reward_needs_checkpoint(self):
        """Test the gnn reward without a checkpoint is a configuration error."""
        code, _, err = run(["optimize", "--config", str(self.config), "--reward", "gnn", "--data", str(self.data),
                            "--out", str(self.dir / "opt-missing")])
        self.assertEqual(code, 2)
        self.assertIn("error: ConfigError", err)

    def test_eval_dimension_mismatch(self):
        """Test evaluating with a config of another width names the dimension."""
        wide = self.dir / "wide.json"
        wide.write_text(json.dumps({"embedding": {"dim": 32}, "predictor": {"input_dim": 32}}), encoding="utf-8")
        code, _, err = run(["eval", "--config", str(wide), "--checkpoint", str(self.checkpoint), "--data",
                            str(self.data), "--out", str(self.dir / "eval-wide")])
        self.assertEqual(code, 2)
        self.assertIn("32", err)
        self.assertIn("16", err)


class TestExtract(unittest.TestCase):
    """Test graph extraction from scripts."""

    def test_extract(self):
        """Test scripts become one graph file."""
        with tempfile.TemporaryDirectory() as tmp:
            script = Path(tmp) / "flow.wf"
            script.write_text(SCRIPT, encoding="utf-8")
            code, stdout, _ = run(["extract", str(script), "--out", tmp])
            self.assertEqual(code, 0)
            self.assertIn("extracted 1 workflows", stdout)
            record = json.loads((Path(tmp) / "graphs.jsonl").read_text(encoding="utf-8").splitlines()[0])
        self.assertEqual(record["id"], "flow")
        self.assertEqual(record["edges"], [[1, 2]])

    def test_syntax_error_exit_code(self):
        """Test a broken script exits with the validation code."""
        with tempfile.TemporaryDirectory() as tmp:
            script = Path(tmp) / "broken.wf"
            script.write_text('x1 = agent("A" instruction="a")(task)\n', encoding="utf-8")
            code, _, err = run(["extract", str(script), "--out", tmp])
        self.assertEqual(code, 4)
        self.assertIn("error: ScriptSyntaxError", err)


class TestArguments(unittest.TestCase):
    """Test argument handling."""

    def test_flag_overrides(self):
        """Test flags become nested config overrides."""
        args = build_parser().parse_args(["train", "--data", "d", "--arch", "gat", "--seed", "4", "--threads", "2"])
        self.assertEqual(flag_overrides(args), {"seed": 4, "threads": 2, "predictor": {"arch": "gat"}})

    def test_missing_dataset(self):
        """Test a missing dataset directory is an I/O error."""
        with tempfile.TemporaryDirectory() as tmp:
            code, _, err = run(["train", "--data", os.path.join(tmp, "absent"), "--out", tmp])
        self.assertEqual(code, 3)
        self.assertIn("error: DataIoError", err)

    def test_bad_config_value(self):
        """Test invalid config values exit with the configuration code."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.json"
            path.write_text(json.dumps({"predictor": {"layers": 0}}), encoding="utf-8")
            code, _, err = run(["build", "--config", str(path), "--out", tmp])
        self.assertEqual(code, 2)
        self.assertIn("predictor.layers", err)

    def test_default_seed_workflow(self):
        """Test the fallback starting workflow is a single agent."""
        self.assertEqual(default_seed_workflow().num_nodes, 1)


class TestSubprocess(unittest.TestCase):
    """Test the module as a separate process."""

    def _run(self, command: str) -> Tuple[str, int]:
        output, status = pexpect.run(f"{sys.executable} -m workflow_predictor.main {command}",
                                     cwd=str(ROOT), withexitstatus=True, encoding="utf-8", timeout=120)
        return output, status

    def test_version(self):
        """Test the version flag exits cleanly."""
        output, status = self._run("--version")
        self.assertEqual(status, 0)
        self.assertIn("0.1.0", output)

    def test_missing_checkpoint(self):
        """Test a missing checkpoint reports an I/O error with exit code 3."""
        with tempfile.TemporaryDirectory() as tmp:
            output, status = self._run(f"eval --checkpoint {tmp}/none.ckpt --data {tmp} --out {tmp}")
        self.assertEqual(status, 3)
        self.assertIn("error: DataIoError", output)


if __name__ == "__main__":
    unittest.main()
