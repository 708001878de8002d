#!/usr/bin/env python3

import unittest
import os
import shutil
import tempfile
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pandas as pd

import sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from cli import main
from model_selection import prescreen
from sim_engine import ScenarioConfig, generate_dataset
from brute_force import brute_force_minimize, objective, random_instance
from survival_data import (SurvivalDataset, build_design, kaplan_meier_weights, read_csv, sort_by_time,
                           standardize_dataset, write_csv)

SETTINGS = {"RELERR_THREADS": "1", "RELERR_LOG_LEVEL": "WARNING", "RELERR_SEED": "2024", "RELERR_TOL": "1e-6"}


@patch.dict(os.environ, SETTINGS)
class TestCommands(unittest.TestCase):
    """Test cases for the command-line front end."""

    def setUp(self):
        """Set up a scratch directory, a scenario file and a small dataset."""
        self.test_dir = Path(tempfile.mkdtemp())
        self.scenario = self.test_dir / "small.env"
        self.scenario.write_text("n=40\np=3\nq=1\ngene_signals=2\ninteraction_signals=1\n")
        self.data_path = self.test_dir / "data.csv"
        dataset, _ = generate_dataset(ScenarioConfig(n=40, p=3, q=1, n_gene_signals=2,
                                                     n_interaction_signals=1, seed=3))
        write_csv(dataset, self.data_path)

    def tearDown(self):
        """Remove the scratch directory."""
        shutil.rmtree(self.test_dir)

    def _out(self, name):
        return str(self.test_dir / name)

    def test_simulate_minimal(self):
        """Test n=10, p=2, q=1 gives ten rows and five columns."""
        scenario = self.test_dir / "tiny.env"
        scenario.write_text("n=10\np=2\nq=1\n")
        self.assertEqual(main(["simulate", str(scenario), "--out", self._out("sim")]), 0)
        frame = pd.read_csv(self.test_dir / "sim" / "data.csv")
        self.assertEqual(frame.shape, (10, 5))
        self.assertEqual(list(frame.columns), ["time", "status", "x1", "z1", "z2"])
        truth = pd.read_csv(self.test_dir / "sim" / "truth.csv")
        self.assertEqual(len(truth), 5)
        self.assertTrue((self.test_dir / "sim" / "manifest.txt").exists())

    def test_simulate_reproducible(self):
        """Test two runs with the same seed write identical data and truth files."""
        for name in ("a", "b"):
            self.assertEqual(main(["simulate", str(self.scenario), "--seed", "11", "--out", self._out(name)]), 0)
        for filename in ("data.csv", "truth.csv"):
            self.assertEqual((self.test_dir / "a" / filename).read_bytes(),
                             (self.test_dir / "b" / filename).read_bytes())

    def test_simulate_several_correlations(self):
        """Test each correlation token gets its own directory."""
        scenario = self.test_dir / "two.env"
        scenario.write_text("n=10\np=3\nq=1\ncorrelation=independent,ar:0.5\n")
        self.assertEqual(main(["simulate", str(scenario), "--out", self._out("multi")]), 0)
        self.assertTrue((self.test_dir / "multi" / "independent" / "data.csv").exists())
        self.assertTrue((self.test_dir / "multi" / "ar_0.5" / "data.csv").exists())

    def test_unknown_correlation(self):
        """Test a bad correlation token exits with status 1."""
        scenario = self.test_dir / "bad.env"
        scenario.write_text("n=10\np=2\nq=1\ncorrelation=spiral\n")
        self.assertEqual(main(["simulate", str(scenario), "--out", self._out("bad")]), 1)

    def test_fit_huge_lambda(self):
        """Test full shrinkage writes a header-only coefficient file."""
        self.assertEqual(main(["fit", str(self.data_path), "--lambda", "1e6", "--out", self._out("fit")]), 0)
        lines = (self.test_dir / "fit" / "coefficients.csv").read_text().splitlines()
        self.assertEqual(lines, ["coordinate_kind,j,k,estimate"])
        diagnostics = (self.test_dir / "fit" / "diagnostics.txt").read_text()
        self.assertIn("active=0", diagnostics)

    def test_fit_hierarchy_refit(self):
        """Test the refit is reported and its support is closed under hierarchy."""
        out = self.test_dir / "refit"
        self.assertEqual(main(["fit", str(self.data_path), "--method", "lpre", "--lambda", "0.01",
                               "--hierarchy-refit", "--out", str(out)]), 0)
        self.assertIn("refitted=True", (out / "diagnostics.txt").read_text())
        frame = pd.read_csv(out / "coefficients.csv")
        selected = set(zip(frame["coordinate_kind"], frame["j"], frame["k"]))
        for kind, j, k in selected:
            if kind == "interaction":
                self.assertIn(("env", j, 0), selected)
                self.assertIn(("gene", 0, k), selected)

    def test_fit_cross_validation(self):
        """Test --cv writes the curve and records K in the manifest."""
        out = self.test_dir / "cv"
        self.assertEqual(main(["fit", str(self.data_path), "--cv", "3", "--grid", "6,0.05", "--out", str(out)]), 0)
        curve = pd.read_csv(out / "cv_curve.csv")
        self.assertEqual(list(curve.columns), ["lambda", "cv_score"])
        self.assertEqual(len(curve), 6)
        self.assertIn("K=3", (out / "manifest.txt").read_text().splitlines())

    def test_fit_prescreen_keeps_original_gene_numbers(self):
        """Test gene indices in the output refer to the input columns."""
        out = self.test_dir / "screened"
        self.assertEqual(main(["fit", str(self.data_path), "--lambda", "0.0001", "--prescreen", "1.0",
                               "--out", str(out)]), 0)
        kept = set(int(k) + 1 for k in prescreen(read_csv(self.data_path), 1.0))
        frame = pd.read_csv(out / "coefficients.csv")
        self.assertTrue(set(frame["k"]) <= kept | {0})

    def test_fit_with_stability(self):
        """Test --stability adds selection frequencies."""
        out = self.test_dir / "stab"
        self.assertEqual(main(["fit", str(self.data_path), "--lambda", "0.05", "--stability", "2,3",
                               "--out", str(out)]), 0)
        frame = pd.read_csv(out / "stability.csv")
        self.assertEqual(len(frame), 7)
        self.assertIn("stability=2,3", (out / "manifest.txt").read_text().splitlines())

    def test_fit_all_censored(self):
        """Test input without events exits with status 1."""
        path = self.test_dir / "censored.csv"
        write_csv(SurvivalDataset([1.0, 2.0, 3.0], [0, 0, 0], np.ones((3, 1)), np.arange(3.0).reshape(3, 1)), path)
        self.assertEqual(main(["fit", str(path), "--lambda", "0.1", "--out", self._out("none")]), 1)

    def test_fit_missing_file(self):
        """Test an unreadable data file exits with status 1."""
        self.assertEqual(main(["fit", self._out("missing.csv"), "--lambda", "0.1", "--out", self._out("x")]), 1)

    def test_fit_standardize_and_prescreen(self):
        """Test --standardize and --prescreen act on the data before fitting."""
        out = self.test_dir / "prepared"
        with patch("cli.standardize_dataset", wraps=standardize_dataset) as scaled, \
                patch("cli.prescreen", wraps=prescreen) as screened:
            self.assertEqual(main(["fit", str(self.data_path), "--lambda", "0.01", "--standardize",
                                   "--prescreen", "1.0", "--out", str(out)]), 0)
        scaled.assert_called_once()
        screened.assert_called_once()
        self.assertEqual(screened.call_args.args[1], 1.0)
        self.assertEqual(len(screened.call_args.args), 2)
        self.assertIn("standardize=True", (out / "manifest.txt").read_text().splitlines())

    def test_fit_matches_oracle(self):
        """Test unpenalized LPRE estimates written by fit agree with a direct minimization."""
        data, _, _ = random_instance(12, n=30)
        path = self.test_dir / "oracle.csv"
        write_csv(data, path)
        out = self.test_dir / "oracle"
        self.assertEqual(main(["fit", str(path), "--method", "lpre", "--lambda", "0", "--out", str(out)]), 0)
        dataset = sort_by_time(read_csv(path))
        design = build_design(dataset.env, dataset.genes)
        weights = kaplan_meier_weights(dataset.status)
        oracle, _ = brute_force_minimize(objective("lpre", design.rows, dataset.times, weights.weights), design.d)
        position = {(key.kind.value, key.j, key.k): idx for idx, key in enumerate(design.index_map)}
        estimate = np.zeros(design.d)
        for row in pd.read_csv(out / "coefficients.csv").itertuples(index=False):
            estimate[position[(row.coordinate_kind, row.j, row.k)]] = row.estimate
        np.testing.assert_allclose(estimate, oracle, atol=1e-3)

    def test_stability_drop_zero(self):
        """Test dropping nobody gives 0/1 frequencies."""
        out = self.test_dir / "stability"
        self.assertEqual(main(["stability", str(self.data_path), "--lambda", "0.05", "--stability", "3,0",
                               "--method", "ls", "--out", str(out)]), 0)
        frame = pd.read_csv(out / "stability.csv")
        self.assertTrue(set(frame["frequency"]) <= {0.0, 1.0})

    def test_compare(self):
        """Test the comparison table has one row and column per method."""
        out = self.test_dir / "compare"
        self.assertEqual(main(["compare", str(self.data_path), "--methods", "lare,lpre", "--cv", "3",
                               "--grid", "5,0.05", "--out", str(out)]), 0)
        table = pd.read_csv(out / "comparison.csv", index_col=0)
        self.assertEqual(list(table.index), ["lare", "lpre"])
        self.assertEqual(list(table.columns), ["lare", "lpre"])

    def test_bench(self):
        """Test two replicates of two methods write metrics and summary."""
        out = self.test_dir / "bench"
        self.assertEqual(main(["bench", str(self.scenario), "--methods", "lare,ls", "-R", "2", "--cv", "3",
                               "--grid", "5,0.05", "--out", str(out)]), 0)
        metrics = pd.read_csv(out / "metrics.csv")
        self.assertEqual(list(metrics.columns), ["method", "scenario", "replicate", "auc", "se", "tpr", "fpr"])
        self.assertEqual(len(metrics), 4)
        summary = pd.read_csv(out / "summary.csv")
        self.assertEqual(sorted(summary["method"]), ["lare", "ls"])
        self.assertTrue(np.all(summary["replicates"] + summary["failed"] == 2))


@patch.dict(os.environ, SETTINGS)
class TestArguments(unittest.TestCase):
    """Test cases for argument validation."""

    def _exit_code(self, argv):
        with patch("sys.stderr"):
            with self.assertRaises(SystemExit) as raised:
                main(argv)
        return raised.exception.code

    def test_tuning_required(self):
        """Test fit needs exactly one of --lambda and --cv."""
        self.assertEqual(self._exit_code(["fit", "data.csv"]), 2)
        self.assertEqual(self._exit_code(["fit", "data.csv", "--lambda", "0.1", "--cv", "5"]), 2)

    def test_malformed_values(self):
        """Test malformed grids, pairs and methods are usage errors."""
        self.assertEqual(self._exit_code(["fit", "data.csv", "--lambda", "0.1", "--grid", "100"]), 2)
        self.assertEqual(self._exit_code(["fit", "data.csv", "--lambda", "0.1", "--stability", "a,b"]), 2)
        self.assertEqual(self._exit_code(["fit", "data.csv", "--lambda", "0.1", "--method", "huber"]), 2)
        self.assertEqual(self._exit_code(["bench", "s.env", "--methods", "lare,cox"]), 2)

    def test_command_required(self):
        """Test a missing subcommand is a usage error."""
        self.assertEqual(self._exit_code([]), 2)


if __name__ == "__main__":
    unittest.main()
