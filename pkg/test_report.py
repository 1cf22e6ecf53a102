import json
import math
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
import pandas as pd
from numpy.testing import assert_allclose, assert_array_equal

from dataset import build_dataset, split_dataset
from errors import IncompatibleModelsError
from eval_metrics import UniformModel, distance_distribution, sample_choices
from models import CityConfig, EstimationResult, NlParams, Oracle, PopulationConfig, SimulationConfig, SplitInfo, TrainHistory
from nested_logit import NestedLogitModel
from report import (
    TABLE_NAMES, build_report, check_compatible, distance_figure, distance_probabilities, estimation_table,
    evaluate_model, histogram_edges, history_table, write_figure,
)
from synthgen import OracleModel, simulate_dataset


def make_result(**overrides):
    fields = dict(
        params=NlParams(alpha=[0.1] * 6, lam=1.5, beta_a=0.6, beta_acr=-0.1),
        std_errors=[0.05] * 6 + [0.25, 0.02, 0.01],
        t_values=[2.0] * 6 + [6.0, 30.0, -10.0],
        t_against_1=2.0,
        ll_final=-900.0, ll_null=-1000.0, ll_start=-1000.0, rho_squared=0.1,
        n_obs=300, converged=True, iterations=17,
    )
    fields.update(overrides)
    return EstimationResult(**fields)


class TestTables(unittest.TestCase):
    def test_estimation_table_layout(self):
        """Test that the estimation table lists nine parameter rows and then the likelihood footer."""
        frame = estimation_table(make_result(ll_validation=-300.0, n_validation=100))
        self.assertEqual(list(frame.columns), ["name", "value", "std_error", "t_value", "t_against_1"])
        self.assertEqual(frame["name"].iloc[6], "lambda")
        self.assertEqual(frame["t_against_1"].iloc[6], 2.0)
        self.assertTrue(math.isnan(frame["t_against_1"].iloc[7]))
        footer = dict(zip(frame["name"].iloc[9:], frame["value"].iloc[9:]))
        self.assertEqual(footer["LL(beta) validation"], -300.0)
        self.assertEqual(footer["converged"], 1)

    def test_estimation_table_without_hessian(self):
        """Test that missing standard errors leave blank cells."""
        frame = estimation_table(make_result(std_errors=None, t_values=None, t_against_1=None, hessian_ok=False))
        self.assertTrue(frame["std_error"].iloc[:9].isna().all())

    def test_history_table(self):
        """Test that the history table numbers epochs from 1."""
        frame = history_table(TrainHistory(train_ll=[-5.0, -4.0, -3.5], val_ll=[-2.0, -1.8, -1.7]))
        self.assertEqual(list(frame["epoch"]), [1, 2, 3])
        self.assertEqual(len(frame), 3)


class TestHistograms(unittest.TestCase):
    def test_edges_start_at_zero(self):
        """Test that the 50 histogram bins start at zero and increase."""
        edges = histogram_edges(np.random.default_rng(0).exponential(2.0, size=500))
        self.assertEqual(len(edges), 51)
        self.assertEqual(edges[0], 0.0)
        self.assertTrue(np.all(np.diff(edges) > 0))

    def test_constant_distances(self):
        """Test that all-zero distances still give positive bin widths."""
        edges = histogram_edges(np.zeros(10))
        self.assertEqual(edges[1], 1.0)

    def test_overflow_goes_to_last_bin(self):
        """Test that distances beyond the last edge are counted in the last bin."""
        edges = np.arange(6.0)
        probs = distance_probabilities(np.array([0.5, 1.5, 100.0, 4.5]), edges)
        assert_allclose(probs, [0.25, 0.25, 0.0, 0.0, 0.5])
        self.assertAlmostEqual(float(probs.sum()), 1.0)

    def test_failed_export_is_skipped(self):
        """Test that a figure that cannot be written returns False."""
        fig = distance_figure({}, np.arange(3.0))
        with tempfile.TemporaryDirectory() as tmp:
            self.assertFalse(write_figure(fig, Path(tmp) / "missing" / "figure.svg"))


class TestBuildReport(unittest.TestCase):
    """End-to-end evaluation of small models on a simulated dataset."""

    def setUp(self):
        config = SimulationConfig(city=CityConfig(grid_rows=3, grid_cols=3), population=PopulationConfig(n_individuals=200))
        self.dataset = simulate_dataset(config, 1)
        self.split = SplitInfo(fraction=0.75, seed=0)
        self.train, self.val = split_dataset(self.dataset, self.split.fraction, self.split.seed)
        self._tmp = tempfile.TemporaryDirectory()
        self.out = Path(self._tmp.name) / "report"
        # Skip kaleido image export; tables and manifest are still written
        patcher = mock.patch("report.write_figure", return_value=False)
        patcher.start()
        self.addCleanup(patcher.stop)

    def tearDown(self):
        self._tmp.cleanup()

    def test_tables_and_manifest(self):
        """Test that every table and the manifest are written and the oracle is closest on validation."""
        models = [OracleModel(Oracle(), dataset_fingerprint=self.dataset.fingerprint), UniformModel()]
        report = build_report(models, self.train, self.val, self.out, self.split, draws=10, seed=3)
        self.assertEqual(sorted(report.tables), sorted(TABLE_NAMES))
        for filename in report.tables.values():
            self.assertTrue((self.out / filename).is_file())
        manifest = json.loads((self.out / "manifest.json").read_text())
        self.assertEqual(manifest["tables"], report.tables)
        self.assertNotIn("created_at", manifest["metadata"])
        self.assertEqual(manifest["metadata"]["draws_per_individual"], 10)

        results = pd.read_csv(self.out / "results.csv")
        validation = results[(results["split"] == "validation") & (results["measure"] == "weighted")].iloc[0]
        self.assertEqual(validation["closest"], "Oracle")
        self.assertAlmostEqual(validation["Uniform"], -math.log(9), places=12)

    def test_self_comparison_ties_to_first(self):
        """Test that identical models get identical statistics and the first listed is closest."""
        model = NestedLogitModel(NlParams(beta_a=0.5), name="A")
        twin = NestedLogitModel(NlParams(beta_a=0.5), name="B")
        build_report([model, twin], self.train, self.val, self.out, self.split, draws=5)
        ks = pd.read_csv(self.out / "ks-test.csv")
        assert_array_equal(ks["A"], ks["B"])
        self.assertEqual(ks["closest"].iloc[0], "A")
        pearson = pd.read_csv(self.out / "pearson-coff.csv")
        self.assertTrue((pearson["closest"] == "A").all())

    def test_ks_table_covers_validation_and_all_individuals(self):
        """Test that ks-test.csv holds a validation block followed by an all-individuals block."""
        models = [OracleModel(Oracle()), UniformModel()]
        evals_report = build_report(models, self.train, self.val, self.out, self.split, draws=4, seed=2)
        self.assertIn("ks-test", evals_report.tables)
        ks = pd.read_csv(self.out / "ks-test.csv")
        self.assertEqual(list(ks.columns), ["population", "measure", "Oracle", "Uniform", "closest"])
        self.assertEqual(list(ks["population"]), ["validation", "validation", "all", "all"])
        self.assertEqual(list(ks["measure"]), ["statistic", "p_value", "statistic", "p_value"])
        self.assertTrue(((ks["Oracle"] >= 0) & (ks["Oracle"] <= 1)).all())

    def test_all_data_draws_extend_the_validation_draws(self):
        """Test that the validation sample is the validation rows of the whole-dataset draws."""
        model = OracleModel(Oracle())
        data_sample = distance_distribution(self.val.work, self.val)
        evaluation = evaluate_model(model, self.train, self.val, data_sample, draws=3, seed=5)
        draws_all = sample_choices(model, self.dataset, 3, seed=5)
        expected = distance_distribution(draws_all[self.val.rows], self.val)
        assert_array_equal(evaluation.sample.distances, expected.distances)
        self.assertEqual(evaluation.ks_all.n1, 3 * self.dataset.n_individuals)
        self.assertEqual(evaluation.ks_all.n2, self.dataset.n_individuals)
        self.assertEqual(evaluation.ks.n2, self.val.n_individuals)

    def test_constant_attribute_leaves_an_empty_correlation(self):
        """Test that an attribute with no variation is blank in ind-pearson instead of failing the report."""
        people = [p.model_copy(update={"employment": 1}) for p in self.dataset.individuals]
        dataset = build_dataset(self.dataset.zones, people, self.dataset.accessibility)
        train, val = split_dataset(dataset, self.split.fraction, self.split.seed)
        with self.assertLogs("workloc.eval_metrics", level="WARNING"):
            build_report([UniformModel(), OracleModel(Oracle())], train, val, self.out, self.split, draws=3)
        table = pd.read_csv(self.out / "ind-pearson.csv").set_index("attribute")
        self.assertTrue(math.isnan(table.loc["employment", "Uniform_stat"]))
        self.assertFalse(math.isnan(table.loc["gender", "Uniform_stat"]))

    def test_segment_tables(self):
        """Test the segment labels of the gender and car KS tables."""
        build_report([UniformModel(), OracleModel(Oracle())], self.train, self.val, self.out, self.split, draws=5)
        ks_sex = pd.read_csv(self.out / "ks-sex.csv")
        self.assertEqual(list(ks_sex["segment"].unique()), ["Male", "Female"])
        ks_car = pd.read_csv(self.out / "ks-car.csv")
        self.assertEqual(list(ks_car["segment"].unique()), ["Car - Yes", "Car - No"])

    def test_fingerprint_mismatch_writes_nothing(self):
        """Test that a model fitted on other data aborts before any file is written."""
        stale = OracleModel(Oracle(), dataset_fingerprint="0" * 64)
        with self.assertRaises(IncompatibleModelsError):
            build_report([stale, UniformModel()], self.train, self.val, self.out, self.split)
        self.assertFalse(self.out.exists())

    def test_duplicate_names(self):
        """Test that two models with the same name are rejected."""
        with self.assertRaises(IncompatibleModelsError):
            check_compatible([UniformModel(), UniformModel()], self.val, self.split)

    def test_split_difference_only_warns(self):
        """Test that a model trained under another split only logs a warning."""
        result = make_result(split=SplitInfo(fraction=0.5, seed=9), dataset_fingerprint=self.dataset.fingerprint)
        model = NestedLogitModel(result.params, result=result)
        with self.assertLogs("workloc.report", level="WARNING"):
            check_compatible([model], self.val, self.split)

    def test_timestamps_are_opt_in(self):
        """Test that created_at appears only when asked for."""
        build_report([UniformModel()], self.train, self.val, self.out, self.split, draws=2, timestamps=True)
        manifest = json.loads((self.out / "manifest.json").read_text())
        self.assertIn("created_at", manifest["metadata"])


if __name__ == "__main__":
    unittest.main()
