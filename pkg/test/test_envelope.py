import math
import sys
import unittest
from pathlib import Path

import numpy as np
import pytest

# Insert pythonpath into the front of the PATH environment variable, before importing anything from project/
pythonpath = str(Path(__file__).parent.parent)
try:
    sys.path.index(pythonpath)
except ValueError:
    sys.path.insert(0, pythonpath)

from project.envelope import (
    SUITES,
    check_atom_split,
    check_bar_substitution,
    check_classical_coincidence,
    check_domination,
    check_monotone,
    check_sandwich,
    generalized_snell,
    lebesgue_example,
    run_property_suite,
)
from project.instances import ordered_pair, sandwich_pair
from project.lattice import AdaptedProcess, MonotoneMeasure
from project.penalize import LowerData, PenaltySchedule, iterate_to_limit, solve_penalized
from project.snell import snell_envelope
from project.utils import Config, HypothesisError
from test.utils import constant_data, depth_two_obstacle, make_model, random_data, terminal_atom_data

pytestmark = pytest.mark.functional


class TestGeneralizedSnell(unittest.TestCase):
    def test_constants(self):
        """L = l = xi = 1.5 with delta_t = t: Y = 1.5, no push, every certificate passes"""
        d = constant_data(make_model(4, horizon=1.0), 1.5)
        result = generalized_snell(d)
        self.assertTrue(result.passed)
        self.assertEqual(result.root_value, 1.5)
        self.assertEqual(result.solution.k_plus.total_mass(), 0.0)
        self.assertEqual(
            set(result.certificates), {"skorokhod", "minimality", "smallest_in_class", "supermartingale"}
        )

    def test_zero_measure_is_classical(self):
        l = depth_two_obstacle()  # noqa: E741
        d = LowerData(
            terminal=l.terminal,
            lower_rcll=l,
            lower_measurable=AdaptedProcess.zeros(l.model),
            measure=MonotoneMeasure.zero(l.model),
        )
        result = generalized_snell(d)
        self.assertTrue(result.passed)
        self.assertEqual(result.envelope.max_abs_diff(snell_envelope(l)), 0.0)
        self.assertEqual(result.root_value, 1.0)

    def test_random_instances_are_certified(self):
        for seed in range(8):
            d = random_data(seed, steps=int(2 + seed % 6))
            result = generalized_snell(d, trials=10, seed=seed)
            self.assertTrue(result.passed, result.certificates)
            self.assertLessEqual(result.effective_barrier.max_excess_over(result.envelope), Config.CONSTRAINT_TOL)
            self.assertLessEqual(result.solution.diagnostics.limit_gap, Config.CONSTRAINT_TOL)

    def test_envelope_is_the_last_iterate(self):
        """n_max = 16 on the terminal atom: Y(T-) = 16 / 17, one 17th short of the limit"""
        result = generalized_snell(terminal_atom_data(), schedule=PenaltySchedule(1, 2, 16))
        for k in range(4):
            np.testing.assert_allclose(result.envelope.values[k], 16 / 17, rtol=0, atol=1e-15)
        self.assertAlmostEqual(result.solution.diagnostics.limit_gap, 1 / 17, delta=1e-15)
        self.assertFalse(result.solution.diagnostics.converged)
        self.assertFalse(result.certificates["supermartingale"].passed)


class TestCorollaryChecks(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(2024)

    def test_bar_substitution(self):
        for seed in range(10):
            self.assertTrue(check_bar_substitution(random_data(seed)).passed)

    def test_monotone(self):
        for seed in range(10):
            d = random_data(seed)
            report = check_monotone(d, ordered_pair(d, self.rng))
            self.assertTrue(report.passed, report)

    def test_monotone_precondition(self):
        d = random_data(1)
        with self.assertRaises(HypothesisError):
            check_monotone(d, d.replace(terminal=d.terminal + 1.0))

    def test_domination(self):
        for seed in range(10):
            self.assertTrue(check_domination(random_data(seed)).passed)

    def test_domination_equality_case(self):
        d = random_data(3)
        d = d.replace(lower_measurable=d.lower_rcll - 0.2)
        report = check_domination(d)
        self.assertTrue(report.passed)
        self.assertEqual(report.residual, 0.0)
        self.assertIn("equality case", report.detail)

    def test_sandwich(self):
        for seed in range(10):
            d = random_data(seed)
            y = iterate_to_limit(d).y
            report = check_sandwich(d, sandwich_pair(d, y, self.rng))
            self.assertTrue(report.passed, report)

    def test_sandwich_precondition(self):
        d = random_data(2)
        with self.assertRaises(HypothesisError):
            check_sandwich(d, d.replace(lower_rcll=d.lower_rcll - 1.0))


class TestClassicalChecks(unittest.TestCase):
    def test_coincidence_with_brute_force(self):
        report = check_classical_coincidence(depth_two_obstacle())
        self.assertTrue(report.passed)
        self.assertIn("brute-force", report.detail)

    def test_coincidence_on_deeper_trees(self):
        rng = np.random.default_rng(9)
        model = make_model(12, horizon=1.0)
        lower = AdaptedProcess(model, tuple(rng.normal(size=k + 1) for k in range(13)))
        report = check_classical_coincidence(lower)
        self.assertTrue(report.passed)
        self.assertNotIn("brute-force", report.detail)

    def test_atom_split(self):
        for seed in range(10):
            report = check_atom_split(random_data(seed))
            self.assertTrue(report.passed, report)

    def test_atom_split_flags_a_low_left_limit(self):
        """A finite-n iterate stays below l_T before the atom"""
        d = terminal_atom_data()
        report = check_atom_split(d, solution=solve_penalized(1, d))
        self.assertFalse(report.passed)
        self.assertAlmostEqual(report.residual, 0.5, places=12)

    def test_atom_split_uses_the_last_iterate(self):
        """The left limit before the atom is n_max / (1 + n_max) for the schedule in Config"""
        d = terminal_atom_data()
        c = Config()
        c.N_MAX = 1
        report = check_atom_split(d, c)
        self.assertFalse(report.passed)
        self.assertAlmostEqual(report.residual, 0.5, places=12)
        c.N_MAX = 2**10
        report = check_atom_split(d, c)
        self.assertFalse(report.passed)
        self.assertAlmostEqual(report.residual, 1.0 / 1025.0, places=12)
        report = check_atom_split(d)
        self.assertTrue(report.passed, report)
        self.assertAlmostEqual(report.residual, 1.0 / (1.0 + Config.N_MAX), places=12)


class TestLebesgueExample(unittest.TestCase):
    def test_envelope_of_the_obstacle(self):
        """l >= L and dt-charges everywhere: S = classical envelope of l with terminal xi"""
        rng = np.random.default_rng(17)
        model = make_model(6, horizon=1.0)
        obstacle = AdaptedProcess(model, tuple(rng.uniform(0.0, 1.0, k + 1) for k in range(7)))
        xi = rng.uniform(0.0, 1.0, 7)
        result = lebesgue_example(obstacle - 1.0, obstacle, xi)
        self.assertTrue(result.passed)
        self.assertIn("lebesgue", result.certificates)
        classical = snell_envelope(obstacle.with_terminal(xi)).root
        self.assertLessEqual(result.root_value, classical + 1e-12)
        self.assertGreaterEqual(result.root_value, classical - result.solution.diagnostics.limit_gap - 1e-12)
        self.assertLess(result.solution.diagnostics.limit_gap, Config.CONSTRAINT_TOL)

    def test_requires_lower_below_obstacle(self):
        obstacle = AdaptedProcess.constant(make_model(3), 0.0)
        with self.assertRaises(HypothesisError):
            lebesgue_example(obstacle + 1.0, obstacle, np.zeros(4))


class TestPropertySuite:
    @pytest.mark.parametrize("suite", SUITES)
    def test_small_random_suites(self, suite):
        reports = run_property_suite(suite, instances=3, seed=5, depth=5)
        assert reports
        failures = [r for r in reports if not r.passed and not r.rejected]
        assert failures == []
        assert all(r.suite == suite for r in reports)

    def test_violated_terminal_is_rejected(self):
        reports = run_property_suite("comparison", instances=4, seed=1, depth=4, violate="xi")
        assert len(reports) == 4
        assert all(r.rejected and math.isnan(r.residual) for r in reports)
        assert all("(a)" in r.detail for r in reports)

    def test_base_instance_only(self):
        base = constant_data(make_model(4, horizon=1.0), 1.5)
        reports = run_property_suite("all", instances=0, base=base)
        assert {r.suite for r in reports} == set(SUITES)
        assert all(r.passed for r in reports)
        assert all(r.instance == 0 for r in reports)

    def test_unknown_suite(self):
        with pytest.raises(ValueError):
            run_property_suite("nonsense")


@pytest.mark.slow
class TestPropertySuiteAtScale:
    def test_corollary_on_a_hundred_instances(self):
        reports = run_property_suite("corollary", instances=100, seed=23, depth=6)
        assert {r.instance for r in reports} == set(range(100))
        failures = [r for r in reports if not r.passed and not r.rejected]
        assert failures == []

    def test_atom_split_on_a_hundred_instances(self):
        reports = run_property_suite("atom-split", instances=100, seed=29, depth=6)
        assert len(reports) == 100
        assert all(r.passed for r in reports)
