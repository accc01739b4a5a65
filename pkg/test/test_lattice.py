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

from project.instances import random_measure
from project.lattice import (
    AdaptedProcess,
    MonotoneMeasure,
    TreeModel,
    absolutely_continuous,
    atom_part,
    centred_brownian_increment,
    check_same_model,
    conditional_expectation,
    decompose_atoms,
    doob_decomposition,
    enumerate_paths,
    equivalent,
    expectation_at_root,
    is_supermartingale,
    martingale_rep_coefficient,
    path_expectation,
    singular,
)
from project.snell import snell_envelope
from project.utils import LatticeError
from test.utils import make_model

pytestmark = pytest.mark.unit


class TestConditionalExpectation(unittest.TestCase):
    def setUp(self):
        self.model = make_model(1)

    def test_symmetric_average(self):
        """E[x | F_0] for x = (down: 0, up: 2) is 1"""
        np.testing.assert_array_equal(conditional_expectation([0.0, 2.0], self.model), [1.0])
        np.testing.assert_array_equal(conditional_expectation([1.0, 3.0], self.model), [2.0])

    def test_constant_is_exact(self):
        model = make_model(6, horizon=1.0, p=0.5)
        for k in range(1, 7):
            np.testing.assert_array_equal(
                conditional_expectation(np.full(k + 1, 0.1), model), np.full(k, 0.1)
            )

    def test_biased_tree(self):
        model = make_model(1, p=0.25)
        self.assertAlmostEqual(conditional_expectation([4.0, 8.0], model)[0], 5.0, places=14)

    def test_bad_length(self):
        """A single value is not a step 1..N slice"""
        with self.assertRaises(LatticeError):
            conditional_expectation([1.0], self.model)
        with self.assertRaises(LatticeError):
            conditional_expectation([1.0, 2.0, 3.0], self.model)


class TestMartingaleRepresentation(unittest.TestCase):
    def test_linear_payoff_slope(self):
        """dt = 1, x = (down: 0, up: 2) gives Z = 1"""
        np.testing.assert_array_equal(martingale_rep_coefficient([0.0, 2.0], make_model(1)), [1.0])

    def test_constant_has_no_volatility(self):
        np.testing.assert_array_equal(martingale_rep_coefficient([3.0, 3.0, 3.0], make_model(2)), [0.0, 0.0])

    def test_brownian_has_unit_volatility(self):
        model = make_model(5, horizon=1.0)
        for k in range(model.steps):
            z = martingale_rep_coefficient(model.brownian_at(k + 1), model)
            np.testing.assert_allclose(z, np.ones(k + 1), rtol=0, atol=1e-14)

    def test_representation_for_any_p(self):
        """x_child = E[x | F_k] + Z * (centred dB) on both children"""
        model = make_model(4, horizon=1.0, p=0.3)
        rng = np.random.default_rng(7)
        for k in range(model.steps):
            x = rng.normal(size=k + 2)
            e = conditional_expectation(x, model)
            z = martingale_rep_coefficient(x, model)
            up, down = centred_brownian_increment(model, k)
            np.testing.assert_allclose(e + z * up, x[1:], atol=1e-13)
            np.testing.assert_allclose(e + z * down, x[:-1], atol=1e-13)


class TestSupermartingale(unittest.TestCase):
    def test_constant_and_brownian(self):
        model = make_model(5)
        self.assertTrue(is_supermartingale(AdaptedProcess.constant(model, 2.0)).passed)
        self.assertTrue(is_supermartingale(model.brownian()).passed)

    def test_squared_brownian_is_not(self):
        """E[B_{k+1}^2 | F_k] = B_k^2 + dt, so the excess is dt = 1"""
        model = make_model(4)
        b = model.brownian()
        report = is_supermartingale(b * b)
        self.assertFalse(report.passed)
        self.assertAlmostEqual(report.worst_excess, 1.0, places=12)
        self.assertIsNotNone(report.worst_node)

    def test_snell_envelope_is(self):
        model = make_model(6, horizon=1.0)
        rng = np.random.default_rng(3)
        l = AdaptedProcess(model, tuple(rng.uniform(size=k + 1) for k in range(7)))  # noqa: E741
        self.assertTrue(is_supermartingale(snell_envelope(l)).passed)
        self.assertTrue(doob_decomposition(snell_envelope(l)).is_decreasing_drift)


class TestMeasures(unittest.TestCase):
    def setUp(self):
        self.model = make_model(3)

    def _measure(self, k, j, mass=1.0):
        increments = [np.zeros(i + 1) for i in range(self.model.steps)]
        increments[k][j] = mass
        return MonotoneMeasure(self.model, tuple(increments))

    def test_singular(self):
        self.assertTrue(singular(self._measure(1, 0), self._measure(1, 1)))
        self.assertFalse(singular(self._measure(2, 1), self._measure(2, 1, 0.5)))
        zero = MonotoneMeasure.zero(self.model)
        self.assertTrue(singular(zero, MonotoneMeasure.lebesgue(self.model)))

    def test_singular_is_symmetric_and_additive(self):
        """a _|_ b iff b _|_ a; a _|_ (b + c) iff a _|_ b and a _|_ c"""
        rng = np.random.default_rng(8)
        model = make_model(5)
        seen = 0
        for _ in range(300):
            a, b, c = (random_measure(model, rng, zero_share=0.85, atoms=False) for _ in range(3))
            self.assertEqual(singular(a, b), singular(b, a))
            self.assertEqual(singular(a, b + c), singular(a, b) and singular(a, c))
            seen += singular(a, b) and singular(a, c)
        self.assertGreater(seen, 0)

    def test_absolute_continuity(self):
        b = MonotoneMeasure.lebesgue(self.model)
        a = b.scale(0.5)
        self.assertTrue(equivalent(a, b))
        self.assertFalse(absolutely_continuous(self._measure(1, 0), self._measure(1, 1)))
        self.assertTrue(absolutely_continuous(MonotoneMeasure.zero(self.model), self._measure(2, 2)))

    def test_decompose_without_atoms(self):
        d = MonotoneMeasure.lebesgue(self.model)
        continuous, atoms = decompose_atoms(d)
        self.assertEqual(atoms, [])
        for a, b in zip(continuous.increments, d.increments):
            np.testing.assert_array_equal(a, b)

    def test_decompose_terminal_atom(self):
        d = MonotoneMeasure.from_atoms(self.model, {3: 1.0})
        continuous, atoms = decompose_atoms(d)
        self.assertEqual(atoms, [3])
        self.assertTrue(continuous.is_zero())

    def test_decompose_recombines_exactly(self):
        model = make_model(4, horizon=1.0)
        d = MonotoneMeasure.from_atoms(model, {3: 0.7}, base=MonotoneMeasure.lebesgue(model))
        continuous, atoms = decompose_atoms(d)
        self.assertEqual(atoms, [3])
        recombined = continuous + atom_part(d)
        for a, b in zip(recombined.increments, d.increments):
            np.testing.assert_array_equal(a, b)

    def test_rejects_bad_increments(self):
        with self.assertRaises(LatticeError):
            MonotoneMeasure(self.model, (np.zeros(1), np.array([0.0, -1.0]), np.zeros(3)))
        with self.assertRaises(LatticeError):
            MonotoneMeasure(self.model, (np.zeros(1), np.zeros(2)))
        with self.assertRaises(LatticeError):
            MonotoneMeasure(self.model, MonotoneMeasure.zero(self.model).increments, frozenset({4}))

    def test_total_mass_of_lebesgue(self):
        model = make_model(8, horizon=2.0)
        self.assertAlmostEqual(MonotoneMeasure.lebesgue(model).total_mass(), 2.0, places=12)


class TestAdaptedProcess:
    """Plain pytest class for the process container"""

    def test_shapes_and_nan(self):
        model = make_model(2)
        with pytest.raises(LatticeError):
            AdaptedProcess(model, (np.zeros(1), np.zeros(2)))
        with pytest.raises(LatticeError):
            AdaptedProcess(model, (np.zeros(1), np.zeros(3), np.zeros(3)))
        with pytest.raises(LatticeError):
            AdaptedProcess(model, (np.zeros(1), np.array([0.0, np.nan]), np.zeros(3)))

    def test_values_are_read_only(self):
        x = AdaptedProcess.constant(make_model(2), 1.0)
        with pytest.raises(ValueError):
            x.values[1][0] = 5.0

    def test_from_function_sees_brownian(self):
        model = make_model(3, horizon=1.0)
        x = AdaptedProcess.from_function(model, lambda k, t, b: b)
        for k in range(4):
            np.testing.assert_array_equal(x.values[k], model.brownian_at(k))

    def test_arithmetic(self):
        model = make_model(2)
        x = AdaptedProcess.constant(model, 2.0)
        y = model.brownian()
        assert (x + y - y).max_abs_diff(x) == 0.0
        assert (2.0 * x).root == 4.0
        assert x.maximum(y).max_excess_over(x.maximum(y)) == 0.0
        assert (-x).root == -2.0

    def test_model_mismatch(self):
        a = AdaptedProcess.constant(make_model(2), 1.0)
        b = AdaptedProcess.constant(make_model(3), 1.0)
        with pytest.raises(LatticeError):
            a + b
        with pytest.raises(LatticeError):
            check_same_model(a, b)


class TestTreeModel:
    def test_probabilities_sum_to_one(self):
        model = make_model(10, horizon=1.0, p=0.3)
        for k in range(11):
            assert abs(model.probabilities_at(k).sum() - 1.0) < 1e-12

    def test_tower_property(self):
        model = make_model(6, horizon=1.0, p=0.4)
        rng = np.random.default_rng(11)
        x = AdaptedProcess(model, tuple(rng.normal(size=k + 1) for k in range(7)))
        for k in range(7):
            assert abs(expectation_at_root(x, k) - path_expectation(x, k)) < 1e-12

    def test_invalid_models(self):
        with pytest.raises(LatticeError):
            TreeModel.build(0)
        with pytest.raises(LatticeError):
            TreeModel.build(3, horizon=-1.0)
        with pytest.raises(LatticeError):
            TreeModel.build(3, up_probability=1.5)
        with pytest.raises(LatticeError):
            make_model(3).check_step(4)

    def test_path_enumeration(self):
        paths = enumerate_paths(make_model(3, p=0.3), max_depth=4)
        assert paths.nodes.shape == (8, 4)
        assert abs(paths.probabilities.sum() - 1.0) < 1e-12
        assert (np.diff(paths.nodes, axis=1) >= 0).all()
        with pytest.raises(LatticeError):
            enumerate_paths(make_model(5), max_depth=4)

    def test_centred_increment_symmetric(self):
        model = make_model(4, horizon=1.0)
        up, down = centred_brownian_increment(model, 2)
        np.testing.assert_allclose(up, 0.5)
        np.testing.assert_allclose(down, -0.5)
