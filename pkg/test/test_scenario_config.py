import json
import sys
import tempfile
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

from project.scenario_config import (
    PRESETS,
    UnderlyingSpec,
    build_process,
    compile_expression,
    load_scenario,
    parse_scenario,
)
from project.utils import Config, ConfigError
from test.utils import make_model

pytestmark = pytest.mark.unit


class TestPresets(unittest.TestCase):
    def test_every_preset_parses(self):
        for name in PRESETS:
            config = parse_scenario({"preset": name})
            self.assertEqual(config.preset, name)
            self.assertIsNotNone(config.data)

    def test_american_put(self):
        config = load_scenario("american-put")
        self.assertEqual(config.model.steps, 64)
        self.assertEqual(config.data.lower_rcll.root, 0.0)
        np.testing.assert_array_equal(config.data.terminal, config.data.lower_rcll.terminal)
        self.assertTrue(config.data.measure.is_zero())

    def test_terminal_atom(self):
        config = parse_scenario({"preset": "terminal-atom"})
        self.assertEqual(config.data.measure.atom_steps, frozenset({4}))
        np.testing.assert_array_equal(config.data.measure.increments[3], np.ones(4))
        self.assertEqual(config.run.n_max, 2**30)

    def test_override_merges_into_preset(self):
        config = parse_scenario({"preset": "constants", "model": {"steps": 2}, "run": {"seed": 7}})
        self.assertEqual(config.model.steps, 2)
        self.assertEqual(config.model.dt, 0.5)
        self.assertEqual(config.data.lower_rcll.root, 1.5)
        self.assertEqual(config.run.seed, 7)

    def test_unknown_preset(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_scenario({"preset": "bermudan"})
        self.assertEqual(ctx.exception.field, "preset")


class TestExpressions(unittest.TestCase):
    def test_accepted(self):
        expr = compile_expression("max(K - S, 0) + 2 ** k - -B / 2")
        self.assertEqual(expr.names, frozenset({"K", "S", "k", "B"}))
        value = expr.evaluate({"K": 3.0, "S": np.array([1.0, 5.0]), "k": 1.0, "B": np.array([-2.0, 2.0])})
        np.testing.assert_array_equal(value, [3.0, 3.0])

    def test_rejected(self):
        for text in (
            "__import__('os')",
            "x + 1",
            "B.real",
            "'text'",
            "True",
            "B // 2",
            "1 if B else 0",
            "max",
            "max()",
            "exp(x=1)",
            "B[0]",
            "lambda: 1",
            "1 +",
        ):
            with self.assertRaises(ConfigError, msg=text):
                compile_expression(text, "data.L")

    def test_deep_nesting_is_a_config_error(self):
        """Nesting that would exhaust the parser or the evaluator is reported, not raised raw"""
        for text in (
            "-" * 100000 + "1",
            "(" * 10000 + "1" + ")" * 10000,
            "1" + " + 1" * 5000,
            "abs(" * 300 + "B" + ")" * 300,
        ):
            with self.assertRaises(ConfigError, msg=text[:12]) as ctx:
                compile_expression(text, "data.L")
            self.assertEqual(ctx.exception.field, "data.L")
        with self.assertRaises(ConfigError):
            parse_scenario({"model": {"steps": 2}, "data": {"L": "-" * 100000 + "0"}})
        self.assertEqual(compile_expression("-" * 50 + "1").evaluate({}), 1.0)

    def test_error_names_the_field(self):
        with self.assertRaises(ConfigError) as ctx:
            compile_expression("y", "data.l")
        self.assertEqual(ctx.exception.field, "data.l")
        self.assertIn("data.l", str(ctx.exception))


class TestBuildProcess(unittest.TestCase):
    def setUp(self):
        self.model = make_model(3, horizon=1.0)

    def test_brownian(self):
        b = build_process("B", self.model, "data.L")
        for k in range(4):
            np.testing.assert_array_equal(b.values[k], self.model.brownian_at(k))

    def test_number(self):
        self.assertEqual(build_process(2, self.model, "data.L").max_abs_diff(build_process("2", self.model, "data.L")), 0.0)

    def test_table(self):
        x = build_process({"table": [[0], [1, 0], [0, 2, 0], [1, 1, 1, 1]]}, self.model, "data.L")
        np.testing.assert_array_equal(x.values[2], [0.0, 2.0, 0.0])
        with self.assertRaises(ConfigError) as ctx:
            build_process({"table": [[0], [1, 0]]}, self.model, "data.L")
        self.assertEqual(ctx.exception.field, "data.L.table")

    def test_underlying(self):
        s = build_process("S", self.model, "data.L", UnderlyingSpec(100.0, 0.2, 90.0))
        self.assertEqual(s.root, 100.0)
        k = build_process("K", self.model, "data.L", UnderlyingSpec(100.0, 0.2, 90.0))
        self.assertEqual(k.root, 90.0)

    def test_missing_underlying(self):
        with self.assertRaises(ConfigError):
            build_process("S", self.model, "data.L")
        with self.assertRaises(ConfigError):
            build_process("K", self.model, "data.L", UnderlyingSpec())

    def test_non_finite(self):
        """log(B) is -inf at the root"""
        with self.assertRaises(ConfigError) as ctx:
            build_process("log(B)", self.model, "data.xi")
        self.assertIn("step 0", str(ctx.exception))


class TestParseScenario(unittest.TestCase):
    def _doc(self, **changes):
        doc = {"model": {"steps": 3}, "data": {"L": "0", "l": "1", "xi": "0"}}
        doc.update(changes)
        return doc

    def test_defaults(self):
        config = parse_scenario(self._doc())
        self.assertEqual(config.model.up_probability, 0.5)
        self.assertTrue(config.data.measure.is_zero())
        self.assertEqual(config.run.command, "solve")
        self.assertEqual(config.run.instances, 0)

    def test_without_data(self):
        config = parse_scenario({"model": {"steps": 3}})
        self.assertIsNone(config.data)
        self.assertEqual(config.run.instances, 20)

    def test_obstacle_and_terminal_default_to_lower(self):
        config = parse_scenario({"model": {"steps": 2}, "data": {"L": "B"}})
        self.assertEqual(config.data.lower_measurable.max_abs_diff(config.data.lower_rcll), 0.0)
        np.testing.assert_array_equal(config.data.terminal, config.data.lower_rcll.terminal)

    def test_custom_measure_with_atom(self):
        measure = {"kind": "custom", "increments": [[0.5], [0.0, 1.0], [0, 0, 0]], "atoms": [{"step": 3, "mass": 2}]}
        config = parse_scenario(self._doc(measure=measure))
        np.testing.assert_array_equal(config.data.measure.increments[1], [0.0, 1.0])
        np.testing.assert_array_equal(config.data.measure.increments[2], [2.0, 2.0, 2.0])
        self.assertEqual(config.data.measure.atom_steps, frozenset({3}))

    def test_field_errors(self):
        cases = {
            "measure.atoms[0].step": self._doc(measure={"atoms": [{"step": 4, "mass": 1.0}]}),
            "measure.atoms[0].mass": self._doc(measure={"atoms": [{"step": 1, "mass": -1.0}]}),
            "measure.kind": self._doc(measure={"kind": "poisson"}),
            "measure.increments": self._doc(measure={"kind": "custom", "increments": [[-1.0], [0, 0], [0, 0, 0]]}),
            "model.steps": {"model": {"steps": 0}},
            "model": {"model": {"steps": 2, "up_probability": 1.5}},
            "data.L": {"model": {"steps": 2}, "data": {"l": "1"}},
            "run.command": self._doc(run={"command": "plot"}),
            "run.suite": self._doc(run={"suite": "everything"}),
            "run.violate": self._doc(run={"violate": "L"}),
            "run.schedule.growth": self._doc(run={"schedule": {"growth": 1}}),
            "run.schedule.n_max": self._doc(run={"schedule": {"n0": 8, "n_max": 4}}),
            "run.seed": self._doc(run={"seed": "abc"}),
            "<document>": self._doc(extra=1),
        }
        for field_path, doc in cases.items():
            with self.assertRaises(ConfigError, msg=field_path) as ctx:
                parse_scenario(doc)
            self.assertEqual(ctx.exception.field, field_path)

    def test_make_config(self):
        config = parse_scenario(self._doc(run={"seed": 7, "tolerances": {"penalty": 1e-6}, "schedule": {"n_max": 64}}))
        c = config.make_config()
        self.assertEqual(c.SEED, 7)
        self.assertEqual(c.PENALTY_TOL, 1e-6)
        self.assertEqual(c.N_MAX, 64)
        self.assertEqual(config.run.schedule().values()[-1], 64)
        self.assertNotEqual(Config().N_MAX, 64)


class TestLoadScenario:
    def test_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "scenario.json"
            path.write_text(json.dumps({"preset": "constants"}), encoding="utf-8")
            assert load_scenario(path).data.lower_rcll.root == 1.5

    def test_invalid_json_reports_the_line(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "broken.json"
            path.write_text('{\n  "model": {"steps": 2},\n  "data": ,\n}\n', encoding="utf-8")
            with pytest.raises(ConfigError) as err:
                load_scenario(path)
            assert err.value.line == 3
            assert "line 3" in str(err.value)

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            load_scenario("/nonexistent/scenario.json")
