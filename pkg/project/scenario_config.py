"""
Scenario documents: JSON parsing, bundled presets and the process expression grammar.

A scenario names a tree model, the lower data (L, l, xi) as expressions over
k, t, B, S, K or as explicit node tables, the measure delta and run options.
Expressions are parsed with the ast module against a whitelist and evaluated with
numpy, one lattice step at a time.
"""

import ast
import copy
import functools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from project.lattice import AdaptedProcess, MonotoneMeasure, TreeModel
from project.penalize import LowerData, PenaltySchedule
from project.utils import Config, ConfigError, LatticeError, SnellError

COMMANDS = ("solve", "properties", "trace")
SUITE_NAMES = ("corollary", "comparison", "coincidence", "atom-split", "all")

PRESETS: dict[str, dict[str, Any]] = {
    "constants": {
        "model": {"steps": 4, "horizon": 1.0},
        "data": {"L": "1.5", "l": "1.5", "xi": "1.5"},
        "measure": {"kind": "lebesgue"},
    },
    "american-put": {
        "model": {"steps": 64, "horizon": 1.0},
        "data": {
            "S": {"s0": 100.0, "sigma": 0.2, "strike": 100.0},
            "L": "max(K - S, 0)",
            "l": "0",
            "xi": "max(K - S, 0)",
        },
        "measure": {"kind": "zero"},
    },
    "terminal-atom": {
        "model": {"steps": 4, "horizon": 1.0},
        "data": {"L": "-10", "l": "1", "xi": "0"},
        "measure": {"kind": "zero", "atoms": [{"step": 4, "mass": 1.0}]},
        "run": {"schedule": {"n0": 1, "growth": 2, "n_max": 2**30}},
    },
    "l-below-L": {
        "model": {"steps": 6, "horizon": 1.0},
        "data": {"L": "max(1 - B, 0)", "l": "max(1 - B, 0) - 0.5", "xi": "max(1 - B, 0)"},
        "measure": {"kind": "lebesgue"},
    },
    "lebesgue": {
        "model": {"steps": 8, "horizon": 1.0},
        "data": {
            "S": {"s0": 100.0, "sigma": 0.2, "strike": 100.0},
            "L": "max(1 - S / K, 0) - 0.01",
            "l": "max(1 - S / K, 0)",
            "xi": "max(1 - S / K, 0)",
        },
        "measure": {"kind": "lebesgue"},
        "run": {"schedule": {"n0": 1, "growth": 2, "n_max": 2**30}},
    },
}

_NAMES = ("k", "t", "B", "S", "K")
_FUNCTIONS: dict[str, Callable] = {
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "max": lambda *args: functools.reduce(np.maximum, args),
    "min": lambda *args: functools.reduce(np.minimum, args),
}
_BINARY = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}
_UNARY = {ast.USub: np.negative, ast.UAdd: np.positive}
# Expression._eval recurses once per level
MAX_EXPRESSION_DEPTH = 200


@dataclass(frozen=True)
class Expression:
    """A whitelisted arithmetic expression over k, t, B, S and K"""

    text: str
    tree: ast.Expression
    names: frozenset[str]

    def evaluate(self, env: dict[str, Any]) -> Any:
        return self._eval(self.tree.body, env)

    def _eval(self, node: ast.AST, env: dict[str, Any]) -> Any:
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id]
        if isinstance(node, ast.BinOp):
            return _BINARY[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](self._eval(node.operand, env))
        if isinstance(node, ast.Call):
            return _FUNCTIONS[node.func.id](*(self._eval(arg, env) for arg in node.args))
        raise ConfigError(f"unsupported expression element {type(node).__name__}")


def _depth(tree: ast.AST) -> int:
    """Nesting depth of an expression tree, without recursion"""
    deepest, stack = 0, [(tree, 1)]
    while stack:
        node, depth = stack.pop()
        deepest = max(deepest, depth)
        stack.extend((child, depth + 1) for child in ast.iter_child_nodes(node))
    return deepest


def compile_expression(text: str, field_path: str = "expression") -> Expression:
    try:
        tree = ast.parse(str(text).strip(), mode="eval")
    except SyntaxError as err:
        raise ConfigError(f"cannot parse expression {text!r}: {err.msg}", field=field_path) from err
    except (RecursionError, MemoryError) as err:
        raise ConfigError("expression nested too deeply to parse", field=field_path) from err
    if _depth(tree) > MAX_EXPRESSION_DEPTH:
        raise ConfigError(f"expression nested deeper than {MAX_EXPRESSION_DEPTH} levels", field=field_path)

    names = set()
    for node in ast.walk(tree):
        if isinstance(node, (ast.Expression, ast.Load)) or type(node) in _BINARY or type(node) in _UNARY:
            continue
        if isinstance(node, (ast.BinOp, ast.UnaryOp)):
            if type(node.op) not in _BINARY and type(node.op) not in _UNARY:
                raise ConfigError(f"operator {type(node.op).__name__} not allowed", field=field_path)
            continue
        if isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                raise ConfigError(f"constant {node.value!r} not allowed", field=field_path)
            continue
        if isinstance(node, ast.Name):
            if node.id in _FUNCTIONS:
                continue
            if node.id not in _NAMES:
                raise ConfigError(
                    f"unknown name '{node.id}' (allowed: {', '.join(_NAMES)})", field=field_path
                )
            names.add(node.id)
            continue
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
                raise ConfigError(f"only {sorted(_FUNCTIONS)} may be called", field=field_path)
            if node.keywords or not node.args:
                raise ConfigError(f"bad call to {node.func.id}()", field=field_path)
            continue
        raise ConfigError(f"{type(node).__name__} not allowed in expressions", field=field_path)
    # Function names are only valid in call position
    for node in ast.walk(tree):
        if isinstance(node, ast.Name) and node.id in _FUNCTIONS:
            parents = [p for p in ast.walk(tree) if isinstance(p, ast.Call) and p.func is node]
            if not parents:
                raise ConfigError(f"function '{node.id}' used as a value", field=field_path)
    return Expression(text=str(text), tree=tree, names=frozenset(names))


@dataclass(frozen=True)
class UnderlyingSpec:
    """S = s0 * exp(sigma * B - sigma^2 t / 2), with an optional strike K"""

    s0: float = 100.0
    sigma: float = 0.2
    strike: float | None = None

    def price(self, t: float, b: np.ndarray) -> np.ndarray:
        return self.s0 * np.exp(self.sigma * b - 0.5 * self.sigma**2 * t)


@dataclass(frozen=True)
class RunOptions:
    command: str = "solve"
    n0: int = Config.N0
    growth: int = Config.GROWTH
    n_max: int = Config.N_MAX
    penalty_tol: float = Config.PENALTY_TOL
    equality_tol: float = Config.EQUALITY_TOL
    seed: int = Config.SEED
    suite: str = "all"
    instances: int = 0
    depth: int = 8
    violate: str | None = None

    def schedule(self) -> PenaltySchedule:
        return PenaltySchedule(self.n0, self.growth, self.n_max)


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    model: TreeModel
    data: LowerData | None
    run: RunOptions
    preset: str | None = None
    document: dict = field(default_factory=dict)

    def make_config(self, c: Config | None = None) -> Config:
        """Config instance carrying this scenario's tolerances and seed"""
        c = c or Config()
        c.PENALTY_TOL = self.run.penalty_tol
        c.EQUALITY_TOL = self.run.equality_tol
        c.SEED = self.run.seed
        c.N0, c.GROWTH, c.N_MAX = self.run.n0, self.run.growth, self.run.n_max
        return c


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _require_mapping(value: Any, field_path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError("expected an object", field=field_path)
    return value


def _number(block: dict, key: str, field_path: str, default=None, kind=float, minimum=None):
    value = block.get(key, default)
    if value is None:
        raise ConfigError("missing value", field=f"{field_path}.{key}")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", field=f"{field_path}.{key}")
    if kind is int:
        if int(value) != value:
            raise ConfigError(f"expected an integer, got {value!r}", field=f"{field_path}.{key}")
        value = int(value)
    if minimum is not None and value < minimum:
        raise ConfigError(f"must be at least {minimum}, got {value}", field=f"{field_path}.{key}")
    return kind(value)


def _parse_model(block: dict) -> TreeModel:
    block = _require_mapping(block, "model")
    steps = _number(block, "steps", "model", kind=int, minimum=1)
    horizon = _number(block, "horizon", "model", default=1.0)
    p = _number(block, "up_probability", "model", default=0.5)
    try:
        return TreeModel.build(steps, horizon, p)
    except LatticeError as err:
        raise ConfigError(str(err), field="model") from err


def _parse_underlying(block: dict | None) -> UnderlyingSpec | None:
    if block is None:
        return None
    block = _require_mapping(block, "data.S")
    strike = block.get("strike")
    return UnderlyingSpec(
        s0=_number(block, "s0", "data.S", default=100.0),
        sigma=_number(block, "sigma", "data.S", default=0.2, minimum=0.0),
        strike=None if strike is None else _number(block, "strike", "data.S"),
    )


def build_process(
    spec: Any,
    model: TreeModel,
    field_path: str,
    underlying: UnderlyingSpec | None = None,
) -> AdaptedProcess:
    """Expression text, number or {"table": [[...], ...]} -> AdaptedProcess"""
    if isinstance(spec, dict):
        if "table" not in spec:
            raise ConfigError("expected an expression or {'table': ...}", field=field_path)
        try:
            return AdaptedProcess.from_table(model, spec["table"])
        except (LatticeError, ValueError, TypeError) as err:
            raise ConfigError(f"bad node table: {err}", field=f"{field_path}.table") from err
    if isinstance(spec, bool) or not isinstance(spec, (str, int, float)):
        raise ConfigError(f"expected an expression, got {spec!r}", field=field_path)

    expr = compile_expression(str(spec), field_path)
    if "S" in expr.names and underlying is None:
        raise ConfigError("expression uses S but data.S is not defined", field=field_path)
    if "K" in expr.names and (underlying is None or underlying.strike is None):
        raise ConfigError("expression uses K but data.S.strike is not defined", field=field_path)

    def step_values(k: int, t: float, b: np.ndarray) -> np.ndarray:
        env = {"k": float(k), "t": t, "B": b}
        if underlying is not None:
            env["S"] = underlying.price(t, b)
            env["K"] = underlying.strike
        with np.errstate(all="ignore"):
            values = np.broadcast_to(np.asarray(expr.evaluate(env), dtype=float), b.shape)
        if not np.isfinite(values).all():
            raise ConfigError(f"expression is not finite at step {k}", field=field_path)
        return values

    return AdaptedProcess.from_function(model, step_values)


def _parse_measure(block: dict | None, model: TreeModel) -> MonotoneMeasure:
    block = _require_mapping(block if block is not None else {"kind": "zero"}, "measure")
    kind = block.get("kind", "zero")
    if kind == "zero":
        measure = MonotoneMeasure.zero(model)
    elif kind == "lebesgue":
        measure = MonotoneMeasure.lebesgue(model)
    elif kind == "custom":
        rows = block.get("increments")
        if rows is None:
            raise ConfigError("custom measure needs 'increments'", field="measure.increments")
        try:
            measure = MonotoneMeasure(model, tuple(np.asarray(r, dtype=float) for r in rows))
        except (LatticeError, ValueError, TypeError) as err:
            raise ConfigError(str(err), field="measure.increments") from err
    else:
        raise ConfigError(
            f"unknown kind {kind!r} (expected zero, lebesgue or custom)", field="measure.kind"
        )

    atoms = {}
    for i, atom in enumerate(block.get("atoms", [])):
        atom = _require_mapping(atom, f"measure.atoms[{i}]")
        step = _number(atom, "step", f"measure.atoms[{i}]", kind=int)
        if not 1 <= step <= model.steps:
            raise ConfigError(
                f"atom step {step} outside 1..{model.steps}", field=f"measure.atoms[{i}].step"
            )
        atoms[step] = atoms.get(step, 0.0) + _number(atom, "mass", f"measure.atoms[{i}]", minimum=0.0)
    if atoms:
        measure = MonotoneMeasure.from_atoms(model, atoms, base=measure)
    return measure


def _parse_data(block: dict | None, measure_block, model: TreeModel) -> LowerData | None:
    if block is None:
        return None
    block = _require_mapping(block, "data")
    if "L" not in block:
        raise ConfigError("missing lower barrier", field="data.L")
    underlying = _parse_underlying(block.get("S"))
    lower = build_process(block["L"], model, "data.L", underlying)
    obstacle = build_process(block.get("l", block["L"]), model, "data.l", underlying)
    if "xi" in block:
        terminal = build_process(block["xi"], model, "data.xi", underlying).terminal
    else:
        terminal = lower.terminal
    return LowerData(
        terminal=terminal,
        lower_rcll=lower,
        lower_measurable=obstacle,
        measure=_parse_measure(measure_block, model),
    )


def _parse_run(block: dict | None, has_data: bool) -> RunOptions:
    block = _require_mapping(block or {}, "run")
    command = block.get("command", "solve")
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}", field="run.command")
    schedule = _require_mapping(block.get("schedule", {}), "run.schedule")
    tolerances = _require_mapping(block.get("tolerances", {}), "run.tolerances")
    suite = block.get("suite", "all")
    if suite not in SUITE_NAMES:
        raise ConfigError(f"unknown suite {suite!r}", field="run.suite")
    violate = block.get("violate")
    if violate not in (None, "xi"):
        raise ConfigError(f"unknown hypothesis to violate {violate!r}", field="run.violate")
    options = RunOptions(
        command=command,
        n0=_number(schedule, "n0", "run.schedule", default=Config.N0, kind=int, minimum=1),
        growth=_number(schedule, "growth", "run.schedule", default=Config.GROWTH, kind=int, minimum=2),
        n_max=_number(schedule, "n_max", "run.schedule", default=Config.N_MAX, kind=int, minimum=1),
        penalty_tol=_number(tolerances, "penalty", "run.tolerances", default=Config.PENALTY_TOL, minimum=0.0),
        equality_tol=_number(tolerances, "equality", "run.tolerances", default=Config.EQUALITY_TOL, minimum=0.0),
        seed=_number(block, "seed", "run", default=Config.SEED, kind=int, minimum=0),
        suite=suite,
        instances=_number(block, "instances", "run", default=0 if has_data else 20, kind=int, minimum=0),
        depth=_number(block, "depth", "run", default=8, kind=int, minimum=1),
        violate=violate,
    )
    options.schedule()
    return options


def parse_scenario(document: dict) -> ScenarioConfig:
    """Validate a decoded scenario document (after merging its preset, if any)"""
    document = _require_mapping(document, "<document>")
    unknown = set(document) - {"preset", "model", "data", "measure", "run"}
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", field="<document>")
    preset = document.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r} (known: {sorted(PRESETS)})", field="preset")
        document = _merge(PRESETS[preset], {k: v for k, v in document.items() if k != "preset"})
    if "model" not in document:
        raise ConfigError("missing model block", field="model")

    model = _parse_model(document["model"])
    try:
        data = _parse_data(document.get("data"), document.get("measure"), model)
    except SnellError as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(str(err), field="data") from err
    run = _parse_run(document.get("run"), has_data=data is not None)
    return ScenarioConfig(model=model, data=data, run=run, preset=preset, document=document)


def load_scenario(source: str | Path) -> ScenarioConfig:
    """Read a scenario file; a bare preset name (e.g. 'american-put') is accepted too"""
    path = Path(source)
    if not path.exists():
        if str(source) in PRESETS:
            return parse_scenario({"preset": str(source)})
        raise ConfigError(f"scenario file {source} not found")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON: {err.msg}", line=err.lineno) from err
    return parse_scenario(document)
