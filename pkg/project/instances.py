"""
Seeded random instances for the property suites: lower data, ordered and sandwiched
pairs for the corollary checks, and hypothesis-satisfying comparison pairs.
"""

import numpy as np

from project.grbsde import (
    ComparisonInstance,
    DriftProblem,
    GrbsdeProblem,
    GrbsdeSolution,
    reflect,
    solve_two_barrier,
    solve_with_drift,
)
from project.lattice import (
    AdaptedProcess,
    MonotoneMeasure,
    TreeModel,
    conditional_expectation,
)
from project.penalize import LowerData, penalty_generator
from project.snell import snell_envelope
from project.utils import Config


def random_model(rng: np.random.Generator, max_depth: int = 8, min_depth: int = 1) -> TreeModel:
    steps = int(rng.integers(min_depth, max_depth + 1))
    return TreeModel.build(steps, horizon=1.0)


def random_process(
    model: TreeModel, rng: np.random.Generator, low: float = 0.0, high: float = 1.0
) -> AdaptedProcess:
    return AdaptedProcess(
        model, tuple(rng.uniform(low, high, k + 1) for k in range(model.steps + 1))
    )


def random_measure(
    model: TreeModel,
    rng: np.random.Generator,
    zero_share: float = 0.3,
    atoms: bool = True,
) -> MonotoneMeasure:
    """Charges between 0.25 and 1 on a random subset of nodes, optionally one flagged atom"""
    increments = []
    for k in range(model.steps):
        mass = rng.uniform(0.25, 1.0, k + 1)
        increments.append(np.where(rng.uniform(0.0, 1.0, k + 1) < zero_share, 0.0, mass))
    measure = MonotoneMeasure(model, tuple(increments))
    if atoms and rng.uniform() < 0.5:
        step = int(rng.integers(1, model.steps + 1))
        measure = MonotoneMeasure.from_atoms(model, {step: float(rng.uniform(0.25, 1.0))}, base=measure)
    return measure


def random_lower_data(
    model: TreeModel, rng: np.random.Generator, atoms: bool = True
) -> LowerData:
    """xi, L and l uniform on [0, 1]"""
    return LowerData(
        terminal=rng.uniform(0.0, 1.0, model.steps + 1),
        lower_rcll=random_process(model, rng),
        lower_measurable=random_process(model, rng),
        measure=random_measure(model, rng, atoms=atoms),
    )


def _shrink(values: tuple[np.ndarray, ...], rng: np.random.Generator, scale: float) -> tuple:
    return tuple(v - rng.uniform(0.0, scale, v.shape) * (rng.uniform(0.0, 1.0, v.shape) < 0.7) for v in values)


def ordered_pair(d: LowerData, rng: np.random.Generator) -> LowerData:
    """d' with L' <= L, delta' << delta, l' <= l and xi' <= xi"""
    model = d.model
    increments = []
    for inc in d.measure.increments:
        keep = rng.uniform(0.0, 1.0, inc.shape) < 0.7
        increments.append(np.where(keep, inc * rng.uniform(0.5, 2.0, inc.shape), 0.0))
    measure = MonotoneMeasure(model, tuple(increments), d.measure.atom_steps)
    return LowerData(
        terminal=d.terminal - rng.uniform(0.0, 0.3, model.steps + 1),
        lower_rcll=AdaptedProcess(model, _shrink(d.lower_rcll.values, rng, 0.3)),
        lower_measurable=AdaptedProcess(model, _shrink(d.lower_measurable.values, rng, 0.3)),
        measure=measure,
    )


def sandwich_pair(d: LowerData, y: AdaptedProcess, rng: np.random.Generator) -> LowerData:
    """d' with l <= l' <= Y v l on charged nodes, L <= L' <= Y, equivalent delta, same xi"""
    model = d.model
    n = model.steps
    lower, obstacle, increments = [], [], []
    for k in range(n):
        u = rng.uniform(0.0, 1.0, k + 1)
        lower.append(np.minimum(d.lower_rcll.values[k] + u * (y.values[k] - d.lower_rcll.values[k]), y.values[k]))
        charged = d.measure.increments[k] > 0
        raised = d.lower_measurable.values[k] + rng.uniform(0.0, 1.0, k + 1) * np.maximum(
            y.values[k] - d.lower_measurable.values[k], 0.0
        )
        ceiling = np.maximum(y.values[k], d.lower_measurable.values[k])
        obstacle.append(np.where(charged, np.minimum(raised, ceiling), d.lower_measurable.values[k]))
        increments.append(d.measure.increments[k] * rng.uniform(0.5, 2.0, k + 1))
    lower.append(d.lower_rcll.terminal)
    obstacle.append(d.lower_measurable.terminal)
    return LowerData(
        terminal=d.terminal,
        lower_rcll=AdaptedProcess(model, tuple(lower)),
        lower_measurable=AdaptedProcess(model, tuple(obstacle)),
        measure=MonotoneMeasure(model, tuple(increments), d.measure.atom_steps),
    )


def comparison_pair(
    d: LowerData,
    rng: np.random.Generator,
    violate: str | None = None,
    c: Config | None = None,
) -> tuple[GrbsdeProblem, GrbsdeSolution, ComparisonInstance]:
    """
    A penalized problem built on d and a drift-form instance satisfying every comparison
    hypothesis: xi' >= xi, L <= L' <= Y, U' = U and dA' = g(e') ddelta + extra with
    e' = E[Y'_{k+1} | F_k], so that g(Y'*) ddelta <= dA' for the nonincreasing penalty.

    violate="xi" lowers xi' below xi to exercise the hypothesis gate.
    """
    c = c or Config()
    model = d.model
    n = model.steps
    intensity = float(rng.choice([0.0, 1.0, 4.0, 16.0]))
    generator = penalty_generator(intensity, d.lower_measurable, d.lower_rcll)
    if rng.uniform() < 0.5:
        upper = AdaptedProcess.constant(model, c.HUGE)
    else:
        padded = d.lower_rcll.with_terminal(d.terminal) + random_process(model, rng, 0.0, 0.5)
        upper = snell_envelope(padded)
    problem = GrbsdeProblem(d.terminal, generator, d.measure, d.lower_rcll, upper)
    solution = solve_two_barrier(problem, c)
    y = solution.y

    terminal_b = d.terminal + rng.uniform(0.0, 0.5, n + 1) * (rng.uniform(0.0, 1.0, n + 1) < 0.6)
    if violate == "xi":
        terminal_b = d.terminal - 1.0
    lower_b = []
    for k in range(n):
        u = np.where(rng.uniform(0.0, 1.0, k + 1) < 0.4, 0.0, rng.uniform(0.0, 1.0, k + 1))
        lower_b.append(np.minimum(d.lower_rcll.values[k] + u * (y.values[k] - d.lower_rcll.values[k]), y.values[k]))
    lower_b.append(d.lower_rcll.terminal)
    lower_b = AdaptedProcess(model, tuple(lower_b))

    # Build dA' backward so that it can depend on the conditional mean of Y'
    drift = [np.empty(0)] * n
    y_next = terminal_b
    for k in range(n - 1, -1, -1):
        e = conditional_expectation(y_next, model)
        extra = rng.uniform(0.0, 0.3, k + 1) * (rng.uniform(0.0, 1.0, k + 1) < 0.5)
        drift[k] = generator.term(k, e, d.measure.increments[k]) + extra
        y_next, _, _ = reflect(e + drift[k], lower_b.values[k], upper.values[k])

    problem_b = DriftProblem(
        terminal=terminal_b,
        drift=MonotoneMeasure(model, tuple(drift)),
        lower=lower_b,
        upper=upper,
    )
    return problem, solution, ComparisonInstance(problem_b, solve_with_drift(problem_b))
