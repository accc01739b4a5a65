"""Shared factories for the lattice, solver and CLI tests"""

import math

import numpy as np

from project.lattice import AdaptedProcess, MonotoneMeasure, TreeModel
from project.penalize import LowerData


def make_model(steps: int = 4, horizon: float | None = None, p: float = 0.5) -> TreeModel:
    """Tree with dt = 1 unless a horizon is given"""
    return TreeModel.build(steps, float(steps) if horizon is None else horizon, p)


def constant_data(model: TreeModel, value: float = 1.5, measure: MonotoneMeasure | None = None) -> LowerData:
    """L = l = xi = value"""
    const = AdaptedProcess.constant(model, value)
    return LowerData(
        terminal=const.terminal,
        lower_rcll=const,
        lower_measurable=const,
        measure=measure if measure is not None else MonotoneMeasure.lebesgue(model),
    )


def depth_two_obstacle() -> AdaptedProcess:
    """l(0) = 0; l(1, .) = (1, 0) down to up; l(2, .) = (0, 2, 0); its envelope is 1 at the root"""
    return AdaptedProcess.from_table(make_model(2), [[0.0], [1.0, 0.0], [0.0, 2.0, 0.0]])


def terminal_atom_data(steps: int = 4, xi: float = 0.0, l_T: float = 1.0, mass: float = 1.0) -> LowerData:  # noqa: N803
    """L very low, l = l_T, one atom on the last step and nothing else"""
    model = make_model(steps, horizon=1.0)
    return LowerData(
        terminal=np.full(steps + 1, xi),
        lower_rcll=AdaptedProcess.constant(model, -10.0),
        lower_measurable=AdaptedProcess.constant(model, l_T),
        measure=MonotoneMeasure.from_atoms(model, {steps: mass}),
    )


def random_data(seed: int, steps: int = 6, atoms: bool = True) -> LowerData:
    """xi, L, l uniform on [0, 1]; increments on a random 70% of the nodes"""
    rng = np.random.default_rng(seed)
    model = make_model(steps, horizon=1.0)

    def process() -> AdaptedProcess:
        return AdaptedProcess(model, tuple(rng.uniform(0.0, 1.0, k + 1) for k in range(steps + 1)))

    lower, obstacle = process(), process()
    increments = tuple(
        np.where(rng.uniform(0.0, 1.0, k + 1) < 0.7, rng.uniform(0.25, 1.0, k + 1), 0.0)
        for k in range(steps)
    )
    measure = MonotoneMeasure(model, increments)
    if atoms:
        measure = MonotoneMeasure.from_atoms(model, {steps: 0.5}, base=measure)
    return LowerData(
        terminal=rng.uniform(0.0, 1.0, steps + 1),
        lower_rcll=lower,
        lower_measurable=obstacle,
        measure=measure,
    )


def american_put_oracle(
    steps: int = 64,
    horizon: float = 1.0,
    s0: float = 100.0,
    sigma: float = 0.2,
    strike: float = 100.0,
) -> float:
    """Plain-list binomial American put on S = s0 exp(sigma B - sigma^2 t / 2), no discounting"""
    dt = horizon / steps
    root_dt = math.sqrt(dt)

    def payoff(k: int, j: int) -> float:
        b = (2 * j - k) * root_dt
        price = s0 * math.exp(sigma * b - 0.5 * sigma**2 * (k * dt))
        return max(strike - price, 0.0)

    values = [payoff(steps, j) for j in range(steps + 1)]
    for k in range(steps - 1, -1, -1):
        values = [max(payoff(k, j), 0.5 * (values[j + 1] + values[j])) for j in range(k + 1)]
    return values[0]
