"""
Classical Snell envelope by backward induction, the first-touch optimal stopping rule,
and an exhaustive stopping-rule oracle for very small trees.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from project.lattice import (
    AdaptedProcess,
    TreeModel,
    conditional_expectation,
    enumerate_paths,
)
from project.logger_config import logger
from project.utils import Config, HypothesisError, LatticeError


@dataclass(frozen=True, eq=False)
class StoppingRule:
    """Per-node stop flags; a path stops at its first flagged node, stop is forced at k = N"""

    model: TreeModel
    stop: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        n = self.model.steps
        if len(self.stop) != n + 1:
            raise LatticeError(f"expected {n + 1} steps of stop flags, got {len(self.stop)}")
        flags = []
        for k, row in enumerate(self.stop):
            row = np.array(row, dtype=bool).reshape(-1)
            if row.shape != (k + 1,):
                raise LatticeError(f"stop[{k}]: expected {k + 1} flags, got {row.shape[0]}")
            if k == n:
                row[:] = True
            row.setflags(write=False)
            flags.append(row)
        object.__setattr__(self, "stop", tuple(flags))

    def flat(self) -> np.ndarray:
        return np.concatenate(self.stop)


def snell_envelope(l: AdaptedProcess) -> AdaptedProcess:  # noqa: E741
    """S_N = l_N, S_k = max(l_k, E[S_{k+1} | F_k])"""
    model = l.model
    values = [None] * (model.steps + 1)
    values[-1] = l.terminal
    for k in range(model.steps - 1, -1, -1):
        values[k] = np.maximum(l.values[k], conditional_expectation(values[k + 1], model))
    return AdaptedProcess(model, tuple(values))


def optimal_stopping_time(
    s: AdaptedProcess, l: AdaptedProcess, tol: float = Config.ROOT_TOL  # noqa: E741
) -> StoppingRule:
    """First time the envelope touches the obstacle"""
    if s.model != l.model:
        raise LatticeError("envelope and obstacle live on different trees")
    gap = s.max_excess_over(l)
    below = l.max_excess_over(s)
    if below > tol:
        raise HypothesisError(
            f"envelope lies below the obstacle by {below:.3e}; not a Snell envelope of l"
        )
    logger.debug(f"Largest envelope premium over the obstacle: {gap:.3e}")
    return StoppingRule(
        s.model, tuple(np.abs(a - b) <= tol for a, b in zip(s.values, l.values))
    )


def _node_offsets(model: TreeModel) -> np.ndarray:
    k = np.arange(model.steps + 1)
    return k * (k + 1) // 2


def stopped_payoff_value(
    rule: StoppingRule,
    l: AdaptedProcess,  # noqa: E741
    max_depth: int = 16,
) -> float:
    """E[l_tau] for the rule's stopping time, by path enumeration"""
    if rule.model != l.model:
        raise LatticeError("stopping rule and payoff live on different trees")
    paths = enumerate_paths(l.model, max_depth)
    flat_index = paths.nodes + _node_offsets(l.model)[None, :]
    stops = rule.flat()[flat_index]
    first = np.argmax(stops, axis=1)
    payoff = l.flat()[flat_index][np.arange(flat_index.shape[0]), first]
    return float(np.dot(paths.probabilities, payoff))


def brute_force_value(
    l: AdaptedProcess,  # noqa: E741
    max_depth: int = Config.BRUTE_FORCE_MAX_DEPTH,
) -> float:
    """
    sup over every adapted stopping rule of E[l_tau].

    Each non-terminal node carries a free stop flag (2^(N(N+1)/2) rules), and every
    rule is evaluated on all 2^N paths at once.

    Args:
        l: payoff process
        max_depth: largest tree depth accepted

    Returns:
        The optimal expected stopped payoff at the root
    """
    model = l.model
    if model.steps > max_depth:
        raise LatticeError(
            f"brute force is doubly exponential; depth {model.steps} exceeds {max_depth}"
        )
    paths = enumerate_paths(model, max_depth)
    flat_index = paths.nodes + _node_offsets(model)[None, :]
    payoffs = l.flat()[flat_index]

    free = model.node_count() - (model.steps + 1)
    rules = np.array(list(itertools.product((False, True), repeat=free)), dtype=bool)
    rules = rules.reshape(-1, free)
    rules = np.concatenate([rules, np.ones((rules.shape[0], model.steps + 1), dtype=bool)], axis=1)

    # (rules, paths, steps)
    stops = rules[:, flat_index]
    first = np.argmax(stops, axis=2)
    stopped = np.take_along_axis(
        np.broadcast_to(payoffs, stops.shape), first[..., None], axis=2
    )[..., 0]
    values = stopped @ paths.probabilities
    best = int(np.argmax(values))
    logger.debug(f"Checked {rules.shape[0]} stopping rules; best value {values[best]}")
    return float(values[best])
