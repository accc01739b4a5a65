"""
Recombining binomial lattice: time grid, tree model, adapted processes and
nondecreasing (predictable) measures.

Node (k, j) has 0 <= j <= k <= N, j counting up-moves. Its up child is (k+1, j+1) and
its down child is (k+1, j). The Brownian value is B(k, j) = (2j - k) * sqrt(dt).

Measures are stored in predictable form: increments[k][j] is the mass charged to step
k+1, i.e. to the interval (t_k, t_{k+1}], along paths through node (k, j). On a
recombining tree a node of step k+1 has two parents, so the mass lives at the parent
where it is known. The "left-limit" value of a process for step k+1 is its value at (k, j).
"""

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import comb

from project.utils import LatticeError


def _frozen(values, length: int | None = None, name: str = "values") -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True).reshape(-1)
    if length is not None and arr.shape != (length,):
        raise LatticeError(f"{name}: expected {length} node values, got {arr.shape[0]}")
    if np.isnan(arr).any():
        raise LatticeError(f"{name}: NaN node value")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k * T / N, k = 0..N"""

    steps: int
    horizon: float = 1.0

    def __post_init__(self) -> None:
        if isinstance(self.steps, bool) or int(self.steps) != self.steps or self.steps < 1:
            raise LatticeError(f"steps must be a positive integer, got {self.steps!r}")
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise LatticeError(f"horizon must be positive and finite, got {self.horizon!r}")
        object.__setattr__(self, "steps", int(self.steps))
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt


@dataclass(frozen=True)
class TreeModel:
    """Binomial tree carrying the filtration of the symmetric +-sqrt(dt) walk"""

    grid: TimeGrid
    up_probability: float = 0.5

    def __post_init__(self) -> None:
        p = float(self.up_probability)
        # p in {0, 1} gives a single-branch tree; allowed for deterministic examples
        if not (0.0 <= p <= 1.0):
            raise LatticeError(f"up_probability must lie in [0, 1], got {p}")
        object.__setattr__(self, "up_probability", p)

    @classmethod
    def build(cls, steps: int, horizon: float = 1.0, up_probability: float = 0.5) -> "TreeModel":
        return cls(TimeGrid(steps, horizon), up_probability)

    @property
    def steps(self) -> int:
        return self.grid.steps

    @property
    def dt(self) -> float:
        return self.grid.dt

    def check_step(self, k: int, last: int | None = None) -> int:
        last = self.steps if last is None else last
        if isinstance(k, bool) or int(k) != k or not 0 <= k <= last:
            raise LatticeError(f"step index {k!r} outside 0..{last}")
        return int(k)

    def brownian_at(self, k: int) -> np.ndarray:
        k = self.check_step(k)
        return (2.0 * np.arange(k + 1) - k) * math.sqrt(self.dt)

    def brownian(self) -> "AdaptedProcess":
        return AdaptedProcess(self, tuple(self.brownian_at(k) for k in range(self.steps + 1)))

    def probabilities_at(self, k: int) -> np.ndarray:
        """P(k, j) = C(k, j) p^j (1 - p)^(k - j)"""
        k = self.check_step(k)
        j = np.arange(k + 1)
        p = self.up_probability
        return comb(k, j) * np.power(p, j) * np.power(1.0 - p, k - j)

    def node_probabilities(self) -> "AdaptedProcess":
        return AdaptedProcess(
            self, tuple(self.probabilities_at(k) for k in range(self.steps + 1))
        )

    def node_count(self) -> int:
        return (self.steps + 1) * (self.steps + 2) // 2


def check_same_model(*items) -> TreeModel:
    """Return the common TreeModel of lattice objects, or raise LatticeError"""
    models = [item.model for item in items if item is not None]
    if not models:
        raise LatticeError("no lattice objects given")
    first = models[0]
    for other in models[1:]:
        if other != first:
            raise LatticeError(f"model mismatch: {first} vs {other}")
    return first


@dataclass(frozen=True, eq=False)
class AdaptedProcess:
    """One real value per node (k, j), k = 0..N; values[k] has length k + 1"""

    model: TreeModel
    values: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        n = self.model.steps
        if len(self.values) != n + 1:
            raise LatticeError(f"expected {n + 1} steps of values, got {len(self.values)}")
        frozen = tuple(
            _frozen(v, k + 1, name=f"values[{k}]") for k, v in enumerate(self.values)
        )
        object.__setattr__(self, "values", frozen)

    @classmethod
    def constant(cls, model: TreeModel, c: float) -> "AdaptedProcess":
        return cls(model, tuple(np.full(k + 1, float(c)) for k in range(model.steps + 1)))

    @classmethod
    def zeros(cls, model: TreeModel) -> "AdaptedProcess":
        return cls.constant(model, 0.0)

    @classmethod
    def from_function(
        cls,
        model: TreeModel,
        func: Callable[[int, float, np.ndarray], np.ndarray | float],
    ) -> "AdaptedProcess":
        """Build from f(k, t_k, B(k, .)), evaluated one step at a time"""
        times = model.grid.times
        values = []
        for k in range(model.steps + 1):
            b = model.brownian_at(k)
            values.append(np.broadcast_to(np.asarray(func(k, times[k], b), dtype=float), b.shape))
        return cls(model, tuple(values))

    @classmethod
    def from_table(cls, model: TreeModel, table: Sequence[Sequence[float]]) -> "AdaptedProcess":
        return cls(model, tuple(np.asarray(row, dtype=float) for row in table))

    def at(self, k: int) -> np.ndarray:
        return self.values[self.model.check_step(k)]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    @property
    def root(self) -> float:
        return float(self.values[0][0])

    def with_terminal(self, terminal) -> "AdaptedProcess":
        """Same process with the values at k = N replaced (e.g. L^xi)"""
        return AdaptedProcess(self.model, self.values[:-1] + (np.asarray(terminal, dtype=float),))

    def map_steps(self, func: Callable[[int, np.ndarray], np.ndarray]) -> "AdaptedProcess":
        return AdaptedProcess(self.model, tuple(func(k, v) for k, v in enumerate(self.values)))

    def _combine(self, other, op) -> "AdaptedProcess":
        if isinstance(other, AdaptedProcess):
            check_same_model(self, other)
            return AdaptedProcess(
                self.model, tuple(op(a, b) for a, b in zip(self.values, other.values))
            )
        if np.isscalar(other):
            return AdaptedProcess(self.model, tuple(op(a, float(other)) for a in self.values))
        return NotImplemented

    def __add__(self, other):
        return self._combine(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __rsub__(self, other):
        return self._combine(other, lambda a, b: b - a)

    def __mul__(self, other):
        return self._combine(other, np.multiply)

    __rmul__ = __mul__

    def __neg__(self):
        return self.map_steps(lambda k, v: -v)

    def maximum(self, other) -> "AdaptedProcess":
        return self._combine(other, np.maximum)

    def minimum(self, other) -> "AdaptedProcess":
        return self._combine(other, np.minimum)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.values)

    def max_abs_diff(self, other: "AdaptedProcess", last: int | None = None) -> float:
        check_same_model(self, other)
        last = self.model.steps if last is None else last
        return max(float(np.max(np.abs(a - b))) for a, b in list(zip(self.values, other.values))[: last + 1])

    def max_excess_over(self, other: "AdaptedProcess", last: int | None = None) -> float:
        """max over nodes k <= last of (self - other); <= 0 means self <= other"""
        check_same_model(self, other)
        last = self.model.steps if last is None else last
        return max(float(np.max(a - b)) for a, b in list(zip(self.values, other.values))[: last + 1])


@dataclass(frozen=True, eq=False)
class PredictableVolatility:
    """One value per non-terminal node; Z(k, j) multiplies the increment over step k+1"""

    model: TreeModel
    values: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        n = self.model.steps
        if len(self.values) != n:
            raise LatticeError(f"expected {n} steps of volatility values, got {len(self.values)}")
        frozen = tuple(_frozen(v, k + 1, name=f"z[{k}]") for k, v in enumerate(self.values))
        object.__setattr__(self, "values", frozen)

    def at(self, k: int) -> np.ndarray:
        return self.values[self.model.check_step(k, last=self.model.steps - 1)]


@dataclass(frozen=True, eq=False)
class MonotoneMeasure:
    """Nonnegative predictable increments; increments[k] has length k + 1 and is charged to step k+1"""

    model: TreeModel
    increments: tuple[np.ndarray, ...]
    atom_steps: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        n = self.model.steps
        if len(self.increments) != n:
            raise LatticeError(f"expected {n} steps of increments, got {len(self.increments)}")
        frozen = tuple(
            _frozen(v, k + 1, name=f"increments[{k}]") for k, v in enumerate(self.increments)
        )
        for k, inc in enumerate(frozen):
            if (inc < 0).any():
                raise LatticeError(f"negative increment charged to step {k + 1}")
        atoms = frozenset(int(s) for s in self.atom_steps)
        bad = sorted(s for s in atoms if not 1 <= s <= n)
        if bad:
            raise LatticeError(f"atom steps {bad} outside 1..{n}")
        object.__setattr__(self, "increments", frozen)
        object.__setattr__(self, "atom_steps", atoms)

    @classmethod
    def zero(cls, model: TreeModel) -> "MonotoneMeasure":
        return cls(model, tuple(np.zeros(k + 1) for k in range(model.steps)))

    @classmethod
    def lebesgue(cls, model: TreeModel) -> "MonotoneMeasure":
        """delta_t = t: mass dt on every step, no atoms"""
        return cls(model, tuple(np.full(k + 1, model.dt) for k in range(model.steps)))

    @classmethod
    def from_atoms(
        cls,
        model: TreeModel,
        atoms: Mapping[int, float],
        base: "MonotoneMeasure | None" = None,
    ) -> "MonotoneMeasure":
        """Add deterministic point masses {step: mass} on top of base (default zero)"""
        base = base if base is not None else cls.zero(model)
        increments = [inc.copy() for inc in base.increments]
        for step, mass in atoms.items():
            step = model.check_step(step)
            if step < 1:
                raise LatticeError("atoms must sit on steps 1..N")
            increments[step - 1] = increments[step - 1] + float(mass)
        flagged = set(base.atom_steps) | {int(s) for s, m in atoms.items() if m > 0}
        return cls(model, tuple(increments), frozenset(flagged))

    def at_step(self, step: int) -> np.ndarray:
        """Increments charged to step (1..N), indexed by the parent node j"""
        step = self.model.check_step(step)
        if step < 1:
            raise LatticeError("step 0 carries no mass")
        return self.increments[step - 1]

    def charged(self, k: int) -> np.ndarray:
        """Boolean mask of nodes (k, .) whose outgoing step carries mass"""
        return self.increments[self.model.check_step(k, last=self.model.steps - 1)] > 0

    def support(self) -> tuple[np.ndarray, ...]:
        return tuple(inc > 0 for inc in self.increments)

    def is_zero(self) -> bool:
        return not any(inc.any() for inc in self.increments)

    def __add__(self, other: "MonotoneMeasure") -> "MonotoneMeasure":
        check_same_model(self, other)
        return MonotoneMeasure(
            self.model,
            tuple(a + b for a, b in zip(self.increments, other.increments)),
            self.atom_steps | other.atom_steps,
        )

    def scale(self, factor: float) -> "MonotoneMeasure":
        if factor < 0:
            raise LatticeError("a measure can only be scaled by a nonnegative factor")
        atoms = self.atom_steps if factor > 0 else frozenset()
        return MonotoneMeasure(self.model, tuple(inc * factor for inc in self.increments), atoms)

    def total_mass(self) -> float:
        """Probability-weighted total mass E[K_T]"""
        return weighted_node_sum(self.increments, self.model)


def weighted_node_sum(per_node: Sequence[np.ndarray], model: TreeModel) -> float:
    """sum_k sum_j P(k, j) x[k][j] over the given (leading) steps"""
    return float(sum(np.dot(model.probabilities_at(k), x) for k, x in enumerate(per_node)))


def _split_children(next_values, model: TreeModel) -> tuple[np.ndarray, np.ndarray, int]:
    x = np.asarray(next_values, dtype=float).reshape(-1)
    k = x.shape[0] - 2
    if k < 0 or k + 1 > model.steps:
        raise LatticeError(
            f"values of length {x.shape[0]} do not form a step 1..{model.steps} of the tree"
        )
    return x[1:], x[:-1], k


def conditional_expectation(next_values, model: TreeModel) -> np.ndarray:
    """E[x_{k+1} | F_k] from the k+2 values of step k+1; returns the k+1 values of step k"""
    up, down, _ = _split_children(next_values, model)
    p = model.up_probability
    # For p = 1/2 both products are exact, so constants and orderings survive rounding
    return p * up + (1.0 - p) * down


def martingale_rep_coefficient(next_values, model: TreeModel) -> np.ndarray:
    """Z(k, j) = (x_up - x_down) / (2 sqrt(dt)), so that x - E[x | F_k] = Z * (dB - E[dB | F_k])"""
    up, down, _ = _split_children(next_values, model)
    return (up - down) / (2.0 * math.sqrt(model.dt))


def centred_brownian_increment(model: TreeModel, k: int) -> tuple[np.ndarray, np.ndarray]:
    """(up, down) values of dB - E[dB | F_k] over step k+1 at the k+1 nodes of step k"""
    model.check_step(k, last=model.steps - 1)
    s = math.sqrt(model.dt)
    p = model.up_probability
    drift = (2.0 * p - 1.0) * s
    return np.full(k + 1, s - drift), np.full(k + 1, -s - drift)


@dataclass(frozen=True)
class SupermartingaleReport:
    passed: bool
    worst_excess: float
    worst_node: tuple[int, int] | None = None


def is_supermartingale(x: AdaptedProcess, tol: float = 0.0) -> SupermartingaleReport:
    """True iff E[x_{k+1} | F_k] <= x_k + tol at every non-terminal node"""
    worst, node = -math.inf, None
    for k in range(x.model.steps):
        excess = conditional_expectation(x.values[k + 1], x.model) - x.values[k]
        j = int(np.argmax(excess))
        if excess[j] > worst:
            worst, node = float(excess[j]), (k, j)
    worst = max(worst, 0.0)
    return SupermartingaleReport(passed=worst <= tol, worst_excess=worst, worst_node=node if worst > 0 else None)


def expectation_at_root(x: AdaptedProcess, k: int) -> float:
    """E[x_k] by repeated conditioning (tower property)"""
    k = x.model.check_step(k)
    values = x.values[k]
    for _ in range(k):
        values = conditional_expectation(values, x.model)
    return float(values[0])


def path_expectation(x: AdaptedProcess, k: int) -> float:
    """E[x_k] as a direct sum over the nodes of step k"""
    return float(np.dot(x.model.probabilities_at(k), x.at(k)))


@dataclass(frozen=True)
class DoobDecomposition:
    """x_{k+1} - x_k = Z_k * (centred dB) - dA_k, with dA_k = x_k - E[x_{k+1} | F_k]"""

    z: PredictableVolatility
    compensator: tuple[np.ndarray, ...]

    @property
    def is_decreasing_drift(self) -> bool:
        return all((a >= 0).all() for a in self.compensator)


def doob_decomposition(x: AdaptedProcess) -> DoobDecomposition:
    model = x.model
    z, compensator = [], []
    for k in range(model.steps):
        z.append(martingale_rep_coefficient(x.values[k + 1], model))
        compensator.append(x.values[k] - conditional_expectation(x.values[k + 1], model))
    return DoobDecomposition(PredictableVolatility(model, tuple(z)), tuple(compensator))


def singular(a: MonotoneMeasure, b: MonotoneMeasure) -> bool:
    """At every node at most one of the two increments is nonzero"""
    check_same_model(a, b)
    return not any(((x > 0) & (y > 0)).any() for x, y in zip(a.increments, b.increments))


def absolutely_continuous(a: MonotoneMeasure, b: MonotoneMeasure) -> bool:
    """a << b: support(a) is contained in support(b)"""
    check_same_model(a, b)
    return not any(((x > 0) & ~(y > 0)).any() for x, y in zip(a.increments, b.increments))


def equivalent(a: MonotoneMeasure, b: MonotoneMeasure) -> bool:
    return absolutely_continuous(a, b) and absolutely_continuous(b, a)


def decompose_atoms(d: MonotoneMeasure) -> tuple[MonotoneMeasure, list[int]]:
    """Split d into its continuous part (zero on atom steps) and the sorted atom steps"""
    increments = tuple(
        np.zeros_like(inc) if (k + 1) in d.atom_steps else inc
        for k, inc in enumerate(d.increments)
    )
    return MonotoneMeasure(d.model, increments), sorted(d.atom_steps)


def atom_part(d: MonotoneMeasure) -> MonotoneMeasure:
    """The complement of decompose_atoms: d restricted to its atom steps"""
    increments = tuple(
        inc if (k + 1) in d.atom_steps else np.zeros_like(inc)
        for k, inc in enumerate(d.increments)
    )
    return MonotoneMeasure(d.model, increments, d.atom_steps)


@dataclass(frozen=True)
class PathEnumeration:
    """All 2^N paths: nodes[i, k] is the j-index of path i at step k"""

    nodes: np.ndarray
    probabilities: np.ndarray


def enumerate_paths(model: TreeModel, max_depth: int) -> PathEnumeration:
    if model.steps > max_depth:
        raise LatticeError(
            f"path enumeration needs depth <= {max_depth}, tree has {model.steps} steps"
        )
    moves = np.array(list(itertools.product((0, 1), repeat=model.steps)), dtype=int)
    moves = moves.reshape(-1, model.steps)
    nodes = np.concatenate([np.zeros((moves.shape[0], 1), dtype=int), np.cumsum(moves, axis=1)], axis=1)
    ups = moves.sum(axis=1)
    p = model.up_probability
    probabilities = np.power(p, ups) * np.power(1.0 - p, model.steps - ups)
    return PathEnumeration(nodes=nodes, probabilities=probabilities)
