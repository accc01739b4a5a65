"""
Two-barrier generalized reflected BSDE on the binomial lattice.

Contents:
- Generator, GrbsdeProblem, GrbsdeSolution and the drift-form ComparisonInstance
- implicit_step: solve y = e + g(y) * ddelta, then clamp to [lo, hi]
- solve_two_barrier / solve_with_drift: backward induction
- validate_H: sampled bound, continuity probe and the supermartingale check of U
- check_skorokhod, backward_identity_residual: solution certificates
- compare_minimal: comparison of a minimal solution with a drift-form instance
"""

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import bisect

from project.lattice import (
    AdaptedProcess,
    MonotoneMeasure,
    PredictableVolatility,
    SupermartingaleReport,
    TreeModel,
    centred_brownian_increment,
    check_same_model,
    conditional_expectation,
    is_supermartingale,
    martingale_rep_coefficient,
    singular,
    weighted_node_sum,
)
from project.logger_config import logger
from project.utils import (
    BarrierOrderError,
    Config,
    ImplicitSolveError,
    LatticeError,
)


@dataclass(frozen=True, eq=False)
class PenaltyForm:
    """Marks a generator n * (l - y)^+ so the implicit step can use its closed form"""

    intensity: float
    obstacle: AdaptedProcess


@dataclass(frozen=True, eq=False)
class Generator:
    evaluate: Callable[[int, int, float], float]
    bound: AdaptedProcess
    label: str = "g"
    penalty: PenaltyForm | None = None
    # y-independent generators: g(k, j, y) = drift(k, j)
    drift: AdaptedProcess | None = None

    @property
    def model(self) -> TreeModel:
        return self.bound.model

    def term(self, k: int, y: np.ndarray, ddelta: np.ndarray) -> np.ndarray:
        """g(k, j, y_j) * ddelta_j over the nodes of step k; zero where ddelta = 0"""
        out = np.zeros_like(np.asarray(y, dtype=float))
        for j in np.flatnonzero(ddelta > 0):
            out[j] = self.evaluate(k, int(j), float(y[j])) * ddelta[j]
        return out


def zero_generator(model: TreeModel) -> Generator:
    zeros = AdaptedProcess.zeros(model)
    return Generator(lambda k, j, y: 0.0, zeros, label="zero", drift=zeros)


def constant_generator(drift: AdaptedProcess, label: str = "drift") -> Generator:
    """g(k, j, y) = drift(k, j), independent of y"""
    return Generator(
        lambda k, j, y: float(drift.values[k][j]),
        drift.map_steps(lambda k, v: np.abs(v)),
        label=label,
        drift=drift,
    )


def _check_barriers(lower: AdaptedProcess, upper: AdaptedProcess) -> None:
    excess = lower.max_excess_over(upper, last=lower.model.steps - 1)
    if excess > 0:
        raise BarrierOrderError(f"lower barrier exceeds upper barrier by {excess:.3e}")


def _terminal(values, model: TreeModel) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    if arr.shape != (model.steps + 1,):
        raise LatticeError(
            f"terminal condition needs {model.steps + 1} values, got {arr.shape[0]}"
        )
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GrbsdeProblem:
    """(xi, g, delta, L, U) with L <= U at every node k < N"""

    terminal: np.ndarray
    generator: Generator
    measure: MonotoneMeasure
    lower: AdaptedProcess
    upper: AdaptedProcess

    def __post_init__(self) -> None:
        model = check_same_model(self.generator, self.measure, self.lower, self.upper)
        object.__setattr__(self, "terminal", _terminal(self.terminal, model))
        _check_barriers(self.lower, self.upper)

    @property
    def model(self) -> TreeModel:
        return self.lower.model


@dataclass(frozen=True, eq=False)
class DriftProblem:
    """Comparison form: the generator term g * ddelta is replaced by a given measure A'"""

    terminal: np.ndarray
    drift: MonotoneMeasure
    lower: AdaptedProcess
    upper: AdaptedProcess

    def __post_init__(self) -> None:
        model = check_same_model(self.drift, self.lower, self.upper)
        object.__setattr__(self, "terminal", _terminal(self.terminal, model))
        _check_barriers(self.lower, self.upper)

    @property
    def model(self) -> TreeModel:
        return self.lower.model


@dataclass(frozen=True, eq=False)
class GrbsdeSolution:
    y: AdaptedProcess
    z: PredictableVolatility
    k_plus: MonotoneMeasure
    k_minus: MonotoneMeasure
    # y* of the implicit step at every non-terminal node, before the clamp
    pre_reflection: tuple[np.ndarray, ...]

    @property
    def model(self) -> TreeModel:
        return self.y.model


@dataclass(frozen=True, eq=False)
class ComparisonInstance:
    problem: DriftProblem
    solution: GrbsdeSolution


@dataclass(frozen=True)
class ImplicitStep:
    y: float
    y_pre: float
    dk_plus: float
    dk_minus: float


def reflect(y_pre, lo, hi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Y = lo v y* ^ hi with the clamp residuals; dK+ has priority when lo = hi"""
    y_pre, lo, hi = (np.asarray(a, dtype=float) for a in (y_pre, lo, hi))
    capped = np.minimum(y_pre, hi)
    y = np.maximum(lo, capped)
    dk_plus = np.maximum(lo - capped, 0.0)
    dk_minus = np.maximum(np.maximum(y_pre, lo) - hi, 0.0)
    return y, dk_plus, dk_minus


def penalty_fixed_point(e, obstacle, intensity: float, ddelta) -> np.ndarray:
    """Root of y = e + n * (l - y)^+ * ddelta, vectorized; n may be +inf"""
    e = np.asarray(e, dtype=float)
    obstacle = np.broadcast_to(np.asarray(obstacle, dtype=float), e.shape)
    ddelta = np.broadcast_to(np.asarray(ddelta, dtype=float), e.shape)
    y = e.copy()
    if intensity == 0:
        return y
    active = (ddelta > 0) & (obstacle > e)
    if not active.any():
        return y
    if math.isinf(intensity):
        y[active] = obstacle[active]
        return y
    nm = intensity * ddelta[active]
    root = (e[active] + nm * obstacle[active]) / (1.0 + nm)
    # The root lies in [e, l]; the clip removes rounding outside that interval
    y[active] = np.clip(root, e[active], obstacle[active])
    return y


def _solve_scalar(
    e: float,
    g: Callable[[float], float],
    ddelta: float,
    beta: float,
    c: Config,
) -> float:
    def phi(y: float) -> float:
        return y - e - g(y) * ddelta

    half = beta * ddelta if math.isfinite(beta) else 1.0
    half = max(half, c.ROOT_TOL * (1.0 + abs(e)))
    for _ in range(c.BRACKET_DOUBLINGS + 1):
        a, b = e - half, e + half
        fa, fb = phi(a), phi(b)
        if fa == 0:
            return a
        if fb == 0:
            return b
        if fa < 0 < fb:
            return float(bisect(phi, a, b, xtol=c.ROOT_TOL, maxiter=500))
        half *= 2.0
    raise ImplicitSolveError(
        f"no sign change of y - e - g(y)*ddelta around e={e} after "
        f"{c.BRACKET_DOUBLINGS} doublings"
    )


def _pre_reflection(
    e: np.ndarray,
    gen: Generator,
    k: int,
    ddelta: np.ndarray,
    c: Config,
) -> np.ndarray:
    if not (ddelta > 0).any():
        return e.copy()
    if gen.penalty is not None:
        return penalty_fixed_point(
            e, gen.penalty.obstacle.values[k], gen.penalty.intensity, ddelta
        )
    if gen.drift is not None:
        return e + gen.drift.values[k] * ddelta
    y = e.copy()
    bound = gen.bound.values[k]
    for j in np.flatnonzero(ddelta > 0):
        y[j] = _solve_scalar(
            float(e[j]),
            lambda v, j=int(j): gen.evaluate(k, j, v),
            float(ddelta[j]),
            float(bound[j]),
            c,
        )
    return y


def implicit_step(
    e: float,
    gen: Generator,
    ddelta: float,
    lo: float,
    hi: float,
    k: int = 0,
    j: int = 0,
    c: Config | None = None,
) -> ImplicitStep:
    """One backward step at node (k, j): y* = e + g(k, j, y*) * ddelta, then clamp"""
    c = c or Config()
    if ddelta < 0:
        raise LatticeError(f"ddelta must be nonnegative, got {ddelta}")
    if lo > hi:
        raise BarrierOrderError(f"lo={lo} > hi={hi}")
    gen.model.check_step(k, last=gen.model.steps - 1)
    if not 0 <= j <= k:
        raise LatticeError(f"node ({k}, {j}) does not exist")

    e_arr = np.zeros(k + 1)
    e_arr[j] = e
    m_arr = np.zeros(k + 1)
    m_arr[j] = ddelta
    y_pre = float(_pre_reflection(e_arr, gen, k, m_arr, c)[j])
    y, dk_plus, dk_minus = reflect(y_pre, lo, hi)
    return ImplicitStep(float(y), y_pre, float(dk_plus), float(dk_minus))


def _backward(
    terminal: np.ndarray,
    lower: AdaptedProcess,
    upper: AdaptedProcess,
    pre_step: Callable[[int, np.ndarray], np.ndarray],
) -> GrbsdeSolution:
    model = lower.model
    n = model.steps
    y: list[np.ndarray] = [np.empty(0)] * (n + 1)
    z, k_plus, k_minus, pre = ([np.empty(0)] * n for _ in range(4))
    y[n] = terminal
    for k in range(n - 1, -1, -1):
        e = conditional_expectation(y[k + 1], model)
        z[k] = martingale_rep_coefficient(y[k + 1], model)
        pre[k] = pre_step(k, e)
        y[k], k_plus[k], k_minus[k] = reflect(pre[k], lower.values[k], upper.values[k])
    for arr in pre:
        arr.setflags(write=False)
    return GrbsdeSolution(
        y=AdaptedProcess(model, tuple(y)),
        z=PredictableVolatility(model, tuple(z)),
        k_plus=MonotoneMeasure(model, tuple(k_plus)),
        k_minus=MonotoneMeasure(model, tuple(k_minus)),
        pre_reflection=tuple(pre),
    )


def solve_two_barrier(p: GrbsdeProblem, c: Config | None = None) -> GrbsdeSolution:
    """Backward induction: Y_N = xi, Y_k = L v y* ^ U with y* from the implicit step"""
    c = c or Config()
    sol = _backward(
        p.terminal,
        p.lower,
        p.upper,
        lambda k, e: _pre_reflection(e, p.generator, k, p.measure.increments[k], c),
    )
    logger.debug(
        f"Two-barrier solve ({p.generator.label}, N={p.model.steps}): "
        f"Y0={sol.y.root:.12g}, K+ mass={sol.k_plus.total_mass():.3e}, "
        f"K- mass={sol.k_minus.total_mass():.3e}"
    )
    return sol


def solve_with_drift(p: DriftProblem) -> GrbsdeSolution:
    """Same recursion with y* = e + dA'(k, j)"""
    return _backward(p.terminal, p.lower, p.upper, lambda k, e: e + p.drift.increments[k])


@dataclass(frozen=True)
class HReport:
    bound_excess: float
    continuity_residual: float
    upper: SupermartingaleReport
    worst_node: tuple[int, int] | None = None
    tol: float = Config.CERT_TOL

    @property
    def bound_ok(self) -> bool:
        return self.bound_excess <= self.tol

    @property
    def continuity_ok(self) -> bool:
        return self.continuity_residual <= self.tol

    @property
    def passed(self) -> bool:
        return self.bound_ok and self.continuity_ok and self.upper.passed


def validate_H(p: GrbsdeProblem, samples: int = 33, c: Config | None = None) -> HReport:
    """
    Sampled check of the generator assumptions and the upper barrier.

    (a) |g(k, j, y)| <= beta(k, j) on a grid of the clamp range [L, U] at charged nodes.
    (b) Continuity probe: a difference quotient that does not shrink with the step
        signals a jump; its size is the residual.
    (c) U is a supermartingale.
    """
    c = c or Config()
    gen = p.generator
    worst_bound, worst_jump, worst_node = -math.inf, 0.0, None
    for k in range(p.model.steps):
        ddelta = p.measure.increments[k]
        for j in np.flatnonzero(ddelta > 0):
            lo, hi = float(p.lower.values[k][j]), float(p.upper.values[k][j])
            near = min(hi, lo + 2.0 * (1.0 + abs(lo)))
            grid = np.unique(np.concatenate([np.linspace(lo, hi, samples), np.linspace(lo, near, samples)]))
            beta = float(gen.bound.values[k][j])
            for y in grid:
                g = gen.evaluate(k, int(j), float(y))
                if math.isfinite(beta) and abs(g) - beta > worst_bound:
                    worst_bound, worst_node = abs(g) - beta, (k, int(j))
                scale = 1.0 + abs(y)
                wide = abs(gen.evaluate(k, int(j), y + 1e-6 * scale) - gen.evaluate(k, int(j), y - 1e-6 * scale))
                narrow = abs(gen.evaluate(k, int(j), y + 1e-9 * scale) - gen.evaluate(k, int(j), y - 1e-9 * scale))
                if narrow > 0.1 * wide and narrow > c.CERT_TOL * (1.0 + abs(beta) if math.isfinite(beta) else 1.0):
                    if narrow > worst_jump:
                        worst_jump, worst_node = narrow, (k, int(j))
    report = HReport(
        bound_excess=max(worst_bound, 0.0) if math.isfinite(worst_bound) else 0.0,
        continuity_residual=worst_jump,
        upper=is_supermartingale(p.upper),
        worst_node=worst_node,
        tol=c.CERT_TOL,
    )
    if not report.passed:
        logger.warning(f"Assumption (H) check failed for '{gen.label}': {report}")
    return report


@dataclass(frozen=True)
class SkorokhodReport:
    lower_residual: float
    upper_residual: float
    singular: bool
    tol: float = Config.CERT_TOL

    @property
    def passed(self) -> bool:
        return self.singular and max(self.lower_residual, self.upper_residual) <= self.tol


def skorokhod_residuals(
    sol: GrbsdeSolution,
    lower: AdaptedProcess,
    upper: AdaptedProcess | None = None,
    tol: float = Config.CERT_TOL,
) -> SkorokhodReport:
    """Probability-weighted sum(Y - L) dK+ and sum(U - Y) dK-, plus dK+ singular to dK-"""
    model = check_same_model(sol.y, lower)
    n = model.steps
    lower_terms = [(sol.y.values[k] - lower.values[k]) * sol.k_plus.increments[k] for k in range(n)]
    upper_res = 0.0
    if upper is not None:
        upper_terms = [
            (upper.values[k] - sol.y.values[k]) * sol.k_minus.increments[k] for k in range(n)
        ]
        upper_res = abs(weighted_node_sum(upper_terms, model))
    return SkorokhodReport(
        lower_residual=abs(weighted_node_sum(lower_terms, model)),
        upper_residual=upper_res,
        singular=singular(sol.k_plus, sol.k_minus),
        tol=tol,
    )


def check_skorokhod(
    sol: GrbsdeSolution,
    p: "GrbsdeProblem | DriftProblem",
    tol: float = Config.CERT_TOL,
) -> SkorokhodReport:
    return skorokhod_residuals(sol, p.lower, p.upper, tol)


def generator_increments(sol: GrbsdeSolution, p: GrbsdeProblem) -> tuple[np.ndarray, ...]:
    """g(k, j, y*) * ddelta at every non-terminal node"""
    out = []
    for k in range(p.model.steps):
        ddelta = p.measure.increments[k]
        pen = p.generator.penalty
        if pen is not None and math.isinf(pen.intensity):
            # Limit generator: the push equals the implicit-step increment
            out.append(sol.pre_reflection[k] - conditional_expectation(sol.y.values[k + 1], p.model))
        else:
            out.append(p.generator.term(k, sol.pre_reflection[k], ddelta))
    return tuple(out)


def backward_identity_residual(
    sol: GrbsdeSolution,
    drift_terms: tuple[np.ndarray, ...],
) -> float:
    """max |Y_k - (Y_{k+1} + drift + dK+ - dK- - Z dB)| over both children of every node"""
    model = sol.model
    worst = 0.0
    for k in range(model.steps):
        db_up, db_down = centred_brownian_increment(model, k)
        nxt = sol.y.values[k + 1]
        rest = drift_terms[k] + sol.k_plus.increments[k] - sol.k_minus.increments[k]
        z = sol.z.values[k]
        for child, db in ((nxt[1:], db_up), (nxt[:-1], db_down)):
            res = np.abs(sol.y.values[k] - (child + rest - z * db))
            worst = max(worst, float(res.max()))
    return worst


@dataclass(frozen=True)
class ComparisonReport:
    hypotheses_ok: bool
    passed: bool
    failed_hypothesis: str | None = None
    max_violation: float = 0.0
    counterexample: dict | None = None
    details: dict = field(default_factory=dict)


def _worst(excess: list[np.ndarray], masks: list[np.ndarray] | None = None) -> tuple[float, tuple[int, int] | None]:
    worst, node = -math.inf, None
    for k, arr in enumerate(excess):
        if masks is not None:
            arr = np.where(masks[k], arr, -math.inf)
        if arr.size and arr.max() > worst:
            j = int(np.argmax(arr))
            worst, node = float(arr[j]), (k, j)
    return worst, node


def compare_minimal(
    problem: GrbsdeProblem,
    solution: GrbsdeSolution,
    other: ComparisonInstance,
    tol: float = Config.CERT_TOL,
) -> ComparisonReport:
    """
    Check Y <= Y' and the indicator increment inequalities for a hypothesis-satisfying pair.

    Hypotheses, checked in order (the first failure is reported, conclusions are skipped):
        (a) xi <= xi'; (b) Y' <= U and L' <= Y for k < N; (b*) L <= Y' and Y <= U'
        for k < N; (c) g(k, j, Y'*) ddelta <= dA' at every node.

    Conclusions:
        Y <= Y' everywhere; dK- <= dK'- where U' = U; dK'+ <= dK+ where L' = L.
    """
    model = check_same_model(solution.y, other.solution.y, problem.lower)
    n = model.steps
    b, sol_b = other.problem, other.solution
    y, yb = solution.y, sol_b.y

    term_b = [problem.generator.term(k, sol_b.pre_reflection[k], problem.measure.increments[k]) for k in range(n)]
    hypotheses: list[tuple[str, list[np.ndarray]]] = [
        ("(a) xi <= xi'", [problem.terminal - b.terminal]),
        ("(b) Y' <= U", [yb.values[k] - problem.upper.values[k] for k in range(n)]),
        ("(b) L' <= Y", [b.lower.values[k] - y.values[k] for k in range(n)]),
        ("(b*) L <= Y'", [problem.lower.values[k] - yb.values[k] for k in range(n)]),
        ("(b*) Y <= U'", [y.values[k] - b.upper.values[k] for k in range(n)]),
        ("(c) g(Y'*) ddelta <= dA'", [term_b[k] - b.drift.increments[k] for k in range(n)]),
    ]
    for name, excess in hypotheses:
        worst, node = _worst(excess)
        if worst > tol:
            if name.startswith("(a)"):
                node = (n, node[1])
            logger.info(f"Comparison hypothesis {name} fails at {node} by {worst:.3e}")
            return ComparisonReport(
                hypotheses_ok=False,
                passed=False,
                failed_hypothesis=name,
                max_violation=worst,
                counterexample={"hypothesis": name, "node": node, "excess": worst},
            )

    upper_equal = [problem.upper.values[k] == b.upper.values[k] for k in range(n)]
    lower_equal = [problem.lower.values[k] == b.lower.values[k] for k in range(n)]
    conclusions = [
        ("Y <= Y'", _worst([a - bb for a, bb in zip(y.values, yb.values)])),
        (
            "1{U'=U} dK- <= dK'-",
            _worst(
                [solution.k_minus.increments[k] - sol_b.k_minus.increments[k] for k in range(n)],
                upper_equal,
            ),
        ),
        (
            "1{L'=L} dK'+ <= dK+",
            _worst(
                [sol_b.k_plus.increments[k] - solution.k_plus.increments[k] for k in range(n)],
                lower_equal,
            ),
        ),
    ]
    details = {name: max(worst, 0.0) for name, (worst, _) in conclusions}
    for name, (worst, node) in conclusions:
        if worst > tol:
            logger.warning(f"Comparison conclusion {name} violated at {node} by {worst:.3e}")
            return ComparisonReport(
                hypotheses_ok=True,
                passed=False,
                max_violation=worst,
                counterexample={"conclusion": name, "node": node, "excess": worst},
                details=details,
            )
    return ComparisonReport(
        hypotheses_ok=True,
        passed=True,
        max_violation=max(details.values()),
        details=details,
    )
