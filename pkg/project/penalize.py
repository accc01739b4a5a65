"""
Penalization scheme for the reflected BSDE with lower data (xi, L, l, delta).

The penalized problems Y^n use the generator n * (l - y)^+ against delta, a lower barrier
L and an upper barrier V taken from the admissible class (supermartingales dominating
L, l on charged nodes and xi). The iterates increase in n. iterate_to_limit certifies the
monotone chain along the schedule and returns the last iterate; the n = inf member of the
family (y* = e v l at charged nodes) is only solved to measure how far that iterate still
is from the supremum.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from project.grbsde import (
    Generator,
    GrbsdeProblem,
    GrbsdeSolution,
    PenaltyForm,
    penalty_fixed_point,
    reflect,
    solve_two_barrier,
    zero_generator,
)
from project.lattice import (
    AdaptedProcess,
    MonotoneMeasure,
    PredictableVolatility,
    TreeModel,
    check_same_model,
    conditional_expectation,
    is_supermartingale,
    weighted_node_sum,
)
from project.logger_config import logger
from project.snell import snell_envelope
from project.utils import (
    BarrierOrderError,
    Config,
    ConfigError,
    ConvergenceError,
    LatticeError,
    MembershipError,
    MonotonicityError,
    SnellError,
)


@dataclass(frozen=True, eq=False)
class LowerData:
    """(xi, L, l, delta); l is read predictably: l(k, j) constrains the step k+1"""

    terminal: np.ndarray
    lower_rcll: AdaptedProcess
    lower_measurable: AdaptedProcess
    measure: MonotoneMeasure

    def __post_init__(self) -> None:
        model = check_same_model(self.lower_rcll, self.lower_measurable, self.measure)
        arr = np.array(self.terminal, dtype=float).reshape(-1)
        if arr.shape != (model.steps + 1,):
            raise LatticeError(
                f"terminal condition needs {model.steps + 1} values, got {arr.shape[0]}"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "terminal", arr)

    @property
    def model(self) -> TreeModel:
        return self.lower_rcll.model

    def replace(self, **changes) -> "LowerData":
        fields = {
            "terminal": self.terminal,
            "lower_rcll": self.lower_rcll,
            "lower_measurable": self.lower_measurable,
            "measure": self.measure,
        }
        fields.update(changes)
        return LowerData(**fields)


def effective_barrier(d: LowerData) -> AdaptedProcess:
    """L v (l on charged nodes) for k < N, xi at N"""
    n = d.model.steps
    values = [
        np.where(
            d.measure.increments[k] > 0,
            np.maximum(d.lower_rcll.values[k], d.lower_measurable.values[k]),
            d.lower_rcll.values[k],
        )
        for k in range(n)
    ]
    values.append(d.terminal)
    return AdaptedProcess(d.model, tuple(values))


def penalty_generator(
    n: float,
    l: AdaptedProcess,  # noqa: E741
    lower: AdaptedProcess | None = None,
) -> Generator:
    """g(k, j, y) = n * (l(k, j) - y)^+ with bound n * (l - L)^+ on the clamp range"""
    if n < 0:
        raise ValueError(f"penalty intensity must be nonnegative, got {n}")
    clamp_low = lower if lower is not None else l

    def bound_step(k: int, low: np.ndarray) -> np.ndarray:
        gap = np.maximum(l.values[k] - low, 0.0)
        out = np.zeros_like(gap)
        out[gap > 0] = n * gap[gap > 0]
        return out

    def evaluate(k: int, j: int, y: float) -> float:
        gap = float(l.values[k][j]) - y
        if gap <= 0 or n == 0:
            return 0.0
        return n * gap

    label = "zero" if n == 0 else f"penalty(n={n:g})"
    return Generator(
        evaluate=evaluate,
        bound=clamp_low.map_steps(bound_step),
        label=label,
        penalty=PenaltyForm(float(n), l),
    )


def _cone_maximum(h: AdaptedProcess) -> np.ndarray:
    """max of h over all ancestors of each terminal node (including the node itself)"""
    running = h.values[0]
    for k in range(1, h.model.steps + 1):
        left = np.concatenate([[-math.inf], running])
        right = np.concatenate([running, [-math.inf]])
        running = np.maximum(h.values[k], np.maximum(left, right))
    return running


def _martingale_from_terminal(model: TreeModel, terminal: np.ndarray) -> AdaptedProcess:
    values = [terminal]
    for _ in range(model.steps):
        values.append(conditional_expectation(values[-1], model))
    return AdaptedProcess(model, tuple(reversed(values)))


def default_dominating_martingale(d: LowerData) -> AdaptedProcess:
    """
    Martingale M(k) = E[C | F_k] dominating L, l and xi.

    C at the terminal node (N, J) is the maximum of h = L v l (k < N), h = xi (k = N)
    over every ancestor of (N, J). It dominates the running maximum of h along any path
    ending at (N, J), and every node is an ancestor of all terminal nodes below it,
    so M(k, j) >= h(k, j).
    """
    model = d.model
    h = d.lower_rcll.maximum(d.lower_measurable).with_terminal(d.terminal)
    terminal = _cone_maximum(h)
    m = _martingale_from_terminal(model, terminal)
    # Exact for p = 1/2; otherwise rounding may leave an ulp-sized deficit
    for _ in range(8):
        deficit = h.max_excess_over(m)
        if deficit <= 0:
            break
        terminal = terminal + 2.0 * deficit
        m = _martingale_from_terminal(model, terminal)
    return m


@dataclass(frozen=True)
class MembershipReport:
    supermartingale_excess: float
    lower_excess: float
    obstacle_excess: float
    terminal_excess: float
    tol: float = 0.0

    @property
    def passed(self) -> bool:
        return max(
            self.supermartingale_excess,
            self.lower_excess,
            self.obstacle_excess,
            self.terminal_excess,
        ) <= self.tol

    @property
    def reason(self) -> str:
        parts = {
            "not a supermartingale": self.supermartingale_excess,
            "below L": self.lower_excess,
            "below l on a charged node": self.obstacle_excess,
            "below xi": self.terminal_excess,
        }
        failing = [f"{name} (by {value:.3e})" for name, value in parts.items() if value > self.tol]
        return "; ".join(failing) or "member"


def is_member(v: AdaptedProcess, d: LowerData, tol: float = 0.0) -> MembershipReport:
    """Membership of v in the class of supermartingales dominating L, l (charged) and xi"""
    check_same_model(v, d.lower_rcll)
    n = d.model.steps
    obstacle_excess = 0.0
    for k in range(n):
        charged = d.measure.increments[k] > 0
        if charged.any():
            gap = d.lower_measurable.values[k][charged] - v.values[k][charged]
            obstacle_excess = max(obstacle_excess, float(gap.max()))
    return MembershipReport(
        supermartingale_excess=is_supermartingale(v).worst_excess,
        lower_excess=max(d.lower_rcll.max_excess_over(v, last=n - 1), 0.0),
        obstacle_excess=obstacle_excess,
        terminal_excess=max(float(np.max(d.terminal - v.terminal)), 0.0),
        tol=tol,
    )


def solve_penalized(
    n: float,
    d: LowerData,
    v: AdaptedProcess | None = None,
    c: Config | None = None,
    check_membership: bool = True,
) -> GrbsdeSolution:
    """Y^n: two-barrier solve with g = n (l - y)^+, lower L and upper V; K- must vanish"""
    c = c or Config()
    v = v if v is not None else default_dominating_martingale(d)
    if check_membership:
        report = is_member(v, d)
        if not report.passed:
            raise MembershipError(f"upper process is not admissible: {report.reason}")
    problem = GrbsdeProblem(
        terminal=d.terminal,
        generator=penalty_generator(n, d.lower_measurable, d.lower_rcll),
        measure=d.measure,
        lower=d.lower_rcll,
        upper=v,
    )
    sol = solve_two_barrier(problem, c)
    if not sol.k_minus.is_zero():
        raise MembershipError(
            f"penalized solve with n={n:g} pushed down by V "
            f"(K- mass {sol.k_minus.total_mass():.3e}); V is not admissible"
        )
    return sol


def terminal_atom_fixpoint(
    xi: float,
    l_T: float,  # noqa: N803
    atom_mass: float,
    n: float,
    lo: float,
    hi: float,
) -> float:
    """y = lo v [xi + n (l_T - y)^+ atom_mass] ^ hi, in closed form"""
    if lo > hi:
        raise BarrierOrderError(f"lo={lo} > hi={hi}")
    if atom_mass < 0:
        raise LatticeError(f"atom mass must be nonnegative, got {atom_mass}")
    pre = penalty_fixed_point(np.array([xi]), np.array([l_T]), n, np.array([atom_mass]))
    y, _, _ = reflect(pre, lo, hi)
    return float(y[0])


@dataclass(frozen=True)
class PenaltySchedule:
    n0: int = Config.N0
    growth: int = Config.GROWTH
    n_max: int = Config.N_MAX

    def __post_init__(self) -> None:
        if self.n0 < 1:
            raise ConfigError("schedule n0 must be at least 1", field="run.schedule.n0")
        if self.growth <= 1:
            raise ConfigError("schedule growth must exceed 1", field="run.schedule.growth")
        if self.n_max < self.n0:
            raise ConfigError("schedule n_max must be at least n0", field="run.schedule.n_max")

    def values(self) -> list[int]:
        out, n = [], self.n0
        while n <= self.n_max:
            out.append(int(n))
            n *= self.growth
        return out


@dataclass(frozen=True)
class TraceRow:
    n: int
    root_value: float
    pre_terminal_value: float
    # sup |Y^n - Y^prev| over nodes; nan on the n = 0 row
    gap_y: float
    obstacle_excess: float
    k_plus_mass: float


@dataclass(frozen=True)
class PenaltyDiagnostics:
    final_n: int
    sup_gap: float
    monotonicity_violation: float
    limit_gap: float
    converged: bool
    # sup (l - Y)^+ over charged nodes, Y taken before the reflection on atom steps
    obstacle_excess: float
    baseline_root: float
    trace: tuple[TraceRow, ...] = ()


@dataclass(frozen=True, eq=False)
class RbsdeSolution:
    """(Y, Z, K+) with K- = 0; dK+(k, j) = Y(k, j) - E[Y_{k+1} | F_k] collects every push"""

    y: AdaptedProcess
    z: PredictableVolatility
    k_plus: MonotoneMeasure
    # implicit-step value y* before the clamp at L; the left limit before an atom
    pre_reflection: tuple[np.ndarray, ...]
    diagnostics: PenaltyDiagnostics
    upper: AdaptedProcess | None = None

    @property
    def model(self) -> TreeModel:
        return self.y.model


def _pre_terminal_mean(sol: GrbsdeSolution) -> float:
    model = sol.model
    k = model.steps - 1
    return float(np.dot(model.probabilities_at(k), sol.y.values[k]))


def obstacle_residual(sol: GrbsdeSolution | RbsdeSolution, d: LowerData) -> float:
    """
    sup (l - Y)^+ over the nodes charged by delta; on atom steps the value before the
    reflection (the left limit) stands in for Y.

    Y + r is in the admissible class when r is the residual, so Y^inf - Y^n <= r.
    """
    worst = 0.0
    for k, inc in enumerate(d.measure.increments):
        charged = inc > 0
        if not charged.any():
            continue
        y = sol.pre_reflection[k] if (k + 1) in d.measure.atom_steps else sol.y.values[k]
        worst = max(worst, float(np.max(d.lower_measurable.values[k][charged] - y[charged])))
    return worst


def _trace_row(sol: GrbsdeSolution, n: int, gap: float, d: LowerData) -> TraceRow:
    return TraceRow(
        n=n,
        root_value=sol.y.root,
        pre_terminal_value=_pre_terminal_mean(sol),
        gap_y=gap,
        obstacle_excess=obstacle_residual(sol, d),
        k_plus_mass=sol.k_plus.total_mass(),
    )


def _total_push(y: AdaptedProcess) -> MonotoneMeasure:
    model = y.model
    increments = []
    for k in range(model.steps):
        push = y.values[k] - conditional_expectation(y.values[k + 1], model)
        increments.append(np.maximum(push, 0.0))
    return MonotoneMeasure(model, tuple(increments))


def limit_solution(
    d: LowerData, v: AdaptedProcess | None = None, c: Config | None = None
) -> GrbsdeSolution:
    """The n = inf member: y* = e v l at charged nodes, equal to sup_n Y^n"""
    return solve_penalized(math.inf, d, v, c)


def iterate_to_limit(
    d: LowerData,
    schedule: PenaltySchedule | None = None,
    tol: float | None = None,
    v: AdaptedProcess | None = None,
    c: Config | None = None,
    strict: bool | None = None,
) -> RbsdeSolution:
    """
    Run the penalty schedule, certify L <= Y^n <= Y^(n+1) <= V, return the last iterate.

    Args:
        d: lower data (xi, L, l, delta)
        schedule: n0, n0*growth, ... up to n_max (default from Config)
        tol: stop once the consecutive-iterate gap on Y and the obstacle residual drop below tol
        v: admissible upper process (default: the dominating martingale)
        c: Config
        strict: raise ConvergenceError when n_max is reached above tol

    Returns:
        RbsdeSolution with Y, Z and K+ of the last solve; diagnostics carry the schedule
        trace (starting with the n = 0 row) and limit_gap, the distance to the n = inf member
    """
    c = c or Config()
    schedule = schedule or PenaltySchedule(c.N0, c.GROWTH, c.N_MAX)
    tol = c.PENALTY_TOL if tol is None else tol
    strict = c.STRICT_CONVERGENCE if strict is None else strict
    v = v if v is not None else default_dominating_martingale(d)
    n_steps = d.model.steps

    report = is_member(v, d)
    if not report.passed:
        raise MembershipError(f"upper process is not admissible: {report.reason}")

    baseline = solve_penalized(0, d, v, c, check_membership=False)
    prev = baseline
    trace: list[TraceRow] = [_trace_row(baseline, 0, math.nan, d)]
    worst_drop = 0.0
    gap = math.inf
    for n in schedule.values():
        sol = solve_penalized(n, d, v, c, check_membership=False)
        drop = max(prev.y.max_excess_over(sol.y), 0.0)
        worst_drop = max(worst_drop, drop)
        if drop > c.CERT_TOL:
            raise MonotonicityError(f"Y^{n} fell below the previous iterate by {drop:.3e}")
        below = d.lower_rcll.max_excess_over(sol.y, last=n_steps - 1)
        above = sol.y.max_excess_over(v, last=n_steps - 1)
        if max(below, above) > c.CERT_TOL:
            raise MonotonicityError(
                f"Y^{n} left the corridor [L, V] (below L by {max(below, 0):.3e}, "
                f"above V by {max(above, 0):.3e})"
            )
        gap = sol.y.max_abs_diff(prev.y)
        row = _trace_row(sol, n, gap, d)
        trace.append(row)
        logger.debug(f"n={n}: Y0={row.root_value:.12g}, gap={gap:.3e}, obstacle={row.obstacle_excess:.3e}")
        prev = sol
        # Iterates pinned at L can agree while l is still above them
        if gap < tol and row.obstacle_excess < tol:
            break

    # Diagnostic only: the supremum of the family, against which the last iterate is measured
    limit = limit_solution(d, v, c)
    overshoot = prev.y.max_excess_over(limit.y)
    if overshoot > c.CERT_TOL:
        raise MonotonicityError(f"last iterate exceeds the limit by {overshoot:.3e}")
    limit_gap = limit.y.max_abs_diff(prev.y)

    reference = snell_envelope(effective_barrier(d))
    mismatch = reference.max_abs_diff(limit.y)
    if mismatch > c.EQUALITY_TOL:
        raise SnellError(
            f"limit disagrees with the envelope of the effective barrier by {mismatch:.3e}"
        )
    if not is_supermartingale(limit.y).passed:
        raise SnellError("penalization limit is not a supermartingale")

    final = trace[-1]
    converged = gap < tol and final.obstacle_excess < tol
    diagnostics = PenaltyDiagnostics(
        final_n=final.n,
        sup_gap=gap,
        monotonicity_violation=worst_drop,
        limit_gap=limit_gap,
        converged=converged,
        obstacle_excess=final.obstacle_excess,
        baseline_root=baseline.y.root,
        trace=tuple(trace),
    )
    if converged:
        logger.info(
            f"Penalization converged at n={diagnostics.final_n} "
            f"(gap {gap:.3e}); Y0={prev.y.root:.12g}"
        )
    else:
        logger.warning(
            f"Penalization gap {gap:.3e} (obstacle residual {final.obstacle_excess:.3e}) "
            f"not below {tol:.1e} at n={diagnostics.final_n}; "
            f"distance to the limit {limit_gap:.3e}"
        )
        if strict:
            raise ConvergenceError(
                f"gap {gap:.3e} or obstacle residual {final.obstacle_excess:.3e} above "
                f"tolerance {tol:.1e} at n_max={schedule.n_max}"
            )

    return RbsdeSolution(
        y=prev.y,
        z=prev.z,
        k_plus=_total_push(prev.y),
        pre_reflection=prev.pre_reflection,
        diagnostics=diagnostics,
        upper=v,
    )


@dataclass(frozen=True)
class MinimalityReport:
    tests: int
    max_residual: float
    corridor_gap: float
    corridor_k_minus: float
    threshold: float
    counterexample: dict | None = None

    @property
    def passed(self) -> bool:
        return (
            self.max_residual <= self.threshold
            and self.corridor_gap <= self.threshold
            and self.corridor_k_minus <= self.threshold
        )


def _skorokhod_sum(sol: RbsdeSolution, barrier: AdaptedProcess) -> float:
    terms = [
        (sol.y.values[k] - barrier.values[k]) * sol.k_plus.increments[k]
        for k in range(sol.model.steps)
    ]
    return abs(weighted_node_sum(terms, sol.model))


def corridor_barriers(
    sol: RbsdeSolution, d: LowerData, trials: int, rng: np.random.Generator
) -> list[AdaptedProcess]:
    """Canonical effective barrier clamped by Y, plus random barriers between it and Y"""
    n = d.model.steps
    low = effective_barrier(d).minimum(sol.y)
    barriers = [low]
    if all((d.lower_rcll.values[k] >= low.values[k]).all() for k in range(n)):
        # L itself is admissible when l never exceeds L on a charged node
        barriers.append(d.lower_rcll.with_terminal(d.terminal))
    for _ in range(trials):
        values = []
        for k in range(n):
            u = rng.uniform(0.0, 1.0, k + 1)
            pick = rng.uniform(0.0, 1.0, k + 1)
            u = np.where(pick < 0.2, 0.0, np.where(pick > 0.8, 1.0, u))
            # Capped at Y: low + (Y - low) can round one ulp above Y
            values.append(np.minimum(low.values[k] + u * (sol.y.values[k] - low.values[k]), sol.y.values[k]))
        values.append(d.terminal)
        barriers.append(AdaptedProcess(d.model, tuple(values)))
    return barriers


def check_minimality(
    sol: RbsdeSolution,
    d: LowerData,
    trials: int | None = None,
    seed: int | None = None,
    tol: float = Config.EQUALITY_TOL,
    c: Config | None = None,
) -> MinimalityReport:
    """
    sum (Y - L*) dK+ over admissible barriers L* (L <= L* <= Y, l <= L* on charged nodes).

    Each L* is also used as the lower barrier of a corridor problem with upper barrier Y
    and no generator; its solution must reproduce Y without any push from above.
    """
    c = c or Config()
    trials = c.MINIMALITY_TRIALS if trials is None else trials
    rng = np.random.default_rng(c.SEED if seed is None else seed)
    threshold = tol * (1.0 + sol.k_plus.total_mass())

    worst, corridor_gap, corridor_km, counterexample = 0.0, 0.0, 0.0, None
    barriers = corridor_barriers(sol, d, trials, rng)
    zero = MonotoneMeasure.zero(d.model)
    for i, barrier in enumerate(barriers):
        residual = _skorokhod_sum(sol, barrier)
        corridor = solve_two_barrier(
            GrbsdeProblem(d.terminal, zero_generator(d.model), zero, barrier, sol.y), c
        )
        gap = corridor.y.max_abs_diff(sol.y)
        km = corridor.k_minus.total_mass()
        if max(residual, gap, km) > max(worst, corridor_gap, corridor_km):
            counterexample = {"barrier": i, "residual": residual, "corridor_gap": gap}
        worst, corridor_gap, corridor_km = max(worst, residual), max(corridor_gap, gap), max(corridor_km, km)

    report = MinimalityReport(
        tests=len(barriers),
        max_residual=worst,
        corridor_gap=corridor_gap,
        corridor_k_minus=corridor_km,
        threshold=threshold,
        counterexample=counterexample if max(worst, corridor_gap, corridor_km) > threshold else None,
    )
    if not report.passed:
        logger.warning(f"Minimality check failed: {report}")
    return report


def sample_class_member(
    d: LowerData,
    rng: np.random.Generator,
    base: AdaptedProcess | None = None,
) -> AdaptedProcess:
    """Random supermartingale above L, l (charged) and xi: martingale + supermartingale + const"""
    model = d.model
    if base is None:
        scale = 0.5 * rng.uniform(0.0, 1.0)
        perturbed = d.replace(
            lower_rcll=d.lower_rcll + _uniform_process(model, rng, scale),
            lower_measurable=d.lower_measurable + _uniform_process(model, rng, scale),
            terminal=d.terminal + rng.uniform(0.0, scale, model.steps + 1),
        )
        base = default_dominating_martingale(perturbed)
    bump = snell_envelope(_uniform_process(model, rng, rng.uniform(0.0, 1.0)))
    return base + bump + float(rng.uniform(0.0, 0.1))


def _uniform_process(model: TreeModel, rng: np.random.Generator, scale: float) -> AdaptedProcess:
    return AdaptedProcess(
        model, tuple(rng.uniform(0.0, scale, k + 1) for k in range(model.steps + 1))
    )


@dataclass(frozen=True)
class ClassReport:
    samples: int
    rejected: int
    violations: int
    max_excess: float
    counterexample: dict | None = field(default=None)

    @property
    def passed(self) -> bool:
        return self.violations == 0


def check_smallest_in_class(
    sol: RbsdeSolution,
    d: LowerData,
    trials: int | None = None,
    seed: int | None = None,
    tol: float = Config.CERT_TOL,
    c: Config | None = None,
) -> ClassReport:
    """Y <= V for the dominating martingale, for Y itself and for random admissible V"""
    c = c or Config()
    trials = c.CLASS_TRIALS if trials is None else trials
    rng = np.random.default_rng(c.SEED if seed is None else seed)

    candidates = [default_dominating_martingale(d), sol.y]
    for i in range(trials):
        # Alternate between fresh dominating martingales and bumps of the solution itself
        base = sol.y if i % 3 == 2 else None
        candidates.append(sample_class_member(d, rng, base=base))

    checked, rejected, violations, worst, counterexample = 0, 0, 0, -math.inf, None
    for i, v in enumerate(candidates):
        membership = is_member(v, d, tol=c.ROOT_TOL * (1.0 + float(np.max(np.abs(v.flat())))))
        if not membership.passed:
            rejected += 1
            continue
        checked += 1
        excess = sol.y.max_excess_over(v)
        worst = max(worst, excess)
        if excess > tol:
            violations += 1
            if counterexample is None:
                counterexample = {"sample": i, "excess": excess, "values": [row.tolist() for row in v.values]}

    report = ClassReport(
        samples=checked,
        rejected=rejected,
        violations=violations,
        max_excess=max(worst, 0.0) if checked else 0.0,
        counterexample=counterexample,
    )
    if violations:
        logger.warning(f"{violations} admissible processes lie below the envelope: {counterexample}")
    return report
