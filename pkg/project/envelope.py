"""
Generalized Snell envelope S(L, l, delta, xi) and its property checks.

generalized_snell wraps the last penalized iterate and attaches four certificates. The
check_* functions verify the corollary identities, the classical coincidence, the
atom/continuous split and the Lebesgue-measure example; run_property_suite runs them
on seeded random instances for the CLI.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from project.grbsde import compare_minimal
from project.instances import (
    comparison_pair,
    ordered_pair,
    random_lower_data,
    random_model,
    random_process,
    sandwich_pair,
)
from project.lattice import (
    AdaptedProcess,
    MonotoneMeasure,
    absolutely_continuous,
    decompose_atoms,
    equivalent,
    is_supermartingale,
    weighted_node_sum,
)
from project.logger_config import logger
from project.penalize import (
    LowerData,
    PenaltySchedule,
    RbsdeSolution,
    check_minimality,
    check_smallest_in_class,
    effective_barrier,
    iterate_to_limit,
)
from project.snell import brute_force_value, snell_envelope
from project.utils import Config, HypothesisError

SUITES = ("corollary", "comparison", "coincidence", "atom-split")


@dataclass(frozen=True)
class CertificateReport:
    name: str
    passed: bool
    residual: float
    detail: str = ""


@dataclass(frozen=True, eq=False)
class EnvelopeResult:
    envelope: AdaptedProcess
    solution: RbsdeSolution
    certificates: dict[str, CertificateReport]
    effective_barrier: AdaptedProcess

    @property
    def root_value(self) -> float:
        return self.envelope.root

    @property
    def passed(self) -> bool:
        return all(cert.passed for cert in self.certificates.values())


@dataclass(frozen=True)
class PropertyReport:
    check: str
    passed: bool
    residual: float
    detail: str = ""
    instance: int | None = None
    suite: str = ""
    # precondition not met: the conclusion was not evaluated
    rejected: bool = False
    counterexample: dict | None = field(default=None)


def _envelope(d: LowerData, c: Config | None = None) -> RbsdeSolution:
    """S(d) as the last iterate of the penalty schedule"""
    return iterate_to_limit(d, c=c)


def _band(*solutions: RbsdeSolution) -> float:
    """Distance of the iterates to the n = inf member, measured by iterate_to_limit"""
    return max(sol.diagnostics.limit_gap for sol in solutions)


def _certify(
    sol: RbsdeSolution,
    d: LowerData,
    c: Config,
    trials: int | None,
    seed: int | None,
) -> dict[str, CertificateReport]:
    # A finite-n iterate may sit below l by the obstacle residual; the push measure only
    # charges nodes where Y meets the clamped barrier
    barrier = effective_barrier(d).minimum(sol.y)
    n = d.model.steps
    mass = sol.k_plus.total_mass()
    terms = [(sol.y.values[k] - barrier.values[k]) * sol.k_plus.increments[k] for k in range(n)]
    skorokhod = abs(weighted_node_sum(terms, d.model))
    minimality = check_minimality(sol, d, trials=trials, seed=seed, c=c)
    in_class = check_smallest_in_class(sol, d, trials=trials, seed=seed, c=c)

    sup = is_supermartingale(sol.y)
    below_lower = max(d.lower_rcll.max_excess_over(sol.y, last=n - 1), 0.0)
    below_obstacle = _charged_excess(d.lower_measurable, sol.y, d.measure)
    terminal_gap = float(np.max(np.abs(sol.y.terminal - d.terminal)))
    return {
        "skorokhod": CertificateReport(
            "skorokhod",
            skorokhod <= c.CERT_TOL * (1.0 + mass),
            skorokhod,
            f"sum (Y - L_eff ^ Y) dK+ over {n} steps, K+ mass {mass:.6g}",
        ),
        "minimality": CertificateReport(
            "minimality",
            minimality.passed,
            max(minimality.max_residual, minimality.corridor_gap),
            f"{minimality.tests} barriers, corridor K- {minimality.corridor_k_minus:.3e}",
        ),
        "smallest_in_class": CertificateReport(
            "smallest_in_class",
            in_class.passed,
            in_class.max_excess,
            f"{in_class.samples} admissible V ({in_class.rejected} rejected), "
            f"{in_class.violations} violations",
        ),
        "supermartingale": CertificateReport(
            "supermartingale",
            sup.passed
            and below_lower == 0.0
            and below_obstacle <= c.CONSTRAINT_TOL
            and terminal_gap == 0.0,
            max(sup.worst_excess, below_lower, below_obstacle, terminal_gap),
            f"l - Y up to {below_obstacle:.3e} on charged nodes"
            + (f", worst node {sup.worst_node}" if sup.worst_node else ""),
        ),
    }


def generalized_snell(
    d: LowerData,
    c: Config | None = None,
    schedule: PenaltySchedule | None = None,
    tol: float | None = None,
    trials: int | None = None,
    seed: int | None = None,
) -> EnvelopeResult:
    """S(L, l, delta, xi): last penalized iterate plus skorokhod, minimality, class and supermartingale certificates"""
    c = c or Config()
    sol = iterate_to_limit(d, schedule=schedule, tol=tol, c=c)
    certificates = _certify(sol, d, c, trials, seed)
    result = EnvelopeResult(
        envelope=sol.y,
        solution=sol,
        certificates=certificates,
        effective_barrier=effective_barrier(d),
    )
    failed = [name for name, cert in certificates.items() if not cert.passed]
    if failed:
        logger.warning(f"Envelope certificates failed: {failed}")
    else:
        logger.info(f"Generalized Snell envelope Y0={result.root_value:.12g}, all certificates pass")
    return result


def _report(check: str, residual: float, tol: float, detail: str = "", **kwargs) -> PropertyReport:
    passed = residual <= tol
    if not passed:
        logger.warning(f"{check} failed: residual {residual:.3e} > {tol:.1e} {detail}")
    return PropertyReport(check=check, passed=passed, residual=residual, detail=detail, **kwargs)


def check_bar_substitution(d: LowerData, c: Config | None = None) -> PropertyReport:
    """S(L, l, delta, xi) = S(L, l v L_prev, delta, xi); L_prev for the step k+1 is L(k, .)"""
    c = c or Config()
    lifted = d.replace(lower_measurable=d.lower_measurable.maximum(d.lower_rcll))
    a, b = _envelope(d, c), _envelope(lifted, c)
    band = _band(a, b)
    diff = a.y.max_abs_diff(b.y)
    return _report("bar_substitution", diff, c.EQUALITY_TOL + band, f"limit band {band:.3e}")


def _precondition(name: str, excess: float, tol: float) -> None:
    if excess > tol:
        raise HypothesisError(f"precondition '{name}' violated by {excess:.3e}")


def _charged_excess(a: AdaptedProcess, b: AdaptedProcess, measure: MonotoneMeasure) -> float:
    """max of a - b over the nodes charged by measure (0 if none)"""
    worst = 0.0
    for k, inc in enumerate(measure.increments):
        charged = inc > 0
        if charged.any():
            worst = max(worst, float(np.max(a.values[k][charged] - b.values[k][charged])))
    return worst


def check_monotone(d: LowerData, d_prime: LowerData, c: Config | None = None) -> PropertyReport:
    """S(d') <= S(d) when L' <= L, delta' << delta, l' <= l (delta'-charged) and xi' <= xi"""
    c = c or Config()
    n = d.model.steps
    _precondition("L' <= L", d_prime.lower_rcll.max_excess_over(d.lower_rcll, last=n - 1), 0.0)
    if not absolutely_continuous(d_prime.measure, d.measure):
        raise HypothesisError("precondition 'delta' << delta' violated")
    _precondition(
        "l' <= l on delta'-charged nodes",
        _charged_excess(d_prime.lower_measurable, d.lower_measurable, d_prime.measure),
        0.0,
    )
    _precondition("xi' <= xi", float(np.max(d_prime.terminal - d.terminal)), 0.0)
    upper = _envelope(d, c)
    # Y'^n <= Y'^inf <= Y^inf <= Y^n + band
    band = _band(upper)
    excess = max(_envelope(d_prime, c).y.max_excess_over(upper.y), 0.0)
    return _report("monotone", excess, c.EQUALITY_TOL + band, f"limit band {band:.3e}")


def check_domination(d: LowerData, c: Config | None = None) -> PropertyReport:
    """S(L, l, delta, xi) >= S(L^xi), with equality when l <= L_prev on charged nodes"""
    c = c or Config()
    full = _envelope(d, c).y
    classical = _envelope(d.replace(measure=MonotoneMeasure.zero(d.model)), c).y
    shortfall = max(classical.max_excess_over(full), 0.0)
    equality_case = _charged_excess(d.lower_measurable, d.lower_rcll, d.measure) <= 0.0
    if equality_case:
        residual = full.max_abs_diff(classical)
        detail = "equality case (l <= L_prev on charged nodes)"
    else:
        residual = shortfall
        detail = f"max premium over S(L^xi): {full.max_excess_over(classical):.6g}"
    return _report("domination", residual, c.EQUALITY_TOL, detail)


def check_sandwich(
    d: LowerData,
    d_prime: LowerData,
    c: Config | None = None,
    l_star: AdaptedProcess | None = None,
) -> PropertyReport:
    """
    S(d') = S(d) when l <= l' <= Y_prev v l on delta-charged nodes, L <= L' <= Y for k < N,
    delta ~ delta' and xi' = xi, where Y = S(d). Y is a finite-n iterate, so l may still
    sit above it; the supremum of the iterates dominates Y v l on charged nodes.

    Also checks S(L*) = Y for a corridor barrier L_eff ^ Y <= L* <= Y with L*_N = xi
    (default: the effective barrier of d, clamped by Y).
    """
    c = c or Config()
    n = d.model.steps
    sol = _envelope(d, c)
    y = sol.y
    _precondition("l <= l'", _charged_excess(d.lower_measurable, d_prime.lower_measurable, d.measure), 0.0)
    ceiling = y.maximum(d.lower_measurable)
    _precondition("l' <= Y_prev v l", _charged_excess(d_prime.lower_measurable, ceiling, d.measure), 0.0)
    _precondition("L <= L'", d.lower_rcll.max_excess_over(d_prime.lower_rcll, last=n - 1), 0.0)
    _precondition("L' <= Y", d_prime.lower_rcll.max_excess_over(y, last=n - 1), 0.0)
    if not equivalent(d.measure, d_prime.measure):
        raise HypothesisError("precondition 'delta ~ delta'' violated")
    if not np.array_equal(d.terminal, d_prime.terminal):
        raise HypothesisError("precondition 'same terminal condition' violated")

    low = effective_barrier(d).minimum(y)
    if l_star is None:
        l_star = low
    _precondition("L_eff ^ Y <= L*", low.max_excess_over(l_star, last=n - 1), 0.0)
    _precondition("L* <= Y", l_star.max_excess_over(y, last=n - 1), 0.0)
    l_star = l_star.with_terminal(d.terminal)

    other = _envelope(d_prime, c)
    # Both iterates lie below the common n = inf member
    band = _band(sol, other)
    diff = other.y.max_abs_diff(y)
    star_diff = snell_envelope(l_star).max_abs_diff(y)
    detail = f"S(d') gap {diff:.3e} (limit band {band:.3e}), S(L*) gap {star_diff:.3e}"
    if star_diff > c.EQUALITY_TOL:
        return _report("sandwich", star_diff, c.EQUALITY_TOL, detail)
    return _report("sandwich", diff, c.EQUALITY_TOL + band, detail)


def check_classical_coincidence(
    lower: AdaptedProcess,
    c: Config | None = None,
) -> PropertyReport:
    """S(L, 0, 0, L_N) against backward induction and, for depth <= 4, the brute-force oracle"""
    c = c or Config()
    model = lower.model
    d = LowerData(
        terminal=lower.terminal,
        lower_rcll=lower,
        lower_measurable=AdaptedProcess.zeros(model),
        measure=MonotoneMeasure.zero(model),
    )
    generalized = iterate_to_limit(d, c=c).y
    classical = snell_envelope(lower)
    residual = generalized.max_abs_diff(classical)
    detail = f"nodewise gap {residual:.3e}"
    if model.steps <= c.BRUTE_FORCE_MAX_DEPTH:
        brute = brute_force_value(lower, c.BRUTE_FORCE_MAX_DEPTH)
        root_gap = abs(brute - generalized.root)
        detail += f", brute-force root gap {root_gap:.3e}"
        if root_gap > c.ROOT_TOL:
            return _report("classical_coincidence", root_gap, c.ROOT_TOL, detail)
    return _report("classical_coincidence", residual, c.EQUALITY_TOL, detail)


def check_atom_split(
    d: LowerData,
    c: Config | None = None,
    solution=None,
) -> PropertyReport:
    """
    l <= Y on nodes charged by the continuous part of delta, and l <= Y_pre (the value
    just before the atom, from the implicit step) on atom steps.

    Args:
        d: lower data
        c: Config
        solution: any solution exposing y and pre_reflection (default: the last iterate of
            the schedule in c)
    """
    c = c or Config()
    if solution is None:
        solution = iterate_to_limit(d, c=c)
    continuous, atoms = decompose_atoms(d.measure)
    obstacle = d.lower_measurable
    cont_excess = _charged_excess(obstacle, solution.y, continuous)
    atom_excess = 0.0
    for step in atoms:
        k = step - 1
        charged = d.measure.increments[k] > 0
        if charged.any():
            gap = obstacle.values[k][charged] - solution.pre_reflection[k][charged]
            atom_excess = max(atom_excess, float(gap.max()))
    return _report(
        "atom_split",
        max(cont_excess, atom_excess),
        c.CONSTRAINT_TOL,
        f"atoms {atoms}: continuous excess {cont_excess:.3e}, left-limit excess {atom_excess:.3e}",
    )


def lebesgue_example(
    lower: AdaptedProcess,
    obstacle: AdaptedProcess,
    xi,
    c: Config | None = None,
    **kwargs,
) -> EnvelopeResult:
    """delta_t = t: the smallest supermartingale with l <= Y dt-a.e. and xi <= Y_N"""
    c = c or Config()
    n = lower.model.steps
    excess = lower.max_excess_over(obstacle, last=n - 1)
    if excess > 0:
        raise HypothesisError(f"the Lebesgue case needs L <= l; L exceeds l by {excess:.3e}")
    d = LowerData(
        terminal=xi,
        lower_rcll=lower,
        lower_measurable=obstacle,
        measure=MonotoneMeasure.lebesgue(lower.model),
    )
    result = generalized_snell(d, c=c, **kwargs)
    below = max(obstacle.max_excess_over(result.envelope, last=n - 1), 0.0)
    terminal_gap = max(float(np.max(d.terminal - result.envelope.terminal)), 0.0)
    result.certificates["lebesgue"] = CertificateReport(
        "lebesgue",
        below <= c.CONSTRAINT_TOL and terminal_gap == 0.0,
        max(below, terminal_gap),
        f"l <= Y on every step within {c.CONSTRAINT_TOL:.0e} and xi <= Y_N",
    )
    return result


def _guarded(check, *args, **kwargs) -> PropertyReport:
    try:
        return check(*args, **kwargs)
    except HypothesisError as err:
        return PropertyReport(check=check.__name__.removeprefix("check_"), passed=False, residual=math.nan, detail=str(err), rejected=True)


def run_property_suite(
    name: str,
    instances: int = 20,
    seed: int = Config.SEED,
    depth: int = 8,
    base: LowerData | None = None,
    violate: str | None = None,
    c: Config | None = None,
) -> list[PropertyReport]:
    """
    Run a named suite ('corollary', 'comparison', 'coincidence', 'atom-split' or 'all').

    Instance 0 is `base` when given; `instances` further random instances follow.
    """
    c = c or Config()
    if name == "all":
        out: list[PropertyReport] = []
        for suite in SUITES:
            out += run_property_suite(suite, instances, seed, depth, base, violate, c)
        return out
    if name not in SUITES:
        raise ValueError(f"unknown suite '{name}'; expected one of {SUITES + ('all',)}")

    rng = np.random.default_rng(seed)
    data = [base] if base is not None else []
    for _ in range(instances):
        data.append(random_lower_data(random_model(rng, depth), rng, atoms=name != "coincidence"))

    reports: list[PropertyReport] = []
    for i, d in enumerate(data):
        if name == "corollary":
            y = _envelope(d, c).y
            found = [
                _guarded(check_bar_substitution, d, c),
                _guarded(check_monotone, d, ordered_pair(d, rng), c),
                _guarded(check_domination, d, c),
                _guarded(check_sandwich, d, sandwich_pair(d, y, rng), c),
            ]
        elif name == "comparison":
            problem, solution, other = comparison_pair(d, rng, violate=violate, c=c)
            rep = compare_minimal(problem, solution, other, tol=c.CERT_TOL)
            found = [
                PropertyReport(
                    check="comparison",
                    passed=rep.passed,
                    residual=rep.max_violation if rep.hypotheses_ok else math.nan,
                    detail=(
                        f"hypothesis rejected: {rep.failed_hypothesis}"
                        if not rep.hypotheses_ok
                        else ", ".join(f"{k}: {v:.3e}" for k, v in rep.details.items())
                    ),
                    rejected=not rep.hypotheses_ok,
                    counterexample=rep.counterexample,
                )
            ]
        elif name == "coincidence":
            own_data = base is not None and i == 0
            lower = d.lower_rcll.with_terminal(d.terminal) if own_data else d.lower_rcll
            found = [_guarded(check_classical_coincidence, lower, c)]
            if d.model.steps > c.BRUTE_FORCE_MAX_DEPTH:
                # Brute-force cross-check on a small tree from the same stream
                small = random_process(random_model(rng, c.BRUTE_FORCE_MAX_DEPTH), rng)
                found.append(_guarded(check_classical_coincidence, small, c))
        else:
            found = [_guarded(check_atom_split, d, c)]
        for rep in found:
            reports.append(
                PropertyReport(**{**rep.__dict__, "instance": i, "suite": name})
            )

    failed = sum(1 for r in reports if not r.passed and not r.rejected)
    rejected = sum(1 for r in reports if r.rejected)
    logger.info(
        f"Suite '{name}': {len(reports)} checks on {len(data)} instances, "
        f"{failed} failed, {rejected} rejected"
    )
    return reports
