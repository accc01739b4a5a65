"""
Command line interface: solve a scenario, run property suites, or trace the penalization.

    generalized-snell solve american-put --out out/put
    generalized-snell properties scenario.json --suite comparison --instances 50
    generalized-snell trace terminal-atom

Every command writes summary.json (the RunReport) plus its CSV tables into --out.
Exit codes: 0 ok, 1 config error, 2 certificate or property failure, 3 non-convergence.
"""

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from project.envelope import (
    EnvelopeResult,
    PropertyReport,
    generalized_snell,
    run_property_suite,
)
from project.logger_config import logger, set_log_level
from project.penalize import LowerData, PenaltyDiagnostics, iterate_to_limit
from project.scenario_config import (
    PRESETS,
    SUITE_NAMES,
    ScenarioConfig,
    load_scenario,
)
from project.utils import (
    Config,
    ConfigError,
    ConvergenceError,
    SnellError,
    Stopwatch,
    atomic_write_text,
    error_wrapper,
    peak_memory_mb,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FAILED = 2
EXIT_NOT_CONVERGED = 3

NODE_COLUMNS = ["step", "node", "B", "L", "l", "ddelta", "Y", "Z", "dK_plus"]
# gap_y is sup |Y^n - Y^prev| on Y alone, empty on the n = 0 row
TRACE_COLUMNS = ["n", "root_value", "pre_terminal_value", "gap_y", "obstacle_excess", "k_plus_mass"]
PROPERTY_COLUMNS = ["suite", "check", "instance", "passed", "rejected", "residual", "detail"]


@dataclass
class RunReport:
    command: str
    seed: int
    exit_code: int = EXIT_OK
    root_value: float | None = None
    converged: bool | None = None
    certificates: dict[str, dict] = field(default_factory=dict)
    diagnostics: dict[str, Any] = field(default_factory=dict)
    k_plus_profile: list[float] = field(default_factory=list)
    step_values: list[list[float]] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)
    properties: dict[str, Any] = field(default_factory=dict)
    files: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    wall_time_s: float = 0.0
    peak_memory_mb: float = 0.0

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def _jsonable(value: Any) -> Any:
    """Plain JSON types; NaN and infinities become null"""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    text = frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")
    return atomic_write_text(path, text)


def write_summary(report: RunReport, out_dir: Path) -> Path:
    path = out_dir / "summary.json"
    report.files.append(path.name)
    text = json.dumps(report.to_dict(), sort_keys=True, indent=2, allow_nan=False)
    return atomic_write_text(path, text + "\n")


def node_table(result: EnvelopeResult, d: LowerData) -> pd.DataFrame:
    """One row per node (step, node); ddelta, Z and dK_plus are empty at k = N"""
    sol = result.solution
    model = d.model
    n = model.steps
    rows = []
    for k in range(n + 1):
        b = model.brownian_at(k)
        last = k == n
        for j in range(k + 1):
            rows.append(
                {
                    "step": k,
                    "node": j,
                    "B": b[j],
                    "L": d.lower_rcll.values[k][j],
                    "l": d.lower_measurable.values[k][j],
                    "ddelta": math.nan if last else d.measure.increments[k][j],
                    "Y": sol.y.values[k][j],
                    "Z": math.nan if last else sol.z.values[k][j],
                    "dK_plus": math.nan if last else sol.k_plus.increments[k][j],
                }
            )
    return pd.DataFrame(rows, columns=NODE_COLUMNS)


def trace_table(diagnostics: PenaltyDiagnostics) -> pd.DataFrame:
    return pd.DataFrame([asdict(row) for row in diagnostics.trace], columns=TRACE_COLUMNS)


def properties_table(reports: list[PropertyReport]) -> pd.DataFrame:
    rows = [
        {
            "suite": r.suite,
            "check": r.check,
            "instance": r.instance,
            "passed": r.passed,
            "rejected": r.rejected,
            "residual": r.residual,
            "detail": r.detail,
        }
        for r in reports
    ]
    return pd.DataFrame(rows, columns=PROPERTY_COLUMNS)


def _diagnostics_dict(diagnostics: PenaltyDiagnostics) -> dict:
    out = asdict(diagnostics)
    out.pop("trace")
    return out


def _k_plus_profile(result: EnvelopeResult) -> list[float]:
    """Probability-weighted dK+ mass charged to each step 1..N"""
    sol = result.solution
    model = sol.model
    return [
        float(np.dot(model.probabilities_at(k), inc))
        for k, inc in enumerate(sol.k_plus.increments)
    ]


def _require_data(config: ScenarioConfig) -> LowerData:
    if config.data is None:
        raise ConfigError("this command needs a data block", field="data")
    return config.data


@error_wrapper(filename=Path(__file__).name)
def run_solve(config: ScenarioConfig, out_dir: Path, c: Config) -> RunReport:
    """Solve the scenario, write nodes.csv, trace.csv and summary.json"""
    d = _require_data(config)
    report = RunReport(command="solve", seed=c.SEED, config=config.document)
    with Stopwatch() as watch:
        result = generalized_snell(d, c=c, schedule=config.run.schedule(), tol=c.PENALTY_TOL)
    diagnostics = result.solution.diagnostics

    out_dir = Path(out_dir)
    for name, frame in (("nodes.csv", node_table(result, d)), ("trace.csv", trace_table(diagnostics))):
        write_csv(frame, out_dir / name)
        report.files.append(name)

    report.root_value = result.root_value
    report.converged = diagnostics.converged
    report.certificates = {name: asdict(cert) for name, cert in result.certificates.items()}
    report.diagnostics = _diagnostics_dict(diagnostics)
    report.k_plus_profile = _k_plus_profile(result)
    report.step_values = [row.tolist() for row in result.envelope.values]
    report.trace = [asdict(row) for row in diagnostics.trace]
    if not result.passed:
        report.exit_code = EXIT_FAILED
    elif not diagnostics.converged:
        report.exit_code = EXIT_NOT_CONVERGED
    report.wall_time_s = round(watch.seconds, 6)
    report.peak_memory_mb = peak_memory_mb()
    write_summary(report, out_dir)
    logger.info(
        f"solve: Y0={report.root_value:.12g}, exit code {report.exit_code}, "
        f"{watch.seconds:.3f}s, files in {out_dir}"
    )
    return report


@error_wrapper(filename=Path(__file__).name)
def run_properties(
    config: ScenarioConfig,
    suite: str,
    out_dir: Path,
    c: Config,
) -> RunReport:
    """Run a property suite on the scenario data (if any) and seeded random instances"""
    if suite not in SUITE_NAMES:
        raise ConfigError(f"unknown suite {suite!r} (expected one of {SUITE_NAMES})", field="run.suite")
    run = config.run
    report = RunReport(command="properties", seed=c.SEED, config=config.document)
    with Stopwatch() as watch:
        reports = run_property_suite(
            suite,
            instances=run.instances,
            seed=c.SEED,
            depth=run.depth,
            base=config.data,
            violate=run.violate,
            c=c,
        )

    out_dir = Path(out_dir)
    write_csv(properties_table(reports), out_dir / "properties.csv")
    report.files.append("properties.csv")

    failures = [r for r in reports if not r.passed and not r.rejected]
    report.properties = {
        "suite": suite,
        "checks": len(reports),
        "failed": len(failures),
        "rejected": sum(1 for r in reports if r.rejected),
        "max_residual": max(
            (r.residual for r in reports if not r.rejected and not math.isnan(r.residual)),
            default=0.0,
        ),
        "counterexamples": [
            {"suite": r.suite, "check": r.check, "instance": r.instance, "detail": r.detail, "counterexample": r.counterexample}
            for r in failures
        ],
    }
    if failures:
        report.exit_code = EXIT_FAILED
    report.wall_time_s = round(watch.seconds, 6)
    report.peak_memory_mb = peak_memory_mb()
    write_summary(report, out_dir)
    logger.info(
        f"properties: {len(reports)} checks, {len(failures)} failed, exit code {report.exit_code}"
    )
    return report


@error_wrapper(filename=Path(__file__).name)
def run_penalization_trace(config: ScenarioConfig, out_dir: Path, c: Config) -> RunReport:
    """Per-n table from n = 0: Y^n(0), pre-terminal mean, gap on Y, obstacle residual and K+ mass"""
    d = _require_data(config)
    report = RunReport(command="trace", seed=c.SEED, config=config.document)
    with Stopwatch() as watch:
        sol = iterate_to_limit(d, schedule=config.run.schedule(), tol=c.PENALTY_TOL, c=c)
    diagnostics = sol.diagnostics

    out_dir = Path(out_dir)
    write_csv(trace_table(diagnostics), out_dir / "trace.csv")
    report.files.append("trace.csv")

    report.root_value = sol.y.root
    report.converged = diagnostics.converged
    report.diagnostics = _diagnostics_dict(diagnostics)
    report.trace = [asdict(row) for row in diagnostics.trace]
    if not diagnostics.converged:
        report.exit_code = EXIT_NOT_CONVERGED
    report.wall_time_s = round(watch.seconds, 6)
    report.peak_memory_mb = peak_memory_mb()
    write_summary(report, out_dir)
    logger.info(f"trace: {len(diagnostics.trace)} rows, exit code {report.exit_code}")
    return report


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, default=None, help=f"Output directory (default: {Config.OUT_DIR})")
    common.add_argument("--seed", type=int, default=None, help="Seed for randomized checks")
    common.add_argument("--tol", type=float, default=None, help="Penalization stop tolerance")
    common.add_argument("--max-n", type=int, default=None, help="Largest penalty intensity n")
    common.add_argument(
        "--strict", action="store_true", help="Raise on non-convergence instead of reporting it"
    )
    common.add_argument(
        "--verbose", "-v", action="store_true", help="Verbose logging", default=False
    )

    parser = argparse.ArgumentParser(
        prog="generalized-snell",
        description="Generalized Snell envelopes via penalized reflected BSDEs on a binomial tree",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    config_help = f"Scenario JSON file or preset name ({', '.join(PRESETS)})"

    solve = sub.add_parser("solve", parents=[common], help="Solve a scenario")
    solve.add_argument("config", help=config_help)

    props = sub.add_parser("properties", parents=[common], help="Run property suites")
    props.add_argument("config", help=config_help)
    props.add_argument("--suite", choices=SUITE_NAMES, default=None, help="Suite to run (default: run.suite)")
    props.add_argument("--instances", type=int, default=None, help="Random instances per suite")
    props.add_argument("--depth", type=int, default=None, help="Largest random tree depth")
    props.add_argument(
        "--violate", choices=["xi"], default=None, help="Break a comparison hypothesis on purpose"
    )

    trace = sub.add_parser("trace", parents=[common], help="Trace the penalization schedule")
    trace.add_argument("config", help=config_help)
    return parser


def _apply_overrides(config: ScenarioConfig, args: argparse.Namespace) -> ScenarioConfig:
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.tol is not None:
        changes["penalty_tol"] = args.tol
    if args.max_n is not None:
        changes["n_max"] = args.max_n
    for name in ("instances", "depth", "violate"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    if not changes:
        return config
    run = replace(config.run, **changes)
    run.schedule()
    return replace(config, run=run)


def main(argv: list[str] | None = None) -> int:
    """Command line interface"""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        set_log_level(logging.DEBUG)

    c = Config()
    try:
        config = _apply_overrides(load_scenario(args.config), args)
        config.make_config(c)
        c.STRICT_CONVERGENCE = args.strict or c.STRICT_CONVERGENCE
        out_dir = args.out if args.out is not None else Path(c.OUT_DIR)

        if args.command == "solve":
            report = run_solve(config, out_dir, c)
        elif args.command == "properties":
            report = run_properties(config, args.suite or config.run.suite, out_dir, c)
        else:
            report = run_penalization_trace(config, out_dir, c)
    except ConfigError as err:
        logger.error(f"Invalid scenario: {err}")
        return EXIT_CONFIG
    except ConvergenceError as err:
        logger.error(f"Penalization did not converge: {err}")
        return EXIT_NOT_CONVERGED
    except SnellError as err:
        logger.error(f"Run failed: {err}")
        return EXIT_FAILED
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
