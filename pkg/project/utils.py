"""
Utility functions and configuration for the generalized Snell envelope toolkit.

This module provides the shared infrastructure used by every solver module:
- Config class with numerical tolerances, penalty-schedule defaults and run settings
- Exception hierarchy (SnellError and its subclasses) mapped to CLI exit codes
- Error handling decorator for CLI commands (error_wrapper)
- Atomic file writing (temp file + rename) for emitted CSV/JSON results
- Small run helpers (elapsed time, peak memory)

All modules import from here so that tolerances and error types stay consistent.
"""

import functools
import os
import tempfile
import time
from pathlib import Path

import psutil
from dotenv import load_dotenv

from project.logger_config import logger

# Optional .env file for local overrides (SNELL_LOG_LEVEL, SNELL_OUT_DIR, ...)
load_dotenv()


def _env_float(name: str, default: float) -> float:
    value = os.getenv(name)
    if value is None or value == "":
        return default
    try:
        return float(value)
    except ValueError:
        logger.warning(f"Ignoring non-numeric environment variable {name}={value!r}")
        return default


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    if value is None or value == "":
        return default
    try:
        return int(value)
    except ValueError:
        logger.warning(f"Ignoring non-integer environment variable {name}={value!r}")
        return default


class Config:
    """Main config class"""

    # Implicit-step root finding and certificate residuals
    ROOT_TOL = 1e-12
    CERT_TOL = 1e-10
    # Equality assertions between two envelopes (penalization floor)
    EQUALITY_TOL = 1e-8
    # Stop criterion for the penalty schedule
    PENALTY_TOL = _env_float("SNELL_PENALTY_TOL", 1e-8)
    # Obstacle l <= Y for a finite-n iterate; n = 2**20 on charges >= 0.25 stays below it
    CONSTRAINT_TOL = 1e-5

    # Penalty schedule n0, n0*growth, ..., n_max
    N0 = 1
    GROWTH = 2
    N_MAX = _env_int("SNELL_N_MAX", 2**20)

    BRUTE_FORCE_MAX_DEPTH = 4
    BRACKET_DOUBLINGS = 50
    # Stand-in for an infinite upper barrier
    HUGE = 1e9

    # Randomized certificates (check_minimality, check_smallest_in_class)
    SEED = _env_int("SNELL_SEED", 42)
    MINIMALITY_TRIALS = 100
    CLASS_TRIALS = 500

    OUT_DIR = os.getenv("SNELL_OUT_DIR", "out")
    LOG_LEVEL = os.getenv("SNELL_LOG_LEVEL", "INFO")

    # Raise ConvergenceError instead of reporting non-convergence
    STRICT_CONVERGENCE = False


class SnellError(Exception):
    """Base class for every error raised by the toolkit"""


class LatticeError(SnellError, ValueError):
    """Bad step index, shape mismatch or processes built on different trees"""


class BarrierOrderError(SnellError, ValueError):
    """Lower barrier above the upper barrier at some non-terminal node"""


class ImplicitSolveError(SnellError):
    """No sign change found for the implicit generator step"""


class MembershipError(SnellError, ValueError):
    """A candidate dominating process is not in the admissible class"""


class MonotonicityError(SnellError):
    """The chain L <= Y^n <= Y^(n+1) <= V broke by more than the certificate tolerance"""


class ConvergenceError(SnellError):
    """Penalty schedule exhausted with the iterate gap still above tolerance"""


class HypothesisError(SnellError, ValueError):
    """A precondition of a property check does not hold"""


class ConfigError(SnellError, ValueError):
    """Scenario document could not be parsed or validated"""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


def check_if_c_in_args(args) -> Config:
    """Check if a Config object is in the args, and return it"""
    for arg in args:
        if isinstance(arg, Config):
            return arg
    return Config()


def error_wrapper(filename: str):
    """Log any exception raised by a CLI command together with the command name, then re-raise"""

    def wrapper_outer(func):
        @functools.wraps(func)
        def wrapper_inner(*args, **kwargs):
            c = check_if_c_in_args(args)
            try:
                return func(*args, **kwargs)
            except ConfigError as err:
                # User error, no traceback needed
                logger.error(f"{filename}: invalid scenario: {err}")
                raise
            except Exception as err:
                logger.exception(
                    f"ERROR running '{func.__name__}' in {filename} "
                    f"(seed={c.SEED})! \nError type: {type(err).__name__}. "
                    f"\nError msg: {err}"
                )
                raise

        return wrapper_inner

    return wrapper_outer


def atomic_write_text(path: Path | str, text: str) -> Path:
    """Write text to a temp file in the target directory, then rename it into place"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as file:
            file.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    logger.debug(f"Wrote {path}")
    return path


def peak_memory_mb() -> float:
    """Peak resident memory of this process in MiB (falls back to current RSS)"""
    mem = psutil.Process().memory_info()
    # 'peak_wset' on Windows; Linux only exposes the current RSS through memory_info()
    peak = getattr(mem, "peak_wset", None) or mem.rss
    return round(peak / 1024**2, 2)


class Stopwatch:
    """Context manager measuring wall time in seconds"""

    def __init__(self) -> None:
        self.start = 0.0
        self.seconds = 0.0

    def __enter__(self) -> "Stopwatch":
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc) -> None:
        self.seconds = time.perf_counter() - self.start
