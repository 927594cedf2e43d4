"""Exception taxonomy.

Split along the CLI's exit-code partition: trial/config problems (exit 1)
versus statistical degeneracy discovered during estimation (exit 2).
"""


class CrtivError(Exception):
    """Base class for all package errors."""


class InvalidTrialError(CrtivError):
    """Observed-data file or record collection cannot form a valid two-arm trial."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(CrtivError):
    """Invalid configuration value (scenario file, calibration input, ...)."""


class InvalidLambda(ConfigError):
    """Intraclass correlation target outside [0, 1) or undefined for the error df."""


class EmptyPiSource(ConfigError):
    """No (size, compliance) rows available to resample."""


class EstimationError(CrtivError):
    """Statistical degeneracy: the requested quantity does not exist for these data."""


class ZeroDenominator(EstimationError):
    """Estimated compliance difference is zero; the ratio estimand is undefined."""


class DegenerateVariance(EstimationError):
    """Too few clusters to form the variance estimate."""


class RankDeficientFirstStage(EstimationError):
    """All first-stage fitted values identical; the second-stage design is singular."""


class DegenerateArm(EstimationError):
    """An arm has fewer than two clusters; a within-arm variance is undefined."""


class NoCompliers(EstimationError):
    """Population spec contains no compliers; complier-weighted quantities are undefined."""


class CapExceeded(CrtivError):
    """Exhaustive assignment enumeration would exceed the configured cap.

    Carries the offending count so callers can switch to Monte Carlo mode.
    """

    def __init__(self, count: int, cap: int):
        super().__init__(
            f"exhaustive enumeration needs {count} assignments, cap is {cap}; "
            "use Monte Carlo mode (draws=...)"
        )
        self.count = count
        self.cap = cap
