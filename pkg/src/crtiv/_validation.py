"""Shared input-validation helpers."""

import math

from .errors import ConfigError


def check_alpha(alpha: float) -> float:
    """Validate a two-sided test level, returning it as a float in (0, 1)."""
    alpha = float(alpha)
    if not (0.0 < alpha < 1.0) or math.isnan(alpha):
        raise ConfigError(f"alpha must lie strictly between 0 and 1, got {alpha!r}")
    return alpha


def check_count(value, name: str, minimum: int = 1) -> int:
    """Validate an integer count >= minimum."""
    count = int(value)
    if count != value or count < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return count


def check_arm_sizes(m: int, j: int) -> tuple[int, int]:
    """Validate that both arms of a J-cluster design with m treated are nonempty."""
    j = check_count(j, "J", minimum=2)
    m = check_count(m, "m", minimum=1)
    if m >= j:
        raise ConfigError(f"m must satisfy 0 < m < J, got m={m}, J={j}")
    return m, j
