"""Confidence regions for the complier effect ratio.

Two inversion engines share this module: a quadratic (Fieller-type) inversion
of the asymptotic test |T(tau0)| <= z * S(tau0), and an exact assignment
(permutation) test that fixes the adjusted responses A_j(tau0) = Y_j - tau0 D_j
and re-randomizes which m of the J clusters are treated.

Regions are sets, not always intervals: inverting a ratio test can yield a
finite interval, the complement of an interval (two rays), the whole line, or
nothing.  All four kinds are first-class values here.
"""

import itertools
import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.stats import norm

from ._validation import check_alpha, check_arm_sizes
from .data import cluster_sum_arrays
from .errors import CapExceeded, DegenerateArm

DEFAULT_ENUMERATION_CAP = 2_000_000
_CHUNK = 200_000

# Absolute slack when comparing exact-rational permutation p-values to alpha;
# boundary ties (p == alpha) count as accepted.
_P_BOUNDARY_EPS = 1e-12


class RegionKind(str, Enum):
    FINITE_INTERVAL = "FiniteInterval"
    COMPLEMENT_OF_INTERVAL = "ComplementOfInterval"
    WHOLE_LINE = "WholeLine"
    EMPTY = "Empty"


@dataclass(frozen=True)
class ConfidenceRegion:
    """A subset of the real line at confidence level 1 - alpha.

    kind FINITE_INTERVAL:         [lo, hi]
    kind COMPLEMENT_OF_INTERVAL:  (-inf, lo] union [hi, inf); (lo, hi) is excluded
    kind WHOLE_LINE:              all reals (lo and hi are None)
    kind EMPTY:                   no reals (lo and hi are None)
    """

    kind: RegionKind
    lo: float | None
    hi: float | None
    alpha: float

    def contains(self, x: float) -> bool:
        if self.kind is RegionKind.FINITE_INTERVAL:
            return self.lo <= x <= self.hi
        if self.kind is RegionKind.COMPLEMENT_OF_INTERVAL:
            return x <= self.lo or x >= self.hi
        return self.kind is RegionKind.WHOLE_LINE

    @property
    def is_infinite(self) -> bool:
        return self.kind in (RegionKind.COMPLEMENT_OF_INTERVAL, RegionKind.WHOLE_LINE)

    @property
    def length(self) -> float:
        if self.kind is RegionKind.FINITE_INTERVAL:
            return self.hi - self.lo
        if self.kind is RegionKind.EMPTY:
            return 0.0
        return math.inf

    def describe(self) -> str:
        """Human-readable rendering used by the CLI text format."""
        if self.kind is RegionKind.FINITE_INTERVAL:
            return f"[{self.lo:.6g}, {self.hi:.6g}]"
        if self.kind is RegionKind.COMPLEMENT_OF_INTERVAL:
            return f"(-inf, {self.lo:.6g}] U [{self.hi:.6g}, inf)"
        if self.kind is RegionKind.WHOLE_LINE:
            return "(-inf, inf)"
        return "empty"


def normal_quantile(alpha: float) -> float:
    """Two-sided standard normal critical value z_{1 - alpha/2}."""
    return float(norm.ppf(1.0 - check_alpha(alpha) / 2.0))


def _arm_split(summaries, m, j):
    y, d, z = cluster_sum_arrays(summaries)
    if len(summaries) != j:
        raise ValueError(f"expected J={j} summaries, got {len(summaries)}")
    if int((z == 1).sum()) != m:
        raise ValueError("m does not match the number of treated summaries")
    treated = z == 1
    return y, d, treated


def mean_sum_diffs(summaries, m: int, j: int) -> tuple[float, float]:
    """Differences of arm means of cluster totals: the test statistic's scale.

    Returns (sum_T Y_j / m - sum_C Y_j / (J-m), same for D).  These equal the
    ITT estimates of data_model up to the common factor J/n, which cancels in
    the effect ratio.
    """
    m, j = check_arm_sizes(m, j)
    y, d, treated = _arm_split(summaries, m, j)
    num = y[treated].mean() - y[~treated].mean()
    den = d[treated].mean() - d[~treated].mean()
    return float(num), float(den)


def variance_s2(summaries, m: int, j: int, tau0: float) -> float:
    """Conservative variance of T(tau0) from adjusted responses A_j = Y_j - tau0 D_j.

    S^2 = sum_T (A_j - A_bar_T)^2 / (m (m-1))
        + sum_C (A_j - A_bar_C)^2 / ((J-m) (J-m-1))
    """
    m, j = check_arm_sizes(m, j)
    if m < 2 or j - m < 2:
        raise DegenerateArm(f"both arms need >= 2 clusters for S^2, got m={m}, J-m={j - m}")
    y, d, treated = _arm_split(summaries, m, j)
    a = y - tau0 * d
    at = a[treated]
    ac = a[~treated]
    st = float(((at - at.mean()) ** 2).sum()) / (m * (m - 1))
    sc = float(((ac - ac.mean()) ** 2).sum()) / ((j - m) * (j - m - 1))
    return st + sc


@dataclass(frozen=True)
class QuadraticCoefficients:
    """Coefficients of the inversion polynomial a tau^2 + 2 b tau + c <= 0.

    The six s2_* components are per-arm sample variances/covariances of cluster
    totals (divisors m-1 and J-m-1); mu_y and mu_d are differences of arm means
    of cluster totals.  z is the normal critical value.
    """

    a: float
    b: float
    c: float
    mu_y: float
    mu_d: float
    s2_y_t: float
    s2_y_c: float
    s2_d_t: float
    s2_d_c: float
    s_yd_t: float
    s_yd_c: float
    z: float


def quadratic_coefficients(summaries, m: int, j: int, alpha: float = 0.05) -> QuadraticCoefficients:
    """Compute the quadratic inversion coefficients at level alpha."""
    m, j = check_arm_sizes(m, j)
    alpha = check_alpha(alpha)
    if m < 2 or j - m < 2:
        raise DegenerateArm(
            f"both arms need >= 2 clusters for the quadratic region, got m={m}, J-m={j - m}"
        )
    y, d, treated = _arm_split(summaries, m, j)
    yt, yc = y[treated], y[~treated]
    dt, dc = d[treated], d[~treated]
    dyt = yt - yt.mean()
    dyc = yc - yc.mean()
    # The D-arm spreads center at the D-arm means of cluster totals.
    ddt = dt - dt.mean()
    ddc = dc - dc.mean()
    s2_y_t = float((dyt**2).sum()) / (m - 1)
    s2_y_c = float((dyc**2).sum()) / (j - m - 1)
    s2_d_t = float((ddt**2).sum()) / (m - 1)
    s2_d_c = float((ddc**2).sum()) / (j - m - 1)
    s_yd_t = float((dyt * ddt).sum()) / (m - 1)
    s_yd_c = float((dyc * ddc).sum()) / (j - m - 1)
    mu_y = float(yt.mean() - yc.mean())
    mu_d = float(dt.mean() - dc.mean())
    z = normal_quantile(alpha)
    z2 = z * z
    a = mu_d**2 - z2 * (s2_d_t / m + s2_d_c / (j - m))
    b = -(mu_y * mu_d - z2 * (s_yd_t / m + s_yd_c / (j - m)))
    c = mu_y**2 - z2 * (s2_y_t / m + s2_y_c / (j - m))
    return QuadraticCoefficients(
        a=a, b=b, c=c, mu_y=mu_y, mu_d=mu_d,
        s2_y_t=s2_y_t, s2_y_c=s2_y_c, s2_d_t=s2_d_t, s2_d_c=s2_d_c,
        s_yd_t=s_yd_t, s_yd_c=s_yd_c, z=z,
    )


def quadratic_region(summaries, m: int, j: int, alpha: float = 0.05) -> ConfidenceRegion:
    """Invert |T(tau0)| <= z S(tau0) in closed form.

    Solves a tau0^2 + 2 b tau0 + c <= 0.  a > 0 with a real root pair gives a
    finite interval; a < 0 gives two rays (positive discriminant) or the whole
    line, the signature of a weak instrument.  a > 0 with no real roots gives
    an empty region, which is reported with a warning rather than hidden.
    """
    q = quadratic_coefficients(summaries, m, j, alpha)
    a, b, c = q.a, q.b, q.c
    alpha = check_alpha(alpha)
    if a == 0.0:
        # Degenerate linear inequality 2 b tau + c <= 0: a half line (b != 0)
        # or a constant truth value.  No half-line kind exists; report the
        # conservative superset.
        if b == 0.0 and c > 0.0:
            warnings.warn("empty confidence region: the test rejects every tau0")
            return ConfidenceRegion(RegionKind.EMPTY, None, None, alpha)
        if b != 0.0:
            warnings.warn("half-line acceptance set reported as the whole line")
        return ConfidenceRegion(RegionKind.WHOLE_LINE, None, None, alpha)
    disc = b * b - a * c
    if a > 0.0:
        if disc < 0.0:
            warnings.warn("empty confidence region: the test rejects every tau0")
            return ConfidenceRegion(RegionKind.EMPTY, None, None, alpha)
        root = math.sqrt(disc)
        lo = (-b - root) / a
        hi = (-b + root) / a
        return ConfidenceRegion(RegionKind.FINITE_INTERVAL, lo, hi, alpha)
    if disc > 0.0:
        root = math.sqrt(disc)
        r1 = (-b - root) / a
        r2 = (-b + root) / a
        lo, hi = (r1, r2) if r1 <= r2 else (r2, r1)
        return ConfidenceRegion(RegionKind.COMPLEMENT_OF_INTERVAL, lo, hi, alpha)
    return ConfidenceRegion(RegionKind.WHOLE_LINE, None, None, alpha)


@dataclass(frozen=True)
class PermutationNull:
    """The assignment-test null distribution at one candidate effect tau0.

    statistics holds the difference-in-arm-means of A_j(tau0) over every
    enumerated assignment (exhaustive) or over the sampled ones plus the
    observed assignment (Monte Carlo), so the observed statistic is always a
    member of the multiset.
    """

    tau0: float
    statistics: np.ndarray
    observed: float
    exhaustive: bool
    draws: int | None
    seed: int | None

    def two_sided_p_value(self) -> float:
        return _two_sided_p(self.statistics, self.observed)


def _two_sided_p(stats: np.ndarray, observed: float) -> float:
    scale = max(1.0, float(np.abs(stats).max(initial=0.0)), abs(observed))
    eps = 1e-12 * scale
    total = stats.shape[0]
    # Ties count toward both tails (conservative).
    lower = int(np.count_nonzero(stats <= observed + eps))
    upper = int(np.count_nonzero(stats >= observed - eps))
    return min(1.0, 2.0 * min(lower, upper) / total)


def _observed_combo_sums(y, d, treated):
    return float(y[treated].sum()), float(d[treated].sum())


def _exhaustive_combo_sums(y, d, j, m, cap):
    count = math.comb(j, m)
    if count > cap:
        raise CapExceeded(count, cap)
    sy = np.empty(count, dtype=float)
    sd = np.empty(count, dtype=float)
    combos = itertools.combinations(range(j), m)
    pos = 0
    while True:
        block = list(itertools.islice(combos, _CHUNK))
        if not block:
            break
        idx = np.array(block, dtype=np.intp)
        sy[pos : pos + len(block)] = y[idx].sum(axis=1)
        sd[pos : pos + len(block)] = d[idx].sum(axis=1)
        pos += len(block)
    return sy, sd


def _sampled_combo_sums(y, d, j, m, draws, seed, treated):
    rng = np.random.default_rng(seed)
    sy = np.empty(draws + 1, dtype=float)
    sd = np.empty(draws + 1, dtype=float)
    pos = 0
    remaining = draws
    while remaining > 0:
        block = min(remaining, _CHUNK)
        keys = rng.random((block, j))
        idx = np.argpartition(keys, m - 1, axis=1)[:, :m]
        sy[pos : pos + block] = y[idx].sum(axis=1)
        sd[pos : pos + block] = d[idx].sum(axis=1)
        pos += block
        remaining -= block
    # Observed assignment appended: keeps the multiset-membership invariant
    # and makes the resulting p-values valid.
    sy[draws], sd[draws] = _observed_combo_sums(y, d, treated)
    return sy, sd


def _stats_from_combo_sums(sy, sd, tot_y, tot_d, m, j, tau0):
    # stat = (1/m) sum_T A - (1/(J-m)) sum_C A with A = Y - tau0 D reduces to
    # kappa * (sum_T Y - tau0 sum_T D) - (tot_Y - tau0 tot_D) / (J-m),
    # kappa = 1/m + 1/(J-m).
    kappa = 1.0 / m + 1.0 / (j - m)
    return kappa * (sy - tau0 * sd) - (tot_y - tau0 * tot_d) / (j - m)


def permutation_null(
    summaries,
    m: int,
    j: int,
    tau0: float,
    *,
    draws: int | None = None,
    seed: int | None = None,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> PermutationNull:
    """Null distribution of T(tau0) over cluster assignments with sum z = m.

    draws=None enumerates all C(J, m) assignments in lexicographic order
    (raising CapExceeded past cap); draws=k samples k assignments uniformly
    with the given seed and appends the observed one.
    """
    m, j = check_arm_sizes(m, j)
    y, d, treated = _arm_split(summaries, m, j)
    tot_y, tot_d = float(y.sum()), float(d.sum())
    if draws is None:
        sy, sd = _exhaustive_combo_sums(y, d, j, m, cap)
        exhaustive = True
    else:
        if draws < 1:
            raise ValueError("draws must be >= 1")
        sy, sd = _sampled_combo_sums(y, d, j, m, draws, seed, treated)
        exhaustive = False
    stats = _stats_from_combo_sums(sy, sd, tot_y, tot_d, m, j, tau0)
    obs_sy, obs_sd = _observed_combo_sums(y, d, treated)
    observed = float(
        _stats_from_combo_sums(
            np.array([obs_sy]), np.array([obs_sd]), tot_y, tot_d, m, j, tau0
        )[0]
    )
    stats.setflags(write=False)
    return PermutationNull(
        tau0=float(tau0),
        statistics=stats,
        observed=observed,
        exhaustive=exhaustive,
        draws=None if exhaustive else draws,
        seed=seed,
    )


def permutation_region(
    summaries,
    m: int,
    j: int,
    alpha: float = 0.05,
    *,
    draws: int | None = None,
    seed: int | None = None,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> ConfidenceRegion:
    """Invert the assignment test: all tau0 with two-sided p-value >= alpha.

    T(tau0) is affine in tau0 for every assignment, so one pass of combo sums
    serves every candidate tau0.  The search expands geometrically from the
    point estimate until rejection (then bisects each endpoint to a tolerance
    of 1e-6 * scale) or until the width cap 1e6 * (|tau_hat| + 1), in which
    case the side is infinite and the region is reported as the whole line.
    """
    m, j = check_arm_sizes(m, j)
    alpha = check_alpha(alpha)
    y, d, treated = _arm_split(summaries, m, j)
    tot_y, tot_d = float(y.sum()), float(d.sum())
    if draws is None:
        sy, sd = _exhaustive_combo_sums(y, d, j, m, cap)
    else:
        sy, sd = _sampled_combo_sums(y, d, j, m, draws, seed, treated)
    obs_sy, obs_sd = _observed_combo_sums(y, d, treated)

    def accepted(tau0: float) -> bool:
        stats = _stats_from_combo_sums(sy, sd, tot_y, tot_d, m, j, tau0)
        observed = float(
            _stats_from_combo_sums(
                np.array([obs_sy]), np.array([obs_sd]), tot_y, tot_d, m, j, tau0
            )[0]
        )
        return _two_sided_p(stats, observed) >= alpha - _P_BOUNDARY_EPS

    num, den = mean_sum_diffs(summaries, m, j)
    d_scale = max(1.0, float(np.abs(d).max(initial=0.0)))
    if abs(den) < 1e-12 * d_scale:
        # T does not depend on tau0: the test either accepts everywhere or
        # rejects everywhere.
        if accepted(0.0):
            return ConfidenceRegion(RegionKind.WHOLE_LINE, None, None, alpha)
        return ConfidenceRegion(RegionKind.EMPTY, None, None, alpha)

    center = num / den
    scale = abs(center) + 1.0
    tol = 1e-6 * max(1.0, abs(center))
    width_cap = 1e6 * scale

    if not accepted(center):
        return ConfidenceRegion(RegionKind.EMPTY, None, None, alpha)

    def search(direction: float) -> float | None:
        """Endpoint of the accepted set on one side, None if the cap is hit."""
        step = 0.25 * scale
        inner = center
        while True:
            candidate = center + direction * step
            if not accepted(candidate):
                outer = candidate
                break
            inner = candidate
            step *= 2.0
            if step > width_cap:
                return None
        while abs(outer - inner) > tol:
            mid = 0.5 * (inner + outer)
            if accepted(mid):
                inner = mid
            else:
                outer = mid
        return inner

    hi = search(+1.0)
    lo = search(-1.0)
    if lo is None or hi is None:
        return ConfidenceRegion(RegionKind.WHOLE_LINE, None, None, alpha)
    return ConfidenceRegion(RegionKind.FINITE_INTERVAL, lo, hi, alpha)
