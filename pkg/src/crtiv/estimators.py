"""Point estimators for the complier average causal effect (CACE).

Three rival estimators, all ratios of intention-to-treat quantities:

* cluster-level: difference of arm means of cluster means of Y over the same
  for D, with a three-term delta-method variance on J cluster observations;
* two-stage least squares (TSLS) on unit-level data with assignment as the
  instrument, with a cluster-robust sandwich variance in closed scalar form;
* effect ratio: difference of arm means of cluster totals of Y over the same
  for D, paired with quadratic or permutation confidence regions.

With equal cluster sizes the three point estimates coincide; with unequal
sizes they weight clusters differently and so estimate different averages of
the per-cluster effects (see the identification module).
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_alpha, check_arm_sizes
from . import regions as _regions
from .data import ClusterTrial, cluster_sum_arrays, summarize
from .errors import (
    DegenerateArm,
    DegenerateVariance,
    RankDeficientFirstStage,
    ZeroDenominator,
)
from .regions import ConfidenceRegion, RegionKind, normal_quantile

METHOD_CLUSTER_LEVEL = "cluster_level"
METHOD_TSLS = "tsls"
METHOD_EFFECT_RATIO = "effect_ratio"

# Below this many clusters the normal approximations behind the cluster-level
# and TSLS intervals are suspect; reports carry a diagnostic flag.
FEW_CLUSTERS_THRESHOLD = 40


@dataclass(frozen=True)
class ArmMeans:
    """Arm-level means of cluster means."""

    y_bar_t: float
    y_bar_c: float
    d_bar_t: float
    d_bar_c: float


@dataclass(frozen=True)
class EstimateReport:
    """One estimator's output: point, variance (if asymptotic), region, diagnostics."""

    method: str
    point: float
    variance: float | None
    region: ConfidenceRegion
    alpha: float
    diagnostics: dict = field(default_factory=dict)


def arm_means(summaries, m: int, j: int) -> ArmMeans:
    """Means of cluster means per arm."""
    m, j = check_arm_sizes(m, j)
    if len(summaries) != j:
        raise ValueError(f"expected J={j} summaries, got {len(summaries)}")
    ybar = np.array([s.y_bar for s in summaries], dtype=float)
    dbar = np.array([s.d_bar for s in summaries], dtype=float)
    z = np.array([s.z_j for s in summaries], dtype=int)
    if int((z == 1).sum()) != m:
        raise ValueError("m does not match the number of treated summaries")
    t = z == 1
    return ArmMeans(
        y_bar_t=float(ybar[t].mean()),
        y_bar_c=float(ybar[~t].mean()),
        d_bar_t=float(dbar[t].mean()),
        d_bar_c=float(dbar[~t].mean()),
    )


def _few_clusters_flag(j: int) -> float:
    return 1.0 if j < FEW_CLUSTERS_THRESHOLD else 0.0


def _symmetric_region(point: float, variance: float, alpha: float) -> ConfidenceRegion:
    half = normal_quantile(alpha) * float(np.sqrt(variance))
    return ConfidenceRegion(RegionKind.FINITE_INTERVAL, point - half, point + half, alpha)


def estimate_cluster_level(summaries, m: int, j: int, alpha: float = 0.05) -> EstimateReport:
    """Ratio of arm differences of cluster means, with a delta-method variance.

    Numerator and denominator variances pool both arms' spreads of cluster
    means with divisor J-2; their covariance uses per-arm divisors m^2 and
    (J-m)^2.  The variance is reported even when its asymptotic premises are
    dubious (few clusters, weak compliance); diagnostics flag those cases.
    """
    m, j = check_arm_sizes(m, j)
    alpha = check_alpha(alpha)
    if j <= 2:
        raise DegenerateVariance(f"variance needs J > 2 clusters, got J={j}")
    ybar = np.array([s.y_bar for s in summaries], dtype=float)
    dbar = np.array([s.d_bar for s in summaries], dtype=float)
    z = np.array([s.z_j for s in summaries], dtype=int)
    t = z == 1
    yt, yc = ybar[t], ybar[~t]
    dt, dc = dbar[t], dbar[~t]
    num = float(yt.mean() - yc.mean())
    den = float(dt.mean() - dc.mean())
    if abs(den) < 1e-12 * max(1.0, float(np.abs(dbar).max())):
        raise ZeroDenominator("compliance difference is zero between arms")
    point = num / den

    s2_y = (float(((yt - yt.mean()) ** 2).sum()) + float(((yc - yc.mean()) ** 2).sum())) / (j - 2)
    s2_d = (float(((dt - dt.mean()) ** 2).sum()) + float(((dc - dc.mean()) ** 2).sum())) / (j - 2)
    var_num = j * s2_y / (m * (j - m))
    var_den = j * s2_d / (m * (j - m))
    cov = (
        float(((yt - yt.mean()) * (dt - dt.mean())).sum()) / m**2
        + float(((yc - yc.mean()) * (dc - dc.mean())).sum()) / (j - m) ** 2
    )
    variance = (var_num + point**2 * var_den - 2.0 * point * cov) / den**2
    diagnostics = {
        "denominator": den,
        "compliance_rate": den,
        "few_clusters": _few_clusters_flag(j),
    }
    if variance < 0.0:
        # The three-term delta combination is not a sum of squares and can go
        # (slightly) negative in corner cases; clamp and say so.
        variance = 0.0
        diagnostics["variance_clamped"] = 1.0
    return EstimateReport(
        method=METHOD_CLUSTER_LEVEL,
        point=point,
        variance=variance,
        region=_symmetric_region(point, variance, alpha),
        alpha=alpha,
        diagnostics=diagnostics,
    )


def estimate_tsls(summaries, m: int, j: int, n: int, alpha: float = 0.05) -> EstimateReport:
    """Instrumental-variables estimate with a cluster-robust sandwich variance.

    Point estimate in closed product form,

        (sum_C n_j sum_T Y_j - sum_T n_j sum_C Y_j) /
        (sum_C n_j sum_T D_j - sum_T n_j sum_C D_j),

    identical to regressing Y on first-stage fitted receipt with an intercept.
    The variance is the scalar expansion of the one-way cluster sandwich with
    regressors (1, fitted D); residuals are u_ji = Y_ji - D_ji * tau_hat, and
    everything reduces to cluster totals because fitted D is constant per arm.
    """
    m, j = check_arm_sizes(m, j)
    alpha = check_alpha(alpha)
    y, d, z = cluster_sum_arrays(summaries)
    sizes = np.array([s.n_j for s in summaries], dtype=float)
    if int(sizes.sum()) != n:
        raise ValueError(f"n={n} does not match the summed cluster sizes {int(sizes.sum())}")
    t = z == 1
    n_t = float(sizes[t].sum())
    n_c = float(sizes[~t].sum())
    y_t, y_c = float(y[t].sum()), float(y[~t].sum())
    d_t, d_c = float(d[t].sum()), float(d[~t].sum())
    den = n_c * d_t - n_t * d_c
    den_scale = max(1.0, abs(n_c * d_t), abs(n_t * d_c))
    if abs(den) < 1e-12 * den_scale:
        raise ZeroDenominator("compliance difference is zero between arms")
    point = (n_c * y_t - n_t * y_c) / den

    fit_t = d_t / n_t
    fit_c = d_c / n_c
    # X = n * sum_ji fitted^2 - (sum_ji fitted)^2 = n_T n_C (fit_t - fit_c)^2.
    sd1 = n_t * fit_t + n_c * fit_c
    sd2 = n_t * fit_t**2 + n_c * fit_c**2
    x = n * sd2 - sd1**2
    if abs(x) < 1e-12 * max(1.0, n * sd2, sd1**2):
        raise RankDeficientFirstStage("all first-stage fitted values are identical")
    u = y - point * d  # cluster totals of the residuals
    fitted = np.where(t, fit_t, fit_c)
    du = fitted * u  # cluster totals of fitted * residual
    b_uu = float((u**2).sum())
    b_dd = float((du**2).sum())
    b_ud = float((u * du).sum())
    variance = (sd1**2 * b_uu + n**2 * b_dd - 2.0 * n * sd1 * b_ud) / x**2
    variance = max(variance, 0.0)  # sum of squares up to rounding
    diagnostics = {
        "denominator": den,
        "compliance_rate": fit_t - fit_c,
        "few_clusters": _few_clusters_flag(j),
    }
    return EstimateReport(
        method=METHOD_TSLS,
        point=point,
        variance=variance,
        region=_symmetric_region(point, variance, alpha),
        alpha=alpha,
        diagnostics=diagnostics,
    )


def estimate_effect_ratio(
    summaries,
    m: int,
    j: int,
    alpha: float = 0.05,
    region_method: str = "quadratic",
    *,
    perm_draws: int | None = None,
    perm_seed: int | None = None,
    perm_cap: int = _regions.DEFAULT_ENUMERATION_CAP,
) -> EstimateReport:
    """Ratio of arm differences of cluster totals, with an inverted-test region.

    region_method "quadratic" inverts the asymptotic |T| <= z S test in closed
    form; "permutation" inverts the exact assignment test (exhaustive when
    C(J, m) <= perm_cap, otherwise Monte Carlo with perm_draws and perm_seed).
    Either region can be infinite under weak compliance even though the point
    estimate exists.
    """
    m, j = check_arm_sizes(m, j)
    alpha = check_alpha(alpha)
    if region_method not in ("quadratic", "permutation"):
        raise ValueError(f"unknown region_method {region_method!r}")
    num, den = _regions.mean_sum_diffs(summaries, m, j)
    _, d, _ = cluster_sum_arrays(summaries)
    if abs(den) < 1e-12 * max(1.0, float(np.abs(d).max(initial=0.0))):
        raise ZeroDenominator("compliance difference is zero between arms")
    point = num / den
    if region_method == "quadratic":
        region = _regions.quadratic_region(summaries, m, j, alpha)
    else:
        region = _regions.permutation_region(
            summaries, m, j, alpha, draws=perm_draws, seed=perm_seed, cap=perm_cap
        )
    try:
        variance = _regions.variance_s2(summaries, m, j, point)
    except DegenerateArm:
        variance = None
    diagnostics = {
        "denominator": den,
        "compliance_rate": den * j / sum(s.n_j for s in summaries),
        "t_at_point": test_statistic(summaries, m, j, point),
        "few_clusters": _few_clusters_flag(j),
    }
    return EstimateReport(
        method=METHOD_EFFECT_RATIO,
        point=point,
        variance=variance,
        region=region,
        alpha=alpha,
        diagnostics=diagnostics,
    )


def adjusted_responses(summaries, tau0: float) -> np.ndarray:
    """Cluster totals of Y - tau0 * D, in cluster order."""
    y, d, _ = cluster_sum_arrays(summaries)
    return y - tau0 * d


def test_statistic(summaries, m: int, j: int, tau0: float) -> float:
    """Difference in arm means of adjusted responses; affine and decreasing in tau0
    whenever the compliance difference is positive."""
    m, j = check_arm_sizes(m, j)
    a = adjusted_responses(summaries, tau0)
    z = np.array([s.z_j for s in summaries], dtype=int)
    t = z == 1
    return float(a[t].mean() - a[~t].mean())


class _FittedCACE(BaseEstimator):
    """Shared fit plumbing for the estimator-object API."""

    def _estimate(self, summaries, m, j, n) -> EstimateReport:
        raise NotImplementedError

    def fit(self, trial: ClusterTrial, y=None):
        """Estimate from a ClusterTrial; y is ignored (solely for API compatibility)."""
        summaries = summarize(trial)
        report = self._estimate(summaries, trial.m, trial.J, trial.n)
        self.report_ = report
        self.point_ = report.point
        self.variance_ = report.variance
        self.region_ = report.region
        self.diagnostics_ = dict(report.diagnostics)
        return self


class ClusterLevelCACE(_FittedCACE):
    """Estimator-object front end for estimate_cluster_level."""

    def __init__(self, alpha: float = 0.05):
        self.alpha = alpha

    def _estimate(self, summaries, m, j, n):
        return estimate_cluster_level(summaries, m, j, self.alpha)


class TSLSCACE(_FittedCACE):
    """Estimator-object front end for estimate_tsls."""

    def __init__(self, alpha: float = 0.05):
        self.alpha = alpha

    def _estimate(self, summaries, m, j, n):
        return estimate_tsls(summaries, m, j, n, self.alpha)


class EffectRatioCACE(_FittedCACE):
    """Estimator-object front end for estimate_effect_ratio."""

    def __init__(
        self,
        alpha: float = 0.05,
        region_method: str = "quadratic",
        perm_draws: int | None = None,
        perm_seed: int | None = None,
        perm_cap: int = _regions.DEFAULT_ENUMERATION_CAP,
    ):
        self.alpha = alpha
        self.region_method = region_method
        self.perm_draws = perm_draws
        self.perm_seed = perm_seed
        self.perm_cap = perm_cap

    def _estimate(self, summaries, m, j, n):
        return estimate_effect_ratio(
            summaries,
            m,
            j,
            self.alpha,
            self.region_method,
            perm_draws=self.perm_draws,
            perm_seed=self.perm_seed,
            perm_cap=self.perm_cap,
        )
