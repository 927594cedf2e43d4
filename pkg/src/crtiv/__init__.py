"""Complier average causal effects in cluster randomized trials with noncompliance.

Three rival estimators (cluster-level ratio, two-stage least squares with
cluster-robust variance, effect ratio with test-inversion regions), the
identification weights that separate them under effect heterogeneity, and a
Monte Carlo engine for comparing them on resampled cluster profiles.
"""

__version__ = "0.1.0"

from .data import (
    Cluster,
    ClusterSummary,
    ClusterTrial,
    UnitRecord,
    ingest_csv,
    itt_estimates,
    summarize,
    write_csv,
)
from .errors import (
    CapExceeded,
    ConfigError,
    CrtivError,
    DegenerateArm,
    DegenerateVariance,
    EmptyPiSource,
    EstimationError,
    InvalidLambda,
    InvalidTrialError,
    NoCompliers,
    RankDeficientFirstStage,
    ZeroDenominator,
)
from .estimators import (
    METHOD_CLUSTER_LEVEL,
    METHOD_EFFECT_RATIO,
    METHOD_TSLS,
    ClusterLevelCACE,
    EffectRatioCACE,
    EstimateReport,
    TSLSCACE,
    adjusted_responses,
    estimate_cluster_level,
    estimate_effect_ratio,
    estimate_tsls,
    test_statistic,
)
from .identification import (
    AsymptoticSpec,
    OracleClusterSpec,
    asymptotic_gap_cluster_level,
    asymptotic_gap_tsls,
    growing_J_gap_demo,
    identified_value,
    method_weights,
    read_spec_csv,
    true_cace,
)
from .regions import (
    ConfidenceRegion,
    PermutationNull,
    QuadraticCoefficients,
    RegionKind,
    mean_sum_diffs,
    normal_quantile,
    permutation_null,
    permutation_region,
    quadratic_coefficients,
    quadratic_region,
    variance_s2,
)
from .simulation import (
    DgpConfig,
    SimReport,
    SimScenario,
    generate_population,
    icc_calibrate,
    load_profile,
    report_csv_rows,
    report_tables,
    run_scenario,
    scenario_from_json,
    write_report_csv,
)

__all__ = [
    "__version__",
    "Cluster",
    "ClusterSummary",
    "ClusterTrial",
    "UnitRecord",
    "ingest_csv",
    "itt_estimates",
    "summarize",
    "write_csv",
    "CapExceeded",
    "ConfigError",
    "CrtivError",
    "DegenerateArm",
    "DegenerateVariance",
    "EmptyPiSource",
    "EstimationError",
    "InvalidLambda",
    "InvalidTrialError",
    "NoCompliers",
    "RankDeficientFirstStage",
    "ZeroDenominator",
    "METHOD_CLUSTER_LEVEL",
    "METHOD_EFFECT_RATIO",
    "METHOD_TSLS",
    "ClusterLevelCACE",
    "EffectRatioCACE",
    "EstimateReport",
    "TSLSCACE",
    "adjusted_responses",
    "estimate_cluster_level",
    "estimate_effect_ratio",
    "estimate_tsls",
    "test_statistic",
    "AsymptoticSpec",
    "OracleClusterSpec",
    "asymptotic_gap_cluster_level",
    "asymptotic_gap_tsls",
    "growing_J_gap_demo",
    "identified_value",
    "method_weights",
    "read_spec_csv",
    "true_cace",
    "ConfidenceRegion",
    "PermutationNull",
    "QuadraticCoefficients",
    "RegionKind",
    "mean_sum_diffs",
    "normal_quantile",
    "permutation_null",
    "permutation_region",
    "quadratic_coefficients",
    "quadratic_region",
    "variance_s2",
    "DgpConfig",
    "SimReport",
    "SimScenario",
    "generate_population",
    "icc_calibrate",
    "load_profile",
    "report_csv_rows",
    "report_tables",
    "run_scenario",
    "scenario_from_json",
    "write_report_csv",
]
