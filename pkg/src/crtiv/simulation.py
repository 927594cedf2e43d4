"""Monte Carlo engine for comparing the three estimators.

The generative model draws (size, compliance-rate) rows with replacement from
an empirical profile, assigns m of J clusters to treatment by simple random
sampling, and builds unit outcomes as

    Y = alpha + (tau + gamma * n_j) * Z_j * I(complier) + beta * n_j + c_j + e_ji

with cluster and unit errors c_j, e_ji drawn once per unit from a scaled
t(error_df) and shared across both potential outcomes, so every complier's
realized effect is exactly tau + gamma * n_j and noncompliers are unaffected
by assignment (one-sided compliance, exclusion respected).  gamma therefore
controls how strongly cluster effects vary with cluster size, which is
exactly the regime where the three estimators' targets separate.

Replicate streams are derived from the master seed by counter-based spawn
keys (cell index, replicate index), so results are independent of worker
count and scheduling.
"""

import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources

import numpy as np

from ._validation import check_alpha, check_count
from .data import Cluster, ClusterSummary, ClusterTrial
from .errors import ConfigError, EmptyPiSource, EstimationError, InvalidLambda, NoCompliers
from .estimators import (
    METHOD_CLUSTER_LEVEL,
    METHOD_EFFECT_RATIO,
    METHOD_TSLS,
    estimate_cluster_level,
    estimate_effect_ratio,
    estimate_tsls,
)
from .identification import OracleClusterSpec, true_cace

METHODS = (METHOD_EFFECT_RATIO, METHOD_CLUSTER_LEVEL, METHOD_TSLS)

# Treated share of the bundled 157-cluster profile design (112 treated).
DEFAULT_TREATED_FRACTION = 112 / 157

_PROFILE_RESOURCE = "cluster_profile.csv"


def load_profile(path=None) -> tuple:
    """(size, compliance_rate) rows; the bundled synthetic profile when path is None."""
    if path is None:
        source = resources.files("crtiv").joinpath("data", _PROFILE_RESOURCE)
        text = source.read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as handle:
            text = handle.read()
    rows = []
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines:
        raise EmptyPiSource("profile file is empty")
    header = [c.strip() for c in lines[0].split(",")]
    if header != ["n", "compliance_rate"]:
        raise ConfigError(f"profile header must be n,compliance_rate, got {header}")
    for line_no, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 2:
            raise ConfigError(f"profile line {line_no}: expected 2 fields")
        try:
            size = int(parts[0])
            pi = float(parts[1])
        except ValueError as exc:
            raise ConfigError(f"profile line {line_no}: {exc}") from None
        if size < 1 or not (0.0 <= pi <= 1.0):
            raise ConfigError(f"profile line {line_no}: invalid row ({size}, {pi})")
        rows.append((size, pi))
    if not rows:
        raise EmptyPiSource("profile file has no data rows")
    return tuple(rows)


def icc_calibrate(lambda_target: float, error_df: float = 5.0) -> tuple[float, float]:
    """Scales (cluster, unit) so the intraclass correlation equals lambda_target.

    Both error tiers share the t(error_df) variance df/(df-2), which cancels:
    cluster_scale^2 / (cluster_scale^2 + 1) = lambda, so
    cluster_scale = sqrt(lambda / (1 - lambda)) with unit scale 1.
    """
    lam = float(lambda_target)
    if not (0.0 <= lam < 1.0) or math.isnan(lam):
        raise InvalidLambda(f"lambda must lie in [0, 1), got {lambda_target!r}")
    df = float(error_df)
    if not (df > 2.0):
        raise InvalidLambda(f"error_df must exceed 2 for a finite variance, got {error_df!r}")
    return math.sqrt(lam / (1.0 - lam)), 1.0


@dataclass(frozen=True)
class DgpConfig:
    """One generative configuration.

    m defaults to round(J * 112/157); pi_source defaults to the bundled
    profile; error_df may be math.inf for normal errors.
    """

    j: int = 20
    alpha_intercept: float = 0.0
    tau: float = 1.0
    beta: float = 0.01
    gamma: float = 0.0
    lambda_icc: float = 0.28
    error_df: float = 5.0
    pi_source: tuple | None = None
    m: int | None = None
    seed: int | None = None

    def __post_init__(self):
        check_count(self.j, "j", minimum=2)
        icc_calibrate(self.lambda_icc, self.error_df)
        for name in ("alpha_intercept", "tau", "beta", "gamma"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        if self.m is not None and not (0 < self.m < self.j):
            raise ConfigError(f"m must satisfy 0 < m < j, got m={self.m}, j={self.j}")
        if self.pi_source is not None:
            if len(self.pi_source) == 0:
                raise EmptyPiSource("pi_source has no rows")
            for row in self.pi_source:
                size, pi = row
                if int(size) < 1 or not (0.0 <= float(pi) <= 1.0):
                    raise ConfigError(f"invalid pi_source row {row!r}")

    @property
    def m_effective(self) -> int:
        if self.m is not None:
            return self.m
        return min(self.j - 1, max(1, int(round(self.j * DEFAULT_TREATED_FRACTION))))


def _standard_t(rng, df: float, size) -> np.ndarray:
    if math.isinf(df):
        return rng.standard_normal(size)
    return rng.standard_t(df, size)


def _draw_arrays(dgp: DgpConfig, rng) -> dict:
    """All random draws and derived arrays for one replicate, in a fixed order."""
    src = dgp.pi_source if dgp.pi_source is not None else load_profile()
    j = dgp.j
    m = dgp.m_effective
    idx = rng.integers(0, len(src), size=j)
    sizes = np.array([src[i][0] for i in idx], dtype=int)
    pis = np.array([src[i][1] for i in idx], dtype=float)
    z = np.zeros(j, dtype=int)
    z[rng.choice(j, size=m, replace=False)] = 1

    total = int(sizes.sum())
    cluster_of = np.repeat(np.arange(j), sizes)
    n_rep = sizes[cluster_of].astype(float)
    complier = rng.random(total) < pis[cluster_of]

    cluster_scale, unit_scale = icc_calibrate(dgp.lambda_icc, dgp.error_df)
    c = cluster_scale * _standard_t(rng, dgp.error_df, j)
    eps = unit_scale * _standard_t(rng, dgp.error_df, total)

    y0 = dgp.alpha_intercept + dgp.beta * n_rep + c[cluster_of] + eps
    effects = (dgp.tau + dgp.gamma * n_rep) * complier
    y1 = y0 + effects

    z_rep = z[cluster_of]
    y_obs = np.where(z_rep == 1, y1, y0)
    d_obs = (complier & (z_rep == 1)).astype(int)

    bounds = np.concatenate(([0], np.cumsum(sizes)))
    n_co = np.add.reduceat(complier.astype(int), bounds[:-1])
    taus = dgp.tau + dgp.gamma * sizes.astype(float)
    return {
        "j": j,
        "m": m,
        "sizes": sizes,
        "pis": pis,
        "z": z,
        "complier": complier,
        "y0": y0,
        "y1": y1,
        "y_obs": y_obs,
        "d_obs": d_obs,
        "bounds": bounds,
        "n_co": n_co,
        "taus": taus,
    }


def generate_population(
    dgp: DgpConfig, rng=None, keep_potential_outcomes: bool = True
) -> tuple[ClusterTrial, list[OracleClusterSpec]]:
    """One realized trial plus the ground truth behind it.

    The same draw order backs the fast path used by run_scenario, so a given
    (seed, config) always describes the same population either way.
    """
    if rng is None:
        rng = np.random.default_rng(dgp.seed)
    arrays = _draw_arrays(dgp, rng)
    bounds = arrays["bounds"]
    j = arrays["j"]
    clusters = []
    specs = []
    width = len(str(j))
    for k in range(j):
        lo, hi = bounds[k], bounds[k + 1]
        cid = f"c{k + 1:0{width}d}"
        clusters.append(
            Cluster(
                cluster_id=cid,
                z=int(arrays["z"][k]),
                d=arrays["d_obs"][lo:hi],
                y=arrays["y_obs"][lo:hi],
            )
        )
        kwargs = {}
        if keep_potential_outcomes:
            kwargs = {
                "y1": arrays["y1"][lo:hi],
                "y0": arrays["y0"][lo:hi],
                "d1": arrays["complier"][lo:hi].astype(int),
                "d0": np.zeros(hi - lo, dtype=int),
            }
        specs.append(
            OracleClusterSpec(
                n=int(arrays["sizes"][k]),
                n_co=int(arrays["n_co"][k]),
                tau=float(arrays["taus"][k]),
                **kwargs,
            )
        )
    return ClusterTrial(tuple(clusters)), specs


def _fast_summaries(arrays) -> list[ClusterSummary]:
    bounds = arrays["bounds"]
    y_sums = np.add.reduceat(arrays["y_obs"], bounds[:-1])
    d_sums = np.add.reduceat(arrays["d_obs"].astype(float), bounds[:-1])
    sizes = arrays["sizes"]
    z = arrays["z"]
    return [
        ClusterSummary(
            cluster_id=str(k),
            z_j=int(z[k]),
            n_j=int(sizes[k]),
            y_sum=float(y_sums[k]),
            d_sum=float(d_sums[k]),
            y_bar=float(y_sums[k]) / int(sizes[k]),
            d_bar=float(d_sums[k]) / int(sizes[k]),
        )
        for k in range(arrays["j"])
    ]


@dataclass(frozen=True)
class SimScenario:
    """A grid of cells (gamma, J) run with common replicates and seed."""

    dgp: DgpConfig = DgpConfig()
    j_grid: tuple = (20, 30, 50, 80, 100, 200)
    gamma_grid: tuple = (0.0, -0.03, 0.03)
    replicates: int = 2000
    alpha_level: float = 0.05
    coverage_target: str = "realized"
    seed: int = 0

    def __post_init__(self):
        check_count(self.replicates, "replicates", minimum=1)
        check_alpha(self.alpha_level)
        if self.coverage_target not in ("realized", "model"):
            raise ConfigError(
                f"coverage_target must be 'realized' or 'model', got {self.coverage_target!r}"
            )
        for j in self.j_grid:
            check_count(j, "j_grid entry", minimum=2)
        for g in self.gamma_grid:
            if not math.isfinite(g):
                raise ConfigError("gamma_grid entries must be finite")
        int(self.seed)

    def cells(self) -> list[tuple[float, int]]:
        return [(float(g), int(j)) for g in self.gamma_grid for j in self.j_grid]


def _model_target(dgp: DgpConfig, gamma: float) -> float:
    """Super-population CACE: tau + gamma * complier-weighted mean size of the profile."""
    src = dgp.pi_source if dgp.pi_source is not None else load_profile()
    sizes = np.array([r[0] for r in src], dtype=float)
    pis = np.array([r[1] for r in src], dtype=float)
    weight = pis * sizes
    if weight.sum() == 0:
        raise NoCompliers("profile has no expected compliers")
    return dgp.tau + gamma * float((weight * sizes).sum() / weight.sum())


# Per-replicate record layout: [tau_true] + 5 fields per method.
_FIELDS_PER_METHOD = 5  # estimate, covered, length, infinite, skipped
_REC_WIDTH = 1 + _FIELDS_PER_METHOD * len(METHODS)


def _replicate_record(dgp: DgpConfig, alpha: float, target_mode: str, rng) -> np.ndarray:
    arrays = _draw_arrays(dgp, rng)
    rec = np.full(_REC_WIDTH, np.nan)
    n_co = arrays["n_co"]
    tot_co = int(n_co.sum())
    if tot_co == 0:
        rec[1 + _FIELDS_PER_METHOD - 1 :: _FIELDS_PER_METHOD] = 1.0  # all skipped
        return rec
    taus = arrays["taus"]
    tau_true = float((n_co * taus).sum() / tot_co)
    rec[0] = tau_true
    target = tau_true if target_mode == "realized" else _model_target(dgp, dgp.gamma)
    summaries = _fast_summaries(arrays)
    j = arrays["j"]
    m = arrays["m"]
    n = int(arrays["sizes"].sum())
    for pos, method in enumerate(METHODS):
        base = 1 + pos * _FIELDS_PER_METHOD
        try:
            if method == METHOD_EFFECT_RATIO:
                report = estimate_effect_ratio(summaries, m, j, alpha, "quadratic")
            elif method == METHOD_CLUSTER_LEVEL:
                report = estimate_cluster_level(summaries, m, j, alpha)
            else:
                report = estimate_tsls(summaries, m, j, n, alpha)
        except EstimationError:
            rec[base + 4] = 1.0
            continue
        region = report.region
        rec[base + 0] = report.point
        rec[base + 1] = 1.0 if region.contains(target) else 0.0
        rec[base + 2] = region.length if not region.is_infinite else np.nan
        rec[base + 3] = 1.0 if region.is_infinite else 0.0
        rec[base + 4] = 0.0
    return rec


def _replicate_rng(master_seed: int, cell_idx: int, rep: int):
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(cell_idx, rep))
    return np.random.default_rng(seq)


def _run_chunk(args) -> tuple[int, int, np.ndarray]:
    (dgp, gamma, j, alpha, target_mode, master_seed, cell_idx, rep_start, rep_end) = args
    cell_dgp = dataclasses.replace(dgp, j=j, gamma=gamma, seed=None)
    out = np.empty((rep_end - rep_start, _REC_WIDTH))
    for rep in range(rep_start, rep_end):
        rng = _replicate_rng(master_seed, cell_idx, rep)
        out[rep - rep_start] = _replicate_record(cell_dgp, alpha, target_mode, rng)
    return cell_idx, rep_start, out


@dataclass(frozen=True)
class MethodCellStats:
    bias_ratio: float
    coverage: float
    mean_ci_length: float
    infinite_ci_rate: float
    n_skipped: int
    n_used: int


@dataclass(frozen=True)
class CellResult:
    gamma: float
    j: int
    replicates: int
    stats: dict  # method -> MethodCellStats


@dataclass(frozen=True)
class SimReport:
    scenario: SimScenario
    master_seed: int
    cells: tuple


def _aggregate_cell(gamma, j, reps, records: np.ndarray) -> CellResult:
    stats = {}
    tau_true = records[:, 0]
    for pos, method in enumerate(METHODS):
        base = 1 + pos * _FIELDS_PER_METHOD
        est = records[:, base + 0]
        cov = records[:, base + 1]
        length = records[:, base + 2]
        infinite = records[:, base + 3]
        skipped = records[:, base + 4]
        used = skipped == 0.0
        n_used = int(used.sum())
        if n_used == 0:
            stats[method] = MethodCellStats(
                bias_ratio=float("nan"),
                coverage=float("nan"),
                mean_ci_length=float("nan"),
                infinite_ci_rate=float("nan"),
                n_skipped=reps - n_used,
                n_used=0,
            )
            continue
        mean_true = float(tau_true[used].mean())
        finite_lengths = length[used & np.isfinite(length)]
        stats[method] = MethodCellStats(
            bias_ratio=float(est[used].mean()) / mean_true,
            coverage=float(cov[used].mean()),
            mean_ci_length=float(finite_lengths.mean()) if finite_lengths.size else float("nan"),
            infinite_ci_rate=float(infinite[used].mean()),
            n_skipped=reps - n_used,
            n_used=n_used,
        )
    return CellResult(gamma=gamma, j=j, replicates=reps, stats=stats)


def run_scenario(scenario: SimScenario, workers: int = 1) -> SimReport:
    """Run every (gamma, J) cell; deterministic for a given seed at any worker count."""
    check_count(workers, "workers", minimum=1)
    reps = scenario.replicates
    master_seed = int(scenario.seed)
    cells = scenario.cells()
    tasks = []
    chunk = max(1, math.ceil(reps / max(workers * 4, 1)))
    for cell_idx, (gamma, j) in enumerate(cells):
        for rep_start in range(0, reps, chunk):
            tasks.append(
                (
                    scenario.dgp,
                    gamma,
                    j,
                    scenario.alpha_level,
                    scenario.coverage_target,
                    master_seed,
                    cell_idx,
                    rep_start,
                    min(rep_start + chunk, reps),
                )
            )
    results = []
    if workers == 1:
        for task in tasks:
            results.append(_run_chunk(task))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_chunk, tasks, chunksize=1))
    per_cell = {idx: np.empty((reps, _REC_WIDTH)) for idx in range(len(cells))}
    for cell_idx, rep_start, block in sorted(results, key=lambda r: (r[0], r[1])):
        per_cell[cell_idx][rep_start : rep_start + block.shape[0]] = block
    out = tuple(
        _aggregate_cell(gamma, j, reps, per_cell[cell_idx])
        for cell_idx, (gamma, j) in enumerate(cells)
    )
    return SimReport(scenario=scenario, master_seed=master_seed, cells=out)


_METRICS = ("bias_ratio", "coverage", "mean_ci_length", "infinite_ci_rate", "n_skipped")


def report_csv_rows(report: SimReport) -> list[list[str]]:
    """Long-format rows: method, J, gamma, metric, value."""
    rows = [["method", "J", "gamma", "metric", "value"]]
    for cell in report.cells:
        for method in METHODS:
            stats = cell.stats[method]
            for metric in _METRICS:
                value = getattr(stats, metric)
                rows.append(
                    [method, str(cell.j), repr(cell.gamma), metric, repr(float(value))]
                )
    return rows


def write_report_csv(report: SimReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        for row in report_csv_rows(report):
            handle.write(",".join(row) + "\n")


_TABLE_TITLES = {
    "bias_ratio": "bias ratio (mean estimate / mean realized CACE)",
    "coverage": "coverage of nominal {level:.0%} intervals",
    "mean_ci_length": "mean length of finite intervals",
}


def report_tables(report: SimReport) -> str:
    """Aligned text tables (bias, coverage, length), J rows by method columns per gamma."""
    lines = []
    j_values = list(dict.fromkeys(cell.j for cell in report.cells))
    gammas = list(dict.fromkeys(cell.gamma for cell in report.cells))
    by_key = {(cell.gamma, cell.j): cell for cell in report.cells}
    level = 1.0 - report.scenario.alpha_level
    for metric, title in _TABLE_TITLES.items():
        lines.append(title.format(level=level))
        for gamma in gammas:
            lines.append(f"  size-effect interaction gamma = {gamma:g}")
            header = f"    {'J':>4}" + "".join(f"{m:>16}" for m in METHODS)
            lines.append(header)
            for j in j_values:
                cell = by_key[(gamma, j)]
                row = f"    {j:>4}"
                for method in METHODS:
                    value = getattr(cell.stats[method], metric)
                    row += f"{value:>16.4f}"
                lines.append(row)
        lines.append("")
    return "\n".join(lines)


def scenario_from_dict(payload: dict) -> SimScenario:
    """Build a scenario from parsed JSON with field-level error messages."""
    if not isinstance(payload, dict):
        raise ConfigError("scenario must be a JSON object")
    known = {
        "dgp",
        "j_grid",
        "gamma_grid",
        "replicates",
        "alpha_level",
        "coverage_target",
        "seed",
    }
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"scenario field(s) {sorted(unknown)}: unknown")
    dgp_payload = payload.get("dgp", {})
    if not isinstance(dgp_payload, dict):
        raise ConfigError("scenario field 'dgp': must be an object")
    dgp_known = {
        "alpha_intercept",
        "tau",
        "beta",
        "lambda_icc",
        "error_df",
        "m",
        "profile",
    }
    dgp_unknown = set(dgp_payload) - dgp_known
    if dgp_unknown:
        raise ConfigError(f"scenario field(s) dgp.{sorted(dgp_unknown)}: unknown")
    kwargs = {}
    for key in ("alpha_intercept", "tau", "beta", "lambda_icc", "error_df"):
        if key in dgp_payload:
            try:
                kwargs[key] = float(dgp_payload[key])
            except (TypeError, ValueError):
                raise ConfigError(f"scenario field 'dgp.{key}': must be a number") from None
    if "m" in dgp_payload and dgp_payload["m"] is not None:
        try:
            kwargs["m"] = int(dgp_payload["m"])
        except (TypeError, ValueError):
            raise ConfigError("scenario field 'dgp.m': must be an integer") from None
    if "profile" in dgp_payload and dgp_payload["profile"] is not None:
        kwargs["pi_source"] = load_profile(dgp_payload["profile"])
    scenario_kwargs = {}
    try:
        if "j_grid" in payload:
            scenario_kwargs["j_grid"] = tuple(int(j) for j in payload["j_grid"])
        if "gamma_grid" in payload:
            scenario_kwargs["gamma_grid"] = tuple(float(g) for g in payload["gamma_grid"])
    except (TypeError, ValueError):
        raise ConfigError("scenario fields 'j_grid'/'gamma_grid': must be numeric arrays") from None
    for key, caster in (("replicates", int), ("alpha_level", float), ("seed", int)):
        if key in payload:
            try:
                scenario_kwargs[key] = caster(payload[key])
            except (TypeError, ValueError):
                raise ConfigError(f"scenario field '{key}': must be a {caster.__name__}") from None
    if "coverage_target" in payload:
        scenario_kwargs["coverage_target"] = payload["coverage_target"]
    base_j = scenario_kwargs.get("j_grid", SimScenario.j_grid)[0]
    try:
        dgp = DgpConfig(j=int(base_j), **kwargs)
        return SimScenario(dgp=dgp, **scenario_kwargs)
    except (ConfigError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def scenario_from_json(path) -> SimScenario:
    with open(path, encoding="utf-8") as handle:
        try:
            payload = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario file is not valid JSON: {exc}") from None
    return scenario_from_dict(payload)
