"""What each estimator identifies when cluster effects vary.

Every estimator here converges to SOME weighted average of the per-cluster
complier effects tau_j; they differ only in the weights.  The true CACE
weights clusters by complier count.  The cluster-level estimator weights by
complier share (size cancels), TSLS by complier count times the complement of
cluster size.  This module computes those weights, the identified values, the
finite gaps, and their closed-form limits under proportional size growth.

Arithmetic is generic: exact-rational inputs (fractions.Fraction) propagate
unchanged, so known populations can be checked as exact fractions; float
inputs stay float.
"""

import csv
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, NoCompliers
from .estimators import METHOD_CLUSTER_LEVEL, METHOD_EFFECT_RATIO, METHOD_TSLS

_METHODS = (METHOD_CLUSTER_LEVEL, METHOD_TSLS, METHOD_EFFECT_RATIO)


@dataclass(frozen=True)
class OracleClusterSpec:
    """Ground truth for one cluster: size, complier count, complier effect.

    Optional per-unit potential-outcome arrays (y1, y0, d1, d0) pin the same
    facts at unit level; when present they must agree with the scalars.
    """

    n: int
    n_co: float
    tau: float
    y1: np.ndarray | None = None
    y0: np.ndarray | None = None
    d1: np.ndarray | None = None
    d0: np.ndarray | None = None

    def __post_init__(self):
        if self.n <= 0:
            raise ConfigError(f"cluster size must be positive, got {self.n}")
        if not (0 <= self.n_co <= self.n):
            raise ConfigError(f"complier count must lie in [0, n], got {self.n_co}")
        arrays = (self.y1, self.y0, self.d1, self.d0)
        present = [a is not None for a in arrays]
        if any(present):
            if not all(present):
                raise ConfigError("provide all four potential-outcome arrays or none")
            if any(len(a) != self.n for a in arrays):
                raise ConfigError("potential-outcome arrays must have length n")
            d1 = np.asarray(self.d1)
            d0 = np.asarray(self.d0)
            if not np.isin(d1, (0, 1)).all() or not np.isin(d0, (0, 1)).all():
                raise ConfigError("potential receipts must be binary")
            if (d0 > d1).any():
                raise ConfigError("one-sided noncompliance requires d0 <= d1 per unit")
            co = (d1 == 1) & (d0 == 0)
            count = int(co.sum())
            if count != self.n_co:
                raise ConfigError(f"n_co={self.n_co} but arrays imply {count} compliers")
            if count > 0:
                effect = float((np.asarray(self.y1)[co] - np.asarray(self.y0)[co]).mean())
                if not math.isclose(effect, float(self.tau), rel_tol=1e-12, abs_tol=1e-12):
                    raise ConfigError(f"tau={self.tau} but arrays imply {effect}")


def true_cace(specs) -> float:
    """Complier-weighted average of per-cluster effects: sum(n_co tau) / sum(n_co)."""
    specs = list(specs)
    total = sum(s.n_co for s in specs)
    if total == 0:
        raise NoCompliers("population has no compliers")
    return sum(s.n_co * s.tau for s in specs) / total


def method_weights(specs, method: str) -> list:
    """Identification weights of one estimator over the given clusters.

    cluster_level: w_j proportional to n_co_j / n_j (complier share);
    tsls:          w_j proportional to n_co_j (n - n_j);
    effect_ratio:  w_j proportional to n_co_j (the true CACE weights).

    Clusters without compliers receive weight zero and drop out of the sums.
    """
    specs = list(specs)
    if method not in _METHODS:
        raise ValueError(f"unknown method {method!r}")
    if sum(s.n_co for s in specs) == 0:
        raise NoCompliers("population has no compliers")
    if method == METHOD_CLUSTER_LEVEL:
        raw = [s.n_co / s.n for s in specs]
    elif method == METHOD_TSLS:
        n = sum(s.n for s in specs)
        raw = [s.n_co * (n - s.n) for s in specs]
    else:
        raw = [s.n_co for s in specs]
    total = sum(raw)
    if total == 0:
        # Possible for TSLS in the single-cluster degenerate case n - n_j = 0.
        raise NoCompliers(f"all {method} weights vanish for this population")
    return [w / total for w in raw]


def identified_value(specs, method: str) -> float:
    """The weighted average of per-cluster effects this method converges to."""
    specs = list(specs)
    weights = method_weights(specs, method)
    return sum(w * s.tau for w, s in zip(weights, specs))


@dataclass(frozen=True)
class AsymptoticSpec:
    """Bounded-J limit description: complier shares, size ratios, limiting effects.

    rho[l, j] is the limit of n_l / n_j as all sizes grow proportionally, so
    rho must satisfy rho[j, j] = 1 and rho[l, j] * rho[j, l] = 1.
    """

    p_co: tuple
    rho: np.ndarray
    tau_inf: tuple

    def __post_init__(self):
        j = len(self.p_co)
        rho = np.asarray(self.rho, dtype=float)
        if rho.shape != (j, j) or len(self.tau_inf) != j:
            raise ConfigError("p_co, rho and tau_inf must agree on the number of clusters")
        if not np.allclose(np.diag(rho), 1.0, atol=1e-9):
            raise ConfigError("rho must have unit diagonal")
        if not np.allclose(rho * rho.T, 1.0, atol=1e-9):
            raise ConfigError("rho must satisfy rho[l, j] * rho[j, l] = 1")
        if any(not (0 <= p <= 1) for p in self.p_co):
            raise ConfigError("complier shares must lie in [0, 1]")

    @classmethod
    def from_relative_sizes(cls, sizes, p_co, tau_inf) -> "AsymptoticSpec":
        sizes = np.asarray(sizes, dtype=float)
        rho = sizes[:, None] / sizes[None, :]
        return cls(p_co=tuple(p_co), rho=rho, tau_inf=tuple(tau_inf))


def asymptotic_gap_cluster_level(spec: AsymptoticSpec) -> float:
    """Limit of |cluster-level value - true CACE| under proportional size growth.

    |sum_j tau_j sum_{l != j} p_j p_l (rho_lj - 1) /
           ((sum_l p_l) (sum_l p_l rho_lj))|
    """
    p = [float(v) for v in spec.p_co]
    tau = [float(v) for v in spec.tau_inf]
    rho = np.asarray(spec.rho, dtype=float)
    j_count = len(p)
    p_total = sum(p)
    total = 0.0
    for j in range(j_count):
        denom = p_total * sum(p[l] * rho[l, j] for l in range(j_count))
        numer = sum(p[j] * p[l] * (rho[l, j] - 1.0) for l in range(j_count) if l != j)
        total += tau[j] * numer / denom
    return abs(total)


def asymptotic_gap_tsls(spec: AsymptoticSpec) -> float:
    """Limit of |TSLS value - true CACE| under proportional size growth.

    |sum_q tau_q sum_{k != q} p_q p_k (rho_kq - 1) /
           ((sum_{l != j} p_l rho_lk rho_jq) (sum_l p_l rho_lq))|

    where the inner double sum runs over ordered pairs (l, j) with l != j.
    """
    p = [float(v) for v in spec.p_co]
    tau = [float(v) for v in spec.tau_inf]
    rho = np.asarray(spec.rho, dtype=float)
    j_count = len(p)
    total = 0.0
    for q in range(j_count):
        s2 = sum(p[l] * rho[l, q] for l in range(j_count))
        inner = 0.0
        for k in range(j_count):
            if k == q:
                continue
            s1 = sum(
                p[l] * rho[l, k] * rho[jj, q]
                for l in range(j_count)
                for jj in range(j_count)
                if l != jj
            )
            inner += p[q] * p[k] * (rho[k, q] - 1.0) / (s1 * s2)
        total += tau[q] * inner
    return abs(total)


def _as_count(value: float):
    return int(round(value)) if abs(value - round(value)) < 1e-9 else value


def growing_J_gap_demo(
    size_law: dict,
    tau_law,
    p_co: float,
    j: int,
    method: str = METHOD_CLUSTER_LEVEL,
    seed: int = 0,
) -> float:
    """Gap |identified_value(method) - true_cace| for J clusters drawn from size_law.

    size_law maps cluster size to probability; tau_law maps size to the
    cluster effect (mapping or callable); each drawn cluster gets p_co * size
    compliers.  Identical clusters are aggregated by their multinomial counts,
    which is exact because every weight sum is linear in per-cluster terms;
    the expanded-list equivalence is unit-tested.
    """
    sizes = sorted(size_law)
    probs = [size_law[s] for s in sizes]
    if abs(sum(probs) - 1.0) > 1e-9:
        raise ConfigError("size_law probabilities must sum to 1")
    get_tau = tau_law if callable(tau_law) else tau_law.__getitem__
    counts = np.random.default_rng(seed).multinomial(j, probs)
    ncos = [_as_count(p_co * s) for s in sizes]
    taus = [get_tau(s) for s in sizes]

    tot_co = sum(k * nc for k, nc in zip(counts, ncos))
    if tot_co == 0:
        raise NoCompliers("drawn population has no compliers")
    truth = sum(k * nc * t for k, nc, t in zip(counts, ncos, taus)) / tot_co

    if method == METHOD_CLUSTER_LEVEL:
        raw = [nc / s for nc, s in zip(ncos, sizes)]
    elif method == METHOD_TSLS:
        n = sum(int(k) * s for k, s in zip(counts, sizes))
        raw = [nc * (n - s) for nc, s in zip(ncos, sizes)]
    elif method == METHOD_EFFECT_RATIO:
        raw = list(ncos)
    else:
        raise ValueError(f"unknown method {method!r}")
    tot_w = sum(k * w for k, w in zip(counts, raw))
    value = sum(k * w * t for k, w, t in zip(counts, raw, taus)) / tot_w
    return abs(float(value) - float(truth))


def read_spec_csv(path, exact: bool = False) -> list[OracleClusterSpec]:
    """Read cluster specs from a CSV with header n,n_co,tau.

    exact=True parses effects (and fractional complier counts) as
    fractions.Fraction, so downstream weights and identified values are
    exact rationals.
    """
    specs = []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        required = {"n", "n_co", "tau"}
        if reader.fieldnames is None or not required.issubset(set(reader.fieldnames)):
            raise ConfigError(f"spec file must have columns {sorted(required)}")
        for line, row in enumerate(reader, start=2):
            try:
                if exact:
                    # Keep Fraction even for whole counts so every division
                    # downstream stays rational.
                    n_co = Fraction(row["n_co"].strip())
                    tau = Fraction(row["tau"].strip())
                else:
                    n_co = _as_count(float(row["n_co"]))
                    tau = float(row["tau"])
                specs.append(OracleClusterSpec(n=int(row["n"]), n_co=n_co, tau=tau))
            except (TypeError, ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"line {line}: {exc}") from None
    if not specs:
        raise ConfigError("spec file contains no rows")
    return specs
