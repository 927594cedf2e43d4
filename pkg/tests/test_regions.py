"""Confidence regions: quadratic inversion casework and the exact assignment test."""

import math
import warnings
from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest

from crtiv.data import Cluster, ClusterTrial, cluster_sum_arrays, summarize
from crtiv.errors import CapExceeded
from crtiv.regions import (
    ConfidenceRegion,
    RegionKind,
    normal_quantile,
    permutation_null,
    permutation_region,
    quadratic_coefficients,
    quadratic_region,
    variance_s2,
)

from conftest import make_random_trial


def arm_totals(trial):
    s = summarize(trial)
    y, d, z = cluster_sum_arrays(s)
    return s, y, d, z == 1


def scan_quadratic(y, d, treated, m, j, alpha, taus):
    """Grid membership of the asymptotic test, evaluated pointwise.

    Recomputes T(tau0) and S(tau0) from cluster totals at every grid value
    instead of using the closed-form roots.
    """
    a = y[None, :] - taus[:, None] * d[None, :]
    at, ac = a[:, treated], a[:, ~treated]
    t_stat = at.mean(axis=1) - ac.mean(axis=1)
    s2 = at.var(axis=1, ddof=1) / m + ac.var(axis=1, ddof=1) / (j - m)
    z = normal_quantile(alpha)
    return t_stat * t_stat <= z * z * s2


def perm_stats_grid(y, d, j, m, taus):
    """Null statistics for every assignment at every grid value, by brute force."""
    kappa = 1.0 / m + 1.0 / (j - m)
    masks = np.array(
        [[k in combo for k in range(j)] for combo in combinations(range(j), m)]
    )
    sy = masks @ y
    sd = masks @ d
    tot_y, tot_d = y.sum(), d.sum()
    # stats[g, c] for grid value g and assignment c
    return kappa * (sy[None, :] - taus[:, None] * sd[None, :]) - (
        tot_y - taus[:, None] * tot_d
    ) / (j - m)


def perm_p_values(stats, observed):
    scale = np.maximum(1.0, np.abs(stats).max(axis=1))
    eps = 1e-12 * scale
    lower = (stats <= observed[:, None] + eps[:, None]).sum(axis=1)
    upper = (stats >= observed[:, None] - eps[:, None]).sum(axis=1)
    n = stats.shape[1]
    return np.minimum(1.0, 2.0 * np.minimum(lower, upper) / n)


def flat_compliance_trial(shift, first_cluster_compliers=0, seed=3):
    """Ten equal clusters, receipts all zero except optionally in the first."""
    rng = np.random.default_rng(seed)
    clusters = []
    for k in range(10):
        z = 1 if k < 5 else 0
        d = np.zeros(8, dtype=int)
        if z and k == 0 and first_cluster_compliers:
            d[:first_cluster_compliers] = 1
        y = rng.normal(scale=0.3, size=8) + (shift if z else 0.0)
        clusters.append(Cluster(f"c{k}", z, d, y))
    return ClusterTrial(tuple(clusters))


class TestRegionObject:
    def test_finite_interval(self):
        r = ConfidenceRegion(kind=RegionKind.FINITE_INTERVAL, lo=-1.0, hi=2.0, alpha=0.05)
        assert r.contains(0.0) and r.contains(-1.0) and r.contains(2.0)
        assert not r.contains(2.0001)
        assert not r.is_infinite
        assert r.length == pytest.approx(3.0)
        assert "[-1" in r.describe()

    def test_complement(self):
        r = ConfidenceRegion(kind=RegionKind.COMPLEMENT_OF_INTERVAL, lo=-1.0, hi=2.0, alpha=0.05)
        assert r.contains(-5.0) and r.contains(5.0)
        assert not r.contains(0.5)
        assert r.is_infinite
        assert math.isinf(r.length)

    def test_whole_line_and_empty(self):
        whole = ConfidenceRegion(kind=RegionKind.WHOLE_LINE, lo=None, hi=None, alpha=0.05)
        empty = ConfidenceRegion(kind=RegionKind.EMPTY, lo=None, hi=None, alpha=0.05)
        assert whole.contains(1e9) and whole.is_infinite
        assert not empty.contains(0.0) and not empty.is_infinite
        assert empty.length == 0.0

    def test_kind_values_are_contract_names(self):
        assert RegionKind.FINITE_INTERVAL.value == "FiniteInterval"
        assert RegionKind.COMPLEMENT_OF_INTERVAL.value == "ComplementOfInterval"
        assert RegionKind.WHOLE_LINE.value == "WholeLine"
        assert RegionKind.EMPTY.value == "Empty"

    def test_normal_quantile(self):
        assert normal_quantile(0.05) == pytest.approx(1.959963984540054, rel=1e-12)
        assert normal_quantile(0.10) == pytest.approx(1.6448536269514722, rel=1e-12)


class TestVarianceS2:
    def test_matches_moment_expansion(self, rng):
        # S^2(tau) expands into per-arm variances and covariances of totals
        worst = 0.0
        for _ in range(200):
            trial = make_random_trial(rng)
            s, y, d, treated = arm_totals(trial)
            m, j = trial.m, trial.J
            tau0 = float(rng.normal(scale=3.0))
            want = (
                np.var(y[treated], ddof=1)
                - 2 * tau0 * np.cov(y[treated], d[treated], ddof=1)[0, 1]
                + tau0 ** 2 * np.var(d[treated], ddof=1)
            ) / m + (
                np.var(y[~treated], ddof=1)
                - 2 * tau0 * np.cov(y[~treated], d[~treated], ddof=1)[0, 1]
                + tau0 ** 2 * np.var(d[~treated], ddof=1)
            ) / (j - m)
            got = variance_s2(s, m, j, tau0)
            worst = max(worst, abs(got - want) / max(1e-12, abs(want)))
        assert worst < 1e-10

    def test_quadratic_coefficients_reproduce_s2(self, rng):
        trial = make_random_trial(rng, j=12, m=5)
        s = summarize(trial)
        q = quadratic_coefficients(s, 5, 12)
        for tau0 in (-2.0, 0.0, 1.7):
            want = (q.s2_y_t - 2 * tau0 * q.s_yd_t + tau0 ** 2 * q.s2_d_t) / 5 + (
                q.s2_y_c - 2 * tau0 * q.s_yd_c + tau0 ** 2 * q.s2_d_c
            ) / 7
            assert variance_s2(s, 5, 12, tau0) == pytest.approx(want, rel=1e-12)


class TestQuadraticRegion:
    def test_grid_inversion_agreement(self, rng):
        # membership from the closed-form region equals the pointwise test,
        # away from a two-step band around each boundary
        for _ in range(50):
            trial = make_random_trial(rng)
            s, y, d, treated = arm_totals(trial)
            m, j = trial.m, trial.J
            region = quadratic_region(s, m, j)
            num = y[treated].mean() - y[~treated].mean()
            den = d[treated].mean() - d[~treated].mean()
            center = num / den
            scale = max(1.0, abs(center))
            step = 1e-3 * scale
            if region.kind is RegionKind.FINITE_INTERVAL:
                span = 10 * max(region.length, scale)
            else:
                span = 50 * scale
            taus = np.arange(center - span, center + span, step)
            member = scan_quadratic(y, d, treated, m, j, 0.05, taus)
            edges = [
                x
                for x in (region.lo, region.hi)
                if x is not None and np.isfinite(x)
            ]
            near_edge = np.zeros(taus.shape, dtype=bool)
            for e in edges:
                near_edge |= np.abs(taus - e) <= 2 * step
            claimed = np.array([region.contains(t) for t in taus])
            assert (claimed[~near_edge] == member[~near_edge]).all()

    def test_strong_instrument_gives_finite_interval(self, rng):
        trial = make_random_trial(rng, j=20, m=10, compliance=(0.7, 0.95))
        region = quadratic_region(summarize(trial), 10, 20)
        assert region.kind is RegionKind.FINITE_INTERVAL

    def test_weak_instrument_two_rays(self):
        trial = flat_compliance_trial(shift=10.0, first_cluster_compliers=1)
        region = quadratic_region(summarize(trial), 5, 10)
        assert region.kind is RegionKind.COMPLEMENT_OF_INTERVAL
        assert region.contains(region.lo - 1.0)
        assert region.contains(region.hi + 1.0)
        assert not region.contains((region.lo + region.hi) / 2)

    def test_no_compliance_no_signal_whole_line(self):
        trial = flat_compliance_trial(shift=0.0)
        region = quadratic_region(summarize(trial), 5, 10)
        assert region.kind is RegionKind.WHOLE_LINE

    def test_no_compliance_strong_signal_empty_with_warning(self):
        trial = flat_compliance_trial(shift=10.0)
        with pytest.warns(UserWarning, match="rejects every tau0"):
            region = quadratic_region(summarize(trial), 5, 10)
        assert region.kind is RegionKind.EMPTY

    def test_alpha_nesting(self, rng):
        trial = make_random_trial(rng, j=16, m=8, compliance=(0.6, 0.9))
        s = summarize(trial)
        narrow = quadratic_region(s, 8, 16, alpha=0.10)
        wide = quadratic_region(s, 8, 16, alpha=0.01)
        assert wide.lo <= narrow.lo and narrow.hi <= wide.hi


class TestPermutationNull:
    def test_exhaustive_size_and_membership(self, rng):
        trial = make_random_trial(rng, j=10, m=5)
        null = permutation_null(summarize(trial), 5, 10, tau0=0.0)
        assert null.exhaustive
        assert null.statistics.shape == (252,)
        # observed assignment is one of the enumerated ones
        assert np.isclose(null.statistics, null.observed).any()

    def test_p_values_are_exact_multiples(self, rng):
        trial = make_random_trial(rng, j=10, m=5)
        s = summarize(trial)
        for tau0 in (-1.0, 0.0, 0.8, 2.5):
            p = permutation_null(s, 5, 10, tau0=tau0).two_sided_p_value()
            k = Fraction(p).limit_denominator(10 ** 6) * 126
            assert k.denominator == 1, f"p={p} is not a multiple of 2/252"
            assert 0 < p <= 1

    def test_matches_brute_force_p(self, rng):
        trial = make_random_trial(rng, j=9, m=4)
        s, y, d, treated = arm_totals(trial)
        taus = np.array([-2.0, 0.0, 1.3])
        stats = perm_stats_grid(y, d, 9, 4, taus)
        kappa = 1.0 / 4 + 1.0 / 5
        obs = kappa * (y[treated].sum() - taus * d[treated].sum()) - (
            y.sum() - taus * d.sum()
        ) / 5
        want = perm_p_values(stats, obs)
        got = [
            permutation_null(s, 4, 9, tau0=t).two_sided_p_value() for t in taus
        ]
        assert np.allclose(got, want, atol=1e-12)

    def test_monte_carlo_close_to_exhaustive(self, rng):
        trial = make_random_trial(rng, j=12, m=6)
        s = summarize(trial)
        exact = permutation_null(s, 6, 12, tau0=0.5).two_sided_p_value()
        mc = permutation_null(s, 6, 12, tau0=0.5, draws=40_000, seed=11)
        assert not mc.exhaustive
        assert mc.statistics.shape == (40_001,)
        assert mc.two_sided_p_value() == pytest.approx(exact, abs=0.02)

    def test_cap_exceeded(self, rng):
        trial = make_random_trial(rng, j=12, m=6)
        with pytest.raises(CapExceeded, match="Monte Carlo"):
            permutation_null(summarize(trial), 6, 12, tau0=0.0, cap=100)

    def test_relabeling_invariance(self, rng):
        trial = make_random_trial(rng, j=9, m=4)
        perm = rng.permutation(9)
        shuffled = ClusterTrial(tuple(trial.clusters[k] for k in perm))
        a = permutation_null(summarize(trial), 4, 9, tau0=0.3).two_sided_p_value()
        b = permutation_null(summarize(shuffled), 4, 9, tau0=0.3).two_sided_p_value()
        assert a == pytest.approx(b, abs=1e-12)


class TestPermutationRegion:
    def test_matches_brute_scan(self, rng):
        # endpoints from the search agree with a fine accept/reject scan
        for _ in range(5):
            trial = make_random_trial(rng, j=10, m=5, compliance=(0.5, 0.9))
            s, y, d, treated = arm_totals(trial)
            region = permutation_region(s, 5, 10, alpha=0.05)
            assert region.kind is RegionKind.FINITE_INTERVAL
            center = (y[treated].mean() - y[~treated].mean()) / (
                d[treated].mean() - d[~treated].mean()
            )
            scale = max(1.0, abs(center))
            taus = np.arange(center - 30 * scale, center + 30 * scale, 1e-3 * scale)
            stats = perm_stats_grid(y, d, 10, 5, taus)
            kappa = 1.0 / 5 + 1.0 / 5
            obs = kappa * (y[treated].sum() - taus * d[treated].sum()) - (
                y.sum() - taus * d.sum()
            ) / 5
            accepted = perm_p_values(stats, obs) >= 0.05
            assert accepted.any()
            lo_scan = taus[accepted].min()
            hi_scan = taus[accepted].max()
            assert region.lo == pytest.approx(lo_scan, abs=2e-3 * scale)
            assert region.hi == pytest.approx(hi_scan, abs=2e-3 * scale)

    def test_region_and_p_value_duality(self, rng):
        trial = make_random_trial(rng, j=10, m=5, compliance=(0.5, 0.9))
        s = summarize(trial)
        region = permutation_region(s, 5, 10, alpha=0.05)
        assert region.kind is RegionKind.FINITE_INTERVAL
        width = region.length
        for frac in (0.1, 0.5, 0.9):
            inside = region.lo + frac * width
            assert permutation_null(s, 5, 10, tau0=inside).two_sided_p_value() >= 0.05
        for outside in (region.lo - 0.05 * width, region.hi + 0.05 * width):
            assert permutation_null(s, 5, 10, tau0=outside).two_sided_p_value() < 0.05

    def test_alpha_nesting(self, rng):
        trial = make_random_trial(rng, j=10, m=5, compliance=(0.5, 0.9))
        s = summarize(trial)
        narrow = permutation_region(s, 5, 10, alpha=0.20)
        wide = permutation_region(s, 5, 10, alpha=0.02)
        assert wide.lo <= narrow.lo and narrow.hi <= wide.hi

    def test_unrejectable_alpha_gives_whole_line(self, rng):
        # p is always at least 2/C(J, m), so alpha below that accepts everything
        trial = make_random_trial(rng, j=8, m=4)
        region = permutation_region(summarize(trial), 4, 8, alpha=1.0 / 70)
        assert region.kind is RegionKind.WHOLE_LINE

    def test_zero_compliance_cases(self):
        strong = flat_compliance_trial(shift=10.0)
        weak = flat_compliance_trial(shift=0.0)
        assert permutation_region(summarize(strong), 5, 10).kind is RegionKind.EMPTY
        assert permutation_region(summarize(weak), 5, 10).kind is RegionKind.WHOLE_LINE

    def test_monte_carlo_region_close_to_exact(self, rng):
        trial = make_random_trial(rng, j=11, m=5, compliance=(0.5, 0.9))
        s = summarize(trial)
        exact = permutation_region(s, 5, 11, alpha=0.05)
        mc = permutation_region(s, 5, 11, alpha=0.05, draws=60_000, seed=4)
        rel = max(1.0, exact.length)
        assert mc.lo == pytest.approx(exact.lo, abs=0.05 * rel)
        assert mc.hi == pytest.approx(exact.hi, abs=0.05 * rel)
