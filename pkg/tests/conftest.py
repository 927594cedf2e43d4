"""Shared fixtures and the acceptance report hook."""

import numpy as np
import pytest

from crtiv.data import Cluster, ClusterTrial


def make_random_trial(rng, j=None, m=None, size_range=(3, 30), compliance=(0.4, 0.9), effect=1.5):
    """A random two-arm trial with one-sided compliance.

    Treated clusters receive a per-cluster compliance rate drawn from the
    compliance range; control receipts are all zero.
    """
    j = j if j is not None else int(rng.integers(6, 31))
    m = m if m is not None else int(rng.integers(2, j - 1))
    z = np.zeros(j, dtype=int)
    z[rng.choice(j, size=m, replace=False)] = 1
    clusters = []
    for k in range(j):
        n = int(rng.integers(*size_range))
        if z[k] == 1:
            d = (rng.random(n) < rng.uniform(*compliance)).astype(int)
        else:
            d = np.zeros(n, dtype=int)
        y = rng.normal(size=n) + effect * d + 0.7 * rng.normal()
        clusters.append(Cluster(cluster_id=f"c{k:03d}", z=int(z[k]), d=d, y=y))
    return ClusterTrial(clusters=tuple(clusters))


@pytest.fixture
def rng():
    return np.random.default_rng(20260821)


# One line per acceptance criterion, echoed after the run regardless of
# pytest's output capture.
_ACCEPTANCE_LINES = []


def record_criterion(line):
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in _ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
