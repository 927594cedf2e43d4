"""Observed-data model for cluster randomized trials with noncompliance.

Units live in clusters; assignment Z is randomized at the cluster level and
must be constant within a cluster, treatment receipt D and outcome Y vary by
unit.  Ingestion is strict: malformed input fails loudly with the offending
line number rather than being coerced.
"""

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidTrialError

REQUIRED_COLUMNS = ("cluster_id", "z", "d", "y")


@dataclass(frozen=True)
class UnitRecord:
    """One row of observed data: a single unit's assignment, receipt and outcome."""

    cluster_id: str
    z: int
    d: int
    y: float


@dataclass(frozen=True)
class Cluster:
    """All units of one cluster, stored as arrays for cheap summarization."""

    cluster_id: str
    z: int
    d: np.ndarray
    y: np.ndarray

    @property
    def n(self) -> int:
        return self.d.shape[0]


@dataclass(frozen=True)
class ClusterTrial:
    """An ordered collection of clusters forming one two-arm trial.

    Invariants enforced on construction: J >= 2, both arms nonempty, z constant
    within each cluster (z lives on the Cluster), d binary, y finite.
    """

    clusters: tuple[Cluster, ...]

    def __post_init__(self):
        if len(self.clusters) < 2:
            raise InvalidTrialError("a trial needs at least two clusters")
        seen = set()
        for cluster in self.clusters:
            if cluster.cluster_id in seen:
                raise InvalidTrialError(f"duplicate cluster id {cluster.cluster_id!r}")
            seen.add(cluster.cluster_id)
            if cluster.z not in (0, 1):
                raise InvalidTrialError(
                    f"cluster {cluster.cluster_id!r}: assignment must be 0 or 1"
                )
            if cluster.n == 0:
                raise InvalidTrialError(f"cluster {cluster.cluster_id!r} has no units")
            if not np.isin(cluster.d, (0, 1)).all():
                raise InvalidTrialError(
                    f"cluster {cluster.cluster_id!r}: treatment receipt must be 0 or 1"
                )
            if not np.isfinite(cluster.y).all():
                raise InvalidTrialError(
                    f"cluster {cluster.cluster_id!r}: outcomes must be finite"
                )
        m = sum(c.z for c in self.clusters)
        if m == 0 or m == len(self.clusters):
            raise InvalidTrialError(
                f"both arms must be nonempty: {m} of {len(self.clusters)} clusters treated"
            )

    @property
    def J(self) -> int:
        return len(self.clusters)

    @property
    def m(self) -> int:
        return sum(c.z for c in self.clusters)

    @property
    def n(self) -> int:
        return sum(c.n for c in self.clusters)

    @classmethod
    def from_units(cls, records) -> "ClusterTrial":
        """Group unit records into clusters by first appearance.

        Raises InvalidTrialError on within-cluster assignment disagreement.
        """
        order: list[str] = []
        z_by_id: dict[str, int] = {}
        d_by_id: dict[str, list] = {}
        y_by_id: dict[str, list] = {}
        for rec in records:
            cid = rec.cluster_id
            if cid not in z_by_id:
                order.append(cid)
                z_by_id[cid] = rec.z
                d_by_id[cid] = []
                y_by_id[cid] = []
            elif z_by_id[cid] != rec.z:
                raise InvalidTrialError(f"non-uniform assignment in cluster {cid!r}")
            d_by_id[cid].append(rec.d)
            y_by_id[cid].append(rec.y)
        clusters = tuple(
            Cluster(
                cluster_id=cid,
                z=int(z_by_id[cid]),
                d=_frozen_array(d_by_id[cid], int),
                y=_frozen_array(y_by_id[cid], float),
            )
            for cid in order
        )
        return cls(clusters)


@dataclass(frozen=True, slots=True)
class ClusterSummary:
    """Per-cluster sufficient statistics: size, sums and means of Y and D."""

    cluster_id: str
    z_j: int
    n_j: int
    y_sum: float
    d_sum: float
    y_bar: float
    d_bar: float


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _parse_binary(token: str, column: str, line: int) -> int:
    token = token.strip()
    if token == "0":
        return 0
    if token == "1":
        return 1
    raise InvalidTrialError(f"column {column!r} must be exactly '0' or '1', got {token!r}", line)


def _parse_outcome(token: str, line: int) -> float:
    token = token.strip()
    if token == "":
        raise InvalidTrialError("missing outcome value", line)
    try:
        value = float(token)
    except ValueError:
        raise InvalidTrialError(f"column 'y' must be a number, got {token!r}", line) from None
    if not np.isfinite(value):
        raise InvalidTrialError(f"column 'y' must be finite, got {token!r}", line)
    return value


def iter_csv_records(path):
    """Yield UnitRecords from a unit-level CSV with strict field checking.

    Header must contain cluster_id, z, d, y (any order); extra columns are
    ignored with a warning.  Line numbers in errors are 1-based and include
    the header line.
    """
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidTrialError("empty file: no header row") from None
        names = [h.strip() for h in header]
        missing = [c for c in REQUIRED_COLUMNS if c not in names]
        if missing:
            raise InvalidTrialError(f"header is missing required column(s) {missing}", 1)
        extras = [c for c in names if c not in REQUIRED_COLUMNS]
        if extras:
            warnings.warn(f"ignoring extra column(s) {extras}", stacklevel=2)
        idx = {c: names.index(c) for c in REQUIRED_COLUMNS}
        width = len(names)
        saw_row = False
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise InvalidTrialError(
                    f"expected {width} fields, got {len(row)}", line
                )
            cid = row[idx["cluster_id"]].strip()
            if cid == "":
                raise InvalidTrialError("missing cluster_id", line)
            saw_row = True
            yield UnitRecord(
                cluster_id=cid,
                z=_parse_binary(row[idx["z"]], "z", line),
                d=_parse_binary(row[idx["d"]], "d", line),
                y=_parse_outcome(row[idx["y"]], line),
            )
        if not saw_row:
            raise InvalidTrialError("file contains no data rows")


def ingest_csv(path) -> ClusterTrial:
    """Read a unit-level CSV into a validated ClusterTrial."""
    return ClusterTrial.from_units(iter_csv_records(path))


def write_csv(trial: ClusterTrial, path) -> None:
    """Emit a trial in the same unit-level CSV layout ingest_csv reads."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(REQUIRED_COLUMNS)
        for cluster in trial.clusters:
            for d, y in zip(cluster.d.tolist(), cluster.y.tolist()):
                writer.writerow([cluster.cluster_id, cluster.z, d, repr(float(y))])


def summarize(trial: ClusterTrial) -> list[ClusterSummary]:
    """Reduce a trial to per-cluster sums and means, preserving cluster order."""
    out = []
    for cluster in trial.clusters:
        y_sum = float(cluster.y.sum())
        d_sum = float(cluster.d.sum())
        n_j = cluster.n
        out.append(
            ClusterSummary(
                cluster_id=cluster.cluster_id,
                z_j=cluster.z,
                n_j=n_j,
                y_sum=y_sum,
                d_sum=d_sum,
                y_bar=y_sum / n_j,
                d_bar=d_sum / n_j,
            )
        )
    return out


def cluster_sum_arrays(summaries) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cluster totals as arrays: (y_sums, d_sums, z) in cluster order."""
    y = np.array([s.y_sum for s in summaries], dtype=float)
    d = np.array([s.d_sum for s in summaries], dtype=float)
    z = np.array([s.z_j for s in summaries], dtype=int)
    return y, d, z


def itt_estimates(summaries, m: int, j: int, n: int) -> tuple[float, float]:
    """Unbiased ITT estimates (mu_Y, mu_D) from cluster totals.

    mu_Y = (1/n) [ (J/m) sum_T Y_j - (J/(J-m)) sum_C Y_j ], same for D.
    """
    y, d, z = cluster_sum_arrays(summaries)
    treated = z == 1
    scale_t = j / m
    scale_c = j / (j - m)
    mu_y = (scale_t * y[treated].sum() - scale_c * y[~treated].sum()) / n
    mu_d = (scale_t * d[treated].sum() - scale_c * d[~treated].sum()) / n
    return float(mu_y), float(mu_d)
