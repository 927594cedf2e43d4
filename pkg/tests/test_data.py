"""Ingestion, validation and summarization of unit-level trial data."""

import numpy as np
import pytest

from crtiv.data import (
    Cluster,
    ClusterTrial,
    UnitRecord,
    cluster_sum_arrays,
    ingest_csv,
    itt_estimates,
    summarize,
    write_csv,
)
from crtiv.errors import InvalidTrialError

from conftest import make_random_trial


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestIngestion:
    def test_round_trip_preserves_everything(self, rng, tmp_path):
        trial = make_random_trial(rng, j=8, m=4)
        path = tmp_path / "trial.csv"
        write_csv(trial, path)
        back = ingest_csv(path)
        assert back.J == trial.J and back.m == trial.m and back.n == trial.n
        for a, b in zip(trial.clusters, back.clusters):
            assert a.cluster_id == b.cluster_id
            assert a.z == b.z
            assert np.array_equal(a.d, b.d)
            # repr round-trips floats exactly
            assert np.array_equal(a.y, b.y)

    def test_header_order_does_not_matter(self, tmp_path):
        path = _write(
            tmp_path / "t.csv",
            "y,cluster_id,d,z\n1.0,a,1,1\n2.0,a,0,1\n0.5,b,0,0\n0.7,b,0,0\n",
        )
        trial = ingest_csv(path)
        assert trial.J == 2
        assert trial.clusters[0].z == 1
        assert trial.clusters[0].y.tolist() == [1.0, 2.0]

    def test_extra_column_warns_and_is_ignored(self, tmp_path):
        path = _write(
            tmp_path / "t.csv",
            "cluster_id,z,d,y,site\na,1,1,1.0,x\na,1,0,2.0,x\nb,0,0,0.5,y\nb,0,0,0.7,y\n",
        )
        with pytest.warns(UserWarning, match="extra column"):
            trial = ingest_csv(path)
        assert trial.n == 4

    def test_missing_column_names_the_column(self, tmp_path):
        path = _write(tmp_path / "t.csv", "cluster_id,z,y\na,1,1.0\n")
        with pytest.raises(InvalidTrialError, match=r"missing required column.*'d'"):
            ingest_csv(path)

    def test_empty_file(self, tmp_path):
        with pytest.raises(InvalidTrialError, match="no header"):
            ingest_csv(_write(tmp_path / "t.csv", ""))

    def test_header_only(self, tmp_path):
        with pytest.raises(InvalidTrialError, match="no data rows"):
            ingest_csv(_write(tmp_path / "t.csv", "cluster_id,z,d,y\n"))

    @pytest.mark.parametrize("token", ["2", "true", "1.0", ""])
    def test_non_binary_receipt_rejected_with_line(self, tmp_path, token):
        path = _write(
            tmp_path / "t.csv",
            f"cluster_id,z,d,y\na,1,1,1.0\na,1,{token},2.0\nb,0,0,0.5\n",
        )
        with pytest.raises(InvalidTrialError, match="line 3"):
            ingest_csv(path)

    def test_non_numeric_outcome_rejected_with_line(self, tmp_path):
        path = _write(
            tmp_path / "t.csv",
            "cluster_id,z,d,y\na,1,1,1.0\nb,0,0,oops\n",
        )
        with pytest.raises(InvalidTrialError, match=r"line 3.*'y' must be a number"):
            ingest_csv(path)

    def test_nan_outcome_rejected(self, tmp_path):
        path = _write(
            tmp_path / "t.csv",
            "cluster_id,z,d,y\na,1,1,nan\nb,0,0,0.5\n",
        )
        with pytest.raises(InvalidTrialError, match="finite"):
            ingest_csv(path)

    def test_short_row_rejected_with_line(self, tmp_path):
        path = _write(
            tmp_path / "t.csv",
            "cluster_id,z,d,y\na,1,1,1.0\na,1,0\n",
        )
        with pytest.raises(InvalidTrialError, match=r"line 3.*expected 4 fields"):
            ingest_csv(path)

    def test_blank_lines_are_skipped(self, tmp_path):
        path = _write(
            tmp_path / "t.csv",
            "cluster_id,z,d,y\na,1,1,1.0\n\na,1,0,2.0\nb,0,0,0.5\nb,0,0,0.7\n",
        )
        assert ingest_csv(path).n == 4

    def test_split_cluster_assignment_conflict(self, tmp_path):
        # same cluster id appearing in both arms
        path = _write(
            tmp_path / "t.csv",
            "cluster_id,z,d,y\na,1,1,1.0\nb,0,0,0.5\na,0,0,2.0\n",
        )
        with pytest.raises(InvalidTrialError, match="non-uniform assignment.*'a'"):
            ingest_csv(path)


class TestTrialValidation:
    def _cluster(self, cid, z, d, y):
        return Cluster(cluster_id=cid, z=z, d=np.asarray(d), y=np.asarray(y, dtype=float))

    def test_single_cluster_rejected(self):
        with pytest.raises(InvalidTrialError, match="at least two"):
            ClusterTrial((self._cluster("a", 1, [1], [1.0]),))

    def test_duplicate_ids_rejected(self):
        cs = (
            self._cluster("a", 1, [1], [1.0]),
            self._cluster("a", 0, [0], [0.5]),
        )
        with pytest.raises(InvalidTrialError, match="duplicate cluster id"):
            ClusterTrial(cs)

    def test_one_armed_trial_rejected(self):
        cs = (
            self._cluster("a", 1, [1], [1.0]),
            self._cluster("b", 1, [0], [0.5]),
        )
        with pytest.raises(InvalidTrialError, match="both arms"):
            ClusterTrial(cs)

    def test_bad_assignment_value(self):
        cs = (
            self._cluster("a", 2, [1], [1.0]),
            self._cluster("b", 0, [0], [0.5]),
        )
        with pytest.raises(InvalidTrialError, match="assignment must be 0 or 1"):
            ClusterTrial(cs)

    def test_from_units_groups_by_first_appearance(self):
        recs = [
            UnitRecord("b", 0, 0, 0.5),
            UnitRecord("a", 1, 1, 1.0),
            UnitRecord("b", 0, 0, 0.6),
            UnitRecord("a", 1, 0, 2.0),
        ]
        trial = ClusterTrial.from_units(recs)
        assert [c.cluster_id for c in trial.clusters] == ["b", "a"]
        assert trial.clusters[0].y.tolist() == [0.5, 0.6]

    def test_arrays_are_frozen(self):
        trial = ClusterTrial.from_units(
            [UnitRecord("a", 1, 1, 1.0), UnitRecord("b", 0, 0, 0.5)]
        )
        with pytest.raises(ValueError):
            trial.clusters[0].y[0] = 9.9


class TestSummaries:
    def test_summarize_matches_hand_computation(self):
        trial = ClusterTrial.from_units(
            [
                UnitRecord("a", 1, 1, 2.0),
                UnitRecord("a", 1, 0, 4.0),
                UnitRecord("b", 0, 0, 1.0),
                UnitRecord("b", 0, 0, 3.0),
                UnitRecord("b", 0, 0, 5.0),
            ]
        )
        s = summarize(trial)
        assert s[0].n_j == 2 and s[0].y_sum == 6.0 and s[0].d_sum == 1.0
        assert s[0].y_bar == 3.0 and s[0].d_bar == 0.5
        assert s[1].n_j == 3 and s[1].y_bar == 3.0 and s[1].d_bar == 0.0

    def test_cluster_sum_arrays_order(self, rng):
        trial = make_random_trial(rng, j=7, m=3)
        s = summarize(trial)
        y, d, z = cluster_sum_arrays(s)
        assert y.shape == (7,)
        assert z.tolist() == [c.z for c in trial.clusters]
        assert y[0] == pytest.approx(trial.clusters[0].y.sum())

    def test_itt_estimates_formula(self):
        # J=4, m=2, n=10: check against the display evaluated by hand
        trial = ClusterTrial.from_units(
            [UnitRecord("a", 1, 1, 1.0)] * 2
            + [UnitRecord("b", 1, 0, 2.0)] * 3
            + [UnitRecord("c", 0, 0, 0.5)] * 2
            + [UnitRecord("d", 0, 0, 1.5)] * 3
        )
        s = summarize(trial)
        mu_y, mu_d = itt_estimates(s, m=2, j=4, n=10)
        # (4/2)*(2.0 + 6.0) - (4/2)*(1.0 + 4.5), all over 10
        assert mu_y == pytest.approx((2 * 8.0 - 2 * 5.5) / 10)
        assert mu_d == pytest.approx((2 * 2.0 - 2 * 0.0) / 10)

    def test_itt_estimator_is_design_unbiased(self, rng):
        # with potential totals held fixed, the estimator averages to the
        # population total difference over all equiprobable assignments
        from itertools import combinations

        j, m = 6, 3
        tot_t = rng.normal(size=j) * 5.0
        tot_c = rng.normal(size=j) * 5.0
        n = 57
        vals = []
        for treated in combinations(range(j), m):
            mask = np.zeros(j, dtype=bool)
            mask[list(treated)] = True
            vals.append(((j / m) * tot_t[mask].sum() - (j / (j - m)) * tot_c[~mask].sum()) / n)
        assert np.mean(vals) == pytest.approx((tot_t.sum() - tot_c.sum()) / n, abs=1e-12)
