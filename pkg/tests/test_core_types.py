import json
import warnings

import numpy as np
import pytest

from motifreml.core_types import (ExpressionDataset, InputError, ModelParams, MotifLoadings,
                                  PosteriorActivities, TestTable, dataset_from_labels,
                                  load_dataset, load_fit, load_groups, load_loadings,
                                  save_dataset, save_fit)


def _write(path, rows):
    path.write_text("".join("\t".join(map(str, r)) + "\n" for r in rows))
    return path


@pytest.fixture
def small_files(tmp_path):
    expr = _write(tmp_path / "expression.tsv", [
        ["promoter_id", "s1", "s2", "s3"],
        ["pA", 1.0, 2.5, -0.25],
        ["pB", 0.1, 0.2, 0.3],
        ["pC", 3.0, 1.0, 2.0],
    ])
    groups = _write(tmp_path / "groups.tsv", [
        ["sample_id", "group"], ["s3", "late"], ["s1", "early"], ["s2", "early"]])
    loads = _write(tmp_path / "loadings.tsv", [
        ["promoter_id", "m1", "m2"], ["pC", 0.5, 0.0], ["pA", 1.0, 0.2], ["pB", 0.0, 0.7]])
    return expr, groups, loads


class TestLoading:
    def test_round_trip_shapes_and_order(self, small_files):
        expr, groups, loads = small_files
        ds = load_dataset(expr, groups)
        assert ds.promoter_ids == ("pA", "pB", "pC")
        # label order follows first appearance in the groups file
        assert ds.group_labels == ("late", "early")
        np.testing.assert_array_equal(ds.group_of, [1, 1, 0])
        np.testing.assert_array_equal(ds.group_sizes, [1, 2])
        ld = load_loadings(loads, ds)
        np.testing.assert_array_equal(ld.values, [[1.0, 0.2], [0.0, 0.7], [0.5, 0.0]])

    def test_values_parsed_exactly(self, small_files):
        ds = load_dataset(*small_files[:2])
        assert ds.values[0, 2] == -0.25
        assert ds.values[1, 0] == float("0.1")

    def test_groups_header_optional(self, tmp_path):
        p = _write(tmp_path / "g.tsv", [["a", "x"], ["b", "y"]])
        assert load_groups(p) == {"a": "x", "b": "y"}

    def test_non_numeric_cell(self, tmp_path, small_files):
        _, groups, _ = small_files
        bad = _write(tmp_path / "bad.tsv", [["id", "s1", "s2", "s3"], ["p", 1, "x", 2]])
        with pytest.raises(InputError, match="non-numeric"):
            load_dataset(bad, groups)

    def test_duplicate_promoter(self, tmp_path, small_files):
        _, groups, _ = small_files
        bad = _write(tmp_path / "dup.tsv", [["id", "s1", "s2", "s3"], ["p", 1, 2, 3],
                                            ["p", 4, 5, 6]])
        with pytest.raises(InputError, match="duplicate promoter"):
            load_dataset(bad, groups)

    def test_ragged_row(self, tmp_path, small_files):
        _, groups, _ = small_files
        bad = _write(tmp_path / "rag.tsv", [["id", "s1", "s2", "s3"], ["p", 1, 2]])
        with pytest.raises(InputError, match="line 2"):
            load_dataset(bad, groups)

    def test_sample_missing_from_groups(self, tmp_path, small_files):
        expr, _, _ = small_files
        g = _write(tmp_path / "g.tsv", [["s1", "a"], ["s2", "a"]])
        with pytest.raises(InputError, match="absent"):
            load_dataset(expr, g)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError, match="not found"):
            load_groups(tmp_path / "nope.tsv")

    def test_zero_variance_warns(self, tmp_path, small_files):
        _, groups, _ = small_files
        flat = _write(tmp_path / "flat.tsv", [["id", "s1", "s2", "s3"], ["p", 1, 1, 1],
                                              ["q", 1, 2, 3]])
        with pytest.warns(UserWarning, match="zero variance"):
            load_dataset(flat, groups)

    def test_negative_loading(self, tmp_path, small_files):
        ds = load_dataset(*small_files[:2])
        bad = _write(tmp_path / "l.tsv", [["id", "m"], ["pA", 1], ["pB", -1], ["pC", 0]])
        with pytest.raises(InputError, match="negative loading"):
            load_loadings(bad, ds)

    def test_loadings_missing_promoter(self, tmp_path, small_files):
        ds = load_dataset(*small_files[:2])
        bad = _write(tmp_path / "l.tsv", [["id", "m"], ["pA", 1], ["pB", 1]])
        with pytest.raises(InputError, match="without loadings"):
            load_loadings(bad, ds)

    def test_loadings_unknown_promoter(self, tmp_path, small_files):
        ds = load_dataset(*small_files[:2])
        bad = _write(tmp_path / "l.tsv", [["id", "m"], ["pA", 1], ["pB", 1], ["pC", 1],
                                          ["pZ", 1]])
        with pytest.raises(InputError, match="unknown promoter"):
            load_loadings(bad, ds)


class TestTypes:
    def test_dataset_is_read_only(self):
        ds = dataset_from_labels(np.ones((2, 2)), ["a", "b"], ["x", "y"], ["g", "g"])
        with pytest.raises(ValueError):
            ds.values[0, 0] = 5.0

    def test_all_zero_loadings_rejected(self):
        with pytest.raises(InputError, match="all zero"):
            MotifLoadings(np.zeros((3, 2)), ["a", "b"])

    @pytest.mark.parametrize("bad", [{"sigma": [0.0]}, {"nu": [-1.0]}, {"tau": [-0.1, 1]},
                                     {"promoter_var": [0.0, 1.0]}])
    def test_params_validation(self, bad):
        kw = dict(sigma=[1.0], nu=[1.0], tau=[1.0, 1.0], mu_p=[0.0, 0.0], mu_m=[0.0, 0.0])
        kw.update(bad)
        with pytest.raises(ValueError):
            ModelParams(**kw)

    def test_params_dict_round_trip(self):
        p = ModelParams(sigma=[0.1, 1 / 3], nu=[2.0, 1e-7], tau=[0.0, 1.5], mu_p=[1.0],
                        mu_m=[-2.0, 0.5], promoter_var=[0.7], snr=0.125, fixed_index=1)
        q = ModelParams.from_dict(json.loads(json.dumps(p.to_dict())))
        for name in ("sigma", "nu", "tau", "mu_p", "mu_m", "promoter_var"):
            np.testing.assert_array_equal(getattr(p, name), getattr(q, name))
        assert (q.snr, q.fixed_index) == (0.125, 1)

    def test_subset_promoters(self):
        ds = dataset_from_labels(np.arange(6.0).reshape(3, 2), ["a", "b", "c"], ["x", "y"],
                                 ["g", "h"])
        sub = ds.subset_promoters([2, 0])
        assert sub.promoter_ids == ("c", "a")
        np.testing.assert_array_equal(sub.values, [[4, 5], [0, 1]])
        assert isinstance(sub, ExpressionDataset)


class TestPersistence:
    def test_dataset_files_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        ds = dataset_from_labels(rng.normal(size=(4, 3)), list("abcd"), ["x", "y", "z"],
                                 ["g1", "g2", "g1"])
        ld = MotifLoadings(rng.uniform(size=(4, 2)), ["m1", "m2"], ds.promoter_ids)
        save_dataset(ds, ld, tmp_path)
        ds2 = load_dataset(tmp_path / "expression.tsv", tmp_path / "groups.tsv")
        ld2 = load_loadings(tmp_path / "loadings.tsv", ds2)
        np.testing.assert_array_equal(ds2.values, ds.values)
        np.testing.assert_array_equal(ld2.values, ld.values)
        assert ds2.group_labels == ds.group_labels

    def test_fit_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        m, g = 3, 2
        params = ModelParams(sigma=rng.uniform(1, 2, g), nu=rng.uniform(1, 2, g),
                             tau=np.array([0.0, 1.0, 2.5]), mu_p=rng.normal(size=5),
                             mu_m=rng.normal(size=m), fixed_index=0)
        A = rng.normal(size=(m, m))
        post = PosteriorActivities(rng.normal(size=(m, g)), np.stack([A @ A.T] * g),
                                   zscores=rng.normal(size=(m, g)))
        tests = TestTable(params.tau, np.full(m, np.nan), np.full(m, np.nan), params.mu_m,
                          np.ones(m), np.full(m, 0.5), np.zeros(m), np.ones(m),
                          np.full(m, 0.25), post.mean, post.zscores)
        save_fit(params, post, tmp_path, ["a", "b", "c"], ["ctl", "trt"], list("vwxyz"), tests)
        p2, post2, meta = load_fit(tmp_path)
        np.testing.assert_array_equal(p2.sigma, params.sigma)
        np.testing.assert_array_equal(post2.mean, post.mean)
        np.testing.assert_array_equal(post2.covariance, post.covariance)
        np.testing.assert_array_equal(post2.zscores, post.zscores)
        np.testing.assert_array_equal(post2.offtest_pvalue, 0.25)
        assert meta["group_labels"] == ["ctl", "trt"]

    def test_params_only(self, tmp_path):
        params = ModelParams(sigma=[1.0], nu=[1.0], tau=[1.0], mu_p=[0.0], mu_m=[0.0])
        save_fit(params, None, tmp_path)
        p2, post, _ = load_fit(tmp_path)
        assert post is None
        assert p2.snr is None

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        params = ModelParams(sigma=[1.0], nu=[1.0], tau=[1.0], mu_p=[0.0], mu_m=[0.0])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(InputError):
                save_fit(params, None, blocker / "sub")
