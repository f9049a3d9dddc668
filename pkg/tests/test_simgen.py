import numpy as np
import pytest

from motifreml.core_types import ModelParams, PosteriorActivities, load_fit
from motifreml.simgen import (TABLE_ROWS, GeneratorConfig, baseline_metrics, double_center,
                              evaluate, generate, holdout_split, mape, mara_baseline, pearson,
                              save_simulation)


class TestConfig:
    def test_row_a_shapes(self):
        sim = generate(GeneratorConfig.from_row("A", p=5000, s=20, variance_ratio=0.1))
        assert sim.dataset.values.shape == (5000, 20)
        assert sim.loadings.values.shape == (5000, 100)

    @pytest.mark.parametrize("row", sorted(TABLE_ROWS))
    def test_every_row_builds(self, row):
        _, knob, values = TABLE_ROWS[row]
        small = {k: v for k, v in {"p": 30, "m": 6}.items() if k != knob}
        cfg = GeneratorConfig.from_row(row, **small)
        assert getattr(cfg, knob) == values[0]

    @pytest.mark.parametrize("s,g", [(2, 2), (4, 2), (7, 2), (8, 4), (128, 4)])
    def test_default_groups(self, s, g):
        assert GeneratorConfig(s=s).n_groups == g

    @pytest.mark.parametrize("kw", [{"variance_ratio": 1.0}, {"zm_frac": -0.1}, {"p": 0},
                                    {"groups": 9, "s": 4}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            GeneratorConfig(**kw)

    def test_unknown_row(self):
        with pytest.raises(ValueError, match="unknown table row"):
            GeneratorConfig.from_row("Z")

    def test_from_file(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("row = F  # promoter variances\ns_var_max = 8\np = 100\ns_het = true\n")
        cfg = GeneratorConfig.from_file(path)
        assert (cfg.s_var_max, cfg.p, cfg.s_het, cfg.m) == (8.0, 100, True, 100)

    def test_from_file_rejects_unknown_knob(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("colour = blue\n")
        with pytest.raises(ValueError, match="unknown generator knob"):
            GeneratorConfig.from_file(path)


class TestGenerate:
    def test_all_tau_positive_without_zeros(self):
        sim = generate(GeneratorConfig(p=50, m=20, s=4, zm_frac=0.0))
        assert np.all(sim.truth.tau > 0)

    def test_zero_fraction(self):
        sim = generate(GeneratorConfig(p=50, m=20, s=4, zm_frac=0.25, seed=1))
        inactive = sim.truth.tau == 0
        assert inactive.sum() == 5
        np.testing.assert_array_equal(sim.truth.mu_m[inactive], 0.0)
        np.testing.assert_array_equal(sim.U[inactive], 0.0)

    def test_non_integral_zero_count_warns(self):
        with pytest.warns(UserWarning, match="not integral"):
            sim = generate(GeneratorConfig(p=50, m=10, s=4, zm_frac=0.25))
        assert np.sum(sim.truth.tau == 0) == 2

    def test_seed_reproducible(self):
        cfg = GeneratorConfig(p=80, m=7, s=9, s_het=True, s_var_max=3, s_het_sample=True,
                              sigma_het=True, seed=11)
        a, b = generate(cfg), generate(cfg)
        np.testing.assert_array_equal(a.dataset.values, b.dataset.values)
        np.testing.assert_array_equal(a.U, b.U)
        c = generate(GeneratorConfig(p=80, m=7, s=9, seed=12))
        assert not np.array_equal(a.dataset.values, c.dataset.values)

    def test_parameter_ranges(self):
        sim = generate(GeneratorConfig(p=200, m=10, s=16, s_het=True, s_var_max=4, seed=2))
        assert np.all((sim.loadings.values >= 0.1) & (sim.loadings.values <= 1.1))
        assert np.all((sim.truth.nu >= 0.1) & (sim.truth.nu <= 2.0))
        assert np.all((sim.truth.promoter_var >= 0.1) & (sim.truth.promoter_var <= 4))
        assert sim.dataset.group_sizes.tolist() == [4, 4, 4, 4]

    def test_variance_ratio_monte_carlo(self):
        shares = []
        for seed in range(50):
            sim = generate(GeneratorConfig(p=1000, m=50, s=20, variance_ratio=0.1, seed=seed))
            B, U = sim.loadings.values, sim.U
            shares.append(np.var(double_center(B @ U)) / np.var(double_center(sim.dataset.values)))
        assert np.mean(shares) == pytest.approx(0.1, abs=0.03)

    def test_column_covariance_converges(self):
        emp, imp = 0.0, 0.0
        for seed in range(50):
            sim = generate(GeneratorConfig(p=5000, m=100, s=20, seed=seed))
            t = sim.truth
            B = sim.loadings.values
            R = sim.dataset.values - t.mu_p[:, None] - (B @ t.mu_m)[:, None]
            R = R - R.mean(axis=0)
            emp = emp + R.T @ R / R.shape[0]
            Bc = B - B.mean(axis=0)
            g_of = sim.dataset.group_of
            bu = np.sum(Bc ** 2 @ t.tau) / B.shape[0] * t.nu[g_of]
            imp = imp + np.diag(bu + sim.noise_var.mean(axis=0))
        assert np.linalg.norm(emp - imp) / np.linalg.norm(imp) < 0.05

    def test_sample_specific_variances(self):
        sim = generate(GeneratorConfig(p=2000, m=5, s=64, s_het=True, s_var_max=2.5,
                                       s_het_sample=True, s_sample_var=0.2, seed=4))
        k = sim.truth.promoter_var
        logs = np.log(sim.noise_var / sim.truth.sigma[sim.dataset.group_of][None, :])
        # log-variances scatter around log k with the requested variance
        assert np.var(logs - np.log(k)[:, None]) == pytest.approx(0.2, rel=0.05)

    def test_save_layout(self, tmp_path):
        sim = generate(GeneratorConfig(p=20, m=3, s=4, seed=5))
        save_simulation(sim, tmp_path)
        for name in ("expression.tsv", "groups.tsv", "loadings.tsv", "manifest.txt",
                     "truth/params.txt", "truth/activities.tsv", "truth/U.tsv"):
            assert (tmp_path / name).exists(), name
        params, post, meta = load_fit(tmp_path / "truth")
        np.testing.assert_array_equal(params.sigma, sim.truth.sigma)
        np.testing.assert_allclose(post.mean, sim.group_activities)
        assert "groups = 2" in (tmp_path / "manifest.txt").read_text()


class TestBaseline:
    def test_noise_free_recovers_centered_activities(self):
        rng = np.random.default_rng(0)
        sim = generate(GeneratorConfig(p=200, m=6, s=10, seed=0))
        B = sim.loadings.values
        U = rng.normal(size=(6, 10))
        Y = rng.normal(size=(200, 1)) + rng.normal(size=(1, 10)) + B @ U
        A, ridge = mara_baseline(sim.dataset.with_values(Y), sim.loadings, ridge=1e-12)
        np.testing.assert_allclose(A, U - U.mean(axis=1, keepdims=True), atol=1e-8)
        assert ridge == 1e-12

    def test_matches_pseudo_inverse(self):
        sim = generate(GeneratorConfig(p=30, m=4, s=6, seed=1))
        A, _ = mara_baseline(sim.dataset, sim.loadings, ridge=1e-13)
        Bc = sim.loadings.values - sim.loadings.values.mean(axis=0)
        ref = np.linalg.pinv(Bc) @ double_center(sim.dataset.values)
        np.testing.assert_allclose(A, ref, atol=1e-8)
        np.testing.assert_allclose(A.sum(axis=1), 0.0, atol=1e-8)

    def test_cross_validated_ridge_on_grid(self):
        sim = generate(GeneratorConfig(p=300, m=8, s=8, seed=2))
        _, ridge = mara_baseline(sim.dataset, sim.loadings)
        assert ridge in set(1.0 / np.logspace(-3, 3, 17))

    def test_metrics_computable(self):
        sim = generate(GeneratorConfig(p=300, m=8, s=8, seed=3))
        met = baseline_metrics(sim)
        assert set(met) == {"pcc_U", "pcc_U_centered", "pcc_holdout"}
        assert all(np.isfinite(v) for v in met.values())


class TestMetrics:
    def _truth(self):
        return ModelParams(sigma=[1.0, 2.0], nu=[0.5, 1.5], tau=[1.0, 2.0], mu_p=[0.0],
                           mu_m=[0.0, 1.0], promoter_var=[1.0, 3.0, 0.5])

    def test_perfect_estimates(self):
        t = self._truth()
        U = np.array([[1.0, 2.0], [0.5, -1.0]])
        met = evaluate(t, PosteriorActivities(U, np.zeros((2, 2, 2))), t, U)
        assert met["mape_sigma"] == 0.0 and met["mape_nu"] == 0.0 and met["mape_K"] == 0.0
        assert met["pcc_U"] == pytest.approx(1.0) and met["pcc_K"] == pytest.approx(1.0)

    @pytest.mark.parametrize("c", [0.1, 3.0, 1e4])
    def test_scale_invariance(self, c):
        t = self._truth()
        est = ModelParams(sigma=np.multiply(t.sigma, c), nu=np.multiply(t.nu, c) * [1.1, 1],
                          tau=t.tau, mu_p=t.mu_p, mu_m=t.mu_m,
                          promoter_var=np.multiply(t.promoter_var, c))
        base = ModelParams(sigma=t.sigma, nu=np.multiply(t.nu, [1.1, 1]), tau=t.tau, mu_p=t.mu_p,
                           mu_m=t.mu_m, promoter_var=t.promoter_var)
        a, b = evaluate(est, None, t), evaluate(base, None, t)
        assert a["mape_nu"] == pytest.approx(b["mape_nu"])
        assert a["mape_sigma"] == pytest.approx(0.0, abs=1e-12)

    def test_no_truth_only_prediction(self):
        sim = generate(GeneratorConfig(p=200, m=5, s=8, seed=0))
        met = evaluate(None, None, None, None, sim.dataset, sim.loadings)
        assert list(met) == ["pcc_holdout"]

    def test_holdout_split(self):
        train, test = holdout_split(100, 0.1, 7)
        assert test.size == 10 and np.intersect1d(train, test).size == 0
        assert np.array_equal(test, holdout_split(100, 0.1, 7)[1])

    def test_helpers(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
        assert np.isnan(pearson([1, 1], [1, 2]))
        assert mape([1.1, 1.8], [1.0, 2.0]) == pytest.approx(0.1)
