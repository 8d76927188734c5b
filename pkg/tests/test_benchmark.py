import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import multivariate_normal, norm

from gtm.benchmark import (
    BananaSpec,
    SyntheticSpec,
    auc,
    fit_gaussian,
    gen_synthetic,
    mc_kld,
    rkld,
    run_ci_benchmark,
    sparse_precision,
    warp_forward,
    warp_inverse,
    warp_log_deriv,
)
from gtm.errors import ConfigError, MetricError
from gtm.training import FitConfig, ModelConfig, PenaltyConfig

from oracles import midpoint_grid

SAS = {"kind": "sinh_arcsinh", "skew": 0.5, "tail": 1.5}


def tridiagonal(dim, off=0.4):
    return np.eye(dim) + off * (np.eye(dim, k=1) + np.eye(dim, k=-1))


class TestWarps:
    @pytest.mark.parametrize("w", ["identity", "exp", SAS])
    def test_inverse(self, w, rng):
        x = rng.normal(scale=2, size=200)
        np.testing.assert_allclose(warp_inverse(w, warp_forward(w, x)), x, atol=1e-10)

    @pytest.mark.parametrize("w", ["identity", "exp", SAS])
    def test_log_derivative(self, w, rng):
        x = rng.normal(scale=2, size=50)
        h = 1e-6
        fd = (warp_forward(w, x + h) - warp_forward(w, x - h)) / (2 * h)
        np.testing.assert_allclose(warp_log_deriv(w, x), np.log(fd), atol=1e-6)

    def test_unknown(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(np.eye(2), ["identity", "square"])


class TestGenerator:
    def test_identity_covariance(self):
        y, labels = gen_synthetic(SyntheticSpec(np.eye(3)), 5000, seed=0)
        assert np.all(np.abs(np.cov(y.T) - np.eye(3)) <= 0.1)
        assert labels[0, 1] and not labels[0, 0]

    def test_tridiagonal_labels(self):
        labels = SyntheticSpec(tridiagonal(4)).labels
        independent = {(u, v) for u in range(4) for v in range(u + 1, 4) if labels[u, v]}
        assert independent == {(0, 2), (0, 3), (1, 3)}
        assert np.array_equal(labels, labels.T)

    def test_exp_positive(self):
        y, _ = gen_synthetic(SyntheticSpec(tridiagonal(3), ["identity", "exp", SAS]), 2000, seed=1)
        assert np.all(y[:, 1] > 0)

    def test_precision_recovered(self):
        spec = SyntheticSpec(tridiagonal(4))
        y, _ = gen_synthetic(spec, 100_000, seed=2)
        assert np.max(np.abs(np.linalg.inv(np.cov(y.T)) - spec.precision)) <= 0.05

    def test_non_pd(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_n_positive(self):
        with pytest.raises(ConfigError):
            gen_synthetic(SyntheticSpec(np.eye(2)), 0)

    def test_log_density_gaussian(self, rng):
        spec = SyntheticSpec(tridiagonal(3))
        y = rng.normal(size=(20, 3))
        np.testing.assert_allclose(spec.log_density(y), multivariate_normal(np.zeros(3), spec.covariance).logpdf(y),
                                   atol=1e-12)

    def test_log_density_normalizes(self):
        spec = SyntheticSpec(tridiagonal(2, 0.5), ["exp", SAS])
        xs, hx = midpoint_grid(1e-6, 60.0, 3000)
        ys, hy = midpoint_grid(-40.0, 40.0, 3000)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        total = np.exp(spec.log_density(np.column_stack([gx.ravel(), gy.ravel()]))).sum() * hx * hy
        assert total == pytest.approx(1.0, abs=5e-3)

    def test_sparse_precision(self):
        p = sparse_precision(6, 0.5, seed=3)
        assert np.all(np.linalg.eigvalsh(p) > 0)
        off = p[np.triu_indices(6, 1)]
        assert np.sum(off == 0) == round(0.5 * off.size)

    def test_json_roundtrip(self, tmp_path):
        spec = SyntheticSpec(tridiagonal(3), ["identity", "exp", SAS], seed=4)
        spec.save(tmp_path / "s.json")
        back = SyntheticSpec.load(tmp_path / "s.json")
        assert np.array_equal(back.precision, spec.precision) and back.warps == spec.warps and back.seed == 4


class TestBanana:
    def test_density_matches_samples(self):
        b = BananaSpec()
        y = b.sample(20_000, seed=0)
        assert np.mean(y[:, 1]) == pytest.approx(1.0, abs=0.05)
        r = (y[:, 1] - y[:, 0] ** 2) / b.noise
        expected = norm.logpdf(y[:, 0]) + norm.logpdf(r) - math.log(b.noise)
        np.testing.assert_allclose(b.log_density(y), expected, atol=1e-12)


class TestGaussianBaseline:
    def test_iid_partial_correlations(self, rng):
        g = fit_gaussian(rng.standard_normal((10_000, 4)))
        off = g.partial_correlations[~np.eye(4, dtype=bool)]
        assert np.all(np.abs(off) <= 0.05)

    def test_correlated_pair(self, rng):
        y = rng.multivariate_normal([0, 0], [[1, 0.8], [0.8, 1]], size=5000)
        assert fit_gaussian(y).partial_correlations[0, 1] == pytest.approx(0.8, abs=0.03)

    def test_origin_density(self):
        g = fit_gaussian(np.array([[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]]))
        assert g.log_density(np.zeros(2))[0] == pytest.approx(-math.log(2 * math.pi), abs=1e-12)

    def test_singular_gets_ridge(self, rng):
        x = rng.normal(size=100)
        g = fit_gaussian(np.column_stack([x, 2 * x]))
        assert g.ridge > 0 and np.all(np.isfinite(g.log_density(np.zeros(2))))

    def test_too_few_rows(self):
        with pytest.raises(ConfigError):
            fit_gaussian(np.zeros((2, 2)))


class TestScores:
    def test_mc_kld_identical(self, rng):
        x = rng.standard_normal(2000)
        k = mc_kld(norm.logpdf, norm.logpdf, x)
        assert k.value == 0.0 and k.n_used == 2000

    def test_mc_kld_within_se(self, rng):
        x = rng.standard_normal(5000)
        k = mc_kld(norm.logpdf, lambda v: norm.logpdf(v, scale=1.0 + 1e-9), x)
        assert abs(k.value) <= 3 * k.std_error + 1e-9

    def test_mc_kld_shift(self, rng):
        x = rng.standard_normal(10_000)
        half = mc_kld(norm.logpdf, lambda v: norm.logpdf(v, 0.5), x)
        one = mc_kld(norm.logpdf, lambda v: norm.logpdf(v, 1.0), x)
        assert float(half) == pytest.approx(0.125, abs=0.02)
        assert float(one) > float(half)

    def test_mc_kld_exclusions(self):
        k = mc_kld(lambda v: np.zeros(len(v)), lambda v: np.where(v > 0, -np.inf, 0.0), np.array([-1.0, 1.0, -2.0]))
        assert k.n_excluded == 1 and k.value == 0.0

    def test_rkld_examples(self):
        assert rkld(0.05, 0.05, 0.5) == 0.0
        assert rkld(0.5, 0.05, 0.5) == 1.0
        assert rkld(0.2, 0.05, 0.5) == pytest.approx(1 / 3, abs=1e-12)

    def test_rkld_zero_denominator(self):
        with pytest.raises(MetricError):
            rkld(0.1, 0.3, 0.3)

    @given(st.floats(-100, 100), st.floats(0, 1), st.floats(0, 1), st.floats(1.5, 3))
    def test_rkld_shift_invariant(self, c, a, r, g):
        assert rkld(a + c, r + c, g + c) == pytest.approx(rkld(a, r, g), rel=1e-6, abs=1e-6)

    def test_auc_examples(self):
        assert auc([0.9, 0.8, 0.1], [True, True, False]) == 1.0
        assert auc([0.3, 0.3, 0.3, 0.3], [True, False, True, False]) == 0.5
        assert auc([0.1, 0.9], [True, False]) == 0.0

    def test_auc_single_class(self):
        with pytest.raises(MetricError):
            auc([0.1, 0.2], [True, True])

    def test_auc_brute_force(self, rng):
        s = rng.integers(0, 5, size=30).astype(float)
        lab = rng.random(30) < 0.4
        pos, neg = s[lab], s[~lab]
        expected = np.mean([(p > q) + 0.5 * (p == q) for p in pos for q in neg])
        assert auc(s, lab) == pytest.approx(expected, abs=1e-12)

    @given(st.lists(st.integers(-1000, 1000), min_size=4, max_size=20), st.integers(0, 2**31))
    def test_auc_monotone_invariance(self, scores, seed):
        labels = np.random.default_rng(seed).random(len(scores)) < 0.5
        if labels.all() or not labels.any():
            labels[0] = not labels[0]
        s = np.array(scores, dtype=float) / 100
        assert auc(np.exp(s / 3) * 2 + 7, labels) == auc(s, labels)
        assert 0.0 <= auc(s, labels) <= 1.0


class TestRunBenchmark:
    CONFIGS = {
        "gtm": (ModelConfig(n_layers=2, marginal_basis=10, conditioner_basis=10), PenaltyConfig(tau1=1.0, tau2=1.0),
                FitConfig(max_iters=60)),
    }

    def test_small_run(self):
        spec = SyntheticSpec(tridiagonal(3), ["identity", "exp", "identity"])
        res = run_ci_benchmark(spec, 300, self.CONFIGS, seed=0, n_test=2000, n_samples=200, quad_n=12)
        assert not res.errors
        assert 0 <= res.value("gtm", "auc_iae") <= 1
        assert res.value("gtm", "mc_kld") < res.value("gaussian", "mc_kld")
        assert res.value("gtm", "rkld") == pytest.approx(res.value("gtm", "mc_kld") / res.value("gaussian", "mc_kld"))
        lines = res.to_csv().splitlines()
        assert lines[0] == "method,metric,value,seed,n_train"
        assert lines[1:] == sorted(lines[1:], key=lambda l: tuple(l.split(",")[:2]))

    def test_all_independent_surfaces_auc_error(self):
        res = run_ci_benchmark(SyntheticSpec(np.eye(3)), 300, self.CONFIGS, seed=0, n_test=500, n_samples=100,
                               quad_n=8)
        assert math.isnan(res.value("gtm", "auc_iae")) and math.isnan(res.value("gaussian", "auc_partial_corr"))
        assert any("AUC" in e["error"] for e in res.errors)
        assert np.isfinite(res.value("gtm", "mc_kld"))
