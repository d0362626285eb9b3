import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import quadrature_elbo
from vof.exact_gp import exact_lml, sample_prior
from vof.features import HermiteVOF, InducingPoints, TrigVOF, trace_residual
from vof.kernels import KernelParams, kernel_diag
from vof.numerics import QuadratureSpec, StratifiedSampler
from vof.svgp import (
    SVGPModel,
    VariationalDistribution,
    collapsed_elbo,
    elbo_gaussian,
    kl_to_prior,
    marginals_from_kuf,
    mc_elbo_from_pair,
    mc_elbo_gaussian,
    mc_kuf_pair,
    mc_qf_marginals,
    meanfield_diagonality_profile,
    offdiagonal_ratio,
    optimal_q_gaussian,
    predict,
    qf_marginals,
)

SE = KernelParams("se", 1.0, 1.0)


def random_q(rng, M, structure):
    mean = rng.normal(size=M)
    if structure == "diag":
        return VariationalDistribution(mean, diag=rng.uniform(0.1, 2.0, M))
    L = np.tril(rng.normal(scale=0.3, size=(M, M)), -1) + np.diag(rng.uniform(0.3, 1.3, M))
    return VariationalDistribution(mean, chol=L)


def small_problem(rng, N=12):
    kernel = KernelParams("se", float(rng.uniform(0.3, 2.0)), float(rng.uniform(0.3, 2.0)))
    noise = float(rng.uniform(0.01, 0.5))
    X = rng.uniform(-3, 3, N)
    y = sample_prior(kernel, X, noise, seed=int(rng.integers(1 << 30)))
    return kernel, noise, X, y


class TestVariationalDistribution:
    def test_exactly_one_representation(self):
        with pytest.raises(ValueError):
            VariationalDistribution(np.zeros(2))
        with pytest.raises(ValueError):
            VariationalDistribution(np.zeros(2), chol=np.eye(2), diag=np.ones(2))

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            VariationalDistribution(np.zeros(2), diag=[1.0, 0.0])
        with pytest.raises(ValueError):
            VariationalDistribution(np.zeros(2), chol=[[1.0, 0.0], [0.3, -1.0]])

    def test_from_covariance_rejects_indefinite(self):
        with pytest.raises(ValueError):
            VariationalDistribution.from_covariance(np.zeros(2), [[1.0, 2.0], [2.0, 1.0]])

    def test_covariance_roundtrip(self, rng):
        q = random_q(rng, 5, "dense")
        q2 = VariationalDistribution.from_covariance(q.mean, q.covariance())
        np.testing.assert_allclose(q2.covariance(), q.covariance(), atol=1e-12)
        assert q2.logdet() == pytest.approx(np.linalg.slogdet(q.covariance())[1])

    def test_model_checks(self):
        with pytest.raises(ValueError):
            SVGPModel(HermiteVOF(3, 1.0, SE), VariationalDistribution.prior(3), 0.0)
        with pytest.raises(ValueError):
            SVGPModel(HermiteVOF(3, 1.0, SE), VariationalDistribution.prior(4), 0.1)


class TestMarginals:
    def test_prior_recovery(self):
        X = np.linspace(-2, 2, 7)
        for structure in ("dense", "diag"):
            model = SVGPModel(HermiteVOF(6, 1.0, SE), VariationalDistribution.prior(6, structure), 0.1)
            mom = qf_marginals(model, X)
            np.testing.assert_array_equal(mom.mean, 0.0)
            np.testing.assert_allclose(mom.var, 1.0, atol=1e-14)

    def test_hand_example(self):
        q = VariationalDistribution([2.0], diag=[0.5])
        mean, var = marginals_from_kuf(np.array([[1.0]]), np.array([1.0]), q)
        assert mean[0] == pytest.approx(2.0)
        assert var[0] == pytest.approx(0.5)

    def test_hand_example_dense(self):
        q = VariationalDistribution([2.0], chol=[[math.sqrt(0.5)]])
        mean, var = marginals_from_kuf(np.array([[1.0]]), np.array([1.0]), q)
        assert (mean[0], var[0]) == pytest.approx((2.0, 0.5))

    @given(st.integers(1, 12), st.integers(0, 2**31))
    def test_diag_and_dense_paths_agree(self, M, seed):
        rng = np.random.default_rng(seed)
        d = rng.uniform(0.1, 3.0, M)
        mean = rng.normal(size=M)
        K = rng.normal(size=(M, 9))
        kd = np.ones(9)
        a = marginals_from_kuf(K, kd, VariationalDistribution(mean, diag=d))
        b = marginals_from_kuf(K, kd, VariationalDistribution(mean, chol=np.diag(np.sqrt(d))))
        np.testing.assert_allclose(a[0], b[0], rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(a[1], b[1], rtol=1e-12, atol=1e-12)

    def test_identity_path_matches_general_formula(self, rng):
        M = 6
        q = random_q(rng, M, "dense")
        K = rng.normal(size=(M, 5))
        mean, var = marginals_from_kuf(K, np.full(5, 2.0), q)
        ref = 2.0 + np.einsum("mn,mk,kn->n", K, q.covariance() - np.eye(M), K)
        np.testing.assert_allclose(var, ref, atol=1e-12)
        np.testing.assert_allclose(mean, K.T @ q.mean)

    def test_inducing_points_prior(self):
        Z = np.linspace(-1, 1, 4)
        feats = InducingPoints(Z, SE)
        q = VariationalDistribution.from_covariance(np.zeros(4), feats.kuu())
        mom = qf_marginals(SVGPModel(feats, q, 0.1), np.array([0.3, 2.0]))
        np.testing.assert_allclose(mom.var, 1.0, atol=1e-8)

    def test_trig_requires_mc(self):
        model = SVGPModel(TrigVOF(3, 5.0, SE), VariationalDistribution.prior(3), 0.1)
        with pytest.raises(TypeError):
            qf_marginals(model, [0.0])

    def test_optimal_q_contracts_variance(self, rng):
        kernel, noise, X, y = small_problem(rng, 30)
        model = SVGPModel(HermiteVOF(15, 1.5, kernel.__class__("se", kernel.variance, 1.0)),
                          VariationalDistribution.prior(15), noise)
        model = model.replace(q=optimal_q_gaussian(model, X, y))
        mom = qf_marginals(model, X)
        assert np.all(mom.var <= kernel_diag(model.kernel, X) + 1e-10)


class TestKL:
    def test_zero_at_prior(self):
        assert kl_to_prior(VariationalDistribution.prior(5)) == 0.0

    def test_unit_shift(self):
        q = VariationalDistribution([1.0, 0.0, 0.0], chol=np.eye(3))
        assert kl_to_prior(q) == pytest.approx(0.5)

    @given(st.integers(1, 10), st.integers(0, 2**31), st.sampled_from(["dense", "diag"]))
    def test_nonnegative(self, M, seed, structure):
        assert kl_to_prior(random_q(np.random.default_rng(seed), M, structure)) >= 0.0

    def test_dense_kuu_matches_closed_form(self, rng):
        M = 4
        A = rng.normal(size=(M, M))
        Kuu = A @ A.T + M * np.eye(M)
        q = random_q(rng, M, "dense")
        S = q.covariance()
        ref = 0.5 * (np.trace(np.linalg.solve(Kuu, S)) + q.mean @ np.linalg.solve(Kuu, q.mean) - M
                     + np.linalg.slogdet(Kuu)[1] - np.linalg.slogdet(S)[1])
        assert kl_to_prior(q, Kuu) == pytest.approx(ref, rel=1e-12)
        qd = random_q(rng, M, "diag")
        Sd = qd.covariance()
        refd = 0.5 * (np.trace(np.linalg.solve(Kuu, Sd)) + qd.mean @ np.linalg.solve(Kuu, qd.mean) - M
                      + np.linalg.slogdet(Kuu)[1] - np.linalg.slogdet(Sd)[1])
        assert kl_to_prior(qd, Kuu) == pytest.approx(refd, rel=1e-12)


class TestElbo:
    def test_single_point_example(self):
        model = SVGPModel(HermiteVOF(0, 1.0, SE), VariationalDistribution(np.zeros(0), diag=np.ones(0)), 1.0)
        val = elbo_gaussian(model, np.array([0.0]), np.array([0.0]))
        assert val == pytest.approx(-0.5 * math.log(2 * math.pi) - 0.5, abs=1e-12)
        assert val == pytest.approx(-1.418939, abs=1e-6)

    def test_bound_on_random_problems(self):
        rng = np.random.default_rng(99)
        for i in range(100):
            kernel, noise, X, y = small_problem(rng)
            lml = exact_lml(kernel, X, y, noise)
            M = int(rng.integers(1, 15))
            structure = "diag" if i % 2 else "dense"
            if i % 3 == 0:
                feats = InducingPoints(rng.uniform(-3, 3, M), kernel)
            else:
                r = kernel.lengthscale * float(rng.uniform(0.75, 3.0))
                feats = HermiteVOF(M, r, kernel)
            model = SVGPModel(feats, random_q(rng, M, structure), noise)
            assert elbo_gaussian(model, X, y) <= lml + 1e-8
            best = model.replace(q=optimal_q_gaussian(model, X, y))
            assert elbo_gaussian(best, X, y) <= lml + 1e-8

    def test_tight_when_features_span(self, rng):
        kernel, noise, X, y = small_problem(rng, 10)
        feats = InducingPoints(X, kernel, jitter=1e-12)
        assert trace_residual(feats, X) < 1e-10
        model = SVGPModel(feats, VariationalDistribution.prior(10), noise)
        model = model.replace(q=optimal_q_gaussian(model, X, y))
        assert elbo_gaussian(model, X, y) == pytest.approx(exact_lml(kernel, X, y, noise), abs=1e-6)

    def test_tight_with_many_hermite_features(self):
        kernel = KernelParams("se", 1.0, 1.0)
        X = np.linspace(-1, 1, 8)
        y = sample_prior(kernel, X, 0.1, seed=4)
        feats = HermiteVOF(80, 0.9, kernel)
        assert trace_residual(feats, X) < 1e-10
        model = SVGPModel(feats, VariationalDistribution.prior(80), 0.1)
        model = model.replace(q=optimal_q_gaussian(model, X, y))
        assert elbo_gaussian(model, X, y) == pytest.approx(exact_lml(kernel, X, y, 0.1), abs=1e-6)

    @given(st.floats(0.1, 10.0), st.integers(0, 2**31), st.sampled_from(["dense", "diag"]))
    def test_change_of_units(self, c, seed, structure):
        rng = np.random.default_rng(seed)
        X = rng.uniform(-2, 2, 9)
        y = rng.normal(size=9)
        q = random_q(rng, 5, structure)
        base = SVGPModel(HermiteVOF(5, 1.1, KernelParams("se", 0.7, 1.0)), q, 0.2)
        scaled = SVGPModel(HermiteVOF(5, 1.1, KernelParams("se", 0.7 * c * c, 1.0)), q, 0.2 * c * c)
        shift = elbo_gaussian(scaled, X, c * y) - elbo_gaussian(base, X, y)
        assert shift == pytest.approx(-9 * math.log(c), abs=1e-8)

    def test_collapsed_matches_optimal_q(self, rng):
        kernel, noise, X, y = small_problem(rng, 25)
        for feats in (HermiteVOF(9, 1.3 * kernel.lengthscale, kernel), InducingPoints(X[:6], kernel)):
            model = SVGPModel(feats, VariationalDistribution.prior(feats.M), noise)
            best = model.replace(q=optimal_q_gaussian(model, X, y))
            assert collapsed_elbo(feats, X, y, noise) == pytest.approx(elbo_gaussian(best, X, y), abs=1e-8)

    def test_minibatch_scaling(self, rng):
        model = SVGPModel(HermiteVOF(4, 1.0, SE), random_q(rng, 4, "diag"), 0.3)
        X = rng.uniform(-2, 2, 10)
        y = rng.normal(size=10)
        full = elbo_gaussian(model, X, y)
        kl = kl_to_prior(model.q)
        assert elbo_gaussian(model, X, y, n_data=10) == pytest.approx(full)
        # doubling the dataset with a copy doubles the likelihood term
        assert elbo_gaussian(model, X, y, n_data=20) == pytest.approx(2 * (full + kl) - kl)


class TestOptimalQ:
    def test_zero_signal(self):
        model = SVGPModel(HermiteVOF(3, 1.0, SE), VariationalDistribution.prior(3), 0.5)
        q = optimal_q_gaussian(model, np.zeros(4), np.ones(4), kuf=np.zeros((3, 4)))
        np.testing.assert_allclose(q.covariance(), np.eye(3), atol=1e-14)
        np.testing.assert_allclose(q.mean, 0.0, atol=1e-14)

    def test_large_noise(self, rng):
        X = rng.uniform(-2, 2, 20)
        y = rng.normal(size=20)
        model = SVGPModel(HermiteVOF(5, 1.0, SE), VariationalDistribution.prior(5), 1e10)
        q = optimal_q_gaussian(model, X, y)
        np.testing.assert_allclose(q.covariance(), np.eye(5), atol=1e-8)

    @pytest.mark.parametrize("structure", ["dense", "diag"])
    def test_random_perturbations_decrease(self, structure):
        rng = np.random.default_rng(7)
        kernel, noise, X, y = small_problem(rng, 40)
        M = 8
        model = SVGPModel(HermiteVOF(M, 1.2 * kernel.lengthscale, kernel), VariationalDistribution.prior(M, structure),
                          noise)
        q = optimal_q_gaussian(model, X, y, structure=structure)
        best = elbo_gaussian(model.replace(q=q), X, y)
        for _ in range(100):
            dm = 1e-3 * rng.normal(size=M)
            if structure == "diag":
                pert = VariationalDistribution(q.mean + dm, diag=q.diag * np.exp(1e-3 * rng.normal(size=M)))
            else:
                dL = np.tril(1e-3 * rng.normal(size=(M, M)))
                pert = VariationalDistribution(q.mean + dm, chol=q.chol + dL)
            assert elbo_gaussian(model.replace(q=pert), X, y) < best

    def test_diag_optimum_by_numerical_search(self, rng):
        from scipy.optimize import minimize

        kernel, noise, X, y = small_problem(rng, 30)
        model = SVGPModel(HermiteVOF(5, 1.3 * kernel.lengthscale, kernel), VariationalDistribution.prior(5, "diag"),
                          noise)
        q = optimal_q_gaussian(model, X, y, structure="diag")

        def neg(theta):
            qq = VariationalDistribution(theta[:5], diag=np.exp(theta[5:]))
            return -elbo_gaussian(model.replace(q=qq), X, y)

        res = minimize(neg, np.zeros(10), method="BFGS", options={"gtol": 1e-10})
        assert -res.fun == pytest.approx(elbo_gaussian(model.replace(q=q), X, y), abs=1e-6)

    def test_dense_beats_diag(self, rng):
        kernel, noise, X, y = small_problem(rng, 40)
        model = SVGPModel(HermiteVOF(10, 1.2 * kernel.lengthscale, kernel), VariationalDistribution.prior(10), noise)
        dense = elbo_gaussian(model.replace(q=optimal_q_gaussian(model, X, y, "dense")), X, y)
        diag = elbo_gaussian(model.replace(q=optimal_q_gaussian(model, X, y, "diag")), X, y)
        assert dense >= diag - 1e-10


class TestMeanField:
    # r = 1.5 l keeps every feature data-dominated already at N = 200
    feats = HermiteVOF(8, 1.5, SE)

    def test_ratio_shrinks_with_n(self):
        for seed in range(3):
            (_, small), (_, large) = meanfield_diagonality_profile(self.feats, 0.1, [200, 5000], seed=seed)
            assert large < small

    def test_single_feature(self):
        rows = meanfield_diagonality_profile(HermiteVOF(1, 1.0, SE), 0.1, [50], seed=0)
        assert rows[0][1] == 0.0
        assert offdiagonal_ratio(np.ones((1, 1))) == 0.0

    def test_mixture_inputs_stay_coupled(self):
        feats = self.feats

        def bimodal(n, rng):
            return np.where(rng.random(n) < 0.5, -2.5, 2.5) + 0.3 * rng.standard_normal(n)

        (_, mixed), = meanfield_diagonality_profile(feats, 0.1, [5000], seed=1, inputs=bimodal)
        (_, matched), = meanfield_diagonality_profile(feats, 0.1, [5000], seed=1)
        assert mixed > matched


class TestMonteCarlo:
    feat = TrigVOF(5, 6.0, KernelParams("matern52", 1.0, 0.7))
    X = np.array([-1.0, 0.2, 1.5])

    def model(self, structure="dense", seed=3):
        return SVGPModel(self.feat, random_q(np.random.default_rng(seed), 5, structure), 0.2)

    def test_zero_mean_gives_zero(self):
        model = SVGPModel(self.feat, VariationalDistribution(np.zeros(5), diag=np.full(5, 0.5)), 0.2)
        for seed in range(10):
            mom = mc_qf_marginals(model, self.X, StratifiedSampler.from_seed(4, seed))
            np.testing.assert_array_equal(mom.mean, 0.0)
            np.testing.assert_array_equal(mom.mean_sq, 0.0)

    @pytest.mark.parametrize("structure", ["dense", "diag"])
    def test_moment_estimators_unbiased(self, structure):
        model = self.model(structure)
        K = self.feat.kuf_quadrature(self.X, QuadratureSpec("gauss-legendre", order=800, domain=self.feat.support))
        ref_mean, ref_var = marginals_from_kuf(K, kernel_diag(model.kernel, self.X), model.q)
        n = 10_000
        draws = [mc_qf_marginals(model, self.X, StratifiedSampler.from_seed(3, s)) for s in range(n)]
        for attr, ref in (("mean", ref_mean), ("mean_sq", ref_mean**2), ("var", ref_var)):
            vals = np.array([getattr(d, attr) for d in draws])
            se = vals.std(axis=0, ddof=1) / math.sqrt(n)
            assert np.all(np.abs(vals.mean(axis=0) - ref) <= 3 * se + 1e-12), attr

    def test_pair_form_agrees(self):
        model = self.model()
        y = np.array([0.3, -0.1, 0.8])
        s = StratifiedSampler.from_seed(6, 11)
        K1, K2 = mc_kuf_pair(self.feat, self.X, s)
        a = mc_elbo_gaussian(model, self.X, y, s)
        b = mc_elbo_from_pair(model, y, K1, K2, kernel_diag(model.kernel, self.X))
        assert a == pytest.approx(b, rel=1e-12)

    def test_elbo_unbiased(self):
        model = self.model()
        y = np.array([0.3, -0.1, 0.8])
        ref, _ = quadrature_elbo(model, self.X, y)
        vals = np.array([mc_elbo_gaussian(model, self.X, y, StratifiedSampler.from_seed(4, s)) for s in range(1000)])
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert abs(vals.mean() - ref) < 3 * se

    def test_full_batch_has_no_rescaling(self):
        model = self.model()
        y = np.array([0.3, -0.1, 0.8])
        s = StratifiedSampler.from_seed(4, 5)
        assert mc_elbo_gaussian(model, self.X, y, s, n_data=3) == mc_elbo_gaussian(model, self.X, y, s)

    def test_minibatch_unbiased(self):
        rng = np.random.default_rng(12)
        X = rng.uniform(-2, 2, 20)
        y = rng.normal(size=20)
        model = self.model()
        ref, _ = quadrature_elbo(model, X, y)
        vals = []
        for i in range(1000):
            idx = rng.choice(20, size=5, replace=False)
            vals.append(mc_elbo_gaussian(model, X[idx], y[idx], StratifiedSampler.from_seed(4, i), n_data=20))
        vals = np.array(vals)
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert abs(vals.mean() - ref) < 3 * se

    def test_deterministic_per_seed(self):
        model = self.model()
        y = np.zeros(3)
        a = mc_elbo_gaussian(model, self.X, y, StratifiedSampler.from_seed(8, [1, 2]))
        b = mc_elbo_gaussian(model, self.X, y, StratifiedSampler.from_seed(8, [1, 2]))
        assert a == b


class TestPredict:
    def test_hermite_matches_marginals(self, rng):
        model = SVGPModel(HermiteVOF(7, 1.2, SE), random_q(rng, 7, "dense"), 0.1)
        X = np.linspace(-3, 3, 13)
        mom = qf_marginals(model, X)
        pred = predict(model, X)
        np.testing.assert_allclose(pred.mean, mom.mean, atol=1e-6)
        np.testing.assert_allclose(pred.var, np.clip(mom.var, 0, 1), atol=1e-6)
        gh = predict(model, X, quad=QuadratureSpec("gauss-hermite", order=80))
        np.testing.assert_allclose(gh.mean, mom.mean, atol=1e-6)
        assert gh.provenance == "quadrature"

    def test_prior_model(self):
        model = SVGPModel(TrigVOF(7, 5.0, SE), VariationalDistribution.prior(7), 0.1)
        pred = predict(model, np.array([0.0, 2.0]))
        np.testing.assert_array_equal(pred.mean, 0.0)
        np.testing.assert_allclose(pred.var, 1.0)

    def test_trig_quadrature_orders_agree(self, rng):
        feats = TrigVOF(7, 4.0, KernelParams("se", 1.0, 0.8))
        model = SVGPModel(feats, random_q(rng, 7, "dense"), 0.1)
        X = np.linspace(-2, 2, 9)
        lo = predict(model, X, QuadratureSpec("gauss-legendre", order=64, domain=feats.support))
        hi = predict(model, X, QuadratureSpec("gauss-legendre", order=128, domain=feats.support))
        np.testing.assert_allclose(lo.mean, hi.mean, atol=1e-5)
        np.testing.assert_allclose(lo.var, hi.var, atol=1e-5)

    def test_clamping_flagged(self):
        q = VariationalDistribution(np.zeros(2), diag=[50.0, 50.0])
        pred = predict(SVGPModel(HermiteVOF(2, 1.0, SE), q, 0.1), np.array([0.0]))
        assert pred.clamped.all()
        assert pred.var[0] == pytest.approx(1.0)
