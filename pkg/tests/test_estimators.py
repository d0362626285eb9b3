import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from vof.estimators import ExactGPRegressor, VOFRegressor
from vof.exact_gp import sample_prior
from vof.kernels import KernelParams


@pytest.fixture
def data():
    rng = np.random.default_rng(3)
    X = rng.uniform(-3, 3, 80)
    y = sample_prior(KernelParams("se", 1.0, 0.7), X, 0.01, seed=4)
    return X.reshape(-1, 1), y


class TestVOFRegressor:
    def test_params_roundtrip(self):
        est = VOFRegressor(n_features=7, covariance="diag")
        assert clone(est).get_params() == est.get_params()
        est.set_params(scale=2.0)
        assert est.scale == 2.0

    def test_fit_predict_close_to_exact(self, data):
        X, y = data
        est = VOFRegressor(n_features=30, lengthscale=0.7, noise_variance=0.01, trainable=("scale",)).fit(X, y)
        ref = ExactGPRegressor(lengthscale=0.7, noise_variance=0.01).fit(X, y)
        grid = np.linspace(-2.5, 2.5, 21).reshape(-1, 1)
        mean, std = est.predict(grid, return_std=True)
        ref_mean, ref_std = ref.predict(grid, return_std=True)
        np.testing.assert_allclose(mean, ref_mean, atol=5e-3)
        np.testing.assert_allclose(std, ref_std, atol=5e-3)
        assert est.elbo(X, y) <= ref.log_marginal_likelihood_ + 1e-8
        assert est.score(X, y) > 0.99

    def test_learns_hyperparameters(self, data):
        X, y = data
        est = VOFRegressor(n_features=30, lengthscale=2.0, variance=0.3, noise_variance=0.2).fit(X, y)
        k = est.model_.kernel
        assert 0.35 < k.lengthscale < 1.4
        assert est.trace_[-1][1] > est.trace_[0][1]

    def test_trig_mc(self, data):
        X, y = data
        est = VOFRegressor(features="trig", n_features=15, scale=8.0, kernel="matern52", lengthscale=0.7,
                           noise_variance=0.01, covariance="diag", trainable=("q",), optimizer="adam",
                           max_iter=20, learning_rate=1e-3, n_samples=16, gradient="supplied")
        est.fit(X, y)
        assert np.isfinite(est.elbo(X, y, n_evaluations=5))
        assert est.predict(X[:3]).shape == (3,)

    def test_inducing_points(self, data):
        X, y = data
        est = VOFRegressor(features="inducing", n_features=12, lengthscale=0.7, noise_variance=0.01,
                           trainable=("noise",), max_iter=10).fit(X, y)
        assert est.predict(X).shape == (80,)

    def test_validation(self, data):
        X, y = data
        with pytest.raises(ValueError):
            VOFRegressor(features="fourier").fit(X, y)
        with pytest.raises(ValueError):
            VOFRegressor(covariance="banded").fit(X, y)
        with pytest.raises(ValueError):
            VOFRegressor().fit(np.hstack([X, X]), y)
        with pytest.raises(ValueError):
            VOFRegressor().fit(X, y[:-1])
        with pytest.raises(NotFittedError):
            VOFRegressor().predict(X)


class TestExactGPRegressor:
    def test_predict_and_lml(self, data):
        X, y = data
        est = ExactGPRegressor(lengthscale=0.7, noise_variance=0.01).fit(X, y)
        mean = est.predict(X)
        assert np.abs(mean - y).max() < 0.5
        np.testing.assert_allclose(est.prior_variance(X[:2]), 1.0)
        assert np.isfinite(est.log_marginal_likelihood_)

    def test_clone(self):
        est = ExactGPRegressor(kernel="matern32", variance=2.0)
        assert clone(est).get_params() == est.get_params()
