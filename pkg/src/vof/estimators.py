"""scikit-learn style regressors wrapping the functional core."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exact_gp import exact_lml, exact_posterior_predict, fit_exact
from .features import HermiteVOF, InducingPoints, TrigVOF, hermite_r_for_input_sd
from .kernels import KernelParams, kernel_diag
from .numerics import StratifiedSampler
from .svgp import (
    SVGPModel,
    VariationalDistribution,
    elbo_gaussian,
    mc_elbo_gaussian,
    optimal_q_gaussian,
    predict,
)
from .training import OptimizerConfig, fit

FEATURE_FAMILIES = ("hermite", "trig", "inducing")


def _single_column(X, y=None):
    if y is None:
        X = check_array(X, dtype=float)
    else:
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
    if X.shape[1] != 1:
        raise ValueError(f"only one-dimensional inputs are supported, got {X.shape[1]} columns")
    return (X[:, 0], y) if y is not None else X[:, 0]


class VOFRegressor(RegressorMixin, BaseEstimator):
    """Sparse variational GP regression with orthogonal (or point) inducing features.

    Parameters
    ----------
    features : {"hermite", "trig", "inducing"}
    n_features : int
        M, the number of inducing features.
    scale : float or None
        ``r`` for Hermite features, ``a`` for Trig features.  ``None`` picks
        a data-driven default (Hermite: matched to the input spread;
        Trig: ``5 / lengthscale``).
    covariance : {"dense", "diag"}
        Structure of the variational covariance S.
    objective : {"collapsed", "analytic", "mc"} or None
        ``None`` means collapsed for closed-form features and Monte Carlo
        for Trig features.
    trainable : tuple of str
        Subset of ``{"q", "scale", "kernel", "noise"}``.
    optimizer : {"lbfgs", "adam", "grid-then-adam"}
    """

    def __init__(
        self,
        features="hermite",
        n_features=20,
        scale=None,
        kernel="se",
        variance=1.0,
        lengthscale=1.0,
        noise_variance=0.1,
        covariance="dense",
        objective=None,
        trainable=("scale", "kernel", "noise"),
        optimizer="lbfgs",
        max_iter=200,
        learning_rate=5e-4,
        batch_size=None,
        n_samples=50,
        gradient="finite-difference",
        random_state=0,
    ):
        self.features = features
        self.n_features = n_features
        self.scale = scale
        self.kernel = kernel
        self.variance = variance
        self.lengthscale = lengthscale
        self.noise_variance = noise_variance
        self.covariance = covariance
        self.objective = objective
        self.trainable = trainable
        self.optimizer = optimizer
        self.max_iter = max_iter
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_samples = n_samples
        self.gradient = gradient
        self.random_state = random_state

    def _objective(self):
        if self.objective is not None:
            return self.objective
        return "mc" if self.features == "trig" else "collapsed"

    def _template(self, x, y):
        if self.features not in FEATURE_FAMILIES:
            raise ValueError(f"features must be one of {FEATURE_FAMILIES}")
        if self.covariance not in ("dense", "diag"):
            raise ValueError("covariance must be 'dense' or 'diag'")
        kern = KernelParams(self.kernel, self.variance, self.lengthscale)
        M = int(self.n_features)
        if self.features == "hermite":
            r = self.scale
            if r is None:
                r = hermite_r_for_input_sd(max(float(np.std(x)), 1e-3), kern.lengthscale)
            feats = HermiteVOF(M, r, kern)
        elif self.features == "trig":
            a = self.scale if self.scale is not None else 5.0 / kern.lengthscale
            feats = TrigVOF(M, a, kern)
        else:
            Z = np.quantile(x, np.linspace(0.0, 1.0, M)) if M > 1 else np.array([np.median(x)])
            feats = InducingPoints(tuple(Z), kern)
        q = VariationalDistribution.prior(M, self.covariance)
        model = SVGPModel(feats, q, self.noise_variance)
        # start q at the closed-form optimum; Trig features use a quadrature Kuf for this
        kuf = feats.kuf_quadrature(x) if isinstance(feats, TrigVOF) else None
        return model.replace(q=optimal_q_gaussian(model, x, y, structure=self.covariance, kuf=kuf))

    def fit(self, X, y):
        x, y = _single_column(X, y)
        objective = self._objective()
        template = self._template(x, y)
        config = OptimizerConfig(
            method=self.optimizer,
            learning_rate=self.learning_rate,
            iterations=int(self.max_iter),
            batch_size=self.batch_size,
            gradient=self.gradient,
            seed=int(self.random_state or 0),
            n_samples=int(self.n_samples),
        )
        result = fit(template, x, y, objective, config, trainable=tuple(self.trainable))
        self.model_ = result.model
        self.trace_ = result.trace
        self.n_features_in_ = 1
        return self

    def predict(self, X, return_std=False):
        """Predictive mean; with ``return_std`` also the latent-function sd."""
        check_is_fitted(self, "model_")
        x = _single_column(X)
        moments = predict(self.model_, x)
        if return_std:
            return moments.mean, np.sqrt(moments.var)
        return moments.mean

    def elbo(self, X, y, n_evaluations=100):
        """ELBO of the fitted model on ``(X, y)``.

        Monte Carlo features average ``n_evaluations`` independent estimates.
        """
        check_is_fitted(self, "model_")
        x, y = _single_column(X, y)
        if isinstance(self.model_.features, TrigVOF):
            root = StratifiedSampler.from_seed(self.n_samples, int(self.random_state or 0) + 1)
            vals = [mc_elbo_gaussian(self.model_, x, y, root.spawn(i)) for i in range(n_evaluations)]
            return float(np.mean(vals))
        return elbo_gaussian(self.model_, x, y)


class ExactGPRegressor(RegressorMixin, BaseEstimator):
    """Dense GP regression with fixed hyperparameters (the reference model)."""

    def __init__(self, kernel="se", variance=1.0, lengthscale=1.0, noise_variance=0.1):
        self.kernel = kernel
        self.variance = variance
        self.lengthscale = lengthscale
        self.noise_variance = noise_variance

    def fit(self, X, y):
        x, y = _single_column(X, y)
        self.kernel_ = KernelParams(self.kernel, self.variance, self.lengthscale)
        self.posterior_ = fit_exact(self.kernel_, x, y, self.noise_variance)
        self.log_marginal_likelihood_ = exact_lml(self.kernel_, x, y, self.noise_variance)
        self.n_features_in_ = 1
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "posterior_")
        x = _single_column(X)
        mean, var = exact_posterior_predict(self.posterior_, x)
        if return_std:
            return mean, np.sqrt(var)
        return mean

    def prior_variance(self, X):
        check_is_fitted(self, "kernel_")
        return kernel_diag(self.kernel_, _single_column(X))
