"""Dense exact GP regression, used as ground truth and to synthesise data."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .kernels import kernel_diag, kernel_matrix

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ExactPosterior:
    kernel: object
    noise_variance: float
    X: np.ndarray
    alpha: np.ndarray
    chol: np.ndarray


def _cholesky(K, base_jitter):
    """Cholesky with a single retry at 100x jitter; failures are not hidden further."""
    try:
        return linalg.cholesky(K, lower=True)
    except linalg.LinAlgError:
        bumped = K + 100.0 * base_jitter * np.eye(K.shape[0])
        return linalg.cholesky(bumped, lower=True)


def fit_exact(kernel, X, y, noise_variance):
    X = np.asarray(X, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.size != y.size:
        raise ValueError("X and y differ in length")
    K = kernel_matrix(kernel, X, jitter=noise_variance)
    L = _cholesky(K, max(noise_variance, 1e-8 * kernel.variance))
    alpha = linalg.cho_solve((L, True), y)
    return ExactPosterior(kernel, float(noise_variance), X, alpha, L)


def exact_lml(kernel, X, y, noise_variance):
    """log N(y | 0, Kff + noise I)."""
    post = fit_exact(kernel, X, y, noise_variance)
    y = np.asarray(y, dtype=float).reshape(-1)
    return float(
        -0.5 * (y @ post.alpha) - np.sum(np.log(np.diag(post.chol))) - 0.5 * y.size * LOG_2PI
    )


def exact_posterior_predict(post, Xstar):
    """Predictive mean and latent-function variance at ``Xstar``."""
    xs = np.asarray(Xstar, dtype=float).reshape(-1)
    Ksx = kernel_matrix(post.kernel, xs, post.X)
    mean = Ksx @ post.alpha
    V = linalg.solve_triangular(post.chol, Ksx.T, lower=True)
    var = kernel_diag(post.kernel, xs) - np.sum(V**2, axis=0)
    return mean, np.maximum(var, 0.0)


def sample_prior(kernel, X, noise_variance, seed=0):
    """y = L eps + sqrt(noise) eps' with L the (jittered) Cholesky factor of Kff."""
    X = np.asarray(X, dtype=float).reshape(-1)
    rng = np.random.default_rng(seed)
    K = kernel_matrix(kernel, X)
    L = _cholesky(K, 1e-8 * kernel.variance)
    f = L @ rng.standard_normal(X.size)
    return f + math.sqrt(noise_variance) * rng.standard_normal(X.size)
