"""Sparse variational GP regression on top of a feature family.

With orthogonal features ``Kuu = I`` and the marginals of ``q(f)`` cost
``O(N M)`` for a diagonal ``S`` or ``O(N M^2)`` for a dense one; no
``M x M`` factorisation is ever performed.  Inducing points keep the
usual Cholesky path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .features import IdentityKuu, OrthogonalFeatures, TrigVOF, feature_kuf
from .kernels import kernel_diag, spectral_density
from .numerics import stratified_draw

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class VariationalDistribution:
    """q(u) = N(mean, S).

    ``S`` is stored either as a lower-triangular factor ``chol`` (dense) or
    as a vector of variances ``diag``; exactly one of the two is set.
    """

    mean: np.ndarray
    chol: np.ndarray | None = None
    diag: np.ndarray | None = None

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        object.__setattr__(self, "mean", mean)
        if (self.chol is None) == (self.diag is None):
            raise ValueError("give exactly one of chol or diag")
        if self.diag is not None:
            d = np.asarray(self.diag, dtype=float).reshape(-1)
            if d.shape != mean.shape or np.any(d <= 0) or not np.all(np.isfinite(d)):
                raise ValueError("diagonal covariance must be positive with one entry per feature")
            object.__setattr__(self, "diag", d)
        else:
            L = np.tril(np.asarray(self.chol, dtype=float))
            if L.shape != (mean.size, mean.size) or np.any(np.diag(L) <= 0):
                raise ValueError("Cholesky factor must be lower triangular with positive diagonal")
            object.__setattr__(self, "chol", L)

    @classmethod
    def prior(cls, M, structure="dense"):
        if structure == "diag":
            return cls(np.zeros(M), diag=np.ones(M))
        return cls(np.zeros(M), chol=np.eye(M))

    @classmethod
    def from_covariance(cls, mean, S, structure="dense"):
        S = np.asarray(S, dtype=float)
        if structure == "diag":
            return cls(mean, diag=np.diag(S).copy())
        S = 0.5 * (S + S.T)
        try:
            L = linalg.cholesky(S, lower=True)
        except linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive definite") from exc
        return cls(mean, chol=L)

    @property
    def M(self):
        return self.mean.size

    @property
    def is_diagonal(self):
        return self.diag is not None

    @property
    def structure(self):
        return "diag" if self.is_diagonal else "dense"

    def covariance(self):
        if self.is_diagonal:
            return np.diag(self.diag)
        return self.chol @ self.chol.T

    def logdet(self):
        if self.is_diagonal:
            return float(np.sum(np.log(self.diag)))
        return float(2.0 * np.sum(np.log(np.diag(self.chol))))

    def trace(self):
        if self.is_diagonal:
            return float(self.diag.sum())
        return float(np.sum(self.chol**2))


@dataclass(frozen=True)
class SVGPModel:
    features: object
    q: VariationalDistribution
    noise_variance: float

    def __post_init__(self):
        if not self.noise_variance > 0:
            raise ValueError("noise variance must be positive")
        if self.q.M != self.features.M:
            raise ValueError(f"q has {self.q.M} entries but there are {self.features.M} features")

    @property
    def kernel(self):
        return self.features.kernel

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass
class MarginalMoments:
    """Per-point moments of q(f).

    ``provenance`` is ``"analytic"``, ``"monte-carlo"`` or ``"quadrature"``.
    Monte Carlo variances can be negative; ``clamped`` flags points whose
    variance was clipped into ``[0, k(x, x)]`` at prediction time.
    """

    mean: np.ndarray
    var: np.ndarray
    provenance: str = "analytic"
    mean_sq: np.ndarray | None = None
    clamped: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.mean_sq is None:
            self.mean_sq = self.mean**2


# ---------------------------------------------------------------------------
# Marginals and KL
# ---------------------------------------------------------------------------


def marginals_from_kuf(Kuf, kdiag, q, Kuu=None):
    """Mean and variance of q(f_n) given a cross-covariance matrix."""
    Kuf = np.asarray(Kuf)
    if Kuu is None or isinstance(Kuu, IdentityKuu):
        mean = Kuf.T @ q.mean
        if q.is_diagonal:
            var = kdiag + np.einsum("m,mn,mn->n", q.diag - 1.0, Kuf, Kuf)
        else:
            A = q.chol.T @ Kuf
            var = kdiag + np.einsum("mn,mn->n", A, A) - np.einsum("mn,mn->n", Kuf, Kuf)
        return mean, var
    Lu = linalg.cholesky(Kuu, lower=True)
    B = linalg.solve_triangular(Lu, Kuf, lower=True)
    A = linalg.solve_triangular(Lu.T, B, lower=False)  # Kuu^-1 Kuf
    mean = A.T @ q.mean
    if q.is_diagonal:
        proj = (q.diag[:, None] * A**2).sum(axis=0)
    else:
        proj = ((q.chol.T @ A) ** 2).sum(axis=0)
    return mean, kdiag + proj - (B**2).sum(axis=0)


def qf_marginals(model, X, kuf=None):
    """Analytic marginals of q(f) at ``X`` (needs a closed-form or supplied Kuf)."""
    feats = model.features
    if kuf is None:
        if isinstance(feats, OrthogonalFeatures) and not feats.has_closed_form:
            raise TypeError(
                f"{type(feats).__name__} has no closed-form Kuf; use mc_qf_marginals or predict"
            )
        kuf = feats.kuf(X)
    mean, var = marginals_from_kuf(kuf, kernel_diag(model.kernel, X), model.q, feats.kuu())
    return MarginalMoments(mean, var, "analytic")


def kl_to_prior(q, Kuu=None):
    """KL(N(m, S) || N(0, Kuu))."""
    M = q.M
    if M == 0:
        return 0.0
    if Kuu is None or isinstance(Kuu, IdentityKuu):
        kl = 0.5 * (q.trace() + q.mean @ q.mean - M - q.logdet())
        return max(float(kl), 0.0)
    Lu = linalg.cholesky(Kuu, lower=True)
    alpha = linalg.solve_triangular(Lu, q.mean, lower=True)
    if q.is_diagonal:
        Linv = linalg.solve_triangular(Lu, np.eye(M), lower=True)
        tr = float(np.sum(Linv**2 * q.diag[None, :]))
    else:
        tr = float(np.sum(linalg.solve_triangular(Lu, q.chol, lower=True) ** 2))
    logdet_p = 2.0 * np.sum(np.log(np.diag(Lu)))
    return max(0.5 * (tr + alpha @ alpha - M + logdet_p - q.logdet()), 0.0)


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


def expected_loglik(y, mean, mean_sq, var, noise_variance):
    """Sum over points of E_q[log N(y_n | f_n, noise)] written in the moments that MC can estimate unbiasedly."""
    y = np.asarray(y, dtype=float)
    quad = y * y - 2.0 * y * mean + mean_sq + var
    return float(np.sum(-0.5 * (LOG_2PI + math.log(noise_variance)) - quad / (2.0 * noise_variance)))


def elbo_gaussian(model, X, y, kuf=None, n_data=None):
    """Analytic ELBO for a Gaussian likelihood.

    When ``X`` is a minibatch of a dataset of size ``n_data`` the likelihood
    sum is rescaled by ``n_data / len(X)``.
    """
    mom = qf_marginals(model, X, kuf=kuf)
    scale = 1.0 if n_data is None else n_data / len(np.asarray(y).reshape(-1))
    ell = expected_loglik(y, mom.mean, mom.mean_sq, mom.var, model.noise_variance)
    return scale * ell - kl_to_prior(model.q, model.features.kuu())


def collapsed_elbo(features, X, y, noise_variance, kuf=None):
    """Optimal-q bound log N(y | 0, Qff + noise I) - tr(Kff - Qff) / (2 noise).

    Computed independently of :func:`optimal_q_gaussian`, so the two can be
    checked against each other.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    N = y.size
    K = features.kuf(X) if kuf is None else np.asarray(kuf)
    Kuu = features.kuu()
    if not isinstance(Kuu, IdentityKuu):
        Lu = linalg.cholesky(Kuu, lower=True)
        K = linalg.solve_triangular(Lu, K, lower=True)
    s2 = noise_variance
    kdiag = kernel_diag(features.kernel, X)
    trace_term = float(kdiag.sum() - np.sum(K**2)) / (2.0 * s2)
    M = K.shape[0]
    A = np.eye(M) + (K @ K.T) / s2
    LA = linalg.cholesky(A, lower=True)
    c = linalg.solve_triangular(LA, K @ y, lower=True) / s2
    quad = (y @ y) / s2 - c @ c
    logdet = N * math.log(s2) + 2.0 * np.sum(np.log(np.diag(LA)))
    return float(-0.5 * (N * LOG_2PI + logdet + quad) - trace_term)


def optimal_q_gaussian(model, X, y, structure=None, kuf=None):
    """Closed-form maximiser of the Gaussian ELBO over (m, S).

    ``S* = (I + K K^T / noise)^-1`` and ``m* = S* K y / noise`` for orthogonal
    features.  With ``structure="diag"`` the optimum over diagonal ``S`` is
    returned instead: the mean is unchanged and ``S_mm = 1 / A_mm``.
    """
    structure = structure or model.q.structure
    y = np.asarray(y, dtype=float).reshape(-1)
    feats = model.features
    K = feats.kuf(X) if kuf is None else np.asarray(kuf)
    s2 = model.noise_variance
    Kuu = feats.kuu()
    M = feats.M
    if isinstance(Kuu, IdentityKuu):
        A = np.eye(M) + (K @ K.T) / s2
        cA = linalg.cho_factor(A, lower=True)
        mean = linalg.cho_solve(cA, K @ y) / s2
        if structure == "diag":
            return VariationalDistribution(mean, diag=1.0 / np.diag(A))
        S = linalg.cho_solve(cA, np.eye(M))
        return VariationalDistribution.from_covariance(mean, S)
    # inducing points: S* = Kuu (Kuu + K K^T / noise)^-1 Kuu
    Sigma = Kuu + (K @ K.T) / s2
    cS = linalg.cho_factor(Sigma, lower=True)
    mean = Kuu @ linalg.cho_solve(cS, K @ y) / s2
    S = Kuu @ linalg.cho_solve(cS, Kuu)
    if structure == "diag":
        # best diagonal S has S_mm = 1 / (S*^-1)_mm
        prec = linalg.cho_solve(linalg.cho_factor(S, lower=True), np.eye(M))
        return VariationalDistribution(mean, diag=1.0 / np.diag(prec))
    return VariationalDistribution.from_covariance(mean, S)


def offdiagonal_ratio(S):
    """max |S_mm'| over m != m' divided by min |S_mm|; zero for a 1 x 1 matrix."""
    S = np.asarray(S)
    if S.shape[0] < 2:
        return 0.0
    off = np.abs(S - np.diag(np.diag(S))).max()
    return float(off / np.abs(np.diag(S)).min())


def meanfield_diagonality_profile(features, noise_variance, n_values, seed=0, inputs=None):
    """How far ``N S*`` is from diagonal as the dataset grows.

    ``inputs(N, rng)`` draws training inputs; by default they come from the
    Gaussian density that makes Hermite features eigenfunction features.
    Returns a list of ``(N, offdiag_ratio)`` pairs.
    """
    from .features import equivalent_input_variance  # local to avoid a cycle at import time

    if inputs is None:
        sd = math.sqrt(equivalent_input_variance(features.r, features.kernel.lengthscale))

        def inputs(n, rng):
            return rng.normal(0.0, sd, size=n)

    rows = []
    M = features.M
    for i, N in enumerate(n_values):
        rng = np.random.default_rng([seed, i])
        X = inputs(N, rng)
        K = features.kuf(X)
        A = np.eye(M) + (K @ K.T) / noise_variance
        S = linalg.cho_solve(linalg.cho_factor(A, lower=True), np.eye(M))
        rows.append((int(N), offdiagonal_ratio(N * S)))
    return rows


# ---------------------------------------------------------------------------
# Monte Carlo estimators (TrigVOF and other families without closed forms)
# ---------------------------------------------------------------------------


def _sample_terms(features, sampler):
    w = stratified_draw(sampler.with_interval(*features.support))
    T = w.size
    weight = (2.0 * features.a / T) * (2.0 * math.pi) ** -0.25 * np.sqrt(spectral_density(features.kernel, w))
    Psi = features.psi(w) * features.kuf_sign[:, None]
    return w, weight, Psi


def mc_kuf_pair(features, X, sampler):
    """Two independent Kuf estimates; the bilinear forms built from them are unbiased."""
    return features.kuf_estimate(X, sampler.spawn(0)), features.kuf_estimate(X, sampler.spawn(1))


def mc_qf_marginals(model, X, sampler):
    """Unbiased estimates of mu_n, mu_n^2 and sigma_n^2.

    The feature sums ``sum_m m_m psi_m(w_i)`` and ``Psi^T (S - I) Psi'`` are
    formed once per batch; per-point work touches only the T samples.  Two
    independent sample sets give ``mu1``, ``mu2``; the mean is their average,
    ``mu^2`` is ``mu1 * mu2`` and the variance uses all T^2 cross pairs.
    """
    feats = model.features
    if not isinstance(feats, TrigVOF) and not hasattr(feats, "kuf_estimate"):
        raise TypeError("Monte Carlo marginals need a feature family with kuf_estimate")
    x = np.asarray(X, dtype=float).reshape(-1)
    q = model.q
    w1, c1, P1 = _sample_terms(feats, sampler.spawn(0))
    w2, c2, P2 = _sample_terms(feats, sampler.spawn(1))
    even = feats.parity == 0
    odd = ~even

    def mean_est(w, c, Psi):
        r_even = q.mean[even] @ Psi[even]
        r_odd = q.mean[odd] @ Psi[odd]
        arg = np.outer(x, w)
        return np.cos(arg) @ (c * r_even) + np.sin(arg) @ (c * r_odd)

    mu1 = mean_est(w1, c1, P1)
    mu2 = mean_est(w2, c2, P2)

    W1 = P1 * c1[None, :]
    W2 = P2 * c2[None, :]
    if q.is_diagonal:
        D = np.diag(q.diag - 1.0)
    else:
        D = q.covariance() - np.eye(q.M)
    trig1 = (np.cos(np.outer(w1, x)), np.sin(np.outer(w1, x)))
    trig2 = (np.cos(np.outer(w2, x)), np.sin(np.outer(w2, x)))
    blocks = (even, odd)
    quad = np.zeros(x.size)
    for a in (0, 1):
        for b in (0, 1):
            rows, cols = blocks[a], blocks[b]
            if not rows.any() or not cols.any():
                continue
            if q.is_diagonal:
                if a != b:
                    continue
                G = (W1[rows] * (q.diag[rows] - 1.0)[:, None]).T @ W2[rows]
            else:
                G = W1[rows].T @ D[np.ix_(rows, cols)] @ W2[cols]
            quad += np.einsum("in,ij,jn->n", trig1[a], G, trig2[b], optimize=True)
    var = kernel_diag(model.kernel, x) + quad
    return MarginalMoments(0.5 * (mu1 + mu2), var, "monte-carlo", mean_sq=mu1 * mu2)


def mc_elbo_gaussian(model, X, y, sampler, n_data=None):
    """Unbiased estimate of the Gaussian ELBO from stratified frequency samples."""
    mom = mc_qf_marginals(model, X, sampler)
    y = np.asarray(y, dtype=float).reshape(-1)
    scale = 1.0 if n_data is None else n_data / y.size
    ell = expected_loglik(y, mom.mean, mom.mean_sq, mom.var, model.noise_variance)
    return scale * ell - kl_to_prior(model.q)


def mc_elbo_from_pair(model, y, K1, K2, kdiag, n_data=None):
    """The same estimator as :func:`mc_elbo_gaussian`, written with explicit Kuf estimates."""
    q = model.q
    mu1, mu2 = K1.T @ q.mean, K2.T @ q.mean
    D = q.covariance() - np.eye(q.M)
    var = kdiag + np.einsum("mn,mk,kn->n", K1, D, K2)
    y = np.asarray(y, dtype=float).reshape(-1)
    scale = 1.0 if n_data is None else n_data / y.size
    ell = expected_loglik(y, 0.5 * (mu1 + mu2), mu1 * mu2, var, model.noise_variance)
    return scale * ell - kl_to_prior(q)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def predict(model, X, quad=None):
    """Deterministic predictive moments of the latent function.

    Closed-form families use their exact Kuf; the rest use a fixed
    quadrature rule, which is biased but deterministic.  Variances are
    clipped to ``[0, k(x, x)]`` and the clipped points are flagged.
    """
    feats = model.features
    x = np.asarray(X, dtype=float).reshape(-1)
    if getattr(feats, "has_closed_form", True) and quad is None:
        K = feats.kuf(x)
        provenance = "analytic"
    else:
        K = feature_kuf(feats, x, quad=quad or feats.default_quadrature())
        provenance = "quadrature"
    kdiag = kernel_diag(model.kernel, x)
    mean, var = marginals_from_kuf(K, kdiag, model.q, feats.kuu())
    clipped = np.clip(var, 0.0, kdiag)
    return MarginalMoments(mean, clipped, provenance, clamped=clipped != var)

