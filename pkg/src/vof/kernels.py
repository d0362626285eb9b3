"""Stationary one-dimensional covariance functions and their spectral densities.

Spectral densities follow the symmetric convention

    kappa(tau) = (2 pi)^(-1/2) * integral exp(-i w tau) s(w) dw,

so for the squared exponential ``s(w) = v * l * exp(-l^2 w^2 / 2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .numerics import QuadratureError, QuadratureSpec, fourier_integral, gauss_legendre_nodes

FAMILIES = ("se", "matern12", "matern32", "matern52")
_MATERN_NU = {"matern12": 0.5, "matern32": 1.5, "matern52": 2.5}
_ALIASES = {
    "squared_exponential": "se",
    "squaredexponential": "se",
    "rbf": "se",
    "matern1/2": "matern12",
    "matern3/2": "matern32",
    "matern5/2": "matern52",
}


@dataclass(frozen=True)
class KernelParams:
    family: str = "se"
    variance: float = 1.0
    lengthscale: float = 1.0

    def __post_init__(self):
        family = _ALIASES.get(self.family.lower(), self.family.lower())
        if family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "family", family)
        if not self.variance > 0:
            raise ValueError("kernel variance must be positive")
        if not self.lengthscale > 0:
            raise ValueError("kernel lengthscale must be positive")

    def replace(self, **changes):
        fields = {"family": self.family, "variance": self.variance, "lengthscale": self.lengthscale}
        fields.update(changes)
        return KernelParams(**fields)


def _unit_profile(family, t):
    """kappa(tau) / v as a function of t = |tau| / l."""
    if family == "se":
        return np.exp(-0.5 * t * t)
    if family == "matern12":
        return np.exp(-t)
    if family == "matern32":
        a = math.sqrt(3.0) * t
        return (1.0 + a) * np.exp(-a)
    a = math.sqrt(5.0) * t
    return (1.0 + a + a * a / 3.0) * np.exp(-a)


def _unit_density(family, t):
    """Spectral density of the unit-variance, unit-lengthscale kernel at frequency t."""
    if family == "se":
        return np.exp(-0.5 * t * t)
    nu = _MATERN_NU[family]
    log_c = (
        math.log(2.0 * math.sqrt(math.pi))
        + gammaln(nu + 0.5)
        + nu * math.log(2.0 * nu)
        - gammaln(nu)
        - 0.5 * math.log(2.0 * math.pi)
    )
    return math.exp(log_c) * (2.0 * nu + t * t) ** (-(nu + 0.5))


def kernel_eval(params, x, x2):
    """k(x, x2) = kappa(x - x2); broadcasts over array arguments."""
    tau = np.abs(np.asarray(x, dtype=float) - np.asarray(x2, dtype=float))
    out = params.variance * _unit_profile(params.family, tau / params.lengthscale)
    return out if np.ndim(out) else float(out)


def spectral_density(params, w):
    w = np.asarray(w, dtype=float)
    ell = params.lengthscale
    out = params.variance * ell * _unit_density(params.family, np.abs(w) * ell)
    return out if np.ndim(out) else float(out)


def kernel_matrix(params, X, X2=None, jitter=None):
    """Dense covariance matrix; ``jitter`` (default ``1e-8 v``) is added to the diagonal when X2 is None."""
    X = np.asarray(X, dtype=float).reshape(-1)
    if X2 is not None:
        X2 = np.asarray(X2, dtype=float).reshape(-1)
        return kernel_eval(params, X[:, None], X2[None, :])
    K = kernel_eval(params, X[:, None], X[None, :])
    if jitter is None:
        jitter = 1e-8 * params.variance
    K[np.diag_indices_from(K)] += jitter
    return K


def kernel_diag(params, X):
    return np.full(np.shape(np.asarray(X).reshape(-1)), params.variance)


def bochner_reconstruct(params, tau, quad=None, band=None):
    """Rebuild kappa(tau) from the spectral density by numerical integration.

    With ``band=a`` the frequency integral is restricted to ``[-a, a]``,
    which gives the band-limited kernel whose spectral density is
    ``s * 1[-a, a]``.

    Raises
    ------
    QuadratureError
        If the integral's error estimate exceeds ``quad.tol * v``.
    """
    quad = quad or QuadratureSpec(tol=1e-12)
    ell, v = params.lengthscale, params.variance
    # integrate in t = w * l so the integrand no longer depends on (v, l)
    freq = abs(float(tau)) / ell
    upper = np.inf if band is None else band * ell
    unit = lambda t: _unit_density(params.family, t)  # noqa: E731

    if quad.scheme == "gauss-legendre":
        lo, hi = quad.domain
        lo, hi = lo * ell, hi * ell
        if band is not None:
            lo, hi = max(lo, -upper), min(hi, upper)
        nodes, weights = gauss_legendre_nodes(quad.order, lo, hi)
        value = weights @ (np.cos(nodes * freq) * unit(nodes))
        return float(v * value / math.sqrt(2.0 * math.pi))
    if quad.scheme == "gauss-hermite":
        raise ValueError("Gauss-Hermite rules do not apply to a generic spectral density")

    half, err = fourier_integral(unit, freq, "cos", 0.0, upper, tol=min(quad.tol, 1e-13))
    if err > quad.tol:
        raise QuadratureError(f"Bochner integral error {err:.3g} exceeds {quad.tol:.3g}")
    return float(v * 2.0 * half / math.sqrt(2.0 * math.pi))


def band_limited_kernel(params, tau, a, quad=None):
    """Covariance whose spectral density is ``s(w) 1[|w| <= a]``."""
    tau = np.asarray(tau, dtype=float)
    # the kernel is even, so each distinct |tau| is integrated once
    uniq, inverse = np.unique(np.abs(tau).reshape(-1), return_inverse=True)
    vals = np.array([bochner_reconstruct(params, t, quad, band=a) for t in uniq])
    out = vals[inverse].reshape(tau.shape)
    return out if out.ndim else float(out)
