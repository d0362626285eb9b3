"""Interdomain inducing features.

A variational orthogonal feature is ``u_m = int g_m(x) f(x) dx`` with
``g_m = (2 pi)^(-1/4) F^-1[psi_m / sqrt(s)]`` for an orthonormal family
``psi_m`` in frequency space, which makes ``Kuu`` the identity.  Its cross
covariance with the process is

    cov(u_m, f(x)) = (2 pi)^(-1/4) int psi_m(w) sqrt(s(w)) e^{i w x} dw.

Every family here uses basis functions that are even for even ``m`` and odd
for odd ``m``; odd elements carry a factor ``-i`` so the integral above
becomes a real cosine (even) or sine (odd) transform.  A per-feature sign
is a free choice (``u_m -> -u_m`` leaves the variational family unchanged)
and is recorded in ``kuf_sign``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .kernels import KernelParams, kernel_diag, kernel_matrix, spectral_density
from .numerics import (
    QuadratureSpec,
    gauss_hermite_nodes,
    gauss_legendre_nodes,
    hermite_functions,
    stratified_draw,
)

_QUARTER_2PI = (2.0 * math.pi) ** -0.25


class IdentityKuu:
    """Feature covariance that is the identity by construction; nothing is ever factorised."""

    def __init__(self, size):
        self.size = int(size)

    @property
    def shape(self):
        return (self.size, self.size)

    def solve(self, b):
        return np.asarray(b)

    def logdet(self):
        return 0.0

    def to_dense(self):
        return np.eye(self.size)

    def __repr__(self):
        return f"IdentityKuu({self.size})"


def _as_1d(X):
    return np.asarray(X, dtype=float).reshape(-1)


class OrthogonalFeatures:
    """Base class for variational orthogonal feature families.

    Subclasses provide ``psi(w)`` (rows ``m = 0 .. M-1``), the frequency
    ``support`` and optionally a closed-form ``kuf``.  The default ``kuf``
    integrates numerically, which is the route for families without a
    closed form.
    """

    M: int
    kernel: KernelParams

    support: tuple[float, float] = (-np.inf, np.inf)
    has_closed_form = False

    def psi(self, w):
        raise NotImplementedError

    @property
    def parity(self):
        return np.arange(self.M) % 2

    @property
    def kuf_sign(self):
        return np.ones(self.M)

    def kuu(self):
        return IdentityKuu(self.M)

    def kuf(self, X):
        return self.kuf_quadrature(X)

    def default_quadrature(self):
        return QuadratureSpec("gauss-legendre", order=128, domain=self.support)

    def kuf_quadrature(self, X, quad=None):
        """Deterministic Kuf from a fixed quadrature rule over frequency."""
        quad = quad or self.default_quadrature()
        x = _as_1d(X)
        if quad.scheme == "gauss-legendre":
            lo, hi = quad.domain
            # all basis functions have definite parity: integrate over w >= 0 only
            lo = max(lo, 0.0)
            w, wts = gauss_legendre_nodes(quad.order, lo, hi)
            wts = 2.0 * wts
        else:
            raise ValueError(f"{type(self).__name__} does not support {quad.scheme!r} quadrature")
        return self._kuf_from_nodes(x, w, wts)

    def _kuf_from_nodes(self, x, w, wts):
        weighted = self.psi(w) * (np.sqrt(spectral_density(self.kernel, w)) * wts)
        arg = np.outer(w, x)
        out = np.empty((self.M, x.size))
        even = self.parity == 0
        out[even] = weighted[even] @ np.cos(arg)
        out[~even] = weighted[~even] @ np.sin(arg)
        return _QUARTER_2PI * self.kuf_sign[:, None] * out


# ---------------------------------------------------------------------------
# Hermite functions (squared exponential kernel, closed form)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HermiteVOF(OrthogonalFeatures):
    """Hermite-function features for the squared exponential kernel.

    ``psi_m(w) = sqrt(r) h_m(r w)`` with ``h_m`` the orthonormal Hermite
    functions.  Requires ``2 r^2 > l^2`` so that ``g_m`` is integrable.
    """

    M: int
    r: float
    kernel: KernelParams

    has_closed_form = True

    def __post_init__(self):
        if self.kernel.family != "se":
            raise ValueError("Hermite features need the squared exponential kernel")
        if self.M < 0:
            raise ValueError("M must be nonnegative")
        if not 2.0 * self.r**2 > self.kernel.lengthscale**2:
            raise ValueError(
                f"Hermite features need 2 r^2 > l^2 (r={self.r}, l={self.kernel.lengthscale})"
            )

    @property
    def p_minus(self):
        return self.r**2 - 0.5 * self.kernel.lengthscale**2

    @property
    def p_plus(self):
        return self.r**2 + 0.5 * self.kernel.lengthscale**2

    @property
    def kuf_sign(self):
        # closed forms below are (-1)^floor(m/2) times the real cos/sin integral
        m = np.arange(self.M)
        return np.where((m // 2) % 2 == 0, 1.0, -1.0)

    def replace(self, **changes):
        fields = {"M": self.M, "r": self.r, "kernel": self.kernel}
        fields.update(changes)
        return HermiteVOF(**fields)

    def psi(self, w):
        w = np.asarray(w, dtype=float)
        y = self.r * w
        rows = hermite_functions(self.M, y, envelope=np.exp(-0.5 * y * y) * math.pi**-0.25)
        return math.sqrt(self.r) * rows

    def _z(self, x):
        return self.r * x / math.sqrt(self.p_minus * self.p_plus)

    def kuf(self, X):
        """Closed-form cov(u_m, f(x)), shape (M, N)."""
        x = _as_1d(X)
        P, Q = self.p_minus, self.p_plus
        v, ell = self.kernel.variance, self.kernel.lengthscale
        env = np.exp(-x * x / (2.0 * Q))
        rows = hermite_functions(self.M, self._z(x), envelope=env, ratio=math.sqrt(P / Q))
        return 2.0**0.25 * math.sqrt(v * ell * self.r / Q) * rows

    def gm(self, X):
        """Closed-form inducing functions g_m(x), shape (M, N)."""
        x = _as_1d(X)
        P, Q = self.p_minus, self.p_plus
        v, ell = self.kernel.variance, self.kernel.lengthscale
        env = np.exp(-x * x / (2.0 * P))
        # (Q/P)^{m/2} grows, but the envelope wins for the degrees in use
        rows = hermite_functions(self.M, self._z(x), envelope=env, ratio=math.sqrt(Q / P))
        const = _QUARTER_2PI * math.sqrt(self.r / (v * ell * P)) * math.pi**-0.25
        return const * rows

    def default_quadrature(self):
        return QuadratureSpec("gauss-hermite", order=128)

    def kuf_quadrature(self, X, quad=None):
        quad = quad or self.default_quadrature()
        if quad.scheme != "gauss-hermite":
            return super().kuf_quadrature(X, quad)
        x = _as_1d(X)
        # psi_m sqrt(s) carries exp(-(r^2/2 + l^2/4) w^2); absorb it in the weight
        alpha = 0.5 * self.p_plus
        y, wts = gauss_hermite_nodes(quad.order)
        w = y / math.sqrt(alpha)
        v, ell = self.kernel.variance, self.kernel.lengthscale
        poly = hermite_functions(self.M, self.r * w, envelope=math.pi**-0.25)
        weighted = math.sqrt(self.r * v * ell) * poly * (wts / math.sqrt(alpha))
        arg = np.outer(w, x)
        out = np.empty((self.M, x.size))
        even = self.parity == 0
        out[even] = weighted[even] @ np.cos(arg)
        out[~even] = weighted[~even] @ np.sin(arg)
        return _QUARTER_2PI * self.kuf_sign[:, None] * out


# ---------------------------------------------------------------------------
# Trigonometric basis on [-a, a] (any stationary kernel, Monte Carlo)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrigVOF(OrthogonalFeatures):
    """Orthonormal Fourier basis on ``[-a, a]``.

    ``psi_0 = 1/sqrt(2a)``, ``psi_{2j} = cos(j pi w / a)/sqrt(a)`` and
    ``psi_{2j-1} = sin(j pi w / a)/sqrt(a)``, all zero outside ``[-a, a]``.
    """

    M: int
    a: float
    kernel: KernelParams

    def __post_init__(self):
        if self.M < 0:
            raise ValueError("M must be nonnegative")
        if not self.a > 0:
            raise ValueError("a must be positive")

    @property
    def support(self):
        return (-self.a, self.a)

    @property
    def harmonics(self):
        m = np.arange(self.M)
        return (m + 1) // 2

    def replace(self, **changes):
        fields = {"M": self.M, "a": self.a, "kernel": self.kernel}
        fields.update(changes)
        return TrigVOF(**fields)

    def psi(self, w):
        w = np.asarray(w, dtype=float)
        flat = w.reshape(-1)
        j = self.harmonics[:, None]
        arg = math.pi * j * flat[None, :] / self.a
        out = np.where(self.parity[:, None] == 0, np.cos(arg), np.sin(arg)) / math.sqrt(self.a)
        if self.M:
            out[0] = 1.0 / math.sqrt(2.0 * self.a)
        out[:, np.abs(flat) > self.a] = 0.0
        return out.reshape((self.M,) + w.shape)

    def default_quadrature(self):
        order = max(128, 4 * self.M)
        return QuadratureSpec("gauss-legendre", order=order, domain=self.support)

    def kuf_estimate(self, X, sampler):
        """Unbiased Monte Carlo estimate of Kuf from one stratified sample set."""
        x = _as_1d(X)
        w = stratified_draw(sampler.with_interval(-self.a, self.a))
        wts = np.full(w.size, 2.0 * self.a / w.size)
        return self._kuf_from_nodes(x, w, wts)


# ---------------------------------------------------------------------------
# Eigenfunction features of the SE kernel under a Gaussian input density
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EigenfunctionFeatures:
    """Features ``u_m = lambda_m^{-1/2} int phi_m(x) f(x) p(x) dx`` with ``p = N(0, sigma_input^2)``."""

    M: int
    sigma_input: float
    kernel: KernelParams

    def __post_init__(self):
        if self.kernel.family != "se":
            raise ValueError("closed-form eigenfunctions exist only for the SE kernel")
        if not self.sigma_input > 0:
            raise ValueError("sigma_input must be positive")

    @property
    def constants(self):
        a = 1.0 / (4.0 * self.sigma_input**2)
        b = 1.0 / (2.0 * self.kernel.lengthscale**2)
        c = math.sqrt(a * a + 2.0 * a * b)
        A = a + b + c
        return {"a": a, "b": b, "c": c, "A": A, "B": b / A}

    def eigenvalues(self):
        k = self.constants
        return self.kernel.variance * math.sqrt(2.0 * k["a"] / k["A"]) * k["B"] ** np.arange(self.M)

    def phi(self, X):
        """Unnormalised eigenfunctions exp(-(c-a) x^2) H_m(sqrt(2c) x); overflows past m ~ 150."""
        x = _as_1d(X)
        k = self.constants
        rows = hermite_functions(self.M, math.sqrt(2.0 * k["c"]) * x, envelope=np.exp(-(k["c"] - k["a"]) * x * x))
        m = np.arange(self.M)
        scale = np.exp(0.5 * (m * math.log(2.0) + np.array([math.lgamma(i + 1) for i in m])))
        return rows * scale[:, None]

    def phi_norm_sq(self):
        """Squared L2(p) norms 2^m m! sqrt(a / c)."""
        k = self.constants
        m = np.arange(self.M)
        log_fact = np.array([math.lgamma(i + 1) for i in m])
        return np.exp(m * math.log(2.0) + log_fact) * math.sqrt(k["a"] / k["c"])

    def phi_normalized(self, X):
        x = _as_1d(X)
        k = self.constants
        env = np.exp(-(k["c"] - k["a"]) * x * x) * (k["c"] / k["a"]) ** 0.25
        return hermite_functions(self.M, math.sqrt(2.0 * k["c"]) * x, envelope=env)

    def kuu(self):
        return IdentityKuu(self.M)

    def kuf(self, X):
        """cov(u_m, f(x)) = sqrt(lambda_m) * normalised phi_m(x)."""
        x = _as_1d(X)
        k = self.constants
        env = np.exp(-(k["c"] - k["a"]) * x * x) * (k["c"] / k["a"]) ** 0.25
        lead = math.sqrt(self.kernel.variance * math.sqrt(2.0 * k["a"] / k["A"]))
        rows = hermite_functions(self.M, math.sqrt(2.0 * k["c"]) * x, envelope=env, ratio=math.sqrt(k["B"]))
        return lead * rows


# ---------------------------------------------------------------------------
# Inducing points (dense Kuu baseline)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InducingPoints:
    Z: tuple
    kernel: KernelParams
    jitter: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "Z", tuple(float(z) for z in np.asarray(self.Z).reshape(-1)))

    @property
    def M(self):
        return len(self.Z)

    def kuu(self):
        return kernel_matrix(self.kernel, np.asarray(self.Z), jitter=self.jitter)

    def kuf(self, X):
        return kernel_matrix(self.kernel, np.asarray(self.Z), _as_1d(X))


# ---------------------------------------------------------------------------
# Spec-level helpers
# ---------------------------------------------------------------------------


def hermite_kuf(feat, m, x):
    return feat.replace(M=m + 1).kuf(x)[m] if m >= feat.M else feat.kuf(x)[m]


def hermite_gm(feat, m, x):
    return feat.replace(M=m + 1).gm(x)[m] if m >= feat.M else feat.gm(x)[m]


def trig_psi(feat, m, w):
    return feat.replace(M=max(feat.M, m + 1)).psi(w)[m]


def trig_kuf_estimate(feat, X, sampler):
    return feat.kuf_estimate(X, sampler)


def kuu(feat):
    return feat.kuu()


def eigen_phi(feat, m, x):
    return EigenfunctionFeatures(max(feat.M, m + 1), feat.sigma_input, feat.kernel).phi(x)[m]


def eigen_lambda(feat, m):
    return float(EigenfunctionFeatures(max(feat.M, m + 1), feat.sigma_input, feat.kernel).eigenvalues()[m])


def equivalent_input_variance(r, lengthscale):
    """Input-density variance (4 r^4 - l^4) / (4 l^2) whose eigenfunction features match Hermite VOF."""
    if not 2.0 * r * r > lengthscale * lengthscale:
        raise ValueError("need 2 r^2 > l^2")
    return (4.0 * r**4 - lengthscale**4) / (4.0 * lengthscale**2)


def hermite_r_for_input_sd(sigma_input, lengthscale):
    """Inverse of :func:`equivalent_input_variance`."""
    return ((4.0 * lengthscale**2 * sigma_input**2 + lengthscale**4) / 4.0) ** 0.25


def hermite_eigen_equivalence(feat):
    var = equivalent_input_variance(feat.r, feat.kernel.lengthscale)
    return EigenfunctionFeatures(feat.M, math.sqrt(var), feat.kernel)


def feature_kuf(feat, X, sampler=None, quad=None):
    """Kuf by the cheapest faithful route: closed form, Monte Carlo or quadrature."""
    if sampler is not None:
        return feat.kuf_estimate(X, sampler)
    if quad is not None and isinstance(feat, OrthogonalFeatures):
        return feat.kuf_quadrature(X, quad)
    return feat.kuf(X)


def qff(feat, X, sampler=None, quad=None):
    """Nystrom approximation Kfu Kuu^-1 Kuf.

    With a sampler (Monte Carlo features) two independent sample sets are
    used so that every entry is an unbiased estimate.
    """
    x = _as_1d(X)
    if feat.M == 0:
        return np.zeros((x.size, x.size))
    if sampler is not None:
        K1 = feat.kuf_estimate(x, sampler.spawn(0))
        K2 = feat.kuf_estimate(x, sampler.spawn(1))
        return 0.5 * (K1.T @ K2 + K2.T @ K1)
    K = feature_kuf(feat, x, quad=quad)
    Kuu = feat.kuu()
    if isinstance(Kuu, IdentityKuu):
        return K.T @ K
    L = linalg.cholesky(Kuu, lower=True)
    B = linalg.solve_triangular(L, K, lower=True)
    return B.T @ B


def trace_residual(feat, X, **kwargs):
    """tr(Kff - Qff)."""
    x = _as_1d(X)
    return float(kernel_diag(feat.kernel, x).sum() - np.trace(qff(feat, x, **kwargs)))
