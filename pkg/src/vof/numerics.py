"""Shared numerical substrate: Hermite recurrences, quadrature and stratified sampling.

Everything in here is deterministic given its arguments.  The quadrature
routines double as the brute-force oracles the rest of the package is
tested against, so they refuse to report a value whose error estimate
exceeds the requested tolerance.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite import hermgauss
from numpy.polynomial.legendre import leggauss
from scipy import integrate

MAX_HERMITE_DEGREE = 200
MAX_GAUSS_ORDER = 128


class QuadratureError(RuntimeError):
    """Raised when an integral cannot be certified to the requested tolerance."""


@dataclass(frozen=True)
class QuadratureSpec:
    """How to evaluate a one-dimensional integral.

    ``scheme`` is one of ``"gauss-hermite"`` (real line, Gaussian weight
    absorbed by the caller), ``"gauss-legendre"`` (finite ``domain``) or
    ``"adaptive"`` (QUADPACK, finite or infinite ``domain``).  ``domain=None``
    means the whole real line.
    """

    scheme: str = "adaptive"
    order: int = 64
    domain: tuple[float, float] | None = None
    tol: float = 1e-10

    def __post_init__(self):
        if self.scheme not in ("gauss-hermite", "gauss-legendre", "adaptive"):
            raise ValueError(f"unknown quadrature scheme {self.scheme!r}")
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.scheme == "gauss-legendre":
            if self.domain is None or not np.all(np.isfinite(self.domain)):
                raise ValueError("gauss-legendre needs a finite domain")


# ---------------------------------------------------------------------------
# Hermite polynomials
# ---------------------------------------------------------------------------


def hermite_polynomial(m, x):
    """Physicists' Hermite polynomial H_m(x) by three-term recurrence.

    H_0 = 1, H_1 = 2x, H_{k+1} = 2x H_k - 2k H_{k-1}.
    """
    m = int(m)
    if m < 0:
        raise ValueError("degree must be nonnegative")
    if m > MAX_HERMITE_DEGREE:
        raise ValueError(f"degree {m} exceeds {MAX_HERMITE_DEGREE}; use hermite_functions")
    x = np.asarray(x, dtype=float)
    h_prev = np.ones_like(x)
    if m == 0:
        return h_prev if h_prev.ndim else float(h_prev)
    h = 2.0 * x
    for k in range(1, m):
        h_prev, h = h, 2.0 * x * h - 2.0 * k * h_prev
    return h if h.ndim else float(h)


def hermite_functions(n_terms, z, envelope=None, ratio=1.0):
    """Rows ``ratio^m H_m(z) * envelope / sqrt(2^m m!)`` for ``m = 0 .. n_terms-1``.

    The default envelope is ``exp(-z**2 / 2)``.  The normalised recurrence

        q_{m+1} = ratio sqrt(2/(m+1)) z q_m - ratio^2 sqrt(m/(m+1)) q_{m-1}

    never forms H_m or m! on their own, so it stays finite far beyond the
    degree where the raw polynomial overflows.  Folding a geometric factor
    ``ratio < 1`` into the recurrence keeps rows bounded when the caller's
    closed form multiplies the Hermite term by ``ratio^m``.

    Returns
    -------
    ndarray of shape ``(n_terms,) + z.shape``
    """
    z = np.asarray(z, dtype=float)
    if envelope is None:
        envelope = np.exp(-0.5 * z * z)
    envelope = np.broadcast_to(np.asarray(envelope, dtype=float), z.shape)
    out = np.empty((n_terms,) + z.shape)
    if n_terms == 0:
        return out
    out[0] = envelope
    if n_terms > 1:
        out[1] = ratio * math.sqrt(2.0) * z * envelope
    rz = ratio * z
    r2 = ratio * ratio
    for k in range(1, n_terms - 1):
        out[k + 1] = math.sqrt(2.0 / (k + 1)) * rz * out[k] - r2 * math.sqrt(k / (k + 1)) * out[k - 1]
    return out


def hermite_orthogonality_check(m, n, r, quad=None):
    """Numerically evaluate the integral of H_m(rx) H_n(rx) exp(-r^2 x^2) over the real line.

    The exact value is sqrt(pi) 2^n n! / r when m == n and zero otherwise.
    """
    if max(m, n) > 30:
        raise ValueError("orthogonality check limited to degrees <= 30")
    if r <= 0:
        raise ValueError("r must be positive")
    quad = quad or QuadratureSpec()
    if quad.scheme == "gauss-hermite":
        nodes, weights = gauss_hermite_nodes(quad.order)
        return float(weights @ (hermite_polynomial(m, nodes) * hermite_polynomial(n, nodes))) / r

    def integrand(x):
        y = r * x
        return hermite_polynomial(m, y) * hermite_polynomial(n, y) * math.exp(-y * y)

    # the integrand is negligible beyond |rx| = 12 for degrees <= 30
    scale = math.sqrt(math.pi) * 2.0**n * math.factorial(n) / r
    value, _ = adaptive_integrate(
        integrand, (-12.0 / r, 12.0 / r), tol=quad.tol * max(1.0, scale), max_subdivisions=500
    )
    return value


# ---------------------------------------------------------------------------
# Fixed rules
# ---------------------------------------------------------------------------


def gauss_hermite_nodes(order):
    """Nodes and weights integrating p(x) exp(-x^2) exactly for deg p <= 2 order - 1."""
    order = int(order)
    if not 1 <= order <= MAX_GAUSS_ORDER:
        raise ValueError(f"Gauss-Hermite order must lie in [1, {MAX_GAUSS_ORDER}], got {order}")
    return hermgauss(order)


def gauss_legendre_nodes(order, lo, hi):
    """Gauss-Legendre nodes and weights mapped to ``[lo, hi]``."""
    x, w = leggauss(int(order))
    half = 0.5 * (hi - lo)
    return lo + half * (x + 1.0), half * w


# ---------------------------------------------------------------------------
# Adaptive quadrature
# ---------------------------------------------------------------------------


def adaptive_integrate(f, domain, tol=1e-10, rtol=0.0, max_subdivisions=200, points=None):
    """Integrate ``f`` over ``domain`` to absolute tolerance ``tol``.

    ``domain`` may have infinite end points.  Returns ``(value, achieved_tol)``
    where ``achieved_tol`` is QUADPACK's error estimate.

    Raises
    ------
    QuadratureError
        If the error estimate is above ``max(tol, rtol * |value|)``.
    """
    lo, hi = domain
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        value, err = integrate.quad(
            f, lo, hi, epsabs=tol, epsrel=rtol, limit=max_subdivisions, points=points
        )
    if not np.isfinite(value) or err > max(tol, rtol * abs(value)):
        raise QuadratureError(
            f"integral over {domain} reached error {err:.3g}, requested {tol:.3g}"
        )
    return value, err


def fourier_integral(f, freq, kind="cos", lo=0.0, hi=np.inf, tol=1e-13, split=60.0):
    """Integrate ``f(w) * cos(freq w)`` (or ``sin``) over ``[lo, hi]``.

    Oscillatory weights are handled by QUADPACK's QAWO on finite pieces and
    QAWF on the infinite tail.  Splitting at ``split`` keeps the tail series
    extrapolation well conditioned for slowly decaying ``f``.

    Returns ``(value, error_estimate)``.
    """
    if freq == 0.0:
        if kind == "sin":
            return 0.0, 0.0
        return adaptive_integrate(f, (lo, hi), tol=tol, rtol=1e-13, max_subdivisions=1000)
    total, err = 0.0, 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        mid = min(hi, max(lo, split))
        if mid > lo:
            v, e = integrate.quad(f, lo, mid, weight=kind, wvar=freq, epsabs=0.0, epsrel=1e-13, limit=1000)
            total, err = total + v, err + e
        if hi > mid:
            if np.isinf(hi):
                v, e = integrate.quad(f, mid, hi, weight=kind, wvar=freq, epsabs=tol, limlst=200)
            else:
                v, e = integrate.quad(f, mid, hi, weight=kind, wvar=freq, epsabs=0.0, epsrel=1e-13, limit=1000)
            total, err = total + v, err + e
    return total, err


# ---------------------------------------------------------------------------
# Stratified sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StratifiedSampler:
    """Grid-shifted uniform samples on ``[lo, hi]``.

    One offset ``u ~ U[0, 1/T]`` is drawn per set and the T points
    ``(i - 1)/T + u`` are mapped affinely to ``[lo, hi]``.  Each point is
    marginally uniform, so sample means are unbiased.

    ``key`` identifies the random stream; :meth:`spawn` derives independent
    sub-streams so results never depend on evaluation order.
    """

    T: int
    lo: float = 0.0
    hi: float = 1.0
    key: tuple[int, ...] = field(default=(0,))

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not self.hi > self.lo:
            raise ValueError("empty sampling interval")
        object.__setattr__(self, "key", tuple(int(k) for k in self.key))

    @classmethod
    def from_seed(cls, T, seed, lo=0.0, hi=1.0):
        """``seed`` is an integer or a sequence of integers (e.g. ``(seed, cell)``)."""
        key = tuple(int(k) for k in _flatten_seed(seed))
        return cls(T=T, lo=lo, hi=hi, key=key)

    def spawn(self, *ids):
        return StratifiedSampler(self.T, self.lo, self.hi, self.key + tuple(int(i) for i in ids))

    def with_interval(self, lo, hi):
        return StratifiedSampler(self.T, lo, hi, self.key)

    def rng(self):
        return np.random.default_rng(np.random.SeedSequence(list(self.key)))


def _flatten_seed(seed):
    if isinstance(seed, (list, tuple, np.ndarray)):
        for s in seed:
            yield from _flatten_seed(s)
    else:
        yield int(seed)


def stratified_draw(sampler, u=None):
    """Return the T stratified points of ``sampler``.

    ``u`` forces the offset (it must lie in ``[0, 1/T]``); by default it is
    drawn from the sampler's own stream.
    """
    T = sampler.T
    if u is None:
        u = sampler.rng().uniform(0.0, 1.0 / T)
    elif not 0.0 <= u <= 1.0 / T:
        raise ValueError("forced offset must lie in [0, 1/T]")
    unit = np.arange(T) / T + u
    return sampler.lo + (sampler.hi - sampler.lo) * unit
