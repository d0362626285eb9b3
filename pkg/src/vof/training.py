"""Fitting variational parameters and hyperparameters.

Objectives
----------
``"collapsed"``
    q(u) is replaced by its closed-form optimum (dense or diagonal) at every
    evaluation; only features/kernel/noise parameters are optimised.
``"analytic"``
    Exact-Kuf ELBO with explicit (m, S).
``"mc"``
    Unbiased Monte Carlo ELBO; one sampler sub-stream per step, so every
    evaluation inside a step (including finite differences) sees the same
    frequencies.

Gradients default to central finite differences.  ``gradient="supplied"``
uses closed-form derivatives for the (m, S) block and finite differences
for the rest; ``check_supplied_gradient`` compares the two.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .features import HermiteVOF, InducingPoints, TrigVOF
from .kernels import kernel_diag
from .numerics import StratifiedSampler
from .svgp import (
    SVGPModel,
    VariationalDistribution,
    elbo_gaussian,
    mc_elbo_from_pair,
    mc_kuf_pair,
    optimal_q_gaussian,
)

logger = logging.getLogger(__name__)

OBJECTIVES = ("collapsed", "analytic", "mc")


class TrainingError(FloatingPointError):
    """Objective became non-finite; ``params`` holds the offending values."""

    def __init__(self, message, params):
        super().__init__(f"{message}; parameters: {params}")
        self.params = params


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    y = np.asarray(y, dtype=float)
    return np.where(y > 30.0, y, np.log(np.expm1(np.maximum(y, 1e-300))))


# ---------------------------------------------------------------------------
# Flat parameter vector
# ---------------------------------------------------------------------------

_TRANSFORMS = ("identity", "log", "softplus", "tril")


@dataclass
class ParamVector:
    """Flat unconstrained vector with named, transformed blocks.

    ``blocks`` is a list of ``(name, shape, transform)``; ``"tril"`` blocks
    hold a lower-triangular factor whose diagonal is log-transformed.
    """

    blocks: list = field(default_factory=list)

    def add(self, name, shape, transform="identity"):
        if transform not in _TRANSFORMS:
            raise ValueError(f"unknown transform {transform!r}")
        self.blocks.append((name, tuple(np.atleast_1d(shape).tolist()) if shape != () else (), transform))
        return self

    @staticmethod
    def _length(shape, transform):
        if transform == "tril":
            n = shape[0]
            return n * (n + 1) // 2
        return int(np.prod(shape)) if shape else 1

    @property
    def size(self):
        return sum(self._length(s, t) for _, s, t in self.blocks)

    @property
    def names(self):
        return [b[0] for b in self.blocks]

    def slices(self):
        out, start = {}, 0
        for name, shape, transform in self.blocks:
            n = self._length(shape, transform)
            out[name] = slice(start, start + n)
            start += n
        return out

    def pack(self, values):
        theta = np.empty(self.size)
        sl = self.slices()
        for name, shape, transform in self.blocks:
            val = np.asarray(values[name], dtype=float)
            if transform == "identity":
                flat = val.reshape(-1)
            elif transform == "log":
                flat = np.log(val).reshape(-1)
            elif transform == "softplus":
                flat = inv_softplus(val).reshape(-1)
            else:
                n = shape[0]
                L = val.copy()
                L[np.diag_indices(n)] = np.log(np.diag(L))
                flat = L[np.tril_indices(n)]
            theta[sl[name]] = flat
        return theta

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        sl = self.slices()
        out = {}
        for name, shape, transform in self.blocks:
            flat = theta[sl[name]]
            if transform == "identity":
                val = flat.copy()
            elif transform == "log":
                val = np.exp(flat)
            elif transform == "softplus":
                val = softplus(flat)
            else:
                n = shape[0]
                val = np.zeros((n, n))
                val[np.tril_indices(n)] = flat
                val[np.diag_indices(n)] = np.exp(np.diag(val))
            out[name] = val.reshape(shape) if shape else float(val.reshape(-1)[0])
        return out


# ---------------------------------------------------------------------------
# Optimiser configuration and primitives
# ---------------------------------------------------------------------------


@dataclass
class OptimizerConfig:
    method: str = "adam"  # adam | lbfgs | grid-then-adam
    learning_rate: float = 5e-4
    iterations: int = 3000
    batch_size: int | None = None
    gradient: str = "finite-difference"  # or "supplied"
    seed: int = 0
    n_samples: int = 50
    trace_every: int = 10
    fd_step: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grid: tuple = ()

    def __post_init__(self):
        if self.method not in ("adam", "lbfgs", "grid-then-adam"):
            raise ValueError(f"unknown optimiser {self.method!r}")
        if self.gradient not in ("finite-difference", "supplied"):
            raise ValueError(f"unknown gradient mode {self.gradient!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")


def finite_difference_gradient(objective, theta, h=1e-6, indices=None):
    """Central differences of a scalar objective; ``indices`` restricts the coordinates."""
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    idx = range(theta.size) if indices is None else indices
    for i in idx:
        step = h * max(1.0, abs(theta[i]))
        tp, tm = theta.copy(), theta.copy()
        tp[i] += step
        tm[i] -= step
        fp, fm = objective(tp), objective(tm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise TrainingError(f"non-finite objective in finite difference along {i}", theta.tolist())
        grad[i] = (fp - fm) / (2.0 * step)
    return grad


class Adam:
    """Plain Adam on a minimisation problem."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta, grad):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Model <-> parameter vector
# ---------------------------------------------------------------------------


class ModelParameterization:
    """Maps an SVGP template to a flat vector of its trainable parameters."""

    def __init__(self, template, objective="collapsed", trainable=("q", "scale", "kernel", "noise")):
        if objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        feats = template.features
        if objective == "mc" and not isinstance(feats, TrigVOF):
            raise ValueError("the Monte Carlo objective needs features with kuf_estimate (TrigVOF)")
        if objective != "mc" and isinstance(feats, TrigVOF):
            raise ValueError("TrigVOF has no closed-form Kuf; use objective='mc'")
        self.template = template
        self.objective = objective
        self.trainable = set(trainable)
        if objective == "collapsed":
            self.trainable.discard("q")
        if isinstance(feats, InducingPoints):
            self.trainable.discard("scale")
        self.structure = template.q.structure
        pv = ParamVector()
        M = feats.M
        if "q" in self.trainable:
            pv.add("q_mean", (M,), "identity")
            if self.structure == "diag":
                pv.add("q_diag", (M,), "log")
            else:
                pv.add("q_chol", (M, M), "tril")
        if "scale" in self.trainable:
            pv.add("scale", (), "identity")
        if "kernel" in self.trainable:
            pv.add("variance", (), "log")
            pv.add("lengthscale", (), "log")
        if "noise" in self.trainable:
            pv.add("noise_variance", (), "log")
        self.params = pv

    def initial(self, model=None):
        model = model or self.template
        feats = model.features
        values = {}
        if "q" in self.trainable:
            values["q_mean"] = model.q.mean
            if self.structure == "diag":
                values["q_diag"] = model.q.diag
            else:
                values["q_chol"] = model.q.chol
        theta = np.zeros(self.params.size)
        sl = self.params.slices()
        if values:
            packed = ParamVector([b for b in self.params.blocks if b[0] in values]).pack(values)
            start = 0
            for name in self.params.names:
                if name in values:
                    n = sl[name].stop - sl[name].start
                    theta[sl[name]] = packed[start : start + n]
                    start += n
        if "scale" in self.trainable:
            theta[sl["scale"]] = self._scale_to_raw(feats)
        if "kernel" in self.trainable:
            theta[sl["variance"]] = math.log(feats.kernel.variance)
            theta[sl["lengthscale"]] = math.log(feats.kernel.lengthscale)
        if "noise" in self.trainable:
            theta[sl["noise_variance"]] = math.log(model.noise_variance)
        return theta

    @staticmethod
    def _scale_to_raw(feats):
        if isinstance(feats, HermiteVOF):
            return float(inv_softplus(feats.r**2 - 0.5 * feats.kernel.lengthscale**2))
        return math.log(feats.a)

    def build(self, theta, q=None):
        """Model for ``theta``; ``q`` overrides the variational block."""
        vals = self.params.unpack(theta)
        base = self.template
        feats = base.features
        kernel = feats.kernel
        if "kernel" in self.trainable:
            kernel = kernel.replace(variance=vals["variance"], lengthscale=vals["lengthscale"])
        if isinstance(feats, HermiteVOF):
            r = feats.r
            if "scale" in self.trainable:
                r = math.sqrt(0.5 * kernel.lengthscale**2 + float(softplus(vals["scale"])))
            elif not 2.0 * r * r > kernel.lengthscale**2:
                raise TrainingError("fixed r violates 2 r^2 > l^2 for the current lengthscale", vals)
            feats = feats.replace(r=r, kernel=kernel)
        elif isinstance(feats, TrigVOF):
            a = math.exp(vals["scale"]) if "scale" in self.trainable else feats.a
            feats = feats.replace(a=a, kernel=kernel)
        else:
            feats = InducingPoints(feats.Z, kernel, feats.jitter)
        noise = vals.get("noise_variance", base.noise_variance)
        if q is None:
            if "q" in self.trainable:
                if self.structure == "diag":
                    q = VariationalDistribution(vals["q_mean"], diag=vals["q_diag"])
                else:
                    q = VariationalDistribution(vals["q_mean"], chol=vals["q_chol"])
            else:
                q = base.q
        return SVGPModel(feats, q, noise)


def _q_gradient(model, K1, K2, y, scale):
    """d ELBO / d(m, S) mapped onto the unconstrained (m, log-diag or tril) block."""
    q = model.q
    s2 = model.noise_variance
    mu1, mu2 = K1.T @ q.mean, K2.T @ q.mean
    g_mean = scale * (K1 @ (y - mu2) + K2 @ (y - mu1)) / (2.0 * s2) - q.mean
    cross = K1 @ K2.T
    if q.is_diagonal:
        gS_diag = -scale * np.diag(cross) / (2.0 * s2) - 0.5 + 0.5 / q.diag
        return g_mean, gS_diag * q.diag
    M = q.M
    Sinv = linalg.cho_solve((q.chol, True), np.eye(M))
    GS = -scale * (cross + cross.T) / (4.0 * s2) - 0.5 * np.eye(M) + 0.5 * Sinv
    gL = np.tril(2.0 * GS @ q.chol)
    gL[np.diag_indices(M)] *= np.diag(q.chol)
    return g_mean, gL[np.tril_indices(M)]


class Objective:
    """ELBO (to be maximised) as a function of the flat parameter vector."""

    def __init__(self, param, X, y, config):
        self.param = param
        self.X = np.asarray(X, dtype=float).reshape(-1)
        self.y = np.asarray(y, dtype=float).reshape(-1)
        self.config = config
        self.sampler_root = StratifiedSampler.from_seed(config.n_samples, config.seed)
        self._step = 0
        self._batch = None
        self.set_step(0)

    def set_step(self, step):
        self._step = step
        cfg = self.config
        N = self.X.size
        if cfg.batch_size and cfg.batch_size < N:
            rng = np.random.default_rng([cfg.seed, step, 7])
            self._batch = np.sort(rng.choice(N, size=cfg.batch_size, replace=False))
        else:
            self._batch = None

    def _data(self):
        if self._batch is None:
            return self.X, self.y, None
        return self.X[self._batch], self.y[self._batch], self.X.size

    def _sampler(self):
        return self.sampler_root.spawn(self._step)

    def value(self, theta):
        try:
            return self._value(theta)
        except (ValueError, linalg.LinAlgError, FloatingPointError):
            return -np.inf

    def _value(self, theta):
        X, y, n_data = self._data()
        p = self.param
        if p.objective == "collapsed":
            model = p.build(theta, q=p.template.q)
            K = model.features.kuf(X)
            q = optimal_q_gaussian(model, X, y, structure=p.structure, kuf=K)
            return elbo_gaussian(model.replace(q=q), X, y, kuf=K, n_data=n_data)
        model = p.build(theta)
        if p.objective == "analytic":
            return elbo_gaussian(model, X, y, n_data=n_data)
        K1, K2 = mc_kuf_pair(model.features, X, self._sampler())
        return mc_elbo_from_pair(model, y, K1, K2, kernel_diag(model.kernel, X), n_data=n_data)

    def gradient(self, theta):
        cfg = self.config
        p = self.param
        if cfg.gradient == "finite-difference" or "q" not in p.trainable:
            return finite_difference_gradient(self.value, theta, cfg.fd_step)
        sl = p.params.slices()
        q_names = [n for n in ("q_mean", "q_diag", "q_chol") if n in sl]
        q_idx = set()
        for n in q_names:
            q_idx.update(range(sl[n].start, sl[n].stop))
        rest = [i for i in range(theta.size) if i not in q_idx]
        grad = finite_difference_gradient(self.value, theta, cfg.fd_step, indices=rest)
        X, y, n_data = self._data()
        model = p.build(theta)
        if p.objective == "analytic":
            K1 = K2 = model.features.kuf(X)
        else:
            K1, K2 = mc_kuf_pair(model.features, X, self._sampler())
        scale = 1.0 if n_data is None else n_data / y.size
        g_mean, g_cov = _q_gradient(model, K1, K2, y, scale)
        grad[sl["q_mean"]] = g_mean
        grad[sl[q_names[1]]] = g_cov
        return grad


def check_supplied_gradient(param, X, y, theta, config=None, rtol=1e-4):
    """Relative disagreement between supplied and finite-difference gradients."""
    config = config or OptimizerConfig(gradient="supplied")
    obj = Objective(param, X, y, config)
    supplied = obj.gradient(theta)
    fd = finite_difference_gradient(obj.value, theta, config.fd_step)
    scale = max(np.abs(fd).max(), 1e-12)
    return float(np.abs(supplied - fd).max() / scale)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    model: SVGPModel
    trace: list
    theta: np.ndarray
    objective: str


def _finalize(param, theta, X, y):
    model = param.build(theta, q=param.template.q if param.objective == "collapsed" else None)
    if param.objective == "collapsed":
        model = model.replace(q=optimal_q_gaussian(model, X, y, structure=param.structure))
    return model


def _check_finite(value, param, theta):
    if not np.isfinite(value):
        raise TrainingError("objective became non-finite", param.params.unpack(theta))


def fit(template, X, y, objective="collapsed", config=None, trainable=("q", "scale", "kernel", "noise")):
    """Maximise the chosen ELBO; returns a :class:`FitResult`.

    The trace holds ``(iteration, objective)`` pairs every
    ``config.trace_every`` iterations (and the last one).  Runs are
    deterministic given ``config.seed``.
    """
    config = config or OptimizerConfig()
    param = ModelParameterization(template, objective, trainable)
    X = np.asarray(X, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.size != y.size:
        raise ValueError("X and y differ in length")
    if config.iterations == 0:
        return FitResult(template, [], param.initial(), objective)
    obj = Objective(param, X, y, config)
    theta = param.initial()
    trace = []

    if config.method == "grid-then-adam" and "scale" in param.trainable and config.grid:
        theta = _grid_search(param, obj, theta, config.grid)

    if config.method == "lbfgs":
        if objective == "mc":
            raise ValueError("L-BFGS needs a deterministic objective")
        state = {"it": 0}

        def fun(t):
            v = obj.value(t)
            return 1e300 if not np.isfinite(v) else -v

        def jac(t):
            return -obj.gradient(t)

        def callback(t):
            state["it"] += 1
            if state["it"] % config.trace_every == 0:
                trace.append((state["it"], obj.value(t)))

        trace.append((0, obj.value(theta)))
        _check_finite(trace[0][1], param, theta)
        res = optimize.minimize(
            fun, theta, jac=jac, method="L-BFGS-B", callback=callback,
            options={"maxiter": config.iterations, "maxcor": 10},
        )
        theta = res.x
        final = obj.value(theta)
        _check_finite(final, param, theta)
        if not trace or trace[-1][0] != state["it"]:
            trace.append((state["it"], final))
        return FitResult(_finalize(param, theta, X, y), trace, theta, objective)

    adam = Adam(config.learning_rate, config.beta1, config.beta2, config.epsilon)
    for it in range(config.iterations):
        obj.set_step(it)
        value = obj.value(theta)
        _check_finite(value, param, theta)
        if it % config.trace_every == 0:
            trace.append((it, value))
        grad = obj.gradient(theta)
        if not np.all(np.isfinite(grad)):
            raise TrainingError("non-finite gradient", param.params.unpack(theta))
        theta = adam.step(theta, -grad)
    obj.set_step(config.iterations)
    final = obj.value(theta)
    _check_finite(final, param, theta)
    trace.append((config.iterations, final))
    return FitResult(_finalize(param, theta, X, y), trace, theta, objective)


def _grid_search(param, obj, theta, grid):
    """Pick the feature scale (r or a) from ``grid`` with the best objective."""
    sl = param.params.slices()["scale"]
    feats = param.template.features
    best, best_val = theta, -np.inf
    for value in grid:
        cand = theta.copy()
        cand[sl] = param._scale_to_raw(feats.replace(**{_scale_name(feats): value}))
        v = obj.value(cand)
        if v > best_val:
            best, best_val = cand, v
    return best


def _scale_name(feats):
    return "r" if isinstance(feats, HermiteVOF) else "a"


def collapsed_profile(template, X, y, scales, structure=None):
    """Collapsed ELBO as a function of the feature scale with everything else fixed."""
    out = []
    feats = template.features
    for s in scales:
        f = feats.replace(**{_scale_name(feats): s})
        model = template.replace(features=f)
        q = optimal_q_gaussian(model, X, y, structure=structure or template.q.structure)
        out.append(elbo_gaussian(model.replace(q=q), X, y))
    return np.asarray(out)

