"""Datasets, declarative experiment configs and the figure runners.

Configs are YAML files with nested sections (``kernel``, ``features``,
``likelihood``, ``optimizer``, ``sampler``, ``data``, ``sweep``).  Anything
left out falls back to the built-in defaults for the experiment and the
selected profile (``desk`` or ``paper``).  Every runner returns a
:class:`ResultTable`; :func:`save_results` writes it as ``results.csv`` plus
``manifest.json``.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy import optimize

from .exact_gp import exact_lml, exact_posterior_predict, fit_exact, sample_prior
from .features import HermiteVOF, InducingPoints, TrigVOF, hermite_r_for_input_sd, qff
from .kernels import KernelParams, band_limited_kernel, kernel_diag, kernel_matrix
from .numerics import StratifiedSampler
from .svgp import (
    SVGPModel,
    VariationalDistribution,
    elbo_gaussian,
    marginals_from_kuf,
    mc_elbo_gaussian,
    optimal_q_gaussian,
)
from .training import OptimizerConfig, fit

EXPERIMENTS = ("fig1", "fig2", "fig3", "fit", "elbo", "acceptance")
PROFILES = ("desk", "paper")


class ConfigError(ValueError):
    pass


class DataFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float).reshape(-1)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.shape != y.shape:
            raise ValueError(f"X has {X.size} points but y has {y.size}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.X.size


def mixture_means(weights, variances, sd=3.0):
    """Means of a two-component mixture with overall mean 0 and standard deviation ``sd``.

    The component means are placed at ``mu`` and ``-w0 mu / w1``.
    """
    w0, w1 = weights
    within = w0 * variances[0] + w1 * variances[1]
    if not sd * sd > within:
        raise ValueError("component variances already exceed the target variance")
    ratio = -w0 / w1
    mu = math.sqrt((sd * sd - within) / (w0 + w1 * ratio * ratio))
    return (mu, ratio * mu)


def _dist_spec(dist):
    if isinstance(dist, str):
        dist = {"name": dist}
    dist = dict(dist)
    name = dist.pop("name", dist.pop("dist", None))
    if name in ("gaussian", "normal"):
        return "gaussian", {"sd": float(dist.get("sd", 3.0)), "mean": float(dist.get("mean", 0.0))}
    if name == "uniform":
        half = math.sqrt(108.0)
        return "uniform", {"lo": float(dist.get("lo", -half)), "hi": float(dist.get("hi", half))}
    if name == "mixture":
        weights = tuple(float(w) for w in dist.get("weights", (0.7, 0.3)))
        variances = tuple(float(s) ** 2 for s in dist["sds"]) if "sds" in dist else tuple(
            float(v) for v in dist.get("variances", (1.0, 0.5))
        )
        if "means" in dist:
            means = tuple(float(m) for m in dist["means"])
        else:
            means = mixture_means(weights, variances, float(dist.get("sd", 3.0)))
        return "mixture", {"weights": weights, "means": means, "sds": tuple(math.sqrt(v) for v in variances)}
    raise ConfigError(f"unknown input distribution {name!r}")


def input_moments(dist):
    """Population mean and standard deviation of an input distribution."""
    name, p = _dist_spec(dist)
    if name == "gaussian":
        return p["mean"], p["sd"]
    if name == "uniform":
        return 0.5 * (p["lo"] + p["hi"]), (p["hi"] - p["lo"]) / math.sqrt(12.0)
    w, mu, sd = map(np.asarray, (p["weights"], p["means"], p["sds"]))
    mean = float(w @ mu)
    var = float(w @ (sd**2 + mu**2)) - mean**2
    return mean, math.sqrt(var)


def generate_inputs(dist, N, seed):
    """N i.i.d. draws from ``dist`` (a name or a dict with parameters)."""
    name, p = _dist_spec(dist)
    rng = np.random.default_rng(seed)
    if name == "gaussian":
        return rng.normal(p["mean"], p["sd"], size=N)
    if name == "uniform":
        return rng.uniform(p["lo"], p["hi"], size=N)
    comp = rng.choice(len(p["weights"]), size=N, p=np.asarray(p["weights"]) / sum(p["weights"]))
    return np.asarray(p["means"])[comp] + np.asarray(p["sds"])[comp] * rng.standard_normal(N)


def generate_dataset(kernel, noise_variance, dist, N, seed):
    X = generate_inputs(dist, N, [seed, 0])
    y = sample_prior(kernel, X, noise_variance, seed=[seed, 1])
    meta = {"generator": "gp-prior", "dist": dist, "N": int(N), "seed": seed,
            "kernel": kernel_dict(kernel), "noise_variance": noise_variance}
    return Dataset(X, y, meta)


def load_csv(path):
    """Read a two-column ``x,y`` CSV; malformed rows are reported by line number."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such dataset: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x", "y"]:
            raise DataFormatError(f"{path}: line 1: expected header 'x,y', got {header!r}")
        xs, ys = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise DataFormatError(f"{path}: line {line}: expected 2 fields, got {len(row)}")
            try:
                x, y = float(row[0]), float(row[1])
            except ValueError:
                raise DataFormatError(f"{path}: line {line}: non-numeric value in {row!r}") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise DataFormatError(f"{path}: line {line}: non-finite value in {row!r}")
            xs.append(x)
            ys.append(y)
    return Dataset(np.array(xs), np.array(ys), {"source": str(path)})


def save_csv(dataset, path):
    """Write a dataset with full round-trip precision."""
    rows = [("x", "y")] + [(repr(float(a)), repr(float(b))) for a, b in zip(dataset.X, dataset.y)]
    _atomic_write(Path(path), _csv_text(rows))


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

_BASE = {
    "seed": 0,
    "kernel": {"family": "se", "variance": 1.0, "lengthscale": 1.0},
    "features": {"family": "hermite", "M": 20, "scale": None, "trainable": ["scale", "kernel", "noise"],
                 "covariance": "dense"},
    "likelihood": {"noise_variance": 0.01},
    "optimizer": {"method": "lbfgs", "learning_rate": 5e-4, "iterations": 200, "batch_size": None,
                  "gradient": "finite-difference"},
    "sampler": {"T": 50, "seed": 0, "evaluations": 100},
    "data": {"path": None, "dist": {"name": "gaussian", "sd": 3.0}, "N": 200},
    "sweep": {},
}

_EXPERIMENT_DEFAULTS = {
    "fig1": {
        "kernel": {"family": "matern32", "variance": 1.0, "lengthscale": 0.2},
        "sweep": {"x_lo": -3.0, "x_hi": 3.0, "n_grid": 61, "fixed_a": 10.0, "M_values": [9, 33, 129],
                  "fixed_M": 31, "a_values": [1.0, 3.0, 10.0, 30.0], "kuf": "quadrature",
                  "center_halfwidth": 1.0},
    },
    "fig2": {
        "kernel": {"family": "matern52", "variance": 1.0, "lengthscale": 0.2},
        "features": {"family": "trig", "M": 31, "covariance": "diag"},
        "likelihood": {"noise_variance": 0.03**2},
        "optimizer": {"method": "adam", "learning_rate": 5e-4, "iterations": 3000, "gradient": "supplied"},
        "sampler": {"T": 50, "evaluations": 500},
        "data": {"dist": {"name": "uniform", "lo": -3.0, "hi": 3.0}, "N": 80},
        "sweep": {"a_small": 2.0, "a_large": 60.0, "a_init": 10.0, "n_grid": 200,
                  "grid_lo": -3.5, "grid_hi": 3.5},
    },
    "fig3": {
        "kernel": {"family": "se", "variance": 0.5, "lengthscale": 0.5},
        "likelihood": {"noise_variance": 0.01**2},
        "optimizer": {"method": "adam", "learning_rate": 5e-4, "iterations": 0, "gradient": "supplied"},
        "sampler": {"T": 50, "evaluations": 500},
        "data": {"N": 1000},
        "sweep": {"dists": ["gaussian", "uniform", "mixture"], "families": ["hermite", "trig"],
                  "structures": ["dense", "diag"], "M_values": [11, 21, 31, 41, 51, 61, 71],
                  "scale_grid": 25},
    },
}

_PAPER_PROFILE = {
    "fig2": {"optimizer": {"iterations": 30000}, "sampler": {"evaluations": 5000}},
    "fig3": {"optimizer": {"iterations": 30000}, "sampler": {"evaluations": 5000}},
    "fig1": {"sweep": {"n_grid": 121}},
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "dist":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def kernel_dict(kernel):
    return {"family": kernel.family, "variance": kernel.variance, "lengthscale": kernel.lengthscale}


@dataclass
class ExperimentConfig:
    """Fully resolved experiment description; ``source`` keeps the user's text verbatim."""

    experiment: str
    profile: str = "desk"
    settings: dict = field(default_factory=dict)
    output_dir: str = "runs"
    source: str = ""

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        s = self.settings
        k = s["kernel"]
        if not (k["variance"] > 0 and k["lengthscale"] > 0):
            raise ConfigError("kernel variance and lengthscale must be positive")
        if not s["likelihood"]["noise_variance"] > 0:
            raise ConfigError("noise variance must be positive")
        if s["features"]["M"] < 1:
            raise ConfigError("need at least one feature")
        if s["sampler"]["T"] < 1:
            raise ConfigError("sampler T must be >= 1")
        path = s["data"].get("path")
        if path and not Path(path).exists():
            raise ConfigError(f"data file {path} does not exist")

    @classmethod
    def build(cls, experiment, overrides=None, profile="desk", seed=None, output_dir=None, source=""):
        overrides = dict(overrides or {})
        settings = _merge(_BASE, _EXPERIMENT_DEFAULTS.get(experiment, {}))
        if profile == "paper":
            settings = _merge(settings, _PAPER_PROFILE.get(experiment, {}))
        out = overrides.pop("output_dir", None)
        overrides.pop("experiment", None)
        overrides.pop("profile", None)
        settings = _merge(settings, overrides)
        if seed is not None:
            settings["seed"] = int(seed)
        return cls(experiment, profile, settings, output_dir or out or f"runs/{experiment}", source)

    @classmethod
    def from_file(cls, path, experiment=None, profile=None, seed=None, output_dir=None):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        text = path.read_text(encoding="utf-8")
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        experiment = experiment or data.get("experiment")
        if experiment is None:
            raise ConfigError(f"{path}: no experiment given")
        profile = profile or data.get("profile", "desk")
        return cls.build(experiment, data, profile, seed, output_dir, source=text)

    # convenience accessors
    @property
    def seed(self):
        return int(self.settings["seed"])

    @property
    def kernel(self):
        k = self.settings["kernel"]
        return KernelParams(k["family"], float(k["variance"]), float(k["lengthscale"]))

    @property
    def noise_variance(self):
        return float(self.settings["likelihood"]["noise_variance"])

    @property
    def sweep(self):
        return self.settings["sweep"]

    def optimizer_config(self, seed=None):
        o = self.settings["optimizer"]
        return OptimizerConfig(
            method=o["method"],
            learning_rate=float(o["learning_rate"]),
            iterations=int(o["iterations"]),
            batch_size=o.get("batch_size"),
            gradient=o.get("gradient", "finite-difference"),
            seed=self.seed if seed is None else seed,
            n_samples=int(self.settings["sampler"]["T"]),
        )

    def dataset(self):
        d = self.settings["data"]
        if d.get("path"):
            return load_csv(d["path"])
        return generate_dataset(self.kernel, self.noise_variance, d["dist"], int(d["N"]), self.seed)

    def to_dict(self):
        return {"experiment": self.experiment, "profile": self.profile, "output_dir": self.output_dir,
                **copy.deepcopy(self.settings)}


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass
class ResultTable:
    columns: list
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    cells: dict = field(default_factory=dict)  # name -> ResultTable written as extra CSVs

    def add(self, **row):
        missing = set(self.columns) - set(row)
        if missing:
            raise KeyError(f"row lacks columns {sorted(missing)}")
        self.rows.append(row)

    def column(self, name):
        return [r[name] for r in self.rows]

    def where(self, **match):
        return [r for r in self.rows if all(r[k] == v for k, v in match.items())]

    def to_csv(self):
        body = [[_fmt(r[c]) for c in self.columns] for r in self.rows]
        return _csv_text([self.columns] + body)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if v is None else str(v)


def _csv_text(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def _atomic_write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def version_string():
    """``git describe``-style identifier, falling back to the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__

    return __version__


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def save_results(table, out_dir, config=None, wall_clock=None):
    """Write ``results.csv``, one CSV per cell under ``cells/`` and ``manifest.json``."""
    out = Path(out_dir)
    _atomic_write(out / "results.csv", table.to_csv())
    for name, cell in sorted(table.cells.items()):
        _atomic_write(out / "cells" / f"{name}.csv", cell.to_csv())
    manifest = {
        "version": version_string(),
        "metadata": _jsonable(table.metadata),
        "files": ["results.csv"] + [f"cells/{n}.csv" for n in sorted(table.cells)],
        "wall_clock_seconds": wall_clock,
    }
    if config is not None:
        manifest.update(
            experiment=config.experiment,
            profile=config.profile,
            seed=config.seed,
            config=_jsonable(config.to_dict()),
            config_text=config.source,
        )
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def replay_config(manifest_path):
    """Rebuild the :class:`ExperimentConfig` recorded in a manifest."""
    data = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    cfg = dict(data["config"])
    return ExperimentConfig.build(cfg.pop("experiment"), cfg, cfg.pop("profile"),
                                  output_dir=cfg.pop("output_dir"), source=data.get("config_text", ""))


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def make_features(family, M, scale, kernel, X=None):
    if family == "hermite":
        if scale is None:
            sd = float(np.std(X)) if X is not None and len(X) > 1 else 1.0
            scale = hermite_r_for_input_sd(sd, kernel.lengthscale)
        return HermiteVOF(int(M), float(scale), kernel)
    if family == "trig":
        return TrigVOF(int(M), float(scale if scale is not None else 5.0 / kernel.lengthscale), kernel)
    if family == "inducing":
        Z = np.quantile(X, np.linspace(0, 1, int(M)))
        return InducingPoints(tuple(Z), kernel)
    raise ConfigError(f"unknown feature family {family!r}")


def deterministic_kuf(feats, X):
    """Exact Kuf when available, otherwise the feature family's quadrature rule."""
    if isinstance(feats, TrigVOF):
        return feats.kuf_quadrature(X)
    return feats.kuf(X)


def structured_optimum(feats, X, y, noise, structure, kuf=None):
    model = SVGPModel(feats, VariationalDistribution.prior(feats.M, structure), noise)
    K = deterministic_kuf(feats, X) if kuf is None else kuf
    q = optimal_q_gaussian(model, X, y, structure=structure, kuf=K)
    model = model.replace(q=q)
    return model, elbo_gaussian(model, X, y, kuf=K)


def tune_scale(feats, X, y, noise, structure, n_grid=25):
    """Maximise the deterministic structured bound over r (Hermite) or a (Trig).

    A log-spaced grid locates the basin; a bounded scalar search refines it.
    """
    name = "r" if isinstance(feats, HermiteVOF) else "a"
    centre = getattr(feats, name)
    lo = math.log(centre) - math.log(8.0)
    hi = math.log(centre) + math.log(8.0)
    if name == "r":
        lo = max(lo, math.log(feats.kernel.lengthscale / math.sqrt(2.0)) + 1e-3)

    def value(logs):
        try:
            return structured_optimum(feats.replace(**{name: math.exp(logs)}), X, y, noise, structure)[1]
        except (np.linalg.LinAlgError, ValueError):
            return -np.inf

    grid = np.linspace(lo, hi, n_grid)
    vals = np.array([value(g) for g in grid])
    i = int(np.argmax(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    res = optimize.minimize_scalar(lambda s: -value(s), bounds=(a, b), method="bounded",
                                   options={"xatol": 1e-4})
    best = res.x if -res.fun >= vals[i] else grid[i]
    return feats.replace(**{name: math.exp(best)})


def mc_elbo_average(model, X, y, T, n_eval, seed):
    """Mean and standard error of ``n_eval`` independent Monte Carlo ELBO estimates."""
    root = StratifiedSampler.from_seed(T, seed)
    vals = np.array([mc_elbo_gaussian(model, X, y, root.spawn(i)) for i in range(n_eval)])
    se = float(vals.std(ddof=1) / math.sqrt(n_eval)) if n_eval > 1 else float("nan")
    return float(vals.mean()), se


# ---------------------------------------------------------------------------
# Figure 1: TrigVOF approximation of a Matern 3/2 kernel matrix
# ---------------------------------------------------------------------------


def fig1_cell(kernel, a, M, x, kuf="quadrature", seed=0, T=50, center_halfwidth=1.0):
    feats = TrigVOF(int(M), float(a), kernel)
    if kuf == "mc":
        Q = qff(feats, x, sampler=StratifiedSampler.from_seed(T, seed))
    else:
        Q = qff(feats, x, quad=feats.default_quadrature())
    K = kernel_matrix(kernel, x, jitter=0.0)
    B = band_limited_kernel(kernel, x[:, None] - x[None, :], float(a))
    err = Q - K
    inner = np.abs(x) <= center_halfwidth
    centre_mask = inner[:, None] & inner[None, :]
    centre_err = float(np.abs(err[centre_mask]).mean())
    edge_err = float(np.abs(err[~centre_mask]).mean()) if (~centre_mask).any() else float("nan")
    return {"Q": Q, "K": K, "B": B, "err": err, "max_abs_err": float(np.abs(err).max()),
            "max_abs_err_band": float(np.abs(Q - B).max()), "centre_err": centre_err, "edge_err": edge_err}


def run_fig1(config):
    sw = config.sweep
    kernel = config.kernel
    x = np.linspace(float(sw["x_lo"]), float(sw["x_hi"]), int(sw["n_grid"]))
    settings = [("fixed_a", float(sw["fixed_a"]), int(M)) for M in sw["M_values"]]
    settings += [("fixed_M", float(a), int(sw["fixed_M"])) for a in sw["a_values"]]
    table = ResultTable(["row", "a", "M", "max_abs_err", "max_abs_err_band", "centre_mean_err",
                         "edge_mean_err", "edge_to_centre_ratio"],
                        metadata={"kernel": kernel_dict(kernel), "grid": x.tolist(), "kuf": sw["kuf"]})
    for idx, (row, a, M) in enumerate(settings):
        c = fig1_cell(kernel, a, M, x, sw["kuf"], seed=[config.seed, idx], T=config.settings["sampler"]["T"],
                      center_halfwidth=float(sw["center_halfwidth"]))
        table.add(row=row, a=a, M=M, max_abs_err=c["max_abs_err"], max_abs_err_band=c["max_abs_err_band"],
                  centre_mean_err=c["centre_err"], edge_mean_err=c["edge_err"],
                  edge_to_centre_ratio=c["edge_err"] / c["centre_err"])
        cell = ResultTable(["i", "j", "x_i", "x_j", "kff", "qff", "band_limited", "error"])
        n = x.size
        for i in range(n):
            for j in range(n):
                cell.rows.append({"i": i, "j": j, "x_i": x[i], "x_j": x[j], "kff": c["K"][i, j],
                                  "qff": c["Q"][i, j], "band_limited": c["B"][i, j], "error": c["err"][i, j]})
        table.cells[f"{row}_a{a:g}_M{M}"] = cell
    return table


# ---------------------------------------------------------------------------
# Figure 2: TrigVOF regression with mis-set and optimised a
# ---------------------------------------------------------------------------


def fig2_runs(config):
    sw = config.sweep
    return [("a_small", float(sw["a_small"]), ("q",)),
            ("a_large", float(sw["a_large"]), ("q",)),
            ("optimized", float(sw["a_init"]), ("q", "scale"))]


def run_fig2(config):
    data = config.dataset()
    kernel, noise = config.kernel, config.noise_variance
    sw = config.sweep
    M = int(config.settings["features"]["M"])
    structure = config.settings["features"].get("covariance", "diag")
    smp = config.settings["sampler"]
    grid = np.linspace(float(sw["grid_lo"]), float(sw["grid_hi"]), int(sw["n_grid"]))
    table = ResultTable(
        ["run", "a_init", "a_final", "final_elbo", "final_elbo_se", "final_elbo_quadrature", "exact_lml"],
        metadata={"noise_sd": math.sqrt(noise), "noise_variance": noise, "kernel": kernel_dict(kernel),
                  "M": M, "structure": structure, "N": len(data), "data": data.metadata},
    )
    lml = exact_lml(kernel, data.X, data.y, noise)
    post = fit_exact(kernel, data.X, data.y, noise)
    mean, var = exact_posterior_predict(post, grid)
    curves = ResultTable(["x", "mean", "lower", "upper"])
    for xi, mi, vi in zip(grid, mean, var):
        curves.rows.append({"x": xi, "mean": mi, "lower": mi - 2 * math.sqrt(vi), "upper": mi + 2 * math.sqrt(vi)})
    table.cells["exact"] = curves
    table.add(run="exact", a_init=None, a_final=None, final_elbo=lml, final_elbo_se=0.0,
              final_elbo_quadrature=lml, exact_lml=lml)
    for idx, (name, a0, trainable) in enumerate(fig2_runs(config)):
        feats = TrigVOF(M, a0, kernel)
        if "scale" in trainable:
            # locate the basin on the deterministic bound before the stochastic refinement
            feats = tune_scale(feats, data.X, data.y, noise, structure, int(sw.get("scale_grid", 25)))
        template, _ = structured_optimum(feats, data.X, data.y, noise, structure)
        cfg = config.optimizer_config(seed=config.seed * 1000 + idx)
        result = fit(template, data.X, data.y, "mc", cfg, trainable=trainable)
        model = result.model
        elbo, se = mc_elbo_average(model, data.X, data.y, int(smp["T"]), int(smp["evaluations"]),
                                   [config.seed, 99, idx])
        elbo_quad = elbo_gaussian(model, data.X, data.y, kuf=deterministic_kuf(model.features, data.X))
        table.add(run=name, a_init=a0, a_final=model.features.a, final_elbo=elbo, final_elbo_se=se,
                  final_elbo_quadrature=elbo_quad, exact_lml=lml)
        K = deterministic_kuf(model.features, grid)
        m, v = marginals_from_kuf(K, kernel_diag(kernel, grid), model.q)
        v = np.clip(v, 0.0, None)
        cell = ResultTable(["x", "mean", "lower", "upper"])
        for xi, mi, vi in zip(grid, m, v):
            cell.rows.append({"x": xi, "mean": mi, "lower": mi - 2 * math.sqrt(vi), "upper": mi + 2 * math.sqrt(vi)})
        table.cells[name] = cell
        trace = ResultTable(["iteration", "objective"])
        trace.rows = [{"iteration": it, "objective": val} for it, val in result.trace]
        table.cells[f"{name}_trace"] = trace
    return table


# ---------------------------------------------------------------------------
# Figure 3: dense versus diagonal S across input distributions and M
# ---------------------------------------------------------------------------


def fig3_cell(family, structure, M, data, kernel, noise, config, cell_seed):
    sw = config.sweep
    smp = config.settings["sampler"]
    X, y = data.X, data.y
    scale = None if family == "hermite" else 5.0 / kernel.lengthscale
    if family == "trig":
        scale = float(sw.get("trig_a", (M // 2) * math.pi / (1.2 * float(np.max(np.abs(X))))))
    feats = make_features(family, M, scale, kernel, X)
    feats = tune_scale(feats, X, y, noise, structure, int(sw["scale_grid"]))
    model, bound = structured_optimum(feats, X, y, noise, structure)
    row = {"scale": getattr(feats, "r", getattr(feats, "a", None)), "elbo_deterministic": bound}
    if family == "trig":
        cfg = config.optimizer_config(seed=cell_seed)
        if cfg.iterations:
            model = fit(model, X, y, "mc", cfg, trainable=("q",)).model
        elbo, se = mc_elbo_average(model, X, y, int(smp["T"]), int(smp["evaluations"]), [cell_seed, 1])
        row.update(elbo=elbo, elbo_se=se)
    else:
        row.update(elbo=bound, elbo_se=0.0)
    return row


def run_fig3(config):
    sw = config.sweep
    kernel, noise = config.kernel, config.noise_variance
    N = int(config.settings["data"]["N"])
    table = ResultTable(
        ["dist", "family", "structure", "M", "scale", "elbo", "elbo_se", "elbo_deterministic", "exact_lml"],
        metadata={"kernel": kernel_dict(kernel), "noise_variance": noise, "N": N,
                  "warm_start": False, "note": "each M is fitted from a cold start"},
    )
    cell = 0
    for d_idx, dist in enumerate(sw["dists"]):
        data = generate_dataset(kernel, noise, dist, N, [config.seed, d_idx])
        lml = exact_lml(kernel, data.X, data.y, noise)
        for family in sw["families"]:
            for structure in sw["structures"]:
                for M in sw["M_values"]:
                    row = fig3_cell(family, structure, int(M), data, kernel, noise, config,
                                    [config.seed, d_idx, cell])
                    cell += 1
                    table.add(dist=dist if isinstance(dist, str) else json.dumps(dist, sort_keys=True),
                              family=family, structure=structure, M=int(M), exact_lml=lml, **row)
    return table


# ---------------------------------------------------------------------------
# Single fits and ELBO evaluation
# ---------------------------------------------------------------------------


def _feature_template(config, data):
    f = config.settings["features"]
    feats = make_features(f["family"], f["M"], f.get("scale"), config.kernel, data.X)
    structure = f.get("covariance", "dense")
    model, _ = structured_optimum(feats, data.X, data.y, config.noise_variance, structure)
    return model


def run_fit(config):
    data = config.dataset()
    f = config.settings["features"]
    template = _feature_template(config, data)
    objective = "mc" if f["family"] == "trig" else f.get("objective", "collapsed")
    result = fit(template, data.X, data.y, objective, config.optimizer_config(),
                 trainable=tuple(f.get("trainable", ("scale", "kernel", "noise"))))
    model = result.model
    feats = model.features
    table = ResultTable(["parameter", "value"], metadata={"objective": objective, "data": data.metadata})
    params = {"variance": model.kernel.variance, "lengthscale": model.kernel.lengthscale,
              "noise_variance": model.noise_variance}
    if hasattr(feats, "r"):
        params["r"] = feats.r
    if hasattr(feats, "a"):
        params["a"] = feats.a
    params["final_objective"] = result.trace[-1][1] if result.trace else float("nan")
    params["exact_lml"] = exact_lml(model.kernel, data.X, data.y, model.noise_variance)
    for k, v in params.items():
        table.add(parameter=k, value=v)
    trace = ResultTable(["iteration", "objective"])
    trace.rows = [{"iteration": it, "objective": v} for it, v in result.trace]
    table.cells["trace"] = trace
    return table


def run_elbo(config):
    data = config.dataset()
    model = _feature_template(config, data)
    smp = config.settings["sampler"]
    table = ResultTable(["quantity", "value"], metadata={"data": data.metadata})
    table.add(quantity="exact_lml", value=exact_lml(config.kernel, data.X, data.y, config.noise_variance))
    table.add(quantity="elbo_deterministic",
              value=elbo_gaussian(model, data.X, data.y, kuf=deterministic_kuf(model.features, data.X)))
    if isinstance(model.features, TrigVOF):
        mean, se = mc_elbo_average(model, data.X, data.y, int(smp["T"]), int(smp["evaluations"]), config.seed)
        table.add(quantity="elbo_mc_mean", value=mean)
        table.add(quantity="elbo_mc_se", value=se)
    return table


RUNNERS = {"fig1": run_fig1, "fig2": run_fig2, "fig3": run_fig3, "fit": run_fit, "elbo": run_elbo}


def run_experiment(config, write=True):
    start = time.perf_counter()
    table = RUNNERS[config.experiment](config)
    elapsed = time.perf_counter() - start
    if write:
        save_results(table, config.output_dir, config, wall_clock=round(elapsed, 3))
    return table
