"""Sparse variational GP regression with variational orthogonal features.

The functional core lives in :mod:`vof.kernels`, :mod:`vof.numerics`,
:mod:`vof.features`, :mod:`vof.svgp`, :mod:`vof.exact_gp` and
:mod:`vof.training`; :mod:`vof.estimators` wraps it in scikit-learn style
regressors and :mod:`vof.experiments` drives the figure reproductions.
"""

__version__ = "0.1.0"

from .estimators import ExactGPRegressor, VOFRegressor
from .features import EigenfunctionFeatures, HermiteVOF, InducingPoints, TrigVOF
from .kernels import KernelParams
from .svgp import SVGPModel, VariationalDistribution

__all__ = [
    "EigenfunctionFeatures",
    "ExactGPRegressor",
    "HermiteVOF",
    "InducingPoints",
    "KernelParams",
    "SVGPModel",
    "TrigVOF",
    "VOFRegressor",
    "VariationalDistribution",
    "__version__",
]
