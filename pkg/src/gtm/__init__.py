"""Graphical transformation models: spline marginals plus triangular decorrelation layers."""

__version__ = "0.1.0"

from .benchmark import GaussianBaseline, SyntheticSpec, auc, fit_gaussian, gen_synthetic, mc_kld, rkld
from .decorrelation import DecorrelationLayer, local_precision, local_pseudo_correlation
from .errors import (
    ConfigError,
    DataError,
    FitError,
    GtmError,
    MetricError,
    ModelFormatError,
    ParameterError,
    SamplingError,
)
from .independence import IndependenceReport, PairMetrics, ci_metrics, graph_extract, summarize_local
from .marginal import MarginalTransform, TransformationLayer
from .model import GtmModel, load, save
from .optim import FitReport
from .splines import KnotGrid, gauss_legendre
from .training import (
    FitConfig,
    ModelConfig,
    PenaltyConfig,
    fit,
    fit_adaptive,
    hyperparameter_search,
)

__all__ = [
    "ConfigError", "DataError", "DecorrelationLayer", "FitConfig", "FitError", "FitReport",
    "GaussianBaseline", "GtmError", "GtmModel", "IndependenceReport", "KnotGrid", "MarginalTransform",
    "MetricError", "ModelConfig", "ModelFormatError", "PairMetrics", "ParameterError", "PenaltyConfig",
    "SamplingError", "SyntheticSpec", "TransformationLayer", "auc", "ci_metrics", "fit", "fit_adaptive",
    "fit_gaussian", "gauss_legendre", "gen_synthetic", "graph_extract", "hyperparameter_search",
    "load", "local_precision", "local_pseudo_correlation", "mc_kld", "rkld", "save", "summarize_local",
]
