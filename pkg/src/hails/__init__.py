"""Hierarchical probabilistic forecasting with sparsity-adaptive coherence regularization."""

__version__ = "0.1.0"

from hails.hierarchy import Hierarchy, SeriesPanel, build_hierarchy, compute_phi
from hails.sparsity import SparsityLabels, classify_nodes
from hails.distributions import ForecastDist, GaussianParams, PoissonParams

__all__ = [
    "Hierarchy",
    "SeriesPanel",
    "build_hierarchy",
    "compute_phi",
    "SparsityLabels",
    "classify_nodes",
    "ForecastDist",
    "GaussianParams",
    "PoissonParams",
]
