"""Sparse/dense classification of nodes via the Poisson dispersion test."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from hails.hierarchy import Hierarchy, SeriesPanel

DEFAULT_ALPHA = 0.1


@dataclass
class SparsityLabels:
    """Frozen classification of every node as sparse (Poisson) or dense (Gaussian)."""

    sparse_set: set[int]
    p_values: dict[int, float]
    alpha: float = DEFAULT_ALPHA
    all_zero: set[int] = field(default_factory=set)

    def is_sparse(self, node: int) -> bool:
        return node in self.sparse_set

    def dense_nodes(self, nodes: list[int]) -> list[int]:
        return [n for n in nodes if n not in self.sparse_set]


def dispersion_statistic(series: np.ndarray) -> tuple[float, int, bool]:
    """Poisson dispersion statistic D = (n-1) * s^2 / mean, with dof = n-1.

    Under a Poisson null (mean equals variance) D is approximately
    chi-square with n-1 degrees of freedom. Returns (D, dof, all_zero);
    an all-zero series has an undefined statistic and is flagged.
    """
    y = np.asarray(series, dtype=float)
    n = y.size
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    if not np.all(np.isfinite(y)) or np.any(y < 0):
        raise ValueError("series values must be finite and nonnegative")
    mean = y.mean()
    if mean == 0.0:
        return 0.0, n - 1, True
    s2 = y.var(ddof=1)
    return float((n - 1) * s2 / mean), n - 1, False


def chi_square_sf(x: float, dof: int) -> float:
    """Survival function P(chi2_dof >= x) via the regularized incomplete gamma."""
    if dof <= 0:
        raise ValueError(f"dof must be a positive integer, got {dof}")
    if x < 0:
        raise ValueError(f"x must be nonnegative, got {x}")
    return float(special.gammaincc(dof / 2.0, x / 2.0))


def dispersion_p_value(series: np.ndarray) -> tuple[float, bool]:
    """Two-sided p-value of the dispersion test; all-zero flag passthrough."""
    d, dof, all_zero = dispersion_statistic(series)
    if all_zero:
        return 0.0, True
    sf = chi_square_sf(d, dof)
    p = 2.0 * min(sf, 1.0 - sf)
    return float(np.clip(p, 0.0, 1.0)), False


def classify_nodes(
    panel: SeriesPanel, h: Hierarchy, alpha: float = DEFAULT_ALPHA
) -> SparsityLabels:
    """Classify every node from its training series.

    A node is sparse when the dispersion test fails to reject the Poisson
    null (p >= alpha), or when its training series is all zeros. Ancestors
    of dense nodes are then forced dense so no dense node ever has a sparse
    ancestor.
    """
    p_values: dict[int, float] = {}
    sparse: set[int] = set()
    all_zero: set[int] = set()
    for k, node in enumerate(panel.nodes):
        p, zero = dispersion_p_value(panel.values[k])
        p_values[node] = p
        if zero:
            all_zero.add(node)
            sparse.add(node)
        elif p >= alpha:
            sparse.add(node)

    for node in panel.nodes:
        if node not in sparse:
            for anc in h.ancestors(node):
                sparse.discard(anc)

    return SparsityLabels(sparse_set=sparse, p_values=p_values, alpha=alpha, all_zero=all_zero)
