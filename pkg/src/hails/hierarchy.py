"""Tree structure, aggregation weights, normalization and coherence checks."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from hails.distributions import ForecastDist, GaussianParams, PoissonParams

ROOT = 1


class HierarchyError(ValueError):
    """Raised for malformed hierarchy inputs (cycles, multiple roots, ...)."""


@dataclass(frozen=True)
class Hierarchy:
    """Rooted tree over nodes 1..N with per-edge aggregation weights.

    Node ids are positive integers; node 1 is always the root. ``phi`` maps
    each edge (parent, child) to its aggregation weight, so that on coherent
    data y_parent = sum_j phi[parent, j] * y_j.
    """

    node_count: int
    parent: dict[int, int]
    children: dict[int, list[int]]
    levels: dict[int, int]
    leaf_counts: dict[int, int]
    phi: dict[tuple[int, int], float] = field(default_factory=dict)

    @property
    def nodes(self) -> list[int]:
        return sorted(self.levels)

    @property
    def leaves(self) -> list[int]:
        return [i for i in self.nodes if not self.children[i]]

    @property
    def internal_nodes(self) -> list[int]:
        return [i for i in self.nodes if self.children[i]]

    def ancestors(self, node: int) -> list[int]:
        """Path from the node's parent up to the root."""
        out = []
        while node in self.parent:
            node = self.parent[node]
            out.append(node)
        return out

    def phi_row(self, node: int) -> np.ndarray:
        return np.array([self.phi[(node, j)] for j in self.children[node]])


@dataclass
class SeriesPanel:
    """Aligned N x T matrix of series values, indexed by node id order.

    ``values[k]`` is the series for node ``nodes[k]`` where nodes are sorted
    ascending. Covariates, when present, are N x T x F.
    """

    values: np.ndarray
    time_index: list
    nodes: list[int]
    covariates: np.ndarray | None = None
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("panel values must be 2-D (nodes x time)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("panel contains non-finite values")
        if not self.normalized and np.any(self.values < 0):
            raise ValueError("raw panel values must be nonnegative")
        if len(self.time_index) != self.values.shape[1]:
            raise ValueError("time_index length does not match T")
        if len(self.nodes) != self.values.shape[0]:
            raise ValueError("node list length does not match N")

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    def row(self, node: int) -> np.ndarray:
        return self.values[self.nodes.index(node)]


def build_hierarchy(edges: list[tuple[int, int]]) -> Hierarchy:
    """Build and validate a Hierarchy from (parent, child) pairs.

    Children are ordered by ascending node id so iteration order does not
    depend on the order of the edge list.
    """
    if not edges:
        raise HierarchyError("edge list is empty")
    parent: dict[int, int] = {}
    nodes: set[int] = set()
    for p, c in edges:
        p, c = int(p), int(c)
        if p <= 0 or c <= 0:
            raise HierarchyError(f"node ids must be positive, got edge ({p}, {c})")
        if c in parent:
            raise HierarchyError(f"node {c} has more than one parent")
        if c == ROOT:
            raise HierarchyError(f"cycle detected: root node {ROOT} cannot be a child")
        parent[c] = p
        nodes.update((p, c))

    if ROOT not in nodes:
        raise HierarchyError(f"root node {ROOT} missing from edges")

    children: dict[int, list[int]] = {i: [] for i in nodes}
    for c, p in parent.items():
        children[p].append(c)
    for i in children:
        children[i].sort()

    # Walk up from every node; detects cycles and disconnected components.
    levels: dict[int, int] = {}
    for i in nodes:
        path = [i]
        cur = i
        while cur != ROOT:
            if cur not in parent:
                raise HierarchyError(f"node {cur} is disconnected from the root")
            cur = parent[cur]
            if cur in path:
                raise HierarchyError(f"cycle detected through node {cur}")
            path.append(cur)
        levels[i] = len(path)

    leaf_counts: dict[int, int] = {}
    for i in sorted(nodes, key=lambda n: -levels[n]):
        if not children[i]:
            leaf_counts[i] = 1
        else:
            leaf_counts[i] = sum(leaf_counts[j] for j in children[i])

    return Hierarchy(
        node_count=len(nodes),
        parent=parent,
        children=children,
        levels=levels,
        leaf_counts=leaf_counts,
    )


def compute_phi(h: Hierarchy, mode: str = "leaf_proportional") -> Hierarchy:
    """Fill aggregation weights.

    ``paper_uniform``: phi = 1/|C_i| for every child of i.
    ``leaf_proportional``: phi = leaf_counts(child)/leaf_counts(parent); on
    leaf-count-normalized data this preserves additive coherence exactly,
    and the two modes coincide on balanced trees.
    """
    if mode not in ("paper_uniform", "leaf_proportional"):
        raise ValueError(f"unknown phi mode: {mode!r}")
    phi: dict[tuple[int, int], float] = {}
    for i in h.internal_nodes:
        for j in h.children[i]:
            if mode == "paper_uniform":
                phi[(i, j)] = 1.0 / len(h.children[i])
            else:
                phi[(i, j)] = h.leaf_counts[j] / h.leaf_counts[i]
    return replace(h, phi=phi)


def normalize_panel(panel: SeriesPanel, h: Hierarchy) -> SeriesPanel:
    """Divide each node's series by its subtree leaf count.

    Leaves are unchanged (leaf count 1). Raw incoherence is a warning, not
    an error; use aggregate_check for diagnostics.
    """
    if panel.normalized:
        raise ValueError("panel is already normalized")
    _warn_if_incoherent(panel, h)
    scale = np.array([h.leaf_counts[i] for i in panel.nodes], dtype=float)
    out = replace_panel_values(panel, panel.values / scale[:, None])
    out.normalized = True
    return out


def denormalize_panel(panel: SeriesPanel, h: Hierarchy) -> SeriesPanel:
    """Inverse of normalize_panel."""
    if not panel.normalized:
        raise ValueError("panel is not normalized")
    scale = np.array([h.leaf_counts[i] for i in panel.nodes], dtype=float)
    out = replace_panel_values(panel, panel.values * scale[:, None])
    out.normalized = False
    return out


def replace_panel_values(panel: SeriesPanel, values: np.ndarray) -> SeriesPanel:
    return SeriesPanel(
        values=values,
        time_index=list(panel.time_index),
        nodes=list(panel.nodes),
        covariates=panel.covariates,
        normalized=panel.normalized,
    )


def _warn_if_incoherent(panel: SeriesPanel, h: Hierarchy, tol: float = 1e-6):
    idx = {n: k for k, n in enumerate(panel.nodes)}
    for i in h.internal_nodes:
        agg = sum(panel.values[idx[j]] for j in h.children[i])
        resid = np.max(np.abs(panel.values[idx[i]] - agg))
        if resid > tol:
            warnings.warn(
                f"raw panel incoherent at node {i}: max residual {resid:.3g}",
                stacklevel=3,
            )
            return


def aggregate_check(
    panel: SeriesPanel, h: Hierarchy, tol: float = 1e-9
) -> list[tuple[int, int, float]]:
    """Return every (node, t, residual) violating y_i = sum_j phi_ij y_j."""
    if not h.phi:
        raise ValueError("phi weights not filled; call compute_phi first")
    idx = {n: k for k, n in enumerate(panel.nodes)}
    violations = []
    for i in h.internal_nodes:
        agg = np.zeros(panel.n_steps)
        for j in h.children[i]:
            agg += h.phi[(i, j)] * panel.values[idx[j]]
        resid = panel.values[idx[i]] - agg
        for t in np.nonzero(np.abs(resid) > tol)[0]:
            violations.append((i, int(t), float(resid[t])))
    return violations


def denormalize_forecasts(
    dists: dict[int, list[ForecastDist]], h: Hierarchy
) -> dict[int, list[ForecastDist]]:
    """Rescale normalized-scale forecasts back to raw units.

    Gaussians scale linearly. A Poisson mean scaled by L becomes a
    scaled-Poisson with mean lambda*L and variance lambda*L^2; the scale is
    kept on the distribution so quantiles stay exact.
    """
    out: dict[int, list[ForecastDist]] = {}
    for node, per_step in dists.items():
        L = float(h.leaf_counts[node])
        scaled = []
        for d in per_step:
            if d.is_gaussian:
                g = d.gaussian
                scaled.append(ForecastDist.gaussian_dist(g.mu * L, g.sigma * L))
            else:
                scaled.append(ForecastDist.poisson_dist(d.poisson.lam, scale=d.poisson.scale * L))
        out[node] = scaled
    return out


# ---------------------------------------------------------------------------
# File formats: edges CSV (parent,child) and long panel CSV (node,t,value).

def read_edges_csv(path) -> list[tuple[int, int]]:
    df = pd.read_csv(path)
    if list(df.columns) != ["parent", "child"]:
        raise ValueError(f"edges file must have header 'parent,child', got {list(df.columns)}")
    return [(int(p), int(c)) for p, c in zip(df["parent"], df["child"])]


def write_edges_csv(path, edges: list[tuple[int, int]]):
    pd.DataFrame(edges, columns=["parent", "child"]).to_csv(path, index=False)


def read_panel_csv(path) -> SeriesPanel:
    df = pd.read_csv(path)
    expected = ["node", "t", "value"]
    if list(df.columns)[:3] != expected:
        raise ValueError(f"panel file must have header 'node,t,value', got {list(df.columns)}")
    nodes = sorted(df["node"].unique())
    steps = sorted(df["t"].unique())
    if steps != list(range(len(steps))):
        raise ValueError("panel time steps must be contiguous 0-based integers")
    wide = df.pivot(index="node", columns="t", values="value")
    if wide.isna().any().any():
        missing = int(wide.isna().sum().sum())
        raise ValueError(f"panel has {missing} missing (node,t) cells")
    values = wide.loc[nodes].to_numpy(dtype=float)
    return SeriesPanel(values=values, time_index=steps, nodes=[int(n) for n in nodes])


def write_panel_csv(path, panel: SeriesPanel):
    rows = []
    for k, node in enumerate(panel.nodes):
        for t in range(panel.n_steps):
            rows.append((node, t, panel.values[k, t]))
    pd.DataFrame(rows, columns=["node", "t", "value"]).to_csv(path, index=False)
