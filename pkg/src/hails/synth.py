"""Deterministic synthetic hierarchical-demand generator and the 6-Average baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hails.hierarchy import Hierarchy, SeriesPanel, build_hierarchy


@dataclass
class SynthConfig:
    branching: list[int]
    T: int = 120
    base_rate: float = 5.0
    seasonal_amp: float = 0.5
    period: int = 12
    sparsity_scale: float = 0.3
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.branching:
            raise ValueError("branching must be nonempty")
        if self.T < 2 * self.period:
            raise ValueError("T must be at least 2 * period")
        if not 0.0 <= self.seasonal_amp < 1.0:
            raise ValueError("seasonal_amp must be in [0, 1)")


def _branching_edges(branching: list[int]) -> list[tuple[int, int]]:
    edges = []
    frontier = [1]
    next_id = 2
    for width in branching:
        new_frontier = []
        for parent in frontier:
            for _ in range(width):
                edges.append((parent, next_id))
                new_frontier.append(next_id)
                next_id += 1
        frontier = new_frontier
    return edges


def generate(cfg: SynthConfig) -> tuple[Hierarchy, SeriesPanel]:
    """Generate a raw-coherent panel on a uniform branching tree.

    Leaf values are Poisson draws with a seasonal rate; every node uses its
    own counter-based (Philox) stream keyed by (seed, node), so generation
    is reproducible and independent of iteration order. Internal node
    values are exact sums of their children; ``noise`` > 0 additionally
    applies Gaussian observation noise at the dense (internal) levels,
    clipped at zero. With noise the panel is only approximately coherent.
    """
    h = build_hierarchy(_branching_edges(cfg.branching))
    t = np.arange(cfg.T)
    rate = cfg.sparsity_scale * cfg.base_rate * (
        1.0 + cfg.seasonal_amp * np.sin(2.0 * np.pi * t / cfg.period)
    )

    nodes = h.nodes
    idx = {n: k for k, n in enumerate(nodes)}
    values = np.zeros((len(nodes), cfg.T))
    for leaf in h.leaves:
        rng = np.random.Generator(np.random.Philox(key=[cfg.seed, leaf]))
        values[idx[leaf]] = rng.poisson(rate)

    for node in sorted(h.internal_nodes, key=lambda n: -h.levels[n]):
        total = sum(values[idx[j]] for j in h.children[node])
        if cfg.noise > 0:
            rng = np.random.Generator(np.random.Philox(key=[cfg.seed, node]))
            total = np.clip(total + cfg.noise * rng.standard_normal(cfg.T), 0.0, None)
        values[idx[node]] = total

    panel = SeriesPanel(values=values, time_index=list(range(cfg.T)), nodes=nodes)
    return h, panel


def reference_forecast(panel: SeriesPanel, horizon: int = 1, window: int = 6) -> np.ndarray:
    """6-Average baseline: every horizon step forecast as the mean of the
    last ``window`` training values. Returns an N x horizon array."""
    if panel.n_steps < window:
        raise ValueError(f"need at least {window} observations")
    mean = panel.values[:, -window:].mean(axis=1)
    return np.repeat(mean[:, None], horizon, axis=1)
