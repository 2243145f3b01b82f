"""Forecast distribution types, likelihoods, divergence kernels and CRPS."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianParams:
    mu: float
    sigma: float

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be positive and finite, got {self.sigma}")
        if not math.isfinite(self.mu):
            raise ValueError(f"mu must be finite, got {self.mu}")


@dataclass(frozen=True)
class PoissonParams:
    lam: float
    scale: float = 1.0  # >1 after denormalization: the count is multiplied by scale

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam > 0):
            raise ValueError(f"lambda must be positive and finite, got {self.lam}")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def mean(self) -> float:
        return self.lam * self.scale

    @property
    def variance(self) -> float:
        return self.lam * self.scale**2


@dataclass(frozen=True)
class ForecastDist:
    """Tagged forecast distribution: Gaussian for dense nodes, Poisson for sparse."""

    kind: str  # "gaussian" | "poisson"
    params: GaussianParams | PoissonParams

    @classmethod
    def gaussian_dist(cls, mu: float, sigma: float) -> "ForecastDist":
        return cls("gaussian", GaussianParams(float(mu), float(sigma)))

    @classmethod
    def poisson_dist(cls, lam: float, scale: float = 1.0) -> "ForecastDist":
        return cls("poisson", PoissonParams(float(lam), float(scale)))

    @property
    def is_gaussian(self) -> bool:
        return self.kind == "gaussian"

    @property
    def gaussian(self) -> GaussianParams:
        assert self.kind == "gaussian"
        return self.params

    @property
    def poisson(self) -> PoissonParams:
        assert self.kind == "poisson"
        return self.params

    @property
    def mean(self) -> float:
        return self.params.mu if self.is_gaussian else self.params.mean

    def as_gaussian(self) -> GaussianParams:
        """Gaussian view: identity for Gaussians, moment-matched for Poissons."""
        if self.is_gaussian:
            return self.params
        p = self.params
        return GaussianParams(p.mean, math.sqrt(p.variance))


def gaussian_aggregate(
    children: list[GaussianParams], phi: list[float]
) -> GaussianParams:
    """Distribution of the phi-weighted sum of independent Gaussian children."""
    if len(children) == 0:
        raise ValueError("empty children list")
    if len(children) != len(phi):
        raise ValueError("children and phi length mismatch")
    mu = sum(p * c.mu for p, c in zip(phi, children))
    var = sum(p * p * c.sigma**2 for p, c in zip(phi, children))
    return GaussianParams(mu, math.sqrt(var))


def gaussian_consistency_loss(parent: GaussianParams, agg: GaussianParams) -> float:
    """Symmetrized closed-form divergence between two Gaussians.

    Zero exactly when the parameters match; the -1/2 constant makes matched
    subtrees incur no loss.
    """
    d2 = (parent.mu - agg.mu) ** 2
    return (
        (parent.sigma**2 + d2) / (4.0 * agg.sigma**2)
        + (agg.sigma**2 + d2) / (4.0 * parent.sigma**2)
        - 0.5
    )


def poisson_jsd(l1: float, l2: float) -> float:
    """Closed-form symmetric divergence between Poisson(l1) and Poisson(l2)."""
    if l1 <= 0 or l2 <= 0:
        raise ValueError("Poisson rates must be positive")
    r = math.log(l1 / l2)
    return l1 * r - l2 * r


def poisson_to_gaussian(lam: float) -> GaussianParams:
    """CLT moment-matching: Poisson(lam) ~ N(lam, sqrt(lam)) for large lam."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    return GaussianParams(lam, math.sqrt(lam))


def gaussian_loglik(y: float, p: GaussianParams) -> float:
    return -math.log(p.sigma * _SQRT_2PI) - (y - p.mu) ** 2 / (2.0 * p.sigma**2)


def poisson_loglik(y: float, lam: float) -> float:
    """Poisson log-density with the log-gamma continuous extension.

    Normalization can produce non-integer targets, so y is any finite
    nonnegative real; at integer y this is the exact log pmf.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    return y * math.log(lam) - lam - math.lgamma(y + 1.0)


def crps_gaussian(y: float, p: GaussianParams) -> float:
    """Closed-form continuous ranked probability score for a Gaussian forecast."""
    z = (y - p.mu) / p.sigma
    cdf = 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))
    pdf = math.exp(-0.5 * z * z) / _SQRT_2PI
    return p.sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / math.sqrt(math.pi))


def forecast_quantile(d: ForecastDist, q: float) -> float:
    """Quantile of a forecast distribution.

    Gaussian: mu + sigma * Phi^{-1}(q). Poisson: smallest integer k with
    CDF(k) >= q, times the distribution's scale.
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must be in (0, 1), got {q}")
    if d.is_gaussian:
        g = d.gaussian
        return g.mu + g.sigma * float(special.ndtri(q))
    p = d.poisson
    return float(stats.poisson.ppf(q, p.lam)) * p.scale
