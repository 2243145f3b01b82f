"""Evaluation metrics: RMSSE / WRMSSE, normalized CRPS, per-step RMSE, DCE."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from hails.distributions import ForecastDist, crps_gaussian
from hails.hierarchy import Hierarchy


class DegenerateSeriesError(ValueError):
    """Raised when a metric's scaling denominator is zero."""


def rmsse(train: np.ndarray, truth: np.ndarray, pred: np.ndarray) -> float:
    """Root mean squared scaled error: forecast MSE over the one-step naive
    training MSE. Scale-invariant."""
    train = np.asarray(train, dtype=float)
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if train.size < 2:
        raise ValueError("training series needs at least 2 points")
    if truth.shape != pred.shape:
        raise ValueError("truth and pred shapes differ")
    denom = np.mean(np.diff(train) ** 2)
    if denom <= 0:
        raise DegenerateSeriesError("flat training history: naive error is zero")
    return float(np.sqrt(np.mean((truth - pred) ** 2) / denom))


def wrmsse(rmsse_values: np.ndarray, train_means: np.ndarray) -> float:
    """Training-mean-weighted RMSSE; weights renormalized to sum to 1."""
    r = np.asarray(rmsse_values, dtype=float)
    w = np.asarray(train_means, dtype=float)
    if w.sum() <= 0:
        raise ValueError("all-zero weights")
    w = w / w.sum()
    return float(np.dot(w, r))


def normalized_crps(
    truth: np.ndarray, dists: list[ForecastDist], train_mean: float
) -> float:
    """Mean CRPS over the horizon, divided by the training mean.

    Poisson forecasts are scored through their moment-matched Gaussian,
    mirroring the Gaussian-CDF approximation used for reporting.
    """
    if train_mean <= 0:
        raise ValueError("train mean must be positive")
    vals = [crps_gaussian(float(y), d.as_gaussian()) for y, d in zip(truth, dists)]
    return float(np.mean(vals) / train_mean)


def rmse_per_step(truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Per horizon step: sqrt of the mean squared error over nodes."""
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if truth.shape != pred.shape:
        raise ValueError("truth and pred shapes differ")
    return np.sqrt(np.mean((truth - pred) ** 2, axis=0))


@dataclass
class EvalReport:
    per_node: dict[int, dict]
    per_level: dict[int, dict]
    total: dict
    excluded: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "per_node": {str(k): v for k, v in self.per_node.items()},
            "per_level": {str(k): v for k, v in self.per_level.items()},
            "total": self.total,
            "excluded_degenerate_nodes": self.excluded,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_flat_csv(self, path):
        rows = []
        for level, m in sorted(self.per_level.items()):
            for metric, value in sorted(m.items()):
                if metric == "rmse_per_step":
                    for t, v in enumerate(value):
                        rows.append((f"L{level}", f"rmse_step{t}", v))
                else:
                    rows.append((f"L{level}", metric, value))
        for metric, value in sorted(self.total.items()):
            rows.append(("total", metric, value))
        pd.DataFrame(rows, columns=["level", "metric", "value"]).to_csv(path, index=False)


def build_report(
    h: Hierarchy,
    nodes: list[int],
    train: np.ndarray,
    truth: np.ndarray,
    dists: dict[int, list[ForecastDist]],
    dce: float | None = None,
) -> EvalReport:
    """Full evaluation on raw scale.

    ``train`` is N x n history, ``truth`` N x tau held-out actuals, both in
    the order of ``nodes``. Degenerate series (flat training history or
    zero training mean) are excluded per metric with a warning.
    """
    idx = {n: k for k, n in enumerate(nodes)}
    pred = np.array([[d.mean for d in dists[n]] for n in nodes])

    per_node: dict[int, dict] = {}
    excluded: list[int] = []
    for n in nodes:
        k = idx[n]
        entry: dict = {}
        train_mean = float(train[k].mean())
        try:
            entry["rmsse"] = rmsse(train[k], truth[k], pred[k])
        except DegenerateSeriesError:
            entry["rmsse"] = None
        if train_mean > 0:
            entry["ncrps"] = normalized_crps(truth[k], dists[n], train_mean)
        else:
            entry["ncrps"] = None
        if entry["rmsse"] is None or entry["ncrps"] is None:
            excluded.append(n)
        entry["train_mean"] = train_mean
        entry["rmse_per_step"] = list(np.abs(truth[k] - pred[k]))
        per_node[n] = entry
    if excluded:
        warnings.warn(
            f"{len(excluded)} degenerate node(s) excluded from scaled metrics: {excluded}"
        )

    def _level_metrics(members: list[int]) -> dict:
        ok = [n for n in members if n not in excluded]
        out: dict = {"n_nodes": len(members), "n_excluded": len(members) - len(ok)}
        if ok:
            r = np.array([per_node[n]["rmsse"] for n in ok])
            w = np.array([per_node[n]["train_mean"] for n in ok])
            out["wrmsse"] = wrmsse(r, w) if w.sum() > 0 else None
            out["ncrps"] = float(np.mean([per_node[n]["ncrps"] for n in ok]))
        else:
            out["wrmsse"] = None
            out["ncrps"] = None
        rows = [idx[n] for n in members]
        out["rmse_per_step"] = list(rmse_per_step(truth[rows], pred[rows]))
        return out

    levels = sorted(set(h.levels.values()))
    per_level = {
        lv: _level_metrics([n for n in nodes if h.levels[n] == lv]) for lv in levels
    }
    total = _level_metrics(list(nodes))
    total.pop("rmse_per_step")
    if dce is not None:
        total["dce"] = dce
    return EvalReport(per_node=per_node, per_level=per_level, total=total, excluded=excluded)
