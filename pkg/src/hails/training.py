"""Loss assembly and the training loop.

The distributional-consistency loss dispatches per subtree on the frozen
sparsity labels: Gaussian kernel for all-dense subtrees, Poisson kernel for
all-sparse ones, and the moment-matched Gaussian approximation for mixed
subtrees. Refinement parameters update every batch; encoder parameters
update on every K-th batch and run detached in between.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from hails.distributions import (
    ForecastDist,
    gaussian_aggregate,
    gaussian_consistency_loss,
    gaussian_loglik,
    poisson_jsd,
    poisson_loglik,
    poisson_to_gaussian,
)
from hails.forecaster import HailsModel, build_inputs
from hails.hierarchy import Hierarchy
from hails.sparsity import SparsityLabels

SIGMA_FLOOR = 1e-6
LAMBDA_FLOOR = 1e-6


class NumericalError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass
class TrainConfig:
    gamma: float = 0.5
    lr: float = 0.001
    batch_size: int = 32
    max_epochs: int = 200
    pretrain_epochs: int = 50
    K: int = 5
    patience: int = 10
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.lr <= 0 or self.batch_size < 1 or self.K < 1 or self.patience < 1:
            raise ValueError("lr, batch_size, K and patience must be positive")
        if self.max_epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


@dataclass
class LossBreakdown:
    ll: float
    dcrs: float
    total: float
    per_subtree: dict[int, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Scalar (oracle-facing) loss computations on tagged distributions.

def dcrs_subtree(
    parent: ForecastDist, children: list[ForecastDist], phi: list[float]
) -> float:
    """Consistency loss for one subtree, dispatching on the tags."""
    if not children:
        raise ValueError("empty children list")
    child_sparse = [not c.is_gaussian for c in children]
    if not parent.is_gaussian:
        if not all(child_sparse):
            raise ValueError("Poisson parent with Gaussian child is illegal")
        agg = sum(p * c.poisson.lam for p, c in zip(phi, children))
        return poisson_jsd(parent.poisson.lam, agg)
    gchildren = [
        poisson_to_gaussian(c.poisson.lam) if s else c.gaussian
        for c, s in zip(children, child_sparse)
    ]
    return gaussian_consistency_loss(parent.gaussian, gaussian_aggregate(gchildren, phi))


def dcrs_total(dists: dict[int, list[ForecastDist]], h: Hierarchy) -> float:
    """Sum over internal nodes, averaged over horizon steps."""
    if not h.phi:
        raise ValueError("phi weights not filled; call compute_phi first")
    horizon = len(next(iter(dists.values())))
    total = 0.0
    for i in h.internal_nodes:
        phi = [h.phi[(i, j)] for j in h.children[i]]
        for t in range(horizon):
            children = [dists[j][t] for j in h.children[i]]
            total += dcrs_subtree(dists[i][t], children, phi)
    return total / horizon


def dce_metric(dists: dict[int, list[ForecastDist]], h: Hierarchy) -> float:
    """Distributional consistency error: same computation as dcrs_total,
    reported as an evaluation metric."""
    return dcrs_total(dists, h)


def likelihood_loss(
    dists: dict[int, list[ForecastDist]], targets: dict[int, np.ndarray]
) -> float:
    """Negative log-likelihood summed over nodes and horizon steps."""
    total = 0.0
    for node, per_step in dists.items():
        y = np.asarray(targets[node], dtype=float)
        for t, d in enumerate(per_step):
            if d.is_gaussian:
                total -= gaussian_loglik(float(y[t]), d.gaussian)
            else:
                total -= poisson_loglik(float(y[t]), d.poisson.lam)
    return total


# ---------------------------------------------------------------------------
# Differentiable (tensor) loss assembly.

@dataclass
class SubtreeSpec:
    node: int
    parent_pos: int
    child_pos: list[int]
    phi: np.ndarray
    parent_sparse: bool
    child_sparse: np.ndarray
    parent_dense_pos: int | None  # index into the dense-sigma tensor
    child_dense_pos: list[int | None]


def build_subtree_specs(
    h: Hierarchy, nodes: list[int], labels: SparsityLabels
) -> list[SubtreeSpec]:
    pos = {n: k for k, n in enumerate(nodes)}
    dense_pos = {}
    d = 0
    for n in nodes:
        if not labels.is_sparse(n):
            dense_pos[n] = d
            d += 1
    specs = []
    for i in h.internal_nodes:
        children = h.children[i]
        parent_sparse = labels.is_sparse(i)
        child_sparse = np.array([labels.is_sparse(j) for j in children])
        if parent_sparse and not child_sparse.all():
            raise ValueError(f"node {i}: Poisson parent with Gaussian child is illegal")
        specs.append(
            SubtreeSpec(
                node=i,
                parent_pos=pos[i],
                child_pos=[pos[j] for j in children],
                phi=np.array([h.phi[(i, j)] for j in children]),
                parent_sparse=parent_sparse,
                child_sparse=child_sparse,
                parent_dense_pos=None if parent_sparse else dense_pos[i],
                child_dense_pos=[None if s else dense_pos[j] for j, s in zip(children, child_sparse)],
            )
        )
    return specs


def dcrs_loss_tensor(
    mu_hat: torch.Tensor, sigma_hat: torch.Tensor, specs: list[SubtreeSpec]
) -> torch.Tensor:
    """DCRS over a batch: mu_hat (B, N, tau), sigma_hat (B, D, tau).

    Sum over internal nodes, mean over horizon steps and batch.
    """
    total = mu_hat.new_zeros(())
    for s in specs:
        phi = torch.from_numpy(s.phi).to(mu_hat.dtype)
        cmu = mu_hat[:, s.child_pos, :]  # (B, k, tau)
        if s.parent_sparse:
            lam_p = torch.clamp(mu_hat[:, s.parent_pos, :], min=LAMBDA_FLOOR)
            lam_a = torch.clamp((phi[None, :, None] * cmu).sum(dim=1), min=LAMBDA_FLOOR)
            r = torch.log(lam_p / lam_a)
            term = lam_p * r - lam_a * r
        else:
            # Children variances: sigma_hat^2 for dense, lambda for sparse.
            cvars = []
            for k, dpos in enumerate(s.child_dense_pos):
                if dpos is None:
                    cvars.append(torch.clamp(cmu[:, k, :], min=LAMBDA_FLOOR))
                else:
                    cvars.append(torch.clamp(sigma_hat[:, dpos, :], min=SIGMA_FLOOR) ** 2)
            var_a = (phi[None, :, None] ** 2 * torch.stack(cvars, dim=1)).sum(dim=1)
            mu_a = (phi[None, :, None] * cmu).sum(dim=1)
            mu_p = mu_hat[:, s.parent_pos, :]
            var_p = torch.clamp(sigma_hat[:, s.parent_dense_pos, :], min=SIGMA_FLOOR) ** 2
            d2 = (mu_p - mu_a) ** 2
            term = (var_p + d2) / (4.0 * var_a) + (var_a + d2) / (4.0 * var_p) - 0.5
        total = total + term.mean()
    return total


_LOG_2PI = math.log(2.0 * math.pi)


def likelihood_loss_tensor(
    mu_hat: torch.Tensor,
    sigma_hat: torch.Tensor,
    targets: torch.Tensor,
    sparse_mask: torch.Tensor,
    dense_idx: torch.Tensor,
) -> torch.Tensor:
    """Negative log-likelihood, summed over nodes and steps, mean over batch."""
    lam = torch.clamp(mu_hat[:, sparse_mask, :], min=LAMBDA_FLOOR)
    y_s = targets[:, sparse_mask, :]
    ll_sparse = y_s * torch.log(lam) - lam - torch.lgamma(y_s + 1.0)
    sig = torch.clamp(sigma_hat, min=SIGMA_FLOOR)
    y_d = targets[:, dense_idx, :]
    mu_d = mu_hat[:, dense_idx, :]
    ll_dense = -torch.log(sig) - 0.5 * _LOG_2PI - (y_d - mu_d) ** 2 / (2.0 * sig**2)
    total = ll_sparse.sum(dim=(1, 2)) + ll_dense.sum(dim=(1, 2))
    return -total.mean()


# ---------------------------------------------------------------------------
# Adam.

@dataclass
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, torch.Tensor]) -> "AdamState":
        return cls(
            m={k: torch.zeros_like(p) for k, p in params.items()},
            v={k: torch.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Standard Adam update with bias correction, applied in place."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    with torch.no_grad():
        for k, p in params.items():
            g = grads[k]
            state.m[k].mul_(beta1).add_(g, alpha=1.0 - beta1)
            state.v[k].mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            m_hat = state.m[k] / bc1
            v_hat = state.v[k] / bc2
            p.add_(-lr * m_hat / (v_hat.sqrt() + eps))
    return state


# ---------------------------------------------------------------------------
# Window bookkeeping.

@dataclass
class WindowSet:
    inputs: torch.Tensor  # (S, L, N, C)
    targets: torch.Tensor  # (S, N, tau)
    train_idx: np.ndarray
    val_idx: np.ndarray


def make_windows(
    values: np.ndarray,
    covariates: np.ndarray | None,
    window: int,
    horizon: int,
    val_fraction: float,
) -> WindowSet:
    """Sliding windows over the panel; the last val_fraction of start
    offsets (a temporal holdout) form the validation set."""
    T = values.shape[1]
    n_samples = T - window - horizon + 1
    if n_samples < 2:
        raise ValueError(
            f"panel too short: T={T} gives {n_samples} windows for "
            f"window={window}, horizon={horizon}"
        )
    starts = np.arange(n_samples)
    inputs = build_inputs(values, covariates, starts, window)
    targets = np.stack(
        [values[:, s + window : s + window + horizon] for s in starts], axis=0
    )
    n_val = max(1, int(round(val_fraction * n_samples)))
    n_val = min(n_val, n_samples - 1)
    return WindowSet(
        inputs=inputs,
        targets=torch.from_numpy(targets),
        train_idx=starts[: n_samples - n_val],
        val_idx=starts[n_samples - n_val :],
    )


def _batches(idx: np.ndarray, batch_size: int, rng: np.random.Generator | None):
    order = idx.copy()
    if rng is not None:
        rng.shuffle(order)
    for i in range(0, len(order), batch_size):
        yield order[i : i + batch_size]


def _check_finite(loss: torch.Tensor, mu_hat: torch.Tensor, nodes: list[int]):
    if torch.isfinite(loss):
        return
    bad = torch.nonzero(~torch.isfinite(mu_hat).all(dim=2).all(dim=0))
    name = nodes[int(bad[0])] if len(bad) else "<unknown>"
    raise NumericalError(f"non-finite training loss (first offending node: {name})")


# ---------------------------------------------------------------------------
# Pretraining and the main loop.

@dataclass
class TrainResult:
    model: HailsModel
    log: list[dict]
    best_val: float
    best_epoch: int
    base_update_steps: int
    refine_update_steps: int
    epoch_seconds: list[float]
    base_update_seconds: float


def pretrain(
    model: HailsModel,
    values: np.ndarray,
    cfg: TrainConfig,
    covariates: np.ndarray | None = None,
) -> HailsModel:
    """Train each node's encoder+head on squared error of the mean forecast,
    refinement frozen. Deterministic given cfg.seed."""
    if cfg.pretrain_epochs == 0:
        return model
    ws = make_windows(values, covariates, model.cfg.window, model.cfg.horizon, cfg.val_fraction)
    params = model.base_parameter_dict()
    state = AdamState.for_params(params)
    rng = np.random.Generator(np.random.Philox(key=[cfg.seed, 1]))
    for _ in range(cfg.pretrain_epochs):
        for batch in _batches(ws.train_idx, cfg.batch_size, rng):
            mu, _ = model.base_forecasts(ws.inputs[batch])
            loss = ((mu - ws.targets[batch]) ** 2).sum(dim=(1, 2)).mean()
            model.zero_grad()
            loss.backward()
            grads = {k: p.grad for k, p in params.items()}
            adam_step(params, grads, state, cfg.lr)
    model.zero_grad()
    return model


def evaluate_loss(
    model: HailsModel,
    ws: WindowSet,
    idx: np.ndarray,
    specs: list[SubtreeSpec],
    gamma: float,
) -> LossBreakdown:
    with torch.no_grad():
        _, _, mu_hat, sigma_hat = model(ws.inputs[idx])
        ll = likelihood_loss_tensor(
            mu_hat, sigma_hat, ws.targets[idx], model.sparse_mask, model.dense_idx
        )
        dcrs = dcrs_loss_tensor(mu_hat, sigma_hat, specs)
    return LossBreakdown(
        ll=float(ll), dcrs=float(dcrs), total=float(ll + gamma * dcrs)
    )


def train(
    model: HailsModel,
    values: np.ndarray,
    h: Hierarchy,
    cfg: TrainConfig,
    covariates: np.ndarray | None = None,
) -> TrainResult:
    """Main loop: Adam on L = L_LL + gamma * L_DCRS.

    Refinement parameters update every batch; encoder parameters update on
    every cfg.K-th batch. On the other batches the encoder runs detached,
    so no encoder gradients are computed and the backward pass only touches
    the (small) refinement module — that is where the asynchronous schedule
    saves wall-clock time. Early stopping on validation total loss.
    """
    specs = build_subtree_specs(h, model.nodes, model.labels)
    ws = make_windows(values, covariates, model.cfg.window, model.cfg.horizon, cfg.val_fraction)
    base = model.base_parameter_dict()
    refine = model.refine_parameter_dict()
    base_state = AdamState.for_params(base)
    refine_state = AdamState.for_params(refine)
    rng = np.random.Generator(np.random.Philox(key=[cfg.seed, 2]))

    log: list[dict] = []
    best_val = float("inf")
    best_epoch = -1
    best_state = copy.deepcopy(model.state_dict())
    bad_epochs = 0
    base_steps = 0
    refine_steps = 0
    pending = 0
    epoch_seconds: list[float] = []
    base_update_seconds = 0.0

    for epoch in range(cfg.max_epochs):
        tic = time.perf_counter()
        ll_sum = dcrs_sum = 0.0
        n_batches = 0
        for batch in _batches(ws.train_idx, cfg.batch_size, rng):
            pending += 1
            full = pending == cfg.K
            _, _, mu_hat, sigma_hat = model(ws.inputs[batch], detach_base=not full)
            ll = likelihood_loss_tensor(
                mu_hat, sigma_hat, ws.targets[batch], model.sparse_mask, model.dense_idx
            )
            dcrs = dcrs_loss_tensor(mu_hat, sigma_hat, specs)
            loss = ll + cfg.gamma * dcrs
            _check_finite(loss, mu_hat, model.nodes)
            for p in refine.values():
                p.grad = None
            if full:
                for p in base.values():
                    p.grad = None
            loss.backward()

            refine_grads = {
                k: p.grad if p.grad is not None else torch.zeros_like(p)
                for k, p in refine.items()
            }
            adam_step(refine, refine_grads, refine_state, cfg.lr)
            refine_steps += 1

            if full:
                t0 = time.perf_counter()
                base_grads = {
                    k: p.grad if p.grad is not None else torch.zeros_like(p)
                    for k, p in base.items()
                }
                adam_step(base, base_grads, base_state, cfg.lr)
                base_update_seconds += time.perf_counter() - t0
                base_steps += 1
                pending = 0

            ll_sum += float(ll.detach())
            dcrs_sum += float(dcrs.detach())
            n_batches += 1

        val = evaluate_loss(model, ws, ws.val_idx, specs, cfg.gamma)
        with torch.no_grad():
            _, _, vmu, vsig = model(ws.inputs[ws.val_idx])
        dce = float(dcrs_loss_tensor(vmu, vsig, specs))
        epoch_seconds.append(time.perf_counter() - tic)
        row = {
            "epoch": epoch,
            "ll": ll_sum / max(n_batches, 1),
            "dcrs": dcrs_sum / max(n_batches, 1),
            "total": (ll_sum + cfg.gamma * dcrs_sum) / max(n_batches, 1),
            "val_total": val.total,
            "dce": dce,
        }
        log.append(row)

        if val.total < best_val:
            best_val = val.total
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    model.zero_grad()
    model.load_state_dict(best_state)
    return TrainResult(
        model=model,
        log=log,
        best_val=best_val,
        best_epoch=best_epoch,
        base_update_steps=base_steps,
        refine_update_steps=refine_steps,
        epoch_seconds=epoch_seconds,
        base_update_seconds=base_update_seconds,
    )
