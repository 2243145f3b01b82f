"""Per-node recurrent encoders with distribution heads and the global
hierarchy-aware refinement layer.

Every node has its own bidirectional GRU and affine head, but the
parameters are stored stacked along a leading node axis so a whole
hierarchy is encoded in one vectorized pass. All modules run in float64
for reproducibility and tight gradient checks.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from hails.distributions import ForecastDist
from hails.sparsity import SparsityLabels

CHECKPOINT_VERSION = 1
LAMBDA_FLOOR = 1e-6


@dataclass
class ModelConfig:
    horizon: int
    window: int = 24
    hidden_size: int = 60
    n_covariates: int = 0
    refine_c: float = 2.0

    def __post_init__(self):
        if self.horizon < 1 or self.window < 1 or self.hidden_size < 1:
            raise ValueError("horizon, window and hidden_size must be >= 1")
        if self.refine_c <= 0:
            raise ValueError("refine_c must be positive")


class MultiNodeGRU(nn.Module):
    """Bidirectional GRU with independent weights per node, stacked on axis 0.

    Gate equations (h is the running state, x the step input):
        z = sigmoid(Wz x + Uz h + bz)
        r = sigmoid(Wr x + Ur h + br)
        n = tanh(Wn x + Un (r * h) + bn)
        h' = (1 - z) * h + z * n
    so zeroed parameters keep the state at the zero fixed point. Weights
    initialize uniform in +-1/sqrt(H).
    """

    def __init__(self, n_nodes: int, in_features: int, hidden_size: int):
        super().__init__()
        self.n_nodes = n_nodes
        self.hidden_size = hidden_size
        bound = 1.0 / math.sqrt(hidden_size)

        def uniform(*shape):
            return nn.Parameter(torch.empty(*shape).uniform_(-bound, bound))

        # Directions: 0 forward, 1 backward.
        self.w_ih = uniform(2, n_nodes, 3 * hidden_size, in_features)
        self.w_hh = uniform(2, n_nodes, 3 * hidden_size, hidden_size)
        self.b = uniform(2, n_nodes, 3 * hidden_size)

    def _run_direction(self, x: torch.Tensor, d: int) -> torch.Tensor:
        """x: (B, L, N, C) in processing order -> final state (B, N, H)."""
        H = self.hidden_size
        x_proj = torch.einsum("blnc,nkc->blnk", x, self.w_ih[d]) + self.b[d]
        u_zr = self.w_hh[d][:, : 2 * H]
        u_n = self.w_hh[d][:, 2 * H :]
        h = x.new_zeros(x.shape[0], self.n_nodes, H)
        for t in range(x.shape[1]):
            gx = x_proj[:, t]
            zr = torch.sigmoid(gx[..., : 2 * H] + torch.einsum("nkh,bnh->bnk", u_zr, h))
            z, r = zr[..., :H], zr[..., H:]
            n = torch.tanh(gx[..., 2 * H :] + torch.einsum("nkh,bnh->bnk", u_n, r * h))
            h = (1.0 - z) * h + z * n
        return h

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, L, N, C) -> (B, N, 2H), final forward state then final
        backward state (backward direction reads the window reversed)."""
        if x.shape[1] < 1:
            raise ValueError("empty input window")
        fwd = self._run_direction(x, 0)
        bwd = self._run_direction(torch.flip(x, dims=[1]), 1)
        return torch.cat([fwd, bwd], dim=-1)


class NodeHeads(nn.Module):
    """Per-node affine maps from the 2H encoding to per-horizon outputs.

    Weights are stacked (N, 2*tau, 2H); dense nodes use all 2*tau outputs
    (mu and pre-sigma per step), sparse nodes only the first tau (pre-lambda).
    """

    def __init__(self, n_nodes: int, hidden_size: int, horizon: int):
        super().__init__()
        bound = 1.0 / math.sqrt(hidden_size)
        self.weight = nn.Parameter(
            torch.empty(n_nodes, 2 * horizon, 2 * hidden_size).uniform_(-bound, bound)
        )
        self.bias = nn.Parameter(torch.empty(n_nodes, 2 * horizon).uniform_(-bound, bound))

    def forward(self, enc: torch.Tensor) -> torch.Tensor:
        """enc: (B, N, 2H) -> (B, N, 2*tau)."""
        return torch.einsum("nkh,bnh->bnk", self.weight, enc) + self.bias


class Refinement(nn.Module):
    """Global refinement of base forecast parameters.

    Means: mu_hat_i = gamma_i * mu_i + (1 - gamma_i) * w_i . mu with
    gamma_i = sigmoid(w_hat_i); Poisson means refined identically and
    clamped to stay positive. Sigmas (dense nodes only):
    sigma_hat_i = c * sigma_i * sigmoid(v1_i . mu + v2_i . sigma + b_i).
    """

    def __init__(self, n_nodes: int, n_dense: int, c: float):
        super().__init__()
        self.n_nodes = n_nodes
        self.n_dense = n_dense
        self.register_buffer("c", torch.tensor(float(c)))
        # Start near the identity regime: gamma ~ 0.88, uniform mixing row.
        self.w_hat = nn.Parameter(torch.full((n_nodes,), 2.0))
        self.W = nn.Parameter(torch.full((n_nodes, n_nodes), 1.0 / n_nodes))
        self.V1 = nn.Parameter(torch.zeros(n_nodes, n_nodes))
        self.V2 = nn.Parameter(torch.zeros(n_nodes, n_dense))
        self.b = nn.Parameter(torch.zeros(n_nodes))

    def refine_means(self, mu: torch.Tensor, sparse_mask: torch.Tensor) -> torch.Tensor:
        """mu: (B, N, tau) base means (lambda for sparse nodes)."""
        gamma = torch.sigmoid(self.w_hat)[None, :, None]
        mix = torch.einsum("ij,bjt->bit", self.W, mu)
        mu_hat = gamma * mu + (1.0 - gamma) * mix
        clamped = torch.clamp(mu_hat, min=LAMBDA_FLOOR)
        return torch.where(sparse_mask[None, :, None], clamped, mu_hat)

    def refine_sigmas(
        self, mu: torch.Tensor, sigma: torch.Tensor, dense_idx: torch.Tensor
    ) -> torch.Tensor:
        """mu: (B, N, tau); sigma: (B, D, tau) for dense nodes, in node order."""
        v1 = self.V1[dense_idx]  # (D, N)
        v2 = self.V2[dense_idx]  # (D, D)
        b = self.b[dense_idx]  # (D,)
        pre = (
            torch.einsum("dj,bjt->bdt", v1, mu)
            + torch.einsum("de,bet->bdt", v2, sigma)
            + b[None, :, None]
        )
        return self.c * sigma * torch.sigmoid(pre)


class HailsModel(nn.Module):
    """The full model: per-node encoders plus the shared refinement layer."""

    def __init__(
        self,
        nodes: list[int],
        labels: SparsityLabels,
        cfg: ModelConfig,
        seed: int | None = None,
    ):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.cfg = cfg
        self.nodes = list(nodes)
        self.labels = labels
        sparse_flags = [labels.is_sparse(n) for n in self.nodes]
        self.register_buffer("sparse_mask", torch.tensor(sparse_flags))
        dense_positions = [k for k, s in enumerate(sparse_flags) if not s]
        self.register_buffer("dense_idx", torch.tensor(dense_positions, dtype=torch.long))
        n = len(self.nodes)
        self.gru = MultiNodeGRU(n, 1 + cfg.n_covariates, cfg.hidden_size)
        self.heads = NodeHeads(n, cfg.hidden_size, cfg.horizon)
        self.refinement = Refinement(n, len(dense_positions), cfg.refine_c)
        self.double()

    @property
    def n_dense(self) -> int:
        return int(self.dense_idx.numel())

    def encode(self, inputs: torch.Tensor) -> torch.Tensor:
        """inputs: (B, L, N, C) -> (B, N, 2H)."""
        return self.gru(inputs)

    def base_forecasts(self, inputs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """inputs: (B, L, N, C) -> mu (B, N, tau), sigma (B, D, tau).

        Sparse nodes store lambda in the mu slot (softplus keeps it positive);
        dense sigmas come from exp so positivity is structural.
        """
        tau = self.cfg.horizon
        out = self.heads(self.encode(inputs))
        raw_mu = out[..., :tau]
        lam = nn.functional.softplus(raw_mu) + LAMBDA_FLOOR
        mu = torch.where(self.sparse_mask[None, :, None], lam, raw_mu)
        sigma = torch.exp(out[:, self.dense_idx, tau:])
        return mu, sigma

    def forward(self, inputs: torch.Tensor, detach_base: bool = False):
        """Base forecasts then refinement; horizon steps refined independently.

        With detach_base=True the encoder runs without building a graph and
        its outputs enter the refinement as constants, so a backward pass
        reaches only the refinement parameters (the asynchronous-update
        schedule uses this on batches where the encoder is frozen).

        Returns (mu, sigma, mu_hat, sigma_hat).
        """
        if detach_base:
            with torch.no_grad():
                mu, sigma = self.base_forecasts(inputs)
        else:
            mu, sigma = self.base_forecasts(inputs)
        mu_hat = self.refinement.refine_means(mu, self.sparse_mask)
        sigma_hat = self.refinement.refine_sigmas(mu, sigma, self.dense_idx)
        return mu, sigma, mu_hat, sigma_hat

    def base_parameter_dict(self) -> dict[str, nn.Parameter]:
        out = {f"gru.{k}": p for k, p in self.gru.named_parameters()}
        out.update({f"heads.{k}": p for k, p in self.heads.named_parameters()})
        return out

    def refine_parameter_dict(self) -> dict[str, nn.Parameter]:
        return {f"refinement.{k}": p for k, p in self.refinement.named_parameters()}


def build_inputs(
    values: np.ndarray, covariates: np.ndarray | None, starts: np.ndarray, window: int
) -> torch.Tensor:
    """Stack input windows: values (N, T) -> (B, L, N, C) for given start offsets."""
    chunks = []
    for s in starts:
        v = values[:, s : s + window].T[:, :, None]  # (L, N, 1)
        if covariates is not None:
            c = np.transpose(covariates[:, s : s + window, :], (1, 0, 2))
            v = np.concatenate([v, c], axis=2)
        chunks.append(v)
    return torch.from_numpy(np.stack(chunks, axis=0))


def forward_all(
    model: HailsModel, values: np.ndarray, covariates: np.ndarray | None = None
) -> dict[int, list[ForecastDist]]:
    """Forecast distributions for every node from the trailing input window.

    ``values`` is the normalized N x T panel matrix in the model's node
    order; the last ``window`` steps feed the encoders.
    """
    L = model.cfg.window
    if values.shape[1] < L:
        raise ValueError(f"need at least {L} time steps, got {values.shape[1]}")
    starts = np.array([values.shape[1] - L])
    inputs = build_inputs(values, covariates, starts, L)
    with torch.no_grad():
        _, _, mu_hat, sigma_hat = model(inputs)
    return dists_from_tensors(model, mu_hat[0].numpy(), sigma_hat[0].numpy())


def dists_from_tensors(
    model: HailsModel, mu_hat: np.ndarray, sigma_hat: np.ndarray
) -> dict[int, list[ForecastDist]]:
    """mu_hat (N, tau), sigma_hat (D, tau) -> tagged per-step distributions."""
    out: dict[int, list[ForecastDist]] = {}
    dense_pos = {int(p): d for d, p in enumerate(model.dense_idx.tolist())}
    for k, node in enumerate(model.nodes):
        if model.labels.is_sparse(node):
            out[node] = [
                ForecastDist.poisson_dist(max(lam, LAMBDA_FLOOR)) for lam in mu_hat[k]
            ]
        else:
            d = dense_pos[k]
            out[node] = [
                ForecastDist.gaussian_dist(mu_hat[k, t], sigma_hat[d, t])
                for t in range(mu_hat.shape[1])
            ]
    return out


# ---------------------------------------------------------------------------
# Checkpoint format: single .npz with parameter tensors plus a JSON header.

def save_checkpoint(
    path, model: HailsModel, edges: list[tuple[int, int]], extra: dict | None = None
):
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "nodes": model.nodes,
        "edges": [list(e) for e in edges],
        "labels": {
            "sparse_set": sorted(model.labels.sparse_set),
            "p_values": {str(k): v for k, v in model.labels.p_values.items()},
            "alpha": model.labels.alpha,
            "all_zero": sorted(model.labels.all_zero),
        },
        "extra": extra or {},
    }
    arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    np.savez(
        path,
        __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        **arrays,
    )


def load_checkpoint(path) -> tuple[HailsModel, list[tuple[int, int]], dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    lab = meta["labels"]
    labels = SparsityLabels(
        sparse_set=set(lab["sparse_set"]),
        p_values={int(k): v for k, v in lab["p_values"].items()},
        alpha=lab["alpha"],
        all_zero=set(lab["all_zero"]),
    )
    cfg = ModelConfig(**meta["config"])
    model = HailsModel(meta["nodes"], labels, cfg)
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    model.load_state_dict(state)
    edges = [tuple(e) for e in meta["edges"]]
    return model, edges, meta["extra"]
