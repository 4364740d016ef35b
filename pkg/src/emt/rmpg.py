"""Residual multi-view pyramid graph encoder.

Parallel ChebyNet branches of different depth, each with its own learnable
adjacency, plus a linear projection of the raw graph.  The branch outputs
and the base projection are averaged into one token per graph.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F


def effective_adjacency(a_raw: torch.Tensor) -> torch.Tensor:
    """Symmetric, non-negative adjacency from unconstrained logits."""
    return F.relu(0.5 * (a_raw + a_raw.transpose(-1, -2)))


def normalized_laplacian(a_raw: torch.Tensor) -> torch.Tensor:
    """Rescaled Laplacian with lambda_max fixed to 2: ``-D^-1/2 (A + I) D^-1/2``.

    Self-loops keep every degree >= 1, so the result is always defined and
    its spectrum lies in [-1, 0].
    """
    a = effective_adjacency(a_raw)
    a = a + torch.eye(a.shape[-1], dtype=a.dtype, device=a.device)
    d_inv_sqrt = a.sum(-1).rsqrt()
    return -(d_inv_sqrt[..., :, None] * a * d_inv_sqrt[..., None, :])


def chebyshev_terms(x: torch.Tensor, lap: torch.Tensor, k_order: int) -> list[torch.Tensor]:
    """``[T_0(L) x, ..., T_{K-1}(L) x]`` by the three-term recursion."""
    terms = [x]
    if k_order > 1:
        terms.append(lap @ x)
    for _ in range(2, k_order):
        terms.append(2 * (lap @ terms[-1]) - terms[-2])
    return terms


def cheb_conv(x: torch.Tensor, lap: torch.Tensor, theta: torch.Tensor,
              bias: torch.Tensor) -> torch.Tensor:
    """``relu(sum_k T_k(L) x theta_k - b)``.

    x : (..., c, d_in), lap : (c, c), theta : (K, d_in, d_out), bias : (d_out,)
    """
    if x.shape[-1] != theta.shape[1] or theta.shape[2] != bias.shape[0]:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)}, theta {tuple(theta.shape)}, "
                         f"bias {tuple(bias.shape)}")
    if lap.shape[-1] != x.shape[-2]:
        raise ValueError(f"Laplacian {tuple(lap.shape)} does not match {x.shape[-2]} nodes")
    out = sum(t @ theta[k] for k, t in enumerate(chebyshev_terms(x, lap, theta.shape[0])))
    return F.relu(out - bias)


def mean_fusion(views: list[torch.Tensor]) -> torch.Tensor:
    """Element-wise mean of equally shaped views.

    Accumulated as offsets from the first view, so identical views come
    back bit-for-bit (a plain ``sum / n`` rounds for n = 3).
    """
    ref = views[0]
    if len(views) == 1:
        return ref
    return ref + torch.stack([v - ref for v in views[1:]]).sum(0) / len(views)


class ChebLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int, k_order: int):
        super().__init__()
        if k_order < 1:
            raise ValueError("Chebyshev order K must be >= 1")
        self.theta = nn.Parameter(torch.empty(k_order, d_in, d_out))
        self.bias = nn.Parameter(torch.zeros(d_out))
        for k in range(k_order):
            nn.init.xavier_uniform_(self.theta.data[k])

    @property
    def k_order(self) -> int:
        return self.theta.shape[0]

    def forward(self, x, lap):
        return cheb_conv(x, lap, self.theta, self.bias)


class GraphBranch(nn.Module):
    """Stacked Chebyshev layers over one learnable adjacency, flattened and projected."""

    def __init__(self, n_nodes: int, d_in: int, depth: int, k_order: int,
                 hidden: int = 32, d_g: int = 32):
        super().__init__()
        if depth < 1:
            raise ValueError("branch depth must be >= 1")
        self.adj = nn.Parameter(0.01 * torch.randn(n_nodes, n_nodes))
        dims = [d_in] + [hidden] * depth
        self.layers = nn.ModuleList(ChebLayer(a, b, k_order) for a, b in zip(dims, dims[1:]))
        self.proj = nn.Linear(n_nodes * hidden, d_g)
        nn.init.xavier_uniform_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def node_features(self, g: torch.Tensor) -> torch.Tensor:
        """Pre-flatten output, (..., c, hidden)."""
        lap = normalized_laplacian(self.adj)
        for layer in self.layers:
            g = layer(g, lap)
        return g

    def forward(self, g):
        return self.proj(self.node_features(g).flatten(-2))


class RMPG(nn.Module):
    """(..., seq, c, f) temporal graph -> (..., seq, d_g) tokens.

    ``depths=()`` leaves only the linear base projection.
    """

    def __init__(self, n_nodes: int, n_feat: int = 7, d_g: int = 32,
                 depths: tuple[int, ...] = (1, 2), k_order: int = 3, hidden: int = 32):
        super().__init__()
        self.n_nodes, self.n_feat, self.d_g = n_nodes, n_feat, d_g
        self.base = nn.Linear(n_nodes * n_feat, d_g)
        nn.init.xavier_uniform_(self.base.weight)
        nn.init.zeros_(self.base.bias)
        self.branches = nn.ModuleList(
            GraphBranch(n_nodes, n_feat, m, k_order, hidden, d_g) for m in depths
        )

    def views(self, g: torch.Tensor) -> list[torch.Tensor]:
        return [self.base(g.flatten(-2))] + [br(g) for br in self.branches]

    def forward(self, g):
        if g.shape[-2:] != (self.n_nodes, self.n_feat):
            raise ValueError(f"expected graphs of shape (c={self.n_nodes}, f={self.n_feat}), "
                             f"got {tuple(g.shape[-2:])}")
        return mean_fusion(self.views(g))

    def adjacencies(self) -> list[torch.Tensor]:
        return [effective_adjacency(br.adj).detach() for br in self.branches]
