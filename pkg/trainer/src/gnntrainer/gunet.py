"""Graph U-Net policy and value networks.

Encoder-decoder over graphs: each encoder level scores nodes with a learned
projection, keeps the top fraction (gating their features), and convolves;
each decoder level scatters features back to the pre-pooling node set, adds
the skip connection, and convolves again. A dropout layer sits between the
U-Net output and the MLP head. Everything runs in float64: the nets are
tiny and the gradient checks want headroom.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .graphs import FEATURE_DIM, WireGraph, normalized_adjacency


@dataclass(frozen=True)
class PolicyNetConfig:
    depth: int = 3
    hidden: int = 64
    dropout: float = 0.5
    pool_ratio: float = 0.5
    in_dim: int = FEATURE_DIM

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not 0.0 < self.pool_ratio <= 1.0:
            raise ValueError("pool_ratio must be in (0, 1]")


# Full-width preset (hidden 1000); the desk default is 64.
PAPER_PRESET = PolicyNetConfig(depth=3, hidden=1000, dropout=0.5, pool_ratio=0.5)


class GCNLayer(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim, dtype=torch.float64)

    def forward(self, a_norm: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return a_norm @ self.linear(x)


class GraphPool(nn.Module):
    """Top-k node selection by a learned scoring projection (gPool)."""

    def __init__(self, dim: int, ratio: float):
        super().__init__()
        self.ratio = ratio
        self.proj = nn.Linear(dim, 1, bias=False, dtype=torch.float64)

    def forward(self, adj: torch.Tensor, x: torch.Tensor):
        n = x.shape[0]
        k = max(1, math.ceil(self.ratio * n))
        scores = (self.proj(x).squeeze(-1)) / self.proj.weight.norm().clamp(min=1e-12)
        _, idx = torch.topk(scores, k)
        idx, _ = torch.sort(idx)
        gated = x[idx] * torch.tanh(scores[idx]).unsqueeze(-1)
        # Connectivity augmentation: pooled nodes stay linked through
        # removed one-hop neighbors.
        adj2 = adj + adj @ adj
        pooled_adj = (adj2[idx][:, idx] > 0).to(x.dtype)
        pooled_adj.fill_diagonal_(0.0)
        return pooled_adj, gated, idx


class GraphUnpool(nn.Module):
    def forward(self, x: torch.Tensor, idx: torch.Tensor, n: int) -> torch.Tensor:
        full = torch.zeros((n, x.shape[1]), dtype=x.dtype)
        full[idx] = x
        return full


class GraphUNet(nn.Module):
    """Per-node embeddings via GCN encoder/decoder with pooling skips."""

    def __init__(self, config: PolicyNetConfig):
        super().__init__()
        self.config = config
        self.embed = GCNLayer(config.in_dim, config.hidden)
        self.down = nn.ModuleList(
            GCNLayer(config.hidden, config.hidden) for _ in range(config.depth)
        )
        self.pools = nn.ModuleList(
            GraphPool(config.hidden, config.pool_ratio) for _ in range(config.depth)
        )
        self.up = nn.ModuleList(
            GCNLayer(config.hidden, config.hidden) for _ in range(config.depth)
        )
        self.unpool = GraphUnpool()

    def forward(self, adj: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.embed(normalized_adjacency(adj), x))
        skips = []
        for pool, gcn in zip(self.pools, self.down):
            skips.append((h, adj))
            adj, h, idx = pool(adj, h)
            skips[-1] = (*skips[-1], idx)
            h = torch.relu(gcn(normalized_adjacency(adj), h))
        for gcn, (skip_h, skip_adj, idx) in zip(self.up, reversed(list(skips))):
            h = self.unpool(h, idx, skip_h.shape[0]) + skip_h
            h = torch.relu(gcn(normalized_adjacency(skip_adj), h))
        return h


class PolicyNet(nn.Module):
    """g-U-Net with a per-node MLP head; masked softmax over action nodes."""

    def __init__(self, config: PolicyNetConfig):
        super().__init__()
        self.unet = GraphUNet(config)
        self.dropout = nn.Dropout(config.dropout)
        self.head = nn.Sequential(
            nn.Linear(config.hidden, config.hidden, dtype=torch.float64),
            nn.ReLU(),
            nn.Linear(config.hidden, 1, dtype=torch.float64),
        )

    def logits(self, adj: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        h = self.unet(adj, x)
        return self.head(self.dropout(h)).squeeze(-1)

    def action_distribution(
        self, adj: torch.Tensor, x: torch.Tensor, mask: torch.Tensor
    ) -> torch.Tensor:
        """Probabilities over all nodes; zero off the action mask."""
        if not bool(mask.any()):
            raise ValueError("graph has no action nodes")
        logits = self.logits(adj, x)
        masked = logits.masked_fill(~mask, -torch.inf)
        return torch.softmax(masked, dim=0)


class ValueNet(nn.Module):
    """g-U-Net with mean pooling and a scalar head: V(G)."""

    def __init__(self, config: PolicyNetConfig):
        super().__init__()
        self.unet = GraphUNet(config)
        self.dropout = nn.Dropout(config.dropout)
        self.head = nn.Sequential(
            nn.Linear(config.hidden, config.hidden, dtype=torch.float64),
            nn.ReLU(),
            nn.Linear(config.hidden, 1, dtype=torch.float64),
        )

    def forward(self, adj: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        h = self.unet(adj, x)
        pooled = self.dropout(h).mean(dim=0)
        return self.head(pooled).squeeze(-1)


def graph_tensors(graph: WireGraph, norm=None):
    feats = graph.features if norm is None else norm.apply(graph.features)
    x = torch.as_tensor(feats, dtype=torch.float64)
    return graph.adjacency(), x, graph.action_mask()
