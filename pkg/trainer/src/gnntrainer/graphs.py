"""Wire-format graph ingestion: parsing, tensors, and feature normalization.

The simulator serializes exploration graphs as
{"v":1,"nodes":[{"id","kind","pos","feat"},...],"edges":[[u,v,w],...],
 "actions":[...]}. Here they become dense tensors: a node-feature matrix, a
symmetrically normalized adjacency, and an action mask. Edge weights carry
travel distances, which already appear in the node features, so adjacency
is binary.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

WIRE_VERSION = 1
FEATURE_DIM = 4


class GraphError(ValueError):
    """Raised for wire graphs the trainer cannot consume."""


@dataclass
class WireGraph:
    features: np.ndarray  # (n, 4) float64
    edges: list  # of (u, v)
    actions: list  # action node ids, ascending
    kinds: list  # node kind strings, by id

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    @classmethod
    def from_wire(cls, obj: dict) -> "WireGraph":
        if not isinstance(obj, dict) or obj.get("v") != WIRE_VERSION:
            raise GraphError(f"unsupported graph wire version {obj.get('v')!r}")
        try:
            nodes = obj["nodes"]
            ids = [int(n["id"]) for n in nodes]
            if ids != list(range(len(nodes))):
                raise GraphError("node ids must be dense and ordered")
            features = np.array([[float(v) for v in n["feat"]] for n in nodes], dtype=float)
            if features.shape != (len(nodes), FEATURE_DIM):
                raise GraphError("expected 4 features per node")
            kinds = [str(n["kind"]) for n in nodes]
            edges = [(int(u), int(v)) for u, v, _w in obj["edges"]]
            actions = sorted(int(a) for a in obj["actions"])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, GraphError):
                raise
            raise GraphError(f"malformed graph wire object: {exc}") from exc
        n = len(nodes)
        for u, v in edges:
            if not (0 <= u < n and 0 <= v < n):
                raise GraphError(f"edge ({u}, {v}) out of range")
        for a in actions:
            if not 0 <= a < n:
                raise GraphError(f"action id {a} out of range")
        if not np.isfinite(features).all():
            raise GraphError("non-finite node features")
        return cls(features=features, edges=edges, actions=actions, kinds=kinds)

    def adjacency(self) -> torch.Tensor:
        adj = torch.zeros((self.n_nodes, self.n_nodes), dtype=torch.float64)
        for u, v in self.edges:
            adj[u, v] = 1.0
            adj[v, u] = 1.0
        return adj

    def action_mask(self) -> torch.Tensor:
        mask = torch.zeros(self.n_nodes, dtype=torch.bool)
        mask[list(self.actions)] = True
        return mask

    def permuted(self, perm) -> "WireGraph":
        """Relabel nodes: new id of old node i is perm[i]."""
        perm = list(perm)
        inverse = np.argsort(perm)
        features = self.features[inverse]
        kinds = [self.kinds[i] for i in inverse]
        edges = [(perm[u], perm[v]) for u, v in self.edges]
        actions = sorted(perm[a] for a in self.actions)
        return WireGraph(features=features, edges=edges, actions=actions, kinds=kinds)


def normalized_adjacency(adj: torch.Tensor) -> torch.Tensor:
    """Symmetric GCN normalization with self-loops: D^-1/2 (A + I) D^-1/2."""
    a_hat = adj + torch.eye(adj.shape[0], dtype=adj.dtype)
    deg = a_hat.sum(dim=1)
    d_inv_sqrt = deg.clamp(min=1e-12).pow(-0.5)
    return d_inv_sqrt[:, None] * a_hat * d_inv_sqrt[None, :]


class RunningNorm:
    """Per-feature running standardization (Welford).

    The transform is affine with positive scale per feature, so feature
    order statistics (and the greedy action under a fixed network) are
    unaffected by unit choices.
    """

    def __init__(self, dim: int = FEATURE_DIM):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, features: np.ndarray) -> None:
        for row in np.asarray(features, dtype=float):
            self.count += 1
            delta = row - self.mean
            self.mean += delta / self.count
            self.m2 += delta * (row - self.mean)

    def std(self) -> np.ndarray:
        if self.count < 2:
            return np.ones_like(self.mean)
        return np.sqrt(np.maximum(self.m2 / (self.count - 1), 1e-8))

    def apply(self, features: np.ndarray) -> np.ndarray:
        if self.count < 2:
            return np.asarray(features, dtype=float)
        return (np.asarray(features, dtype=float) - self.mean) / self.std()

    def state_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean.tolist(), "m2": self.m2.tolist()}

    def load_state_dict(self, state: dict) -> None:
        self.count = int(state["count"])
        self.mean = np.array(state["mean"], dtype=float)
        self.m2 = np.array(state["m2"], dtype=float)
