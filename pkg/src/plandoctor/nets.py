"""Plan-state encoder shared (as a class, not weights) by the advantage model and policy.

Nodes are embedded, each node averages the embeddings of the nodes it can
reach in the tree (ancestors, descendants, itself), and the plan vector is the
mean over nodes concatenated with the step fraction.  Averaging over
reachable nodes is uniform attention restricted by the reachability mask.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from plandoctor.plan import StateFeatures, node_width

DTYPE = torch.float64


@dataclass
class FeatureBatch:
    nodes: torch.Tensor   # (B, N, F)
    attend: torch.Tensor  # (B, N, N) row-normalised reachability, zero on padding
    valid: torch.Tensor   # (B, N)
    step: torch.Tensor    # (B, 1)

    def __len__(self) -> int:
        return self.nodes.shape[0]

    def index(self, idx) -> "FeatureBatch":
        return FeatureBatch(self.nodes[idx], self.attend[idx], self.valid[idx], self.step[idx])


def batch_features(feats: Sequence[StateFeatures], max_height: int) -> FeatureBatch:
    if not feats:
        raise ValueError("empty feature batch")
    n_max = max(f.n_nodes for f in feats)
    width = feats[0].node_matrix(max_height).shape[1]
    b = len(feats)
    nodes = np.zeros((b, n_max, width))
    attend = np.zeros((b, n_max, n_max))
    valid = np.zeros((b, n_max))
    step = np.zeros((b, 1))
    for i, f in enumerate(feats):
        n = f.n_nodes
        x = f.node_matrix(max_height)
        if x.shape[1] != width:
            raise ValueError("node feature widths differ within a batch")
        nodes[i, :n] = x
        m = f.mask.astype(float)
        attend[i, :n, :n] = m / m.sum(axis=1, keepdims=True)
        valid[i, :n] = 1.0
        step[i, 0] = f.step_fraction
    t = lambda a: torch.as_tensor(a, dtype=DTYPE)
    return FeatureBatch(t(nodes), t(attend), t(valid), t(step))


class StateEncoder(nn.Module):
    def __init__(self, n_schema_tables: int, n_schema_edges: int, hidden: int = 64, width: int = 64):
        super().__init__()
        self.max_height = n_schema_tables - 1
        self.node_dim = node_width(n_schema_tables, n_schema_edges)
        self.embed = nn.Linear(self.node_dim, hidden)
        self.mix = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden + 1, width)
        self.width = width

    def forward(self, fb: FeatureBatch) -> torch.Tensor:
        if fb.nodes.shape[-1] != self.node_dim:
            raise ValueError(f"expected node width {self.node_dim}, got {fb.nodes.shape[-1]}")
        e = torch.relu(self.embed(fb.nodes))
        h = torch.relu(self.mix(fb.attend @ e))
        w = fb.valid.unsqueeze(-1)
        pooled = (h * w).sum(1) / w.sum(1)
        return torch.relu(self.out(torch.cat([pooled, fb.step], dim=1)))


def param_vector(module: nn.Module) -> np.ndarray:
    return torch.cat([p.detach().flatten() for p in module.parameters()]).numpy().copy()


def state_dict_to_json(module: nn.Module) -> dict:
    return {k: v.detach().tolist() for k, v in module.state_dict().items()}


def load_state_dict_json(module: nn.Module, d: dict) -> None:
    module.load_state_dict({k: torch.as_tensor(v, dtype=DTYPE) for k, v in d.items()})
