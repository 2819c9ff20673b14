"""Left-deep plans, ICP extraction, node labels and state features.

Node indexing used throughout: positions ``0..n-1`` are the scans T_1..T_n in
join order, positions ``n..2n-2`` are the joins O_1..O_{n-1}.  O_1 joins T_1
(left) with T_2 (right); O_k joins O_{k-1} (left) with T_{k+1} (right); the
root is O_{n-1}.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from plandoctor.catalog import JoinGraphQuery


class JoinMethod(enum.IntEnum):
    """Join operators; the integer value is the 1-based Op_j index."""

    HASH = 1
    MERGE = 2
    NESTED_LOOP = 3

    @property
    def short(self) -> str:
        return _SHORT[self]

    @classmethod
    def parse(cls, s: str) -> "JoinMethod":
        for m, name in _SHORT.items():
            if s.upper() in (name, m.name):
                return m
        raise ValueError(f"unknown join method {s!r}")


_SHORT = {JoinMethod.HASH: "HJ", JoinMethod.MERGE: "MJ", JoinMethod.NESTED_LOOP: "NLJ"}
N_OPS = len(JoinMethod)

LEFT, RIGHT, NO_SIBLING, ROOT = 0, 1, 2, 3


@dataclass(frozen=True)
class IncompletePlan:
    query_id: str
    order: tuple[int, ...]
    methods: tuple[JoinMethod, ...]

    def __post_init__(self):
        if len(self.methods) != len(self.order) - 1:
            raise ValueError("|methods| must equal |order| - 1")
        if len(set(self.order)) != len(self.order):
            raise ValueError("order must be a permutation")

    @property
    def key(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        """Canonical identity used for history sets and caches."""
        return self.order, tuple(int(m) for m in self.methods)

    def render(self) -> str:
        joins = " ".join(m.short for m in self.methods)
        return f"[{' '.join(f't{t}' for t in self.order)}] / [{joins}]"

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "order": list(self.order),
                "methods": [m.short for m in self.methods]}

    @classmethod
    def from_dict(cls, d: dict) -> "IncompletePlan":
        return cls(d["query_id"], tuple(int(t) for t in d["order"]),
                   tuple(JoinMethod.parse(m) for m in d["methods"]))


@dataclass(frozen=True)
class CompletePlan:
    query_id: str
    order: tuple[int, ...]
    methods: tuple[JoinMethod, ...]
    node_rows: tuple[float, ...]
    node_costs: tuple[float, ...]
    total_cost: float

    def __post_init__(self):
        n = len(self.order)
        if len(self.methods) != n - 1:
            raise ValueError("|methods| must equal |order| - 1")
        if len(self.node_rows) != 2 * n - 1 or len(self.node_costs) != 2 * n - 1:
            raise ValueError("per-node annotations must cover 2n-1 nodes")
        if any(r <= 0 for r in self.node_rows) or any(c <= 0 for c in self.node_costs):
            raise ValueError("per-node rows and costs must be positive")

    @property
    def n_tables(self) -> int:
        return len(self.order)

    def to_dict(self) -> dict:
        n = self.n_tables
        nodes = []
        for i in range(2 * n - 1):
            label = f"T{i + 1}" if i < n else f"O{i - n + 1}"
            node = {"label": label, "rows": self.node_rows[i], "cost": self.node_costs[i]}
            if i < n:
                node["table"] = self.order[i]
            else:
                node["method"] = self.methods[i - n].short
            nodes.append(node)
        return {"query_id": self.query_id, "order": list(self.order),
                "methods": [m.short for m in self.methods], "nodes": nodes,
                "total_cost": self.total_cost}


def extract_icp(cp: CompletePlan) -> IncompletePlan:
    return IncompletePlan(cp.query_id, cp.order, cp.methods)


@dataclass(frozen=True)
class Labeling:
    tables: dict[str, int]          # "T1" -> schema table id
    joins: dict[str, frozenset]     # "O1" -> tables under that join


def label_nodes(icp: IncompletePlan) -> Labeling:
    tables = {f"T{k + 1}": t for k, t in enumerate(icp.order)}
    joins = {f"O{k}": frozenset(icp.order[:k + 1]) for k in range(1, len(icp.order))}
    return Labeling(tables, joins)


def parent_index(n: int, i: int) -> int | None:
    """Parent node position of node ``i`` in an n-table left-deep tree."""
    if i < 0 or i >= 2 * n - 1:
        raise IndexError(i)
    if i == 2 * n - 2:
        return None
    if i < n:
        return n if i <= 1 else n + i - 1
    return i + 1


def _node_height(n: int, i: int) -> int:
    return 0 if i < n else i - n + 1


def _structure_type(n: int, i: int) -> int:
    if i == 2 * n - 2:
        return ROOT
    if i == 0:
        return LEFT
    if i < n:
        return RIGHT
    return LEFT  # every non-root join is its parent's left child


def reachability_mask(cp: CompletePlan | IncompletePlan) -> np.ndarray:
    """mask[i, j] is True iff i == j or one node is an ancestor of the other."""
    n = len(cp.order)
    size = 2 * n - 1
    mask = np.eye(size, dtype=bool)
    for i in range(size):
        p = parent_index(n, i)
        while p is not None:
            mask[i, p] = mask[p, i] = True
            p = parent_index(n, p)
    return mask


@dataclass(frozen=True)
class StateFeatures:
    op: np.ndarray          # (N, |Op|+1) one-hot; last column is Scan
    table: np.ndarray       # (N, n_schema_tables) one-hot on scans
    predicates: np.ndarray  # (N, n_schema_edges) indicator on joins
    log_rows: np.ndarray    # (N,)
    height: np.ndarray      # (N,) int
    structure: np.ndarray   # (N,) int in {0,1,2,3}
    mask: np.ndarray        # (N, N) bool
    step_fraction: float

    @property
    def n_nodes(self) -> int:
        return self.op.shape[0]

    def node_matrix(self, max_height: int) -> np.ndarray:
        """Dense per-node input rows: raw features plus one-hot height and structure."""
        n = self.n_nodes
        h = np.zeros((n, max_height + 1))
        h[np.arange(n), np.minimum(self.height, max_height)] = 1.0
        s = np.zeros((n, 4))
        s[np.arange(n), self.structure] = 1.0
        return np.concatenate(
            [self.op, self.table, self.predicates, self.log_rows[:, None] / 10.0, h, s], axis=1)


def node_width(n_schema_tables: int, n_schema_edges: int) -> int:
    """Width of ``StateFeatures.node_matrix`` for a schema (height capped at n-1)."""
    return (N_OPS + 1) + n_schema_tables + n_schema_edges + 1 + n_schema_tables + 4


def featurize(query: JoinGraphQuery, cp: CompletePlan, t: int, maxsteps: int) -> StateFeatures:
    if maxsteps <= 0 or not (0 <= t <= maxsteps):
        raise ValueError(f"step {t} outside [0, {maxsteps}]")
    n = cp.n_tables
    size = 2 * n - 1
    op = np.zeros((size, N_OPS + 1))
    table = np.zeros((size, query.n_schema_tables))
    preds = np.zeros((size, query.n_schema_edges))
    for i, tbl in enumerate(cp.order):
        op[i, N_OPS] = 1.0
        table[i, tbl] = 1.0
    for k in range(1, n):
        node = n + k - 1
        op[node, int(cp.methods[k - 1]) - 1] = 1.0
        prefix = set(cp.order[:k])
        inner = cp.order[k]
        for p in query.predicates:
            if (p.left == inner and p.right in prefix) or (p.right == inner and p.left in prefix):
                preds[node, p.edge_id] = 1.0
    return StateFeatures(
        op=op,
        table=table,
        predicates=preds,
        log_rows=np.log1p(np.asarray(cp.node_rows, dtype=float)),
        height=np.array([_node_height(n, i) for i in range(size)]),
        structure=np.array([_structure_type(n, i) for i in range(size)]),
        mask=reachability_mask(cp),
        step_fraction=t / maxsteps,
    )
