"""Synthetic schemas, join-graph workloads and the cardinality oracle.

Cardinalities follow the textbook independence model: the size of a joined
table set is the product of filtered base sizes times the selectivity of every
join predicate internal to the set.  Each query carries fixed log-normal
multiplicative errors per table and per predicate; the ESTIMATED oracle applies
them, the TRUE oracle ignores them.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCHEMA_FORMAT = "plandoctor.schema"
WORKLOAD_FORMAT = "plandoctor.workload"
FORMAT_VERSION = 1


class CatalogError(ValueError):
    pass


class CardinalityMode(enum.Enum):
    TRUE = "true"
    ESTIMATED = "estimated"


@dataclass(frozen=True)
class Table:
    name: str
    rows: int


@dataclass(frozen=True)
class JoinEdge:
    a: int
    b: int
    selectivity: float


@dataclass(frozen=True)
class SchemaSpec:
    tables: tuple[Table, ...]
    edges: tuple[JoinEdge, ...]

    def __post_init__(self):
        n = len(self.tables)
        for t in self.tables:
            if t.rows < 1:
                raise CatalogError(f"table {t.name} has row_count {t.rows} < 1")
        for e in self.edges:
            if not (0 <= e.a < n and 0 <= e.b < n) or e.a == e.b:
                raise CatalogError(f"bad edge endpoints ({e.a}, {e.b})")
            if not (0.0 < e.selectivity <= 1.0):
                raise CatalogError(f"selectivity {e.selectivity} outside (0, 1]")

    @property
    def n_tables(self) -> int:
        return len(self.tables)

    def neighbours(self) -> list[set[int]]:
        adj: list[set[int]] = [set() for _ in self.tables]
        for e in self.edges:
            adj[e.a].add(e.b)
            adj[e.b].add(e.a)
        return adj

    def to_dict(self) -> dict:
        return {
            "format": SCHEMA_FORMAT,
            "version": FORMAT_VERSION,
            "tables": [{"name": t.name, "rows": t.rows} for t in self.tables],
            "edges": [{"a": e.a, "b": e.b, "selectivity": e.selectivity} for e in self.edges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SchemaSpec":
        _check_header(d, SCHEMA_FORMAT)
        return cls(
            tables=tuple(Table(t["name"], int(t["rows"])) for t in d["tables"]),
            edges=tuple(JoinEdge(int(e["a"]), int(e["b"]), float(e["selectivity"])) for e in d["edges"]),
        )


@dataclass(frozen=True)
class JoinPredicate:
    edge_id: int
    left: int
    right: int
    selectivity: float
    error: float = 1.0


@dataclass(frozen=True)
class JoinGraphQuery:
    """A connected join graph over a subset of schema tables.

    ``tables`` holds schema table ids; ``rows``, ``filters`` and
    ``table_errors`` are aligned with it.  Predicates reference schema ids.
    """

    query_id: str
    tables: tuple[int, ...]
    rows: tuple[int, ...]
    filters: tuple[float, ...]
    table_errors: tuple[float, ...]
    predicates: tuple[JoinPredicate, ...]
    n_schema_tables: int
    n_schema_edges: int

    def __post_init__(self):
        k = len(self.tables)
        if k < 1 or len(set(self.tables)) != k:
            raise CatalogError(f"{self.query_id}: table_refs must be distinct and nonempty")
        if not (len(self.rows) == len(self.filters) == len(self.table_errors) == k):
            raise CatalogError(f"{self.query_id}: per-table fields misaligned")
        if any(not (0.0 < f <= 1.0) for f in self.filters):
            raise CatalogError(f"{self.query_id}: filter selectivity outside (0, 1]")
        if any(x <= 0 for x in self.table_errors) or any(p.error <= 0 for p in self.predicates):
            raise CatalogError(f"{self.query_id}: error factors must be positive")
        members = set(self.tables)
        for p in self.predicates:
            if p.left not in members or p.right not in members:
                raise CatalogError(f"{self.query_id}: predicate on table outside query")

    @property
    def n_tables(self) -> int:
        return len(self.tables)

    @cached_property
    def position(self) -> dict[int, int]:
        return {t: i for i, t in enumerate(self.tables)}

    @cached_property
    def adjacency(self) -> dict[int, frozenset[int]]:
        adj: dict[int, set[int]] = {t: set() for t in self.tables}
        for p in self.predicates:
            adj[p.left].add(p.right)
            adj[p.right].add(p.left)
        return {t: frozenset(v) for t, v in adj.items()}

    def is_connected(self, subset: Iterable[int] | None = None) -> bool:
        nodes = set(self.tables if subset is None else subset)
        if not nodes:
            return False
        start = next(iter(nodes))
        seen = {start}
        stack = [start]
        while stack:
            for nb in self.adjacency[stack.pop()]:
                if nb in nodes and nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return seen == nodes

    def mask_of(self, subset: Iterable[int]) -> int:
        m = 0
        for t in subset:
            try:
                m |= 1 << self.position[t]
            except KeyError:
                raise CatalogError(f"table {t} not referenced by {self.query_id}") from None
        return m

    @cached_property
    def _cards(self) -> dict[CardinalityMode, list[float]]:
        # Every subset indexed by bitmask over local positions; n_q stays small.
        return {mode: _all_subset_cards(self, mode) for mode in CardinalityMode}

    def card_mask(self, mask: int, mode: CardinalityMode) -> float:
        return self._cards[mode][mask]

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "tables": list(self.tables),
            "rows": list(self.rows),
            "filters": list(self.filters),
            "table_errors": list(self.table_errors),
            "predicates": [
                {"edge_id": p.edge_id, "left": p.left, "right": p.right,
                 "selectivity": p.selectivity, "error": p.error}
                for p in self.predicates
            ],
            "n_schema_tables": self.n_schema_tables,
            "n_schema_edges": self.n_schema_edges,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JoinGraphQuery":
        return cls(
            query_id=d["query_id"],
            tables=tuple(int(x) for x in d["tables"]),
            rows=tuple(int(x) for x in d["rows"]),
            filters=tuple(float(x) for x in d["filters"]),
            table_errors=tuple(float(x) for x in d["table_errors"]),
            predicates=tuple(
                JoinPredicate(int(p["edge_id"]), int(p["left"]), int(p["right"]),
                              float(p["selectivity"]), float(p["error"]))
                for p in d["predicates"]
            ),
            n_schema_tables=int(d["n_schema_tables"]),
            n_schema_edges=int(d["n_schema_edges"]),
        )


def _all_subset_cards(q: JoinGraphQuery, mode: CardinalityMode) -> list[float]:
    est = mode is CardinalityMode.ESTIMATED
    k = q.n_tables
    base = [
        q.rows[i] * q.filters[i] * (q.table_errors[i] if est else 1.0)
        for i in range(k)
    ]
    preds = [
        ((1 << q.position[p.left]) | (1 << q.position[p.right]),
         p.selectivity * (p.error if est else 1.0))
        for p in q.predicates
    ]
    out = [0.0] * (1 << k)
    for mask in range(1, 1 << k):
        c = 1.0
        for i in range(k):
            if mask >> i & 1:
                c *= base[i]
        for pm, sel in preds:
            if mask & pm == pm:
                c *= sel
        out[mask] = c
    return out


def cardinality(query: JoinGraphQuery, subset: Iterable[int],
                mode: CardinalityMode = CardinalityMode.TRUE) -> float:
    """Rows produced by joining ``subset`` (schema table ids) under ``mode``."""
    mask = query.mask_of(subset)
    if mask == 0:
        raise CatalogError("empty subset")
    return query.card_mask(mask, mode)


def generate_schema(seed: int, n_tables: int, row_range: tuple[int, int] = (1_000, 1_000_000),
                    extra_edge_prob: float = 0.25) -> SchemaSpec:
    """Random connected schema: a random spanning tree plus a few extra edges.

    Selectivities imitate key/foreign-key joins, roughly 1/max(rows) with
    up to one order of magnitude of slack.
    """
    lo, hi = row_range
    if n_tables < 2:
        raise CatalogError("n_tables must be >= 2")
    if lo < 1 or hi < lo:
        raise CatalogError(f"invalid row range {row_range}")
    rng = np.random.default_rng(seed)
    rows = np.exp(rng.uniform(np.log(lo), np.log(hi) + 1e-12, size=n_tables))
    rows = [int(min(hi, max(lo, round(r)))) for r in rows]
    labels = rng.permutation(n_tables)
    pairs = set()
    for i in range(1, n_tables):
        j = int(rng.integers(0, i))
        a, b = int(labels[i]), int(labels[j])
        pairs.add((min(a, b), max(a, b)))
    for a in range(n_tables):
        for b in range(a + 1, n_tables):
            if (a, b) not in pairs and rng.random() < extra_edge_prob:
                pairs.add((a, b))
    edges = []
    for a, b in sorted(pairs):
        sel = 10.0 ** rng.uniform(-0.3, 1.0) / max(rows[a], rows[b])
        edges.append(JoinEdge(a, b, float(min(1.0, sel))))
    tables = tuple(Table(f"t{i}", rows[i]) for i in range(n_tables))
    return SchemaSpec(tables, tuple(edges))


def _connected_subset(rng: np.random.Generator, adj: list[set[int]], k: int) -> list[int]:
    n = len(adj)
    comp_size = [0] * n
    for s in range(n):
        seen = {s}
        stack = [s]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        comp_size[s] = len(seen)
    starts = [s for s in range(n) if comp_size[s] >= k]
    if not starts:
        raise CatalogError(f"no connected table subset of size {k} exists")
    chosen = [int(starts[rng.integers(0, len(starts))])]
    members = set(chosen)
    while len(chosen) < k:
        frontier = sorted({nb for t in chosen for nb in adj[t]} - members)
        nxt = int(frontier[rng.integers(0, len(frontier))])
        chosen.append(nxt)
        members.add(nxt)
    return chosen


def generate_workload(schema: SchemaSpec, seed: int, n_queries: int,
                      tables_per_query: tuple[int, int] = (3, 6), sigma_est: float = 1.0,
                      filter_prob: float = 0.5) -> list[JoinGraphQuery]:
    """Connected random queries; error factors are exp(N(0, sigma_est)).

    Each query draws from its own generator seeded by (seed, index), so a
    query is reproducible from the workload seed and its id alone.
    """
    lo, hi = tables_per_query
    if lo < 2 or hi < lo or hi > schema.n_tables:
        raise CatalogError(f"invalid tables_per_query {tables_per_query} for {schema.n_tables} tables")
    if sigma_est < 0:
        raise CatalogError("sigma_est must be >= 0")
    adj = schema.neighbours()
    edge_index = {(e.a, e.b): i for i, e in enumerate(schema.edges)}
    queries = []
    for qi in range(n_queries):
        rng = np.random.default_rng([seed, qi])
        k = int(rng.integers(lo, hi + 1))
        tables = _connected_subset(rng, adj, k)
        filters = [
            float(10.0 ** rng.uniform(-2.0, 0.0)) if rng.random() < filter_prob else 1.0
            for _ in tables
        ]
        t_err = [float(np.exp(rng.normal(0.0, sigma_est))) for _ in tables]
        members = set(tables)
        preds = []
        for (a, b), eid in sorted(edge_index.items(), key=lambda kv: kv[1]):
            if a in members and b in members:
                err = float(np.exp(rng.normal(0.0, sigma_est)))
                preds.append(JoinPredicate(eid, a, b, schema.edges[eid].selectivity, err))
        queries.append(JoinGraphQuery(
            query_id=f"q{qi:03d}",
            tables=tuple(tables),
            rows=tuple(schema.tables[t].rows for t in tables),
            filters=tuple(filters),
            table_errors=tuple(t_err),
            predicates=tuple(preds),
            n_schema_tables=schema.n_tables,
            n_schema_edges=len(schema.edges),
        ))
    return queries


def split_queries(queries: Sequence[JoinGraphQuery], seed: int,
                  heldout_fraction: float = 0.2) -> tuple[list[str], list[str]]:
    """Deterministic seeded train/held-out split of query ids."""
    ids = [q.query_id for q in queries]
    rng = np.random.default_rng([seed, 0x5EED])
    perm = rng.permutation(len(ids))
    n_test = int(round(heldout_fraction * len(ids)))
    test = sorted(ids[i] for i in perm[:n_test])
    train = [i for i in ids if i not in set(test)]
    return train, test


@dataclass
class Workload:
    schema: SchemaSpec
    queries: list[JoinGraphQuery]
    train_ids: list[str]
    test_ids: list[str]
    params: dict = field(default_factory=dict)

    def by_id(self) -> dict[str, JoinGraphQuery]:
        return {q.query_id: q for q in self.queries}

    @property
    def train(self) -> list[JoinGraphQuery]:
        m = self.by_id()
        return [m[i] for i in self.train_ids]

    @property
    def test(self) -> list[JoinGraphQuery]:
        m = self.by_id()
        return [m[i] for i in self.test_ids]

    def to_dict(self) -> dict:
        return {
            "format": WORKLOAD_FORMAT,
            "version": FORMAT_VERSION,
            "params": self.params,
            "schema": self.schema.to_dict(),
            "split": {"train": self.train_ids, "test": self.test_ids},
            "queries": [q.to_dict() for q in self.queries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Workload":
        _check_header(d, WORKLOAD_FORMAT)
        return cls(
            schema=SchemaSpec.from_dict(d["schema"]),
            queries=[JoinGraphQuery.from_dict(q) for q in d["queries"]],
            train_ids=list(d["split"]["train"]),
            test_ids=list(d["split"]["test"]),
            params=dict(d.get("params", {})),
        )


def build_workload(schema_seed: int, workload_seed: int, n_tables: int = 8,
                   row_range: tuple[int, int] = (1_000, 1_000_000), n_queries: int = 25,
                   tables_per_query: tuple[int, int] = (3, 6), sigma_est: float = 1.0,
                   heldout_fraction: float = 0.2) -> Workload:
    schema = generate_schema(schema_seed, n_tables, row_range)
    queries = generate_workload(schema, workload_seed, n_queries, tables_per_query, sigma_est)
    train, test = split_queries(queries, workload_seed, heldout_fraction)
    params = {
        "schema_seed": schema_seed, "workload_seed": workload_seed, "n_tables": n_tables,
        "row_range": list(row_range), "n_queries": n_queries,
        "tables_per_query": list(tables_per_query), "sigma_est": sigma_est,
        "heldout_fraction": heldout_fraction,
    }
    return Workload(schema, queries, train, test, params)


def _check_header(d: dict, fmt: str) -> None:
    if d.get("format") != fmt:
        raise CatalogError(f"expected format {fmt!r}, got {d.get('format')!r}")
    if d.get("version") != FORMAT_VERSION:
        raise CatalogError(f"unsupported {fmt} version {d.get('version')!r}")


def dump_json(obj: dict, path: str | Path) -> None:
    # repr-based float output is the shortest string that round-trips exactly.
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
