"""The traditional optimizer: cost model, left-deep DP and hint-guided completion."""
from __future__ import annotations

import math
from dataclasses import dataclass

from plandoctor.actions import order_is_connected
from plandoctor.catalog import CardinalityMode, JoinGraphQuery
from plandoctor.plan import CompletePlan, IncompletePlan, JoinMethod


class CompletionError(ValueError):
    pass


@dataclass(frozen=True)
class CostModel:
    c_hash: float = 1.0
    c_merge: float = 1.2
    c_nl: float = 0.05
    c_scan: float = 1.0

    def __post_init__(self):
        if min(self.c_hash, self.c_merge, self.c_nl, self.c_scan) <= 0:
            raise ValueError("cost constants must be positive")


def join_cost(method: JoinMethod, outer_rows: float, inner_rows: float, out_rows: float,
              model: CostModel = CostModel()) -> float:
    if method == JoinMethod.NESTED_LOOP:
        return model.c_nl * (outer_rows * inner_rows) + out_rows
    if method == JoinMethod.HASH:
        return model.c_hash * (outer_rows + inner_rows) + out_rows
    if method == JoinMethod.MERGE:
        return (model.c_merge * (outer_rows * math.log2(1 + outer_rows)
                                 + inner_rows * math.log2(1 + inner_rows)) + out_rows)
    raise ValueError(f"unknown join method {method!r}")


def scan_cost(query: JoinGraphQuery, table: int, model: CostModel) -> float:
    return model.c_scan * query.rows[query.position[table]]


def annotate(query: JoinGraphQuery, order: tuple[int, ...], methods: tuple[JoinMethod, ...],
             model: CostModel, mode: CardinalityMode) -> tuple[tuple[float, ...], tuple[float, ...], float]:
    """Per-node rows and costs plus the total, accumulated left to right.

    The running total is ``((scan_1 + scan_2) + join_1) + scan_3 + join_2 ...``;
    the DP below uses the same association so equal plans cost bit-identically.
    """
    n = len(order)
    pos = query.position
    scan_rows, scan_costs = [], []
    for t in order:
        scan_rows.append(query.card_mask(1 << pos[t], mode))
        scan_costs.append(scan_cost(query, t, model))
    join_rows, join_costs = [], []
    prefix = 1 << pos[order[0]]
    total = scan_costs[0]
    for k in range(1, n):
        inner_bit = 1 << pos[order[k]]
        outer = query.card_mask(prefix, mode)
        prefix |= inner_bit
        out = query.card_mask(prefix, mode)
        jc = join_cost(methods[k - 1], outer, scan_rows[k], out, model)
        total = total + scan_costs[k] + jc
        join_rows.append(out)
        join_costs.append(jc)
    return tuple(scan_rows + join_rows), tuple(scan_costs + join_costs), total


def complete(query: JoinGraphQuery, icp: IncompletePlan, model: CostModel = CostModel()) -> CompletePlan:
    """Complete plan steered by ``icp``: order and methods copied, costs estimated."""
    if sorted(icp.order) != sorted(query.tables):
        raise CompletionError(f"{icp.render()} is not a permutation of {query.query_id}'s tables")
    if not order_is_connected(query, icp.order):
        raise CompletionError(f"{icp.render()} has a prefix without a join predicate")
    rows, costs, total = annotate(query, icp.order, icp.methods, model, CardinalityMode.ESTIMATED)
    return CompletePlan(query.query_id, icp.order, icp.methods, rows, costs, total)


def optimize(query: JoinGraphQuery, model: CostModel = CostModel()) -> CompletePlan:
    """Minimum estimated-cost left-deep plan over connected orders and all methods.

    Subset DP: the cost of adding table t to a set S depends only on S, so the
    best plan for S ∪ {t} extends the best plan for S.  Ties break on
    (order, methods) lexicographically.
    """
    est = CardinalityMode.ESTIMATED
    pos = query.position
    k = query.n_tables
    adj_mask = [0] * k
    for p in query.predicates:
        a, b = pos[p.left], pos[p.right]
        adj_mask[a] |= 1 << b
        adj_mask[b] |= 1 << a
    scans = [scan_cost(query, t, model) for t in query.tables]
    # mask -> (cost, order, method ints)
    best: dict[int, tuple[float, tuple[int, ...], tuple[int, ...]]] = {}
    for i, t in enumerate(query.tables):
        best[1 << i] = (scans[i], (t,), ())
    for mask in sorted(range(1, 1 << k), key=lambda m: (bin(m).count("1"), m)):
        if mask in best or mask & (mask - 1) == 0:
            continue
        cand = None
        out = query.card_mask(mask, est)
        for i in range(k):
            bit = 1 << i
            rest = mask ^ bit
            if not mask & bit or rest not in best or not adj_mask[i] & rest:
                continue
            sub_cost, sub_order, sub_methods = best[rest]
            outer = query.card_mask(rest, est)
            inner = query.card_mask(bit, est)
            for m in JoinMethod:
                c = sub_cost + scans[i] + join_cost(m, outer, inner, out, model)
                key = (c, sub_order + (query.tables[i],), sub_methods + (int(m),))
                if cand is None or key < cand:
                    cand = key
        if cand is not None:
            best[mask] = cand
    full = (1 << k) - 1
    if full not in best:
        raise CompletionError(f"{query.query_id} has a disconnected join graph")
    _, order, methods = best[full]
    return complete(query, IncompletePlan(query.query_id, order, tuple(JoinMethod(m) for m in methods)), model)
