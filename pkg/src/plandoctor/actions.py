"""Integer action codec, legality masks, action application and edit distance.

Ids are 1-based.  With n schema tables, ids 1..n(n-1)/2 are swaps of table
positions (T_l, T_r) enumerated by l ascending then r ascending; the remaining
|Op|(n-1) ids override the method of join O_i, counted down from the top id.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import numpy as np

from plandoctor.catalog import JoinGraphQuery
from plandoctor.plan import N_OPS, IncompletePlan, JoinMethod


class IllegalAction(ValueError):
    pass


@dataclass(frozen=True)
class Swap:
    l: int
    r: int

    def __str__(self) -> str:
        return f"swap T{self.l} T{self.r}"


@dataclass(frozen=True)
class Override:
    i: int
    j: int

    def __str__(self) -> str:
        return f"override O{self.i}={JoinMethod(self.j).short}"


Action = Union[Swap, Override]


def num_swaps(n: int) -> int:
    return n * (n - 1) // 2


def num_overrides(n: int, ops: int = N_OPS) -> int:
    return ops * (n - 1)


def num_actions(n: int, ops: int = N_OPS) -> int:
    return num_swaps(n) + num_overrides(n, ops)


def swap_boundary(k: int, n: int) -> int:
    """First swap id whose left position is k: 1 + sum_{i=2..k} (n - i + 1)."""
    return 1 + sum(n - i + 1 for i in range(2, k + 1))


def decode(a: int, n: int, ops: int = N_OPS) -> Action:
    total = num_actions(n, ops)
    if not (1 <= a <= total):
        raise IllegalAction(f"action id {a} outside [1, {total}]")
    ns = num_swaps(n)
    if a <= ns:
        l = 1
        while swap_boundary(l + 1, n) <= a:
            l += 1
        return Swap(l, a - swap_boundary(l, n) + l + 1)
    i = -(-(total + 1 - a) // ops)
    j = (total - a) % ops + 1
    return Override(i, j)


def encode(action: Action, n: int, ops: int = N_OPS) -> int:
    if isinstance(action, Swap):
        if not (1 <= action.l < action.r <= n):
            raise IllegalAction(f"{action} out of range for n={n}")
        return swap_boundary(action.l, n) + action.r - action.l - 1
    if not (1 <= action.i <= n - 1 and 1 <= action.j <= ops):
        raise IllegalAction(f"{action} out of range for n={n}")
    return num_actions(n, ops) - ((action.i - 1) * ops + (action.j - 1))


@lru_cache(maxsize=None)
def action_table(n: int, ops: int = N_OPS) -> tuple[Action, ...]:
    """Decoded actions indexed by id - 1."""
    return tuple(decode(a, n, ops) for a in range(1, num_actions(n, ops) + 1))


def apply_unchecked(icp: IncompletePlan, action: Action) -> IncompletePlan:
    if isinstance(action, Swap):
        order = list(icp.order)
        order[action.l - 1], order[action.r - 1] = order[action.r - 1], order[action.l - 1]
        return IncompletePlan(icp.query_id, tuple(order), icp.methods)
    methods = list(icp.methods)
    methods[action.i - 1] = JoinMethod(action.j)
    return IncompletePlan(icp.query_id, icp.order, tuple(methods))


def order_is_connected(query: JoinGraphQuery, order: tuple[int, ...]) -> bool:
    """Every table after the first has a join predicate into the prefix before it."""
    adj = query.adjacency
    seen = {order[0]}
    for t in order[1:]:
        if not (adj[t] & seen):
            return False
        seen.add(t)
    return True


def _permitted(icp: IncompletePlan, query: JoinGraphQuery, action: Action) -> bool:
    nq = len(icp.order)
    if isinstance(action, Swap):
        if action.r > nq:
            return False
        order = list(icp.order)
        order[action.l - 1], order[action.r - 1] = order[action.r - 1], order[action.l - 1]
        return order_is_connected(query, tuple(order))
    return action.i <= nq - 1


def swap_adjacent_joins(swap: Swap) -> set[int]:
    """Join labels whose direct children include either swapped position."""
    return {max(1, swap.l - 1), max(1, swap.r - 1)}


def legal_mask(icp: IncompletePlan, query: JoinGraphQuery, prev: Action | None = None,
               ops: int = N_OPS) -> np.ndarray:
    """Boolean mask over ids 1..num_actions (index a-1); True = permitted."""
    n = query.n_schema_tables
    table = action_table(n, ops)
    allowed = None
    if isinstance(prev, Swap):
        allowed = swap_adjacent_joins(prev)
    mask = np.zeros(len(table), dtype=bool)
    for idx, act in enumerate(table):
        if allowed is not None and not (isinstance(act, Override) and act.i in allowed):
            continue
        mask[idx] = _permitted(icp, query, act)
    return mask


def apply(icp: IncompletePlan, a: int, query: JoinGraphQuery, prev: Action | None = None) -> IncompletePlan:
    """Apply action id ``a``; raises IllegalAction if the mask forbids it."""
    n = query.n_schema_tables
    if not (1 <= a <= num_actions(n)):
        raise IllegalAction(f"action id {a} out of range")
    if not legal_mask(icp, query, prev)[a - 1]:
        raise IllegalAction(f"{decode(a, n)} is masked for {icp.render()}")
    return apply_unchecked(icp, decode(a, n))


def neighbours(icp: IncompletePlan, query: JoinGraphQuery) -> list[IncompletePlan]:
    """Distinct plans one unrestricted legal action away (no-ops excluded)."""
    out = {}
    for idx, act in enumerate(action_table(query.n_schema_tables)):
        if _permitted(icp, query, act):
            nxt = apply_unchecked(icp, act)
            if nxt.key != icp.key:
                out.setdefault(nxt.key, nxt)
    return list(out.values())


@lru_cache(maxsize=4096)
def reachable(origin: IncompletePlan, query: JoinGraphQuery,
              bound: int) -> dict[tuple, tuple[IncompletePlan, int]]:
    """BFS over legal edits: plan key -> (plan, distance) within ``bound`` actions.

    Insertion order is BFS order, so ties in later scans favour fewer steps.
    """
    out = {origin.key: (origin, 0)}
    level = [origin]
    for d in range(1, bound + 1):
        nxt_level = []
        for icp in level:
            for nxt in neighbours(icp, query):
                if nxt.key not in out:
                    out[nxt.key] = (nxt, d)
                    nxt_level.append(nxt)
        level = nxt_level
    return out


def minsteps(origin: IncompletePlan, target: IncompletePlan, query: JoinGraphQuery,
             bound: int = 3) -> int:
    """Fewest legal actions from origin to target (LimitSpace not applied).

    Targets further than ``bound`` report ``bound``.
    """
    hit = reachable(origin, query, bound).get(target.key)
    return bound if hit is None else hit[1]
