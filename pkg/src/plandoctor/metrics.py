"""Workload metrics and the bounded-edit reachable-optimum oracle."""
from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

from plandoctor.actions import reachable
from plandoctor.catalog import JoinGraphQuery
from plandoctor.executor import true_latency
from plandoctor.expert import CostModel, complete, optimize
from plandoctor.plan import CompletePlan, extract_icp


class StateExplosion(RuntimeError):
    pass


def _check(learned: Sequence[float], expert: Sequence[float]) -> None:
    if len(learned) != len(expert):
        raise ValueError(f"length mismatch: {len(learned)} vs {len(expert)}")
    if not learned:
        raise ValueError("empty workload")
    if any(x <= 0 for x in learned) or any(x <= 0 for x in expert):
        raise ValueError("latencies must be positive")


def wrl(learned: Sequence[float], expert: Sequence[float]) -> float:
    """Total learned latency over total expert latency."""
    _check(learned, expert)
    return math.fsum(learned) / math.fsum(expert)


def gmrl(learned: Sequence[float], expert: Sequence[float]) -> float:
    """Geometric mean of per-query latency ratios."""
    _check(learned, expert)
    return math.exp(math.fsum(math.log(a / b) for a, b in zip(learned, expert)) / len(learned))


def reachable_optimum(query: JoinGraphQuery, maxsteps: int, model: CostModel = CostModel(),
                      max_states: int = 200_000) -> tuple[CompletePlan, float, int]:
    """True-latency best plan within ``maxsteps`` legal edits of the expert plan.

    Returns (plan, latency, steps).  Ties go to fewer steps, then the
    lexicographically smallest (order, methods).
    """
    origin = extract_icp(optimize(query, model))
    if maxsteps == 0:
        states = {origin.key: (origin, 0)}
    else:
        states = reachable(origin, query, maxsteps)
    if len(states) > max_states:
        raise StateExplosion(f"{query.query_id}: {len(states)} states exceed cap {max_states}")
    best = None
    for key, (icp, d) in states.items():
        cand = (true_latency(query, icp, model), d, key)
        if best is None or cand < best:
            best = cand + (icp,)
    lat, d, _, icp = best
    return complete(query, icp, model), lat, d


def step_histogram(steps: Sequence[int]) -> dict[int, int]:
    return dict(sorted(Counter(steps).items()))
