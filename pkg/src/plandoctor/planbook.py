"""Memoised completion, latency and featurisation of plans within one workload."""
from __future__ import annotations

from plandoctor.catalog import JoinGraphQuery
from plandoctor.executor import true_latency
from plandoctor.expert import CostModel, complete, optimize
from plandoctor.plan import CompletePlan, IncompletePlan, StateFeatures, extract_icp, featurize


class PlanBook:
    """Caches keyed by query id, so ids must be unique within a workload."""

    def __init__(self, model: CostModel = CostModel(), maxsteps: int = 3):
        self.model = model
        self.maxsteps = maxsteps
        self._cp: dict = {}
        self._lat: dict = {}
        self._feat: dict = {}
        self._orig: dict = {}
        self._nodes: dict = {}

    def original(self, query: JoinGraphQuery) -> CompletePlan:
        cp = self._orig.get(query.query_id)
        if cp is None:
            cp = self._orig[query.query_id] = optimize(query, self.model)
            self._cp[(query.query_id, extract_icp(cp).key)] = cp
        return cp

    def complete(self, query: JoinGraphQuery, icp: IncompletePlan) -> CompletePlan:
        k = (query.query_id, icp.key)
        cp = self._cp.get(k)
        if cp is None:
            cp = self._cp[k] = complete(query, icp, self.model)
        return cp

    def latency(self, query: JoinGraphQuery, icp: IncompletePlan) -> float:
        k = (query.query_id, icp.key)
        lat = self._lat.get(k)
        if lat is None:
            lat = self._lat[k] = true_latency(query, icp, self.model)
        return lat

    def features(self, query: JoinGraphQuery, icp: IncompletePlan, step: int) -> StateFeatures:
        k = (query.query_id, icp.key, step)
        f = self._feat.get(k)
        if f is None:
            f = self._feat[k] = featurize(query, self.complete(query, icp), step, self.maxsteps)
        return f
