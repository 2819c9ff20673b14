import itertools

import pytest
import torch
from hypothesis import HealthCheck, settings

from plandoctor.catalog import JoinGraphQuery, JoinPredicate

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_query(rows, edges, filters=None, errors=None, edge_errors=None, qid="q", n_schema=None):
    """Query over tables 0..k-1; ``edges`` maps (a, b) -> selectivity."""
    k = len(rows)
    filters = filters or [1.0] * k
    errors = errors or [1.0] * k
    edge_errors = edge_errors or {}
    preds = tuple(JoinPredicate(i, a, b, sel, edge_errors.get((a, b), 1.0))
                  for i, ((a, b), sel) in enumerate(sorted(edges.items())))
    return JoinGraphQuery(qid, tuple(range(k)), tuple(rows), tuple(filters), tuple(errors), preds,
                          n_schema or k, max(len(preds), 1))


def complete_graph_query(k, sel=0.01, rows=100, qid="qc"):
    return make_query([rows] * k, {(a, b): sel for a, b in itertools.combinations(range(k), 2)}, qid=qid)


@pytest.fixture(scope="session")
def small_workload():
    from plandoctor.catalog import build_workload
    return build_workload(3, 3, n_tables=6, n_queries=10, tables_per_query=(3, 5))


ACCEPTANCE_IDS = range(1, 10)


def pytest_configure(config):
    config.acceptance = {}


@pytest.fixture
def verdict(request):
    """Record ``(criterion, passed, detail)`` for the end-of-run acceptance table."""
    def record(n: int, passed: bool, detail: str) -> bool:
        request.config.acceptance[n] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, config):
    got = config.acceptance
    if not got:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in ACCEPTANCE_IDS:
        passed, detail = got.get(n, (False, "not run"))
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
