import itertools
import json
import threading

import numpy as np
import pytest

from conftest import make_query
from plandoctor.actions import order_is_connected
from plandoctor.catalog import build_workload
from plandoctor.executor import (TIMEOUT_FACTOR, BufferIOError, ExecutionBuffer, ExecutionRecord, Source,
                                 dynamic_timeout, execute, true_latency)
from plandoctor.expert import complete, optimize
from plandoctor.plan import IncompletePlan, JoinMethod, extract_icp

HJ, NLJ = JoinMethod.HASH, JoinMethod.NESTED_LOOP


def _q():
    return make_query([1000, 2000, 500], {(0, 1): 0.001, (1, 2): 0.002}, errors=[3.0, 0.5, 1.0])


def test_deterministic_latency():
    q = _q()
    cp = optimize(q)
    assert execute(q, cp).latency == execute(q, cp).latency == true_latency(q, cp)


def test_latency_uses_true_cardinalities():
    q = _q()
    cp = complete(q, IncompletePlan("q", (0, 1, 2), (HJ, HJ)))
    # HJ(1000, 2000) -> 2000 rows; HJ(2000, 500) -> 2000 rows; scans 3500
    assert true_latency(q, cp) == 3500 + (3000 + 2000) + (2500 + 2000)


def test_timeout_censoring():
    q = _q()
    orig = execute(q, optimize(q))
    slow = complete(q, IncompletePlan("q", (0, 1, 2), (NLJ, NLJ)))
    assert true_latency(q, slow) > 2 * orig.latency
    rec = execute(q, slow, dynamic_timeout(orig.latency))
    assert rec.censored and rec.latency == TIMEOUT_FACTOR * orig.latency


def test_noise_hook_needs_rng_and_is_seeded():
    q = _q()
    cp = optimize(q)
    with pytest.raises(ValueError):
        execute(q, cp, noise_sigma=0.1)
    a = execute(q, cp, noise_sigma=0.1, rng=np.random.default_rng(3)).latency
    b = execute(q, cp, noise_sigma=0.1, rng=np.random.default_rng(3)).latency
    assert a == b != true_latency(q, cp)


def test_exact_estimates_make_expert_optimal():
    wl = build_workload(5, 5, n_tables=7, n_queries=8, tables_per_query=(3, 6), sigma_est=0.0)
    for q in wl.queries:
        best = execute(q, optimize(q)).latency
        for order in itertools.permutations(q.tables):
            if not order_is_connected(q, order):
                continue
            for methods in itertools.product(JoinMethod, repeat=len(order) - 1):
                assert best <= true_latency(q, IncompletePlan(q.query_id, order, methods))


def _rec(qid, lat=10.0, censored=False, step=1):
    return ExecutionRecord(qid, IncompletePlan(qid, (0, 1), (HJ,)), lat, censored, Source.EXPLORATION, step)


def test_buffer_partitions():
    buf = ExecutionBuffer()
    for qid in ("a", "b", "a"):
        buf.append(_rec(qid))
    assert len(buf.for_query("a")) == 2 and len(buf.for_query("b")) == 1
    assert buf.query_ids() == ["a", "b"]


def test_buffer_best_skips_censored():
    buf = ExecutionBuffer()
    buf.append(_rec("a", 5.0, censored=True))
    buf.append(_rec("a", 8.0))
    buf.append(_rec("a", 9.0))
    assert buf.best("a").latency == 8.0
    assert buf.best("zzz") is None


def test_buffer_persist_and_replay(tmp_path):
    path = tmp_path / "executions.jsonl"
    buf = ExecutionBuffer(path)
    for i in range(5):
        buf.append(_rec("q" + str(i % 2), 1.0 + i, step=i % 4))
    back = ExecutionBuffer.replay(path)
    assert back.records == buf.records
    for line in path.read_text().splitlines():
        json.loads(line)


def test_buffer_unwritable_path(tmp_path):
    buf = ExecutionBuffer(tmp_path / "missing" / "x.jsonl")
    with pytest.raises(BufferIOError):
        buf.append(_rec("a"))


def test_buffer_concurrent_appends(tmp_path):
    buf = ExecutionBuffer(tmp_path / "e.jsonl")

    def work(k):
        for i in range(50):
            buf.append(_rec(f"q{k}", 1.0 + i))

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(buf) == 200
    assert ExecutionBuffer.replay(buf.path).records == buf.records


def test_record_roundtrip():
    r = _rec("a", 3.25, censored=True, step=2)
    assert ExecutionRecord.from_dict(json.loads(json.dumps(r.to_dict()))) == r


def test_execute_records_icp():
    q = _q()
    cp = optimize(q)
    rec = execute(q, cp, None, source=Source.VALIDATION, step_index=3)
    assert rec.icp == extract_icp(cp) and rec.source is Source.VALIDATION and rec.step_index == 3
