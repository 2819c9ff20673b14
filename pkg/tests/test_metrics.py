import pytest
from hypothesis import given, strategies as st

from oracles import independent_optimum
from plandoctor.catalog import build_workload
from plandoctor.expert import optimize
from plandoctor.metrics import StateExplosion, gmrl, reachable_optimum, step_histogram, wrl
from plandoctor.plan import extract_icp


def test_wrl_examples():
    assert wrl([3, 4], [3, 4]) == 1.0
    assert wrl([50, 50], [100, 100]) == 0.5
    assert wrl([50, 200], [100, 100]) == 1.25


def test_gmrl_examples():
    assert gmrl([5, 7], [5, 7]) == 1.0
    assert gmrl([50, 200], [100, 100]) == pytest.approx(1.0, abs=1e-15)
    assert gmrl([25, 25], [100, 100]) == pytest.approx(0.25, abs=1e-15)


@pytest.mark.parametrize("a,b", [([1.0], [1.0, 2.0]), ([], []), ([0.0], [1.0]), ([1.0], [-1.0])])
def test_metric_errors(a, b):
    with pytest.raises(ValueError):
        wrl(a, b)
    with pytest.raises(ValueError):
        gmrl(a, b)


@given(st.lists(st.tuples(st.floats(0.1, 1e4), st.floats(0.1, 1e4)), min_size=1, max_size=20), st.randoms())
def test_gmrl_order_invariant(pairs, rnd):
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    a = gmrl(*zip(*pairs))
    b = gmrl(*zip(*shuffled))
    assert a == pytest.approx(b, rel=1e-12)


def test_step_histogram():
    assert step_histogram([0, 2, 2, 1, 0, 0]) == {0: 3, 1: 1, 2: 2}


@pytest.fixture(scope="module")
def wl():
    return build_workload(6, 6, n_tables=6, n_queries=10, tables_per_query=(3, 5))


def test_maxsteps_zero_is_original(wl):
    for q in wl.queries:
        cp, lat, steps = reachable_optimum(q, 0)
        assert extract_icp(cp) == extract_icp(optimize(q)) and steps == 0


def test_monotone_in_maxsteps(wl):
    for q in wl.queries:
        lats = [reachable_optimum(q, k)[1] for k in range(4)]
        assert all(b <= a for a, b in zip(lats, lats[1:]))


def test_zero_sigma_original_is_optimum():
    wl0 = build_workload(2, 2, n_tables=6, n_queries=6, tables_per_query=(3, 5), sigma_est=0.0)
    for q in wl0.queries:
        assert reachable_optimum(q, 3)[2] == 0


def test_state_cap(wl):
    q = max(wl.queries, key=lambda q: q.n_tables)
    with pytest.raises(StateExplosion):
        reachable_optimum(q, 3, max_states=5)


def test_oracle_matches_independent_enumeration(wl):
    for q in wl.queries:
        if q.n_tables > 5:
            continue
        for k in (1, 3):
            cp, lat, steps = reachable_optimum(q, k)
            want_lat, want_d, want_key = independent_optimum(q, k)
            assert (lat, steps, extract_icp(cp).key) == (want_lat, want_d, want_key)
