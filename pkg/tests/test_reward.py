import pytest
from hypothesis import assume, given, strategies as st

from plandoctor.plan import CompletePlan, IncompletePlan, JoinMethod
from plandoctor.reward import (DiscretizationSpec, EpisodeContext, PlanRef, RewardConfig, adv_initial,
                               discretize, episode_bounty, episode_bounty_from_scores, penalty, step_bounty,
                               step_reward)

SPEC = DiscretizationSpec()
CFG = RewardConfig()


def ref(lat, tag=0, step=0):
    """Plan stand-in: only the key (via order) and latency matter to the reward."""
    order = (0, 1, 2) if tag == 0 else {1: (1, 0, 2), 2: (2, 1, 0), 3: (0, 2, 1), 4: (1, 2, 0)}[tag]
    icp = IncompletePlan("q", order, (JoinMethod.HASH,) * 2)
    cp = CompletePlan("q", order, icp.methods, (1.0,) * 5, (1.0,) * 5, 5.0)
    return PlanRef(icp, cp, step, lat)


def ctx(orig, qb, pb, eb=None):
    c = EpisodeContext(None, ref(orig, 0), ref(qb, 1), ref(pb, 2))
    if eb is not None:
        c.episode_best = ref(eb, 3)
    return c


@pytest.mark.parametrize("l,r,want", [(100, 100, 0.0), (100, 50, 0.5), (100, 10, 0.9)])
def test_adv_initial(l, r, want):
    assert adv_initial(l, r) == pytest.approx(want, abs=1e-15)


def test_adv_initial_rejects_nonpositive():
    with pytest.raises(ValueError):
        adv_initial(0.0, 1.0)


@pytest.mark.parametrize("x,want", [(0.05, 0), (0.5, 1), (0.75, 1), (0.76, 2), (-3.0, 0), (1.0, 2)])
def test_discretize_boundaries(x, want):
    assert discretize(x) == want


def test_discretize_rejects_above_one():
    with pytest.raises(ValueError):
        discretize(1.01)


@given(st.floats(-10, 1), st.floats(-10, 1))
def test_discretize_monotone(a, b):
    lo, hi = sorted((a, b))
    assert discretize(lo) <= discretize(hi)


def test_midpoints():
    assert SPEC.midpoint(2) == pytest.approx(0.4, abs=1e-15)
    assert SPEC.midpoint(3) == pytest.approx(0.875, abs=1e-15)
    with pytest.raises(AssertionError):
        SPEC.midpoint(1)


def test_step_bounty_and_penalty():
    assert [step_bounty(s) for s in (0, 1, 2)] == [0.0, 0.5, 1.0]
    assert penalty(2, 2) == 0.0
    assert penalty(1, 2) == -2.0
    assert penalty(1, 3) == -4.0
    with pytest.raises(ValueError):
        penalty(3, 2)


def test_episode_bounty_case_one():
    c = ctx(100, 50, 60, 40)
    # adv1 = discretize(0.2) = 1, eb_qb = 0.5 * 12
    want = 0.4 * (12 - 6.0) + 6.0
    assert episode_bounty(c) == pytest.approx(want, abs=1e-12)
    assert episode_bounty(c) == pytest.approx(8.4, abs=1e-12)


def test_episode_bounty_case_one_top_score():
    c = ctx(100, 50, 60, 4)
    assert episode_bounty(c) == pytest.approx(0.875 * 6 + 6, abs=1e-12)
    assert episode_bounty(c) == pytest.approx(11.25, abs=1e-12)


def test_episode_bounty_case_two():
    # episode best ties known best but beats perceived best by 25%
    c = ctx(100, 50, 80, 50)
    eb_qb, eb_pb = 6.0, 0.2 * 12
    assert episode_bounty(c) == pytest.approx(0.4 * (eb_qb - eb_pb) + eb_pb, abs=1e-12)


def test_episode_bounty_case_three_zero():
    c = ctx(100, 100, 100, 100)
    assert episode_bounty(c) == 0.0


def test_episode_bounty_case_three_scaled():
    c = ctx(100, 40, 40, 60)
    # adv3 = discretize(0.4) = 1, eb_pb = 0.6 * 12
    assert episode_bounty(c) == pytest.approx(1 / 2 * 7.2, abs=1e-12)


@given(st.floats(1, 1e6), st.floats(0.01, 1), st.floats(0.01, 1), st.floats(0.001, 2))
def test_episode_bounty_bounded(orig, qb_frac, pb_frac, eb_frac):
    qb = orig * qb_frac
    pb = max(qb, orig * pb_frac)
    assume(orig * eb_frac > 0)
    c = ctx(orig, qb, pb, orig * eb_frac)
    assert episode_bounty(c) <= CFG.eb_max + 1e-9


def test_from_scores_case_order():
    assert episode_bounty_from_scores(2, 0, 0, 6.0, 3.0) == pytest.approx(11.25)
    assert episode_bounty_from_scores(0, 0, 2, 6.0, 3.0) == pytest.approx(3.0)


def test_revisit_gets_penalty_only():
    c = ctx(100, 100, 100)
    out = step_reward(c, ref(10, 0, 1), 1, 0)
    assert not out.is_new
    assert out.reward == out.penalty == -2.0


def test_new_plan_minimal_steps_top_score():
    c = ctx(100, 100, 100)
    out = step_reward(c, ref(10, 4, 1), 1, 1)
    assert out.is_new and out.score == 2
    assert out.reward == 1.0
    assert c.episode_best.latency == 10


def test_last_step_adds_episode_bounty_once():
    c = ctx(100, 100, 100)
    step_reward(c, ref(90, 1, 1), 1, 1)
    out = step_reward(c, ref(50, 4, 3), 3, 2)
    # score vs episode best 100 -> 0.5 -> 1; episode best becomes 50
    assert out.step_bounty == 0.5
    assert out.episode_bounty == pytest.approx(0.4 * (12 - 0) + 0)
    assert out.reward == pytest.approx(out.penalty + out.step_bounty + out.episode_bounty, abs=0)
    again = step_reward(c, ref(50, 4, 3), 3, 2)
    assert again.episode_bounty == 0.0


@given(st.lists(st.tuples(st.floats(1, 200), st.integers(0, 4)), min_size=3, max_size=3))
def test_reward_decomposition(steps):
    c = ctx(100, 80, 90)
    for t, (lat, tag) in enumerate(steps, 1):
        ms = min(t, 1)
        out = step_reward(c, ref(lat, tag, t), t, ms)
        bounty = (out.step_bounty + (out.episode_bounty if t == 3 else 0.0)) if out.is_new else 0.0
        assert out.reward == out.penalty + bounty
        assert out.penalty <= 0
        if t < 3:
            assert out.episode_bounty == 0.0


def test_spec_validation():
    with pytest.raises(ValueError):
        DiscretizationSpec((0.5, 0.2))
    with pytest.raises(ValueError):
        RewardConfig(gamma=0)
