import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from oracles import fd_relative_error, planted_pairs
from plandoctor import aam
from plandoctor.aam import (AamConfig, AdvantageModel, TrainingPair, asymmetric_loss, asymmetric_loss_grad,
                            make_pairs, select_best)
from plandoctor.actions import reachable
from plandoctor.executor import ExecutionRecord, Source, true_latency
from plandoctor.nets import DTYPE, FeatureBatch, batch_features, param_vector
from plandoctor.plan import extract_icp
from plandoctor.planbook import PlanBook
from plandoctor.reward import adv_score


@pytest.fixture(scope="module")
def plans(small_workload):
    """(query, icp) pairs reachable within two edits of each expert plan."""
    book = PlanBook()
    out = []
    for q in small_workload.queries:
        origin = extract_icp(book.original(q))
        for icp, _ in list(reachable(origin, q, 2).values())[:40]:
            out.append((q, icp))
    return book, out


def _model(wl, **kw):
    return AdvantageModel(wl.schema.n_tables, len(wl.schema.edges), AamConfig(**kw))


def test_identical_inputs_identical_vectors(small_workload, plans):
    book, ps = plans
    m = _model(small_workload)
    q, icp = ps[3]
    f = book.features(q, icp, 1)
    assert np.array_equal(aam.encode_state(m, f), aam.encode_state(m, f))


def test_zero_parameters_zero_output(small_workload, plans):
    book, ps = plans
    m = _model(small_workload)
    with torch.no_grad():
        for p in m.encoder.parameters():
            p.zero_()
    q, icp = ps[0]
    assert not aam.encode_state(m, book.features(q, icp, 0)).any()


def test_node_permutation_invariance(small_workload, plans):
    book, ps = plans
    m = _model(small_workload)
    q, icp = ps[5]
    fb = batch_features([book.features(q, icp, 2)], m.max_height)
    perm = torch.as_tensor(np.random.default_rng(0).permutation(fb.nodes.shape[1]))
    shuffled = FeatureBatch(fb.nodes[:, perm], fb.attend[:, perm][:, :, perm], fb.valid[:, perm], fb.step)
    with torch.no_grad():
        assert torch.allclose(m.encoder(fb), m.encoder(shuffled), atol=1e-12)


def test_head_is_asymmetric_and_normalised(small_workload, plans):
    book, ps = plans
    m = _model(small_workload)
    q, icp = ps[0]
    f = book.features(q, icp, 0)
    p = aam.score_pair(m, f, f)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    with torch.no_grad():
        v = m.encoder(batch_features([f], m.max_height))
        assert m.head(v, v).abs().max() > 0


def test_loss_reduces_to_cross_entropy():
    cfg = AamConfig(epsilon=0.0, gamma_pos=0.0, gamma_neg=1e-300)
    probs = torch.tensor([[0.2, 0.5, 0.3]], dtype=DTYPE)
    loss = asymmetric_loss(probs, torch.tensor([1]), cfg)
    # negative terms carry zero smoothed weight when epsilon = 0
    assert loss.item() == pytest.approx(-np.log(0.5), rel=1e-12)


def test_loss_vanishes_at_one_hot():
    cfg = AamConfig(epsilon=0.0)
    probs = torch.tensor([[0.0, 1.0, 0.0]], dtype=DTYPE)
    assert asymmetric_loss(probs, torch.tensor([1]), cfg).item() == pytest.approx(0.0, abs=1e-12)


@given(st.lists(st.floats(-4, 4), min_size=3, max_size=3), st.integers(0, 2))
def test_gradient_matches_finite_differences(z, y):
    assert fd_relative_error(np.array(z), y, AamConfig()) < 1e-4


@given(st.lists(st.floats(-4, 4), min_size=3, max_size=3), st.integers(0, 2))
def test_gradient_matches_autograd(z, y):
    cfg = AamConfig()
    zt = torch.tensor(z, dtype=DTYPE, requires_grad=True)
    asymmetric_loss(torch.softmax(zt[None], dim=1), torch.tensor([y]), cfg).backward()
    assert np.allclose(zt.grad.numpy(), asymmetric_loss_grad(np.array(z), y, cfg), rtol=1e-9, atol=1e-12)


def _records(q, book, lats_censored):
    recs = []
    for icp, (lat, cens) in lats_censored:
        recs.append(ExecutionRecord(q.query_id, icp, lat, cens, Source.EXPLORATION, 1))
    return recs


def test_make_pairs_two_records(plans):
    book, ps = plans
    q = ps[0][0]
    icps = [icp for qq, icp in ps if qq is q][:2]
    recs = _records(q, book, [(icps[0], (100.0, False)), (icps[1], (40.0, False))])
    pairs = make_pairs(q, recs, book, np.random.default_rng(0))
    labels = {(p.ident[0], p.ident[2]): p.label for p in pairs}
    assert len(pairs) >= 2
    assert labels[(icps[0].key, icps[1].key)] == 1
    assert labels[(icps[1].key, icps[0].key)] == 0


def test_make_pairs_drop_both_censored(plans):
    book, ps = plans
    q = ps[0][0]
    icps = [icp for qq, icp in ps if qq is q][:2]
    recs = _records(q, book, [(icps[0], (150.0, True)), (icps[1], (150.0, True))])
    assert make_pairs(q, recs, book, np.random.default_rng(0)) == []


def test_make_pairs_censored_uses_threshold(plans):
    book, ps = plans
    q = ps[0][0]
    icps = [icp for qq, icp in ps if qq is q][:2]
    recs = _records(q, book, [(icps[0], (150.0, True)), (icps[1], (30.0, False))])
    pairs = make_pairs(q, recs, book, np.random.default_rng(0))
    lab = {(p.ident[0], p.ident[2]): p.label for p in pairs}
    assert lab[(icps[0].key, icps[1].key)] == adv_score(150.0, 30.0) == 2


def test_train_rejects_empty(small_workload):
    with pytest.raises(ValueError):
        aam.train(_model(small_workload), [])


def test_asymmetry_overfit(small_workload, plans):
    book, ps = plans
    (qa, a), (qb, b) = ps[0], ps[7]
    fa, fb = book.features(qa, a, 1), book.features(qb, b, 1)
    pairs = [TrainingPair(fa, fb, 2), TrainingPair(fb, fa, 0)]
    m = _model(small_workload, lr=5e-3)
    res = aam.train(m, pairs, epochs=300, target_accuracy=1.0)
    assert res.accuracy >= 0.99


def test_planted_utility_learnable(small_workload, plans):
    book, ps = plans
    pairs = planted_pairs(book, ps)
    assert len({p.label for p in pairs}) == 3
    m = _model(small_workload, lr=3e-3)
    res = aam.train(m, pairs, epochs=200, target_accuracy=0.9)
    assert res.accuracy >= 0.9 and res.epochs <= 200


def test_training_reproducible(small_workload, plans):
    book, ps = plans
    pairs = planted_pairs(book, ps, n_pairs=60)
    a, b = _model(small_workload), _model(small_workload)
    aam.train(a, pairs, epochs=3)
    aam.train(b, pairs, epochs=3)
    assert np.array_equal(param_vector(a), param_vector(b))


def test_select_best_trivia(plans):
    book, ps = plans
    q, icp = ps[0]
    f = book.features(q, icp, 0)
    assert select_best(lambda l, r: 0, [f]) == 0
    assert select_best(lambda l, r: 0, [f, f, f]) == 0


def test_select_best_with_oracle_finds_argmin(plans):
    book, ps = plans
    rng = np.random.default_rng(1)
    for q in {q.query_id: q for q, _ in ps}.values():
        cands = [icp for qq, icp in ps if qq is q]
        cands = [cands[0]] + [cands[i] for i in rng.choice(len(cands), size=min(4, len(cands)), replace=False)]
        lat = {id(book.features(q, c, 0)): true_latency(q, c) for c in cands}
        feats = [book.features(q, c, 0) for c in cands]

        def oracle(l, r):
            # perfect information: any strict improvement scores positive
            return 1 if lat[id(r)] < lat[id(l)] else 0

        i = select_best(oracle, feats)
        assert lat[id(feats[i])] == min(lat.values())


def test_params_roundtrip(tmp_path, small_workload, plans):
    book, ps = plans
    m = _model(small_workload)
    aam.save_params(m, tmp_path / "aam.params.json")
    back = aam.load_params(tmp_path / "aam.params.json")
    assert np.array_equal(param_vector(m), param_vector(back))
    q, icp = ps[2]
    f = book.features(q, icp, 1)
    assert np.array_equal(aam.score_pair(m, f, f), aam.score_pair(back, f, f))


def test_judge_matches_score_pair(small_workload, plans):
    from plandoctor.reward import PlanRef
    book, ps = plans
    m = _model(small_workload)
    q = ps[0][0]
    a, b = [icp for qq, icp in ps if qq is q][:2]
    j = aam.AamJudge(m, q, book)
    ra, rb = PlanRef(a, book.complete(q, a), 0), PlanRef(b, book.complete(q, b), 1)
    want = aam.score_pair(m, book.features(q, a, 0), book.features(q, b, 1))
    assert np.allclose(j.probs(ra, rb), want, atol=1e-12)
    assert j.score(ra, rb) == int(np.argmax(want))
