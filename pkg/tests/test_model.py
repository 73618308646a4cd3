import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cenet import autodiff as ad
from cenet import model
from cenet.autodiff import Tensor
from cenet.history import ConfigError, contexts_for_split
from cenet.model import (Batch, HyperParams, ModelParams, ce_loss, combined_loss, historical_scores,
                         nonhistorical_scores, query_embedding, stage1_loss, supcon_loss, train_stage1)
from cenet.synthetic import recurrent_tkg

from oracles import central_difference, direct_supcon, mp_ce_term, relative_error, scalar_scores
from scenarios import full_loss_gradient_errors, make_context, toy_contexts


def _batch(contexts=None, lam=2.0, n=4):
    return Batch.from_contexts(contexts or toy_contexts(), lam, n, 2)


def _zero_params(n=4, r=2, d=3):
    params = ModelParams.init(n, r, d)
    for p in params.all():
        p.data[...] = 0.0
    return params


def test_zero_parameters_reduce_heads_to_copy_term():
    batch, params = _batch(), _zero_params()
    h_his = historical_scores(batch, params).data
    h_nhis = nonhistorical_scores(batch, params).data
    assert np.array_equal(h_his, batch.z)
    assert np.array_equal(h_nhis, -batch.z)
    assert not (h_his + h_nhis).any()


def test_orthonormal_entities_expose_encoder_coordinates():
    params = ModelParams.init(4, 2, 4, seed=1)
    params.E.data[...] = np.eye(4)
    batch = _batch()
    hidden = np.tanh(np.concatenate([params.E.data[batch.s], params.P.data[batch.p]], axis=1)
                     @ params.W_his.data.T + params.b_his.data)
    np.testing.assert_allclose(historical_scores(batch, params).data - batch.z, hidden, atol=1e-15)


@pytest.mark.parametrize("head, sign", [("his", 1.0), ("nhis", -1.0)])
def test_heads_match_scalar_loop_oracle(head, sign):
    params = ModelParams.init(4, 2, 3, seed=7)
    batch = _batch()
    fn = historical_scores if head == "his" else nonhistorical_scores
    got = fn(batch, params).data
    W, b = getattr(params, f"W_{head}").data.tolist(), getattr(params, f"b_{head}").data.tolist()
    E, P = params.E.data.tolist(), params.P.data.tolist()
    for i in range(len(batch)):
        expect = scalar_scores(E, P, W, b, int(batch.s[i]), int(batch.p[i]), batch.z[i].tolist(), sign)
        np.testing.assert_allclose(got[i], expect, atol=1e-12, rtol=0)


def test_out_of_range_ids_rejected():
    with pytest.raises(IndexError, match="subject"):
        Batch.from_contexts([make_context(9, 0, 1, 1, {})], 2.0, 4, 2)
    with pytest.raises(IndexError, match="relation"):
        Batch.from_contexts([make_context(0, 5, 1, 1, {})], 2.0, 4, 2)


def test_ce_uniform_case_is_zero():
    zeros = Tensor(np.zeros((3, 2)))
    assert abs(ce_loss(zeros, zeros, np.array([0, 1, 1])).item()) <= 1e-12


def test_ce_negative_when_both_heads_are_confident():
    scores = Tensor(np.array([[50.0, 0.0, 0.0]]))
    loss = ce_loss(scores, scores, np.array([0])).item()
    assert loss < 0
    assert loss == pytest.approx(-math.log(2.0), abs=1e-12)


def test_ce_matches_extended_precision():
    rng = np.random.default_rng(3)
    h1, h2 = rng.normal(size=(1, 5)) * 3, rng.normal(size=(1, 5)) * 3
    got = ce_loss(Tensor(h1), Tensor(h2), np.array([2])).item()
    assert abs(got - mp_ce_term(h1[0].tolist(), h2[0].tolist(), 2)) <= 1e-10


def test_ce_single_head_is_plain_cross_entropy():
    h = np.array([[1.0, 2.0, 0.5]])
    expect = -(h[0, 1] - np.log(np.exp(h[0]).sum()))
    assert ce_loss(Tensor(h), None, np.array([1])).item() == pytest.approx(expect, abs=1e-12)
    with pytest.raises(ValueError):
        ce_loss(None, None, np.array([0]))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (2, 6), elements=st.floats(-60, 60)), st.integers(0, 5))
def test_ce_terms_bounded_below_by_minus_log_two(scores, o):
    loss = ce_loss(Tensor(scores[:1]), Tensor(scores[1:]), np.array([o])).item()
    assert loss >= -math.log(2.0) - 1e-12


def test_query_embedding_unit_norm_and_deterministic():
    params = ModelParams.init(4, 2, 5, seed=2)
    ctx = toy_contexts()
    batch = _batch(ctx + [ctx[0]])
    V = query_embedding(batch, params).data
    np.testing.assert_allclose(np.linalg.norm(V, axis=1), 1.0, atol=1e-12)
    assert np.array_equal(V[0], V[-1])


def test_query_embedding_gradient_wrt_frequency_projection():
    params = ModelParams.init(4, 2, 3, seed=5)
    batch = _batch()
    w = np.random.default_rng(6).normal(size=(4, 3))
    ad.backward(ad.sum_op(query_embedding(batch, params), w))

    def f():
        with ad.no_grad():
            return float((query_embedding(batch, params).data * w).sum())

    fd = central_difference(f, params.W_F.data)
    assert relative_error(params.W_F.grad, fd).max() < 1e-3


def test_supcon_forced_values():
    v = Tensor(np.array([[1.0, 0.0], [0.6, 0.8]]))
    assert abs(supcon_loss(v, [True, True], 0.1).item()) <= 1e-12
    assert supcon_loss(v, [True, False], 0.1).item() == 0.0


def test_supcon_degenerate_batch_counts_warning():
    before = model.degenerate_supcon_batches
    assert supcon_loss(Tensor(np.array([[1.0, 0.0]])), [True], 0.1).item() == 0.0
    assert model.degenerate_supcon_batches == before + 1


def _unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_supcon_matches_direct_evaluation():
    V = _unit_rows(np.random.default_rng(8), 4, 5)
    labels = [True, True, False, False]
    got = supcon_loss(Tensor(V), np.array(labels), 0.1).item()
    assert abs(got - direct_supcon(V.tolist(), labels, 0.1)) <= 1e-10


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.booleans(), min_size=2, max_size=8))
def test_supcon_rotation_invariant(seed, labels):
    rng = np.random.default_rng(seed)
    V = _unit_rows(rng, len(labels), 4)
    Q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    a = supcon_loss(Tensor(V), np.array(labels), 0.5).item()
    b = supcon_loss(Tensor(V @ Q), np.array(labels), 0.5).item()
    assert a == pytest.approx(b, abs=1e-9)


def test_combined_loss_examples():
    assert combined_loss(5.0, 10.0, 1.0) == 5.0
    assert combined_loss(5.0, 10.0, 0.0) == 10.0
    assert combined_loss(5.0, 10.0, 0.2) == pytest.approx(9.0, abs=1e-12)
    for alpha in (-0.1, 1.5):
        with pytest.raises(ConfigError):
            combined_loss(1.0, 1.0, alpha)


def test_changing_lambda_shifts_scores_only():
    params = ModelParams.init(4, 2, 3, seed=9)
    contexts = toy_contexts()
    w = np.random.default_rng(1).normal(size=(4, 4))
    grads, scores = [], []
    for lam in (1.0, 3.5):
        batch = _batch(contexts, lam)
        for p in params.all():
            p.zero_grad()
        h = historical_scores(batch, params)
        ad.backward(ad.sum_op(h, w))
        scores.append((h.data, batch.z))
        grads.append({p.name: p.grad.copy() for p in params.stage1()})
    (h1, z1), (h2, z2) = scores
    np.testing.assert_allclose(h2 - h1, np.sign(z1) * 2.5, atol=1e-12)
    for name in grads[0]:
        assert np.array_equal(grads[0][name], grads[1][name])


def test_full_objective_gradients_match_finite_differences():
    errors = full_loss_gradient_errors(seed=0)
    assert max(errors.values()) < 1e-3, errors


def test_heads_setting_drops_a_head():
    params = ModelParams.init(4, 2, 3, seed=4)
    batch = _batch()
    _, ce_his, _ = stage1_loss(batch, params, HyperParams(d=3, heads="his"))
    expect = ce_loss(historical_scores(batch, params), None, batch.o).item()
    assert ce_his.item() == pytest.approx(expect, abs=1e-12)


def _recurrent_contexts():
    ds = recurrent_tkg(num_entities=30, num_relations=4, num_granules=12, pairs_per_granule=20, seed=3)
    return ds, contexts_for_split(ds, "train")


def _train(ds, contexts, hp, **kw):
    params = ModelParams.init(ds.num_entities, ds.num_relations_total, hp.d, seed=hp.seed)
    log = train_stage1(contexts, params, hp, **kw)
    return params, log


def test_training_loss_decreases_over_five_epochs():
    ds, contexts = _recurrent_contexts()
    hp = HyperParams(d=32, batch_size=64, lr=0.01, stage1_epochs=5)
    _, log = _train(ds, contexts, hp)
    losses = [r["combined"] for r in log]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
    assert {"epoch", "ce", "sup", "combined", "seconds"} <= set(log[0])


def test_alpha_one_matches_disabled_contrastive_term():
    ds, contexts = _recurrent_contexts()
    hp = HyperParams(d=16, alpha=1.0, batch_size=64, lr=0.01, stage1_epochs=2)
    a, _ = _train(ds, contexts, hp)
    b, _ = _train(ds, contexts, hp, use_supcon=False)
    for name in model.STAGE1_NAMES:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes(), name


def test_same_seed_same_parameters():
    ds, contexts = _recurrent_contexts()
    hp = HyperParams(d=16, batch_size=64, lr=0.01, stage1_epochs=1, seed=5)
    a, _ = _train(ds, contexts, hp)
    b, _ = _train(ds, contexts, hp)
    assert all(a.params[n].data.tobytes() == b.params[n].data.tobytes() for n in model.STAGE1_NAMES)


def test_stage1_leaves_classifier_untouched():
    ds, contexts = _recurrent_contexts()
    hp = HyperParams(d=8, batch_size=128, stage1_epochs=1)
    params = ModelParams.init(ds.num_entities, ds.num_relations_total, hp.d)
    before = params.clf_w.data.copy()
    train_stage1(contexts, params, hp)
    assert np.array_equal(before, params.clf_w.data)


def test_non_finite_loss_aborts_with_batch_dump(tmp_path):
    ds, contexts = _recurrent_contexts()
    hp = HyperParams(d=8, batch_size=64, stage1_epochs=1)
    params = ModelParams.init(ds.num_entities, ds.num_relations_total, hp.d)
    params.E.data[0, 0] = np.nan
    with pytest.raises(model.TrainingError, match="nan_batch.json"):
        train_stage1(contexts, params, hp, dump_dir=tmp_path)
    assert (tmp_path / "nan_batch.json").exists()


def test_hyperparams_validation_and_round_trip():
    hp = HyperParams(d=8, alpha=0.3)
    assert HyperParams.from_dict(hp.to_dict()) == hp
    with pytest.raises(ConfigError):
        HyperParams.from_dict({"dim": 3})
    for bad in (dict(d=0), dict(lam=0.0), dict(tau=-1.0), dict(heads="x"), dict(alpha=2.0)):
        with pytest.raises(ConfigError):
            HyperParams(**bad).validate()
