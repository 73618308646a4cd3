import io
import json
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cenet.classifier import build_mask
from cenet.evaluation import (VARIANTS, EvaluationError, InferenceConfig, apply_mask, ablation_variant,
                              combined_distribution, evaluate, filtered_rank, predict, rank_metrics)
from cenet.model import HyperParams, ModelParams

from oracles import brute_force_rank, mp_softmax
from scenarios import brute_force_known, make_context, trained_toy_model


@pytest.fixture(scope="module")
def toy():
    return trained_toy_model()


def test_combined_distribution_examples():
    np.testing.assert_allclose(combined_distribution(np.zeros(4), np.zeros(4)), [0.25] * 4, atol=1e-15)
    P = combined_distribution(np.array([100.0, 0, 0]), np.array([0, 100.0, 0]))
    assert P[0] == pytest.approx(0.5, abs=1e-12) and P[1] == pytest.approx(0.5, abs=1e-12)
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=6), rng.normal(size=6)
    expect = 0.5 * (np.array(mp_softmax(a.tolist())) + np.array(mp_softmax(b.tolist())))
    np.testing.assert_allclose(combined_distribution(a, b), expect, atol=1e-12, rtol=0)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (2, 3, 7), elements=st.floats(-300, 300)))
def test_combined_distribution_normalized(x):
    np.testing.assert_allclose(combined_distribution(x[0], x[1]).sum(axis=-1), 1.0, atol=1e-12)


def test_apply_mask_examples():
    P = np.array([0.5, 0.5])
    np.testing.assert_allclose(apply_mask(P, np.array([True, False]), "soft") / P, [0.7311, 0.2689], atol=1e-4)
    P = np.array([0.2, 0.3, 0.5])
    assert np.array_equal(apply_mask(P, np.ones(3, bool), "hard"), P)
    assert np.array_equal(apply_mask(P, np.zeros(3, bool), "hard"), P)
    assert apply_mask(P, np.array([True, False, True]), "hard").tolist() == [0.2, 0.0, 0.5]
    assert np.array_equal(apply_mask(P, None, "none"), P)
    block = apply_mask(np.vstack([P, P]), np.array([[False] * 3, [True, False, False]]), "hard")
    assert block.tolist() == [[0.2, 0.3, 0.5], [0.2, 0.0, 0.0]]
    with pytest.raises(EvaluationError):
        apply_mask(P, np.ones(3, bool), "fuzzy")


def test_predict_tie_break_and_scan():
    assert predict(np.array([0.1, 0.7, 0.2])) == 1
    assert predict(np.full(5, 0.2)) == 0
    rng = np.random.default_rng(2)
    for _ in range(200):
        x = rng.integers(0, 4, size=8).astype(float)
        best = 0
        for i in range(len(x)):
            if x[i] > x[best]:
                best = i
        assert predict(x) == best
    with pytest.raises(EvaluationError):
        predict(np.zeros(0))


def test_filtered_rank_examples():
    scores = np.array([0.5, 0.4, 0.3])
    assert filtered_rank(scores, 2, {1}, "static") == 2
    assert filtered_rank(scores, 2, {1}, "raw") == 3
    assert filtered_rank(scores, 0, (), "raw") == 1
    assert filtered_rank(np.array([0.3, 0.3]), 1, (), "raw") == 1


@pytest.mark.parametrize("mode", ["raw", "static", "time_aware"])
def test_filtered_rank_matches_brute_force(mode):
    rng = np.random.default_rng(["raw", "static", "time_aware"].index(mode))
    for _ in range(300):
        n = int(rng.integers(1, 12))
        scores = rng.integers(0, 5, size=n) / 4.0
        true_o = int(rng.integers(n))
        known = set(rng.choice(n, size=int(rng.integers(0, n + 1)), replace=False).tolist())
        removed = set() if mode == "raw" else known
        assert filtered_rank(scores, true_o, known, mode) == brute_force_rank(scores, true_o, removed)


def test_rank_metrics_examples():
    m = rank_metrics([1, 2, 4])
    assert m["mrr"] == pytest.approx(0.5833333333, abs=1e-9)
    assert (m["hits@1"], m["hits@3"], m["hits@10"]) == (pytest.approx(1 / 3), pytest.approx(2 / 3), 1.0)
    assert all(v == 1.0 for k, v in rank_metrics([1, 1, 1]).items() if k != "count")


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=40))
def test_metric_bounds(ranks):
    m = rank_metrics(ranks)
    assert 0 < m["mrr"] <= 1
    assert m["mrr"] >= m["hits@1"]
    assert m["hits@1"] <= m["hits@3"] <= m["hits@10"]


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 12))
def test_mask_properties_on_random_instances(seed, n):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n))
    H = set(np.flatnonzero(rng.random(n) < 0.4).tolist())
    true_o = int(rng.integers(n))
    gt = build_mask(H, true_o in H, n)
    assert filtered_rank(apply_mask(P, gt, "ground_truth"), true_o, (), "raw") <= filtered_rank(P, true_o, (), "raw")
    B = build_mask(H, bool(rng.integers(2)), n)
    soft = apply_mask(P, B, "soft")
    for i in range(n):
        for j in range(n):
            if B[i] == B[j]:
                assert (P[i] < P[j]) == (soft[i] < soft[j])


def test_ablation_variants():
    soft = ablation_variant("soft-mask")
    assert soft.inference == InferenceConfig() and soft.heads == "both" and soft.train_stage2
    assert ablation_variant("no-CL").alpha == 1.0 and not ablation_variant("no-CL").train_stage2
    assert ablation_variant("no-stage1").train_stage2
    assert ablation_variant("his-only").apply(HyperParams()).heads == "his"
    assert ablation_variant("GT-mask").inference.mask_mode == "ground_truth"
    assert len(VARIANTS) == 9
    with pytest.raises(EvaluationError, match="valid names: .*soft-mask"):
        ablation_variant("cenet-xl")


def test_inference_config_validation():
    with pytest.raises(EvaluationError):
        InferenceConfig(mask_mode="fuzzy").validate()
    with pytest.raises(EvaluationError):
        InferenceConfig(filter_mode="loose").validate()


def test_evaluate_report_and_directions(toy):
    ds, hp, params, contexts, facts = toy
    report = evaluate(contexts, params, hp, InferenceConfig(), facts, ds.num_relations_raw)
    payload = report.to_json()
    assert payload["object"]["count"] == payload["subject"]["count"] == len(ds.test)
    assert payload["combined"]["count"] == 2 * len(ds.test)
    assert 0 <= payload["classifier_accuracy"] <= 1
    assert not payload["diagnostic_only"]
    assert (report.ranks >= 1).all() and (report.ranks <= ds.num_entities).all()
    gt = evaluate(contexts, params, hp, InferenceConfig("ground_truth"), facts, ds.num_relations_raw)
    assert gt.to_json()["diagnostic_only"]


def test_ground_truth_mask_never_hurts(toy):
    ds, hp, params, contexts, facts = toy
    for mode in ("raw", "static", "time_aware"):
        none = evaluate(contexts, params, hp, InferenceConfig("none", mode), facts, ds.num_relations_raw)
        gt = evaluate(contexts, params, hp, InferenceConfig("ground_truth", mode), facts, ds.num_relations_raw)
        assert (gt.ranks <= none.ranks).all()


def test_random_mask_reproducible(toy):
    ds, hp, params, contexts, facts = toy
    runs = [evaluate(contexts, params, hp, InferenceConfig("random", seed=4), facts, ds.num_relations_raw)
            for _ in range(2)]
    assert np.array_equal(runs[0].ranks, runs[1].ranks)


def test_missing_classifier_is_an_error(toy):
    ds, hp, _, contexts, facts = toy
    fresh = ModelParams.init(ds.num_entities, ds.num_relations_total, hp.d)
    for mode in ("hard", "soft"):
        with pytest.raises(EvaluationError, match="classifier"):
            evaluate(contexts, fresh, hp, InferenceConfig(mode), facts, ds.num_relations_raw)
    evaluate(contexts, fresh, hp, InferenceConfig("none"), facts, ds.num_relations_raw)
    with pytest.raises(EvaluationError):
        evaluate([], fresh, hp, InferenceConfig("none"), facts, ds.num_relations_raw)


@pytest.mark.parametrize("mode", ["raw", "static", "time_aware"])
def test_report_matches_reranking_of_dumped_scores(toy, mode):
    ds, hp, params, contexts, facts = toy
    sink = io.StringIO()
    report = evaluate(contexts, params, hp, InferenceConfig("soft", mode), facts, ds.num_relations_raw,
                      dump_top_k=ds.num_entities, dump_file=sink)
    rows = [json.loads(line) for line in sink.getvalue().splitlines()]
    assert len(rows) == len(contexts)
    for row, rank in zip(rows, report.ranks):
        scores = np.zeros(ds.num_entities)
        for entity, score in row["top"]:
            scores[entity] = score
        removed = brute_force_known(facts, row["s"], row["p"], row["t"], mode)
        assert brute_force_rank(scores, row["true_o"], removed) == rank


def _peak_bytes(num_entities):
    d = 8
    params = ModelParams.init(num_entities, 2, d)
    hp = HyperParams(d=d)
    ctx = [make_context(0, 0, 1, 3, {1: 2, 5: 1})]
    tracemalloc.start()
    evaluate(ctx, params, hp, InferenceConfig("none", "raw"), [], 1, batch_size=1)
    peak = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    return peak


def test_single_query_inference_memory_is_linear_in_entities():
    small, large = _peak_bytes(2_000), _peak_bytes(16_000)
    assert large < 8 * small * 1.5
    assert large < 64 * 16_000 * 8  # a few dozen |E|-length float vectors at most
