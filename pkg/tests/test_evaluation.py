import itertools
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protomil.dataio import FeatureBag
from protomil.evaluation import (
    EvalReport,
    attention_auc,
    confusion_matrix,
    dump_bag,
    evaluate_model,
    export_heatmap,
    gt_vs_normal,
    macro_f1,
    macro_f1_from_confusion,
    minmax,
    ovr_auc_macro,
    read_heatmap_csv,
    report_from_dumps,
    roc_auc,
)
from protomil.models import init_params
from protomil.synth import SynthConfig, class_means, generate_dataset


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def brute_f1(preds, gts, n_classes):
    out = []
    for c in range(n_classes):
        tp = sum(p == c and g == c for p, g in zip(preds, gts))
        fp = sum(p == c and g != c for p, g in zip(preds, gts))
        fn = sum(p != c and g == c for p, g in zip(preds, gts))
        out.append(0.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(out) / n_classes


def test_macro_f1_examples():
    assert macro_f1([0, 1, 1], [0, 1, 1], 2) == 1.0
    assert macro_f1([0, 0, 1, 1], [0, 1, 0, 1], 2) == 0.5
    assert macro_f1([0, 0, 0], [0, 0, 0], 2) == 0.5


def test_macro_f1_errors():
    with pytest.raises(ValueError):
        macro_f1([], [], 2)
    with pytest.raises(ValueError):
        macro_f1([0], [0, 1], 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5).flatmap(
    lambda c: st.tuples(st.just(c), st.lists(st.tuples(st.integers(0, c - 1), st.integers(0, c - 1)), min_size=1, max_size=40))
))
def test_macro_f1_brute_force(case):
    c, pairs = case
    preds, gts = zip(*pairs)
    cm = confusion_matrix(preds, gts, c)
    assert (cm.sum(axis=1) == np.bincount(gts, minlength=c)).all()
    assert macro_f1(preds, gts, c) == pytest.approx(brute_f1(preds, gts, c), abs=1e-15)
    assert macro_f1_from_confusion(cm) == macro_f1(preds, gts, c)


def test_roc_auc_examples():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.5] * 4, [0, 1, 0, 1]) == 0.5
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_roc_auc_single_class_nan(caplog):
    with caplog.at_level(logging.WARNING):
        assert math.isnan(roc_auc([0.1, 0.2], [1, 1]))
    assert "undefined" in caplog.text


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=60))
def test_roc_auc_brute_force_with_ties(points):
    scores, labels = zip(*points)
    if len(set(labels)) < 2:
        return
    assert roc_auc(scores, labels) == brute_auc(scores, labels)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_roc_auc_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal(30)
    labels = rng.integers(0, 2, 30)
    labels[:2] = [0, 1]
    assert roc_auc(scores, labels) == roc_auc(np.exp(3 * scores) + 1, labels)


def test_ovr_examples():
    gts = np.array([0, 1, 2, 0])
    assert ovr_auc_macro(np.eye(3)[gts], gts, 3) == 1.0
    assert ovr_auc_macro(np.full((4, 3), 1 / 3), gts, 3) == 0.5


def test_ovr_three_class_table():
    scores = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.2, 0.7], [0.4, 0.4, 0.2], [0.3, 0.3, 0.4]])
    gts = np.array([0, 1, 2, 1, 0])
    expect = np.mean([brute_auc(scores[:, c], gts == c) for c in range(3)])
    assert ovr_auc_macro(scores, gts, 3) == pytest.approx(expect, abs=1e-15)


def test_ovr_skips_absent_class():
    gts = np.array([0, 1, 0, 1])
    scores = np.random.default_rng(0).random((4, 3))
    expect = np.mean([brute_auc(scores[:, c], gts == c) for c in range(2)])
    assert ovr_auc_macro(scores, gts, 3) == pytest.approx(expect)
    with pytest.raises(ValueError):
        ovr_auc_macro(scores, np.zeros(4, int), 1)


def test_gt_vs_normal_examples():
    scores, preds = gt_vs_normal(np.array([[1.0, 0.0, 1.0], [2.0, 0.0, 1.0]]), 0, 2)
    assert scores.tolist() == [0.0, 1.0]
    assert preds.tolist() == [2, 0]
    with pytest.raises(ValueError):
        gt_vs_normal(np.zeros((1, 3)), 2, 2)


def test_gt_vs_normal_auc_six_instances():
    logits = np.array([[2.0, 0.1, 0.5], [0.2, 0.0, 1.0], [1.5, 0.0, 1.4],
                       [0.0, 0.0, 0.3], [0.9, 0.0, 0.1], [0.3, 0.0, 0.3]])
    labels = np.array([0, 2, 0, 2, 2, 0])
    scores, _ = gt_vs_normal(logits, 0, 2)
    assert roc_auc(scores, labels == 0) == brute_auc(scores.tolist(), (labels == 0).tolist())


def test_attention_auc_cases():
    labels = np.array([0, 2, 0, 2])
    assert attention_auc([0.4, 0.1, 0.3, 0.2], labels, 0, 2) == 1.0
    assert attention_auc([0.25] * 4, labels, 0, 2) == 0.5
    with pytest.raises(ValueError):
        attention_auc([0.5, 0.5], [2, 2], 2, 2)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_attention_auc_minmax_invariance(seed):
    rng = np.random.default_rng(seed)
    att = rng.dirichlet(np.ones(12))
    labels = np.where(rng.random(12) < 0.5, 0, 2)
    labels[:2] = [0, 2]
    assert attention_auc(att, labels, 0, 2) == roc_auc(att, labels == 0)


def test_minmax_constant():
    np.testing.assert_array_equal(minmax([3.0, 3.0]), [1.0, 1.0])
    np.testing.assert_array_equal(minmax([1.0, 3.0, 2.0]), [0.0, 1.0, 0.5])


def test_heatmap_pgm_pixels(tmp_path):
    bag = FeatureBag("h", np.zeros((4, 2)), coords=[[0, 0], [0, 1], [1, 0], [1, 1]])
    export_heatmap(bag, [0.0, 1.0, 0.5, 0.25], tmp_path / "h.pgm")
    raw = (tmp_path / "h.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n")
    assert list(raw[-4:]) == [0, 255, 127, 63]


def test_heatmap_constant_and_empty_cells(tmp_path):
    bag = FeatureBag("h", np.zeros((2, 2)), coords=[[0, 0], [1, 2]])
    export_heatmap(bag, [0.3, 0.3], tmp_path / "h.pgm")
    raw = (tmp_path / "h.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 2\n255\n")
    assert list(raw[-6:]) == [255, 0, 0, 0, 0, 255]


def test_heatmap_csv_round_trip(tmp_path):
    bag = FeatureBag("h", np.zeros((3, 2)), coords=[[0, 0], [0, 1], [2, 2]])
    scores = [0.1, 1 / 3, -2.5]
    export_heatmap(bag, scores, tmp_path / "h.csv", mode="csv")
    assert read_heatmap_csv(tmp_path / "h.csv") == [(0, 0, 0.1), (0, 1, 1 / 3), (2, 2, -2.5)]


def test_heatmap_errors(tmp_path):
    with pytest.raises(ValueError, match="coordinates"):
        export_heatmap(FeatureBag("h", np.zeros((1, 2))), [1.0], tmp_path / "x.pgm")
    bag = FeatureBag("h", np.zeros((2, 2)))
    bag.coords = np.array([[0, 0], [0, 0]])
    with pytest.raises(ValueError, match="collision"):
        export_heatmap(bag, [1.0, 2.0], tmp_path / "x.pgm")


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    cfg = SynthConfig(n_classes=3, dim=6, n_slides_per_class=2, n_test_slides_per_class=2,
                      instances_min=8, instances_max=12, class_separation=5.0, seed=3)
    return generate_dataset(cfg, tmp_path_factory.mktemp("eval"))


def _oracle_params(manifest):
    # instance head set to the linear discriminant of the generating Gaussians
    cfg = SynthConfig.load(manifest.root / "synth_config.json")
    mu = class_means(cfg)
    params = init_params("mbdsmil", 3, 6, q_dim=2, seed=0)
    params["inst.W"] = 10.0 * mu
    params["inst.b"] = -5.0 * (mu ** 2).sum(axis=1)
    return params


def test_oracle_model_perfect_instances(small_data):
    # linear discriminant of equal-variance Gaussians is the Bayes rule
    report = evaluate_model("mbdsmil", _oracle_params(small_data), small_data, small_data.split("test"))
    assert report.instance_macro_f1 > 0.95
    cm = np.array(report.instance_confusion)
    assert cm.shape == (3, 3) and np.array(report.slide_confusion).shape == (3, 3)


def test_planted_label_logits_give_f1_one(small_data):
    dumps = []
    evaluate_model("mbdsmil", _oracle_params(small_data), small_data, small_data.split("test"), dumps)
    for d in dumps:
        planted = 10.0 * np.eye(3)[d.instance_labels]
        d.instance_preds = planted.argmax(axis=1)
    assert report_from_dumps(dumps, 3, 2).instance_macro_f1 == 1.0


@pytest.mark.parametrize("kind", ["mbdsmil", "dsmil", "clam"])
def test_report_recomputed_from_dumps(small_data, kind):
    params = init_params(kind, 3, 6, q_dim=4, hidden=5, seed=1)
    dumps = []
    report = evaluate_model(kind, params, small_data, small_data.split("test"), dumps)
    gts = np.array([d.slide_label for d in dumps])
    preds = np.array([d.slide_pred for d in dumps])
    assert report.slide_macro_f1 == brute_f1(preds.tolist(), gts.tolist(), 3)
    inst_gt = np.concatenate([d.instance_labels for d in dumps])
    inst_pred = np.concatenate([d.instance_preds for d in dumps])
    assert report.instance_macro_f1 == pytest.approx(brute_f1(inst_pred.tolist(), inst_gt.tolist(), 3), abs=1e-15)
    assert macro_f1_from_confusion(np.array(report.instance_confusion)) == report.instance_macro_f1
    tumour = [d for d in dumps if d.slide_label != 2]
    att = np.concatenate([minmax(d.attention[d.slide_label]) for d in tumour])
    pos = np.concatenate([d.instance_labels == d.slide_label for d in tumour])
    assert report.attention_auc == pytest.approx(brute_auc(att.tolist(), pos.tolist()), abs=1e-15)
    for value in (report.slide_ovr_auc, report.instance_ovr_auc, report.gt_vs_normal_auc):
        assert 0.0 <= value <= 1.0


def test_dump_scores_are_distributions(small_data):
    for kind in ("mbdsmil", "clam"):
        params = init_params(kind, 3, 6, q_dim=4, hidden=5, seed=2)
        e = small_data.split("test")[0]
        d = dump_bag(kind, params, small_data.load(e), e.slide_label, 2)
        assert d.instance_scores.shape == (small_data.load(e).n_instances, 3)
        if kind == "mbdsmil":
            np.testing.assert_allclose(d.instance_scores.sum(axis=1), 1.0)


def test_missing_instance_labels_slide_only(small_data):
    dumps = []
    evaluate_model("dsmil", init_params("dsmil", 3, 6, 4, seed=0), small_data, small_data.split("test"), dumps)
    for d in dumps:
        d.instance_labels = None
    report = report_from_dumps(dumps, 3, 2)
    assert report.instance_macro_f1 is None and report.attention_auc is None
    assert report.slide_macro_f1 is not None


def test_report_json_round_trip(tmp_path):
    report = EvalReport(0.5, 0.75, 0.25, slide_confusion=[[1, 0], [0, 1]])
    report.save(tmp_path / "r.json")
    assert EvalReport.load(tmp_path / "r.json") == report


def test_evaluation_is_pure(small_data):
    params = init_params("clam", 3, 6, hidden=5, seed=4)
    a = evaluate_model("clam", params, small_data, small_data.split("test"))
    b = evaluate_model("clam", params, small_data, small_data.split("test"))
    assert a == b
