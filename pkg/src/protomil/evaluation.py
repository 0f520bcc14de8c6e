"""Slide and instance metrics, model evaluation and heatmap export."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .dataio import FeatureBag
from .models import architecture, clam_predict, forward, predict_slide

logger = logging.getLogger(__name__)


def confusion_matrix(preds, gts, n_classes: int) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(gts, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return cm


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2TP + FP + FN
    return np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1_from_confusion(cm: np.ndarray) -> float:
    return float(np.mean(per_class_f1(cm)))


def macro_f1(preds, gts, n_classes: int) -> float:
    """Unweighted mean of per-class F1; zero-support classes count as 0."""
    preds, gts = np.asarray(preds), np.asarray(gts)
    if preds.size == 0:
        raise ValueError("macro_f1 of empty input")
    if preds.shape != gts.shape:
        raise ValueError("preds and gts differ in length")
    cm = confusion_matrix(preds, gts, n_classes)
    empty = (cm.sum(axis=0) == 0) & (cm.sum(axis=1) == 0)
    if np.any(empty):
        logger.info("classes %s have no support and no predictions; F1=0", np.flatnonzero(empty).tolist())
    return macro_f1_from_confusion(cm)


def roc_auc(scores, binary_labels) -> float:
    """Mann-Whitney AUC: P(pos > neg) + P(pos == neg) / 2. NaN if a class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(binary_labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        logger.warning("roc_auc undefined: only one class present")
        return math.nan
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def ovr_auc_macro(score_matrix, gts, n_classes: int) -> float:
    scores = np.asarray(score_matrix, dtype=np.float64)
    gts = np.asarray(gts)
    aucs = []
    for c in range(n_classes):
        pos = gts == c
        if pos.all() or not pos.any():
            logger.warning("ovr_auc_macro: class %d absent (or only class); skipped", c)
            continue
        aucs.append(roc_auc(scores[:, c], pos))
    if not aucs:
        raise ValueError("ovr_auc_macro: no class has both positives and negatives")
    return float(np.mean(aucs))


def gt_vs_normal(instance_logits, slide_label: int, normal_index: int):
    """Logit difference between the slide's class and normal, with binary predictions."""
    if slide_label == normal_index:
        raise ValueError("gt_vs_normal is defined for tumour slides only")
    x = np.asarray(instance_logits, dtype=np.float64)
    scores = x[:, slide_label] - x[:, normal_index]
    preds = np.where(scores > 0, slide_label, normal_index)
    return scores, preds


def minmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.ones_like(x)
    return (x - lo) / (hi - lo)


def attention_auc(attention_weights, instance_labels, slide_label: int, normal_index: int) -> float:
    if slide_label == normal_index:
        raise ValueError("attention_auc is defined for tumour slides only")
    return roc_auc(minmax(attention_weights), np.asarray(instance_labels) == slide_label)


# -- reports ------------------------------------------------------------------


@dataclass
class EvalReport:
    slide_macro_f1: float
    slide_ovr_auc: float
    instance_macro_f1: float | None = None
    instance_ovr_auc: float | None = None
    gt_vs_normal_f1: float | None = None
    gt_vs_normal_auc: float | None = None
    attention_auc: float | None = None
    slide_confusion: list = field(default_factory=list)
    instance_confusion: list | None = None

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class BagDump:
    """Per-bag quantities an evaluation needs, detached from any model."""

    slide_id: str
    slide_label: int
    bag_logits: np.ndarray
    slide_pred: int
    instance_scores: np.ndarray  # N x C probability-like scores
    instance_preds: np.ndarray
    gt_normal_scores: np.ndarray | None  # tumour slides only
    attention: np.ndarray  # branches x N
    instance_labels: np.ndarray | None


def dump_bag(kind: str, params, bag: FeatureBag, slide_label: int, normal_index: int) -> BagDump:
    out = forward(kind, params, bag.features)
    n_classes = out.bag_logits.shape[0]
    if architecture(kind) == "clam":
        pairs = out.instance_pair_logits.data  # N x (C-1) x 2
        pos = _softmax(pairs, axis=2)[:, :, 1]
        scores = np.concatenate([pos, 1.0 - pos.max(axis=1, keepdims=True)], axis=1)
        preds = clam_predict(pairs)
        gt_scores = None
        if slide_label != normal_index:
            gt_scores = pairs[:, slide_label, 1] - pairs[:, slide_label, 0]
    else:
        logits = out.instance_logits.data
        scores = _softmax(logits, axis=1)
        preds = np.argmax(logits, axis=1)
        gt_scores = None if slide_label == normal_index else gt_vs_normal(logits, slide_label, normal_index)[0]
    assert scores.shape[1] == n_classes
    return BagDump(
        bag.slide_id, slide_label, out.bag_logits.data.copy(), predict_slide(kind, out, normal_index),
        scores, np.asarray(preds), gt_scores, out.attention.data.copy(), bag.instance_labels,
    )


def report_from_dumps(dumps: list[BagDump], n_classes: int, normal_index: int) -> EvalReport:
    """Aggregate per-bag dumps into an :class:`EvalReport`.

    Instance metrics pool instances over all slides. GT-vs-normal and
    attention metrics pool tumour slides only; attention is min-max scaled per
    slide before pooling.
    """
    gts = np.array([d.slide_label for d in dumps])
    preds = np.array([d.slide_pred for d in dumps])
    slide_cm = confusion_matrix(preds, gts, n_classes)
    slide_probs = np.stack([_softmax(d.bag_logits) for d in dumps])
    slide_auc = _safe(lambda: ovr_auc_macro(slide_probs, gts, n_classes))
    report = EvalReport(macro_f1_from_confusion(slide_cm), slide_auc, slide_confusion=slide_cm.tolist())
    if any(d.instance_labels is None for d in dumps):
        logger.info("instance labels missing; reporting slide metrics only")
        return report
    inst_gt = np.concatenate([d.instance_labels for d in dumps])
    inst_pred = np.concatenate([d.instance_preds for d in dumps])
    inst_cm = confusion_matrix(inst_pred, inst_gt, n_classes)
    report.instance_confusion = inst_cm.tolist()
    report.instance_macro_f1 = macro_f1_from_confusion(inst_cm)
    report.instance_ovr_auc = _safe(
        lambda: ovr_auc_macro(np.concatenate([d.instance_scores for d in dumps]), inst_gt, n_classes)
    )
    tumour = [d for d in dumps if d.slide_label != normal_index]
    if tumour:
        g_scores = np.concatenate([d.gt_normal_scores for d in tumour])
        g_labels = np.concatenate([d.instance_labels for d in tumour])
        g_pred = np.concatenate(
            [np.where(d.gt_normal_scores > 0, d.slide_label, normal_index) for d in tumour]
        )
        g_pos = np.concatenate([d.instance_labels == d.slide_label for d in tumour])
        report.gt_vs_normal_f1 = macro_f1(g_pred, g_labels, n_classes)
        report.gt_vs_normal_auc = _safe(lambda: roc_auc(g_scores, g_pos))
        att = np.concatenate([minmax(d.attention[d.slide_label]) for d in tumour])
        report.attention_auc = _safe(lambda: roc_auc(att, g_pos))
    return report


def _safe(fn):
    try:
        value = fn()
    except ValueError as exc:
        logger.warning("metric undefined: %s", exc)
        return None
    return None if value is None or math.isnan(value) else value


def evaluate_model(kind: str, params, manifest, entries, dumps_out: list | None = None) -> EvalReport:
    """Evaluate ``params`` on manifest ``entries`` in manifest order.

    Pass a list as ``dumps_out`` to receive the per-bag dumps as well.
    """
    space = manifest.label_space
    dumps = [dump_bag(kind, params, manifest.load(e), e.slide_label, space.normal_index) for e in entries]
    if dumps_out is not None:
        dumps_out.extend(dumps)
    return report_from_dumps(dumps, space.n_classes, space.normal_index)


# -- heatmaps -----------------------------------------------------------------


def export_heatmap(bag: FeatureBag, per_instance_scores, path, mode: str = "pgm") -> None:
    """Write per-instance scores on the bag's grid as CSV or binary PGM (P5)."""
    if bag.coords is None:
        raise ValueError(f"bag {bag.slide_id} has no coordinates")
    coords = np.asarray(bag.coords, dtype=np.int64)
    scores = np.asarray(per_instance_scores, dtype=np.float64)
    if len({tuple(c) for c in coords.tolist()}) != len(coords):
        raise ValueError(f"bag {bag.slide_id}: coordinate collision")
    if mode == "csv":
        lines = ["row,col,score"] + [f"{r},{c},{s!r}" for (r, c), s in zip(coords.tolist(), scores.tolist())]
        Path(path).write_text("\n".join(lines) + "\n")
        return
    if mode != "pgm":
        raise ValueError(f"unknown heatmap mode {mode!r}")
    height, width = int(coords[:, 0].max()) + 1, int(coords[:, 1].max()) + 1
    if scores.max() == scores.min():
        logger.info("constant scores for %s; every occupied cell at full intensity", bag.slide_id)
        pixels = np.full(len(scores), 255, dtype=np.uint8)
    else:
        scaled = (scores - scores.min()) / (scores.max() - scores.min())
        pixels = np.floor(255.0 * scaled).astype(np.uint8)
    grid = np.zeros((height, width), dtype=np.uint8)
    grid[coords[:, 0], coords[:, 1]] = pixels
    Path(path).write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + grid.tobytes())


def read_heatmap_csv(path) -> list[tuple[int, int, float]]:
    rows = Path(path).read_text().strip().splitlines()[1:]
    out = []
    for line in rows:
        r, c, s = line.split(",")
        out.append((int(r), int(c), float(s)))
    return out
