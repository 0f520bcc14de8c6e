"""Forward passes for multi-class DSMIL, multi-branch DSMIL and CLAM.

Parameters live in flat ``dict[str, np.ndarray]`` mappings. Forward functions
accept either raw arrays or :class:`~protomil.autograd.Tensor` leaves, so the
same code serves evaluation and gradient computation. Linear weights are
stored ``(out, in)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor, as_tensor
from .dataio import LabelSpace

logger = logging.getLogger(__name__)

MODEL_KINDS = ("dsmil", "mbdsmil", "clam", "dsmil_cl_pl", "mbdsmil_cl_pl")


@dataclass
class BagOutput:
    bag_logits: Tensor
    instance_logits: Tensor | None
    attention: Tensor  # branches x N
    critical_indices: np.ndarray | None = None
    instance_pair_logits: Tensor | None = None  # CLAM only: N x (C-1) x 2


def architecture(kind: str) -> str:
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    return {"dsmil_cl_pl": "dsmil", "mbdsmil_cl_pl": "mbdsmil"}.get(kind, kind)


# -- initialisation -----------------------------------------------------------


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(kind: str, n_classes: int, dim: int, q_dim: int = 64, hidden: int = 128, seed: int = 0) -> dict:
    """Fan-in uniform initialisation, fully determined by ``seed``."""
    arch = architecture(kind)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    C, d = n_classes, dim
    if arch == "clam":
        return {
            "trunk.W": _uniform(rng, (hidden, d), d),
            "trunk.b": _uniform(rng, (hidden,), d),
            "gate_a.W": _uniform(rng, (hidden, hidden), hidden),
            "gate_a.b": _uniform(rng, (hidden,), hidden),
            "gate_b.W": _uniform(rng, (hidden, hidden), hidden),
            "gate_b.b": _uniform(rng, (hidden,), hidden),
            "att.W": _uniform(rng, (C, hidden), hidden),
            "att.b": _uniform(rng, (C,), hidden),
            "bag.W": _uniform(rng, (C, d), d),
            "bag.b": _uniform(rng, (C,), d),
            "inst.W": _uniform(rng, (C - 1, 2, hidden), hidden),
            "inst.b": _uniform(rng, (C - 1, 2), hidden),
        }
    params = {
        "inst.W": _uniform(rng, (C, d), d),
        "inst.b": _uniform(rng, (C,), d),
    }
    if arch == "dsmil":
        params["query.W"] = _uniform(rng, (q_dim, d), d)
        params["query.b"] = _uniform(rng, (q_dim,), d)
    else:
        params["query.W"] = _uniform(rng, (C, q_dim, d), d)
        params["query.b"] = _uniform(rng, (C, q_dim), d)
    params["bag.W"] = _uniform(rng, (C, d), d)
    params["bag.b"] = _uniform(rng, (C,), d)
    return params


# -- DSMIL family -------------------------------------------------------------


def instance_logits(W, H, bias=None) -> Tensor:
    W, H = as_tensor(W), as_tensor(H)
    if H.ndim != 2 or W.shape[-1] != H.shape[1]:
        raise ValueError(f"shape mismatch: W {W.shape} vs H {H.shape}")
    out = H @ W.T
    return out if bias is None else out + bias


def select_critical(inst_logits) -> np.ndarray:
    """Per-class argmax over instances; ties resolve to the lowest index."""
    x = inst_logits.data if isinstance(inst_logits, Tensor) else np.asarray(inst_logits)
    return np.argmax(x, axis=0)


def critical_supervision_targets(slide_label: int, label_space: LabelSpace) -> np.ndarray:
    targets = np.full(label_space.n_classes, label_space.normal_index, dtype=np.int64)
    if slide_label != label_space.normal_index:
        targets[slide_label] = slide_label
    return targets


def mb_attention(H, phi_W, phi_b, critical_index: int, queries: Tensor | None = None):
    """Softmax attention of every instance against the critical one.

    Returns ``(weights, bag_vector)``. Values are the raw features.
    """
    H = as_tensor(H)
    if queries is None:
        queries = H @ as_tensor(phi_W).T + phi_b
    q_m = queries[int(critical_index)]
    scores = (queries @ q_m) * (1.0 / math.sqrt(queries.shape[1]))
    weights = ag.softmax(scores)
    return weights, weights @ H


def mbdsmil_forward(params: Mapping, H) -> BagOutput:
    H = as_tensor(H)
    p = {k: as_tensor(v) for k, v in params.items()}
    if H.shape[1] != p["inst.W"].shape[1]:
        raise ValueError(f"feature dim {H.shape[1]} != model dim {p['inst.W'].shape[1]}")
    inst = instance_logits(p["inst.W"], H, p["inst.b"])
    crit = select_critical(inst)
    n_classes = inst.shape[1]
    weights, logits = [], []
    for c in range(n_classes):
        w, v = mb_attention(H, p["query.W"][c], p["query.b"][c], crit[c])
        weights.append(w)
        logits.append((v * p["bag.W"][c]).sum() + p["bag.b"][c])
    return BagOutput(ag.stack(logits), inst, ag.stack(weights), crit)


def dsmil_forward(params: Mapping, H) -> BagOutput:
    H = as_tensor(H)
    p = {k: as_tensor(v) for k, v in params.items()}
    if H.shape[1] != p["inst.W"].shape[1]:
        raise ValueError(f"feature dim {H.shape[1]} != model dim {p['inst.W'].shape[1]}")
    inst = instance_logits(p["inst.W"], H, p["inst.b"])
    crit = select_critical(inst)
    queries = H @ p["query.W"].T + p["query.b"]
    weights, vectors = [], []
    for c in range(inst.shape[1]):
        w, v = mb_attention(H, None, None, crit[c], queries=queries)
        weights.append(w)
        vectors.append(v)
    pooled = ag.stack(vectors).mean(axis=0)
    return BagOutput(p["bag.W"] @ pooled + p["bag.b"], inst, ag.stack(weights), crit)


# -- CLAM ---------------------------------------------------------------------


def clam_forward(params: Mapping, H) -> BagOutput:
    """Gated attention per branch; the last branch is the normal bag branch."""
    H = as_tensor(H)
    p = {k: as_tensor(v) for k, v in params.items()}
    if H.shape[1] != p["trunk.W"].shape[1]:
        raise ValueError(f"feature dim {H.shape[1]} != model dim {p['trunk.W'].shape[1]}")
    u = ag.relu(H @ p["trunk.W"].T + p["trunk.b"])
    gated = ag.tanh(u @ p["gate_a.W"].T + p["gate_a.b"]) * ag.sigmoid(u @ p["gate_b.W"].T + p["gate_b.b"])
    scores = gated @ p["att.W"].T + p["att.b"]  # N x C
    attention = ag.softmax(scores.T, axis=1)  # C x N
    pooled = attention @ H  # C x d
    bag_logits = (pooled * p["bag.W"]).sum(axis=1) + p["bag.b"]
    pairs = [u @ p["inst.W"][c].T + p["inst.b"][c] for c in range(p["inst.W"].shape[0])]
    return BagOutput(bag_logits, None, attention, None, ag.stack(pairs, axis=1))


def clam_instance_sampling(attention, slide_label: int, k: int, normal_index: int) -> list[tuple[int, int, int]]:
    """Top-k / bottom-k pseudo-labelled instances as ``(index, branch, target)``.

    ``attention`` holds one row per subtype branch (extra rows are ignored).
    Sorting is stable so equal weights keep instance order.
    """
    att = attention.data if isinstance(attention, Tensor) else np.asarray(attention)
    n = att.shape[1]
    k_eff = min(k, n // 2)
    if k_eff < k:
        logger.warning("k=%d exceeds floor(N/2)=%d for a bag of %d instances; clamping", k, n // 2, n)
    samples: list[tuple[int, int, int]] = []
    if k_eff == 0:
        return samples
    for branch in range(normal_index):
        order = np.argsort(-att[branch], kind="stable")
        top = order[:k_eff]
        if branch == slide_label:
            bottom = np.argsort(att[branch], kind="stable")[:k_eff]
            samples += [(int(j), branch, 1) for j in top]
            samples += [(int(j), branch, 0) for j in bottom]
        else:
            samples += [(int(j), branch, 0) for j in top]
    return samples


def clam_predict(pair_logits) -> int | np.ndarray:
    """Normal iff every branch prefers its negative logit, else best positive.

    ``pair_logits`` is ``(C-1) x 2`` for one item or ``M x (C-1) x 2`` for a
    batch; returns class indices where ``C-1`` means normal.
    """
    x = pair_logits.data if isinstance(pair_logits, Tensor) else np.asarray(pair_logits, dtype=np.float64)
    single = x.ndim == 2
    x = x[None] if single else x
    normal = np.all(x[:, :, 0] > x[:, :, 1], axis=1)
    pred = np.where(normal, x.shape[1], np.argmax(x[:, :, 1], axis=1))
    return int(pred[0]) if single else pred


def bag_pairs(bag_logits, normal_index: int) -> np.ndarray:
    """Slide-level pairs ``(normal logit, subtype logit)`` for :func:`clam_predict`."""
    x = bag_logits.data if isinstance(bag_logits, Tensor) else np.asarray(bag_logits)
    subtypes = np.delete(x, normal_index)
    return np.stack([np.full_like(subtypes, x[normal_index]), subtypes], axis=1)


def forward(kind: str, params: Mapping, H) -> BagOutput:
    arch = architecture(kind)
    if arch == "dsmil":
        return dsmil_forward(params, H)
    if arch == "mbdsmil":
        return mbdsmil_forward(params, H)
    return clam_forward(params, H)


def predict_slide(kind: str, out: BagOutput, normal_index: int) -> int:
    if architecture(kind) == "clam":
        return clam_predict(bag_pairs(out.bag_logits, normal_index))
    return int(np.argmax(out.bag_logits.data))
