"""Projection heads, momentum key encoder, memory queue and contrastive losses."""

from __future__ import annotations

import logging
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor, as_tensor
from .models import _uniform

logger = logging.getLogger(__name__)

UNLABELED = -1


def init_projector(dim: int, e_dim: int = 1024, seed: int = 0) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    return {
        "l1.W": _uniform(rng, (e_dim, dim), dim),
        "l1.b": _uniform(rng, (e_dim,), dim),
        "l2.W": _uniform(rng, (e_dim, e_dim), e_dim),
        "l2.b": _uniform(rng, (e_dim,), e_dim),
    }


def project(params: Mapping, view) -> Tensor:
    """Two-layer ReLU perceptron followed by L2 normalisation.

    Accepts one view (d,) or a batch (N, d). Rows that project to exactly
    zero are replaced by the first unit basis vector.
    """
    p = {k: as_tensor(v) for k, v in params.items()}
    x = as_tensor(view)
    single = x.ndim == 1
    if single:
        x = ag.reshape(x, (1, -1))
    if x.shape[1] != p["l1.W"].shape[1]:
        raise ValueError(f"view dim {x.shape[1]} != projector input dim {p['l1.W'].shape[1]}")
    hidden = ag.relu(x @ p["l1.W"].T + p["l1.b"])
    out = hidden @ p["l2.W"].T + p["l2.b"]
    zero_rows = ~np.any(out.data != 0, axis=1)
    z = ag.l2_normalize(out, axis=1)
    if np.any(zero_rows):
        logger.warning("%d projected vectors were exactly zero; substituting e_0", int(zero_rows.sum()))
        fill = np.zeros(z.shape)
        fill[zero_rows, 0] = 1.0
        z = z + fill
    return ag.reshape(z, (-1,)) if single else z


def ema_update_key(key_params: dict, query_params: Mapping, momentum: float) -> None:
    """In place: theta_k <- momentum * theta_k + (1 - momentum) * theta_q."""
    if set(key_params) != set(query_params):
        raise ValueError("key and query encoders have different parameter sets")
    for name, theta_q in query_params.items():
        theta_k = key_params[name]
        if theta_k.shape != np.shape(theta_q):
            raise ValueError(f"shape mismatch for {name}: {theta_k.shape} vs {np.shape(theta_q)}")
        key_params[name] = momentum * theta_k + (1.0 - momentum) * np.asarray(theta_q)


class MemoryQueue:
    """Fixed-capacity FIFO ring buffer of unit keys and their pseudo-labels."""

    def __init__(self, capacity: int = 8192, dim: int | None = None):
        self.capacity = capacity
        self.dim = dim
        self.keys = None if dim is None else np.zeros((capacity, dim))
        self.labels = np.full(capacity, UNLABELED, dtype=np.int64)
        self.ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, keys, labels) -> None:
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (keys.shape[0],))
        if keys.size == 0:
            return
        norms = np.linalg.norm(keys, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("queue keys must be unit-norm (tolerance 1e-6)")
        if self.keys is None:
            self.dim = keys.shape[1]
            self.keys = np.zeros((self.capacity, self.dim))
        if keys.shape[0] > self.capacity:
            keys, labels = keys[-self.capacity :], labels[-self.capacity :]
        n = keys.shape[0]
        slots = (self.ptr + np.arange(n)) % self.capacity
        self.keys[slots] = keys
        self.labels[slots] = labels
        self.ptr = int((self.ptr + n) % self.capacity)
        self.size = min(self.capacity, self.size + n)

    def clear(self) -> None:
        self.labels[:] = UNLABELED
        if self.keys is not None:
            self.keys[:] = 0.0
        self.ptr = 0
        self.size = 0

    def contents(self) -> tuple[np.ndarray, np.ndarray]:
        """Stored keys and labels in slot order (not age order)."""
        if self.keys is None:
            return np.zeros((0, self.dim or 0)), np.zeros(0, dtype=np.int64)
        return self.keys[: self.size], self.labels[: self.size]

    def ordered(self) -> tuple[np.ndarray, np.ndarray]:
        """Keys and labels oldest first."""
        keys, labels = self.contents()
        if self.size < self.capacity:
            return keys, labels
        order = (self.ptr + np.arange(self.capacity)) % self.capacity
        return keys[order], labels[order]

    def state(self, prefix: str = "queue/") -> dict:
        keys, labels = self.contents()
        return {
            prefix + "keys": keys,
            prefix + "labels": labels.astype(np.float64),
            prefix + "meta": np.array([self.capacity, self.ptr, self.size, self.dim or 0], dtype=np.float64),
        }

    @classmethod
    def from_state(cls, state: Mapping, prefix: str = "queue/") -> "MemoryQueue":
        capacity, ptr, size, dim = (int(v) for v in state[prefix + "meta"])
        queue = cls(capacity, dim or None)
        if dim:
            queue.keys[:size] = state[prefix + "keys"]
        queue.labels[:size] = state[prefix + "labels"].astype(np.int64)
        queue.ptr, queue.size = ptr, size
        return queue


def queue_push(queue: MemoryQueue, keys, labels) -> None:
    queue.push(keys, labels)


def moco_loss(q_vec, k_pos, queue_keys, tau: float = 0.07) -> Tensor:
    """InfoNCE with the positive key at index 0, averaged over rows.

    ``q_vec`` may be a single vector or an N x e batch paired row-wise with
    ``k_pos``; ``queue_keys`` (M x e, possibly empty) are shared negatives.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    q = as_tensor(q_vec)
    single = q.ndim == 1
    if single:
        q = ag.reshape(q, (1, -1))
    k_pos = np.atleast_2d(np.asarray(k_pos.data if isinstance(k_pos, Tensor) else k_pos))
    queue_keys = np.asarray(queue_keys, dtype=np.float64).reshape(-1, q.shape[1])
    pos = (q * k_pos).sum(axis=1, keepdims=True) * (1.0 / tau)
    if queue_keys.shape[0] == 0:
        logits = pos
    else:
        logits = ag.concat([pos, (q @ queue_keys.T) * (1.0 / tau)], axis=1)
    loss = -(ag.log_softmax(logits, axis=1)[:, 0])
    return loss.mean()


def supcon_loss(anchors, anchor_labels, candidates, candidate_labels, tau: float = 0.07, self_index=None) -> Tensor:
    """Supervised contrastive loss of anchors against a candidate pool.

    For anchor i the contrast set is every candidate except ``self_index[i]``
    (pass ``None`` when anchors are not themselves candidates); positives are
    contrast-set members sharing i's label. Anchors without positives are
    skipped; if all are skipped the loss is 0.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    z = as_tensor(anchors)
    if z.ndim == 1:
        z = ag.reshape(z, (1, -1))
    cand = candidates.data if isinstance(candidates, Tensor) else np.asarray(candidates, dtype=np.float64)
    cand = cand.reshape(-1, z.shape[1])
    a_lab = np.atleast_1d(np.asarray(anchor_labels))
    c_lab = np.atleast_1d(np.asarray(candidate_labels))
    n, m = z.shape[0], cand.shape[0]
    contrast = np.ones((n, m), dtype=bool)
    if self_index is not None:
        for i, j in enumerate(self_index):
            if j is not None and j >= 0:
                contrast[i, j] = False
    positive = (a_lab[:, None] == c_lab[None, :]) & contrast
    n_pos = positive.sum(axis=1)
    keep = n_pos > 0
    if not np.any(keep):
        logger.warning("supcon_loss: no anchor has a positive; returning 0")
        return Tensor(0.0)
    logits = (z @ cand.T) * (1.0 / tau)
    masked = logits + np.where(contrast, 0.0, -np.inf)
    lse = ag.logsumexp(masked, axis=1)  # n
    weights = np.where(keep[:, None], positive / np.maximum(n_pos, 1)[:, None], 0.0)
    per_anchor = (logits * weights).sum(axis=1) - lse * keep.astype(np.float64)
    return -(per_anchor.sum()) * (1.0 / keep.sum())
