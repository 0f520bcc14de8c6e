"""Class prototypes and momentum soft pseudo-labels for instance supervision."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor, as_tensor
from .dataio import read_feature_shape

logger = logging.getLogger(__name__)


@dataclass
class PrototypeBank:
    mu: np.ndarray  # C x e, unit rows
    momentum: float = 0.9

    @property
    def n_classes(self) -> int:
        return self.mu.shape[0]


def init_prototypes(n_classes: int, e_dim: int, seed: int = 0, momentum: float = 0.9) -> PrototypeBank:
    if n_classes < 1 or e_dim < 1:
        raise ValueError("n_classes and e_dim must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 37]))
    mu = rng.standard_normal((n_classes, e_dim))
    mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    return PrototypeBank(mu, momentum)


def restricted_assign(h_proj: np.ndarray, bank: PrototypeBank, slide_label: int, normal_index: int) -> np.ndarray:
    """One-hot over C for the closer of the slide-class and normal prototypes.

    Vectorised over rows when ``h_proj`` is N x e. Ties go to normal.
    """
    h = np.asarray(h_proj, dtype=np.float64)
    sim_slide = h @ bank.mu[slide_label]
    sim_normal = h @ bank.mu[normal_index]
    chosen = np.where(sim_slide > sim_normal, slide_label, normal_index)
    z = np.zeros(h.shape[:-1] + (bank.n_classes,))
    if h.ndim == 1:
        z[int(chosen)] = 1.0
    else:
        z[np.arange(len(h)), chosen] = 1.0
    return z


def momentum_update_label(s: np.ndarray, z: np.ndarray, alpha: float = 0.8) -> np.ndarray:
    return alpha * np.asarray(s) + (1.0 - alpha) * np.asarray(z)


def prototype_ema_update(bank: PrototypeBank, y_hat: int, h_proj: np.ndarray) -> None:
    """In place: mu[y_hat] <- normalise(m * mu[y_hat] + (1 - m) * h_proj)."""
    if not 0 <= y_hat < bank.n_classes:
        raise ValueError(f"class {y_hat} out of range")
    m = bank.momentum
    v = m * bank.mu[y_hat] + (1.0 - m) * np.asarray(h_proj)
    norm = np.sqrt(v @ v)
    if norm == 0.0:
        logger.warning("prototype update for class %d cancelled to zero; skipped", y_hat)
        return
    bank.mu[y_hat] = v / norm


def kl_instance_loss(inst_logits, s) -> Tensor:
    """KL(s || softmax(logits)), summed over classes and averaged over rows."""
    logits = as_tensor(inst_logits)
    s = np.asarray(s, dtype=np.float64)
    if logits.ndim == 1:
        logits = ag.reshape(logits, (1, -1))
        s = s.reshape(1, -1)
    log_p = ag.log_softmax(logits, axis=1)
    with np.errstate(divide="ignore"):
        entropy_term = np.where(s > 0, s * np.log(np.where(s > 0, s, 1.0)), 0.0).sum()
    return (entropy_term - (log_p * s).sum()) * (1.0 / logits.shape[0])


@dataclass
class SoftLabelStore:
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    fixed: set[str] = field(default_factory=set)
    alpha: float = 0.8

    def __getitem__(self, slide_id: str) -> np.ndarray:
        return self.labels[slide_id]

    def update(self, slide_id: str, z: np.ndarray) -> None:
        if slide_id in self.fixed:
            return
        self.labels[slide_id] = momentum_update_label(self.labels[slide_id], z, self.alpha)

    def hard_labels(self, slide_id: str, slide_label: int, normal_index: int) -> np.ndarray:
        """Restricted argmax of the soft labels; ties go to normal."""
        s = self.labels[slide_id]
        if slide_id in self.fixed:
            return np.full(len(s), normal_index, dtype=np.int64)
        return np.where(s[:, slide_label] > s[:, normal_index], slide_label, normal_index)

    def state(self) -> dict:
        out = {f"soft/{sid}": s for sid, s in self.labels.items()}
        out["soft_meta/alpha"] = np.array([self.alpha])
        out["soft_meta/fixed"] = np.array([1.0 if sid in self.fixed else 0.0 for sid in self.labels])
        return out

    @classmethod
    def from_state(cls, state: Mapping) -> "SoftLabelStore":
        ids = [k[len("soft/") :] for k in state if k.startswith("soft/")]
        flags = state["soft_meta/fixed"]
        store = cls({sid: state["soft/" + sid].copy() for sid in ids}, alpha=float(state["soft_meta/alpha"][0]))
        store.fixed = {sid for sid, f in zip(ids, flags) if f}
        return store


def init_soft_labels(manifest, split: str = "train", prior: float = 0.5, alpha: float = 0.8) -> SoftLabelStore:
    """Initial soft labels for every slide of ``split``.

    Normal slides get a fixed normal one-hot. Tumour slides put ``prior`` on
    the slide class and the rest on normal.
    """
    n_classes = manifest.label_space.n_classes
    normal = manifest.label_space.normal_index
    store = SoftLabelStore(alpha=alpha)
    for e in manifest.split(split):
        n, _ = read_feature_shape(e.feature_path)
        s = np.zeros((n, n_classes))
        if e.slide_label == normal:
            s[:, normal] = 1.0
            store.fixed.add(e.slide_id)
        else:
            s[:, e.slide_label] = prior
            s[:, normal] = 1.0 - prior
        store.labels[e.slide_id] = s
    return store
