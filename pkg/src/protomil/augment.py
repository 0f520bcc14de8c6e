"""Feature-space augmentation: sign-preserving SimCL noise and feature dropout."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np


@dataclass
class AugmentConfig:
    eta_w: float = 0.05
    eta_s: float = 0.4
    p_w: float = 0.0
    p_s: float = 0.0

    def __post_init__(self):
        if self.eta_w < 0 or self.eta_s < 0:
            raise ValueError("noise scales must be >= 0")
        if not (self.eta_s > self.eta_w or self.eta_s == self.eta_w == 0):
            raise ValueError("eta_s must exceed eta_w (unless both are 0)")
        for p in (self.p_w, self.p_s):
            if not 0 <= p < 1:
                raise ValueError("dropout probabilities must lie in [0, 1)")


def simcl_noise(h: np.ndarray, eta: float, rng: np.random.Generator) -> np.ndarray:
    """Add uniform noise of L2 norm ``eta`` that never leaves h's orthant.

    Works row-wise on an N x d matrix as well as on a single vector; one
    uniform draw of shape ``h.shape`` is consumed either way.
    """
    if eta < 0:
        raise ValueError("eta must be >= 0")
    h = np.asarray(h, dtype=np.float64)
    raw = rng.random(h.shape)
    if eta == 0:
        return h.copy()
    norm = np.sqrt(np.sum(raw * raw, axis=-1, keepdims=True))
    return h + eta * (raw * np.sign(h)) / norm


def feature_dropout(h: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted dropout: zero each entry with probability p, rescale survivors."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    h = np.asarray(h, dtype=np.float64)
    if p == 0:
        return h.copy()
    keep = rng.random(h.shape) >= p
    return h * keep / (1.0 - p)


def view_rng(seed: int, slide_id: str, epoch: int, view: int) -> np.random.Generator:
    """Independent stream for one (slide, epoch, view); rows map to instances."""
    key = zlib.crc32(slide_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([seed, key, epoch, view]))


def make_views(h: np.ndarray, config: AugmentConfig, rng_weak, rng_strong=None):
    """Weak and strong views, each noise-then-dropout.

    ``rng_weak`` may be a single generator; a child stream is spawned for the
    strong view when ``rng_strong`` is omitted.
    """
    if rng_strong is None:
        rng_weak, rng_strong = rng_weak.spawn(2)
    weak = feature_dropout(simcl_noise(h, config.eta_w, rng_weak), config.p_w, rng_weak)
    strong = feature_dropout(simcl_noise(h, config.eta_s, rng_strong), config.p_s, rng_strong)
    return weak, strong
