"""Synthetic MIL datasets with planted instance labels and an exact Bayes oracle.

Every class (normal included) is an isotropic Gaussian. The class means form a
regular simplex whose pairwise distance is ``class_separation``, rotated into
``d`` dimensions by a seeded random orthonormal basis.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataio import DatasetManifest, FeatureBag, LabelSpace, SlideEntry, write_bag


@dataclass
class SynthConfig:
    n_classes: int = 4
    dim: int = 32
    n_slides_per_class: int = 10
    n_test_slides_per_class: int = 0
    instances_min: int = 40
    instances_max: int = 80
    tumor_fraction_min: float = 0.2
    tumor_fraction_max: float = 0.6
    class_separation: float = 6.0
    within_class_sigma: float = 1.0
    seed: int = 0
    class_names: list[str] | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.instances_min < 1 or self.instances_max < self.instances_min:
            raise ValueError("need 1 <= instances_min <= instances_max")
        if not 0 < self.tumor_fraction_min <= self.tumor_fraction_max <= 1:
            raise ValueError("need 0 < tumor_fraction_min <= tumor_fraction_max <= 1")
        if self.within_class_sigma <= 0:
            raise ValueError("within_class_sigma must be > 0")
        if self.dim < self.n_classes - 1:
            raise ValueError(
                f"{self.n_classes} equidistant means need dim >= {self.n_classes - 1}, got {self.dim}"
            )
        if self.class_names is not None and len(self.class_names) != self.n_classes:
            raise ValueError("class_names length must equal n_classes")

    @property
    def label_space(self) -> LabelSpace:
        names = self.class_names or [f"subtype{c}" for c in range(self.n_classes - 1)] + ["normal"]
        return LabelSpace(tuple(names))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "SynthConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SynthConfig keys: {sorted(unknown)}")
        return cls(**doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "SynthConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


def _means_rng(config: SynthConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, 0]))


def class_means(config: SynthConfig) -> np.ndarray:
    """C x d matrix of class means with all pairwise distances equal."""
    c, d = config.n_classes, config.dim
    simplex = np.eye(c) - 1.0 / c  # centred one-hots: pairwise distance sqrt(2)
    # orthonormal coordinates of the (C-1)-dim affine hull
    u, s, _ = np.linalg.svd(simplex.T, full_matrices=False)
    coords = simplex @ u[:, : c - 1]
    coords *= config.class_separation / math.sqrt(2.0)
    basis, _ = np.linalg.qr(_means_rng(config).standard_normal((d, c - 1)))
    return coords @ basis.T


def bayes_log_posterior(config: SynthConfig, features: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != config.dim:
        raise ValueError(f"feature dim {x.shape[1]} != config dim {config.dim}")
    mu = class_means(config)
    sq = ((x[:, None, :] - mu[None, :, :]) ** 2).sum(axis=2)
    logits = -sq / (2.0 * config.within_class_sigma**2)
    logits -= logits.max(axis=1, keepdims=True)
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def bayes_posterior(config: SynthConfig, feature_vector) -> np.ndarray:
    """Exact posterior over classes under equal priors.

    Accepts a single vector (returns a length-C vector) or an N x d matrix.
    """
    out = np.exp(bayes_log_posterior(config, feature_vector))
    out /= out.sum(axis=1, keepdims=True)
    return out[0] if np.ndim(feature_vector) == 1 else out


def grid_coords(n: int) -> np.ndarray:
    side = math.ceil(math.sqrt(n))
    j = np.arange(n)
    return np.stack([j // side, j % side], axis=1)


def _make_bag(config: SynthConfig, rng: np.random.Generator, slide_id: str, label: int, mu: np.ndarray) -> FeatureBag:
    normal = config.n_classes - 1
    n = int(rng.integers(config.instances_min, config.instances_max + 1))
    labels = np.full(n, normal, dtype=np.int64)
    if label != normal:
        rho = rng.uniform(config.tumor_fraction_min, config.tumor_fraction_max)
        n_tumor = min(n, math.ceil(rho * n))
        start = int(rng.integers(0, n - n_tumor + 1))
        labels[start : start + n_tumor] = label
    noise = rng.standard_normal((n, config.dim)) * config.within_class_sigma
    return FeatureBag(slide_id, mu[labels] + noise, labels, grid_coords(n))


def generate_dataset(config: SynthConfig, out_dir) -> DatasetManifest:
    """Write bags, sidecars, ``manifest.json`` and ``synth_config.json`` to ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "bags").mkdir(parents=True, exist_ok=True)
    space = config.label_space
    mu = class_means(config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    entries: list[SlideEntry] = []
    for split, per_class in (("train", config.n_slides_per_class), ("test", config.n_test_slides_per_class)):
        for c in range(config.n_classes):
            for i in range(per_class):
                sid = f"{split}_{space.class_names[c]}_{i:03d}"
                bag = _make_bag(config, rng, sid, c, mu)
                path = out_dir / "bags" / f"{sid}.milb"
                write_bag(bag, path)
                entries.append(
                    SlideEntry(sid, path, c, split, path.with_suffix(".labels"), path.with_suffix(".coords"))
                )
    manifest = DatasetManifest(space, entries, config.dim, out_dir)
    manifest.save(out_dir / "manifest.json")
    config.save(out_dir / "synth_config.json")
    return manifest


def bayes_accuracy(config: SynthConfig, features: np.ndarray, labels: np.ndarray) -> float:
    pred = np.argmax(bayes_log_posterior(config, features), axis=1)
    return float(np.mean(pred == np.asarray(labels)))
