"""Bag files, dataset manifests, fold splitting and class-balanced sampling."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

BAG_MAGIC = b"MILB"
LABEL_MAGIC = b"MILL"
COORD_MAGIC = b"MILC"
FORMAT_VERSION = 1
_U32_MAX = 2**32 - 1


class BagFormatError(ValueError):
    """Raised for malformed bag or sidecar files."""


class ManifestError(ValueError):
    """Raised when a manifest fails validation."""


@dataclass(frozen=True)
class LabelSpace:
    class_names: tuple[str, ...]
    normal_index: int | None = None

    def __post_init__(self):
        names = tuple(self.class_names)
        object.__setattr__(self, "class_names", names)
        if self.normal_index is None:
            object.__setattr__(self, "normal_index", len(names) - 1)
        if len(names) < 2:
            raise ValueError("a label space needs at least two classes")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate class names in {names}")
        if not 0 <= self.normal_index < len(names):
            raise ValueError(f"normal_index {self.normal_index} out of range")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise ManifestError(f"unknown label name {name!r}; known: {list(self.class_names)}") from None


@dataclass(eq=False)
class FeatureBag:
    slide_id: str
    features: np.ndarray
    instance_labels: np.ndarray | None = None
    coords: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"bag {self.slide_id}: features must be a 2-D matrix")
        if self.instance_labels is not None:
            self.instance_labels = np.asarray(self.instance_labels, dtype=np.int64)
            if self.instance_labels.shape != (self.n_instances,):
                raise ValueError(f"bag {self.slide_id}: instance label count mismatch")
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
            if len(self.coords) != self.n_instances:
                raise ValueError(f"bag {self.slide_id}: coordinate count mismatch")

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def validate(self, n_classes: int | None = None) -> None:
        n, d = self.features.shape
        if n < 1:
            raise ValueError(f"bag {self.slide_id}: empty bag (N=0)")
        if d < 1:
            raise ValueError(f"bag {self.slide_id}: feature dim must be >= 1")
        if self.instance_labels is not None and n_classes is not None:
            if np.any(self.instance_labels < 0) or np.any(self.instance_labels >= n_classes):
                raise ValueError(f"bag {self.slide_id}: instance label outside [0, {n_classes})")
        if self.coords is not None:
            if len({tuple(c) for c in self.coords.tolist()}) != n:
                raise ValueError(f"bag {self.slide_id}: duplicate coordinates")


# -- binary formats -----------------------------------------------------------


def _write_header(fh, magic: bytes, *fields: int) -> None:
    for v in fields:
        if not 0 <= v <= _U32_MAX:
            raise OverflowError(f"header field {v} does not fit in u32")
    fh.write(magic)
    fh.write(struct.pack("<I", FORMAT_VERSION))
    fh.write(struct.pack(f"<{len(fields)}I", *fields))


def _read_header(raw: bytes, magic: bytes, n_fields: int, path) -> tuple[int, ...]:
    size = 8 + 4 * n_fields
    if len(raw) < size:
        raise BagFormatError(f"{path}: truncated header")
    if raw[:4] != magic:
        raise BagFormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise BagFormatError(f"{path}: unknown version {version}")
    return struct.unpack_from(f"<{n_fields}I", raw, 8)


def write_features(path, features: np.ndarray) -> None:
    features = np.asarray(features)
    n, d = features.shape
    if n < 1 or d < 1:
        raise ValueError(f"cannot write bag with shape {features.shape}")
    if n * d > _U32_MAX:
        raise OverflowError(f"N*d = {n * d} overflows the u32 header fields")
    with open(path, "wb") as fh:
        _write_header(fh, BAG_MAGIC, n, d)
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    n, d = _read_header(raw, BAG_MAGIC, 2, path)
    need = 16 + 4 * n * d
    if len(raw) < need:
        raise BagFormatError(f"{path}: truncated payload ({len(raw) - 16} of {4 * n * d} bytes)")
    return np.frombuffer(raw, dtype="<f4", count=n * d, offset=16).reshape(n, d).astype(np.float64)


def read_feature_shape(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        raw = fh.read(16)
    return _read_header(raw, BAG_MAGIC, 2, path)


def write_instance_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels > 0xFFFF):
        raise OverflowError("instance labels must fit in u16")
    with open(path, "wb") as fh:
        _write_header(fh, LABEL_MAGIC, len(labels))
        fh.write(labels.astype("<u2").tobytes())


def read_instance_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (n,) = _read_header(raw, LABEL_MAGIC, 1, path)
    if len(raw) < 12 + 2 * n:
        raise BagFormatError(f"{path}: truncated payload")
    return np.frombuffer(raw, dtype="<u2", count=n, offset=12).astype(np.int64)


def write_coords(path, coords) -> None:
    coords = np.asarray(coords).reshape(-1, 2)
    if np.any(coords < 0) or np.any(coords > _U32_MAX):
        raise OverflowError("coordinates must fit in u32")
    with open(path, "wb") as fh:
        _write_header(fh, COORD_MAGIC, len(coords))
        fh.write(coords.astype("<u4").tobytes())


def read_coords(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (n,) = _read_header(raw, COORD_MAGIC, 1, path)
    if len(raw) < 12 + 8 * n:
        raise BagFormatError(f"{path}: truncated payload")
    return np.frombuffer(raw, dtype="<u4", count=2 * n, offset=12).reshape(n, 2).astype(np.int64)


def _sidecar_paths(path: Path) -> tuple[Path, Path]:
    return path.with_suffix(".labels"), path.with_suffix(".coords")


def write_bag(bag: FeatureBag, path) -> None:
    """Write ``bag`` to ``path``; labels and coordinates go to sidecars.

    Sidecars sit next to the feature file with ``.labels`` / ``.coords``
    suffixes and are only written when the bag carries that data.
    """
    bag.validate()
    path = Path(path)
    write_features(path, bag.features)
    label_path, coord_path = _sidecar_paths(path)
    if bag.instance_labels is not None:
        write_instance_labels(label_path, bag.instance_labels)
    if bag.coords is not None:
        write_coords(coord_path, bag.coords)


def read_bag(path, slide_id: str | None = None, instance_label_path=None, coords_path=None) -> FeatureBag:
    path = Path(path)
    features = read_features(path)
    label_path, coord_path = _sidecar_paths(path)
    label_path = Path(instance_label_path) if instance_label_path else label_path
    coord_path = Path(coords_path) if coords_path else coord_path
    labels = read_instance_labels(label_path) if label_path.exists() else None
    coords = read_coords(coord_path) if coord_path.exists() else None
    for name, side in (("instance labels", labels), ("coordinates", coords)):
        if side is not None and len(side) != len(features):
            raise BagFormatError(f"{path}: {name} sidecar has {len(side)} rows, bag has {len(features)}")
    return FeatureBag(slide_id or path.stem, features, labels, coords)


# -- manifest -----------------------------------------------------------------


@dataclass
class SlideEntry:
    slide_id: str
    feature_path: Path
    slide_label: int
    split: str = "train"
    instance_label_path: Path | None = None
    coords_path: Path | None = None


@dataclass
class DatasetManifest:
    label_space: LabelSpace
    entries: list[SlideEntry]
    feature_dim: int
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[SlideEntry]:
        return [e for e in self.entries if e.split == name]

    def entry(self, slide_id: str) -> SlideEntry:
        for e in self.entries:
            if e.slide_id == slide_id:
                return e
        raise KeyError(slide_id)

    def load(self, entry: SlideEntry) -> FeatureBag:
        return read_bag(entry.feature_path, entry.slide_id, entry.instance_label_path, entry.coords_path)

    def to_json(self) -> dict:
        def rel(p):
            if p is None:
                return None
            try:
                return str(Path(p).relative_to(self.root))
            except ValueError:
                return str(p)

        return {
            "classes": list(self.label_space.class_names),
            "feature_dim": self.feature_dim,
            "slides": [
                {
                    "slide_id": e.slide_id,
                    "feature_path": rel(e.feature_path),
                    "slide_label": self.label_space.class_names[e.slide_label],
                    "split": e.split,
                    "instance_label_path": rel(e.instance_label_path),
                    "coords_path": rel(e.coords_path),
                }
                for e in self.entries
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def load_manifest(path) -> DatasetManifest:
    """Load and validate a JSON manifest.

    Relative paths resolve against the manifest's directory. Every bag header
    is read to check that the feature dimension agrees across the dataset.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    root = path.parent
    for key in ("classes", "slides"):
        if key not in doc:
            raise ManifestError(f"{path}: missing key {key!r}")
    space = LabelSpace(tuple(doc["classes"]))
    entries: list[SlideEntry] = []
    seen: set[str] = set()
    declared_dim = doc.get("feature_dim")
    dim = None
    for rec in doc["slides"]:
        sid = rec["slide_id"]
        if sid in seen:
            raise ManifestError(f"duplicate slide_id {sid!r}")
        seen.add(sid)
        label = rec["slide_label"]
        label = space.index(label) if isinstance(label, str) else int(label)
        if not 0 <= label < space.n_classes:
            raise ManifestError(f"slide {sid!r}: label index {label} out of range")
        split = rec.get("split", "train")
        if split not in ("train", "test"):
            raise ManifestError(f"slide {sid!r}: split must be train|test, got {split!r}")

        def resolve(key):
            val = rec.get(key)
            if val is None:
                return None
            p = Path(val)
            p = p if p.is_absolute() else root / p
            if not p.exists():
                raise ManifestError(f"slide {sid!r}: {key} {p} does not exist")
            return p

        fpath = resolve("feature_path")
        if fpath is None:
            raise ManifestError(f"slide {sid!r}: feature_path missing")
        n, d = read_feature_shape(fpath)
        if dim is None:
            dim = d
        elif d != dim:
            raise ManifestError(f"slide {sid!r}: feature dim {d} differs from {dim}")
        entries.append(
            SlideEntry(sid, fpath, label, split, resolve("instance_label_path"), resolve("coords_path"))
        )
    if dim is None:
        raise ManifestError(f"{path}: manifest lists no slides")
    if declared_dim is not None and int(declared_dim) != dim:
        raise ManifestError(f"declared feature_dim {declared_dim} but bags have d={dim}")
    return DatasetManifest(space, entries, dim, root)


# -- folds and sampling -------------------------------------------------------


@dataclass
class FoldAssignment:
    k: int
    assignment: dict[str, int]

    def fold_members(self, fold: int) -> list[str]:
        return [sid for sid, f in self.assignment.items() if f == fold]


def stratified_kfold(manifest: DatasetManifest, k: int, seed: int) -> FoldAssignment:
    """Stratified k-fold assignment over the train split.

    Each class is shuffled and dealt round-robin. The dealing pointer carries
    over between classes so fold sizes also stay within one of each other.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    train = manifest.split("train")
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    pointer = 0
    for c in range(manifest.label_space.n_classes):
        ids = sorted(e.slide_id for e in train if e.slide_label == c)
        if not ids:
            continue
        if len(ids) < k:
            logger.warning(
                "class %s has %d train slides < k=%d; some folds will lack it",
                manifest.label_space.class_names[c], len(ids), k,
            )
        for sid in (ids[i] for i in rng.permutation(len(ids))):
            assignment[sid] = pointer % k
            pointer += 1
    return FoldAssignment(k, {e.slide_id: assignment[e.slide_id] for e in train})


def balanced_sample_order(slide_labels: Sequence[int], epoch_length: int, seed) -> np.ndarray:
    """Indices drawn with replacement so that every class has equal probability."""
    labels = np.asarray(slide_labels)
    if labels.size == 0:
        raise ValueError("empty label set")
    classes = np.unique(labels)
    members = [np.flatnonzero(labels == c) for c in classes]
    rng = np.random.default_rng(seed)
    picks_class = rng.integers(0, len(classes), size=epoch_length)
    picks_within = rng.random(epoch_length)
    out = np.empty(epoch_length, dtype=np.int64)
    for ci, idx in enumerate(members):
        sel = picks_class == ci
        out[sel] = idx[(picks_within[sel] * len(idx)).astype(np.int64)]
    return out
