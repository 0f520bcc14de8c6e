"""Composite-loss training loop, cross-validation, checkpoints and gradient checks."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autograd as ag
from .archive import load_archive, save_archive
from .augment import AugmentConfig, make_views, view_rng
from .autograd import Tensor
from .contrastive import (
    UNLABELED,
    MemoryQueue,
    ema_update_key,
    init_projector,
    moco_loss,
    project,
    supcon_loss,
)
from .dataio import DatasetManifest, FeatureBag, LabelSpace, balanced_sample_order, stratified_kfold
from .evaluation import EvalReport, evaluate_model, macro_f1
from .models import (
    MODEL_KINDS,
    BagOutput,
    architecture,
    clam_instance_sampling,
    critical_supervision_targets,
    forward,
    init_params,
    predict_slide,
)
from .prototypes import (
    PrototypeBank,
    SoftLabelStore,
    init_prototypes,
    init_soft_labels,
    kl_instance_loss,
    prototype_ema_update,
    restricted_assign,
)

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    model: str = "mbdsmil_cl_pl"
    epochs: int = 100
    warmup_epochs: int = 20
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    q_dim: int = 64
    e_dim: int = 1024
    clam_hidden: int = 128
    clam_k: int = 8
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    tau: float = 0.07
    proto_momentum: float = 0.9
    label_momentum: float = 0.8
    key_momentum: float = 0.99
    label_prior: float = 0.5
    queue_capacity: int = 8192
    pseudo_label_source: str = "prototype"
    lambda_bag: float = 1.0
    lambda_inst: float = 1.0
    lambda_con: float = 1.0
    seed: int = 0
    folds: int = 5
    manifest: str | None = None

    def __post_init__(self):
        if isinstance(self.augment, Mapping):
            self.augment = _build(AugmentConfig, self.augment, "augment.")
        checks = [
            ("model", self.model in MODEL_KINDS, f"must be one of {MODEL_KINDS}"),
            ("epochs", self.epochs >= 0, "must be >= 0"),
            ("warmup_epochs", self.warmup_epochs >= 0, "must be >= 0"),
            ("learning_rate", self.learning_rate > 0, "must be > 0"),
            ("weight_decay", self.weight_decay >= 0, "must be >= 0"),
            ("q_dim", self.q_dim >= 1, "must be >= 1"),
            ("e_dim", self.e_dim >= 1, "must be >= 1"),
            ("clam_hidden", self.clam_hidden >= 1, "must be >= 1"),
            ("clam_k", self.clam_k >= 1, "must be >= 1"),
            ("tau", self.tau > 0, "must be > 0"),
            ("proto_momentum", 0 <= self.proto_momentum <= 1, "must lie in [0, 1]"),
            ("label_momentum", 0 <= self.label_momentum <= 1, "must lie in [0, 1]"),
            ("key_momentum", 0 <= self.key_momentum <= 1, "must lie in [0, 1]"),
            ("label_prior", 0 < self.label_prior < 1, "must lie in (0, 1)"),
            ("queue_capacity", self.queue_capacity >= 1, "must be >= 1"),
            ("pseudo_label_source", self.pseudo_label_source in ("prototype", "classifier"),
             "must be 'prototype' or 'classifier'"),
            ("lambda_bag", self.lambda_bag >= 0, "must be >= 0"),
            ("lambda_inst", self.lambda_inst >= 0, "must be >= 0"),
            ("lambda_con", self.lambda_con >= 0, "must be >= 0"),
            ("folds", self.folds >= 2, "must be >= 2"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{name} {msg} (got {getattr(self, name)!r})")
        if self.warmup_epochs > self.epochs:
            raise ConfigError(f"warmup_epochs must be <= epochs (got {self.warmup_epochs} > {self.epochs})")

    @property
    def contrastive(self) -> bool:
        return self.model.endswith("_cl_pl")

    @property
    def uses_prototypes(self) -> bool:
        return self.contrastive and self.pseudo_label_source == "prototype"

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, doc: Mapping) -> "TrainConfig":
        return _build(cls, doc)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_json(doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))


def _build(cls, doc: Mapping, prefix: str = ""):
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{prefix or 'config'} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config key {prefix}{unknown[0]}")
    try:
        return cls(**doc)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from None


# -- optimiser ----------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _decays(name: str) -> bool:
    return not name.endswith(".b")


def adam_step(params: dict, grads: Mapping, state: OptimizerState, lr: float, weight_decay: float) -> None:
    """AdamW update in place. Biases (names ending ``.b``) are not decayed."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        theta = params[name]
        if theta.shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {theta.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        if weight_decay and _decays(name):
            theta = theta - lr * weight_decay * theta
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        params[name] = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# -- losses -------------------------------------------------------------------


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    return -(ag.log_softmax(logits, axis=-1)[int(target)])


@dataclass
class ContrastiveBatch:
    """Everything the contrastive term needs for one bag."""

    queries: Tensor  # N x e, weak views through g_q
    keys: np.ndarray  # N x e, strong views through g_k
    labels: np.ndarray | None  # anchor/key pseudo-labels; None during warmup
    queue_keys: np.ndarray
    queue_labels: np.ndarray


def compute_losses(kind: str, out: BagOutput, slide_label: int, normal_index: int, config: TrainConfig,
                   epoch: int, soft: np.ndarray | None = None, contrast: ContrastiveBatch | None = None):
    """Return ``(L_bag, L_inst, L_con, total)`` for one bag."""
    arch = architecture(kind)
    n_classes = out.bag_logits.shape[0]
    l_bag = cross_entropy(out.bag_logits, slide_label)
    if arch == "clam":
        samples = clam_instance_sampling(out.attention, slide_label, config.clam_k, normal_index)
        if samples:
            idx = np.array([s[0] for s in samples])
            branch = np.array([s[1] for s in samples])
            target = np.array([s[2] for s in samples])
            pairs = out.instance_pair_logits[(idx, branch)]
            l_inst = -(ag.log_softmax(pairs, axis=1)[(np.arange(len(samples)), target)]).mean()
        else:
            l_inst = Tensor(0.0)
    elif soft is not None:
        l_inst = kl_instance_loss(out.instance_logits, soft)
    else:
        space = LabelSpace(tuple(str(i) for i in range(n_classes)), normal_index)
        targets = critical_supervision_targets(slide_label, space)
        rows = out.instance_logits[out.critical_indices]
        l_inst = -(ag.log_softmax(rows, axis=1)[(np.arange(n_classes), targets)]).mean()
    if contrast is None:
        l_con = Tensor(0.0)
    elif epoch < config.warmup_epochs:
        l_con = moco_loss(contrast.queries, contrast.keys, contrast.queue_keys, config.tau)
    else:
        cand = np.concatenate([contrast.keys, contrast.queue_keys], axis=0)
        cand_labels = np.concatenate([contrast.labels, contrast.queue_labels])
        l_con = supcon_loss(contrast.queries, contrast.labels, cand, cand_labels, config.tau)
    total = l_bag * config.lambda_bag + l_inst * config.lambda_inst + l_con * config.lambda_con
    return l_bag, l_inst, l_con, total


# -- training state -----------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    params: dict
    proj_q: dict | None = None
    proj_k: dict | None = None
    opt: OptimizerState = field(default_factory=OptimizerState)
    bank: PrototypeBank | None = None
    queue: MemoryQueue | None = None
    soft: SoftLabelStore | None = None
    epoch: int = 0
    fold: int = -1

    def trainable(self) -> dict:
        out = {f"model/{k}": v for k, v in self.params.items()}
        if self.proj_q is not None:
            out.update({f"proj_q/{k}": v for k, v in self.proj_q.items()})
        return out

    def set_trainable(self, values: Mapping) -> None:
        for key, value in values.items():
            group, name = key.split("/", 1)
            (self.params if group == "model" else self.proj_q)[name] = value

    def tensors(self) -> dict:
        """Checkpoint payload, excluding the soft-label sidecar."""
        out = dict(self.trainable())
        if self.proj_k is not None:
            out.update({f"proj_k/{k}": v for k, v in self.proj_k.items()})
        for k, v in self.opt.m.items():
            out[f"adam/m/{k}"] = v
        for k, v in self.opt.v.items():
            out[f"adam/v/{k}"] = v
        out["adam/step"] = np.array([self.opt.step], dtype=np.float64)
        if self.bank is not None:
            out["proto/mu"] = self.bank.mu
            out["proto/momentum"] = np.array([self.bank.momentum])
        if self.queue is not None:
            out.update(self.queue.state())
        out["state/epoch"] = np.array([self.epoch], dtype=np.float64)
        out["state/fold"] = np.array([self.fold], dtype=np.float64)
        return out

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_archive(directory / "checkpoint.milw", self.tensors())
        if self.soft is not None:
            save_archive(directory / "soft_labels.milw", self.soft.state())
        self.config.save(directory / "config.json")
        return directory

    @classmethod
    def load(cls, directory) -> "TrainState":
        directory = Path(directory)
        config = TrainConfig.load(directory / "config.json")
        t = load_archive(directory / "checkpoint.milw")

        def group(prefix):
            items = {k[len(prefix):]: v for k, v in t.items() if k.startswith(prefix)}
            return items or None

        opt = OptimizerState(group("adam/m/") or {}, group("adam/v/") or {}, int(t["adam/step"][0]))
        bank = PrototypeBank(t["proto/mu"], float(t["proto/momentum"][0])) if "proto/mu" in t else None
        queue = MemoryQueue.from_state(t) if "queue/meta" in t else None
        soft_path = directory / "soft_labels.milw"
        soft = SoftLabelStore.from_state(load_archive(soft_path)) if soft_path.exists() else None
        return cls(config, group("model/"), group("proj_q/"), group("proj_k/"), opt, bank, queue, soft,
                   int(t["state/epoch"][0]), int(t["state/fold"][0]))


def init_state(manifest: DatasetManifest, config: TrainConfig, fold: int = -1) -> TrainState:
    space = manifest.label_space
    C, d = space.n_classes, manifest.feature_dim
    params = init_params(config.model, C, d, config.q_dim, config.clam_hidden, config.seed)
    state = TrainState(config, params, fold=fold)
    if config.contrastive:
        state.proj_q = init_projector(d, config.e_dim, config.seed)
        state.proj_k = {k: v.copy() for k, v in state.proj_q.items()}
        state.queue = MemoryQueue(config.queue_capacity, config.e_dim)
        if config.uses_prototypes:
            state.bank = init_prototypes(C, config.e_dim, config.seed, config.proto_momentum)
            state.soft = init_soft_labels(manifest, "train", config.label_prior, config.label_momentum)
    return state


# -- one bag ------------------------------------------------------------------


@dataclass
class BagContext:
    """Frozen per-step inputs: views, keys, queue snapshot and targets."""

    bag: FeatureBag
    slide_label: int
    normal_index: int
    epoch: int
    weak: np.ndarray | None = None
    keys: np.ndarray | None = None
    anchor_labels: np.ndarray | None = None
    queue_keys: np.ndarray | None = None
    queue_labels: np.ndarray | None = None
    soft: np.ndarray | None = None


def prepare_context(state: TrainState, bag: FeatureBag, slide_label: int, normal_index: int, epoch: int) -> BagContext:
    cfg = state.config
    ctx = BagContext(bag, slide_label, normal_index, epoch)
    if not cfg.contrastive:
        return ctx
    weak, strong = make_views(
        bag.features, cfg.augment,
        view_rng(cfg.seed, bag.slide_id, epoch, 0), view_rng(cfg.seed, bag.slide_id, epoch, 1),
    )
    ctx.weak = weak
    ctx.keys = project(state.proj_k, strong).data
    ctx.queue_keys, ctx.queue_labels = state.queue.contents()
    if epoch >= cfg.warmup_epochs:
        ctx.anchor_labels = _pseudo_labels(state, ctx)
    if cfg.uses_prototypes:
        ctx.soft = state.soft[bag.slide_id]
    return ctx


def _pseudo_labels(state: TrainState, ctx: BagContext) -> np.ndarray:
    n = ctx.bag.n_instances
    if ctx.slide_label == ctx.normal_index:
        return np.full(n, ctx.normal_index, dtype=np.int64)
    if state.config.uses_prototypes:
        return state.soft.hard_labels(ctx.bag.slide_id, ctx.slide_label, ctx.normal_index)
    out = forward(state.config.model, state.params, ctx.bag.features)
    logits = out.instance_logits.data
    return np.where(logits[:, ctx.slide_label] > logits[:, ctx.normal_index], ctx.slide_label, ctx.normal_index)


def bag_loss(state: TrainState, ctx: BagContext, trainable: Mapping):
    """Total loss as a function of ``trainable`` (arrays or tensor leaves)."""
    cfg = state.config
    model = {k[len("model/"):]: v for k, v in trainable.items() if k.startswith("model/")}
    out = forward(cfg.model, model, ctx.bag.features)
    contrast = None
    if cfg.contrastive:
        proj = {k[len("proj_q/"):]: v for k, v in trainable.items() if k.startswith("proj_q/")}
        queries = project(proj, ctx.weak)
        contrast = ContrastiveBatch(queries, ctx.keys, ctx.anchor_labels, ctx.queue_keys, ctx.queue_labels)
    losses = compute_losses(cfg.model, out, ctx.slide_label, ctx.normal_index, cfg, ctx.epoch, ctx.soft, contrast)
    return losses, out, contrast


def analytic_gradients(state: TrainState, ctx: BagContext):
    leaves = {k: Tensor(v, requires_grad=True) for k, v in state.trainable().items()}
    losses, out, contrast = bag_loss(state, ctx, leaves)
    losses[3].backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return grads, losses, out, contrast


def train_step(state: TrainState, ctx: BagContext) -> dict:
    cfg = state.config
    grads, losses, out, contrast = analytic_gradients(state, ctx)
    values = {name: float(l.data) for name, l in zip(("bag", "inst", "con", "total"), losses)}
    if not all(np.isfinite(v) for v in values.values()):
        raise NonFiniteError(f"non-finite loss on slide {ctx.bag.slide_id!r}: {values}")
    params = state.trainable()
    try:
        adam_step(params, grads, state.opt, cfg.learning_rate, cfg.weight_decay)
    except NonFiniteError as exc:
        raise NonFiniteError(f"slide {ctx.bag.slide_id!r}: {exc}") from None
    state.set_trainable(params)
    if cfg.contrastive:
        _post_step_updates(state, ctx, contrast.queries.data)
    return values


def _post_step_updates(state: TrainState, ctx: BagContext, weak_proj: np.ndarray) -> None:
    cfg = state.config
    sid, y, normal = ctx.bag.slide_id, ctx.slide_label, ctx.normal_index
    if cfg.uses_prototypes:
        s = state.soft[sid]
        for j in range(len(weak_proj)):
            if y == normal:
                y_hat = normal
            else:
                z = restricted_assign(weak_proj[j], state.bank, y, normal)
                s[j] = cfg.label_momentum * s[j] + (1.0 - cfg.label_momentum) * z
                y_hat = int(np.argmax(z))
            prototype_ema_update(state.bank, y_hat, weak_proj[j])
    if ctx.epoch < cfg.warmup_epochs:
        labels = np.full(len(ctx.keys), UNLABELED)
    else:
        labels = _pseudo_labels(state, ctx)
    state.queue.push(ctx.keys, labels)
    ema_update_key(state.proj_k, state.proj_q, cfg.key_momentum)


# -- folds --------------------------------------------------------------------


@dataclass
class TrainResult:
    state: TrainState
    log: list[dict]
    val_entries: list
    train_entries: list


def fold_entries(manifest: DatasetManifest, fold: int, config: TrainConfig):
    train = manifest.split("train")
    if fold < 0:
        return train, []
    folds = stratified_kfold(manifest, config.folds, config.seed)
    if not 0 <= fold < folds.k:
        raise ValueError(f"fold {fold} out of range for k={folds.k}")
    val = [e for e in train if folds.assignment[e.slide_id] == fold]
    return [e for e in train if folds.assignment[e.slide_id] != fold], val


def validation_f1(state: TrainState, manifest: DatasetManifest, entries) -> float | None:
    if not entries:
        return None
    space = manifest.label_space
    preds = [
        predict_slide(state.config.model, forward(state.config.model, state.params, manifest.load(e).features),
                      space.normal_index)
        for e in entries
    ]
    return macro_f1(preds, [e.slide_label for e in entries], space.n_classes)


def train_fold(manifest: DatasetManifest, fold: int, config: TrainConfig, out_dir=None,
               resume_from=None, stop_after_epoch: int | None = None) -> TrainResult:
    """Train one fold (``fold=-1`` trains on the full train split).

    With ``out_dir`` the final checkpoint goes to ``out_dir/checkpoint`` and
    one JSON line per epoch is appended to ``out_dir/log.jsonl``.
    ``stop_after_epoch`` ends training early (for resume tests); the saved
    checkpoint then continues exactly where it stopped.
    """
    space = manifest.label_space
    state = TrainState.load(resume_from) if resume_from else init_state(manifest, config, fold)
    if resume_from:
        config = state.config
        fold = state.fold
    train, val = fold_entries(manifest, fold, config)
    bags = {e.slide_id: manifest.load(e) for e in train}
    labels = [e.slide_label for e in train]
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    log: list[dict] = []
    last = config.epochs if stop_after_epoch is None else min(config.epochs, stop_after_epoch)
    for epoch in range(state.epoch, last):
        if config.contrastive and epoch == config.warmup_epochs and epoch > 0:
            state.queue.clear()
        order = balanced_sample_order(labels, len(train), [config.seed, fold + 1, epoch])
        totals = {"bag": 0.0, "inst": 0.0, "con": 0.0, "total": 0.0}
        for i in order:
            e = train[i]
            ctx = prepare_context(state, bags[e.slide_id], e.slide_label, space.normal_index, epoch)
            values = train_step(state, ctx)
            for k in totals:
                totals[k] += values[k]
        state.epoch = epoch + 1
        record = {"epoch": epoch, **{f"loss_{k}": v / max(len(order), 1) for k, v in totals.items()},
                  "val_macro_f1": validation_f1(state, manifest, val)}
        log.append(record)
        logger.info("fold %d epoch %d %s", fold, epoch, record)
        if out_dir:
            with open(out_dir / "log.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
    if out_dir:
        state.save(out_dir / "checkpoint")
    return TrainResult(state, log, val, train)


METRICS = ("slide_macro_f1", "slide_ovr_auc", "instance_macro_f1", "instance_ovr_auc",
           "gt_vs_normal_f1", "gt_vs_normal_auc", "attention_auc")


def summarize(reports: list[EvalReport]) -> dict:
    summary = {}
    for name in METRICS:
        values = [getattr(r, name) for r in reports]
        if any(v is None for v in values):
            continue
        summary[name] = {"mean": float(np.mean(values)), "std": float(np.std(values)), "per_fold": values}
    return summary


def run_cross_validation(manifest: DatasetManifest, config: TrainConfig, out_dir=None) -> dict:
    """Train every fold, evaluate each on the held-out test split, summarise."""
    test = manifest.split("test")
    reports, logs = [], []
    out_dir = Path(out_dir) if out_dir else None
    for fold in range(config.folds):
        fold_dir = out_dir / f"fold_{fold}" if out_dir else None
        result = train_fold(manifest, fold, config, fold_dir)
        entries = test or result.val_entries
        report = evaluate_model(config.model, result.state.params, manifest, entries)
        if fold_dir:
            report.save(fold_dir / "report.json")
        reports.append(report)
        logs.append(result.log)
    summary = {"model": config.model, "folds": config.folds, "metrics": summarize(reports),
               "reports": [r.to_json() for r in reports]}
    if out_dir:
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    summary["logs"] = logs
    return summary


# -- gradient check -----------------------------------------------------------


def gradient_check(state: TrainState, ctx: BagContext, step: float = 1e-6) -> dict:
    """Compare analytic gradients of the total loss with central differences.

    Returns ``{"max_rel_error": float, "groups": {name: rel_error}}`` where a
    group's error is ``|a - n|_2 / max(|a|_2, |n|_2)`` (0 when both vanish).
    """
    grads, *_ = analytic_gradients(state, ctx)
    base = state.trainable()
    errors = {}
    for name, value in base.items():
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            probe = dict(base)
            plus = value.copy()
            plus.reshape(-1)[i] = orig + step
            probe[name] = plus
            f_plus = float(bag_loss(state, ctx, probe)[0][3].data)
            minus = value.copy()
            minus.reshape(-1)[i] = orig - step
            probe[name] = minus
            f_minus = float(bag_loss(state, ctx, probe)[0][3].data)
            num_flat[i] = (f_plus - f_minus) / (2 * step)
        a = grads[name]
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric))
        errors[name] = 0.0 if scale < 1e-12 else float(np.linalg.norm(a - numeric) / scale)
    return {"max_rel_error": max(errors.values()), "groups": errors}


def gradcheck_setup(kind: str, bag: FeatureBag, slide_label: int, n_classes: int, config: TrainConfig | None = None,
                    epoch: int | None = None, queue_size: int = 6) -> tuple[TrainState, BagContext]:
    """Small self-contained state for :func:`gradient_check` on one bag.

    The queue is pre-filled with random unit keys so both contrastive terms
    see negatives; ``epoch`` defaults to the supervised contrastive phase.
    """
    cfg = config or TrainConfig(model=kind, q_dim=4, e_dim=6, clam_hidden=5, clam_k=1, warmup_epochs=1, epochs=2)
    normal = n_classes - 1
    d = bag.dim
    state = TrainState(cfg, init_params(kind, n_classes, d, cfg.q_dim, cfg.clam_hidden, cfg.seed))
    rng = np.random.default_rng(cfg.seed + 99)
    # spread parameters so no logit sits near a tie
    state.params = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in state.params.items()}
    if cfg.contrastive:
        state.proj_q = init_projector(d, cfg.e_dim, cfg.seed)
        state.proj_k = {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in state.proj_q.items()}
        state.queue = MemoryQueue(cfg.queue_capacity, cfg.e_dim)
        keys = rng.standard_normal((queue_size, cfg.e_dim))
        state.queue.push(keys / np.linalg.norm(keys, axis=1, keepdims=True), rng.integers(0, n_classes, queue_size))
        if cfg.uses_prototypes:
            state.bank = init_prototypes(n_classes, cfg.e_dim, cfg.seed)
            s = np.zeros((bag.n_instances, n_classes))
            s[:, slide_label] = rng.uniform(0.2, 0.8, bag.n_instances)
            s[:, normal] += 1.0 - s[:, slide_label]
            state.soft = SoftLabelStore({bag.slide_id: s})
    ctx = prepare_context(state, bag, slide_label, normal, cfg.warmup_epochs if epoch is None else epoch)
    return state, ctx
