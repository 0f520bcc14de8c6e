"""Command-line entry point: ``protomil <subcommand> ...``.

Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime failure.
Every subcommand writes ``resolved_config.json`` (all defaults filled in) to
its output location.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .dataio import FeatureBag, LabelSpace, ManifestError, load_manifest
from .evaluation import BagDump, dump_bag, evaluate_model, export_heatmap
from .models import MODEL_KINDS
from .synth import SynthConfig, generate_dataset
from .training import (
    ConfigError,
    TrainConfig,
    TrainState,
    gradcheck_setup,
    gradient_check,
    run_cross_validation,
    train_fold,
)

logger = logging.getLogger("protomil")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; 2 is reserved for runtime failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="protomil", description="Weakly supervised MIL toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic benchmark dataset")
    p.add_argument("--config", help="SynthConfig JSON (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    for name, text in (("train", "train one fold, or all training slides with --fold -1"),
                       ("cv", "k-fold cross-validation with test-split evaluation")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="TrainConfig JSON")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--manifest", help="overrides the config's manifest path")
        if name == "train":
            p.add_argument("--fold", type=int, default=-1)
            p.add_argument("--resume", help="checkpoint directory to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")

    p = sub.add_parser("heatmap", help="export per-instance scores of one slide")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--slide", required=True)
    p.add_argument("--out", required=True, help="output file")
    p.add_argument("--manifest")
    p.add_argument("--mode", choices=("pgm", "csv"), default="pgm")
    p.add_argument("--score", choices=("attention", "gt_vs_normal"), default="attention")

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--config", help="TrainConfig JSON; its model is checked (all models if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--tolerance", type=float, default=1e-5)
    return parser


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def _train_config(args) -> TrainConfig:
    config = TrainConfig.load(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if getattr(args, "manifest", None):
        config.manifest = args.manifest
    if not config.manifest:
        raise ConfigError("manifest must name a dataset manifest (config field or --manifest)")
    config.manifest = str(Path(config.manifest).resolve())
    return config


def _checkpoint_and_manifest(args):
    state = TrainState.load(args.checkpoint)
    path = args.manifest or state.config.manifest
    if not path:
        raise ConfigError("manifest: checkpoint config has none; pass --manifest")
    return state, load_manifest(path)


def cmd_synth(args) -> int:
    try:
        doc = json.loads(Path(args.config).read_text()) if args.config else {}
        if args.seed is not None:
            doc["seed"] = args.seed
        config = SynthConfig.from_json(doc)
    except (TypeError, ValueError) as exc:  # JSONDecodeError is a ValueError
        raise ConfigError(f"synth config: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", config.to_json())
    manifest = generate_dataset(config, out)
    print(f"wrote {len(manifest.entries)} slides to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _train_config(args)
    manifest = load_manifest(config.manifest)
    out = Path(args.out)
    _write_json(out / "resolved_config.json", config.to_json())
    result = train_fold(manifest, args.fold, config, out, resume_from=args.resume)
    last = result.log[-1] if result.log else {}
    print(f"trained fold {args.fold} to epoch {result.state.epoch}: {json.dumps(last)}")
    return EXIT_OK


def cmd_cv(args) -> int:
    config = _train_config(args)
    manifest = load_manifest(config.manifest)
    out = Path(args.out)
    _write_json(out / "resolved_config.json", config.to_json())
    summary = run_cross_validation(manifest, config, out)
    for name, stats in summary["metrics"].items():
        print(f"{name}: {stats['mean']:.4f} +/- {stats['std']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state, manifest = _checkpoint_and_manifest(args)
    entries = manifest.split(args.split)
    if not entries:
        raise ConfigError(f"split: manifest has no slides in split {args.split!r}")
    out = Path(args.out)
    _write_json(out / "resolved_config.json", {**state.config.to_json(), "split": args.split})
    report = evaluate_model(state.config.model, state.params, manifest, entries)
    report.save(out / "report.json")
    print(json.dumps({k: v for k, v in report.to_json().items() if "confusion" not in k}))
    return EXIT_OK


def _heatmap_scores(dump: BagDump, score: str, normal_index: int) -> np.ndarray:
    if score == "gt_vs_normal":
        if dump.gt_normal_scores is None:
            raise ConfigError("score: gt_vs_normal is undefined for normal slides")
        return dump.gt_normal_scores
    branch = dump.slide_label if dump.slide_label != normal_index else dump.slide_pred
    return dump.attention[min(branch, dump.attention.shape[0] - 1)]


def cmd_heatmap(args) -> int:
    state, manifest = _checkpoint_and_manifest(args)
    try:
        entry = manifest.entry(args.slide)
    except KeyError:
        raise ConfigError(f"slide: {args.slide!r} is not in the manifest") from None
    bag = manifest.load(entry)
    normal = manifest.label_space.normal_index
    dump = dump_bag(state.config.model, state.params, bag, entry.slide_label, normal)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out.parent / "resolved_config.json",
                {**state.config.to_json(), "slide": args.slide, "mode": args.mode, "score": args.score})
    export_heatmap(bag, _heatmap_scores(dump, args.score, normal), out, args.mode)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    base = TrainConfig.load(args.config).to_json() if args.config else None
    kinds = [base["model"]] if base else list(MODEL_KINDS)
    seed = args.seed if args.seed is not None else (base["seed"] if base else 0)
    rng = np.random.default_rng(seed)
    space = LabelSpace(("a", "b", "normal"))
    bag = FeatureBag("gradcheck", rng.standard_normal((4, 8)))
    results = {}
    for kind in kinds:
        small = {"model": kind, "q_dim": 4, "e_dim": 6, "clam_hidden": 5, "clam_k": 1,
                 "warmup_epochs": 1, "epochs": 2, "seed": seed}
        config = TrainConfig.from_json({**(base or {}), **small})
        phases = (0, 1) if config.contrastive else (1,)
        for epoch in phases:
            state, ctx = gradcheck_setup(kind, bag, 0, space.n_classes, config, epoch=epoch)
            err = gradient_check(state, ctx)["max_rel_error"]
            results[kind if len(phases) == 1 else f"{kind}@epoch{epoch}"] = err
    out = Path(args.out)
    _write_json(out / "resolved_config.json", {"models": kinds, "seed": seed, "tolerance": args.tolerance})
    _write_json(out / "gradcheck.json", results)
    worst = max(results.values())
    for name, err in results.items():
        print(f"{name}: max relative error {err:.3e}")
    if worst > args.tolerance:
        logger.error("gradient check failed: %.3e > %.1e", worst, args.tolerance)
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "cv": cmd_cv, "eval": cmd_eval,
            "heatmap": cmd_heatmap, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ManifestError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
