#!/usr/bin/env python3
"""
Laplace-LoRA - CLI entry point

Usage:
    laplace-lora all --config configs/smoke.ini              # train, evaluate, report
    laplace-lora train --config configs/smoke.ini --seeds 0,1
    laplace-lora laplace --checkpoint results/checkpoints/seed0/step500.ckpt
    laplace-lora evaluate --checkpoint CKPT --posterior CURV --bins-out bins.csv
    laplace-lora report --results results/results.csv --step 1000
    laplace-lora --version
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import softmax

from laplace_lora.config import (
    ExperimentConfig,
    FisherVariant,
    Predictor,
    RuntimeSettings,
    Scope,
    describe_keys,
    load_config,
)
from laplace_lora.core.errors import LaplaceLoraError
from laplace_lora.core.laplace import load_posterior, save_posterior
from laplace_lora.core.lora_net import load_checkpoint, predict_logits, save_checkpoint
from laplace_lora.core.predict import predict_dataset
from laplace_lora.data import apply_shifts
from laplace_lora.metrics import EceConfig, EvalRecords, evaluate, reliability_table
from laplace_lora.orchestrator import (
    RunResult,
    fit_laplace,
    method_name,
    prepare_data,
    run_experiment,
    train_seed,
)
from laplace_lora.report import emit_report

logger = logging.getLogger("laplace-lora.cli")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", "-c", help="INI experiment configuration")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override a configuration key (repeatable)",
    )
    parser.add_argument("--seeds", help="Comma-separated training seeds (experiment.seeds)")
    parser.add_argument("--steps", type=int, help="Training steps (train.steps)")
    parser.add_argument("--out", "-o", help="Output directory (experiment.output_dir)")
    parser.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level (default: $LAPLACE_LORA_LOG_LEVEL or INFO)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="laplace-lora",
        description="Laplace-LoRA - post-hoc Laplace posteriors for LoRA classifiers",
        epilog=describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", "-v", action="store_true", help="Show version")
    sub = parser.add_subparsers(dest="command")

    train = sub.add_parser("train", help="Train MAP adapters and save checkpoints")
    _add_common(train)

    laplace = sub.add_parser("laplace", help="Fit curvature and tune lambda on a checkpoint")
    _add_common(laplace)
    laplace.add_argument("--checkpoint", required=True, help="Checkpoint file")
    laplace.add_argument(
        "--scope",
        choices=[s.value for s in Scope],
        help="LA, LLLA or FIRSTK (see laplace.first_layers)",
    )
    laplace.add_argument(
        "--variant", choices=[v.value for v in FisherVariant], help="Fisher variant"
    )
    laplace.add_argument("--seed", type=int, default=0, help="Curvature sampling seed")
    laplace.add_argument("--output", help="Curvature file (default: next to --out)")

    evaluate_cmd = sub.add_parser("evaluate", help="Score a checkpoint on the test set")
    _add_common(evaluate_cmd)
    evaluate_cmd.add_argument("--checkpoint", required=True, help="Checkpoint file")
    evaluate_cmd.add_argument("--posterior", help="Curvature file; omit to score MAP")
    evaluate_cmd.add_argument("--shift", help="Shift applied to the test set, e.g. rotate:90")
    evaluate_cmd.add_argument("--seed", type=int, default=0, help="Sampling seed")
    evaluate_cmd.add_argument("--bins-out", help="Write the reliability table CSV here")

    report = sub.add_parser("report", help="Render summary and curves from results.csv")
    _add_common(report)
    report.add_argument("--results", help="results.csv (default: <out>/results.csv)")
    report.add_argument("--step", type=int, help="Checkpoint step for the summary")

    run_all = sub.add_parser("all", help="Train, evaluate every checkpoint and report")
    _add_common(run_all)
    run_all.add_argument("--step", type=int, help="Checkpoint step for the summary")
    return parser


def _configure_logging(args: argparse.Namespace, settings: RuntimeSettings) -> None:
    level = getattr(args, "log_level", None) or settings.log_level
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )


def _load(args: argparse.Namespace, settings: RuntimeSettings) -> ExperimentConfig:
    overrides: List[str] = []
    if settings.output_dir:
        overrides.append(f"experiment.output_dir={settings.output_dir}")
    overrides.extend(args.overrides)
    if args.seeds:
        overrides.append(f"experiment.seeds={args.seeds}")
    if args.steps is not None:
        overrides.append(f"train.steps={args.steps}")
    if args.out:
        overrides.append(f"experiment.output_dir={args.out}")
    return load_config(args.config, overrides)


def _cmd_train(cfg: ExperimentConfig) -> int:
    data = prepare_data(cfg)
    root = Path(cfg.experiment.output_dir) / "checkpoints"
    for seed in cfg.experiment.seeds:
        for ckpt in train_seed(cfg, data.fit, seed):
            target = root / f"seed{seed}" / f"step{ckpt.step}.ckpt"
            path = save_checkpoint(ckpt.net, target, ckpt.step)
            print(f"✅ {path}")
    return 0


def _cmd_laplace(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    net, step = load_checkpoint(args.checkpoint)
    scope = Scope(args.scope) if args.scope else cfg.laplace.scopes[0]
    variant = FisherVariant(args.variant) if args.variant else cfg.laplace.variants[0]
    data = prepare_data(cfg)
    tuned = fit_laplace(cfg, net, data, scope, variant, args.seed)
    target = args.output or (
        Path(cfg.experiment.output_dir)
        / "posteriors"
        / f"{method_name(scope, variant, cfg.laplace.first_layers)}_step{step}.curv"
    )
    path = save_posterior(tuned.posterior, target, cfg.laplace.tuning)
    print(f"✅ {path} (lambda={np.round(tuned.prior_precision, 6).tolist()})")
    return 0


def _cmd_evaluate(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    net, _ = load_checkpoint(args.checkpoint)
    test = prepare_data(cfg).test
    if args.shift:
        test = apply_shifts(test, args.shift, args.seed)

    if args.posterior:
        post, _ = load_posterior(args.posterior)
        predictor = Predictor(cfg.predict.predictor)
        probs = predict_dataset(
            net, post, test.features, {"la": predictor}, cfg.predict.n_samples, args.seed
        )["la"]
    else:
        probs = softmax(predict_logits(net, test.features), axis=1)

    records = EvalRecords(probs, test.labels)
    ece_cfg = EceConfig(cfg.experiment.ece_bins)
    for name, value in evaluate(records, ece_cfg).items():
        print(f"{name}: {value:.6f}")
    if args.bins_out:
        target = Path(args.bins_out)
        target.parent.mkdir(parents=True, exist_ok=True)
        reliability_table(records, ece_cfg).to_csv(target, index=False, float_format="%.17g")
        print(f"✅ Reliability table written to {target}")
    return 0


def _cmd_report(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    out = Path(cfg.experiment.output_dir)
    source = Path(args.results) if args.results else out / "results.csv"
    if not source.exists():
        print(f"Error: results file not found: {source}", file=sys.stderr)
        return 1
    for path in emit_report(RunResult.from_csv(source), out, args.step):
        print(f"✅ {path}")
    return 0


def _cmd_all(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    out = Path(cfg.experiment.output_dir)
    result = run_experiment(cfg, out)
    for path in emit_report(result, out, args.step):
        print(f"✅ {path}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for CLI"""
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.version:
        from laplace_lora import __version__

        print(f"laplace-lora {__version__}")
        return 0
    if not args.command:
        parser.print_help()
        return 1

    settings = RuntimeSettings.from_env()
    _configure_logging(args, settings)
    try:
        cfg = _load(args, settings)
        if args.command == "train":
            return _cmd_train(cfg)
        if args.command == "laplace":
            return _cmd_laplace(cfg, args)
        if args.command == "evaluate":
            return _cmd_evaluate(cfg, args)
        if args.command == "report":
            return _cmd_report(cfg, args)
        return _cmd_all(cfg, args)
    except LaplaceLoraError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
