"""Command-line entry point.

Subcommands: ``gen-data`` (build the paired benchmark), ``train`` (one
adaptation run), ``eval`` (score a checkpoint on a split), ``ablate``
(contrast or crop-size sweep over seeds), and ``gradcheck`` (gradient and
oracle verification suites). Exit codes: 0 success, 1 validation error,
2 verification failure.

Configuration precedence: built-in defaults < ``--config`` file <
``--set key=value`` flags < dedicated flags such as ``--seed``. Every command
confines its writes to its output/run directory, into which it echoes the
resolved configuration, a version string, and the seed.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from pathlib import Path

from . import __version__
from .ablation import estimate_step_seconds, format_table, run_sweep
from .config import (ExperimentConfig, estimator_kwargs, resolve_config,
                     write_resolved)
from .estimator import DomainAdaptiveSegmenter
from .evaluation import (ConfusionMatrix, plot_iou_bars, plot_loss_curves,
                         report_from_confusion, write_report)
from .synth import generate_dataset, load_domain
from .trainer import model_from_checkpoint, predict_labels
from .validation import ValidationError, require


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as validation errors (exit 1)."""

    def error(self, message):
        raise ValidationError(f"{message}\n\n{self.format_usage()}")


def _add_config_flags(parser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")


def _version_string() -> str:
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        described = ""
    return f"pixpatch {__version__}" + (f" ({described})" if described else "")


def _write_run_info(run_dir: Path, config: ExperimentConfig, command: str,
                    seed: int) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(config, run_dir / "config.resolved")
    info = {"command": command, "argv": sys.argv[1:], "seed": seed,
            "version": _version_string()}
    (run_dir / "run_info.json").write_text(json.dumps(info, indent=2) + "\n")


def _target_split(config: ExperimentConfig, data_root: str):
    source = load_domain(data_root, "source")
    target = load_domain(data_root, "target")
    split = target.images.shape[0] - config.data.eval_count
    require(split >= 1, "eval_count leaves no target training samples")
    return source, target, split


# ---------------------------------------------------------------- commands


def _required_path(flag_value: str | None, config_value: str, flag: str,
                   usage: str) -> Path:
    value = flag_value if flag_value else config_value
    if not value:
        raise ValidationError(f"no path given: pass {flag} or set the config key\n\n"
                              f"usage: {usage}")
    return Path(value)


def cmd_gen_data(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["data.seed"] = args.seed
    config = resolve_config(args.config, args.set, overrides)
    out = _required_path(args.out, config.paths.data_root, "--out",
                         "pixpatch gen-data --out DIR [--seed N] [--force]")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValidationError(f"output directory {out} is not empty; "
                              f"pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    generate_dataset(config.data.source_spec(), config.data.target_spec(), out)
    _write_run_info(out, config, "gen-data", config.data.seed)
    print(f"wrote {2 * config.data.samples_per_domain} samples under {out}")
    return 0


def _train_overrides(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    if args.iterations is not None:
        overrides["train.iterations"] = args.iterations
    if args.no_pixel:
        overrides["train.enable_pixel"] = "false"
    if args.no_patch:
        overrides["train.enable_patch"] = "false"
    return overrides


def cmd_train(args) -> int:
    config = resolve_config(args.config, args.set, _train_overrides(args))
    data_root = _required_path(args.data, config.paths.data_root, "--data",
                               "pixpatch train --data DIR --out DIR")
    run_dir = _required_path(args.out, config.paths.run_dir, "--out",
                             "pixpatch train --data DIR --out DIR")
    _write_run_info(run_dir, config, "train", config.train.seed)

    source, target, split = _target_split(config, data_root)
    eval_images = target.images[split:] if config.data.eval_count else None
    eval_labels = target.labels[split:] if config.data.eval_count else None

    model = DomainAdaptiveSegmenter(**estimator_kwargs(config),
                                    run_dir=str(run_dir))
    model.fit(source.images, source.labels, target.images[:split],
              eval_images, eval_labels)

    if eval_images is not None:
        miou = model.score(eval_images, eval_labels)
        print(f"final target-eval mIoU: {miou:.4f}")
    print(f"run artifacts in {run_dir}")
    return 0


def cmd_eval(args) -> int:
    config = resolve_config(args.config, args.set)
    data_root = _required_path(args.data, config.paths.data_root, "--data",
                               "pixpatch eval --checkpoint FILE --data DIR")
    model, payload = model_from_checkpoint(args.checkpoint)
    class_count = payload["class_count"]

    source = load_domain(data_root, "source") if args.split == "source" else None
    if args.split == "source":
        images, labels = source.images, source.labels
    else:
        target = load_domain(data_root, "target")
        split = target.images.shape[0] - config.data.eval_count
        require(split >= 1, "eval_count leaves no target training samples")
        if args.split == "target_eval":
            images, labels = target.images[split:], target.labels[split:]
        elif args.split == "target_train":
            images, labels = target.images[:split], target.labels[:split]
        else:
            raise ValidationError(f"unknown split {args.split!r}")
    require(images.shape[0] > 0, f"split {args.split} is empty")

    predictions = predict_labels(model, images)
    cm = ConfusionMatrix(class_count)
    for pred, gt in zip(predictions, labels):
        cm.update(pred, gt)
    report = report_from_confusion(cm, split=args.split,
                                   extras={"checkpoint": str(args.checkpoint),
                                           "iteration": payload["iteration"]})
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report(report, out_dir / f"eval_{args.split}.json",
                 out_dir / f"eval_{args.split}.txt")
    if args.plots:
        plot_iou_bars(report, out_dir / f"eval_{args.split}_iou.png")
        metrics = Path(args.checkpoint).parent / "metrics.jsonl"
        if metrics.exists():
            records = [json.loads(line) for line in metrics.read_text().splitlines()]
            plot_loss_curves(records, out_dir / "loss_curves.png")
    print(report.table())
    return 0


def cmd_ablate(args) -> int:
    config = resolve_config(args.config, args.set,
                            {"train.iterations": args.iterations}
                            if args.iterations is not None else None)
    data_root = _required_path(args.data, config.paths.data_root, "--data",
                               "pixpatch ablate --data DIR --out DIR")
    out_dir = _required_path(args.out, config.paths.run_dir, "--out",
                             "pixpatch ablate --data DIR --out DIR")
    seeds = [config.train.seed + i for i in range(args.seeds)]

    n_runs = 4 * len(seeds)
    if args.max_minutes is not None:
        per_step = estimate_step_seconds(config, data_root)
        estimate_min = (n_runs * config.train.iterations * per_step
                        / max(args.jobs, 1)) / 60.0
        if estimate_min > args.max_minutes:
            raise ValidationError(
                f"estimated sweep time {estimate_min:.1f} min exceeds the "
                f"--max-minutes budget of {args.max_minutes}; reduce "
                f"train.iterations, seeds, or raise --jobs")

    _write_run_info(out_dir, config, "ablate", config.train.seed)
    results = run_sweep(config, data_root, out_dir, mode=args.mode,
                        seeds=seeds, jobs=args.jobs)
    print(format_table(results))
    print(f"sweep artifacts in {out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    from .verification import run_all_checks
    results = run_all_checks(grad_instances=args.grad_instances,
                             oracle_instances=args.oracle_instances,
                             grad_tolerance=args.tol,
                             oracle_tolerance=args.oracle_tol,
                             seed=args.seed if args.seed is not None else 0)
    for result in results:
        print(result.line())
    if all(r.passed for r in results):
        print("all checks passed")
        return 0
    print("verification FAILED", file=sys.stderr)
    return 2


# ------------------------------------------------------------------ parser


def build_parser() -> _Parser:
    parser = _Parser(prog="pixpatch",
                     description="pixel- and patch-contrastive domain-adaptive "
                                 "segmentation at desk scale")
    parser.add_argument("--version", action="version", version=_version_string())
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-data", help="generate the paired synthetic benchmark")
    _add_config_flags(p)
    p.add_argument("--out", help="dataset root (default: paths.data_root)")
    p.add_argument("--seed", type=int, help="override data.seed")
    p.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run one adaptation training")
    _add_config_flags(p)
    p.add_argument("--data", help="dataset root (default: paths.data_root)")
    p.add_argument("--out", help="run directory (default: paths.run_dir)")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--iterations", type=int, help="override train.iterations")
    p.add_argument("--no-pixel", action="store_true", help="disable pixel contrast")
    p.add_argument("--no-patch", action="store_true", help="disable patch contrast")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=False, help="checkpoint file")
    p.add_argument("--data", help="dataset root (default: paths.data_root)")
    p.add_argument("--split", default="target_eval",
                   choices=["target_eval", "target_train", "source"])
    p.add_argument("--out", help="report directory (default: checkpoint's)")
    p.add_argument("--plots", action="store_true", help="emit static plot images")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="contrast or crop-size sweep over seeds")
    _add_config_flags(p)
    p.add_argument("--data", help="dataset root (default: paths.data_root)")
    p.add_argument("--out", help="sweep directory (default: paths.run_dir)")
    p.add_argument("--mode", default="contrast", choices=["contrast", "crop-size"])
    p.add_argument("--seeds", type=int, default=3, help="number of seeds")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--iterations", type=int, help="override train.iterations")
    p.add_argument("--max-minutes", type=float,
                   help="refuse to start if the estimated runtime exceeds this")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference and oracle suites")
    p.add_argument("--tol", type=float, default=1e-4,
                   help="relative tolerance for gradient checks")
    p.add_argument("--oracle-tol", type=float, default=1e-6,
                   help="absolute tolerance for oracle equivalence")
    p.add_argument("--grad-instances", type=int, default=50)
    p.add_argument("--oracle-instances", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise ValidationError(parser.format_usage())
        if args.command == "eval" and not args.checkpoint:
            raise ValidationError("eval requires --checkpoint\n\n"
                                  + parser.format_usage())
        return args.fn(args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
