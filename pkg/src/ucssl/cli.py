"""Command line: ``ucssl <command> [--config PATH] [--seed N] [--out DIR] [--dry-run] [--resume]``.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 interrupted (rerun
with ``--resume`` to continue).
"""
from __future__ import annotations

import argparse
import signal
import sys
from dataclasses import replace
from pathlib import Path

from ucssl.config import ExperimentConfig, desk_config, load_config, parse_config, render_config
from ucssl.datasets import SyntheticSpec, generate_synthetic, imbalanced_counts
from ucssl.errors import ValidationError
from ucssl.evaluation import LAYOUTS
from ucssl.experiment import (
    RunSpec, collect_results, dataset_manifest, experiment_dir, format_plan, plan_grid, render_report,
    run_finetune, run_grid, run_pretrain, run_supervised, ssl_split, supervised_split, write_report,
)
from ucssl.training import Interrupted

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_INTERRUPTED = 0, 2, 3, 4


class _StopFlag:
    """SIGINT sets a flag that the pretext loop polls between steps."""

    def __init__(self):
        self.raised = False

    def __call__(self, _step: int) -> bool:
        return self.raised

    def __enter__(self):
        def handler(signum, frame):
            if self.raised:
                raise KeyboardInterrupt
            self.raised = True
        self._previous = signal.signal(signal.SIGINT, handler)
        return self

    def __exit__(self, *exc):
        signal.signal(signal.SIGINT, self._previous)


def _fractions(text: str) -> list[float]:
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ValidationError(f"bad fraction list {text!r}") from exc
    if not values or any(not 0 < v <= 1 for v in values):
        raise ValidationError(f"fractions must be in (0, 1]: {text!r}")
    return values


def _config(args) -> ExperimentConfig:
    if args.preset == "desk":
        cfg = desk_config()
        if args.config:
            cfg = parse_config(Path(args.config).read_text(encoding="utf-8"), base=cfg)
        else:
            cfg = parse_config("", base=cfg)  # still honour environment overrides
    else:
        cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, pretrain=replace(cfg.pretrain, seed=args.seed), train=replace(cfg.train, seed=args.seed),
                      supervised=replace(cfg.supervised, seed=args.seed))
    return cfg


def _run_dir(args, cfg: ExperimentConfig, name: str) -> Path:
    return Path(args.out) if args.out else experiment_dir(cfg) / name


def cmd_synth(args, cfg: ExperimentConfig) -> int:
    d = cfg.dataset
    counts = imbalanced_counts(4 * d.synthetic_per_class) if d.synthetic_imbalanced else d.synthetic_per_class
    out = Path(args.out or d.root)
    if args.dry_run:
        print(f"would write synthetic corpus {counts} to {out}")
        return EXIT_OK
    m = generate_synthetic(SyntheticSpec(counts, cfg.encoder.input_side, d.seed), out)
    print(f"wrote {len(m)} images to {out}: {m.class_counts}")
    return EXIT_OK


def cmd_split(args, cfg: ExperimentConfig) -> int:
    manifest = dataset_manifest(cfg)
    plan = supervised_split(cfg, manifest) if args.kind == "supervised" else ssl_split(cfg, manifest)
    counts = plan.counts(manifest)
    print("split," + ",".join(f"class{c}" for c in range(4)) + ",total")
    for name in plan.split_names:
        row = counts[name]
        print(f"{name}," + ",".join(str(row[c]) for c in range(4)) + f",{sum(row.values())}")
    if args.dry_run:
        return EXIT_OK
    out = Path(args.out) if args.out else experiment_dir(cfg) / f"split-{args.kind}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    plan.to_csv(manifest, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_pretrain(args, cfg: ExperimentConfig) -> int:
    method = args.method or cfg.method.name
    run = RunSpec("pretrain", method, pretrain_fraction=args.fraction)
    run_dir = _run_dir(args, cfg, run.name)
    if args.dry_run:
        print(f"would pretrain {method} on {args.fraction:g} of the pretrain split into {run_dir}")
        return EXIT_OK
    with _StopFlag() as stop:
        result = run_pretrain(cfg, method, args.fraction, run_dir, resume=args.resume, should_stop=stop)
    for e, loss in enumerate(result.epoch_losses):
        print(f"epoch {e} loss {loss:.4f}")
    print(f"checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_finetune(args, cfg: ExperimentConfig) -> int:
    method = args.method or cfg.method.name
    if not args.checkpoint and not args.scratch:
        raise ValidationError("finetune needs --checkpoint PATH (or --scratch)")
    ckpt = None if args.scratch else Path(args.checkpoint)
    if ckpt is not None and not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    fractions = _fractions(args.fractions) if args.fractions else [cfg.train.data_fraction]
    base = Path(args.out) if args.out else experiment_dir(cfg)
    for f in fractions:
        run_dir = base / f"finetune-{method}-f{f:g}{'-weighted' if cfg.train.class_weighting else ''}"
        if args.dry_run:
            print(f"would fine-tune {method} at fraction {f:g} into {run_dir}")
            continue
        r = run_finetune(cfg, method, ckpt, f, run_dir)
        print(f"{run_dir / 'result.json'}: " + " ".join(f"{k}={v}" for k, v in r.report.rounded().items()))
    return EXIT_OK


def cmd_train_supervised(args, cfg: ExperimentConfig) -> int:
    fractions = _fractions(args.fractions) if args.fractions else [cfg.supervised.data_fraction]
    base = Path(args.out) if args.out else experiment_dir(cfg)
    for f in fractions:
        run_dir = base / RunSpec("supervised", "supervised", fraction=f, weighted=cfg.supervised.class_weighting).name
        if args.dry_run:
            print(f"would train the supervised baseline at fraction {f:g} into {run_dir}")
            continue
        r = run_supervised(cfg, f, run_dir)
        print(f"{run_dir / 'result.json'}: " + " ".join(f"{k}={v}" for k, v in r.report.rounded().items()))
    return EXIT_OK


def cmd_benchmark(args, cfg: ExperimentConfig) -> int:
    if args.out:
        cfg = replace(cfg, output=replace(cfg.output, dir=args.out))
    runs = plan_grid(cfg)
    print(format_plan(runs))
    if args.dry_run:
        return EXIT_OK
    with _StopFlag() as stop:
        executed, skipped = run_grid(cfg, resume=True, should_stop=stop)
    print(f"executed {len(executed)} runs, skipped {len(skipped)} completed runs")
    report = render_report(collect_results(experiment_dir(cfg)))
    write_report(report, experiment_dir(cfg) / "tables")
    for text, _ in report.values():
        print(text)
    return EXIT_OK


def cmd_report(args, cfg: ExperimentConfig) -> int:
    results_dir = Path(args.results_dir) if args.results_dir else experiment_dir(cfg)
    layouts = [args.layout] if args.layout else list(LAYOUTS)
    report = render_report(collect_results(results_dir), layouts)
    if args.out and not args.dry_run:
        write_report(report, Path(args.out))
    for text, csv_text in report.values():
        sys.stdout.write((csv_text if args.csv else text))
    return EXIT_OK


def cmd_config(args, cfg: ExperimentConfig) -> int:
    sys.stdout.write(render_config(cfg))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "split": cmd_split, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "train-supervised": cmd_train_supervised, "benchmark": cmd_benchmark, "report": cmd_report,
    "config": cmd_config,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment INI file")
    common.add_argument("--preset", choices=["desk"], help="start from a shipped preset (config file values override it)")
    common.add_argument("--seed", type=int, help="training seed override")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--dry-run", action="store_true", help="print what would happen and exit")
    common.add_argument("--resume", action="store_true", help="continue from the last checkpoint")

    p = argparse.ArgumentParser(prog="ucssl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write the synthetic 4-class corpus")
    s = sub.add_parser("split", parents=[common], help="write the stratified split CSV")
    s.add_argument("--kind", choices=["ssl", "supervised"], default="ssl")
    s = sub.add_parser("pretrain", parents=[common], help="pretext-train one method")
    s.add_argument("--method")
    s.add_argument("--fraction", type=float, default=1.0, help="share of the pretrain split")
    s = sub.add_parser("finetune", parents=[common], help="fine-tune from a pretext checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--scratch", action="store_true", help="start from a randomly initialized encoder")
    s.add_argument("--method")
    s.add_argument("--fractions", help="comma-separated fine-tune data fractions, e.g. 1.0,0.5,0.25")
    s = sub.add_parser("train-supervised", parents=[common], help="train the frozen-backbone baseline")
    s.add_argument("--fractions")
    sub.add_parser("benchmark", parents=[common], help="run the full grid and render the tables")
    s = sub.add_parser("report", parents=[common], help="render tables from completed runs")
    s.add_argument("results_dir", nargs="?")
    s.add_argument("--layout", choices=LAYOUTS)
    s.add_argument("--csv", action="store_true", help="print CSV instead of text tables")
    sub.add_parser("config", parents=[common], help="print the effective configuration")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (Interrupted, KeyboardInterrupt) as exc:
        print(f"interrupted: {exc or 'by user'}; rerun with --resume", file=sys.stderr)
        return EXIT_INTERRUPTED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
