"""Command-line entry point.

Subcommands: ``gen`` (build and export the benchmark dataset), ``train``
(one config, one run directory), ``ablate --suite X`` (paired trend
experiments), ``eval`` (re-evaluate a finished run from its checkpoint)
and ``report`` (trend CSV to aligned text plus a plot-ready CSV).

Exit codes: 0 success, 2 config error, 3 numeric error, 4 I/O error.
Setting CMC_FORGE_DETERMINISTIC=1 forces serial execution regardless of
--threads.
"""

import argparse
import os
import sys
from pathlib import Path

from cmc_forge import evalharness, trainer
from cmc_forge.config import ExperimentConfig, load_config
from cmc_forge.dataset import build_benchmark, save_benchmark
from cmc_forge.errors import ConfigError, NumericError


def _parse_seeds(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        try:
            return list(range(int(lo), int(hi) + 1))
        except ValueError as exc:
            raise ConfigError(f"bad --seeds range {text!r}") from exc
    try:
        return [int(s) for s in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad --seeds list {text!r}") from exc


def _load(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        import dataclasses

        config = dataclasses.replace(config, seed=args.seed)
    return config.validate()


def _threads(args) -> int:
    if os.environ.get("CMC_FORGE_DETERMINISTIC") == "1":
        return 1
    return max(1, args.threads)


def cmd_gen(args) -> int:
    config = _load(args)
    out = Path(args.out)
    benchmark = build_benchmark(config.data, config.seed, threads=_threads(args))
    save_benchmark(benchmark, out)
    print(f"wrote {config.data.num_scenes} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    config = _load(args)
    benchmark = build_benchmark(config.data, config.seed, threads=_threads(args))
    result = trainer.run_experiment(config, benchmark, Path(args.out))
    final = result.final
    print(f"run {result.config_hash} finished: " + ", ".join(f"{k}={v:.2f}" for k, v in final.items() if k != "epoch"))
    return 0


def cmd_ablate(args) -> int:
    config = _load(args)
    seeds = _parse_seeds(args.seeds) if args.seeds else list(range(5))
    trends = evalharness.run_ablation_suite(
        args.suite, seeds, config, Path(args.out), threads=_threads(args)
    )
    print(evalharness.format_trend_table(trends))
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.out)
    config_path = run_dir / "config.json"
    if not config_path.exists():
        raise ConfigError(f"{run_dir} does not look like a run directory (no config.json)")
    config = load_config(config_path)
    checkpoints = sorted((run_dir / "checkpoints").glob("epoch_*.bin"))
    if not checkpoints:
        raise ConfigError(f"no checkpoints under {run_dir}")
    branches, epoch, _ = trainer.load_checkpoint(checkpoints[-1])
    benchmark = build_benchmark(config.data, config.seed, threads=_threads(args))
    row = trainer._evaluate(branches, benchmark, epoch)
    for key, value in row.items():
        print(f"{key}: {value}")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    trend_files = sorted(out.glob("*_trends.csv"))
    if not trend_files:
        raise ConfigError(f"no *_trends.csv files under {out}")
    import csv as csv_mod

    plot_rows = []
    for path in trend_files:
        with path.open() as fh:
            rows = list(csv_mod.DictReader(fh))
        print(f"\n== {path.name}")
        trends = [
            evalharness.paired_trend(
                r["variant"],
                r["baseline"],
                [int(s) for s in r["seeds"].split()],
                [float(v) for v in r["variant_scores"].split()],
                [float(v) for v in r["baseline_scores"].split()],
            )
            for r in rows
        ]
        print(evalharness.format_trend_table(trends))
        for r in rows:
            for seed, v, b in zip(r["seeds"].split(), r["variant_scores"].split(), r["baseline_scores"].split()):
                plot_rows.append([r["suite"], r["variant"], r["baseline"], seed, v, b])

    plot_path = out / "report_points.csv"
    with plot_path.open("w", newline="") as fh:
        writer = csv_mod.writer(fh)
        writer.writerow(["suite", "variant", "baseline", "seed", "variant_score", "baseline_score"])
        writer.writerows(plot_rows)
    print(f"\nplot-ready CSV: {plot_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmc-forge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=str, default=None, help="JSON config (defaults used when omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=str, required=out_required, help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker threads")

    p_gen = sub.add_parser("gen", help="build and export the benchmark dataset")
    common(p_gen)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="run one training configuration")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_ablate = sub.add_parser("ablate", help="run a paired ablation suite")
    common(p_ablate)
    p_ablate.add_argument("--suite", required=True, choices=evalharness.SUITES)
    p_ablate.add_argument("--seeds", type=str, default=None, help="N..M range or comma list")
    p_ablate.set_defaults(func=cmd_ablate)

    p_eval = sub.add_parser("eval", help="evaluate the latest checkpoint of a run directory")
    common(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_report = sub.add_parser("report", help="render trend CSVs as tables plus a plot-ready CSV")
    common(p_report)
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
