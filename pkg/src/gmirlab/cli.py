"""Command-line entry point.

    gmirlab gen-data --config exp.toml
    gmirlab run --config exp.toml --seed 3 --out runs/s3
    gmirlab sweep --config sweep.toml
    gmirlab report --in runs/s3
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import PRESETS, ExperimentConfig, load_config, load_preset, preset_text
from .data import save_dataset
from .metrics import SCRATCH_OLD, report_from_json
from .net import ConfigurationError

log = logging.getLogger("gmirlab")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def _load(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = load_preset(args.preset)
    strategy = getattr(args, "strategy", None)
    return cfg.with_overrides(seed=args.seed, out=args.out, threads=args.threads, strategy=strategy)


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out) / "data"
    for seed in cfg.seeds:
        pair = cfg.data.pair(seed)
        d = out / f"seed{seed}"
        d.mkdir(parents=True, exist_ok=True)
        for name, ds in pair.files().items():
            save_dataset(d / f"{name}.csv", ds)
            print(f"{d / (name + '.csv')}  {len(ds)} samples")
    return EXIT_OK


def _print_rows(output) -> None:
    for row in output.report.rows:
        rec = row.record()
        extra = ""
        if "bwt" in rec:
            extra = f"  BWT {rec['bwt']:+.2f}  FWT {rec['fwt']:+.2f}"
        print(f"seed {rec['seed']:>3}  {rec['run']:<22} old {rec['old']:6.2f}  new {rec['new']:6.2f}"
              f"  mean {rec['mean']:6.2f}{extra}")


def cmd_pretrain(args) -> int:
    from .experiment import run_experiment, write_outputs
    cfg = _load(args)
    output = run_experiment(cfg, Path(cfg.out), strategies=[], scratch_runs=[SCRATCH_OLD])
    _print_rows(output)
    write_outputs(output, Path(cfg.out), figures=False)
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .experiment import run_experiment, write_outputs
    cfg = _load(args)
    if args.checkpoint:
        cfg = dataclasses.replace(cfg, pretrained_checkpoint=args.checkpoint)
    output = run_experiment(cfg, Path(cfg.out), scratch_runs=[])
    _print_rows(output)
    write_outputs(output, Path(cfg.out), figures=False)
    return EXIT_OK


def cmd_run(args) -> int:
    from .experiment import run_experiment, write_outputs
    cfg = _load(args)
    out = Path(cfg.out)
    log.info("generating datasets in memory from the [data] section (gen-data writes them to disk)")
    output = run_experiment(cfg, out, grid_jobs=args.grid_jobs)
    for p in write_outputs(output, out, figures=not args.no_figures):
        log.info("wrote %s", p)
    print(output.report.to_table(), end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiment import run_sweep, write_outputs
    cfg = _load(args)
    if cfg.sweep is None:
        raise ConfigurationError("sweep needs a [sweep] section in the config")
    out = Path(cfg.out)
    output = run_sweep(cfg, out, grid_jobs=args.grid_jobs)
    write_outputs(output, out, figures=not args.no_figures, sweep_param=cfg.sweep.param)
    print(output.report.to_table(), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.input) / "report.json"
    if not src.is_file():
        raise ConfigurationError(f"no report found at {src}")
    report = report_from_json(src.read_text())
    print(report.to_table(), end="")
    if args.json:
        print(json.dumps(report.summary(), indent=1, sort_keys=True))
    if not args.no_figures:
        from .plotting import render_report_figures
        sweep = report.config.get("sweep", {}).get("param") if report.config.get("sweep") else None
        has_params = any(r.params for r in report.rows)
        render_report_figures(report, Path(args.input) / "figures", sweep if has_params else None)
    return EXIT_OK


def cmd_preset(args) -> int:
    print(preset_text(args.name), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmirlab", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, strategy=False, grid=False):
        src = sp.add_mutually_exclusive_group()
        src.add_argument("--config", type=Path, help="experiment TOML file")
        src.add_argument("--preset", default="default", help="built-in config: " + ", ".join(PRESETS))
        sp.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
        sp.add_argument("--out", help="output directory (overrides [experiment] out)")
        sp.add_argument("--threads", type=int, help="workers for interference scoring")
        if strategy:
            sp.add_argument("--strategy", help="restrict to one strategy (label or kind)")
        if grid:
            sp.add_argument("--grid-jobs", type=int, default=1,
                            help="finetuning runs to execute concurrently")
            sp.add_argument("--no-figures", action="store_true")

    sp = sub.add_parser("gen-data", help="write the six split files per seed")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="train scratch-clear and save its best checkpoint")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="finetune from a saved scratch-clear checkpoint")
    common(sp, strategy=True)
    sp.add_argument("--checkpoint", help="checkpoint path; may contain {seed}")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("run", help="scratch baselines + all strategies, report and figures")
    common(sp, strategy=True, grid=True)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="vary one of d_fraction / k / n_resample")
    common(sp, grid=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="re-render a saved report")
    sp.add_argument("--in", dest="input", required=True, help="run directory holding report.json")
    sp.add_argument("--json", action="store_true", help="also print the summary records")
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("preset", help="print a built-in config")
    sp.add_argument("name", nargs="?", default="default")
    sp.set_defaults(func=cmd_preset)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"gmirlab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"gmirlab: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
