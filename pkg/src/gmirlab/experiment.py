"""The full comparison pipeline: scratch baselines, finetuning strategies, sweeps."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .config import ExperimentConfig, sweep_strategies
from .data import DomainPair, merge
from .metrics import (SCRATCH_ALL, SCRATCH_NEW, SCRATCH_OLD, DomainResult, ExperimentReport,
                      RunRow, attach_transfer, evaluate)
from .net import Checkpoint, ConfigurationError, load_checkpoint, save_checkpoint
from .strategies import StrategyConfig
from .trainer import TrainResult, finetune, pretrain

logger = logging.getLogger(__name__)


@dataclass
class RunArtifacts:
    """What one run leaves behind besides its report row."""

    label: str
    seed: int
    result: TrainResult
    row: RunRow


@dataclass
class ExperimentOutput:
    report: ExperimentReport
    runs: list[RunArtifacts] = field(default_factory=list)

    def wall(self) -> dict:
        return {f"seed{a.seed}/{a.label}": dict(sorted(a.result.ledger.wall.items()))
                for a in self.runs}


def _row(cfg: ExperimentConfig, label: str, kind: str, seed: int, pair: DomainPair,
         result: TrainResult, params: Optional[dict] = None) -> RunRow:
    p = result.checkpoint.params
    res = DomainResult(label, evaluate(cfg.model, p, pair.old_test), evaluate(cfg.model, p, pair.new_test))
    work = result.ledger.summary()
    work["best_epoch"] = result.checkpoint.epoch
    return RunRow(label, kind, seed, res, None, work, params or {})


def _scratch(cfg: ExperimentConfig, label: str, seed: int, pair: DomainPair) -> TrainResult:
    tc = cfg.train_config("pretrain", seed)
    if label == SCRATCH_OLD:
        return pretrain(tc, pair.old_train, [pair.old_val], label=label)
    if label == SCRATCH_NEW:
        return pretrain(tc, pair.new_train, [pair.new_val], label=label)
    return pretrain(tc, merge(pair.old_train, pair.new_train), [pair.old_val, pair.new_val],
                    label=label)


def _finetune(cfg: ExperimentConfig, strategy: StrategyConfig, seed: int, pair: DomainPair,
              start: Checkpoint, log_path: Optional[Path] = None) -> TrainResult:
    tc = cfg.train_config("finetune", seed, strategy)
    return finetune(tc, start, pair.new_train, pair.old_train, [pair.old_val, pair.new_val],
                    log_path=log_path)


def _seed_dir(out: Optional[Path], seed: int) -> Optional[Path]:
    if out is None:
        return None
    d = out / f"seed{seed}"
    (d / "checkpoints").mkdir(parents=True, exist_ok=True)
    (d / "logs").mkdir(parents=True, exist_ok=True)
    return d


def _persist(seed_dir: Optional[Path], label: str, result: TrainResult) -> None:
    if seed_dir is None:
        return
    save_checkpoint(seed_dir / "checkpoints" / f"{label}.json", result.checkpoint)
    with open(seed_dir / "logs" / f"{label}.jsonl", "w") as fh:
        for rec in result.epoch_log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _start_checkpoint(cfg: ExperimentConfig, seed: int, scratch: dict[str, TrainResult],
                      out: Optional[Path]) -> Checkpoint:
    if SCRATCH_OLD in scratch:
        return scratch[SCRATCH_OLD].checkpoint
    candidates = []
    if cfg.pretrained_checkpoint:
        candidates.append(Path(cfg.pretrained_checkpoint.format(seed=seed)))
    if out is not None:
        candidates.append(out / f"seed{seed}" / "checkpoints" / f"{SCRATCH_OLD}.json")
    for path in candidates:
        if path.is_file():
            return load_checkpoint(path, expected=cfg.model)
    raise ConfigurationError(
        f"finetuning needs a pretrained {SCRATCH_OLD} checkpoint for seed {seed}; "
        f"add {SCRATCH_OLD} to [experiment] runs or point pretrained_checkpoint at one "
        f"(looked in: {', '.join(str(c) for c in candidates) or 'nowhere'})")


def run_experiment(cfg: ExperimentConfig, out: Optional[Path] = None,
                   strategies: Optional[Sequence[StrategyConfig]] = None,
                   scratch_runs: Optional[Sequence[str]] = None,
                   params_of: Optional[dict[str, dict]] = None,
                   grid_jobs: int = 1) -> ExperimentOutput:
    """Run every requested scratch baseline and finetuning strategy for every seed.

    Finetuning always starts from the same seed's best ``scratch-clear``
    checkpoint.  Rows are ordered seed-major: scratch runs first, then
    strategies in config order.
    """
    strategies = list(cfg.strategies if strategies is None else strategies)
    scratch_runs = list(cfg.runs if scratch_runs is None else scratch_runs)
    out = Path(out) if out is not None else None
    rows: list[RunRow] = []
    arts: list[RunArtifacts] = []
    for seed in cfg.seeds:
        pair = cfg.data.pair(seed)
        sdir = _seed_dir(out, seed)
        scratch: dict[str, TrainResult] = {}
        for label in scratch_runs:
            logger.info("seed %d: %s", seed, label)
            res = _scratch(cfg, label, seed, pair)
            scratch[label] = res
            _persist(sdir, label, res)
            row = _row(cfg, label, "scratch", seed, pair, res)
            rows.append(row)
            arts.append(RunArtifacts(label, seed, res, row))
        if not strategies:
            continue
        start = _start_checkpoint(cfg, seed, scratch, out)

        def one(strategy: StrategyConfig) -> RunArtifacts:
            logger.info("seed %d: finetune %s", seed, strategy.label)
            log_path = None
            if sdir is not None:
                log_path = sdir / "logs" / f"{strategy.label}.buffers.jsonl"
                log_path.unlink(missing_ok=True)
            res = _finetune(cfg, strategy, seed, pair, start, log_path)
            _persist(sdir, strategy.label, res)
            extra = (params_of or {}).get(strategy.label, {})
            row = _row(cfg, strategy.label, "finetune", seed, pair, res, extra)
            return RunArtifacts(strategy.label, seed, res, row)

        if grid_jobs > 1:
            with ThreadPoolExecutor(max_workers=grid_jobs) as ex:
                done = list(ex.map(one, strategies))
        else:
            done = [one(s) for s in strategies]
        for a in done:
            rows.append(a.row)
            arts.append(a)
    attach_transfer(rows)
    echo = cfg.to_dict()
    echo.pop("out", None)  # where a report lives does not affect what it says
    report = ExperimentReport(rows, echo, list(cfg.seeds))
    return ExperimentOutput(report, arts)


def run_sweep(cfg: ExperimentConfig, out: Optional[Path] = None, grid_jobs: int = 1
              ) -> ExperimentOutput:
    """One finetuning run per grid point, all sharing each seed's pretrained checkpoint.

    Scratch baselines are included so every grid point gets BWT/FWT, and the
    ``scratch-all`` row gives the reference level for the plot.
    """
    grid = sweep_strategies(cfg)
    sw = cfg.sweep
    params_of = {s.label: {sw.param: v} for s, v in zip(grid, sw.values)}
    return run_experiment(cfg, out, strategies=grid,
                          scratch_runs=[SCRATCH_OLD, SCRATCH_NEW, SCRATCH_ALL],
                          params_of=params_of, grid_jobs=grid_jobs)


def write_outputs(output: ExperimentOutput, out: Path, figures: bool = True,
                  sweep_param: Optional[str] = None) -> list[Path]:
    """Report in three forms plus figures.

    ``report.json`` / ``report.csv`` / ``report.txt`` hold only deterministic
    values; wall-clock timings go to ``walltime.json``.
    """
    out.mkdir(parents=True, exist_ok=True)
    rep = output.report
    written = []
    for name, text in (("report.json", rep.to_json()), ("report.csv", rep.to_csv()),
                       ("report.txt", rep.to_table()),
                       ("config.json", json.dumps(rep.config, indent=1, sort_keys=True) + "\n")):
        (out / name).write_text(text)
        written.append(out / name)
    (out / "walltime.json").write_text(json.dumps(output.wall(), indent=1, sort_keys=True) + "\n")
    written.append(out / "walltime.json")
    if figures:
        from .plotting import render_report_figures
        written += render_report_figures(rep, out / "figures", sweep_param)
    return written
