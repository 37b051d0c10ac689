"""Pretraining on the old domain and strategy-driven finetuning on the new one."""
from __future__ import annotations

import logging
import math
import time
import zlib
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset
from .metrics import evaluate
from .net import Checkpoint, ConfigurationError, ModelConfig, batch_grad, init_params, sgd_step
from .replay import ReplayBuffer
from .strategies import Strategy, StrategyConfig, make_strategy

logger = logging.getLogger(__name__)

# counters that are per-sample gradient (or loss) evaluations; their sum is total work
WORK_COUNTERS = ("train_sample_grads", "scoring_evals", "ref_grad_evals", "fisher_evals",
                 "loss_evals")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 80
    batch_size: int = 8
    lr: float = 0.01
    seed: int = 0
    strategy: Optional[StrategyConfig] = None
    eval_every: int = 1
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class TimingLedger:
    """Wall-clock per phase plus hardware-independent work counters."""

    counters: Counter = field(default_factory=Counter)
    wall: dict = field(default_factory=dict)

    def add(self, name: str, n: int = 1) -> None:
        self.counters[name] += int(n)

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.wall[name] = self.wall.get(name, 0.0) + time.perf_counter() - t0

    @property
    def total_work(self) -> int:
        return sum(self.counters[k] for k in WORK_COUNTERS)

    @property
    def elapsed(self) -> float:
        return sum(self.wall.values())

    def summary(self) -> dict:
        """Deterministic counters only; wall-clock is reported separately."""
        out = {k: int(self.counters[k]) for k in sorted(self.counters)}
        out["total_work"] = self.total_work
        return out


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    final_params: np.ndarray
    ledger: TimingLedger
    epoch_log: list[dict]
    resample_log: list[dict] = field(default_factory=list)


StepHook = Callable[[int, int, np.ndarray, Optional[Strategy]], None]


def _rng(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF,
                                                         zlib.crc32(purpose.encode())]))


def _val_metric(config: ModelConfig, params: np.ndarray, val_sets: Sequence[Dataset]) -> list[float]:
    return [evaluate(config, params, v) for v in val_sets]


def _run_epoch(config: TrainConfig, params: np.ndarray, source: Dataset, lr: float,
               rng: np.random.Generator, ledger: TimingLedger, epoch: int,
               strategy: Optional[Strategy] = None, on_step: Optional[StepHook] = None):
    """One pass over ``source`` in shuffled minibatches.

    Returns the new params, the raw gradient of the last minibatch (before any
    strategy transform) and the mean training loss.
    """
    n = len(source)
    perm = rng.permutation(n)
    x_all, y_all = source.features, source.labels
    last_g = None
    steps = 0
    for start in range(0, n, config.batch_size):
        idx = perm[start:start + config.batch_size]
        g = batch_grad(config.model, params, x_all[idx], y_all[idx])
        last_g = g
        if strategy is not None:
            g = strategy.transform_gradient(g, params)
        if on_step is not None:
            on_step(epoch, steps, source.ids[idx], strategy)
        params = sgd_step(params, g, lr)
        steps += 1
        ledger.add("train_steps")
        ledger.add("train_sample_grads", len(idx))
    return params, last_g, steps


def pretrain(config: TrainConfig, train: Dataset, val: Sequence[Dataset] | Dataset,
             on_step: Optional[StepHook] = None, label: str = "pretrain") -> TrainResult:
    """SGD from a fresh initialisation; keeps the checkpoint with best validation accuracy.

    With several validation sets the criterion is their mean accuracy.
    """
    val_sets = [val] if isinstance(val, Dataset) else list(val)
    ledger = TimingLedger()
    params = init_params(config.model, config.seed)
    rng = _rng(config.seed, "shuffle:" + label)
    best = Checkpoint(config.model, params.copy(), -math.inf, 0, {"label": label})
    log = []
    for epoch in range(config.epochs):
        with ledger.phase("train"):
            params, _, steps = _run_epoch(config, params, train, config.lr, rng, ledger, epoch,
                                          on_step=on_step)
        rec = {"epoch": epoch + 1, "steps": steps}
        if (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs:
            with ledger.phase("eval"):
                accs = _val_metric(config.model, params, val_sets)
            metric = float(np.mean(accs))
            rec["val"] = accs
            if metric > best.best_val_metric:
                best = Checkpoint(config.model, params.copy(), metric, epoch + 1, {"label": label})
        log.append(rec)
    best.meta["steps"] = ledger.counters["train_steps"]
    return TrainResult(best, params, ledger, log)


def finetune(config: TrainConfig, start: Checkpoint, d_new_train: Dataset, d_old_train: Dataset,
             val: Sequence[Dataset], on_step: Optional[StepHook] = None,
             log_path=None) -> TrainResult:
    """Continue training from ``start`` on the new domain under ``config.strategy``.

    Replay strategies begin with a random buffer drawn from the old pool.  At
    each epoch boundary the strategy may reselect; GMIR scores against the raw
    gradient of the final minibatch of the previous epoch.  The returned
    checkpoint is the one with the best mean accuracy over ``val`` (old and
    new validation splits).
    """
    if start.config != config.model or start.params.shape != (config.model.num_params,):
        raise ConfigurationError("checkpoint layout does not match the model config")
    scfg = config.strategy or StrategyConfig("naive")
    strategy = make_strategy(scfg, config.model, seed=config.seed, batch_size=config.batch_size,
                             threads=config.threads)
    ledger = TimingLedger()
    params = np.array(start.params, dtype=np.float64)
    lr = scfg.learning_rate(config.lr)
    rng = _rng(config.seed, "shuffle:finetune")
    resample_log: list[dict] = []

    def _log_buffer(buf: ReplayBuffer, event: str):
        rec = {"event": event, "strategy": scfg.kind, **buf.to_record()}
        resample_log.append(rec)
        if log_path is not None:
            from .replay import append_buffer_snapshot
            append_buffer_snapshot(log_path, buf, event=event, strategy=scfg.kind)

    with ledger.phase("select"):
        buf = strategy.on_finetune_start(params, d_new_train, d_old_train, ledger)
    if buf is not None:
        _log_buffer(buf, "init")

    best = Checkpoint(config.model, params.copy(), -math.inf, 0, {"label": scfg.label})
    log = []
    last_g = None
    for epoch in range(config.epochs):
        with ledger.phase("select"):
            buf = strategy.on_epoch_start(epoch, config.epochs, params, last_g)
        if buf is not None:
            _log_buffer(buf, "resample")
        source = strategy.batch_source()
        with ledger.phase("train"):
            params, last_g, steps = _run_epoch(config, params, source, lr, rng, ledger, epoch,
                                               strategy, on_step)
        rec = {"epoch": epoch + 1, "steps": steps, "resampled": buf is not None}
        if (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs:
            with ledger.phase("eval"):
                accs = _val_metric(config.model, params, val)
            metric = float(np.mean(accs))
            rec["val"] = accs
            if metric > best.best_val_metric:
                best = Checkpoint(config.model, params.copy(), metric, epoch + 1,
                                  {"label": scfg.label})
        log.append(rec)
    return TrainResult(best, params, ledger, log, resample_log)
