"""Finetuning strategies driven by the trainer through four hooks.

``on_finetune_start``  set up buffer / Fisher / loss ledger
``on_epoch_start``     maybe resample the buffer
``batch_source``       dataset the coming epoch iterates over
``transform_gradient`` A-GEM projection or EWC penalty
"""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Optional, Union

import numpy as np

from . import replay
from .data import Dataset, merge
from .net import ModelConfig, batch_losses, grad, per_sample_grads
from .replay import ReplayBuffer

if TYPE_CHECKING:
    from .trainer import TimingLedger

logger = logging.getLogger(__name__)

KINDS = ("naive", "low-lr", "ewc", "mir-epoch", "agem", "agem-plus", "gss",
         "fixed-sampling", "random-resampling", "gmir", "gmir-plus")
REPLAY_KINDS = ("mir-epoch", "agem", "agem-plus", "gss", "fixed-sampling",
                "random-resampling", "gmir", "gmir-plus")
PERIODIC_KINDS = ("gmir", "gmir-plus", "random-resampling", "gss", "agem-plus")

DEFAULT_K = 0.05
DEFAULT_N = 10
DEFAULT_EWC_LAMBDA = 0.4
DEFAULT_GSS_FRACTION = 0.01
LOW_LR_FACTOR = 0.3


@dataclass(frozen=True)
class StrategyConfig:
    """Knobs for one finetuning run.

    ``k`` is a count when given as an int and a fraction of the old training
    split when given as a float in (0, 1].
    """

    kind: str = "gmir"
    k: Union[int, float] = DEFAULT_K
    d_fraction: float = 1.0
    n_resample: int = DEFAULT_N
    lr_override: Optional[float] = None
    ewc_lambda: float = DEFAULT_EWC_LAMBDA
    gss_param_fraction: float = DEFAULT_GSS_FRACTION
    low_lr_factor: float = LOW_LR_FACTOR
    name: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}; choose from {', '.join(KINDS)}")
        if isinstance(self.k, bool) or self.k <= 0:
            raise ValueError("k must be positive")
        if isinstance(self.k, float) and self.k > 1:
            raise ValueError("fractional k must lie in (0, 1]; give an int for a count")
        if self.n_resample < 1:
            raise ValueError("n_resample must be >= 1")
        if not 0 < self.d_fraction <= 1:
            raise ValueError("d_fraction must lie in (0, 1]")
        if self.ewc_lambda < 0:
            raise ValueError("ewc_lambda must be nonnegative")
        if not 0 < self.gss_param_fraction <= 1:
            raise ValueError("gss_param_fraction must lie in (0, 1]")
        if self.lr_override is not None and self.lr_override <= 0:
            raise ValueError("lr_override must be positive")

    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def uses_replay(self) -> bool:
        return self.kind in REPLAY_KINDS

    def resolve_k(self, n_old_train: int) -> int:
        if isinstance(self.k, float):
            return max(1, int(round(self.k * n_old_train)))
        return int(self.k)

    def learning_rate(self, base_lr: float) -> float:
        if self.lr_override is not None:
            return float(self.lr_override)
        if self.kind == "low-lr":
            return base_lr * self.low_lr_factor
        return base_lr

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass(frozen=True)
class FisherDiagonal:
    values: np.ndarray
    reference_params: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.reference_params.shape:
            raise ValueError("Fisher diagonal and anchor params must share a layout")
        if np.any(self.values < 0):
            raise ValueError("Fisher diagonal entries must be nonnegative")


def agem_project(g: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Remove the component of ``g`` that opposes ``g_ref``.

    Returns ``g`` itself (same object) when the two do not conflict.
    """
    ref_sq = float(np.dot(g_ref, g_ref))
    if ref_sq < replay.DEGENERATE_NORM ** 2:
        logger.warning("A-GEM reference gradient is degenerate; skipping projection")
        return g
    dot = float(np.dot(g, g_ref))
    if dot >= 0.0:
        return g
    return g - (dot / ref_sq) * g_ref


def mir_epoch_select(losses_prev: Mapping[int, float], losses_curr: Mapping[int, float], k: int,
                     epoch: int = 0) -> ReplayBuffer:
    """Top ``k`` ids by loss increase since the previous epoch."""
    if set(losses_prev) != set(losses_curr):
        raise ValueError("loss ledgers cover different sample ids")
    if not 1 <= k <= len(losses_curr):
        raise ValueError(f"k={k} outside [1, {len(losses_curr)}]")
    ids = np.array(sorted(losses_curr), dtype=np.int64)
    delta = np.array([losses_curr[i] - losses_prev[i] for i in ids])
    pick = replay.top_k_ids(ids, delta, k)
    return ReplayBuffer(tuple(ids[pick]), epoch, tuple(delta[pick]), "mir-epoch")


def gss_param_subset(num_params: int, param_fraction: float, seed) -> np.ndarray:
    if not 0 < param_fraction <= 1:
        raise ValueError("param_fraction must lie in (0, 1]")
    m = int(math.ceil(param_fraction * num_params))
    if m >= num_params:
        return np.arange(num_params)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return np.sort(rng.choice(num_params, size=m, replace=False))


def gss_scores(config: ModelConfig, params: np.ndarray, pool: Dataset, coords: np.ndarray,
               chunk_size: int = replay.DEFAULT_CHUNK) -> np.ndarray:
    """Max cosine similarity of each sample's restricted gradient to any other sample's.

    A sample whose restricted gradient is degenerate scores +1 and is left
    out of everyone else's maximum, since it carries no direction.
    """
    rows = []
    for sl in replay._chunks(len(pool), chunk_size):
        G = per_sample_grads(config, params, pool.features[sl], pool.labels[sl])
        rows.append(G[:, coords])
    R = np.concatenate(rows) if rows else np.zeros((0, len(coords)))
    norms = np.sqrt((R * R).sum(axis=1))
    ok = norms >= replay.DEGENERATE_NORM
    unit = np.zeros_like(R)
    unit[ok] = R[ok] / norms[ok, None]
    n = len(pool)
    scores = np.full(n, 1.0)
    for sl in replay._chunks(n, chunk_size):
        sims = unit[sl] @ unit.T
        sims[:, ~ok] = -np.inf
        idx = np.arange(sl.start, sl.stop)
        sims[idx - sl.start, idx] = -np.inf
        best = sims.max(axis=1) if n > 1 else np.full(len(idx), -np.inf)
        best = np.where(np.isfinite(best), np.clip(best, -1.0, 1.0), -1.0)
        scores[sl] = np.where(ok[sl], best, 1.0)
    return scores


def gss_select(config: ModelConfig, params: np.ndarray, d_old_pool: Dataset, k: int,
               param_fraction: float = DEFAULT_GSS_FRACTION, seed=0, epoch: int = 0,
               coords: Optional[np.ndarray] = None) -> ReplayBuffer:
    """``k`` samples whose gradients are least similar to any other sample's."""
    if not 1 <= k <= len(d_old_pool):
        raise ValueError(f"k={k} outside [1, {len(d_old_pool)}]")
    if coords is None:
        coords = gss_param_subset(config.num_params, param_fraction, seed)
    scores = gss_scores(config, params, d_old_pool, coords)
    pick = replay.top_k_ids(d_old_pool.ids, scores, k, largest=False)
    return ReplayBuffer(tuple(d_old_pool.ids[pick]), epoch, tuple(scores[pick]), "gss")


def ewc_fisher(config: ModelConfig, params_star: np.ndarray, d_old_train: Dataset,
               chunk_size: int = replay.DEFAULT_CHUNK) -> FisherDiagonal:
    """Empirical diagonal Fisher: mean squared per-sample gradient at the anchor."""
    if len(d_old_train) == 0:
        raise ValueError("cannot estimate Fisher information from an empty dataset")
    total = np.zeros(config.num_params)
    for sl in replay._chunks(len(d_old_train), chunk_size):
        G = per_sample_grads(config, params_star, d_old_train.features[sl], d_old_train.labels[sl])
        total += (G * G).sum(axis=0)
    return FisherDiagonal(total / len(d_old_train), np.array(params_star, dtype=np.float64))


def ewc_penalty(params: np.ndarray, fisher: FisherDiagonal, lam: float) -> float:
    d = np.asarray(params) - fisher.reference_params
    return 0.5 * lam * float(np.sum(fisher.values * d * d))


def ewc_penalty_grad(params: np.ndarray, fisher: FisherDiagonal, lam: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != fisher.values.shape:
        raise ValueError("params and Fisher diagonal layouts differ")
    return lam * fisher.values * (params - fisher.reference_params)


def resample_due(kind: str, epoch: int, n_resample: int, total_epochs: Optional[int] = None) -> bool:
    """Whether a selection fires before the epoch that follows ``epoch`` completed epochs.

    No event fires once training is over: a buffer chosen after the last
    epoch would never be used.
    """
    if epoch <= 0 or (total_epochs is not None and epoch >= total_epochs):
        return False
    if kind == "mir-epoch":
        return True
    if kind in PERIODIC_KINDS:
        return epoch % n_resample == 0
    return False


@dataclass
class ResampleContext:
    """Everything a selection may read.

    ``loss_ledger`` is MIR-epoch state: read as the previous epoch's losses
    and overwritten with the current ones.
    """

    epoch: int
    model: ModelConfig
    params: np.ndarray
    d_old_pool: Dataset
    d_new: Dataset
    k: int
    last_g: Optional[np.ndarray] = None
    total_epochs: Optional[int] = None
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    gss_coords: Optional[np.ndarray] = None
    loss_ledger: Optional[dict] = None
    threads: int = 1
    ledger: Optional["TimingLedger"] = None


def _count(ledger, name: str, n: int = 1) -> None:
    if ledger is not None:
        ledger.add(name, n)


def pool_losses(config: ModelConfig, params: np.ndarray, pool: Dataset) -> dict[int, float]:
    losses = batch_losses(config, params, pool.features, pool.labels)
    return {int(i): float(v) for i, v in zip(pool.ids, losses)}


def strategy_resample(strategy: StrategyConfig, ctx: ResampleContext) -> Optional[ReplayBuffer]:
    """New buffer if the schedule fires at ``ctx.epoch``, else ``None``."""
    kind = strategy.kind
    if not resample_due(kind, ctx.epoch, strategy.n_resample, ctx.total_epochs):
        return None
    pool, led = ctx.d_old_pool, ctx.ledger
    if kind in ("gmir", "gmir-plus"):
        if kind == "gmir":
            if ctx.last_g is None:
                raise ValueError("gmir needs the last minibatch gradient")
            g = ctx.last_g
        else:
            g = replay.average_new_domain_gradient(ctx.model, ctx.params, ctx.d_new)
            _count(led, "scoring_evals", len(ctx.d_new))
        _count(led, "scoring_evals", len(pool))
        return replay.gmir_select(g, ctx.model, ctx.params, pool, ctx.k, epoch=ctx.epoch,
                                  threads=ctx.threads, selector=kind)
    if kind in ("random-resampling", "agem-plus"):
        return replay.random_select(pool, ctx.k, ctx.rng, epoch=ctx.epoch, selector=kind)
    if kind == "gss":
        _count(led, "scoring_evals", len(pool))
        coords = ctx.gss_coords
        if coords is None:
            coords = gss_param_subset(ctx.model.num_params, strategy.gss_param_fraction, ctx.rng)
        return gss_select(ctx.model, ctx.params, pool, ctx.k, epoch=ctx.epoch, coords=coords)
    if kind == "mir-epoch":
        if ctx.loss_ledger is None:
            raise ValueError("mir-epoch needs the previous epoch's loss ledger")
        current = pool_losses(ctx.model, ctx.params, pool)
        _count(led, "loss_evals", len(pool))
        buf = mir_epoch_select(ctx.loss_ledger, current, ctx.k, epoch=ctx.epoch)
        ctx.loss_ledger.clear()
        ctx.loss_ledger.update(current)
        return buf
    return None


def _stream(seed: int, kind: str, purpose: str) -> np.random.Generator:
    # keyed on kind and purpose so runs do not depend on which others ran
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(kind.encode()), zlib.crc32(purpose.encode())]
    return np.random.default_rng(np.random.SeedSequence(key))


class Strategy:
    """No replay, no regularisation: naive and low-LR finetuning."""

    def __init__(self, config: StrategyConfig, model: ModelConfig, seed: int = 0,
                 batch_size: int = 8, threads: int = 1):
        self.config = config
        self.model = model
        self.seed = seed
        self.batch_size = batch_size
        self.threads = threads
        self.buffer: Optional[ReplayBuffer] = None
        self.ledger: Optional["TimingLedger"] = None
        self.d_new: Optional[Dataset] = None

    @property
    def kind(self) -> str:
        return self.config.kind

    def on_finetune_start(self, params: np.ndarray, d_new: Dataset, d_old_train: Dataset,
                          ledger: Optional["TimingLedger"] = None) -> Optional[ReplayBuffer]:
        self.d_new = d_new
        self.ledger = ledger
        return None

    def on_epoch_start(self, epoch: int, total_epochs: int, params: np.ndarray,
                       last_g: Optional[np.ndarray]) -> Optional[ReplayBuffer]:
        return None

    def batch_source(self) -> Dataset:
        return self.d_new

    def transform_gradient(self, g: np.ndarray, params: np.ndarray) -> np.ndarray:
        return g


class EWCStrategy(Strategy):
    def on_finetune_start(self, params, d_new, d_old_train, ledger=None):
        super().on_finetune_start(params, d_new, d_old_train, ledger)
        self.fisher = ewc_fisher(self.model, params, d_old_train)
        _count(ledger, "fisher_evals", len(d_old_train))
        return None

    def transform_gradient(self, g, params):
        return g + ewc_penalty_grad(params, self.fisher, self.config.ewc_lambda)


class ReplayStrategy(Strategy):
    """Joint finetuning on the new split plus a replay buffer from the old one."""

    def on_finetune_start(self, params, d_new, d_old_train, ledger=None):
        super().on_finetune_start(params, d_new, d_old_train, ledger)
        cfg = self.config
        self.k = cfg.resolve_k(len(d_old_train))
        self.pool = replay.scoring_pool(d_old_train, cfg.d_fraction,
                                        _stream(self.seed, cfg.kind, "pool"))
        if self.k > len(self.pool):
            raise ValueError(f"k={self.k} exceeds the scoring pool of {len(self.pool)} samples")
        self.rng = _stream(self.seed, cfg.kind, "resample")
        self.gss_coords = None
        if cfg.kind == "gss":
            self.gss_coords = gss_param_subset(self.model.num_params, cfg.gss_param_fraction,
                                               _stream(self.seed, cfg.kind, "gss-coords"))
        self.loss_ledger = None
        if cfg.kind == "mir-epoch":
            self.loss_ledger = pool_losses(self.model, params, self.pool)
            _count(ledger, "loss_evals", len(self.pool))
        self.buffer = replay.random_select(self.pool, self.k, _stream(self.seed, cfg.kind, "init"),
                                           epoch=0, selector="init")
        self._source = None
        self._buffer_ds = None
        return self.buffer

    def on_epoch_start(self, epoch, total_epochs, params, last_g):
        ctx = ResampleContext(epoch=epoch, model=self.model, params=params, d_old_pool=self.pool,
                              d_new=self.d_new, k=self.k, last_g=last_g, total_epochs=total_epochs,
                              rng=self.rng, gss_coords=self.gss_coords,
                              loss_ledger=self.loss_ledger, threads=self.threads,
                              ledger=self.ledger)
        buf = strategy_resample(self.config, ctx)
        if buf is not None:
            self.buffer = buf
            self._source = None
            self._buffer_ds = None
            _count(self.ledger, "resample_events")
        return buf

    def buffer_dataset(self) -> Dataset:
        if self._buffer_ds is None:
            self._buffer_ds = self.pool.select_ids(self.buffer.sample_ids)
        return self._buffer_ds

    def batch_source(self):
        if self._source is None:
            self._source = merge(self.d_new, self.buffer_dataset())
        return self._source


class AGEMStrategy(ReplayStrategy):
    """Replay only through a reference gradient that constrains each step."""

    def on_finetune_start(self, params, d_new, d_old_train, ledger=None):
        buf = super().on_finetune_start(params, d_new, d_old_train, ledger)
        self.batch_rng = _stream(self.seed, self.config.kind, "agem-batches")
        self.last_ref_ids: tuple[int, ...] = ()
        return buf

    def batch_source(self):
        return self.d_new

    def transform_gradient(self, g, params):
        buf = self.buffer_dataset()
        size = min(self.batch_size, len(buf))
        pick = self.batch_rng.choice(len(buf), size=size, replace=False)
        ref = buf.take(pick)
        self.last_ref_ids = tuple(int(i) for i in ref.ids)
        g_ref = grad(self.model, params, ref)
        _count(self.ledger, "ref_grad_evals", size)
        out = agem_project(g, g_ref)
        if out is not g:
            _count(self.ledger, "projections")
        return out


def make_strategy(config: StrategyConfig, model: ModelConfig, seed: int = 0, batch_size: int = 8,
                  threads: int = 1) -> Strategy:
    if config.kind in ("agem", "agem-plus"):
        cls = AGEMStrategy
    elif config.kind in REPLAY_KINDS:
        cls = ReplayStrategy
    elif config.kind == "ewc":
        cls = EWCStrategy
    else:
        cls = Strategy
    return cls(config, model, seed=seed, batch_size=batch_size, threads=threads)
