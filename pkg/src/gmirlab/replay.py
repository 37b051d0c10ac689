"""Gradient interference scoring and replay-buffer selection.

A sample interferes with the current update when its own loss gradient points
against the update gradient.  The score is the negative cosine between the
two, so +1 means the step taken on ``g`` increases that sample's loss as fast
as any direction can.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset, Sample
from .net import ModelConfig, grad, per_sample_grads

logger = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12
DEGENERATE_SCORE = -1.0
DEFAULT_CHUNK = 256


class DegenerateGradientError(ArithmeticError):
    """A gradient too small to define a direction."""


@dataclass(frozen=True)
class InterferenceScore:
    sample_id: int
    score: float


@dataclass(frozen=True)
class ReplayBuffer:
    sample_ids: tuple[int, ...]
    selected_at_epoch: int = 0
    scores: Optional[tuple[float, ...]] = None
    selector: str = "random"

    def __post_init__(self):
        ids = tuple(int(i) for i in self.sample_ids)
        if len(set(ids)) != len(ids):
            raise ValueError("replay buffer ids must be unique")
        if self.scores is not None and len(self.scores) != len(ids):
            raise ValueError("scores must align with sample_ids")
        object.__setattr__(self, "sample_ids", ids)
        if self.scores is not None:
            object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def k(self) -> int:
        return len(self.sample_ids)

    def interference_scores(self) -> list[InterferenceScore]:
        if self.scores is None:
            return []
        return [InterferenceScore(i, s) for i, s in zip(self.sample_ids, self.scores)]

    def to_record(self) -> dict:
        return {"epoch": self.selected_at_epoch, "selector": self.selector,
                "ids": list(self.sample_ids),
                "scores": None if self.scores is None else [repr(s) for s in self.scores]}


def interference_score(g: np.ndarray, g_i: np.ndarray) -> float:
    """Negative cosine similarity between an update gradient and a sample gradient."""
    g = np.asarray(g, dtype=np.float64)
    g_i = np.asarray(g_i, dtype=np.float64)
    if g.shape != g_i.shape:
        raise ValueError(f"gradient shapes differ: {g.shape} vs {g_i.shape}")
    ng, ni = np.linalg.norm(g), np.linalg.norm(g_i)
    if ng < DEGENERATE_NORM or ni < DEGENERATE_NORM:
        raise DegenerateGradientError("gradient norm below 1e-12")
    return float(np.clip(-np.dot(g, g_i) / (ng * ni), -1.0, 1.0))


def per_sample_gradient(config: ModelConfig, params: np.ndarray, sample: Sample) -> np.ndarray:
    return grad(config, params, [sample])


def _chunks(n: int, size: int) -> list[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def _scores_for_chunk(g: np.ndarray, g_norm: float, config: ModelConfig, params: np.ndarray,
                      ds: Dataset, sl: slice) -> np.ndarray:
    G = per_sample_grads(config, params, ds.features[sl], ds.labels[sl])
    # row-wise reductions: a score never mixes information from other rows
    dots = (G * g).sum(axis=1)
    norms = np.sqrt((G * G).sum(axis=1))
    out = np.full(G.shape[0], DEGENERATE_SCORE)
    ok = norms >= DEGENERATE_NORM
    out[ok] = np.clip(-dots[ok] / (norms[ok] * g_norm), -1.0, 1.0)
    return out


def interference_scores(g: np.ndarray, config: ModelConfig, params: np.ndarray, pool: Dataset,
                        chunk_size: int = DEFAULT_CHUNK, threads: int = 1) -> np.ndarray:
    """Scores for every sample of ``pool`` in pool order.

    Gradients are produced ``chunk_size`` rows at a time and reduced to
    scalars immediately, so peak memory is ``chunk_size * P`` regardless of
    pool size.  Chunk boundaries do not depend on ``threads``, which makes the
    result bitwise identical for any worker count at a given ``chunk_size``.
    """
    g = np.asarray(g, dtype=np.float64)
    g_norm = float(np.linalg.norm(g))
    if g_norm < DEGENERATE_NORM:
        raise DegenerateGradientError("update gradient norm below 1e-12")
    slices = _chunks(len(pool), chunk_size)
    if threads > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda sl: _scores_for_chunk(g, g_norm, config, params, pool, sl),
                                slices))
    else:
        parts = [_scores_for_chunk(g, g_norm, config, params, pool, sl) for sl in slices]
    return np.concatenate(parts) if parts else np.zeros(0)


def top_k_ids(ids: np.ndarray, scores: np.ndarray, k: int, largest: bool = True) -> np.ndarray:
    """Positions of the ``k`` best scores; equal scores go to the smaller id."""
    ids = np.asarray(ids)
    scores = np.asarray(scores, dtype=np.float64)
    key = -scores if largest else scores
    order = np.lexsort((ids, key))
    return order[:k]


def _check_k(k: int, pool: Dataset) -> None:
    if k < 1:
        raise ValueError("k must be positive")
    if k > len(pool):
        raise ValueError(f"k={k} exceeds pool size {len(pool)}")


def gmir_select(g: np.ndarray, config: ModelConfig, params: np.ndarray, d_old_train: Dataset,
                k: int, epoch: int = 0, chunk_size: int = DEFAULT_CHUNK, threads: int = 1,
                selector: str = "gmir") -> ReplayBuffer:
    """Fill a buffer with the ``k`` old samples that interfere most with ``g``."""
    _check_k(k, d_old_train)
    scores = interference_scores(g, config, params, d_old_train, chunk_size, threads)
    pick = top_k_ids(d_old_train.ids, scores, k)
    return ReplayBuffer(tuple(d_old_train.ids[pick]), epoch, tuple(scores[pick]), selector)


def random_select(d_old_train: Dataset, k: int, seed, epoch: int = 0,
                  selector: str = "random") -> ReplayBuffer:
    """Uniform draw of ``k`` ids without replacement.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    _check_k(k, d_old_train)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pick = rng.choice(len(d_old_train), size=k, replace=False)
    return ReplayBuffer(tuple(d_old_train.ids[pick]), epoch, None, selector)


def average_new_domain_gradient(config: ModelConfig, params: np.ndarray, d_new: Dataset,
                                chunk_size: int = DEFAULT_CHUNK) -> np.ndarray:
    """Mean of per-sample gradients over the whole new-domain training set."""
    if len(d_new) == 0:
        raise ValueError("cannot average gradients over an empty dataset")
    total = np.zeros(config.num_params)
    for sl in _chunks(len(d_new), chunk_size):
        total += per_sample_grads(config, params, d_new.features[sl], d_new.labels[sl]).sum(axis=0)
    return total / len(d_new)


def append_buffer_snapshot(path: str | Path, buffer: ReplayBuffer, **extra) -> None:
    """Append one JSON line describing a (re)selection event."""
    record = {**extra, **buffer.to_record()}
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def scoring_pool(d_old_train: Dataset, fraction: float, seed: int) -> Dataset:
    """Fixed random subset holding ``round(fraction * N)`` old training samples."""
    if not 0 < fraction <= 1:
        raise ValueError("d_fraction must lie in (0, 1]")
    n = len(d_old_train)
    size = max(1, int(round(fraction * n)))
    if size >= n:
        return d_old_train
    pick = np.sort(np.random.default_rng(seed).choice(n, size=size, replace=False))
    return d_old_train.take(pick)

