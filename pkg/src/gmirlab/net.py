"""Small feed-forward classifier with exact backpropagation on flat vectors.

Every gradient in the package lives in one coordinate system: the flat
parameter vector.  Its layout is layer-major: for each layer ``l`` in input
to output order, the weight matrix ``W_l`` of shape ``(fan_out, fan_in)`` in
row-major order, followed by the bias ``b_l`` of length ``fan_out``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")


class ConfigurationError(ValueError):
    """Shapes or layouts that do not fit together."""


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 2
    hidden_dims: tuple[int, ...] = (32,)
    num_classes: int = 2
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigurationError("layer widths must be positive")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.num_classes]

    @property
    def num_params(self) -> int:
        sizes = self.layer_sizes
        return sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d.get("hidden_dims", (32,))),
            num_classes=int(d.get("num_classes", 2)),
            activation=str(d.get("activation", "relu")),
        )


def _layers(config: ModelConfig, params: np.ndarray) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(W, b)`` views into ``params`` in layout order."""
    sizes = config.layer_sizes
    offset = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = params[offset:offset + fan_in * fan_out].reshape(fan_out, fan_in)
        offset += fan_in * fan_out
        b = params[offset:offset + fan_out]
        offset += fan_out
        yield w, b


def _check_params(config: ModelConfig, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != config.num_params:
        raise ConfigurationError(
            f"parameter vector has shape {params.shape}, expected ({config.num_params},)"
        )
    return params


def _check_features(config: ModelConfig, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != config.input_dim:
        raise ConfigurationError(
            f"features have trailing dimension {x.shape[-1]}, expected {config.input_dim}"
        )
    return x


def init_params(config: ModelConfig, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    chunks = []
    sizes = config.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_out * fan_in))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _act_deriv(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def _forward_cache(config: ModelConfig, params: np.ndarray, x: np.ndarray):
    """Batched forward pass keeping pre/post activations for backprop."""
    acts = [x]
    pres = []
    layers = list(_layers(config, params))
    a = x
    for idx, (w, b) in enumerate(layers):
        z = a @ w.T + b
        pres.append(z)
        if idx < len(layers) - 1:
            a = _act(config.activation, z)
            acts.append(a)
        else:
            a = z
    return layers, pres, acts, a


def forward(config: ModelConfig, params: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Logits for a single feature vector ``(input_dim,)`` or a batch ``(B, input_dim)``."""
    params = _check_params(config, params)
    x = _check_features(config, features)
    single = x.ndim == 1
    _, _, _, logits = _forward_cache(config, params, np.atleast_2d(x))
    return logits[0] if single else logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def loss(logits: np.ndarray, label: int) -> float:
    """Softmax cross-entropy of one logit vector against an integer label."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= int(label) < logits.shape[-1]:
        raise ValueError(f"label {label} out of range for {logits.shape[-1]} classes")
    return float(max(-log_softmax(logits)[int(label)], 0.0))


def batch_losses(config: ModelConfig, params: np.ndarray, features: np.ndarray,
                 labels: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy losses for a batch."""
    logits = forward(config, params, np.atleast_2d(features))
    labels = np.asarray(labels, dtype=np.int64)
    return -log_softmax(logits)[np.arange(labels.shape[0]), labels]


def _unpack(batch) -> tuple[np.ndarray, np.ndarray]:
    """Accept a Dataset-like object or a sequence of samples."""
    if hasattr(batch, "features") and hasattr(batch, "labels"):
        x, y = batch.features, batch.labels
    else:
        samples = list(batch)
        x = np.array([s.features for s in samples], dtype=np.float64)
        y = np.array([s.label for s in samples], dtype=np.int64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("minibatch must contain at least one sample")
    return x, y


def _backprop(config: ModelConfig, params: np.ndarray, x: np.ndarray, y: np.ndarray,
              per_sample: bool) -> np.ndarray:
    layers, pres, acts, logits = _forward_cache(config, params, x)
    n = x.shape[0]
    if np.any((y < 0) | (y >= config.num_classes)):
        raise ValueError("label out of range")
    delta = np.exp(log_softmax(logits))
    delta[np.arange(n), y] -= 1.0
    if not per_sample:
        delta /= n
    grads: list[np.ndarray] = [None] * (2 * len(layers))  # type: ignore[list-item]
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        a_prev = acts[idx]
        if per_sample:
            grads[2 * idx] = (delta[:, :, None] * a_prev[:, None, :]).reshape(n, -1)
            grads[2 * idx + 1] = delta
        else:
            grads[2 * idx] = (delta.T @ a_prev).ravel()
            grads[2 * idx + 1] = delta.sum(axis=0)
        if idx > 0:
            delta = (delta @ w) * _act_deriv(config.activation, pres[idx - 1], acts[idx])
    return np.concatenate(grads, axis=-1)


def grad(config: ModelConfig, params: np.ndarray, batch) -> np.ndarray:
    """Gradient of the mean cross-entropy over ``batch`` w.r.t. the flat parameters.

    ``batch`` is a Dataset (anything with ``features``/``labels`` columns) or
    a sequence of samples.
    """
    x, y = _unpack(batch)
    return batch_grad(config, params, x, y)


def batch_grad(config: ModelConfig, params: np.ndarray, features: np.ndarray,
               labels: np.ndarray) -> np.ndarray:
    params = _check_params(config, params)
    x = _check_features(config, np.atleast_2d(features))
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if x.shape[0] == 0:
        raise ValueError("minibatch must contain at least one sample")
    return _backprop(config, params, x, y, per_sample=False)


def per_sample_grads(config: ModelConfig, params: np.ndarray, features: np.ndarray,
                     labels: np.ndarray) -> np.ndarray:
    """Stacked per-sample gradients, shape ``(B, P)``.

    Each row is computed without any reduction across the batch, so a row is
    independent of which other samples share the call.
    """
    params = _check_params(config, params)
    x = _check_features(config, np.atleast_2d(features))
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    return _backprop(config, params, x, y, per_sample=True)


def sgd_step(params: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if params.shape != g.shape:
        raise ConfigurationError(f"gradient shape {g.shape} does not match params {params.shape}")
    return params - lr * g


@dataclass
class Checkpoint:
    """Parameters plus the metadata needed to resume or evaluate them."""

    config: ModelConfig
    params: np.ndarray
    best_val_metric: float = float("nan")
    epoch: int = 0
    meta: dict = field(default_factory=dict)


CHECKPOINT_FORMAT = "gmirlab-checkpoint/1"


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Write a JSON checkpoint.

    Floats are written with ``repr`` which is the shortest string that
    round-trips to the same double, so load(save(x)) is exact.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "model": ckpt.config.to_dict(),
        "num_params": ckpt.config.num_params,
        "epoch": int(ckpt.epoch),
        "best_val_metric": repr(float(ckpt.best_val_metric)),
        "meta": ckpt.meta,
        "params": [repr(float(v)) for v in ckpt.params],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> Checkpoint:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path}: not a gmirlab checkpoint")
    config = ModelConfig.from_dict(doc["model"])
    params = np.array([float(v) for v in doc["params"]], dtype=np.float64)
    _check_params(config, params)
    if expected is not None and expected != config:
        raise ConfigurationError(f"{path}: checkpoint model {config} does not match {expected}")
    return Checkpoint(config, params, float(doc["best_val_metric"]), int(doc["epoch"]),
                      doc.get("meta", {}))


def split_layers(config: ModelConfig, params: Sequence[float]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Copies of each layer's ``(W, b)``; handy for inspection and tests."""
    return [(w.copy(), b.copy()) for w, b in _layers(config, _check_params(config, params))]
