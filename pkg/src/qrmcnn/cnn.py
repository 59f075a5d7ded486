"""Small 1-D convolutional classifier over the 13 features, numpy only.

Architecture: ``n`` width-3 convolutions with one element of reflect padding
per side (sequence length stays 13), ReLU between convolutions, a global max
pool over positions, a linear head over channels and a sigmoid.

Gradients are exact and hand-derived; training is full-batch gradient descent
on binary cross-entropy.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import IO

import numpy as np
from scipy.special import expit

from .features import N_FEATURES

VARIANT_LAYERS = {"approach_1_0": 6, "approach_1_1": 5}
PROB_CLAMP = 1e-7
MODEL_FORMAT = "qrmcnn-cnn"
MODEL_VERSION = 1
_SEED_MASK = (1 << 64) - 1
# keeps sigmoid output strictly inside (0, 1) in float64
_P_LO = np.finfo(float).tiny
_P_HI = 1.0 - np.finfo(float).epsneg


class ShapeMismatch(ValueError):
    pass


class DivergenceDetected(RuntimeError):
    pass


@dataclass(frozen=True)
class CnnConfig:
    variant: str = "approach_1_1"
    channels: tuple[int, ...] = (8, 8, 8, 8, 8)
    kernel_width: int = 3
    learning_rate: float = 0.05
    epochs: int = 100
    seed: int = 0

    @classmethod
    def for_variant(cls, variant: str = "approach_1_1", width: int = 8, **kw) -> "CnnConfig":
        if variant not in VARIANT_LAYERS:
            raise ValueError(f"unknown variant {variant!r}")
        return cls(variant=variant, channels=(width,) * VARIANT_LAYERS[variant], **kw)

    @property
    def n_conv_layers(self) -> int:
        return len(self.channels)

    @property
    def padding(self) -> int:
        return (self.kernel_width - 1) // 2

    def validate(self) -> None:
        if self.variant not in VARIANT_LAYERS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.kernel_width % 2 != 1 or not 0 < self.padding < N_FEATURES:
            raise ValueError("kernel width must be odd and its reflect padding shorter than the input")
        if not self.channels or min(self.channels) < 1:
            raise ValueError("every layer needs at least one channel")
        if self.learning_rate <= 0 or self.epochs < 0:
            raise ValueError("learning rate must be positive and epochs nonnegative")


@dataclass
class CnnModel:
    config: CnnConfig
    weights: list[np.ndarray]  # (out_channels, in_channels, kernel_width)
    biases: list[np.ndarray]
    head_weight: np.ndarray  # (last_channels,)
    head_bias: np.ndarray  # (1,)

    def parameters(self) -> list[np.ndarray]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params += [w, b]
        return params + [self.head_weight, self.head_bias]

    def copy(self) -> "CnnModel":
        return CnnModel(self.config, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.head_weight.copy(), self.head_bias.copy())


@dataclass
class TrainingTrace:
    train_loss: list[float] = field(default_factory=list)
    validation_loss: list[float] = field(default_factory=list)


def init(config: CnnConfig, seed: int | None = None) -> CnnModel:
    """Zero-mean uniform weights with standard deviation sqrt(1 / fan_in); zero biases."""
    config.validate()
    rng = np.random.default_rng((config.seed if seed is None else seed) & _SEED_MASK)
    weights, biases = [], []
    c_in = 1
    for c_out in config.channels:
        bound = np.sqrt(3.0 / (c_in * config.kernel_width))
        weights.append(rng.uniform(-bound, bound, (c_out, c_in, config.kernel_width)))
        biases.append(np.zeros(c_out))
        c_in = c_out
    head = rng.uniform(-np.sqrt(3.0 / c_in), np.sqrt(3.0 / c_in), c_in)
    return CnnModel(config, weights, biases, head, np.zeros(1))


def reflect_pad(a: np.ndarray, q: int) -> np.ndarray:
    """Mirror q elements at each end of axis 1 without repeating the edge."""
    return np.pad(a, ((0, 0), (q, q), (0, 0)), mode="reflect")


def _unpad_grad(d_pad: np.ndarray, q: int) -> np.ndarray:
    """Adjoint of reflect_pad along axis 1."""
    n = d_pad.shape[1] - 2 * q
    d = d_pad[:, q:q + n].copy()
    for m in range(q):
        d[:, q - m] += d_pad[:, m]  # left pad slot m mirrors x[q - m]
        d[:, n - 2 - m] += d_pad[:, q + n + m]
    return d


def _as_batch(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != N_FEATURES:
        raise ShapeMismatch(f"expected (batch, {N_FEATURES}) input, got {X.shape}")
    return X


def _forward(model: CnnModel, X: np.ndarray):
    q = model.config.padding
    k = model.config.kernel_width
    a = X[:, :, None]  # (batch, position, channel)
    cache = []
    n_layers = len(model.weights)
    for layer, (w, b) in enumerate(zip(model.weights, model.biases)):
        padded = reflect_pad(a, q)
        cols = np.stack([padded[:, j:j + N_FEATURES] for j in range(k)], axis=2)  # (B, P, k, C)
        w_mat = w.transpose(2, 1, 0).reshape(-1, w.shape[0])  # (k*C, O)
        z = cols.reshape(cols.shape[0] * N_FEATURES, -1) @ w_mat
        z = z.reshape(X.shape[0], N_FEATURES, -1) + b
        cache.append((cols, w_mat, z))
        a = np.maximum(z, 0.0) if layer < n_layers - 1 else z
    idx = np.argmax(a, axis=1)  # first index on ties
    pooled = np.take_along_axis(a, idx[:, None, :], axis=1)[:, 0, :]
    logit = pooled @ model.head_weight + model.head_bias[0]
    return logit, cache, idx, pooled


def _sigmoid(logit):
    return np.clip(expit(logit), _P_LO, _P_HI)


def forward_batch(model: CnnModel, X) -> np.ndarray:
    logit, *_ = _forward(model, _as_batch(X))
    return _sigmoid(logit)


def forward(model: CnnModel, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (N_FEATURES,):
        raise ShapeMismatch(f"expected a {N_FEATURES}-vector, got shape {x.shape}")
    return float(forward_batch(model, x)[0])


def bce(p: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def loss(model: CnnModel, X, y) -> float:
    return bce(forward_batch(model, X), np.asarray(y, dtype=float))


def loss_and_grad(model: CnnModel, X, y) -> tuple[float, list[np.ndarray]]:
    """Mean binary cross-entropy and its exact gradient, ordered like ``parameters()``."""
    X = _as_batch(X)
    y = np.asarray(y, dtype=float)
    batch = X.shape[0]
    logit, cache, idx, pooled = _forward(model, X)
    p_raw = expit(logit)
    p = np.clip(p_raw, PROB_CLAMP, 1 - PROB_CLAMP)
    value = float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))

    inside = (p_raw > PROB_CLAMP) & (p_raw < 1 - PROB_CLAMP)
    d_logit = np.where(inside, (p - y) / (p * (1 - p)) * p_raw * (1 - p_raw), 0.0) / batch

    g_head_w = pooled.T @ d_logit
    g_head_b = np.array([d_logit.sum()])
    d_pooled = np.outer(d_logit, model.head_weight)  # (B, C)
    d_a = np.zeros_like(cache[-1][2])
    np.put_along_axis(d_a, idx[:, None, :], d_pooled[:, None, :], axis=1)

    q = model.config.padding
    k = model.config.kernel_width
    grads = []
    n_layers = len(model.weights)
    for layer in range(n_layers - 1, -1, -1):
        cols, w_mat, z = cache[layer]
        d_z = d_a if layer == n_layers - 1 else d_a * (z > 0)
        d_z2 = d_z.reshape(batch * N_FEATURES, -1)
        c_in = cols.shape[3]
        g_w = (cols.reshape(batch * N_FEATURES, -1).T @ d_z2).reshape(k, c_in, -1).transpose(2, 1, 0)
        g_b = d_z.sum(axis=(0, 1))
        grads = [g_w, g_b] + grads
        if layer:
            d_cols = (d_z2 @ w_mat.T).reshape(batch, N_FEATURES, k, c_in)
            d_pad = np.zeros((batch, N_FEATURES + 2 * q, c_in))
            for j in range(k):
                d_pad[:, j:j + N_FEATURES] += d_cols[:, :, j]
            d_a = _unpad_grad(d_pad, q)
    return value, grads + [g_head_w, g_head_b]


def train(model: CnnModel, X, y, X_val=None, y_val=None, epochs: int | None = None,
          learning_rate: float | None = None) -> tuple[CnnModel, TrainingTrace]:
    """Full-batch gradient descent; the input model is left untouched."""
    epochs = model.config.epochs if epochs is None else epochs
    lr = model.config.learning_rate if learning_rate is None else learning_rate
    X = _as_batch(X)
    y = np.asarray(y, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    out = model.copy()
    trace = TrainingTrace()
    params = out.parameters()
    for epoch in range(epochs):
        with np.errstate(over="ignore", invalid="ignore"):
            value, grads = loss_and_grad(out, X, y)
        if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
            raise DivergenceDetected(f"non-finite loss or gradient at epoch {epoch}")
        trace.train_loss.append(value)
        if X_val is not None and len(X_val):
            trace.validation_loss.append(loss(out, X_val, y_val))
        for p, g in zip(params, grads):
            p -= lr * g
    return out, trace


THRESHOLD_GRID = np.arange(1, 100) / 100.0


def tune_threshold_scores(probs, labels) -> float:
    """Grid threshold with the best accuracy; ties go to the one nearest 0.5, then the smaller."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if probs.size == 0:
        raise ValueError("empty validation set")
    preds = probs[None, :] >= THRESHOLD_GRID[:, None]
    acc = (preds == labels[None, :].astype(bool)).mean(axis=1)
    best = np.flatnonzero(acc == acc.max())
    steps = best + 1  # threshold = steps / 100
    choice = min(steps, key=lambda s: (abs(s - 50), s))
    return choice / 100.0


def tune_threshold(model: CnnModel, X_val, y_val) -> float:
    return tune_threshold_scores(forward_batch(model, X_val), y_val)


def predict(model: CnnModel, x, c: float) -> int:
    """1 when the sigmoid output reaches the threshold (boundary inclusive)."""
    if not 0 < c < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return int(forward(model, x) >= c)


def predict_batch(model: CnnModel, X, c: float) -> np.ndarray:
    if not 0 < c < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return (forward_batch(model, X) >= c).astype(int)


def save_model(model: CnnModel, stream: IO[str]) -> None:
    cfg = asdict(model.config)
    cfg["channels"] = list(cfg["channels"])
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "config": cfg,
        "layers": [
            {"shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
            for w, b in zip(model.weights, model.biases)
        ],
        "head": {"weight": model.head_weight.tolist(), "bias": model.head_bias.tolist()},
    }
    json.dump(doc, stream, sort_keys=True)
    stream.write("\n")


def load_model(stream: IO[str]) -> CnnModel:
    doc = json.load(stream)
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise ValueError("not a saved CNN model of a supported version")
    cfg = dict(doc["config"])
    cfg["channels"] = tuple(cfg["channels"])
    config = CnnConfig(**cfg)
    config.validate()
    weights = [np.array(layer["weight"], dtype=float).reshape(layer["shape"]) for layer in doc["layers"]]
    biases = [np.array(layer["bias"], dtype=float) for layer in doc["layers"]]
    return CnnModel(config, weights, biases, np.array(doc["head"]["weight"], dtype=float),
                    np.array(doc["head"]["bias"], dtype=float))
