"""One-hidden-layer ReLU/softmax classifier and its summed cross-entropy."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lbfgs import TrainingError

PROB_FLOOR = 1e-12
FEATURE_SCHEMA_VERSION = 1
_CHUNK = 32768


@dataclass
class MlpParams:
    """Weights of ``softmax(W2 @ relu(W1 @ x + b1) + b2)``."""

    W1: np.ndarray  # (H, F)
    b1: np.ndarray  # (H,)
    W2: np.ndarray  # (K, H)
    b2: np.ndarray  # (K,)
    seed: int | None = None

    def __post_init__(self):
        H, F = self.W1.shape
        K = self.W2.shape[0]
        if self.b1.shape != (H,) or self.W2.shape != (K, H) or self.b2.shape != (K,):
            raise ValueError("inconsistent MLP parameter shapes")

    @property
    def n_features(self):
        return self.W1.shape[1]

    @property
    def n_hidden(self):
        return self.W1.shape[0]

    @property
    def n_classes(self):
        return self.W2.shape[0]

    @classmethod
    def init(cls, n_features, n_hidden=500, n_classes=2, seed=0):
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        a1 = np.sqrt(6.0 / (n_features + n_hidden))
        a2 = np.sqrt(6.0 / (n_hidden + n_classes))
        return cls(rng.uniform(-a1, a1, (n_hidden, n_features)), np.zeros(n_hidden),
                   rng.uniform(-a2, a2, (n_classes, n_hidden)), np.zeros(n_classes), seed)

    @classmethod
    def zeros(cls, n_features, n_hidden, n_classes=2):
        return cls(np.zeros((n_hidden, n_features)), np.zeros(n_hidden),
                   np.zeros((n_classes, n_hidden)), np.zeros(n_classes))

    def flat(self):
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def with_flat(self, v):
        H, F, K = self.n_hidden, self.n_features, self.n_classes
        v = np.asarray(v, dtype=np.float64)
        if v.size != H * F + H + K * H + K:
            raise ValueError("flat vector has the wrong length")
        i = 0
        W1 = v[i:i + H * F].reshape(H, F); i += H * F
        b1 = v[i:i + H]; i += H
        W2 = v[i:i + K * H].reshape(K, H); i += K * H
        return MlpParams(W1.copy(), b1.copy(), W2.copy(), v[i:].copy(), self.seed)

    def save(self, path, **header):
        """Flat little-endian float64 weights in ``path`` plus a JSON header beside it."""
        path = Path(path)
        self.flat().astype("<f8").tofile(path)
        meta = {"n_features": self.n_features, "n_hidden": self.n_hidden,
                "n_classes": self.n_classes, "seed": self.seed,
                "feature_schema_version": FEATURE_SCHEMA_VERSION,
                "layout": ["W1", "b1", "W2", "b2"]}
        meta.update(header)
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta.get("feature_schema_version") != FEATURE_SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported feature schema {meta.get('feature_schema_version')}")
        shell = cls.zeros(meta["n_features"], meta["n_hidden"], meta["n_classes"])
        shell.seed = meta.get("seed")
        return shell.with_flat(np.fromfile(path, dtype="<f8"))


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def _check_X(p, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != p.n_features:
        raise ValueError(f"expected (N, {p.n_features}) features, got {X.shape}")
    return X


def mlp_forward(p, X):
    """Class probabilities, one row per input row."""
    X = _check_X(p, X)
    out = np.empty((len(X), p.n_classes))
    for i in range(0, len(X), _CHUNK):
        h = X[i:i + _CHUNK] @ p.W1.T
        h += p.b1
        np.maximum(h, 0.0, out=h)
        out[i:i + _CHUNK] = softmax(h @ p.W2.T + p.b2)
    return out


def mlp_predict(p, X):
    return np.argmax(mlp_forward(p, X), axis=1) if len(X) else np.zeros(0, np.int64)


def cross_entropy_loss(probs, T):
    """Summed (not averaged) cross-entropy of one-hot targets ``T``."""
    probs = np.asarray(probs, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if probs.shape != T.shape:
        raise ValueError(f"shape mismatch {probs.shape} vs {T.shape}")
    return float(-np.sum(T * np.log(np.maximum(probs, PROB_FLOOR))))


@dataclass
class TrainingBatch:
    X: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.T = np.asarray(self.T, dtype=np.float64)
        if len(self.X) != len(self.T):
            raise ValueError("X and T row counts differ")
        if len(self.T) and (np.any((self.T != 0) & (self.T != 1)) or np.any(self.T.sum(axis=1) != 1)):
            raise ValueError("targets must be one-hot rows")

    @classmethod
    def from_labels(cls, X, y, n_classes=2):
        y = np.asarray(y, dtype=np.int64)
        return cls(X, np.eye(n_classes)[y])


def mlp_loss_grad(p, batch):
    """Cross-entropy of ``batch`` under ``p`` and its exact gradient (same layout as ``p``)."""
    X = _check_X(p, batch.X)
    T = batch.T
    if len(X) == 0:
        raise ValueError("empty batch")
    gW1 = np.zeros_like(p.W1)
    gb1 = np.zeros_like(p.b1)
    gW2 = np.zeros_like(p.W2)
    gb2 = np.zeros_like(p.b2)
    loss = 0.0
    for i in range(0, len(X), _CHUNK):
        x, t = X[i:i + _CHUNK], T[i:i + _CHUNK]
        a = x @ p.W1.T + p.b1
        h = np.maximum(a, 0.0)
        prob = softmax(h @ p.W2.T + p.b2)
        loss += cross_entropy_loss(prob, t)
        dz = prob - t
        # the probability floor makes the loss flat for hopeless rows
        dz[np.sum(t * prob, axis=1) < PROB_FLOOR] = 0.0
        gW2 += dz.T @ h
        gb2 += dz.sum(axis=0)
        da = dz @ p.W2
        da[a <= 0] = 0.0
        gW1 += da.T @ x
        gb1 += da.sum(axis=0)
    grad = MlpParams(gW1, gb1, gW2, gb2)
    if not (np.isfinite(loss) and np.all(np.isfinite(grad.flat()))):
        raise TrainingError("non-finite loss or gradient")
    return loss, grad
