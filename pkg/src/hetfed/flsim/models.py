"""Small classifiers with hand-derived gradients.

Flat parameter layout, layer by layer: weight matrix (out x in, row-major)
followed by its bias vector.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class Architecture:
    """Base interface used by the simulator; subclasses fix the layer shapes."""

    kind: str = ""

    def layer_shapes(self) -> list[tuple[int, int]]:
        raise NotImplementedError

    @property
    def num_layers(self) -> int:
        return len(self.layer_shapes())

    @property
    def num_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())

    def layer_slices(self) -> list[slice]:
        out, start = [], 0
        for o, i in self.layer_shapes():
            out.append(slice(start, start + o * i + o))
            start += o * i + o
        return out

    def unpack(self, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        for (o, i), sl in zip(self.layer_shapes(), self.layer_slices()):
            block = values[sl]
            out.append((block[:o * i].reshape(o, i), block[o * i:]))
        return out

    def init(self, rng: np.random.Generator) -> np.ndarray:
        parts = []
        for o, i in self.layer_shapes():
            bound = 1.0 / np.sqrt(i)
            parts.append(rng.uniform(-bound, bound, size=o * i))
            parts.append(np.zeros(o))
        return np.concatenate(parts)

    def activations(self, values: np.ndarray, x: np.ndarray) -> list[np.ndarray]:
        """Output of every layer; hidden layers after ReLU, last layer as logits."""
        raise NotImplementedError

    def logits(self, values: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self.activations(values, x)[-1]

    def loss(self, values: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
        logp = _log_softmax(self.logits(values, x))
        return float(-logp[np.arange(len(y)), y].mean())

    def loss_and_grad(self, values: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def predict(self, values: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(values, x), axis=1)

    def accuracy(self, values: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
        if len(y) == 0:
            return float("nan")
        return float(np.mean(self.predict(values, x) == y))

    def to_dict(self) -> dict:
        raise NotImplementedError

    def __eq__(self, other):
        return type(self) is type(other) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(tuple(sorted(self.to_dict().items())))


def _ce_delta(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    logp = _log_softmax(logits)
    n = len(y)
    loss = float(-logp[np.arange(n), y].mean())
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    return loss, delta / n


class SoftmaxRegression(Architecture):
    kind = "SOFTMAX_REGRESSION"

    def __init__(self, d: int, c: int):
        self.d, self.c = int(d), int(c)

    def layer_shapes(self):
        return [(self.c, self.d)]

    def activations(self, values, x):
        (w, b), = self.unpack(values)
        return [x @ w.T + b]

    def loss_and_grad(self, values, x, y):
        (w, b), = self.unpack(values)
        loss, delta = _ce_delta(x @ w.T + b, y)
        return loss, np.concatenate([(delta.T @ x).ravel(), delta.sum(axis=0)])

    def to_dict(self):
        return {"kind": self.kind, "d": self.d, "c": self.c}


class MLP(Architecture):
    """One hidden ReLU layer."""

    kind = "MLP"

    def __init__(self, d: int, h: int, c: int):
        self.d, self.h, self.c = int(d), int(h), int(c)

    def layer_shapes(self):
        return [(self.h, self.d), (self.c, self.h)]

    def activations(self, values, x):
        (w1, b1), (w2, b2) = self.unpack(values)
        hidden = np.maximum(x @ w1.T + b1, 0.0)
        return [hidden, hidden @ w2.T + b2]

    def loss_and_grad(self, values, x, y):
        (w1, b1), (w2, b2) = self.unpack(values)
        pre = x @ w1.T + b1
        hidden = np.maximum(pre, 0.0)
        loss, delta = _ce_delta(hidden @ w2.T + b2, y)
        dh = (delta @ w2) * (pre > 0)
        grad = np.concatenate([
            (dh.T @ x).ravel(), dh.sum(axis=0),
            (delta.T @ hidden).ravel(), delta.sum(axis=0),
        ])
        return loss, grad

    def to_dict(self):
        return {"kind": self.kind, "d": self.d, "h": self.h, "c": self.c}


def architecture_from_dict(d: dict) -> Architecture:
    if d["kind"] == SoftmaxRegression.kind:
        return SoftmaxRegression(d["d"], d["c"])
    if d["kind"] == MLP.kind:
        return MLP(d["d"], d["h"], d["c"])
    raise ValueError(f"unknown architecture {d['kind']!r}")


@dataclass(frozen=True, eq=False)
class ModelParams:
    architecture: Architecture
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.architecture.num_params,):
            raise ValueError(
                f"expected {self.architecture.num_params} parameters, got shape {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("model parameters are not finite")
        object.__setattr__(self, "values", v)

    def __eq__(self, other):
        return (
            isinstance(other, ModelParams)
            and self.architecture == other.architecture
            and np.array_equal(self.values, other.values)
        )

    def copy(self) -> "ModelParams":
        return ModelParams(self.architecture, self.values.copy())
