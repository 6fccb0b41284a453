"""Numpy MLP classifier with exact input gradients and mixed second derivatives.

The gradient penalty needs ``d/dtheta`` of a functional of input gradients,
``Q(theta) = sum_{b,y} <S[b, y], grad_x h_y(x_b)>``. Each ``(b, y)`` pair is a
Jacobian-vector product of ``h`` in direction ``S[b, y]`` followed by picking
output ``y``; :meth:`MLP.penalty_param_grad` runs that tangent pass alongside
the primal pass and differentiates both in reverse. ReLU masks are piecewise
constant, so they contribute nothing to the second derivative.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FORMAT_VERSION = 1
BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class NumericalError(FloatingPointError):
    """A non-finite value appeared in a forward/backward pass or an update."""


class StaleCacheError(RuntimeError):
    """A forward cache was used after the model's parameters changed."""


@dataclass
class ForwardCache:
    version: int
    inputs: list  # activation entering each layer
    pre: list  # pre-activation of each layer
    masks: list  # dropout scale per hidden layer (None in eval mode)
    probs: np.ndarray


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class MLP:
    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray], dropout: float = 0.2):
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError("consecutive layer shapes do not chain")
        self.dropout = float(dropout)
        self._version = 0

    @classmethod
    def initialize(cls, layer_sizes: Sequence[int], rng: np.random.Generator, dropout: float = 0.2) -> "MLP":
        """He-style uniform fan-in initialisation, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, dropout)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, flat: Sequence[np.ndarray]) -> None:
        for i, p in enumerate(flat):
            target = self.weights[i // 2] if i % 2 == 0 else self.biases[i // 2]
            target[...] = p
        self.touch()

    def touch(self) -> None:
        self._version += 1

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.dropout)

    def zero_grad(self) -> list[np.ndarray]:
        return [np.zeros_like(p) for p in self.params()]

    # ------------------------------------------------------------------ forward / backward

    def forward(self, X, train: bool = False, rng: np.random.Generator | None = None):
        """Class probabilities for the rows of ``X``; returns ``(probs, cache)``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if not np.all(np.isfinite(X)):
            raise NumericalError("non-finite model input")
        if X.shape[1] != self.weights[0].shape[0]:
            raise ValueError(f"expected {self.weights[0].shape[0]} features, got {X.shape[1]}")
        use_dropout = train and self.dropout > 0.0
        if use_dropout and rng is None:
            raise ValueError("train-mode dropout needs a random generator")
        a = X
        inputs, pre, masks = [], [], []
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            z = a @ W + b
            pre.append(z)
            if l < last:
                a = np.maximum(z, 0.0)
                if use_dropout:
                    keep = rng.random(a.shape) >= self.dropout
                    mask = keep / (1.0 - self.dropout)
                    a = a * mask
                else:
                    mask = None
                masks.append(mask)
        probs = _softmax(pre[-1])
        return probs, ForwardCache(self._version, inputs, pre, masks, probs)

    def predict_proba(self, X, batch_size: int = 4096) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = [self.forward(X[i:i + batch_size])[0] for i in range(0, len(X), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))

    def param_grad(self, cache: ForwardCache, grad_probs: np.ndarray) -> list[np.ndarray]:
        """Reverse-mode gradient of a scalar loss given ``dLoss/dprobs`` for the cached batch."""
        if cache.version != self._version:
            raise StaleCacheError("forward cache predates the current parameters")
        p = cache.probs
        gp = np.asarray(grad_probs, dtype=np.float64).reshape(p.shape)
        gz = p * (gp - np.sum(p * gp, axis=1, keepdims=True))
        grads = [None] * (2 * len(self.weights))
        for l in range(len(self.weights) - 1, -1, -1):
            grads[2 * l] = cache.inputs[l].T @ gz
            grads[2 * l + 1] = gz.sum(axis=0)
            if l > 0:
                ga = gz @ self.weights[l].T
                if cache.masks[l - 1] is not None:
                    ga = ga * cache.masks[l - 1]
                gz = ga * (cache.pre[l - 1] > 0)
        return grads

    # ------------------------------------------------------------------ input gradients

    def input_jacobian(self, X) -> np.ndarray:
        """``J[b, y, j] = d h_y(x_b) / d x_j`` with dropout off."""
        probs, cache = self.forward(X)
        B, k = probs.shape
        eye = np.eye(k)
        # d p_y / d z = p_y (e_y - p)
        gz = (probs[:, :, None] * (eye[None, :, :] - probs[:, None, :])).reshape(B * k, k)
        for l in range(len(self.weights) - 1, 0, -1):
            ga = gz @ self.weights[l].T
            gz = ga * np.repeat(cache.pre[l - 1] > 0, k, axis=0)
        gx = gz @ self.weights[0].T
        return gx.reshape(B, k, -1)

    def input_grad(self, x, y: int) -> np.ndarray:
        if not 0 <= y < self.num_classes:
            raise ValueError(f"class index {y} outside [0, {self.num_classes})")
        return self.input_jacobian(np.atleast_2d(x))[0, y]

    def penalty_param_grad(self, X, seeds: np.ndarray) -> list[np.ndarray]:
        """``d/dtheta sum_{b,y,j} seeds[b, y, j] * d h_y(x_b) / d x_j`` (dropout off).

        ``seeds`` holds the derivative of the penalty with respect to each
        input-gradient entry.
        """
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        S = np.asarray(seeds, dtype=np.float64)
        B, k, d = S.shape
        b_idx, y_idx = np.nonzero(np.any(S != 0.0, axis=2))
        grads = self.zero_grad()
        if len(b_idx) == 0:
            return grads
        V = S[b_idx, y_idx]
        probs, cache = self.forward(X[b_idx])
        L = len(self.weights)

        # tangent pass in direction V
        tangents = [V]
        dz = V @ self.weights[0]
        for l in range(1, L):
            t = dz * (cache.pre[l - 1] > 0)
            tangents.append(t)
            dz = t @ self.weights[l]

        R = len(b_idx)
        rows = np.arange(R)
        p = probs
        py = p[rows, y_idx][:, None]
        e_y = np.zeros_like(p)
        e_y[rows, y_idx] = 1.0
        # Q_r = p_y (dz_y - <p, dz>)
        centred = dz[rows, y_idx] - np.sum(p * dz, axis=1)
        gdz = py * (e_y - p)
        gp = e_y * centred[:, None] - py * dz
        gz = p * (gp - np.sum(p * gp, axis=1, keepdims=True))

        for l in range(L - 1, -1, -1):
            grads[2 * l] = cache.inputs[l].T @ gz + tangents[l].T @ gdz
            grads[2 * l + 1] = gz.sum(axis=0)
            if l > 0:
                active = cache.pre[l - 1] > 0
                gz = (gz @ self.weights[l].T) * active
                gdz = (gdz @ self.weights[l].T) * active
            if not (np.all(np.isfinite(gz)) and np.all(np.isfinite(gdz))):
                raise NumericalError(f"non-finite second-order term at layer {l}")
        return grads


# ---------------------------------------------------------------------- optimiser

@dataclass
class OptimizerState:
    learning_rate: float
    weight_decay: float = 0.0
    step: int = 0
    first: list = field(default_factory=list)
    second: list = field(default_factory=list)

    @classmethod
    def for_model(cls, model: MLP, learning_rate: float, weight_decay: float = 0.0) -> "OptimizerState":
        return cls(learning_rate, weight_decay, 0, model.zero_grad(), model.zero_grad())


def adam_step(model: MLP, state: OptimizerState, grads: Sequence[np.ndarray]) -> None:
    """One in-place Adam update with decoupled weight decay."""
    params = model.params()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match the model")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericalError("non-finite gradient")
    state.step += 1
    lr, wd = state.learning_rate, state.weight_decay
    c1 = 1.0 - BETA1 ** state.step
    c2 = 1.0 - BETA2 ** state.step
    for p, g, m, v in zip(params, grads, state.first, state.second):
        if wd:
            p *= 1.0 - lr * wd
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    model.touch()


# ---------------------------------------------------------------------- checkpoints

def checkpoint_dict(model: MLP, seed: int | None = None, epoch: int | None = None) -> dict:
    return {
        "formatVersion": FORMAT_VERSION,
        "layerSizes": model.layer_sizes,
        "dropoutRate": model.dropout,
        "params": [base64.b64encode(p.astype("<f8").tobytes()).decode("ascii") for p in model.params()],
        "rngSeed": seed,
        "epoch": epoch,
    }


def model_from_checkpoint(obj: dict) -> MLP:
    if obj.get("formatVersion") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint formatVersion {obj.get('formatVersion')!r}")
    sizes = obj["layerSizes"]
    flat = [np.frombuffer(base64.b64decode(s), dtype="<f8").astype(np.float64) for s in obj["params"]]
    weights = [flat[2 * l].reshape(sizes[l], sizes[l + 1]) for l in range(len(sizes) - 1)]
    biases = [flat[2 * l + 1] for l in range(len(sizes) - 1)]
    return MLP(weights, biases, obj["dropoutRate"])


def save_checkpoint(model: MLP, path, seed: int | None = None, epoch: int | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, seed, epoch), sort_keys=True), encoding="utf-8")


def load_checkpoint(path) -> MLP:
    return model_from_checkpoint(json.loads(Path(path).read_text(encoding="utf-8")))
