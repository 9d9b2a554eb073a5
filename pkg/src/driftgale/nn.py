"""Small dense network engine: ReLU MLP with a sigmoid output, BCE loss and Adam.

Parameters are plain float64 numpy arrays. ``weights[l]`` has shape
``(d_{l+1}, d_l)``. Operations return new arrays rather than mutating, so a
model or optimizer state can be kept as a snapshot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import as_rng

CHECKPOINT_VERSION = 1
PROB_CLAMP = 1e-12


@dataclass
class MlpModel:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        dims = list(self.layer_dims)
        if len(dims) < 2 or dims[-1] != 1:
            raise ValueError(f"layer_dims must end in 1, got {dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("one weight matrix and bias vector per layer required")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[l + 1], dims[l]) or b.shape != (dims[l + 1],):
                raise ValueError(
                    f"layer {l}: expected W {(dims[l + 1], dims[l])} and b {(dims[l + 1],)}, "
                    f"got {w.shape} and {b.shape}"
                )
        self.layer_dims = dims

    @property
    def d_in(self) -> int:
        return self.layer_dims[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(list(self.layer_dims), [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases])


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


@dataclass
class ForwardCache:
    weights: list[np.ndarray]
    activations: list[np.ndarray]  # input, then post-ReLU hidden layers
    pre: list[np.ndarray]          # pre-activations for every layer
    probs: np.ndarray


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stability: float = 1e-8
    step_count: int = 0
    first_moment: Optional[list[np.ndarray]] = None
    second_moment: Optional[list[np.ndarray]] = None

    @classmethod
    def for_model(cls, model: MlpModel, **kw) -> "AdamState":
        zeros = [np.zeros_like(p) for p in model.params()]
        return cls(first_moment=zeros, second_moment=[z.copy() for z in zeros], **kw)


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def init_weights(layer_dims, rng) -> MlpModel:
    """He-uniform weights (bound sqrt(6 / fan_in)) and zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError(f"invalid layer dims {layer_dims}")
    gen = as_rng(rng).generator
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / d_in)
        weights.append(gen.uniform(-bound, bound, size=(d_out, d_in)))
        biases.append(np.zeros(d_out))
    return MlpModel(dims, weights, biases)


def zero_model(layer_dims) -> MlpModel:
    dims = [int(d) for d in layer_dims]
    return MlpModel(dims, [np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])],
                    [np.zeros(o) for o in dims[1:]])


def forward(model: MlpModel, batch: np.ndarray):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.d_in:
        raise ValueError(f"batch has {x.shape[1]} columns, model expects {model.d_in}")
    acts, pre = [x], []
    h = x
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        pre.append(z)
        if l < last:
            h = np.maximum(z, 0.0)
            acts.append(h)
    probs = sigmoid(pre[-1][:, 0])
    return probs, ForwardCache(list(model.weights), acts, pre, probs)


def predict_proba(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    return forward(model, batch)[0]


def bce_loss(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise ValueError(f"length mismatch: {probs.shape} vs {labels.shape}")
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(-(labels * np.log(p) + (1.0 - labels) * np.log1p(-p))))


def backward(model: MlpModel, cache: ForwardCache, labels) -> Gradients:
    """Gradients of the mean BCE loss for the batch that produced ``cache``."""
    if len(cache.weights) != len(model.weights) or any(
        a is not b for a, b in zip(cache.weights, model.weights)
    ):
        raise ValueError("stale cache: it was produced by different model parameters")
    labels = np.asarray(labels, dtype=np.float64)
    n = cache.probs.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    delta = ((cache.probs - labels) / n)[:, None]
    gw = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for l in range(len(model.weights) - 1, -1, -1):
        gw[l] = delta.T @ cache.activations[l]
        gb[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ model.weights[l]) * (cache.pre[l - 1] > 0)
    return Gradients(gw, gb)


def adam_step(model: MlpModel, gradients: Gradients, state: AdamState):
    """One bias-corrected Adam update. Returns ``(new_model, new_state)``."""
    params = model.params()
    grads = gradients.params()
    if state.first_moment is None:
        state = AdamState.for_model(model, learning_rate=state.learning_rate, beta1=state.beta1,
                                    beta2=state.beta2, eps_stability=state.eps_stability,
                                    step_count=state.step_count)
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match model parameters")
    if len(state.first_moment) != len(params) or any(
        m.shape != p.shape for m, p in zip(state.first_moment, params)
    ):
        raise ValueError("optimizer state shapes do not match model parameters")
    b1, b2 = state.beta1, state.beta2
    t = state.step_count + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, m1, m2 = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps_stability)
        new_params.append(p - step)
        m1.append(m)
        m2.append(v)
    new_model = MlpModel(list(model.layer_dims), new_params[0::2], new_params[1::2])
    new_state = AdamState(state.learning_rate, b1, b2, state.eps_stability, t, m1, m2)
    return new_model, new_state


def train_step(model: MlpModel, state: AdamState, batch, labels):
    probs, cache = forward(model, batch)
    loss = bce_loss(probs, labels)
    grads = backward(model, cache, labels)
    model, state = adam_step(model, grads, state)
    return model, state, loss


def loss_of(model: MlpModel, batch, labels) -> float:
    return bce_loss(forward(model, batch)[0], labels)


def numerical_gradients(model: MlpModel, batch, labels, h: float = 1e-5) -> Gradients:
    """Central finite differences of the unclamped mean BCE loss."""
    batch = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)

    def loss(m):
        z = forward(m, batch)[1].pre[-1][:, 0]
        # log-sigmoid form avoids the clamp and stays accurate at small h
        return float(np.mean(np.logaddexp(0.0, z) - labels * z))

    probe = model.copy()
    out = []
    for p in probe.params():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss(probe)
            flat[i] = old - h
            down = loss(probe)
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return Gradients(out[0::2], out[1::2])


def gradient_check(model: MlpModel, batch, labels, h: float = 1e-5,
                   abs_floor: float = 1e-8) -> float:
    """Largest relative error between analytic and finite-difference gradients.

    Entries whose analytic gradient is below ``abs_floor`` in magnitude are
    compared by absolute error instead.
    """
    _, cache = forward(model, batch)
    analytic = backward(model, cache, labels).params()
    numeric = numerical_gradients(model, batch, labels, h).params()
    worst = 0.0
    for a, n in zip(analytic, numeric):
        diff = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        err = np.where(np.abs(a) < abs_floor, diff, diff / np.where(scale > 0, scale, 1.0))
        worst = max(worst, float(err.max()))
    return worst


def save_checkpoint(path, model: MlpModel, state: Optional[AdamState] = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, state)))


def checkpoint_dict(model: MlpModel, state: Optional[AdamState] = None) -> dict:
    blob = {
        "version": CHECKPOINT_VERSION,
        "layer_dims": list(model.layer_dims),
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "adam": None,
    }
    if state is not None:
        blob["adam"] = {
            "learning_rate": state.learning_rate,
            "beta1": state.beta1,
            "beta2": state.beta2,
            "eps_stability": state.eps_stability,
            "step_count": state.step_count,
            "first_moment": None if state.first_moment is None
            else [m.tolist() for m in state.first_moment],
            "second_moment": None if state.second_moment is None
            else [v.tolist() for v in state.second_moment],
        }
    return blob


def load_checkpoint(path):
    return checkpoint_from_dict(json.loads(Path(path).read_text()))


def checkpoint_from_dict(blob: dict):
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')!r}")
    dims = blob["layer_dims"]
    model = MlpModel(
        list(dims),
        [np.array(w, dtype=np.float64).reshape(o, i) for w, i, o in
         zip(blob["weights"], dims[:-1], dims[1:])],
        [np.array(b, dtype=np.float64).reshape(o) for b, o in zip(blob["biases"], dims[1:])],
    )
    state = None
    a = blob.get("adam")
    if a is not None:
        shapes = [p.shape for p in model.params()]

        def arrays(key):
            if a[key] is None:
                return None
            return [np.array(v, dtype=np.float64).reshape(s) for v, s in zip(a[key], shapes)]

        state = AdamState(a["learning_rate"], a["beta1"], a["beta2"], a["eps_stability"],
                          a["step_count"], arrays("first_moment"), arrays("second_moment"))
    return model, state
