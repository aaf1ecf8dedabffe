"""Small dense networks in float64 numpy with hand-written backpropagation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, StateError

ACTIVATIONS = ("relu", "identity")


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"inconsistent layer shapes {self.weight.shape} / {self.bias.shape}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class MlpModel:
    layers: list[DenseLayer]
    _cache: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        if self.layers[-1].activation != "identity":
            raise ValueError("final layer must be linear (it emits logits)")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    def parameters(self) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed ``"<layer>.weight"`` / ``"<layer>.bias"`` in declaration order."""
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{i}.weight"] = layer.weight
            out[f"{i}.bias"] = layer.bias
        return out

    def copy(self) -> MlpModel:
        return MlpModel([DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])


def init_mlp(dims: Sequence[int], rng: np.random.Generator, hidden_activation: str = "relu") -> MlpModel:
    """Glorot-uniform weights, zero biases. ``dims`` = [input, hidden..., output]."""
    layers = []
    for i, (n_in, n_out) in enumerate(zip(dims, dims[1:])):
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_out, n_in))
        act = "identity" if i == len(dims) - 2 else hidden_activation
        layers.append(DenseLayer(w, np.zeros(n_out), act))
    return MlpModel(layers)


def forward(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"batch shape {x.shape} does not match input dim {model.input_dim}")
    inputs, pre = [], []
    h = x
    for layer in model.layers:
        inputs.append(h)
        a = h @ layer.weight.T + layer.bias
        pre.append(a)
        h = np.maximum(a, 0.0) if layer.activation == "relu" else a
    model._cache = (batch, inputs, pre)
    return h


def relu_margin(model: MlpModel, batch: np.ndarray) -> float:
    """Smallest |pre-activation| over all ReLU units for ``batch`` (inf if none).

    Finite differences with step h are only meaningful when this exceeds h by a wide margin.
    """
    forward(model, batch)
    _, _, pre = model._cache
    margins = [np.abs(a).min() for a, layer in zip(pre, model.layers) if layer.activation == "relu" and a.size]
    return float(min(margins, default=np.inf))


def backward(model: MlpModel, batch: np.ndarray, upstream_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream_grad * forward(batch))`` w.r.t. every parameter.

    Requires that the last :func:`forward` call on ``model`` used ``batch``.
    """
    if model._cache is None:
        raise StateError("backward called before forward")
    cached, inputs, pre = model._cache
    if cached is not batch and not (
        np.shape(cached) == np.shape(batch) and np.array_equal(cached, batch)
    ):
        raise StateError("forward cache is stale for this batch")
    delta = np.asarray(upstream_grad, dtype=np.float64)
    if delta.shape != (inputs[0].shape[0], model.output_dim):
        raise ShapeError(f"upstream gradient shape {delta.shape} != {(inputs[0].shape[0], model.output_dim)}")
    grads: dict[str, np.ndarray] = {}
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.activation == "relu":
            delta = delta * (pre[i] > 0)
        grads[f"{i}.weight"] = delta.T @ inputs[i]
        grads[f"{i}.bias"] = delta.sum(axis=0)
        if i:
            delta = delta @ layer.weight
    return {k: grads[k] for k in model.parameters()}


@dataclass
class OptimizerState:
    """Adam moments with decoupled weight decay on weight matrices only."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], lr: float, weight_decay: float = 0.0, **kw) -> OptimizerState:
        return cls(
            lr=lr,
            weight_decay=weight_decay,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **kw,
        )


def optimizer_step(state: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Update ``params`` in place and return them."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and name.endswith("weight"):
            p *= 1.0 - state.lr * state.weight_decay
    return params


def grad_check(
    loss_fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss, grads)``; only the loss is used at
    perturbed points. Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    Parameters are perturbed in place and restored.
    """
    _, analytic = loss_fn(params)
    analytic = {k: np.array(v, copy=True) for k, v in analytic.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn(params)[0]
            flat[i] = orig - h
            f_minus = loss_fn(params)[0]
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = a_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
