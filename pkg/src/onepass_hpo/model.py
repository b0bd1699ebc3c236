"""Feed-forward ReLU networks and the losses used to train and validate them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, no_grad, softmax_cross_entropy

LOSS_KINDS = ("mse", "cross_entropy")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (50,)
    output_dim: int = 1
    activation: str = "relu"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer sizes must be >= 1, got {dims}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layer_dims)

    def shapes(self) -> list[tuple[int, ...]]:
        out = []
        for fan_in, fan_out in self.layer_dims:
            out += [(fan_in, fan_out), (fan_out,)]
        return out


def init_weights(spec: MlpSpec) -> list[np.ndarray]:
    """Weights uniform in +-1/sqrt(fan_in), biases zero; ordered [W1, b1, W2, b2, ...]."""
    rng = np.random.default_rng(spec.init_seed)
    weights = []
    for fan_in, fan_out in spec.layer_dims:
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        weights.append(np.zeros(fan_out))
    return weights


def forward(spec: MlpSpec, weights: Sequence, x) -> Tensor:
    """Network output for a batch ``x`` of shape (N, input_dim)."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected inputs of shape (N, {spec.input_dim}), got {x.shape}")
    if len(weights) != 2 * len(spec.layer_dims):
        raise ValueError(f"expected {2 * len(spec.layer_dims)} weight tensors, got {len(weights)}")
    h = x
    n_layers = len(spec.layer_dims)
    for k in range(n_layers):
        h = h @ weights[2 * k] + weights[2 * k + 1]
        if k < n_layers - 1:
            h = h.relu()
    return h


def mse(pred: Tensor, y) -> Tensor:
    """Mean over samples and output coordinates."""
    y = np.asarray(y, dtype=np.float64).reshape(pred.shape)
    r = pred - Tensor(y)
    return (r * r).mean()


def loss(spec: MlpSpec, weights: Sequence, batch, kind: str = "mse") -> Tensor:
    x, y = batch
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    pred = forward(spec, weights, x)
    if kind == "mse":
        if np.size(y) != pred.size:
            raise ValueError(f"targets of size {np.size(y)} do not match predictions {pred.shape}")
        return mse(pred, y)
    if spec.output_dim < 2:
        raise ValueError("cross-entropy needs output_dim >= 2")
    labels = np.asarray(y)
    if labels.shape != (pred.shape[0],):
        raise ValueError(f"expected {pred.shape[0]} class labels, got shape {labels.shape}")
    return softmax_cross_entropy(pred, labels.astype(np.intp))


@dataclass
class LossFn:
    """Picklable ``weights -> scalar loss`` closure over one batch.

    Extra keyword arguments (natural hyperparameters) are accepted and ignored,
    matching the signature the hypergradient engines call with.
    """

    spec: MlpSpec
    x: np.ndarray
    y: np.ndarray
    kind: str = "mse"
    _xt: Tensor = field(init=False, repr=False)

    def __post_init__(self):
        self._xt = Tensor(self.x)

    def __call__(self, weights, hyper=None) -> Tensor:
        return loss(self.spec, weights, (self._xt, self.y), self.kind)

    def value(self, weights) -> float:
        with no_grad():
            return float(self([Tensor(w) for w in weights]).data)
