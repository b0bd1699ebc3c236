"""Differentiable SGD weight updates, hyperparameter transforms and the Adam meta-optimiser."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor, no_grad

LN10 = math.log(10.0)
LR_BOUNDS = (1e-10, 1.0)
TRANSFORMS = ("log10", "inverse_sigmoid", "identity")


class DivergedError(ArithmeticError):
    """A NaN or infinity appeared in training or hypergradient computation."""


# -- transforms ---------------------------------------------------------------

def to_natural(transform: str, internal):
    x = np.asarray(internal, dtype=np.float64)
    if transform == "log10":
        return np.exp(x * LN10)
    if transform == "inverse_sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if transform == "identity":
        return x.copy()
    raise ValueError(f"unknown transform {transform!r}")


def to_internal(transform: str, natural):
    x = np.asarray(natural, dtype=np.float64)
    if transform == "log10":
        if np.any(x <= 0):
            raise ValueError("log10 transform needs strictly positive values")
        return np.log10(x)
    if transform == "inverse_sigmoid":
        if np.any((x <= 0) | (x >= 1)):
            raise ValueError("inverse_sigmoid transform needs values in (0, 1)")
        return np.log(x) - np.log1p(-x)
    if transform == "identity":
        return x.copy()
    raise ValueError(f"unknown transform {transform!r}")


def natural_tensor(transform: str, t: Tensor) -> Tensor:
    """Graph-recorded version of :func:`to_natural`."""
    if transform == "log10":
        return (t * LN10).exp()
    if transform == "inverse_sigmoid":
        return t.sigmoid()
    if transform == "identity":
        return t
    raise ValueError(f"unknown transform {transform!r}")


# -- hyperparameter containers -------------------------------------------------

@dataclass
class HyperParam:
    name: str
    value: np.ndarray  # internal (transformed) space
    transform: str = "identity"
    optimisable: bool = True
    bounds: tuple[float, float] | None = None  # natural-space clip range

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")

    @property
    def natural(self) -> np.ndarray:
        return to_natural(self.transform, self.value)

    @property
    def size(self) -> int:
        return self.value.size


class HyperVector:
    """Ordered named hyperparameters held in internal space, with an optimisation mask."""

    def __init__(self, entries: Sequence[HyperParam]):
        names = [e.name for e in entries]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate hyperparameter names in {names}")
        self.entries = list(entries)
        self._index = {e.name: k for k, e in enumerate(self.entries)}

    @classmethod
    def from_natural(cls, values: Mapping[str, object], transforms: Mapping[str, str],
                     mask: Sequence[str] | None = None,
                     bounds: Mapping[str, tuple[float, float]] | None = None) -> "HyperVector":
        bounds = bounds or {}
        entries = []
        for name, nat in values.items():
            tr = transforms.get(name, "identity")
            entries.append(HyperParam(name, to_internal(tr, nat), tr,
                                      optimisable=mask is None or name in mask,
                                      bounds=bounds.get(name)))
        return cls(entries)

    def __contains__(self, name):
        return name in self._index

    def __getitem__(self, name) -> HyperParam:
        return self.entries[self._index[name]]

    def __iter__(self):
        return iter(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def mask(self) -> list[str]:
        return [e.name for e in self.entries if e.optimisable]

    def natural(self, name: str) -> np.ndarray:
        return self[name].natural

    def naturals(self) -> dict[str, np.ndarray]:
        return {e.name: e.natural for e in self.entries}

    def copy(self) -> "HyperVector":
        return HyperVector([replace(e, value=e.value.copy()) for e in self.entries])

    def with_mask(self, names: Sequence[str]) -> "HyperVector":
        return HyperVector([replace(e, value=e.value.copy(), optimisable=e.name in names)
                            for e in self.entries])

    def size(self, masked_only: bool = False) -> int:
        return sum(e.size for e in self.entries if e.optimisable or not masked_only)

    def slices(self) -> dict[str, slice]:
        """Position of each entry inside the full flattened vector."""
        out, k = {}, 0
        for e in self.entries:
            out[e.name] = slice(k, k + e.size)
            k += e.size
        return out

    def flat(self, masked_only: bool = False) -> np.ndarray:
        parts = [e.value.ravel() for e in self.entries if e.optimisable or not masked_only]
        return np.concatenate(parts) if parts else np.zeros(0)

    def mask_vector(self) -> np.ndarray:
        """Boolean selector of optimisable components within the full flat vector."""
        return np.concatenate([np.full(e.size, e.optimisable) for e in self.entries])

    def leaves(self) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
        """Internal-space Tensors (differentiable for masked entries) and their natural images."""
        internal, natural = {}, {}
        for e in self.entries:
            t = Tensor(e.value, requires_grad=e.optimisable, name=e.name)
            internal[e.name] = t
            natural[e.name] = natural_tensor(e.transform, t)
        return internal, natural


def clip_lr(hyper: HyperVector) -> HyperVector:
    """Project every bounded entry onto its natural-space range; others untouched."""
    out = hyper.copy()
    for e in out.entries:
        if e.bounds is None:
            continue
        lo, hi = (to_internal(e.transform, b) for b in e.bounds)
        e.value = np.clip(e.value, lo, hi)
    return out


# -- weight update -------------------------------------------------------------

@dataclass
class SgdState:
    velocity: list[np.ndarray]

    @classmethod
    def zeros_like(cls, weights: Sequence[np.ndarray]) -> "SgdState":
        return cls([np.zeros_like(np.asarray(w, dtype=np.float64)) for w in weights])


def _lr_part(lr, k_offset: int, shape) -> object:
    """Scalar learning rates pass through; per-parameter vectors are sliced to ``shape``."""
    size = int(np.prod(shape))
    if np.size(lr.data if isinstance(lr, Tensor) else lr) == 1:
        return lr
    return lr[k_offset:k_offset + size].reshape(shape)


def sgd_update(hyper: Mapping[str, object], weights: Sequence, velocity: Sequence, grads: Sequence):
    """SGD with momentum and decoupled weight decay.

    ``buf' = m * buf + g + wd * w`` and ``u = lr * buf'``; the caller applies
    ``w <- w - u``.  Operands may be ndarrays or Tensors; with Tensors the
    result is recorded and differentiable in both hyperparameters and weights.
    ``hyper`` holds natural-space values for ``lr`` and optionally ``wd`` and
    ``momentum``; ``lr`` may be a scalar or one entry per model parameter.

    Returns ``(u, new_velocity)``.
    """
    lr = hyper["lr"]
    wd = hyper.get("wd", 0.0)
    m = hyper.get("momentum", 0.0)
    updates, new_velocity = [], []
    offset = 0
    for w, buf, g in zip(weights, velocity, grads):
        shape = w.shape
        b = m * buf + g + wd * w
        updates.append(_lr_part(lr, offset, shape) * b)
        new_velocity.append(b)
        offset += int(np.prod(shape))
    return updates, new_velocity


def check_finite(arrays: Sequence, what: str = "value") -> None:
    for a in arrays:
        data = a.data if isinstance(a, Tensor) else a
        if not np.all(np.isfinite(data)):
            raise DivergedError(f"non-finite {what}")


# -- meta-optimiser ---------------------------------------------------------------

@dataclass
class MetaOptimiser:
    """Adam over the optimisable entries of a HyperVector, in internal space."""

    kappa: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    step_count: int = 0

    def step(self, g: np.ndarray) -> np.ndarray:
        """Advance the moments and return the additive update for ``g``."""
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.step_count += 1
        t = self.step_count
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1 ** t)
        v_hat = self.v / (1 - self.beta2 ** t)
        return -self.kappa * m_hat / (np.sqrt(v_hat) + self.eps)


def meta_step(opt: MetaOptimiser, hyper: HyperVector, hypergrad) -> HyperVector:
    """One Adam step on the masked entries followed by :func:`clip_lr`.

    ``hypergrad`` may cover only the optimisable components or the full
    flattened vector (unmasked components are then ignored).
    """
    g = np.asarray(getattr(hypergrad, "total", hypergrad), dtype=np.float64).ravel()
    sel = hyper.mask_vector()
    if g.size == sel.size and g.size != sel.sum():
        g = g[sel]
    if g.size != sel.sum():
        raise ValueError(f"hypergradient has {g.size} components, expected {int(sel.sum())}")
    if not np.all(np.isfinite(g)):
        raise DivergedError("non-finite hypergradient")
    delta = opt.step(g)
    out = hyper.copy()
    k = 0
    for e in out.entries:
        if not e.optimisable:
            continue
        e.value = e.value + delta[k:k + e.size].reshape(e.value.shape)
        k += e.size
    return clip_lr(out)


def weights_step(hyper_natural: Mapping[str, np.ndarray], weights: list[np.ndarray],
                 state: SgdState, grads: Sequence[np.ndarray]) -> tuple[list[np.ndarray], SgdState]:
    """Apply one plain (unrecorded) SGD step; returns new weights and state."""
    with no_grad():
        u, vel = sgd_update(hyper_natural, weights, state.velocity, grads)
    return [w - du for w, du in zip(weights, u)], SgdState(vel)
