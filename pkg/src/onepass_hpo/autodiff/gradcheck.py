"""Finite-difference checks for every registered primitive.

Each primitive is wrapped as ``f(x) = <r, prim(x)>`` for a fixed random
``r`` so the check covers the full Jacobian in one scalar.  First-order
adjoints are compared with central differences of ``f``; second-order
adjoints are compared with central differences of the autodiff gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core
from .core import REGISTRY, Tensor, apply, grad, vjp

H = 1e-5
TOL = 1e-6


def _smooth(rng, shape, low=0.2, high=1.5):
    # magnitudes bounded away from zero so relu/max stay clear of kinks and ties
    mag = rng.uniform(low, high, size=shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    return _smooth(rng, shape) + np.arange(int(np.prod(shape))).reshape(shape) * 0.37


# name -> (input factory, attrs); inputs are all differentiated
def _cases():
    return {
        "add": (lambda r: [r.normal(size=(3, 2)), r.normal(size=(2,))], {}),
        "sub": (lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 1))], {}),
        "mul": (lambda r: [r.normal(size=(3, 2)), r.normal(size=(2,))], {}),
        "div": (lambda r: [r.normal(size=(3,)), _smooth(r, (3,), 0.5, 2.0)], {}),
        "neg": (lambda r: [r.normal(size=(4,))], {}),
        "matmul": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))], {}),
        "transpose": (lambda r: [r.normal(size=(3, 2))], {}),
        "reshape": (lambda r: [r.normal(size=(3, 2))], {"shape": (2, 3)}),
        "getitem": (lambda r: [r.normal(size=(6,))], {"key": slice(1, 4)}),
        "scatter": (lambda r: [r.normal(size=(3,))], {"key": slice(2, 5), "shape": (6,)}),
        "sum": (lambda r: [r.normal(size=(3, 4))], {"axis": 0, "keepdims": False}),
        "mean": (lambda r: [r.normal(size=(3, 4))], {"axis": 1, "keepdims": True}),
        "sum_to": (lambda r: [r.normal(size=(3, 4))], {"shape": (4,)}),
        "broadcast_to": (lambda r: [r.normal(size=(4,))], {"shape": (3, 4)}),
        "relu": (lambda r: [_smooth(r, (5,))], {}),
        "exp": (lambda r: [r.normal(size=(4,))], {}),
        "log": (lambda r: [r.uniform(0.5, 2.0, size=(4,))], {}),
        "tanh": (lambda r: [r.normal(size=(4,))], {}),
        "sigmoid": (lambda r: [r.normal(scale=2.0, size=(4,))], {}),
        "power": (lambda r: [r.uniform(0.5, 2.0, size=(4,))], {"p": 2.5}),
        "max": (lambda r: [_distinct(r, (3, 4))], {"axis": 1}),
        "softmax": (lambda r: [r.normal(size=(3, 4))], {"axis": 1}),
        "softmax_cross_entropy": (lambda r: [r.normal(size=(4, 3))], {"labels": np.array([0, 2, 1, 2])}),
    }


CASES = _cases()


@dataclass
class PrimitiveReport:
    name: str
    first_order_error: float
    second_order_error: float
    inputs: list = field(repr=False, default_factory=list)

    @property
    def passed(self) -> bool:
        return (np.isfinite(self.first_order_error) and self.first_order_error < TOL
                and np.isfinite(self.second_order_error) and self.second_order_error < TOL)


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.max(np.abs(b)), np.max(np.abs(a)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


def check_primitive(name: str, seed: int = 0) -> PrimitiveReport:
    prim = REGISTRY[name]
    make, attrs = CASES[name]
    rng = np.random.default_rng(seed)
    xs = [np.asarray(x, dtype=np.float64) for x in make(rng)]
    out_shape = prim.forward(*xs, **attrs).shape
    r = rng.normal(size=out_shape)

    def f(*arrays):
        return float(np.sum(r * prim.forward(*arrays, **attrs)))

    leaves = [Tensor(x, requires_grad=True) for x in xs]
    out = apply(prim, *leaves, **attrs)
    scalar = (out * Tensor(r)).sum()
    try:
        grads = grad(scalar, leaves, create_graph=True)
    except core.AutodiffError:
        return PrimitiveReport(name, float("inf"), float("inf"), xs)

    # first order: central differences of f
    num = [np.zeros_like(x) for x in xs]
    for k, x in enumerate(xs):
        for idx in np.ndindex(x.shape):
            xp = [a.copy() for a in xs]
            xm = [a.copy() for a in xs]
            xp[k][idx] += H
            xm[k][idx] -= H
            num[k][idx] = (f(*xp) - f(*xm)) / (2 * H)
    first = max(_rel_err(g.data, n) for g, n in zip(grads, num))

    # second order: Hessian-vector product vs differences of the gradient
    v = [rng.normal(size=x.shape) for x in xs]
    dot = sum((g * Tensor(vk)).sum() for g, vk in zip(grads, v))
    if dot.requires_grad:
        hv = [t.data for t in grad(dot, leaves)]
    else:
        hv = [np.zeros_like(x) for x in xs]

    def grad_at(arrays):
        ls = [Tensor(a, requires_grad=True) for a in arrays]
        s = (apply(prim, *ls, **attrs) * Tensor(r)).sum()
        return [g.data for g in grad(s, ls)]

    gp = grad_at([x + H * vk for x, vk in zip(xs, v)])
    gm = grad_at([x - H * vk for x, vk in zip(xs, v)])
    hv_num = [(a - b) / (2 * H) for a, b in zip(gp, gm)]
    second = max(_rel_err(a, b) for a, b in zip(hv, hv_num))
    return PrimitiveReport(name, first, second, xs)


def check_all(seed: int = 0) -> list[PrimitiveReport]:
    """One report per registered primitive, in registration order."""
    reports = []
    for name in REGISTRY:
        if name not in CASES:
            reports.append(PrimitiveReport(name, float("inf"), float("inf")))
            continue
        reports.append(check_primitive(name, seed))
    return reports


def check_quadratic_hvp(n: int = 6, seed: int = 0) -> float:
    """Max abs deviation of the nested-VJP Hessian product of 1/2 w'Aw from A v."""
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(n, n))
    a = (m + m.T) / 2
    w = Tensor(rng.normal(size=n), requires_grad=True)
    loss = (w @ (Tensor(a) @ w)) * 0.5
    (g,) = grad(loss, [w], create_graph=True)
    worst = 0.0
    for _ in range(5):
        v = rng.normal(size=n)
        hv = vjp(g, Tensor(v), w).data
        worst = max(worst, float(np.max(np.abs(hv - a @ v))))
    return worst
