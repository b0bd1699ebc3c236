"""Reverse-mode automatic differentiation on float64 numpy arrays.

Every primitive's adjoint is written in terms of other primitives, so a
backward pass run with ``create_graph=True`` is itself recorded and can be
differentiated again.  Nodes carry a global creation index (the tape
position); backward passes visit nodes in decreasing tape order, which is a
valid reverse topological order and makes accumulation order deterministic.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "UnboundLeafError",
    "NoAdjointError",
    "Primitive",
    "REGISTRY",
    "Tensor",
    "as_tensor",
    "apply",
    "vjp",
    "grad",
    "no_grad",
    "is_recording",
]


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeError(AutodiffError, ValueError):
    """Raised when a primitive receives inputs with incompatible shapes."""


class UnboundLeafError(AutodiffError, KeyError):
    """Raised when replaying a graph without a value for one of its leaves."""


class NoAdjointError(AutodiffError):
    """Raised when differentiating through a primitive that cannot support it."""


_tape_index = itertools.count()
_local = threading.local()


def is_recording() -> bool:
    return getattr(_local, "recording", True)


@contextmanager
def _recording(flag: bool):
    prev = is_recording()
    _local.recording = flag
    try:
        yield
    finally:
        _local.recording = prev


def no_grad():
    """Context manager disabling graph recording on the current thread."""
    return _recording(False)


class Primitive:
    """A differentiable operation.

    ``forward(*arrays, **attrs)`` returns an ndarray.
    ``vjp(g, out, inputs, attrs, needs)`` returns one cotangent Tensor (or
    None) per input; ``needs[k]`` says whether input k wants one.
    """

    __slots__ = ("name", "forward", "vjp", "differentiable_adjoint")

    def __init__(self, name: str, forward: Callable, vjp: Callable | None = None,
                 differentiable_adjoint: bool = True):
        self.name = name
        self.forward = forward
        self.vjp = vjp
        self.differentiable_adjoint = differentiable_adjoint

    def __repr__(self):
        return f"Primitive({self.name!r})"


REGISTRY: dict[str, Primitive] = {}


def _register(name, forward, vjp=None, differentiable_adjoint=True) -> Primitive:
    prim = Primitive(name, forward, vjp, differentiable_adjoint)
    REGISTRY[name] = prim
    return prim


class _Node:
    __slots__ = ("prim", "inputs", "attrs")

    def __init__(self, prim, inputs, attrs):
        self.prim = prim
        self.inputs = inputs
        self.attrs = attrs


class Tensor:
    """An n-dimensional float64 value that may participate in a recorded graph."""

    __slots__ = ("data", "requires_grad", "node", "order", "name", "__weakref__")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor's reflected ops

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node = None
        self.order = next(_tape_index)
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return apply(TRANSPOSE, self)

    @property
    def is_leaf(self):
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        op = f", op={self.node.prim.name}" if self.node is not None else ""
        return f"Tensor({self.data!r}{tag}{op})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return apply(ADD, self, other)

    def __radd__(self, other):
        return apply(ADD, other, self)

    def __sub__(self, other):
        return apply(SUB, self, other)

    def __rsub__(self, other):
        return apply(SUB, other, self)

    def __mul__(self, other):
        return apply(MUL, self, other)

    def __rmul__(self, other):
        return apply(MUL, other, self)

    def __truediv__(self, other):
        return apply(DIV, self, other)

    def __rtruediv__(self, other):
        return apply(DIV, other, self)

    def __neg__(self):
        return apply(NEG, self)

    def __matmul__(self, other):
        return apply(MATMUL, self, other)

    def __rmatmul__(self, other):
        return apply(MATMUL, other, self)

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported; use exp/log")
        return apply(POWER, self, p=float(exponent))

    def __getitem__(self, key):
        return apply(GETITEM, self, key=key)

    # -- methods -------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return apply(SUM, self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply(MEAN, self, axis=axis, keepdims=keepdims)

    def max(self, axis=None):
        return apply(MAX, self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return apply(RESHAPE, self, shape=tuple(shape))

    def relu(self):
        return apply(RELU, self)

    def exp(self):
        return apply(EXP, self)

    def log(self):
        return apply(LOG, self)

    def tanh(self):
        return apply(TANH, self)

    def sigmoid(self):
        return apply(SIGMOID, self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(prim: Primitive, *inputs, **attrs) -> Tensor:
    """Evaluate ``prim`` and, when recording, attach it to the graph."""
    xs = tuple(as_tensor(x) for x in inputs)
    try:
        data = prim.forward(*(x.data for x in xs), **attrs)
    except ValueError as exc:
        shapes = ", ".join(str(x.shape) for x in xs)
        raise ShapeError(f"{prim.name}: incompatible input shapes ({shapes}): {exc}") from exc
    out = Tensor(data)
    if is_recording() and any(x.requires_grad for x in xs):
        out.requires_grad = True
        out.node = _Node(prim, xs, attrs)
    return out


# ---------------------------------------------------------------------------
# backward engine


def _ancestry(outputs: Iterable[Tensor]) -> list[Tensor]:
    seen = {}
    stack = [o for o in outputs if o.requires_grad]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen[id(t)] = t
        if t.node is not None:
            stack.extend(x for x in t.node.inputs if x.requires_grad and id(x) not in seen)
    return sorted(seen.values(), key=lambda t: t.order)


def vjp(outputs, seeds, wrt, create_graph: bool = False):
    """Vector-Jacobian products ``seed^T d(outputs)/d(wrt)``.

    ``outputs``/``seeds`` may be a single Tensor or matching sequences.
    Returns a list of Tensors aligned with ``wrt`` (a single Tensor if ``wrt``
    is one); inputs the outputs do not depend on get zeros.  With
    ``create_graph`` the results are themselves recorded graph nodes.
    """
    single_wrt = isinstance(wrt, Tensor)
    wrt = [wrt] if single_wrt else list(wrt)
    if isinstance(outputs, Tensor):
        outputs, seeds = [outputs], [seeds]
    outputs = list(outputs)
    seeds = [as_tensor(s) for s in seeds]
    if len(outputs) != len(seeds):
        raise ValueError("need one seed per output")
    for o, s in zip(outputs, seeds):
        if o.shape != s.shape:
            raise ShapeError(f"seed shape {s.shape} does not match output shape {o.shape}")

    tape = _ancestry(outputs)
    wrt_ids = {id(w) for w in wrt}
    # keep only nodes from which some wrt tensor is reachable
    relevant = set()
    for t in tape:
        if id(t) in wrt_ids or (t.node is not None and any(id(x) in relevant for x in t.node.inputs)):
            relevant.add(id(t))

    cot: dict[int, Tensor] = {}
    with _recording(create_graph):
        for o, s in zip(outputs, seeds):
            if id(o) in relevant:
                cot[id(o)] = cot[id(o)] + s if id(o) in cot else s
        found = {}
        for t in reversed(tape):
            g = cot.pop(id(t), None)
            if g is None:
                continue
            if id(t) in wrt_ids:
                found[id(t)] = g
            node = t.node
            if node is None:
                continue
            prim = node.prim
            if prim.vjp is None:
                raise NoAdjointError(f"primitive {prim.name!r} has no registered adjoint")
            if create_graph and not prim.differentiable_adjoint:
                raise NoAdjointError(f"primitive {prim.name!r} has no differentiable adjoint")
            needs = tuple(id(x) in relevant for x in node.inputs)
            parts = prim.vjp(g, t, node.inputs, node.attrs, needs)
            for x, c, need in zip(node.inputs, parts, needs):
                if not need or c is None:
                    continue
                key = id(x)
                cot[key] = cot[key] + c if key in cot else c
    result = [found.get(id(w)) if id(w) in found else Tensor(np.zeros_like(w.data)) for w in wrt]
    return result[0] if single_wrt else result


def grad(output: Tensor, wrt, create_graph: bool = False):
    """Gradient of a scalar output; ``vjp`` with a unit seed."""
    if output.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    return vjp(output, Tensor(np.ones_like(output.data)), wrt, create_graph=create_graph)


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: Tensor, shape) -> Tensor:
    return g if g.shape == shape else apply(SUM_TO, g, shape=shape)


def _add_vjp(g, out, xs, attrs, needs):
    a, b = xs
    return (_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None)


def _sub_vjp(g, out, xs, attrs, needs):
    a, b = xs
    return (_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None)


def _mul_vjp(g, out, xs, attrs, needs):
    a, b = xs
    return (_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None)


def _div_vjp(g, out, xs, attrs, needs):
    a, b = xs
    return (_unbroadcast(g / b, a.shape) if needs[0] else None,
            _unbroadcast(-g * a / (b * b), b.shape) if needs[1] else None)


def _neg_vjp(g, out, xs, attrs, needs):
    return (-g,)


def _matmul_vjp(g, out, xs, attrs, needs):
    a, b = xs
    da = db = None
    if a.ndim == 2 and b.ndim == 2:
        da = g @ b.T if needs[0] else None
        db = a.T @ g if needs[1] else None
    elif a.ndim == 2 and b.ndim == 1:
        if needs[0]:
            da = g.reshape(-1, 1) @ b.reshape(1, -1)
        db = g @ a if needs[1] else None
    elif a.ndim == 1 and b.ndim == 2:
        da = b @ g if needs[0] else None
        if needs[1]:
            db = a.reshape(-1, 1) @ g.reshape(1, -1)
    elif a.ndim == 1 and b.ndim == 1:
        da = g * b if needs[0] else None
        db = g * a if needs[1] else None
    else:
        raise ShapeError(f"matmul adjoint supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    return da, db


def _matmul_fwd(a, b):
    if a.ndim == 0 or b.ndim == 0 or a.ndim > 2 or b.ndim > 2:
        raise ValueError("matmul operands must be 1-D or 2-D")
    return a @ b


def _normalise_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand_reduced(g: Tensor, in_shape, axis, keepdims) -> Tensor:
    if not keepdims:
        axes = _normalise_axis(axis, len(in_shape))
        kept = tuple(1 if k in axes else n for k, n in enumerate(in_shape))
        g = g.reshape(kept)
    return apply(BROADCAST_TO, g, shape=tuple(in_shape))


def _sum_vjp(g, out, xs, attrs, needs):
    return (_expand_reduced(g, xs[0].shape, attrs["axis"], attrs["keepdims"]),)


def _mean_fwd(a, axis=None, keepdims=False):
    return np.mean(a, axis=axis, keepdims=keepdims)


def _mean_vjp(g, out, xs, attrs, needs):
    (a,) = xs
    count = a.size // max(out.size, 1)
    return (_expand_reduced(g, a.shape, attrs["axis"], attrs["keepdims"]) * (1.0 / count),)


def _sum_to_fwd(a, shape):
    shape = tuple(shape)
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ValueError(f"cannot sum {a.shape} down to {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + k for k, n in enumerate(shape) if n == 1 and a.shape[lead + k] != 1)
    r = np.sum(a, axis=axes, keepdims=True) if axes else a
    return r.reshape(shape)


def _sum_to_vjp(g, out, xs, attrs, needs):
    return (apply(BROADCAST_TO, g, shape=xs[0].shape),)


def _broadcast_to_fwd(a, shape):
    return np.array(np.broadcast_to(a, shape))


def _broadcast_to_vjp(g, out, xs, attrs, needs):
    return (_unbroadcast(g, xs[0].shape),)


def _reshape_vjp(g, out, xs, attrs, needs):
    return (g.reshape(xs[0].shape),)


def _transpose_vjp(g, out, xs, attrs, needs):
    return (g.T,)


def _getitem_fwd(a, key):
    return np.array(a[key])


def _getitem_vjp(g, out, xs, attrs, needs):
    return (apply(SCATTER, g, key=attrs["key"], shape=xs[0].shape),)


def _scatter_fwd(a, key, shape):
    z = np.zeros(shape)
    z[key] = a
    return z


def _scatter_vjp(g, out, xs, attrs, needs):
    return (g[attrs["key"]],)


def _relu_vjp(g, out, xs, attrs, needs):
    # subgradient at 0 taken as 0
    return (g * Tensor(xs[0].data > 0),)


def _exp_vjp(g, out, xs, attrs, needs):
    return (g * out,)


def _log_vjp(g, out, xs, attrs, needs):
    return (g / xs[0],)


def _tanh_vjp(g, out, xs, attrs, needs):
    return (g * (1.0 - out * out),)


def _sigmoid_fwd(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _sigmoid_vjp(g, out, xs, attrs, needs):
    return (g * out * (1.0 - out),)


def _power_vjp(g, out, xs, attrs, needs):
    p = attrs["p"]
    if p == 0.0:
        return (g * 0.0,)
    if p == 1.0:
        return (g,)
    return (g * (p * xs[0] ** (p - 1.0)),)


def _max_vjp(g, out, xs, attrs, needs):
    (a,) = xs
    axis = attrs["axis"]
    # one-hot at the first maximiser; ties go to the lowest index
    if axis is None:
        mask = np.zeros(a.size)
        mask[np.argmax(a.data)] = 1.0
        mask = mask.reshape(a.shape)
    else:
        idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
        mask = np.zeros(a.shape)
        np.put_along_axis(mask, idx, 1.0, axis=axis)
    return (_expand_reduced(g, a.shape, axis, False) * Tensor(mask),)


def _softmax_fwd(a, axis=-1):
    z = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _softmax_vjp(g, out, xs, attrs, needs):
    axis = attrs["axis"]
    return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


def _xent_fwd(logits, labels):
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError("softmax_cross_entropy needs (N, C) logits and N labels")
    m = np.max(logits, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(logits - m), axis=1))
    return np.mean(lse - logits[np.arange(len(labels)), labels])


def _xent_vjp(g, out, xs, attrs, needs):
    (z,) = xs
    labels = attrs["labels"]
    n, c = z.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    return ((apply(SOFTMAX, z, axis=1) - Tensor(onehot)) * (g * (1.0 / n)),)


ADD = _register("add", np.add, _add_vjp)
SUB = _register("sub", np.subtract, _sub_vjp)
MUL = _register("mul", np.multiply, _mul_vjp)
DIV = _register("div", np.divide, _div_vjp)
NEG = _register("neg", np.negative, _neg_vjp)
MATMUL = _register("matmul", _matmul_fwd, _matmul_vjp)
TRANSPOSE = _register("transpose", np.transpose, _transpose_vjp)
RESHAPE = _register("reshape", lambda a, shape: np.reshape(a, shape), _reshape_vjp)
GETITEM = _register("getitem", _getitem_fwd, _getitem_vjp)
SCATTER = _register("scatter", _scatter_fwd, _scatter_vjp)
SUM = _register("sum", lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims), _sum_vjp)
MEAN = _register("mean", _mean_fwd, _mean_vjp)
SUM_TO = _register("sum_to", _sum_to_fwd, _sum_to_vjp)
BROADCAST_TO = _register("broadcast_to", _broadcast_to_fwd, _broadcast_to_vjp)
RELU = _register("relu", lambda a: np.maximum(a, 0.0), _relu_vjp)
EXP = _register("exp", np.exp, _exp_vjp)
LOG = _register("log", np.log, _log_vjp)
TANH = _register("tanh", np.tanh, _tanh_vjp)
SIGMOID = _register("sigmoid", _sigmoid_fwd, _sigmoid_vjp)
POWER = _register("power", lambda a, p: np.power(a, p), _power_vjp)
MAX = _register("max", lambda a, axis=None: np.max(a, axis=axis), _max_vjp)
SOFTMAX = _register("softmax", _softmax_fwd, _softmax_vjp)
SOFTMAX_CROSS_ENTROPY = _register("softmax_cross_entropy", _xent_fwd, _xent_vjp)


# functional spellings ------------------------------------------------------

def relu(x):
    return apply(RELU, x)


def exp(x):
    return apply(EXP, x)


def log(x):
    return apply(LOG, x)


def tanh(x):
    return apply(TANH, x)


def sigmoid(x):
    return apply(SIGMOID, x)


def softmax(x, axis=-1):
    return apply(SOFTMAX, x, axis=axis)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    return apply(SOFTMAX_CROSS_ENTROPY, logits, labels=np.asarray(labels, dtype=np.intp))


def flat(tensors: Sequence[Tensor]) -> np.ndarray:
    """Concatenate tensor values into one vector."""
    return np.concatenate([np.ravel(t.data if isinstance(t, Tensor) else t) for t in tensors])
