"""Hypergradient engines.

All engines return hypergradients with respect to the *internal*
(transformed) hyperparameters, flattened in HyperVector order, with exact
zeros on entries outside the optimisation mask.

Loss callables have the signature ``loss(weights: list[Tensor], hyper:
dict[str, Tensor]) -> Tensor`` where ``hyper`` maps names to natural-space
values; update callables follow :func:`onepass_hpo.update.sgd_update`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, grad, vjp
from .update import LN10, DivergedError, HyperVector, SgdState, check_finite, sgd_update

LossCallable = Callable[[list, dict], Tensor]


@dataclass
class Hypergradient:
    direct: np.ndarray
    indirect: np.ndarray
    names: tuple[str, ...] = ()
    slices: dict | None = None

    @property
    def total(self) -> np.ndarray:
        return self.direct + self.indirect

    def component(self, name: str) -> np.ndarray:
        return self.total[self.slices[name]]

    def masked(self, hyper: HyperVector) -> np.ndarray:
        return self.total[hyper.mask_vector()]


def _pack(hyper: HyperVector, parts: dict[str, np.ndarray]) -> np.ndarray:
    out = np.zeros(hyper.size())
    for name, sl in hyper.slices().items():
        if hyper[name].optimisable and name in parts:
            out[sl] = np.ravel(parts[name])
    return out


def _as_hypergradient(hyper, direct: dict, indirect: dict) -> Hypergradient:
    hg = Hypergradient(_pack(hyper, direct), _pack(hyper, indirect),
                       tuple(hyper.names), hyper.slices())
    if not np.all(np.isfinite(hg.total)):
        raise DivergedError("non-finite hypergradient")
    return hg


def neumann_hypergradient(hyper: HyperVector, weights: Sequence[np.ndarray], state: SgdState,
                          train_loss: LossCallable, val_loss: LossCallable, lookback: int,
                          *, update=sgd_update,
                          linearise_at: Sequence[np.ndarray] | None = None) -> Hypergradient:
    """Approximate hypergradient from a truncated Neumann series of VJPs.

    Accumulates ``p = sum_{j=0..lookback} dLv/dw (I - du/dw)^j`` by repeated
    vector-Jacobian products through one recorded update ``u(lambda, w)``,
    then returns ``direct = dLv/dlambda`` and ``indirect = -p du/dlambda``.
    The velocity in ``state`` is treated as a constant.  ``linearise_at``
    evaluates ``u`` at different weights than ``dLv/dw`` (default: the same).
    """
    if lookback < 0:
        raise ValueError("look-back distance must be non-negative")
    internal, natural = hyper.leaves()
    lam = [internal[n] for n in hyper.names]

    w_eval = [Tensor(w, requires_grad=True) for w in weights]
    lv = val_loss(w_eval, natural)
    dv = grad(lv, w_eval + lam)
    dv_w, dv_lam = dv[:len(w_eval)], dv[len(w_eval):]
    check_finite(dv_w, "validation gradient")

    w_lin = w_eval if linearise_at is None else [Tensor(w, requires_grad=True) for w in linearise_at]
    lt = train_loss(w_lin, natural)
    g = grad(lt, w_lin, create_graph=True)
    velocity = [Tensor(b) for b in state.velocity]
    u, _ = update(natural, w_lin, velocity, g)

    v = [d.data for d in dv_w]
    p = [a.copy() for a in v]
    for _ in range(lookback):
        jv = vjp(u, [Tensor(a) for a in v], w_lin)
        v = [a - b.data for a, b in zip(v, jv)]
        p = [a + b for a, b in zip(p, v)]
        check_finite(p, "Neumann accumulator")
    ind = vjp(u, [Tensor(a) for a in p], lam)

    direct = {n: d.data for n, d in zip(hyper.names, dv_lam)}
    indirect = {n: -t.data for n, t in zip(hyper.names, ind)}
    return _as_hypergradient(hyper, direct, indirect)


def lorraine_hypergradient(hyper: HyperVector, weights, state, train_loss, val_loss, lookback,
                           **kwargs) -> Hypergradient:
    """Neumann hypergradient restricted to weight decay."""
    return neumann_hypergradient(hyper.with_mask(["wd"]), weights, state, train_loss, val_loss,
                                 lookback, **kwargs)


def unroll(hyper: HyperVector, weights0: Sequence[np.ndarray], state0: SgdState,
           train_losses: Sequence[LossCallable], val_loss: LossCallable | None,
           update=sgd_update):
    """Run ``len(train_losses)`` recorded updates from detached ``(weights0, state0)``.

    Returns ``(hypergradient or None, final weights, final state)``.  The
    velocity buffer is differentiated through inside the window.
    """
    internal, natural = hyper.leaves()
    lam = [internal[n] for n in hyper.names]
    w = [Tensor(a, requires_grad=True) for a in weights0]
    vel = [Tensor(b) for b in state0.velocity]
    for loss_fn in train_losses:
        lt = loss_fn(w, natural)
        g = grad(lt, w, create_graph=True)
        u, vel = update(natural, w, vel, g)
        w = [a - b for a, b in zip(w, u)]
    final_w = [t.data for t in w]
    final_state = SgdState([t.data for t in vel])
    check_finite(final_w, "weights")
    if val_loss is None:
        return None, final_w, final_state

    total = grad(val_loss(w, natural), lam)
    w_const = [Tensor(a, requires_grad=True) for a in final_w]
    direct = grad(val_loss(w_const, natural), lam)
    direct_d = {n: d.data for n, d in zip(hyper.names, direct)}
    indirect_d = {n: t.data - d.data for n, t, d in zip(hyper.names, total, direct)}
    return _as_hypergradient(hyper, direct_d, indirect_d), final_w, final_state


def exact_unrolled_hypergradient(hyper: HyperVector, weights0, state0: SgdState,
                                 train_losses, val_loss: LossCallable, window: int | None = None,
                                 *, update=sgd_update) -> Hypergradient:
    """Exact derivative of the validation loss through ``window`` recorded updates.

    ``train_losses`` is one loss per step, or a single loss reused ``window`` times.
    """
    if callable(train_losses):
        if window is None or window < 1:
            raise ValueError("window must be >= 1")
        train_losses = [train_losses] * window
    elif window is not None and window != len(train_losses):
        raise ValueError("window disagrees with the number of step losses")
    if len(train_losses) < 1:
        raise ValueError("window must be >= 1")
    hg, _, _ = unroll(hyper, weights0, state0, train_losses, val_loss, update)
    return hg


def baydin_hypergradient(grad_now: Sequence[np.ndarray], grad_prev: Sequence[np.ndarray] | None) -> float:
    """Natural-space learning-rate hypergradient ``-<grad_now, grad_prev>`` of one SGD step."""
    if grad_prev is None:
        return 0.0
    return -float(sum(np.vdot(a, b) for a, b in zip(grad_now, grad_prev)))


def baydin_to_internal(h_natural: float, lr_natural: float) -> float:
    """Chain rule through ``lr = 10**x``."""
    return h_natural * LN10 * float(lr_natural)


def hypergradient_error(approx, exact, eps: float = 1e-12) -> np.ndarray:
    """Per-component ``|approx - exact| / max(|exact|, eps)``."""
    a = np.asarray(getattr(approx, "total", approx), dtype=np.float64)
    e = np.asarray(getattr(exact, "total", exact), dtype=np.float64)
    return np.abs(a - e) / np.maximum(np.abs(e), eps)


# -- dense diagnostics ----------------------------------------------------------

def dense_jacobians(hyper: HyperVector, weights, state: SgdState, train_loss: LossCallable,
                    update=sgd_update):
    """Materialise ``du/dw`` (P x P) and ``du/dlambda`` (P x H) by one-hot VJPs."""
    internal, natural = hyper.leaves()
    lam = [internal[n] for n in hyper.names]
    w = [Tensor(a, requires_grad=True) for a in weights]
    g = grad(train_loss(w, natural), w, create_graph=True)
    u, _ = update(natural, w, [Tensor(b) for b in state.velocity], g)
    sizes = [a.size for a in u]
    n_w = sum(sizes)
    jw = np.zeros((n_w, n_w))
    jl = np.zeros((n_w, hyper.size()))
    row = 0
    for k, uk in enumerate(u):
        for idx in np.ndindex(uk.shape):
            seeds = [Tensor(np.zeros(x.shape)) for x in u]
            seeds[k].data[idx] = 1.0
            parts = vjp(u, seeds, w + lam)
            jw[row] = np.concatenate([t.data.ravel() for t in parts[:len(w)]])
            jl[row] = np.concatenate([t.data.ravel() for t in parts[len(w):]])
            row += 1
    return jw, jl


def dense_hypergradients(hyper: HyperVector, weights, state: SgdState, train_loss, val_loss,
                         lookback: int, update=sgd_update) -> tuple[np.ndarray, np.ndarray]:
    """Full-vector ``(series, solve)`` hypergradients from dense matrices.

    ``series`` sums ``lookback + 1`` Neumann terms explicitly; ``solve`` is the
    infinite-series limit ``-dLv/dw (du/dw)^-1 du/dlambda``.
    """
    internal, natural = hyper.leaves()
    lam = [internal[n] for n in hyper.names]
    w = [Tensor(a, requires_grad=True) for a in weights]
    parts = grad(val_loss(w, natural), w + lam)
    gv = np.concatenate([t.data.ravel() for t in parts[:len(w)]])
    direct = np.concatenate([t.data.ravel() for t in parts[len(w):]])
    jw, jl = dense_jacobians(hyper, weights, state, train_loss, update)
    m = np.eye(len(gv)) - jw
    acc, term = gv.copy(), gv.copy()
    for _ in range(lookback):
        term = term @ m
        acc = acc + term
    series = direct - acc @ jl
    solve = direct - np.linalg.solve(jw.T, gv) @ jl
    sel = hyper.mask_vector()
    return np.where(sel, series, 0.0), np.where(sel, solve, 0.0)
