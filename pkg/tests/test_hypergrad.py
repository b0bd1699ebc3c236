import math
import tracemalloc

import numpy as np
import pytest

from onepass_hpo.autodiff import Tensor
from onepass_hpo.hypergrad import (
    Hypergradient,
    baydin_hypergradient,
    baydin_to_internal,
    dense_hypergradients,
    exact_unrolled_hypergradient,
    hypergradient_error,
    lorraine_hypergradient,
    neumann_hypergradient,
    unroll,
)
from onepass_hpo.model import LossFn, MlpSpec, init_weights
from onepass_hpo.update import LN10, LR_BOUNDS, DivergedError, HyperParam, HyperVector, SgdState

TRANSFORMS = {"lr": "log10", "wd": "log10", "momentum": "inverse_sigmoid"}


def hyper(lr, wd, m=0.5, mask=("lr", "wd", "momentum")):
    return HyperVector.from_natural({"lr": lr, "wd": wd, "momentum": m}, TRANSFORMS, mask,
                                    bounds={"lr": LR_BOUNDS})


def quad(a, b):
    def f(ws, hp=None):
        w = ws[0]
        return 0.5 * (w @ (Tensor(a) @ w)) - Tensor(b) @ w
    return f


def half_sq(ws, hp=None):
    return 0.5 * (ws[0] * ws[0]).sum()


def spd(rng, n, lo=0.5, hi=2.0):
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return q @ np.diag(rng.uniform(lo, hi, size=n)) @ q.T


# -- scalar quadratic -----------------------------------------------------------------

@pytest.mark.parametrize("i", [0, 1, 5, 30])
def test_scalar_quadratic_matches_ift(i):
    # L_T = 1/2 (w-1)^2 with decay in the update, L_V = 1/2 w^2, eta=0.5, wd=1: w* = 0.5
    train = lambda ws, hp=None: 0.5 * ((ws[0] - 1.0) * (ws[0] - 1.0)).sum()
    h = hyper(0.5, 1.0, 0.5, mask=("wd",))
    hg = neumann_hypergradient(h, [np.array([0.5])], SgdState([np.zeros(1)]), train, half_sq, i)
    wd_natural = hg.component("wd")[0] / (LN10 * 1.0)
    assert wd_natural == pytest.approx(-0.125, abs=1e-14)
    # IFT: dL_V/dwd = w * dw*/dwd = 0.5 * (-1/(1+wd)^2) = -0.125
    assert hg.total[h.slices()["lr"]][0] == 0.0


def test_lorraine_reproduces_scalar_oracle():
    train = lambda ws, hp=None: 0.5 * ((ws[0] - 1.0) * (ws[0] - 1.0)).sum()
    h = hyper(0.5, 1.0, 0.5)
    hg = lorraine_hypergradient(h, [np.array([0.5])], SgdState([np.zeros(1)]), train, half_sq, 3)
    assert hg.component("wd")[0] / LN10 == pytest.approx(-0.125, abs=1e-14)
    assert hg.component("lr")[0] == 0.0 and hg.component("momentum")[0] == 0.0


def test_i_zero_is_direct_minus_one_jacobian_product():
    rng = np.random.default_rng(0)
    a, b = spd(rng, 4), rng.normal(size=4)
    w = rng.normal(size=4)
    buf = rng.normal(size=4)
    h = hyper(0.1, 0.01, 0.3)
    hg = neumann_hypergradient(h, [w], SgdState([buf]), quad(a, b), half_sq, 0)
    lr, wd, m = 0.1, 0.01, 0.3
    g = a @ w - b
    new_buf = m * buf + g + wd * w
    du_dlam = np.stack([LN10 * lr * new_buf, lr * w * LN10 * wd, lr * buf * m * (1 - m)], axis=1)
    expected = -w @ du_dlam
    np.testing.assert_allclose(hg.total, expected, rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(hg.direct, np.zeros(3))
    assert np.array_equal(hg.total, hg.direct + hg.indirect)


def test_random_quadratic_converges_to_solve():
    rng = np.random.default_rng(1)
    n, wd, lr = 10, 0.1, 0.5
    # eigenvalues of A + wd I span [1, 3], so I - lr (A + wd I) has spectral radius 0.5
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    ev = np.concatenate([[1.0, 3.0], rng.uniform(1.0, 3.0, size=n - 2)])
    a = q @ np.diag(ev - wd) @ q.T
    b = rng.normal(size=n)
    hess = a + wd * np.eye(n)
    w = np.linalg.solve(hess, b)
    val = lambda ws, hp=None: 0.5 * ((ws[0] - 1.0) * (ws[0] - 1.0)).sum()
    h = hyper(lr, wd, 0.5, mask=("wd",))
    oracle = -(w - 1.0) @ np.linalg.solve(hess, w) * LN10 * wd
    hg = neumann_hypergradient(h, [w], SgdState([np.zeros(n)]), quad(a, b), val, 25)
    assert hypergradient_error(hg.component("wd"), np.array([oracle]))[0] < 1e-3


def test_ift_recovery_with_loss_hyperparameter():
    # u = eta * grad L_T with the hyperparameter inside the training loss
    rng = np.random.default_rng(2)
    n = 6
    a = spd(rng, n)
    b = rng.normal(size=n)
    c = rng.normal(size=n)
    h = HyperVector([HyperParam("lr", math.log10(0.3), "log10", False),
                     HyperParam("reg", 0.4, "identity", True)])

    def train(ws, hp):
        w = ws[0]
        return 0.5 * (w @ (Tensor(a) @ w)) - Tensor(b) @ w + 0.5 * hp["reg"] * (w * w).sum()

    def val(ws, hp=None):
        r = ws[0] - Tensor(c)
        return 0.5 * (r * r).sum()

    def plain(hp, ws, bufs, gs):
        return [hp["lr"] * g for g in gs], list(bufs)

    hess = a + 0.4 * np.eye(n)
    w = np.linalg.solve(hess, b)
    hg = neumann_hypergradient(h, [w], SgdState([np.zeros(n)]), train, val, 400, update=plain)
    # IFT: -dLv/dw H^-1 d2L_T/dw dreg, with d2L_T/dw dreg = w; eta cancels
    ift = -(w - c) @ np.linalg.solve(hess, w)
    assert abs(hg.component("reg")[0] - ift) <= 1e-6 * abs(ift)


# -- exact unroll -----------------------------------------------------------------

def test_two_step_linear_unroll():
    # w <- w - eta * 2 (w - c), c = 1, eta = 0.25, two steps from 0; L_V = 1/2 w^2
    train = lambda ws, hp=None: ((ws[0] - 1.0) * (ws[0] - 1.0)).sum()
    h = hyper(0.25, 1e-30, 1e-12, mask=("lr",))
    hg, w_final, _ = unroll(h, [np.zeros(1)], SgdState([np.zeros(1)]), [train, train], half_sq)
    assert w_final[0][0] == pytest.approx(0.75, abs=1e-12)
    assert hg.component("lr")[0] / (LN10 * 0.25) == pytest.approx(1.5, abs=1e-9)


def test_exact_masks_unselected_entries():
    rng = np.random.default_rng(3)
    a, b = spd(rng, 3), rng.normal(size=3)
    h = hyper(0.1, 1e-2, 0.4, mask=("wd",))
    hg = exact_unrolled_hypergradient(h, [rng.normal(size=3)], SgdState([rng.normal(size=3)]),
                                      quad(a, b), half_sq, 4)
    assert hg.component("lr")[0] == 0.0 and hg.component("momentum")[0] == 0.0
    assert hg.component("wd")[0] != 0.0


def test_exact_argument_errors():
    h = hyper(0.1, 1e-2)
    with pytest.raises(ValueError):
        exact_unrolled_hypergradient(h, [np.ones(2)], SgdState([np.zeros(2)]), half_sq, half_sq, 0)
    with pytest.raises(ValueError):
        exact_unrolled_hypergradient(h, [np.ones(2)], SgdState([np.zeros(2)]), [half_sq], half_sq, 2)


def _tiny_state(seed):
    rng = np.random.default_rng(seed)
    spec = MlpSpec(3, (3,), 1, init_seed=seed)
    weights = [w + rng.normal(scale=0.1, size=w.shape) for w in init_weights(spec)]
    x = rng.normal(size=(30, 3))
    y = rng.normal(size=30)
    h = hyper(10 ** rng.uniform(-3, -1), 10 ** rng.uniform(-5, -2), rng.uniform(0.05, 0.95))
    state = SgdState([rng.normal(scale=0.1, size=w.shape) for w in weights])
    return h, weights, state, LossFn(spec, x[:20], y[:20]), LossFn(spec, x[20:], y[20:])


@pytest.mark.parametrize("seed", range(5))
def test_window_one_equals_neumann_i0(seed):
    h, w0, state, train, val = _tiny_state(seed)
    exact, w1, _ = unroll(h, w0, state, [train], val)
    neu = neumann_hypergradient(h, w1, state, train, val, 0, linearise_at=w0)
    assert np.max(np.abs(exact.total - neu.total)) < 1e-10


def test_unroll_without_validation_advances_weights():
    h, w0, state, train, _ = _tiny_state(7)
    hg, w1, s1 = unroll(h, w0, state, [train, train], None)
    assert hg is None
    assert not np.array_equal(w1[0], w0[0])
    assert len(s1.velocity) == len(w0)


# -- dense brute force --------------------------------------------------------------

@pytest.mark.parametrize("i", [0, 1, 5, 20])
def test_neumann_equals_dense_expression(i):
    h, w, state, train, val = _tiny_state(11)
    neu = neumann_hypergradient(h, w, state, train, val, i)
    series, _ = dense_hypergradients(h, w, state, train, val, i)
    assert np.max(np.abs(neu.total - series)) < 1e-8
    assert np.max(np.abs(series)) > 1e-6


def test_neumann_only_reads_current_state():
    h, w, state, train, val = _tiny_state(12)
    a = neumann_hypergradient(h, w, state, train, val, 5)
    b = neumann_hypergradient(h, [x.copy() for x in w], SgdState([v.copy() for v in state.velocity]),
                              train, val, 5)
    assert a.total.tobytes() == b.total.tobytes()


def test_lorraine_bitwise_matches_neumann_wd():
    h, w, state, train, val = _tiny_state(13)
    full = neumann_hypergradient(h, w, state, train, val, 5)
    lor = lorraine_hypergradient(h, w, state, train, val, 5)
    assert lor.component("wd").tobytes() == full.component("wd").tobytes()
    assert lor.component("lr")[0] == 0.0 and lor.component("momentum")[0] == 0.0


def test_hdlr_hypergradient_has_one_entry_per_parameter():
    h, w, state, train, val = _tiny_state(14)
    n = sum(x.size for x in w)
    lr = h.natural("lr")
    hd = HyperVector([HyperParam("lr", np.full(n, math.log10(lr)), "log10", True, LR_BOUNDS),
                      h["wd"], h["momentum"]])
    hg = neumann_hypergradient(hd, w, state, train, val, 3)
    scalar = neumann_hypergradient(h, w, state, train, val, 3)
    assert hg.component("lr").shape == (n,)
    # a shared rate is the sum of per-parameter sensitivities
    assert hg.component("lr").sum() == pytest.approx(scalar.component("lr")[0], rel=1e-10)
    assert hg.component("wd")[0] == pytest.approx(scalar.component("wd")[0], rel=1e-10)


# -- failure modes -----------------------------------------------------------------

def test_nan_weights_diverge():
    h, w, state, train, val = _tiny_state(15)
    w[0][0, 0] = np.nan
    with pytest.raises(DivergedError):
        neumann_hypergradient(h, w, state, train, val, 2)


def test_overflowing_series_diverges():
    h = hyper(1.0, 1e-3, 0.5, mask=("wd",))
    a = np.diag([50.0, 60.0])
    with np.errstate(all="ignore"), pytest.raises(DivergedError):
        neumann_hypergradient(h, [np.ones(2)], SgdState([np.zeros(2)]), quad(a, np.zeros(2)), half_sq, 500)


def test_negative_lookback_rejected():
    h, w, state, train, val = _tiny_state(16)
    with pytest.raises(ValueError):
        neumann_hypergradient(h, w, state, train, val, -1)


# -- Baydin ---------------------------------------------------------------------------

def test_baydin_examples():
    assert baydin_hypergradient([np.array([1.0, 2.0])], [np.array([3.0, 4.0])]) == -11.0
    assert baydin_hypergradient([np.array([1.0, 2.0])], [np.zeros(2)]) == 0.0
    assert baydin_hypergradient([np.array([1.0])], None) == 0.0
    assert baydin_to_internal(2.0, 0.01) == pytest.approx(2.0 * LN10 * 0.01)


def test_baydin_matches_one_step_exact_unroll():
    # L = 1/2 w^2, two plain SGD steps from w0 = 1
    eta = 0.3
    h = hyper(eta, 1e-30, 1e-12, mask=("lr",))
    w0 = np.array([1.0])
    w1 = w0 - eta * w0
    w2 = w1 - eta * w1
    hb = baydin_to_internal(baydin_hypergradient([w2], [w1]), eta)
    exact = exact_unrolled_hypergradient(h, [w1], SgdState([np.zeros(1)]), half_sq, half_sq, 1)
    assert hb == pytest.approx(exact.component("lr")[0], rel=1e-9)


# -- error metric and memory -----------------------------------------------------------

def test_hypergradient_error_examples():
    np.testing.assert_array_equal(hypergradient_error(np.array([1.0, -2.0]), np.array([1.0, -2.0])), [0, 0])
    np.testing.assert_array_equal(hypergradient_error(np.array([2.0]), np.array([1.0])), [1.0])
    assert hypergradient_error(np.array([1e-12]), np.array([0.0]))[0] == pytest.approx(1.0)
    assert np.isnan(hypergradient_error(np.array([np.nan]), np.array([1.0]))[0])
    hg = Hypergradient(np.array([1.0]), np.array([1.0]))
    assert hypergradient_error(hg, np.array([2.0]))[0] == 0.0


def test_memory_does_not_grow_with_lookback():
    rng = np.random.default_rng(5)
    n = 200_000
    diag = rng.uniform(0.5, 1.5, size=n)
    train = lambda ws, hp=None: 0.5 * (Tensor(diag) * ws[0] * ws[0]).sum()
    h = hyper(0.5, 1e-3, 0.5)
    w = [rng.normal(size=n)]
    state = SgdState([np.zeros(n)])

    def peak(i):
        tracemalloc.start()
        neumann_hypergradient(h, w, state, train, half_sq, i)
        _, top = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        return top

    small, large = peak(2), peak(40)
    # both dominated by the recorded update; the loop keeps only a fixed set of accumulators
    assert large <= small + 2 * n * 8
