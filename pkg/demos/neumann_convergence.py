"""Watch the truncated Neumann hypergradient converge to the implicit solution.

A 2-parameter linear regression is trained to near stationarity with SGD. We
then compare the look-back-i approximation against the dense linear solve for
growing i.

    python3 demos/neumann_convergence.py
"""

import numpy as np

from onepass_hpo.autodiff import Tensor, grad
from onepass_hpo.hypergrad import dense_hypergradients, neumann_hypergradient
from onepass_hpo.update import HyperVector, SgdState, weights_step

rng = np.random.default_rng(0)
x = rng.normal(size=(200, 2))
y = x @ np.array([2.0, -1.0]) + 0.1 * rng.normal(size=200)
xt, xv, yt, yv = Tensor(x[:150]), Tensor(x[150:]), y[:150], y[150:]


def mse(xs, ys):
    def f(ws, hp=None):
        r = xs @ ws[0] - Tensor(ys)
        return (r * r).mean()
    return f


train, val = mse(xt, yt), mse(xv, yv)
hyper = HyperVector.from_natural({"lr": 0.1, "wd": 1e-2, "momentum": 0.5},
                                 {"lr": "log10", "wd": "log10", "momentum": "inverse_sigmoid"})
w, state = [np.zeros(2)], SgdState.zeros_like([np.zeros(2)])
for _ in range(300):
    wt = [Tensor(w[0], requires_grad=True)]
    g = [gi.data for gi in grad(train(wt), wt)]
    w, state = weights_step(hyper.naturals(), w, state, g)

# near stationarity the step and buffer vanish, so only weight decay carries signal
_, solve = dense_hypergradients(hyper, w, state, train, val, 0)
print(f"dense solve  : {np.array2string(solve, precision=6)}")
for i in (0, 1, 5, 20, 100):
    hg = neumann_hypergradient(hyper, w, state, train, val, i).total
    err = np.linalg.norm(hg - solve) / np.linalg.norm(solve)
    print(f"look-back {i:3d}: {np.array2string(hg, precision=6)}  rel. error {err:.1e}")
