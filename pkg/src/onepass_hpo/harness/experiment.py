"""Multi-trial experiments, the (T, i) sensitivity grid and the hypergradient accuracy check."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..autodiff import Tensor, grad
from ..hypergrad import (
    dense_hypergradients,
    exact_unrolled_hypergradient,
    hypergradient_error,
    neumann_hypergradient,
)
from ..model import LossFn, MlpSpec, init_weights
from ..update import DivergedError, SgdState, weights_step
from .config import MASKS, ConfigError, ExperimentConfig
from .stats import batch_best_of_k, outcome_values
from .trial import RunRecord, prepare, run_trial, sample_init, trial_seeds

DENSE_PARAM_LIMIT = 20
JOBS_ENV = "HYPERGRAD_JOBS"


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def _run_task(args) -> RunRecord:
    config, setting, trial_id = args
    return run_trial(config, trial_id, setting)


def map_trials(tasks: Sequence[tuple], jobs: int = 1,
               progress: Callable[[int, int], None] | None = None) -> list[RunRecord]:
    """Run ``(config, setting, trial_id)`` tasks, preserving order whatever ``jobs`` is."""
    out: list[RunRecord] = []
    if jobs <= 1 or len(tasks) <= 1:
        for k, t in enumerate(tasks):
            out.append(_run_task(t))
            if progress:
                progress(k + 1, len(tasks))
        return out
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for k, rec in enumerate(pool.map(_run_task, tasks)):
            out.append(rec)
            if progress:
                progress(k + 1, len(tasks))
    return out


def run_experiment(config: ExperimentConfig, jobs: int | None = None,
                   progress: Callable[[int, int], None] | None = None) -> dict[str, list[RunRecord]]:
    """Run ``n_trials`` trials of every configured setting.

    Trial ``k`` shares its initial hyperparameters, model initialisation and
    split across settings.  ``random_3batched`` draws ``3 * n_trials`` random
    runs (ids ``0 .. 3n-1``) and keeps the best of each consecutive three.
    """
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    prepare(config)  # fail early on a missing dataset
    n = config.n_trials
    tasks, keys = [], {}
    for setting in config.settings:
        run_as = "random" if setting == "random_3batched" else setting
        ids = range(3 * n) if setting == "random_3batched" else range(n)
        for t in ids:
            if (run_as, t) not in keys:
                keys[(run_as, t)] = len(tasks)
                tasks.append((config, run_as, t))
    records = map_trials(tasks, jobs, progress)
    out: dict[str, list[RunRecord]] = {}
    for setting in config.settings:
        if setting == "random_3batched":
            pool = [records[keys[("random", t)]] for t in range(3 * n)]
            best = batch_best_of_k(pool, 3)
            out[setting] = [RunRecord.from_dict({**r.to_dict(), "setting": setting}) for r in best]
        else:
            out[setting] = [records[keys[(setting, t)]] for t in range(n)]
    return out


@dataclass
class GridResult:
    T_values: list[int]
    i_values: list[int]
    medians: np.ndarray  # (len(T_values), len(i_values))
    random_medians: np.ndarray  # one per T: Random trained for the same number of steps
    records: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "T_values": list(self.T_values),
            "i_values": list(self.i_values),
            "medians": [[_finite_or_none(v) for v in row] for row in self.medians],
            "random_medians": [_finite_or_none(v) for v in self.random_medians],
        }


def _finite_or_none(v):
    return float(v) if np.isfinite(v) else None


def _nan_median(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    x = x[np.isfinite(x)]
    return float(np.median(x)) if x.size else math.nan


def sensitivity_grid(config: ExperimentConfig, T_values: Sequence[int] | None = None,
                     i_values: Sequence[int] | None = None, jobs: int | None = None,
                     progress: Callable[[int, int], None] | None = None) -> GridResult:
    """Median final test loss for every (T, i) after ``n_hyper_updates`` updates.

    Each cell runs ``n_trials`` trials of ``grid_setting`` with
    ``n_hyper_updates * T`` weight steps; a Random baseline of the same length
    is run per ``T`` for comparison.
    """
    T_values = list(config.T_values if T_values is None else T_values)
    i_values = list(config.i_values if i_values is None else i_values)
    if not T_values or not i_values:
        raise ConfigError("T_values and i_values must be non-empty")
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    tasks, where = [], []
    for a, T in enumerate(T_values):
        steps = config.n_hyper_updates * T
        base = config.replace(T=T, total_steps=steps)
        for t in range(config.n_trials):
            tasks.append((base, "random", t))
            where.append(("random", a, None))
        for b, i in enumerate(i_values):
            cell = base.replace(i=i)
            for t in range(config.n_trials):
                tasks.append((cell, config.grid_setting, t))
                where.append(("cell", a, b))
    records = map_trials(tasks, jobs, progress)
    groups: dict = {}
    for rec, key in zip(records, where):
        groups.setdefault(key, []).append(rec)
    medians = np.full((len(T_values), len(i_values)), math.nan)
    random_medians = np.full(len(T_values), math.nan)
    for (kind, a, b), recs in groups.items():
        m = _nan_median(outcome_values(recs))
        if kind == "random":
            random_medians[a] = m
        else:
            medians[a, b] = m
    named = {f"{k[0]}_T{T_values[k[1]]}" + ("" if k[2] is None else f"_i{i_values[k[2]]}"): v
             for k, v in groups.items()}
    return GridResult(T_values, i_values, medians, random_medians, named)


# -- hypergradient accuracy ------------------------------------------------------

@dataclass
class CheckRow:
    trial_id: int
    name: str
    neumann_vs_series: float
    neumann_vs_solve: float
    neumann_vs_exact: float
    exact_vs_solve: float


@dataclass
class CheckReport:
    rows: list[CheckRow]
    diverged: list[int]
    n_params: int

    def worst(self, column: str) -> float:
        vals = [getattr(r, column) for r in self.rows]
        return max(vals) if vals else math.nan

    def format(self) -> str:
        head = ("trial", "hyper", "vs series", "vs solve", "vs exact", "exact vs solve")
        lines = ["relative error of the Neumann hypergradient", "  ".join(f"{h:>14}" for h in head)]
        for r in self.rows:
            lines.append("  ".join([f"{r.trial_id:>14d}", f"{r.name:>14}"]
                                   + [f"{v:>14.3e}" for v in (r.neumann_vs_series, r.neumann_vs_solve,
                                                              r.neumann_vs_exact, r.exact_vs_solve)]))
        if self.diverged:
            lines.append(f"diverged trials: {self.diverged}")
        return "\n".join(lines)


def _rel(a, b, sl) -> float:
    return float(np.max(hypergradient_error(a[sl], b[sl]))) if sl.stop > sl.start else 0.0


def hypergrad_check(config: ExperimentConfig, window: int | None = None) -> CheckReport:
    """Compare Neumann, dense-series, dense-solve and exact-unrolled hypergradients.

    Each trial takes ``T`` plain full-batch steps from its initialisation and
    evaluates all four at that state (the first hyperparameter update).  The
    exact unroll covers ``window`` steps (default ``i + 1``, the number of
    Neumann terms).  Errors are relative, maximised within each hyperparameter.
    """
    prepared = prepare(config)
    ds = prepared.dataset
    kind = config.loss_kind
    setting = config.settings[0]
    mask = MASKS["random" if setting == "random_3batched" else setting] or ("lr", "wd", "momentum")
    window = window or config.window or (config.i + 1)
    train_fn = LossFn(None, *prepared.xy(prepared.train_idx), kind)
    val_fn = LossFn(None, *prepared.xy(prepared.val_idx), kind)
    rows, diverged, n_params = [], [], 0
    for trial_id in range(config.n_trials):
        seeds = trial_seeds(config.master_seed, trial_id)
        out_dim = int(ds.y.max()) + 1 if kind == "cross_entropy" else 1
        spec = MlpSpec(ds.n_features, tuple(config.hidden_dims), out_dim, init_seed=seeds.model % (2**63))
        n_params = spec.n_params
        if n_params > DENSE_PARAM_LIMIT:
            raise ConfigError(f"dense oracle needs a model with <= {DENSE_PARAM_LIMIT} parameters, "
                              f"got {n_params}")
        train_fn.spec = val_fn.spec = spec
        weights = init_weights(spec)
        state = SgdState.zeros_like(weights)
        hyper = sample_init(config, seeds.init, mask=mask,
                            n_params=n_params if setting == "ours_wd_hdlr_m" else None)
        try:
            with np.errstate(all="ignore"):
                nat = hyper.naturals()
                for _ in range(config.T):
                    wl = [Tensor(w, requires_grad=True) for w in weights]
                    g = [t.data for t in grad(train_fn(wl), wl)]
                    weights, state = weights_step(nat, weights, state, g)
                neu = neumann_hypergradient(hyper, weights, state, train_fn, val_fn, config.i).total
                series, solve = dense_hypergradients(hyper, weights, state, train_fn, val_fn, config.i)
                exact = exact_unrolled_hypergradient(hyper, weights, state, train_fn, val_fn, window).total
            if not all(np.all(np.isfinite(v)) for v in (neu, series, solve, exact)):
                raise DivergedError("non-finite hypergradient")
        except (DivergedError, np.linalg.LinAlgError):
            diverged.append(trial_id)
            continue
        for name, sl in hyper.slices().items():
            if name not in hyper.mask:
                continue
            rows.append(CheckRow(trial_id, name, _rel(neu, series, sl), _rel(neu, solve, sl),
                                 _rel(neu, exact, sl), _rel(exact, solve, sl)))
    return CheckReport(rows, diverged, n_params)


def dense_oracle_check(seed: int = 0, lookbacks: Sequence[int] = (0, 1, 5, 20),
                       n_rows: int = 64) -> dict[int, float]:
    """Max abs gap between the VJP Neumann hypergradient and its dense-matrix form.

    Uses a 3-3-1 ReLU MLP (16 parameters) on seeded synthetic regression data,
    with learning rate, weight decay and momentum all optimisable.
    """
    from ..update import HyperVector, LR_BOUNDS

    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_rows, 3))
    y = np.sin(x @ np.array([0.8, -0.5, 0.3])) + 0.1 * rng.normal(size=n_rows)
    spec = MlpSpec(3, (3,), 1, init_seed=seed)
    weights = init_weights(spec)
    train_fn = LossFn(spec, x[:40], y[:40])
    val_fn = LossFn(spec, x[40:], y[40:])
    hyper = HyperVector.from_natural(
        {"lr": 0.1, "wd": 1e-3, "momentum": 0.5},
        {"lr": "log10", "wd": "log10", "momentum": "inverse_sigmoid"},
        bounds={"lr": LR_BOUNDS})
    state = SgdState([rng.normal(scale=0.1, size=w.shape) for w in weights])
    out = {}
    for i in lookbacks:
        neu = neumann_hypergradient(hyper, weights, state, train_fn, val_fn, i).total
        series, _ = dense_hypergradients(hyper, weights, state, train_fn, val_fn, i)
        out[int(i)] = float(np.max(np.abs(neu - series)))
    return out
