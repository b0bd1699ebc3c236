"""Single-trial execution: T weight updates, then one hyperparameter update, repeated."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from ..autodiff import Tensor, grad
from ..data import Dataset, batches, load_dataset, split, standardise
from ..hypergrad import (
    Hypergradient,
    baydin_hypergradient,
    baydin_to_internal,
    lorraine_hypergradient,
    neumann_hypergradient,
    unroll,
)
from ..model import LossFn, MlpSpec, init_weights
from ..update import (
    LR_BOUNDS,
    DivergedError,
    HyperParam,
    HyperVector,
    MetaOptimiser,
    SgdState,
    check_finite,
    clip_lr,
    meta_step,
    sgd_update,
    to_internal,
)
from .config import MASKS, RANDOM_SETTINGS, ExperimentConfig

@dataclass
class TrialSeeds:
    init: int
    model: int
    batches: int


def trial_seeds(master_seed: int, trial_id: int) -> TrialSeeds:
    """Counter-based derivation: trial k is reproducible on its own."""
    state = np.random.SeedSequence([int(master_seed), int(trial_id)]).generate_state(3, dtype=np.uint64)
    return TrialSeeds(*(int(s) for s in state))


def sample_init(config: ExperimentConfig, seed: int, *, with_multiplier: bool = False,
                mask=(), n_params: int | None = None) -> HyperVector:
    """Draw initial hyperparameters.

    log10 lr and log10 wd are uniform over their ranges; momentum is uniform in
    natural space.  The ``lr_mult`` draw is always taken (keeping the other
    draws identical across settings) but only included on request.  With
    ``n_params`` the learning rate is replicated per model parameter.
    """
    rng = np.random.default_rng(seed)
    log_lr = rng.uniform(*config.lr_range)
    log_wd = rng.uniform(*config.wd_range)
    mom = rng.uniform(*config.momentum_range)
    mult = rng.uniform(*config.lr_mult_range)
    mom = float(np.clip(mom, 1e-12, 1 - 1e-12))
    lr_bounds = LR_BOUNDS if config.clip_lr else None
    lr_value = np.full(n_params, log_lr) if n_params else np.array(log_lr)
    entries = [
        HyperParam("lr", lr_value, "log10", "lr" in mask, lr_bounds),
        HyperParam("wd", np.array(log_wd), "log10", "wd" in mask),
        HyperParam("momentum", to_internal("inverse_sigmoid", mom), "inverse_sigmoid", "momentum" in mask),
    ]
    if with_multiplier:
        entries.append(HyperParam("lr_mult", np.array(mult), "identity", False))
    return clip_lr(HyperVector(entries))


@dataclass
class RunRecord:
    trial_id: int
    seed: int
    setting: str
    initial: dict
    snapshots: list[dict] = field(default_factory=list)
    final_train_loss: float = math.nan
    final_val_loss: float = math.nan
    final_test_loss: float = math.nan
    final_test_loss_denorm: float = math.nan
    wall_time_s: float = 0.0
    status: str = "ok"
    n_weight_steps: int = 0
    n_hyper_updates: int = 0
    outlier: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


@dataclass
class Prepared:
    dataset: Dataset
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    def xy(self, idx):
        return self.dataset.X[idx], self.dataset.y[idx]


@lru_cache(maxsize=8)
def _prepare_cached(dataset: str, task: str, target_column, fractions, split_seed) -> Prepared:
    raw = load_dataset(dataset, task=task, target_column=target_column)
    sp = split(raw, fractions, split_seed)
    ds = standardise(raw, sp)
    return Prepared(ds, sp.train_idx, sp.val_idx, sp.test_idx)


def prepare(config: ExperimentConfig) -> Prepared:
    return _prepare_cached(config.dataset, config.task, config.target_column,
                           tuple(config.split_fractions), config.effective_split_seed)


def _summary_value(hyper: HyperVector, name: str) -> float:
    v = hyper.natural(name)
    return float(np.median(v)) if v.size > 1 else float(v)


def run_trial(config: ExperimentConfig, trial_id: int, setting: str | None = None,
              prepared: Prepared | None = None) -> RunRecord:
    setting = setting or config.settings[0]
    if setting == "random_3batched":
        setting_run = "random"
    else:
        setting_run = setting
    prepared = prepared or prepare(config)
    seeds = trial_seeds(config.master_seed, trial_id)
    ds = prepared.dataset
    kind = config.loss_kind
    out_dim = int(ds.y.max()) + 1 if kind == "cross_entropy" else 1
    spec = MlpSpec(ds.n_features, tuple(config.hidden_dims), out_dim, init_seed=seeds.model % (2**63))
    weights = init_weights(spec)
    state = SgdState.zeros_like(weights)

    mask = MASKS[setting_run]
    hyper = sample_init(config, seeds.init, with_multiplier=setting_run == "random_xlr", mask=mask,
                        n_params=spec.n_params if setting_run == "ours_wd_hdlr_m" else None)
    record = RunRecord(trial_id, seeds.init, setting,
                       {n: _summary_value(hyper, n) for n in hyper.names})

    merged = setting_run in RANDOM_SETTINGS
    train_idx = np.concatenate([prepared.train_idx, prepared.val_idx]) if merged else prepared.train_idx
    n_base = len(prepared.train_idx)
    full_batch = config.batch_size == 0 or config.batch_size >= len(train_idx)
    bs = n_base if config.batch_size == 0 else config.batch_size
    steps_per_epoch = math.ceil(n_base / bs)
    total = config.total_steps if config.total_steps is not None else config.epochs * steps_per_epoch

    eval_train = LossFn(spec, *prepared.xy(prepared.train_idx), kind)
    eval_val = LossFn(spec, *prepared.xy(prepared.val_idx), kind)
    eval_test = LossFn(spec, *prepared.xy(prepared.test_idx), kind)

    def train_batches():
        if full_batch:
            fn = LossFn(spec, *prepared.xy(train_idx), kind)
            while True:
                yield fn
        epoch = 0
        while True:
            for idx in batches(train_idx, bs, seeds.batches, epoch):
                yield LossFn(spec, *prepared.xy(idx), kind)
            epoch += 1

    def val_batches():
        if full_batch:
            while True:
                yield eval_val
        epoch = 0
        while True:
            for idx in batches(prepared.val_idx, bs, seeds.batches ^ 0x5A5A, epoch):
                yield LossFn(spec, *prepared.xy(idx), kind)
            epoch += 1

    train_stream = train_batches()
    val_stream = val_batches()
    opt = MetaOptimiser(config.kappa, config.beta1, config.beta2, config.meta_eps)
    hpo = len(mask) > 0
    T = config.T
    window = config.effective_window if setting_run == "diff_through_opt" else 0
    log_mult = math.log10(float(hyper.natural("lr_mult"))) if setting_run == "random_xlr" else 0.0

    def snapshot(step):
        record.snapshots.append({
            "step": step,
            "train_loss": eval_train.value(weights),
            "val_loss": eval_val.value(weights),
            "test_loss": eval_test.value(weights),
            "lr": _summary_value(hyper, "lr"),
            "wd": _summary_value(hyper, "wd"),
            "momentum": _summary_value(hyper, "momentum"),
        })

    snapshot(0)
    elapsed = 0.0
    step = 0
    last_fn = None
    last_grad = None
    try:
        with np.errstate(all="ignore"):
            while step < total:
                t0 = time.perf_counter()
                block = min(T, total - step)
                at_boundary = block == T
                n_plain = block - window if (at_boundary and window) else block
                nat = hyper.naturals()
                for _ in range(n_plain):
                    fn = next(train_stream)
                    wl = [Tensor(w, requires_grad=True) for w in weights]
                    lt = fn(wl)
                    if not np.isfinite(lt.data):
                        raise DivergedError("non-finite training loss")
                    g = [t.data for t in grad(lt, wl)]
                    check_finite(g, "gradient")
                    u, vel = sgd_update(nat, weights, state.velocity, g)
                    weights = [w - du for w, du in zip(weights, u)]
                    state = SgdState(vel)
                    last_fn, last_grad = fn, g
                    step += 1
                    if log_mult:
                        e = hyper["lr"]
                        e.value = e.value + log_mult
                        hyper = clip_lr(hyper)
                        nat = hyper.naturals()
                hg = None
                if at_boundary and window:
                    fns = [next(train_stream) for _ in range(window)]
                    hg, weights, state = unroll(hyper, weights, state, fns, next(val_stream))
                    last_fn = fns[-1]
                    step += window
                elif at_boundary and hpo:
                    val_fn = next(val_stream)
                    if setting_run == "baydin":
                        hg = _baydin(hyper, weights, val_fn, last_grad)
                    elif setting_run == "lorraine":
                        hg = lorraine_hypergradient(hyper, weights, state, last_fn, val_fn, config.i)
                    else:
                        hg = neumann_hypergradient(hyper, weights, state, last_fn, val_fn, config.i)
                check_finite(weights, "weights")
                if hg is not None:
                    hyper = meta_step(opt, hyper, hg)
                    record.n_hyper_updates += 1
                elapsed += time.perf_counter() - t0
                if at_boundary:
                    snapshot(step)
                    if not all(np.isfinite([record.snapshots[-1][k] for k in ("train_loss", "val_loss", "test_loss")])):
                        raise DivergedError("non-finite evaluation loss")
    except DivergedError:
        record.status = "diverged_nan"
    record.n_weight_steps = step
    record.wall_time_s = elapsed
    if record.status == "ok":
        with np.errstate(all="ignore"):
            record.final_train_loss = eval_train.value(weights)
            record.final_val_loss = eval_val.value(weights)
            record.final_test_loss = eval_test.value(weights)
        if not all(np.isfinite([record.final_train_loss, record.final_val_loss, record.final_test_loss])):
            record.status = "diverged_nan"
            record.final_train_loss = record.final_val_loss = record.final_test_loss = math.nan
    if record.status == "ok":
        if kind == "mse" and ds.stats is not None:
            record.final_test_loss_denorm = record.final_test_loss * ds.stats.y_std ** 2
        else:
            record.final_test_loss_denorm = record.final_test_loss
        record.outlier = kind == "cross_entropy" and record.final_test_loss > config.outlier_threshold
    return record


def _baydin(hyper: HyperVector, weights, val_fn, last_grad) -> Hypergradient:
    wl = [Tensor(w, requires_grad=True) for w in weights]
    gv = [t.data for t in grad(val_fn(wl), wl)]
    h_nat = baydin_hypergradient(gv, last_grad)
    h = baydin_to_internal(h_nat, hyper.natural("lr"))
    total = np.zeros(hyper.size())
    total[hyper.slices()["lr"]] = h
    return Hypergradient(np.zeros_like(total), total, tuple(hyper.names), hyper.slices())
