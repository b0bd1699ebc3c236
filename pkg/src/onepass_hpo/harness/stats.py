"""NaN-aware summary statistics over trial outcomes."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


def _val_key(record) -> float:
    v = record.final_val_loss if hasattr(record, "final_val_loss") else record["final_val_loss"]
    return math.inf if v is None or not np.isfinite(v) else float(v)


def batch_best_of_k(records: Sequence, k: int = 3) -> list:
    """From each consecutive group of ``k`` keep the lowest final validation loss.

    Non-finite losses rank last; a trailing partial group is its own group and
    ties go to the earliest record.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    out = []
    for start in range(0, len(records), k):
        group = list(records[start:start + k])
        out.append(min(group, key=_val_key))
    return out


def bootstrap_stats(values, n_boot: int = 1000, seed: int = 0) -> dict:
    """Mean and median with bootstrap standard errors, best value and NaN count.

    Non-finite values are dropped before resampling.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    finite = x[np.isfinite(x)]
    nan_count = int(x.size - finite.size)
    if finite.size == 0:
        return {"mean": math.nan, "mean_se": math.nan, "median": math.nan, "median_se": math.nan,
                "best": math.nan, "nan_count": nan_count, "n": int(x.size)}
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, finite.size, size=(n_boot, finite.size))
    samples = finite[idx]
    return {
        "mean": float(finite.mean()),
        "mean_se": float(samples.mean(axis=1).std()),
        "median": float(np.median(finite)),
        "median_se": float(np.median(samples, axis=1).std()),
        "best": float(finite.min()),
        "nan_count": nan_count,
        "n": int(x.size),
    }


def outcome_values(records: Sequence, metric: str = "final_test_loss") -> np.ndarray:
    """Per-record metric with flagged outliers and diverged runs mapped to NaN."""
    out = np.empty(len(records))
    for k, r in enumerate(records):
        d = r if isinstance(r, dict) else r.to_dict()
        bad = d.get("status") != "ok" or d.get("outlier", False)
        out[k] = math.nan if bad else d[metric]
    return out


def empirical_cdf(values) -> tuple[np.ndarray, np.ndarray]:
    """Sorted finite values and cumulative fractions over the *total* count.

    Diverged runs still count in the denominator, so the curve plateaus below 1.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    finite = np.sort(x[np.isfinite(x)])
    if x.size == 0:
        return finite, np.zeros(0)
    return finite, np.arange(1, finite.size + 1) / x.size
