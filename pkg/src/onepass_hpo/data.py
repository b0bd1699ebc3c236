"""CSV/IDX ingestion, train-statistics standardisation, seeded splits and batching."""

from __future__ import annotations

import csv
import gzip
import itertools
import os
import re
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

UCI_FRACTIONS = (0.72, 0.18, 0.10)
DEFAULT_FRACTIONS = (0.6, 0.2, 0.2)
ENERGY_ENV = "ONEPASS_ENERGY_CSV"


class DataError(ValueError):
    pass


@dataclass
class NormStats:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list[str] = field(default_factory=list)
    target_name: str = "target"
    task: str = "regression"
    stats: NormStats | None = None
    source: str = ""

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise DataError(f"X must be 2-D, got shape {self.X.shape}")
        self.y = np.asarray(self.y, dtype=np.intp if self.task == "classification" else np.float64)
        if len(self.X) != len(self.y):
            raise DataError(f"X has {len(self.X)} rows but y has {len(self.y)}")
        if not self.feature_names:
            self.feature_names = [f"x{k}" for k in range(self.X.shape[1])]

    def __len__(self):
        return len(self.X)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def denormalise_targets(self, y_std_space) -> np.ndarray:
        if self.stats is None:
            return np.asarray(y_std_space)
        return np.asarray(y_std_space) * self.stats.y_std + self.stats.y_mean


@dataclass(frozen=True)
class Split:
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    seed: int = 0

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train_idx), len(self.val_idx), len(self.test_idx)


# -- ingestion ------------------------------------------------------------------

def _is_number(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def _read_rows(path: Path, delimiter: str | None) -> list[list[str]]:
    text = path.read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty file")
    if delimiter is None:
        delimiter = "," if "," in lines[0] else None
    if delimiter is None:
        return [ln.split() for ln in lines]
    return [[c.strip() for c in row] for row in csv.reader(lines, delimiter=delimiter)]


def load_csv(path, target_column: int | str = -1, *, delimiter: str | None = None,
             usecols: Sequence[int] | None = None, task: str = "regression") -> Dataset:
    """Read a numeric table; the header row is detected when the first row is non-numeric.

    ``delimiter=None`` picks comma when the first line contains one, otherwise
    whitespace.  Row order is preserved.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    rows = _read_rows(path, delimiter)
    header = None
    if not all(_is_number(c) for c in rows[0]):
        header, rows = rows[0], rows[1:]
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(rows[0])
    cols = list(range(width)) if usecols is None else list(usecols)
    names = [header[c] for c in cols] if header else [f"col{c}" for c in cols]

    values = np.empty((len(rows), len(cols)))
    first_data_line = 2 if header else 1
    for r, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: row {r + first_data_line} has {len(row)} cells, expected {width}")
        for j, c in enumerate(cols):
            try:
                v = float(row[c])
            except ValueError:
                raise DataError(f"{path}: cannot parse {row[c]!r} at row {r + first_data_line}, "
                                f"column {c + 1}") from None
            if not np.isfinite(v):
                raise DataError(f"{path}: non-finite value at row {r + first_data_line}, column {c + 1}")
            values[r, j] = v

    if isinstance(target_column, str):
        if target_column not in names:
            raise DataError(f"{path}: no column named {target_column!r}")
        t = names.index(target_column)
    else:
        t = target_column % len(cols)
    feats = [j for j in range(len(cols)) if j != t]
    y = values[:, t]
    if task == "classification":
        if np.any(y != np.round(y)):
            raise DataError(f"{path}: classification targets must be integers")
        y = y.astype(np.intp)
    return Dataset(values[:, feats], y, [names[j] for j in feats], names[t], task, source=str(path))


def read_idx(path) -> np.ndarray:
    """Read an IDX array (e.g. Fashion-MNIST images 0x00000803 or labels 0x00000801)."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DataError(f"{path}: not an IDX file")
    dtypes = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
    code, ndim = raw[2], raw[3]
    if code not in dtypes:
        raise DataError(f"{path}: unknown IDX type code {code:#x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=dtypes[code], offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise DataError(f"{path}: payload has {data.size} items, header says {dims}")
    return data.reshape(dims)


def load_idx_pair(images, labels) -> Dataset:
    x = read_idx(images)
    y = read_idx(labels)
    return Dataset(x.reshape(len(x), -1).astype(np.float64) / 255.0, y.astype(np.intp),
                   task="classification", source=str(images))


# -- UCI Energy -------------------------------------------------------------------

# (relative compactness, surface area, wall area, roof area, overall height)
_ENB2012_SHAPES = [
    (0.98, 514.5, 294.0, 110.25, 7.0), (0.90, 563.5, 318.5, 122.50, 7.0),
    (0.86, 588.0, 294.0, 147.00, 7.0), (0.82, 612.5, 318.5, 147.00, 7.0),
    (0.79, 637.0, 343.0, 147.00, 7.0), (0.76, 661.5, 416.5, 122.50, 7.0),
    (0.74, 686.0, 245.0, 220.50, 3.5), (0.71, 710.5, 269.5, 220.50, 3.5),
    (0.69, 735.0, 294.0, 220.50, 3.5), (0.66, 759.5, 318.5, 220.50, 3.5),
    (0.64, 784.0, 343.0, 220.50, 3.5), (0.62, 808.5, 367.5, 220.50, 3.5),
]
ENERGY_FEATURES = ["relative_compactness", "surface_area", "wall_area", "roof_area",
                   "overall_height", "orientation", "glazing_area", "glazing_distribution"]


def energy_surrogate(seed: int = 0) -> Dataset:
    """768-row stand-in for UCI Energy Efficiency (heating load target).

    Features follow the full-factorial ENB2012 building design (12 shapes x 4
    orientations x 16 glazing configurations); the target is a smooth nonlinear
    function of them with small Gaussian noise, spanning roughly the same
    range as the real heating loads.
    """
    rng = np.random.default_rng(seed)
    glazing = [(0.0, 0)] + [(ga, gd) for ga in (0.10, 0.25, 0.40) for gd in range(1, 6)]
    rows = [(*shape, orient, ga, gd)
            for (ga, gd), shape, orient in itertools.product(glazing, _ENB2012_SHAPES, range(2, 6))]
    x = np.array(rows, dtype=np.float64)
    rc, sa, wa, ra, oh, orient, ga, gd = x.T
    tall = (oh == 7.0).astype(float)
    y = (6.0 + 0.055 * wa * (oh / 7.0)
         + 22.0 * ga * (0.6 + 0.4 * tall)
         + 18.0 * tall * (1.0 - rc)
         + 0.004 * (sa - 514.5) * (1.0 - tall)
         + 0.6 * np.sin(gd) * ga * 4.0
         + 0.15 * np.cos(np.pi * orient / 2.0)
         + rng.normal(scale=0.35, size=len(x)))
    return Dataset(x, y, list(ENERGY_FEATURES), "heating_load", source="energy_surrogate")


def load_energy(path=None) -> Dataset:
    """UCI Energy from ``path`` or $ONEPASS_ENERGY_CSV when available, else the surrogate.

    Accepts the 10-column layout (8 features, heating load, cooling load) in
    comma- or whitespace-separated form; the heating load is the target.
    """
    path = path or os.environ.get(ENERGY_ENV)
    if not path:
        return energy_surrogate()
    return load_csv(path, target_column=8, usecols=range(9))


def load_dataset(ref: str, task: str = "regression", target_column: int | str = -1) -> Dataset:
    """Resolve a dataset reference: ``energy``, ``energy_surrogate`` or a CSV path."""
    if ref == "energy":
        return load_energy()
    if ref == "energy_surrogate":
        return energy_surrogate()
    m = re.fullmatch(r"energy_surrogate:(\d+)", ref)
    if m:
        return energy_surrogate(int(m.group(1)))
    return load_csv(ref, target_column=target_column, task=task)


# -- splitting and scaling ----------------------------------------------------------

def split(dataset, fractions: Sequence[float] = DEFAULT_FRACTIONS, seed: int = 0) -> Split:
    """Seeded shuffle; val/test sizes are floor(f * N) and the remainder goes to train."""
    n = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n_val = int(np.floor(fractions[1] * n))
    n_test = int(np.floor(fractions[2] * n))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"split of {n} rows by {fractions} leaves an empty portion")
    perm = np.random.default_rng(seed).permutation(n)
    return Split(np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
                 np.sort(perm[n_train + n_val:]), seed)


def standardise(dataset: Dataset, split_: Split, min_std: float = 1e-12) -> Dataset:
    """Affine-scale every column with train-portion statistics (population std).

    Columns whose train std is below ``min_std`` are centred only.  Regression
    targets are scaled the same way and the statistics kept for de-normalising.
    """
    xt = dataset.X[split_.train_idx]
    mu = xt.mean(axis=0)
    sd = xt.std(axis=0)
    sd_safe = np.where(sd < min_std, 1.0, sd)
    x = (dataset.X - mu) / sd_safe
    stats = NormStats(mu, sd_safe)
    y = dataset.y
    if dataset.task == "regression":
        yt = y[split_.train_idx]
        y_mu, y_sd = float(yt.mean()), float(yt.std())
        y_sd = y_sd if y_sd >= min_std else 1.0
        y = (y - y_mu) / y_sd
        stats.y_mean, stats.y_std = y_mu, y_sd
    return replace(dataset, X=x, y=y, stats=stats)


def batches(indices: np.ndarray, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Fresh seeded shuffle per epoch, cut into slices; the last partial batch is kept."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    indices = np.asarray(indices)
    rng = np.random.default_rng([seed, epoch])
    order = indices[rng.permutation(len(indices))]
    return [order[k:k + batch_size] for k in range(0, len(order), batch_size)]
