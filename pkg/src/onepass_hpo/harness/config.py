"""Experiment configuration: a flat key/value mapping, read from YAML."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

SETTINGS = (
    "random",
    "random_xlr",
    "random_3batched",
    "lorraine",
    "baydin",
    "ours_wd_lr",
    "ours_wd_lr_m",
    "ours_wd_hdlr_m",
    "diff_through_opt",
)
RANDOM_SETTINGS = ("random", "random_xlr", "random_3batched")

MASKS = {
    "random": (),
    "random_xlr": (),
    "random_3batched": (),
    "lorraine": ("wd",),
    "baydin": ("lr",),
    "ours_wd_lr": ("lr", "wd"),
    "ours_wd_lr_m": ("lr", "wd", "momentum"),
    "ours_wd_hdlr_m": ("lr", "wd", "momentum"),
    "diff_through_opt": ("lr", "wd", "momentum"),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "energy"
    task: str = "regression"
    target_column: int | str = -1
    fractions: list[float] | None = None  # None: UCI 72/18/10 for energy, else 60/20/20
    split_seed: int | None = None  # None: derived from master_seed
    hidden_dims: list[int] = field(default_factory=lambda: [50])
    setting: str | list[str] = "ours_wd_lr_m"
    epochs: int = 4000
    total_steps: int | None = None  # overrides epochs when set
    batch_size: int = 0  # 0: full batch
    T: int = 10
    i: int = 5
    window: int | None = None  # Diff-through-Opt unroll length; None: i
    n_trials: int = 1
    master_seed: int = 0
    kappa: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    meta_eps: float = 1e-8
    clip_lr: bool = True
    lr_range: list[float] = field(default_factory=lambda: [-6.0, -1.0])  # log10
    wd_range: list[float] = field(default_factory=lambda: [-7.0, -2.0])  # log10
    momentum_range: list[float] = field(default_factory=lambda: [0.0, 1.0])  # natural
    lr_mult_range: list[float] = field(default_factory=lambda: [0.995, 1.001])
    outlier_threshold: float = 1e3
    n_boot: int = 1000
    T_values: list[int] = field(default_factory=lambda: [1, 10, 50])
    i_values: list[int] = field(default_factory=lambda: [1, 5, 20])
    n_hyper_updates: int = 400
    grid_setting: str = "ours_wd_lr_m"
    jobs: int = 1

    def __post_init__(self):
        self.validate()

    @property
    def settings(self) -> list[str]:
        s = self.setting
        if isinstance(s, str):
            s = [x.strip() for x in s.split(",") if x.strip()]
        return list(s)

    @property
    def loss_kind(self) -> str:
        return "cross_entropy" if self.task == "classification" else "mse"

    @property
    def split_fractions(self) -> tuple[float, float, float]:
        if self.fractions is not None:
            return tuple(self.fractions)
        from ..data import DEFAULT_FRACTIONS, UCI_FRACTIONS

        return UCI_FRACTIONS if str(self.dataset).startswith("energy") else DEFAULT_FRACTIONS

    @property
    def effective_split_seed(self) -> int:
        if self.split_seed is not None:
            return int(self.split_seed)
        return int(np.random.SeedSequence([self.master_seed, 0xD47A]).generate_state(1)[0])

    @property
    def effective_window(self) -> int:
        w = self.i if self.window is None else self.window
        return max(1, min(w, self.T))

    def validate(self) -> None:
        for s in self.settings:
            if s not in SETTINGS:
                raise ConfigError(f"unknown setting {s!r}; choose from {', '.join(SETTINGS)}")
        if not self.settings:
            raise ConfigError("no setting given")
        if self.grid_setting not in SETTINGS:
            raise ConfigError(f"unknown grid_setting {self.grid_setting!r}")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.i < 0:
            raise ConfigError("i must be >= 0")
        if self.n_trials < 1:
            raise ConfigError("n_trials must be >= 1")
        if self.batch_size < 0:
            raise ConfigError("batch_size must be >= 0")
        if self.task not in ("regression", "classification"):
            raise ConfigError(f"unknown task {self.task!r}")
        for name in ("lr_range", "wd_range", "momentum_range", "lr_mult_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ConfigError(f"{name} must satisfy min < max, got {[lo, hi]}")
        if not self.T_values or not self.i_values:
            raise ConfigError("T_values and i_values must be non-empty")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


FIELD_NAMES = tuple(f.name for f in fields(ExperimentConfig))


def from_mapping(values: Mapping[str, Any]) -> ExperimentConfig:
    unknown = sorted(set(values) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    try:
        return ExperimentConfig(**dict(values))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def parse_override(text: str) -> tuple[str, Any]:
    """``key=value`` with the value parsed as YAML (numbers, lists, booleans)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form KEY=VALUE")
    key, raw = text.split("=", 1)
    key = key.strip()
    if key not in FIELD_NAMES:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {key!r}: {exc}") from exc
    return key, value


def load_config(path=None, overrides=()) -> ExperimentConfig:
    values: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(loaded, Mapping):
            raise ConfigError(f"{path}: expected a flat key/value mapping")
        values.update(loaded)
    for item in overrides:
        key, value = parse_override(item)
        values[key] = value
    return from_mapping(values)
