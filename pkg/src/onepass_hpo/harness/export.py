"""Result files: trajectories, records, summary, runtimes and empirical CDFs."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .stats import bootstrap_stats, empirical_cdf, outcome_values

TRAJECTORY_COLUMNS = ("step", "train_loss", "val_loss", "test_loss", "lr", "wd", "momentum", "status")


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _dump(obj, path: Path) -> None:
    # NaN is written as the JSON-compatible null so every consumer can parse it
    text = json.dumps(_nan_to_none(obj), indent=2, sort_keys=True, default=_json_default)
    path.write_text(text + "\n", encoding="utf-8")


def _nan_to_none(obj):
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_nan_to_none(v) for v in obj]
    return obj


def _as_dict(r) -> dict:
    return r if isinstance(r, dict) else r.to_dict()


def summarise(records_by_setting: Mapping[str, Sequence], n_boot: int = 1000, seed: int = 0,
              metric: str = "final_test_loss") -> dict:
    """Per-setting bootstrap statistics of the final test metric."""
    out = {}
    for k, (setting, recs) in enumerate(records_by_setting.items()):
        st = bootstrap_stats(outcome_values(recs, metric), n_boot,
                             int(np.random.SeedSequence([seed, k]).generate_state(1)[0]))
        out[setting] = st
    return out


def runtime_summary(records_by_setting: Mapping[str, Sequence]) -> dict:
    out = {}
    for setting, recs in records_by_setting.items():
        t = np.array([_as_dict(r)["wall_time_s"] for r in recs], dtype=np.float64)
        out[setting] = {"mean_runtime_s": float(t.mean()) if t.size else math.nan,
                        "median_runtime_s": float(np.median(t)) if t.size else math.nan}
    return out


def write_trajectory(record, path: Path) -> None:
    d = _as_dict(record)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for s in d["snapshots"]:
            w.writerow([s["step"]] + [repr(float(s[c])) for c in TRAJECTORY_COLUMNS[1:-1]] + [d["status"]])


def write_cdf(records_by_setting: Mapping[str, Sequence], path: Path, metric: str = "final_test_loss") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("setting", metric, "cumulative_fraction"))
        for setting, recs in records_by_setting.items():
            xs, fs = empirical_cdf(outcome_values(recs, metric))
            for x, f in zip(xs, fs):
                w.writerow((setting, repr(float(x)), repr(float(f))))


def format_table(summary: Mapping[str, dict], title: str = "final test loss") -> str:
    """Aligned plain-text table of mean, median and best per setting."""
    rows = [("setting", "mean ± se", "median ± se", "best", "NaN")]
    for setting, st in summary.items():
        rows.append((setting,
                     f"{st['mean']:.4g} ± {st['mean_se']:.2g}",
                     f"{st['median']:.4g} ± {st['median_se']:.2g}",
                     f"{st['best']:.4g}",
                     f"{st['nan_count']}/{st['n']}"))
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    lines = [title]
    for k, r in enumerate(rows):
        lines.append("  ".join(cell.ljust(wd) for cell, wd in zip(r, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * wd for wd in widths))
    return "\n".join(lines)


def export(records_by_setting: Mapping[str, Sequence], out_dir, *, config: dict | None = None,
           n_boot: int = 1000, seed: int = 0) -> dict:
    """Write every result file under ``out_dir`` and return the summary.

    Layout::

        summary.json                 per-setting statistics (deterministic)
        runtimes.json                per-setting wall-clock means and medians
        cdf.csv                      empirical CDFs of the final test metric
        summary.txt                  the plain-text table
        records/<setting>.json       full run records
        trajectories/<setting>/trial_XXXX.csv
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except (FileExistsError, NotADirectoryError) as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    summary = summarise(records_by_setting, n_boot, seed)
    denorm = summarise(records_by_setting, n_boot, seed, metric="final_test_loss_denorm")
    payload = {"master_seed": seed, "metric": "final_test_loss", "settings": summary,
               "denormalised": denorm}
    if config is not None:
        payload["config"] = config
    _dump(payload, out / "summary.json")
    _dump(runtime_summary(records_by_setting), out / "runtimes.json")
    write_cdf(records_by_setting, out / "cdf.csv")
    (out / "summary.txt").write_text(format_table(summary) + "\n", encoding="utf-8")
    (out / "records").mkdir(exist_ok=True)
    for setting, recs in records_by_setting.items():
        _dump([_as_dict(r) for r in recs], out / "records" / f"{setting}.json")
        tdir = out / "trajectories" / setting
        tdir.mkdir(parents=True, exist_ok=True)
        for r in recs:
            write_trajectory(r, tdir / f"trial_{_as_dict(r)['trial_id']:04d}.csv")
    return summary


def load_records(path) -> list[dict]:
    """Read a ``records/<setting>.json`` file back, restoring NaN for nulls."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))

    def fix(d):
        return {k: (math.nan if v is None and k.startswith("final") else v) for k, v in d.items()}

    return [fix(d) for d in data]
