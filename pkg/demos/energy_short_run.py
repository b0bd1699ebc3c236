"""A half-minute comparison of random search and online tuning on Energy.

Runs 5 trials each of Random, Lorraine and WD+LR+M for 1000 full-batch epochs,
writes everything to ./demo_results and prints the summary table.  Set
ONEPASS_ENERGY_CSV to use the real UCI file instead of the bundled surrogate.

    python3 demos/energy_short_run.py
"""

import sys

from onepass_hpo.data import load_energy
from onepass_hpo.harness import ExperimentConfig, export, format_table, run_experiment


def progress(done, total):
    print(f"\r{done}/{total} trials", end="", file=sys.stderr, flush=True)


cfg = ExperimentConfig(dataset="energy", setting="random,lorraine,ours_wd_lr_m",
                       epochs=1000, n_trials=5, master_seed=3)
print(f"data: {load_energy().source}")
records = run_experiment(cfg, progress=progress)
print(file=sys.stderr)
summary = export(records, "demo_results", config=cfg.to_dict(), seed=cfg.master_seed)
print(format_table(summary, "final test MSE (standardised targets)"))

r = records["ours_wd_lr_m"][0]
print("\nhyperparameter trajectory of one WD+LR+M trial:")
for snap in r.snapshots[::max(1, len(r.snapshots) // 6)]:
    print(f"  step {snap['step']:5d}  lr {snap['lr']:.2e}  wd {snap['wd']:.2e}  "
          f"momentum {snap['momentum']:.3f}  val {snap['val_loss']:.4f}")
