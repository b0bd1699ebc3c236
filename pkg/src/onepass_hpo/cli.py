"""Command-line entry point.

Exit codes: 0 success, 1 check failure, 2 configuration error, 3 I/O or
missing dataset.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .autodiff.gradcheck import TOL, check_all, check_quadratic_hvp
from .data import DataError
from .harness import (
    FIELD_NAMES,
    ConfigError,
    ExperimentConfig,
    default_jobs,
    dense_oracle_check,
    export,
    format_table,
    hypergrad_check,
    load_config,
    load_records,
    run_experiment,
    sensitivity_grid,
    write_cdf,
)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
HVP_TOL = 1e-10
DENSE_TOL = 1e-8


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML file of flat KEY: VALUE pairs")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   nargs="+", help="override a config field (repeatable)")
    p.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    p.add_argument("--jobs", type=int, default=None,
                   help="worker processes (default: $HYPERGRAD_JOBS or 1)")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="onepass-hpo",
                                     description="One-pass gradient-based hyperparameter optimisation.")
    sub = parser.add_subparsers(dest="verb", metavar="VERB")
    _common(sub.add_parser("run", help="run every configured setting and export results"))
    _common(sub.add_parser("grid", help="sensitivity grid over update interval T and look-back i"))
    sub.add_parser("gradcheck", help="finite-difference and dense-oracle checks of the autodiff engine")
    hc = sub.add_parser("hypergrad-check", help="Neumann vs dense vs exact hypergradients on a small model")
    _common(hc)
    hc.add_argument("--window", type=int, default=None, help="exact unroll length (default i+1)")
    hc.add_argument("--tol", type=float, default=None,
                    help="also fail when Neumann vs dense solve or exact exceeds this relative error")
    ec = sub.add_parser("export-cdf", help="rebuild cdf.csv from records/*.json in --out")
    ec.add_argument("--out", type=Path, default=Path("results"))
    sub.add_parser("help", help="show every verb, flag and config key")
    return parser


def _config(args) -> ExperimentConfig:
    overrides = [item for group in args.overrides for item in group]
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        cfg = cfg.replace(master_seed=args.seed)
    return cfg


def _jobs(args, cfg) -> int:
    if args.jobs is not None:
        return max(1, args.jobs)
    return max(default_jobs(), cfg.jobs)


def _progress(done: int, total: int) -> None:
    print(f"\r{done}/{total} trials", end="" if done < total else "\n", file=sys.stderr, flush=True)


def cmd_run(args) -> int:
    cfg = _config(args)
    records = run_experiment(cfg, _jobs(args, cfg), _progress)
    summary = export(records, args.out, config=cfg.to_dict(), n_boot=cfg.n_boot, seed=cfg.master_seed)
    print(format_table(summary))
    print(f"results written to {args.out}")
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = _config(args)
    res = sensitivity_grid(cfg, jobs=_jobs(args, cfg), progress=_progress)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "grid.json").write_text(json.dumps(res.to_dict(), indent=2, sort_keys=True) + "\n")
    width = max(10, *(len(f"i={i}") for i in res.i_values))
    print("median final test loss" + " " * 4 + "".join(f"{'i=' + str(i):>{width}}" for i in res.i_values)
          + f"{'Random':>{width}}")
    for a, T in enumerate(res.T_values):
        cells = "".join(f"{v:>{width}.4g}" for v in res.medians[a])
        print(f"{'T=' + str(T):<26}{cells}{res.random_medians[a]:>{width}.4g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = True
    print(f"{'primitive':<24}{'first order':>14}{'second order':>14}")
    for r in check_all():
        mark = "" if r.passed else "  FAIL"
        print(f"{r.name:<24}{r.first_order_error:>14.3e}{r.second_order_error:>14.3e}{mark}")
        if not r.passed:
            ok = False
            shapes = ", ".join(str(getattr(x, "shape", ())) for x in r.inputs)
            print(f"  failing primitive {r.name!r} on inputs of shape {shapes}: {r.inputs}")
    hvp = check_quadratic_hvp()
    print(f"quadratic Hessian-vector product: max abs error {hvp:.3e}")
    ok &= hvp < HVP_TOL
    dense = dense_oracle_check()
    for i, err in dense.items():
        print(f"Neumann vs dense matrices, i={i}: max abs diff {err:.3e}")
    ok &= all(err < DENSE_TOL for err in dense.values())
    print("all checks passed" if ok else f"check failure (tolerance {TOL:g})")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_hypergrad_check(args) -> int:
    cfg = _config(args)
    report = hypergrad_check(cfg, window=args.window)
    print(report.format())
    args.out.mkdir(parents=True, exist_ok=True)
    rows = [r.__dict__ for r in report.rows]
    (args.out / "hypergrad_check.json").write_text(
        json.dumps({"rows": rows, "diverged": report.diverged, "n_params": report.n_params},
                   indent=2, sort_keys=True) + "\n")
    ok = bool(report.rows) and report.worst("neumann_vs_series") < 1e-6
    if args.tol is not None:
        ok &= report.worst("neumann_vs_solve") < args.tol and report.worst("neumann_vs_exact") < args.tol
    if report.diverged:
        print(f"{len(report.diverged)} of {cfg.n_trials} trials diverged")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_export_cdf(args) -> int:
    rec_dir = args.out / "records"
    files = sorted(rec_dir.glob("*.json"))
    if not files:
        raise FileNotFoundError(f"no records found in {rec_dir}")
    records = {f.stem: load_records(f) for f in files}
    write_cdf(records, args.out / "cdf.csv")
    print(f"wrote {args.out / 'cdf.csv'}")
    return EXIT_OK


def cmd_help(parser: argparse.ArgumentParser) -> int:
    parser.print_help()
    for name, sp in parser._subparsers._group_actions[0].choices.items():
        print(f"\n== {name} ==")
        print(sp.format_help())
    defaults = ExperimentConfig().to_dict()
    print("config keys (set with --set KEY=VALUE):")
    for k in FIELD_NAMES:
        print(f"  {k} = {defaults[k]!r}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verb in (None, "help"):
        return cmd_help(parser)
    handlers = {"run": cmd_run, "grid": cmd_grid, "gradcheck": cmd_gradcheck,
                "hypergrad-check": cmd_hypergrad_check, "export-cdf": cmd_export_cdf}
    try:
        return handlers[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DataError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
