"""Command-line entry points.

Verbs:

* ``run <config>``: execute a profile or JSON config; writes the delimited
  outputs (metrics.csv, losses.csv, heatmap.csv for image streams;
  trajectory.csv, msegrid.csv for the regression study) plus the resolved
  config.json and a run.json with seeds and wall-clock timings into one run
  directory.  Image runs also keep the first seed's sigma snapshots
  (snapshots.npz) and, when coresets are in play, the selected points
  (coresets.csv) for reuse.
* ``report <run_dir>``: render matplotlib figures next to the CSVs already
  in the directory.
* ``list-profiles``: one line per built-in profile.
* ``validate <config>``: parse and check a config, run nothing.
* ``make-data``: synthesize the fallback digits corpus into the data root.

Exit codes: 0 success, 2 configuration problem, 3 data problem, 4 numerical
failure.  The dataset root comes from ``--data-root``, then
``BAYESCL_DATA_ROOT``, then ``./data``; the output root from
``--output-root``, then ``BAYESCL_OUTPUT_ROOT``, then ``./runs``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

from .config import PROFILES, ConfigError, load_config, validate_config
from .continual import (
    linreg_trajectory,
    mse_grid,
    run_continual,
    save_snapshots,
    variance_heatmap,
)
from .core_math import NumericalError
from .coresets import write_coreset_csv
from .tasks import (
    DataError,
    ensure_digit_corpus,
    load_image_pair,
    permuted_tasks,
    split_tasks,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _resolve_data_root(args, cfg) -> Path:
    return Path(args.data_root or os.environ.get("BAYESCL_DATA_ROOT")
                or cfg.data_root or "data")


def _resolve_output_root(args, cfg) -> Path:
    return Path(args.output_root or os.environ.get("BAYESCL_OUTPUT_ROOT")
                or cfg.output_root or "runs")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _build_stream(cfg, data_root: Path):
    root = ensure_digit_corpus(data_root, n_train=cfg.n_train,
                               n_test=cfg.n_test, seed=cfg.task_seed)
    base = load_image_pair(root)
    if cfg.experiment == "permuted":
        return permuted_tasks(base, cfg.n_tasks, seed=cfg.task_seed)
    return split_tasks(base, [tuple(p) for p in cfg.pairs])


def _run_images(cfg, out_dir: Path, data_root: Path):
    stream = _build_stream(cfg, data_root)
    result = run_continual(stream, cfg)
    _write_csv(out_dir / "metrics.csv",
               ("seed", "task_trained", "task_eval", "accuracy"),
               result.metrics)
    _write_csv(out_dir / "losses.csv", ("seed", "task", "epoch", "loss"),
               result.losses)
    first_seed = cfg.seeds[0]
    delta, labels = variance_heatmap(result.snapshots[first_seed])
    rows = []
    for t in range(delta.shape[1]):
        for i in range(delta.shape[0]):
            rows.append((i, labels[i], t, delta[i, t]))
    _write_csv(out_dir / "heatmap.csv",
               ("param_index", "layer", "task", "delta_sigma"), rows)
    save_snapshots(out_dir / "snapshots.npz", result.snapshots[first_seed])
    if result.coresets.get(first_seed):
        write_coreset_csv(out_dir / "coresets.csv",
                          result.coresets[first_seed])
    for seed in cfg.seeds:
        print(f"seed {seed}: final average accuracy "
              f"{result.avg_final_accuracy(seed):.4f}")
    return result


def _run_linreg(cfg, out_dir: Path):
    result = linreg_trajectory(cfg.seeds[0], cfg)
    _write_csv(out_dir / "trajectory.csv", ("config", "step", "mu_w", "mu_b"),
               result.trajectory_rows())
    _write_csv(out_dir / "msegrid.csv", ("mu_w", "mu_b", "avg_mse"),
               mse_grid(cfg))
    for variant, mse in sorted(result.avg_mse.items()):
        print(f"{variant}: average mse over tasks {mse:.4f}")
    return result


def cmd_run(args) -> int:
    cfg = validate_config(load_config(args.config))
    data_root = _resolve_data_root(args, cfg)
    out_root = _resolve_output_root(args, cfg)
    name = cfg.name or Path(args.config).stem
    out_dir = out_root / name
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if cfg.experiment == "linreg":
        result = _run_linreg(cfg, out_dir)
        seed_timings = {}
    else:
        result = _run_images(cfg, out_dir, data_root)
        seed_timings = {str(s): round(t, 3) for s, t in result.timings.items()}
    (out_dir / "config.json").write_text(cfg.to_json() + "\n")
    run_info = {
        "config": json.loads(cfg.to_json()),
        "seeds": list(cfg.seeds),
        "timings_seconds": seed_timings,
        "total_seconds": round(time.perf_counter() - t0, 3),
    }
    (out_dir / "run.json").write_text(json.dumps(run_info, indent=2) + "\n")
    print(f"outputs written to {out_dir}")
    return EXIT_OK


def cmd_report(args) -> int:
    from . import report
    out_dir = Path(args.run_dir)
    if not out_dir.is_dir():
        raise DataError(f"{out_dir} is not a run directory")
    written = report.render_run(out_dir)
    if not written:
        raise DataError(f"{out_dir} holds no delimited outputs to render")
    for p in written:
        print(f"figure written to {p}")
    return EXIT_OK


def cmd_list_profiles(_args) -> int:
    width = max(len(n) for n in PROFILES)
    for name in sorted(PROFILES):
        cfg = PROFILES[name]
        extras = []
        if cfg.experiment != "linreg":
            extras.append(f"coreset={cfg.coreset}"
                          + (f"/{cfg.coreset_mode}" if cfg.coreset != "none" else ""))
            extras.append(f"epochs={cfg.epochs}")
            extras.append(f"seeds={len(cfg.seeds)}")
        else:
            extras.append(f"sigma0={cfg.sigma0:.3f}")
        print(f"{name:<{width}}  {cfg.experiment:<8}  {'  '.join(extras)}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = validate_config(load_config(args.config))
    print(f"ok: {cfg.name or args.config} ({cfg.experiment})")
    return EXIT_OK


def cmd_make_data(args) -> int:
    root = Path(args.root or os.environ.get("BAYESCL_DATA_ROOT") or "data")
    ensure_digit_corpus(root, n_train=args.n_train, n_test=args.n_test,
                        seed=args.seed)
    print(f"digit corpus ready under {root}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bayescl",
        description="Desk-scale Bayesian continual-learning experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a profile or JSON config")
    run.add_argument("config")
    run.add_argument("--data-root", default=None)
    run.add_argument("--output-root", default=None)
    run.set_defaults(fn=cmd_run)

    rep = sub.add_parser("report", help="render figures for a finished run")
    rep.add_argument("run_dir")
    rep.set_defaults(fn=cmd_report)

    lp = sub.add_parser("list-profiles", help="show built-in profiles")
    lp.set_defaults(fn=cmd_list_profiles)

    val = sub.add_parser("validate", help="check a config without running")
    val.add_argument("config")
    val.set_defaults(fn=cmd_validate)

    md = sub.add_parser("make-data", help="synthesize the fallback corpus")
    md.add_argument("--root", default=None)
    md.add_argument("--n-train", type=int, default=12000)
    md.add_argument("--n-test", type=int, default=2000)
    md.add_argument("--seed", type=int, default=0)
    md.set_defaults(fn=cmd_make_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
