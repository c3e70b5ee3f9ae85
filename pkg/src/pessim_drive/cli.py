"""Command-line entry point: training runs, sweeps, plots and the bound lab."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .boundlab import BoundConfigError, boundlab_report
from .experiment import (ALGORITHMS, ExperimentConfig, ExperimentError, apply_overrides, desk_config,
                         load_config_file, run_seeds, sweep, write_artifacts)
from .plotting import CsvFormatError, plot_files
from .traffic import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_BOUND = 0, 2, 3, 4

log = logging.getLogger("pessim_drive")

# command-line flag -> ExperimentConfig field
_FLAG_FIELDS = {
    "algo": "algo",
    "d": "d",
    "rollout_len": "rollout_len",
    "pgd_select": "pgd_mode",
    "pgd_iters": "pgd_iters",
    "xi": "xi",
    "episodes": "episodes",
    "horizon": "horizon",
    "fixed_temp": "fixed_temp",
    "update_every": "update_every",
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value file applied before the flags below")
    p.add_argument("--desk", action="store_true", help="start from the laptop-scale preset")
    p.add_argument("--algo", choices=ALGORITHMS)
    p.add_argument("--d", type=float, help="communication range in metres")
    p.add_argument("--rollout-len", type=int)
    p.add_argument("--pgd-select", choices=("best", "avg", "final"))
    p.add_argument("--pgd-iters", type=int)
    p.add_argument("--xi", type=float, help="KL radius of the model constraint set")
    p.add_argument("--episodes", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--fixed-temp", type=float, help="disable temperature tuning and use this value")
    p.add_argument("--update-every", type=int, help="agent update period in simulator steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds; overrides --seed")
    p.add_argument("--workers", type=int, help="parallel runs (default: PESSIM_DRIVE_THREADS or CPU count)")


def _config_from_args(args) -> ExperimentConfig:
    cfg = desk_config() if args.desk else ExperimentConfig()
    if args.config is not None:
        cfg = load_config_file(args.config, cfg)
    pairs = {f: getattr(args, flag) for flag, f in _FLAG_FIELDS.items() if getattr(args, flag) is not None}
    if "pgd_mode" in pairs:
        pairs["pgd_mode"] = {"avg": "average"}.get(pairs["pgd_mode"], pairs["pgd_mode"])
    cfg = apply_overrides(cfg, pairs)
    return cfg.replace(seed=args.seed).validate()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pessim-drive", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train on the traffic simulator and write run artifacts")
    _add_config_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--graphs", action="store_true", help="also write episode-end communication graphs")

    p = sub.add_parser("sweep", help="repeat runs over values of one config field")
    _add_config_args(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("plot", help="render SVG figures from result CSVs")
    p.add_argument("--in", dest="inputs", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("boundlab", help="tabular lemma checks and bound replications")
    p.add_argument("--grid", type=int, default=20, help="number of random instances")
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--out", type=Path, default=Path("boundlab_out"))
    return parser


def _cmd_run(args) -> int:
    cfg = _config_from_args(args)
    seeds = args.seeds or [cfg.seed]
    def out_for(seed):
        return args.out if len(seeds) == 1 else args.out / f"seed{seed}"

    try:
        results = run_seeds([cfg.replace(seed=s) for s in seeds], args.workers, collect_graphs=args.graphs)
    except ExperimentError as exc:
        if exc.partial is not None:
            write_artifacts(exc.partial, out_for(exc.partial.config.seed))
        raise
    diverged = False
    for r in results:
        out = out_for(r.config.seed)
        write_artifacts(r, out)
        diverged |= r.diverged
        print(f"seed {r.config.seed}: final utility {r.final_utility():.4f} -> {out}")
    if diverged:
        print("training diverged (non-finite updates were skipped)", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    seeds = args.seeds or [cfg.seed]
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ValueError("--values is empty")
    # coerce through the config so that typos fail before any run starts
    values = [getattr(apply_overrides(cfg, {args.param: v}), args.param.replace("-", "_")) for v in values]
    rows, results = sweep(cfg, args.param, values, seeds, out_dir=args.out, workers=args.workers)
    for v in values:
        last = [m for val, _, m, _, _ in rows if val == v][-5:]
        print(f"{args.param}={v}: final-5 mean utility {sum(last) / len(last):.4f}")
    return EXIT_DIVERGED if any(r.diverged for r in results) else EXIT_OK


def _cmd_plot(args) -> int:
    for path in plot_files(args.inputs, args.out):
        print(path)
    return EXIT_OK


def _cmd_boundlab(args) -> int:
    ok, text = boundlab_report(args.grid, args.delta, args.out)
    print(text, end="")
    return EXIT_OK if ok else EXIT_BOUND


_COMMANDS = {"run": _cmd_run, "sweep": _cmd_sweep, "plot": _cmd_plot, "boundlab": _cmd_boundlab}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, ConfigError, BoundConfigError, CsvFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
