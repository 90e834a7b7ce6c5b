"""Command-line entry point: generate, train, evaluate, compare, dump-defaults.

Exit codes: 0 ok, 2 usage/config error, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import config as config_mod
from .duffing import generate_dataset, load_dataset, regimes_separated, validate_regimes
from .errors import ConfigError, DivergenceError
from .evaluation import (evaluate_run, load_report, render_table, summarize,
                         write_aggregate_csv)
from .neural import REFERENCE_COUNTS
from .training import METHODS, MODEL_KIND, train

log = logging.getLogger("tapinn")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    pass


def _load_config(path) -> config_mod.ExperimentConfig:
    if path is not None and not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    return config_mod.load(path)


def cmd_generate(args) -> int:
    cfg = _load_config(args.config)
    dcfg = cfg.dataset()
    report = validate_regimes(dcfg.regimes, dcfg.params,
                              warmup_periods=cfg["dataset.oracle_warmup_periods"],
                              periods=cfg["dataset.oracle_periods"])
    for f0, descs in report.items():
        print(f"regime f0={f0}: " + ", ".join(d.label for d in descs))
    if not regimes_separated(report):
        print("WARNING: regime separation failed: lowest forcing is not periodic or highest "
              "is not chaotic under the configured Duffing constants")
    ds = generate_dataset(dcfg, args.seed, args.out)
    print(f"wrote {len(ds.trajectories)} trajectories ({len(ds.train)} train / "
          f"{len(ds.test)} test) to {args.out}")
    return EXIT_OK


def _run_one(job) -> tuple[str, int, str | None]:
    cfg_values, method, seed, data_dir, out = job
    exp = config_mod.ExperimentConfig(cfg_values)
    tcfg = exp.train(method, seed, data_dir)
    try:
        train(tcfg, out_dir=out)
    except DivergenceError as exc:
        return method, seed, str(exc)
    return method, seed, None


def _seeds(args) -> list[int]:
    if args.seeds:
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"bad --seeds {args.seeds!r}") from None
    return [args.seed]


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.method == "all":
        methods = list(METHODS)
    elif args.method in METHODS:
        methods = [args.method]
    else:
        raise UsageError(f"invalid method {args.method!r}; valid methods: all, {', '.join(METHODS)}")
    data_dir = args.data if args.data is not None else cfg["train.data_dir"]
    if not (Path(data_dir) / "manifest.json").exists():
        raise UsageError(f"no dataset at {data_dir}; run 'generate' first")
    jobs = [(cfg.values, m, s, data_dir, str(Path(args.out) / m / f"seed{s}"))
            for m in methods for s in _seeds(args)]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    failed = [r for r in results if r[2] is not None]
    for method, seed, msg in results:
        print(f"{method} seed={seed}: {'DIVERGED ' + msg if msg else 'ok'}")
    if failed:
        return EXIT_DIVERGED
    return EXIT_OK


def _evaluate(run_dir: Path, cfg: config_mod.ExperimentConfig, dataset_cache: dict,
              data: str | None = None):
    if not (run_dir / "run.json").exists() or not (run_dir / "checkpoints").is_dir():
        raise UsageError(f"{run_dir}: missing run.json or checkpoints")
    info = json.loads((run_dir / "run.json").read_text())
    data_dir = data or info["config"]["data_dir"]
    if data_dir not in dataset_cache:
        if not (Path(data_dir) / "manifest.json").exists():
            raise UsageError(f"{run_dir}: dataset {data_dir} not found (use --data)")
        dataset_cache[data_dir] = load_dataset(data_dir)
    try:
        return evaluate_run(run_dir, dataset_cache[data_dir], n_c=cfg["eval.n_c"],
                            seed=cfg["eval.seed"])
    except FileNotFoundError as exc:
        raise UsageError(f"{run_dir}: {exc}") from None


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    report = _evaluate(Path(args.run_dir), cfg, {}, args.data)
    print(report.to_json(), end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_config(args.config)
    root = Path(args.runs_dir)
    run_dirs = sorted(p.parent for p in root.glob("**/run.json"))
    if not run_dirs:
        raise UsageError(f"no runs found under {root}")
    cache: dict = {}
    reports = []
    for rd in run_dirs:
        ev = rd / "eval.json"
        reports.append(load_report(ev) if ev.exists() and not args.reevaluate
                       else _evaluate(rd, cfg, cache, args.data))
    summary = summarize(reports)
    write_aggregate_csv(reports, root / "aggregate.csv")
    table = render_table(summary)
    counts = ", ".join(f"{k}={v:,d}" for k, v in REFERENCE_COUNTS.items())
    table += f"Reference parameter budgets: {counts}\n"
    (root / "compare.txt").write_text(table)
    (root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(table, end="")
    return EXIT_OK


def cmd_dump_defaults(args) -> int:
    print(config_mod.dump_defaults(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tapinn", description=__doc__.splitlines()[0])
    parser.add_argument("--dump-defaults", action="store_true", help="print default config and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    g = sub.add_parser("generate", help="simulate the Duffing dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one method, or all of them")
    t.add_argument("--method", required=True, help=f"all or one of: {', '.join(METHODS)}")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--seeds", help="comma-separated seeds; overrides --seed")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset directory (default: train.data_dir)")
    t.add_argument("--out", required=True)
    t.add_argument("--jobs", type=int, default=1)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate one finished run")
    e.add_argument("--run-dir", required=True)
    e.add_argument("--config")
    e.add_argument("--data", help="dataset directory (default: the one recorded in run.json)")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="aggregate runs into the comparison table")
    c.add_argument("--runs-dir", required=True)
    c.add_argument("--config")
    c.add_argument("--data", help="dataset directory (default: the one recorded in run.json)")
    c.add_argument("--reevaluate", action="store_true")
    c.set_defaults(func=cmd_compare)

    d = sub.add_parser("dump-defaults", help="print default config")
    d.set_defaults(func=cmd_dump_defaults)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.dump_defaults:
        return cmd_dump_defaults(args)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
