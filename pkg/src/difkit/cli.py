"""Command-line entry point: ``difkit <command> [flags]``.

Commands: gen, train, eval, sweep, bench-hypernet, export-sr, export-plots.
Exit status is 0 on success, 1 on a usage error and 2 when the command fails.
Training flags mirror the ``key=value`` config file keys; a flag given on the
command line wins over the same key in ``--config``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from . import evaluate as E
from .hyper import MODES, bench, environment_fingerprint, format_bench_records, format_bench_table
from .systems import SystemId, generate_dataset, load_dataset, save_dataset
from .train import METHODS, TrainConfig, parse_config, train

log = logging.getLogger("difkit")

SYSTEMS = [s.value for s in SystemId]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# flag name -> TrainConfig key
_TRAIN_FLAGS = {"dataset": "dataset", "method": "method", "iters": "iters", "batch": "batch",
                "seed": "seed", "envs": "envs", "tc_factor": "tc_factor"}


def _train_flags(p, method_default="dif"):
    p.add_argument("--config", help="key=value training config file (default: none)")
    p.add_argument("--dataset", help="dataset directory written by gen (default: from --config)")
    p.add_argument("--method", choices=METHODS, help=f"training objective (default: {method_default})")
    p.add_argument("--iters", type=int, help="training iterations (default: 5000)")
    p.add_argument("--batch", type=int, help="batch size (default: 32)")
    p.add_argument("--seed", type=int, help="random seed (default: 0)")
    p.add_argument("--envs", help="comma list of training environments (default: all)")
    p.add_argument("--tc-factor", type=float, dest="tc_factor",
                   help="past window length factor, T_c = T / factor (default: per system)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="difkit", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="simulate a multi-environment dataset")
    p.add_argument("--system", choices=SYSTEMS, required=True)
    p.add_argument("--seed", type=int, default=0, help="dataset seed (default: 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--envs", default="", help="comma list of environments (default: all four)")
    p.add_argument("--tc-factor", type=float, dest="tc_factor", default=None,
                   help="past window length factor stored in the metadata (default: per system)")

    p = sub.add_parser("train", help="train one model")
    _train_flags(p)
    p.add_argument("--out", required=True, help="run directory (config.txt, steps.log, model.ckpt)")

    p = sub.add_parser("eval", help="four-cell NRMSE matrix of a checkpoint on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None, help="key=value output file (default: print only)")

    p = sub.add_parser("sweep", help="random hyperparameter search")
    _train_flags(p)
    p.add_argument("--candidates", type=int, default=8, help="number of candidates (default: 8)")
    p.add_argument("--workers", type=int, default=1, help="parallel candidate processes (default: 1)")
    p.add_argument("--out", required=True, help="sweep directory")

    p = sub.add_parser("bench-hypernet", help="time the three hypernetwork execution modes")
    p.add_argument("--modes", default="all", help=f"'all' or a comma list of {','.join(MODES)} (default: all)")
    p.add_argument("--iters", type=int, default=200, help="timed iterations per mode (default: 200)")
    p.add_argument("--batch", type=int, default=32, help="networks per batch (default: 32)")
    p.add_argument("--seed", type=int, default=0, help="(default: 0)")
    p.add_argument("--out", default=None, help="tab-separated record file (default: print only)")

    p = sub.add_parser("export-sr", help="(params, state, invariant derivative) rows for symbolic regression")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output .tsv path")

    p = sub.add_parser("export-plots", help="delimited data for trajectory and quantile plots")
    p.add_argument("--ckpt", default=None, help="run checkpoint for trajectory overlays (default: none)")
    p.add_argument("--dataset", default=None, help="dataset for --ckpt (default: none)")
    p.add_argument("--sweep", action="append", default=[],
                   help="sweep directory with candidates.tsv; repeatable (default: none)")
    p.add_argument("--out", required=True, help="output directory")
    return ap


def _config(args, method_default="dif") -> TrainConfig:
    cfg = TrainConfig(method=method_default)
    if args.config:
        with open(args.config) as fh:
            cfg = parse_config(fh.read(), cfg)
    over = {key: getattr(args, flag) for flag, key in _TRAIN_FLAGS.items() if getattr(args, flag) is not None}
    cfg = dataclasses.replace(cfg, **over)
    if not cfg.dataset:
        raise UsageError("a dataset is required (--dataset or dataset= in --config)")
    return cfg


def cmd_gen(args):
    envs = tuple(int(e) for e in args.envs.split(",")) if args.envs else None
    ds = generate_dataset(args.system, args.seed, envs=envs, tc_factor=args.tc_factor)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.train)} train / {len(ds.test)} test samples to {args.out}")


def cmd_train(args):
    cfg = _config(args)
    res = train(cfg, out_dir=args.out)
    if res.reports:
        print(res.reports[-1].format())
    if res.diverged:
        raise RuntimeError("training diverged; see steps.log")


def cmd_eval(args):
    ds = load_dataset(args.dataset)
    em = E.evaluate(E.forecaster_from_checkpoint(args.ckpt, ds), ds.test)
    if args.out:
        E.write_eval(em, args.out)
    sys.stdout.write(em.format())


def cmd_sweep(args):
    base = _config(args)
    summary, records = E.sweep(base, base.method, args.candidates, seed=base.seed,
                               workers=args.workers, out_dir=args.out)
    for r in records:
        print(f"{r.method} {r.index:3d} {r.status:6s} {r.value():.6g} {r.error}")
    print(f"median={summary.median:.6g} q25={summary.q25:.6g} q75={summary.q75:.6g} "
          f"min={summary.min:.6g} failed={summary.n_failed}")


def cmd_bench(args):
    modes = MODES if args.modes == "all" else tuple(m.strip() for m in args.modes.split(","))
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise UsageError(f"unknown modes {bad}; expected 'all' or some of {MODES}")
    rows = bench(modes, iterations=args.iters, batch=args.batch, seed=args.seed)
    print(format_bench_table(rows))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(format_bench_records(rows, environment_fingerprint()))


def cmd_export_sr(args):
    ds = load_dataset(args.dataset)
    n = E.export_sr_data(E.forecaster_from_checkpoint(args.ckpt, ds), ds.test, args.out, ds.meta.system)
    print(f"wrote {n} rows to {args.out}")


def cmd_export_plots(args):
    fc = samples = system = None
    if args.ckpt:
        if not args.dataset:
            raise UsageError("--ckpt needs --dataset")
        ds = load_dataset(args.dataset)
        fc, samples, system = E.forecaster_from_checkpoint(args.ckpt, ds), ds.test, ds.meta.system
    summaries, records = [], []
    for d in args.sweep:
        recs = E.read_candidates(os.path.join(d, "candidates.tsv"))
        for method in sorted({r.method for r in recs}):
            mine = [r for r in recs if r.method == method]
            ok = [r.value() for r in mine if r.status == "ok"]
            summaries.append(E.SweepSummary.from_values(method, ok, len(mine) - len(ok)))
        records += recs
    if fc is None and not summaries:
        raise UsageError("export-plots needs --ckpt/--dataset or at least one --sweep")
    for path in E.export_plot_data(args.out, fc, samples, system, summaries, records):
        print(path)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "bench-hypernet": cmd_bench, "export-sr": cmd_export_sr, "export-plots": cmd_export_plots}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"{parser.format_usage()}difkit: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"difkit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
