"""``ccdc`` command line: train, eval, sweep, augment, report, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 a check failed.
Relative output paths resolve under ``$CCDC_OUTPUT_ROOT`` (default ``runs``).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from ccdc import __version__
from ccdc.config import ConfigError, RunConfig, load_config

OUTPUT_ROOT_ENV = "CCDC_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_CHECK = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for failed checks here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, "runs")


def resolve_out(path: str | None, default: str) -> str:
    path = path or default
    return path if os.path.isabs(path) else os.path.join(output_root(), path)


def emit(rows: list[dict], as_csv: bool, out=None):
    out = out or sys.stdout
    if not rows:
        return
    cols = list(rows[0])
    fmt = lambda v: repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
    if as_csv:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([fmt(r[c]) for c in cols])
        return
    human = lambda v: f"{v:.4f}" if isinstance(v, (float, np.floating)) else str(v)
    table = [[str(c) for c in cols]] + [[human(r[c]) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
    for k, row in enumerate(table):
        print("  ".join(v.rjust(w) for v, w in zip(row, widths)), file=out)
        if k == 0:
            print("  ".join("-" * w for w in widths), file=out)


def run_training(cfg: RunConfig, out_dir: str | None):
    from ccdc.train import train

    manifest = {**cfg.to_dict(), "seed": cfg.seed, "config_ini": cfg.to_ini()}
    return train(cfg.network, cfg.data, cfg.aug, cfg.trainer, cfg.seed, out_dir=out_dir, manifest=manifest)


# -- subcommands --------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    out_dir = resolve_out(args.out or cfg.out_dir, "train")
    result = run_training(cfg, out_dir)
    row = {"out_dir": out_dir, **result.final.row()}
    emit([row], args.csv)
    return EXIT_OK


def cmd_eval(args) -> int:
    from ccdc.network import load_checkpoint
    from ccdc.train import evaluate, make_datasets, write_eval

    if not args.checkpoint:
        raise UsageError("eval needs a checkpoint path (--checkpoint)")
    if not os.path.isfile(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    cfg = load_config(args.config, args.set)
    try:
        net, _ = load_checkpoint(args.checkpoint)
    except (ValueError, KeyError, OSError) as exc:
        raise UsageError(f"cannot read checkpoint {args.checkpoint}: {exc}") from None
    if net.spec.input_size != cfg.data.image_size:
        raise ConfigError(f"data.image_size {cfg.data.image_size} does not match the checkpoint's "
                          f"input size {net.spec.input_size}")
    ds = make_datasets(cfg.data, cfg.seed)
    res = evaluate(net, ds.test, ds.dev)
    if args.out:
        out = resolve_out(args.out, "eval")
        os.makedirs(out, exist_ok=True)
        write_eval(os.path.join(out, "eval.csv"), res)
    emit([res.row()], args.csv)
    return EXIT_OK


def cmd_sweep(args) -> int:
    from ccdc.sweep import SWEEP_COLUMNS, run_sweep

    cfg = load_config(args.config, args.set)
    out_root = resolve_out(args.out, f"sweep-{args.axis}")
    values = [v.strip() for v in args.values.split(",")] if args.values else None
    if values and args.axis in ("theta", "cfim_init"):
        try:
            values = [float(v) for v in values]
        except ValueError:
            raise ConfigError(f"--values for axis {args.axis} must be numbers") from None
    rows = run_sweep(cfg, args.axis, out_root, values, args.jobs)
    os.makedirs(out_root, exist_ok=True)
    with open(os.path.join(out_root, "sweep.csv"), "w", newline="") as f:
        emit([{k: r[k] for k in SWEEP_COLUMNS} for r in rows], True, f)
    emit([{k: r[k] for k in SWEEP_COLUMNS} for r in rows], args.csv)
    return EXIT_OK


def cmd_augment(args) -> int:
    from ccdc.data import augment_batch, generate_batch, load_batch, preview_grid, save_batch, write_ppm
    from ccdc.tensor import make_rng, split_seed

    cfg = load_config(args.config, args.set)
    seeds = split_seed(cfg.seed, ("data_train", "aug"))
    if args.input:
        try:
            batch = load_batch(args.input)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read batch from {args.input}: {exc}") from None
    else:
        batch = generate_batch(cfg.data.scene(), args.n, cfg.data.live_fraction, make_rng(seeds["data_train"]))
    out = augment_batch(batch, cfg.aug, make_rng(seeds["aug"]))
    out_dir = resolve_out(args.out, "augment")
    save_batch(out_dir, out)
    write_ppm(os.path.join(out_dir, "preview.ppm"), preview_grid(batch, out))
    emit([{"out_dir": out_dir, "items": len(out), "changed": int(np.sum(np.any(
        out.images != batch.images, axis=(1, 2, 3))))}], args.csv)
    return EXIT_OK


def report_rows(scale: str = "reference") -> list[dict]:
    from ccdc.network import preset
    from ccdc.ops import count_flops, count_macs, count_parameters

    rows = []
    specs = [("depthnet", preset("depthnet", scale)), ("cdcn", preset("cdcn", scale)),
             ("c-cdn-hv", preset("c-cdn-hv", scale)), ("c-cdn-dg", preset("c-cdn-dg", scale)),
             ("dc-cdn-average", preset("dc-cdn", scale, fusion="average")),
             ("dc-cdn-concat", preset("dc-cdn", scale, fusion="concat"))]
    base = specs[1][1]
    shape = (1, 3, base.input_size, base.input_size)
    bp, bm = count_parameters(base), count_macs(base, shape)
    for name, spec in specs:
        p, m = count_parameters(spec), count_macs(spec, shape)
        rows.append({"arch": name, "params": p, "macs": m, "flops": count_flops(spec, shape),
                     "param_ratio": f"{p / bp:.4f}", "mac_ratio": f"{m / bm:.4f}"})
    return rows


def cmd_report(args) -> int:
    emit(report_rows(args.scale), args.csv)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from ccdc.gradcheck import run_all

    results = run_all(args.seed, fault=args.inject_fault or os.environ.get("CCDC_GRADCHECK_FAULT"))
    emit([{"check": r.name, "max_rel_err": r.max_rel_err, "tol": r.tol, "entries": r.n_checked,
           "status": "pass" if r.passed else "FAIL"} for r in results], args.csv)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from ccdc.sweep import AXES

    p = _Parser(prog="ccdc", description="Cross central difference networks on synthetic data.")
    p.add_argument("--version", action="version", version=f"ccdc {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        sp.add_argument("--csv", action="store_true", help="print CSV instead of a table")
        if out:
            sp.add_argument("--out", help=f"output directory (relative to ${OUTPUT_ROOT_ENV})")

    sp = sub.add_parser("train", help="train one configuration")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the configured test split")
    common(sp)
    sp.add_argument("--checkpoint", help="checkpoint written by train")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="train every point along one axis")
    common(sp)
    sp.add_argument("--axis", required=True, choices=AXES)
    sp.add_argument("--values", help="comma-separated subset of the axis grid")
    sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("augment", help="augment a batch and write a PPM preview")
    common(sp)
    sp.add_argument("--input", help="batch directory (images.t, labels.t, meta.t); synthetic if omitted")
    sp.add_argument("-n", type=int, default=8, help="synthetic batch size")
    sp.set_defaults(func=cmd_augment)

    sp = sub.add_parser("report", help="parameter and FLOP table")
    sp.add_argument("--scale", default="reference", choices=("reference", "tiny"))
    sp.add_argument("--csv", action="store_true")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--csv", action="store_true")
    sp.add_argument("--inject-fault", metavar="CHECK", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"ccdc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
