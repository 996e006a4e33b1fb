"""Command-line entry point: ``attnguide {analyze,regions,simulate,gradcheck,compare}``.

Exit status is 0 on success, 1 when a check fails and 2 on usage, file or
config errors. ``ATTNGUIDE_THREADS`` caps how many seeds ``compare`` and
``gradcheck`` run at once; results are always reported in seed order.
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import report as rpt
from .errors import AttnGuideError, SimulationError
from .grad import GRADCHECK_TOKENS, gradcheck, loss_gradient, random_stack
from .io import (dump_config, format_number, load_config, read_map_file, with_overrides,
                 write_outputs, ExperimentConfig)
from .losses import LossWeights, Metrics
from .scenarios import default_experiment, scattered_subject

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def thread_count() -> int:
    raw = os.environ.get("ATTNGUIDE_THREADS")
    if raw is None or raw == "":
        return min(8, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ATTNGUIDE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"ATTNGUIDE_THREADS must be a positive integer, got {raw!r}")
    return n


def ordered_map(fn, items):
    """``map`` over a thread pool no wider than ``ATTNGUIDE_THREADS``; output keeps input order."""
    items = list(items)
    n = min(thread_count(), max(len(items), 1))
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _read_stack_and_config(args):
    stack = read_map_file(args.map_file)
    tokens, weights, region_cfgs, metrics, adjacency = None, LossWeights(), None, Metrics(), "rook"
    if args.config:
        cfg = load_config(Path(args.config)).experiment.config
        tokens, weights, region_cfgs = cfg.tokens, cfg.weights, cfg.region_cfgs
        metrics, adjacency = cfg.metrics, cfg.adjacency
    if args.metric:
        metrics = Metrics.parse(args.metric)
    return stack, tokens, weights, region_cfgs, metrics, adjacency


def cmd_analyze(args, out) -> int:
    stack, tokens, weights, region_cfgs, metrics, adjacency = _read_stack_and_config(args)
    result = rpt.analyze(stack, tokens, weights, region_cfgs, metrics, adjacency, args.step)
    out.write(rpt.to_json(result) if args.json else rpt.to_text(result))
    if args.csv:
        Path(args.csv).write_text(rpt.regions_csv(result["regions"]))
    return EXIT_OK


def cmd_regions(args, out) -> int:
    stack, tokens, _, region_cfgs, _, _ = _read_stack_and_config(args)
    rows = rpt.region_table(stack, tokens or rpt.default_tokens(stack), region_cfgs, args.step)
    out.write(rpt.regions_csv(rows))
    return EXIT_OK


def cmd_simulate(args, out) -> int:
    spec = load_config(Path(args.config)) if args.config else ExperimentConfig(default_experiment())
    metrics = Metrics.parse(args.metric) if args.metric else None
    exp = with_overrides(spec.experiment, metrics, args.seed)
    every = args.heatmap_every or spec.heatmap_every
    traj = exp.run()
    paths = write_outputs(traj, args.out, every, dump_config(ExperimentConfig(exp, every)))
    first, last = traj.records[0], traj.final
    out.write(f"steps {len(traj)} metric {exp.config.metrics.label} seed {exp.config.seed}\n")
    out.write(f"total {format_number(first.losses.total)} -> {format_number(last.losses.total)}\n")
    out.write(f"wrote {len(paths)} files to {args.out}\n")
    return EXIT_OK


def cmd_gradcheck(args, out) -> int:
    metrics = Metrics.parse(args.metric)
    weights = LossWeights()

    def one(seed):
        stack = random_stack(seed)
        analytic = loss_gradient(stack, GRADCHECK_TOKENS, weights, None, metrics).values
        if args.corrupt:
            analytic = analytic.copy()
            analytic[0, 0, 0] += 1e-2 * (abs(analytic).max() + 1.0)
        return gradcheck(stack, GRADCHECK_TOKENS, weights, None, metrics, args.eps, args.tol, analytic)

    seeds = range(args.start, args.start + args.seeds)
    reports = ordered_map(one, seeds)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["seed", "max_rel_err", "max_abs_err", "worst_token", "worst_row", "worst_col", "pass"])
    for seed, r in zip(seeds, reports):
        tok, i, j = r.worst_cell
        w.writerow([seed, format_number(r.max_rel_err), format_number(r.max_abs_err), tok, i, j,
                    "yes" if r.passed else "no"])
    n_pass = sum(r.passed for r in reports)
    worst = max(r.max_rel_err for r in reports)
    out.write(f"# {n_pass}/{len(reports)} passed at rtol {args.tol:g}; "
              f"worst relative error {format_number(worst)}\n")
    return EXIT_OK if n_pass == len(reports) else EXIT_FAIL


COMPARE_COLUMNS = ["metric", "seed", "spread", "morans_i", "agg_sub", "max", "total"]


def compare_rows(metrics: list[str], seeds: range) -> list[list]:
    """Final aggregation-scenario metrics, grouped by metric then seed."""
    jobs = [(m, s) for m in metrics for s in seeds]

    def one(job):
        m, seed = job
        traj = scattered_subject(seed, m).run()
        f = traj.final
        return [Metrics.parse(m).label.split("+")[0], seed, f.spread["subject"],
                f.morans["subject"], f.losses.agg_sub, f.losses.max, f.losses.total]

    return ordered_map(one, jobs)


def cmd_compare(args, out) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in metrics:
        Metrics.parse(m)
    rows = compare_rows(metrics, range(args.start, args.start + args.seeds))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_COLUMNS)
    for r in rows:
        w.writerow([r[0], r[1]] + [format_number(x) for x in r[2:]])
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        out.write(buf.getvalue())
    if len(metrics) == 2:
        n = args.seeds
        a, b = rows[:n], rows[n:]
        wins = sum(x[2] < y[2] for x, y in zip(a, b))
        sys.stderr.write(f"{a[0][0]} spread below {b[0][0]} in {wins}/{n} seeds\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnguide",
                                description="Cross-attention aggregation and isolation guidance toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def map_args(sp):
        sp.add_argument("map_file", help="attention map file (AMAP format)")
        sp.add_argument("--config", help="JSON experiment config supplying token roles, weights, regions")
        sp.add_argument("--metric", help="euc, cos or agg+iso such as euc+cos")
        sp.add_argument("--step", type=int, default=0, help="optimization step for scheduled radii")

    sp = sub.add_parser("analyze", help="losses, Moran's I, isolation and regions of a map file")
    map_args(sp)
    sp.add_argument("--json", action="store_true", help="machine-readable output")
    sp.add_argument("--csv", metavar="PATH", help="also write the region table as CSV")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("regions", help="region table of a map file as CSV")
    map_args(sp)
    sp.set_defaults(func=cmd_regions)

    sp = sub.add_parser("simulate", help="run a guidance simulation, write CSV and PGM heatmaps")
    sp.add_argument("config", nargs="?", help="JSON experiment config (default: built-in scene)")
    sp.add_argument("--out", default="attnguide_out", help="output directory")
    sp.add_argument("--metric", help="override the loss metrics")
    sp.add_argument("--seed", type=int, help="override the seed")
    sp.add_argument("--heatmap-every", type=int, help="write heatmaps every N steps")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("gradcheck", help="analytic vs central-difference gradients on random stacks")
    sp.add_argument("--seeds", type=int, default=100)
    sp.add_argument("--start", type=int, default=0, help="first seed")
    sp.add_argument("--tol", type=float, default=1e-5, help="relative error tolerance")
    sp.add_argument("--eps", type=float, default=1e-6, help="finite-difference step")
    sp.add_argument("--metric", default="euc")
    sp.add_argument("--corrupt", action="store_true", help="debug: perturb the analytic gradient")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("compare", help="final aggregation metrics per seed for several loss metrics")
    sp.add_argument("--metrics", default="euc,cos")
    sp.add_argument("--seeds", type=int, default=16)
    sp.add_argument("--start", type=int, default=0, help="first seed")
    sp.add_argument("--out", help="write the CSV here instead of stdout")
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    for name in ("seeds", "heatmap_every"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            sys.stderr.write(f"attnguide: error: --{name.replace('_', '-')} must be >= 1\n")
            return EXIT_USAGE
    try:
        return args.func(args, out)
    except SimulationError as exc:
        sys.stderr.write(f"attnguide: simulation failed: {exc}\n")
        return EXIT_FAIL
    except (UsageError, AttnGuideError, OSError) as exc:
        sys.stderr.write(f"attnguide: error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
