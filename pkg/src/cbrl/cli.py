"""Command-line entry point: ``cbrl train | theory-bench | summarize``.

Set ``CBRL_LOG_LEVEL`` (e.g. ``INFO`` or ``DEBUG``) for more output.
"""

import argparse
import logging
import os
from pathlib import Path
import sys

import numpy as np

from .errors import CbrlError
from .experiment import (
    DEFAULT_CHECKPOINTS, ExperimentConfig, bench_check_names, format_summary,
    load_task_config, read_runs, run_experiment, run_theory_bench, summarize_runs,
)
from .policy import Task

log = logging.getLogger("cbrl")


def _int_list(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _resolve_inits(task, spec, config_path):
    """``P1``, ``P1,P3``, ``all`` or a path to a file of comma-separated values."""
    tc = load_task_config(task, config_path)
    if spec.lower() == "all":
        return dict(sorted(tc.presets.items()))
    names = [s.strip().upper() for s in spec.split(",")]
    if all(n in tc.presets for n in names):
        return {n: tc.presets[n] for n in names}
    path = Path(spec)
    if path.is_file():
        rows = np.atleast_2d(np.loadtxt(path, delimiter=",", ndmin=2))
        stem = path.stem
        if len(rows) == 1:
            return {stem: rows[0]}
        return {f"{stem}{i + 1}": row for i, row in enumerate(rows)}
    raise CbrlError(f"--init {spec!r} is neither a preset ({', '.join(sorted(tc.presets))}) nor a file")


def _cmd_train(args):
    task = Task.parse(args.task)
    tc = load_task_config(task, args.config)
    inits = _resolve_inits(task, args.init, args.config)
    seeds = list(range(args.first_seed, args.first_seed + args.seeds))
    config = ExperimentConfig(
        task=task, initial_variables=inits, seeds=seeds, episodes=args.episodes,
        learner=tc.learner, cost=tc.cost, output_dir=args.out,
        record_time=not args.no_clock)

    def progress(init, seed, hist):
        last = hist.returns[-1] if hist.returns else float("nan")
        log.info("%s seed %d done: final return %.2f", init, seed, last)

    report = run_experiment(config, progress=progress)
    if report.summary:
        print(format_summary(report.summary))
    print(f"wrote {len(report.paths)} run files and summary.csv to {args.out}")
    return 0


def _cmd_bench(args):
    if args.list:
        for name in bench_check_names():
            print(name)
        return 0
    results = run_theory_bench(seed=args.seed, inject_fault=args.inject_fault)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def _cmd_summarize(args):
    runs = read_runs(args.inp)
    if not runs:
        raise CbrlError(f"no run files in {args.inp}")
    rows = summarize_runs(runs, args.checkpoints)
    print(format_summary(rows))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="cbrl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="multi-seed training with CSV output")
    t.add_argument("--task", required=True, choices=[t.value for t in Task])
    t.add_argument("--init", default="P1",
                   help="preset name(s) such as P1 or P1,P2, 'all', or a CSV file of vectors")
    t.add_argument("--seeds", type=int, default=5, help="number of seeds")
    t.add_argument("--first-seed", type=int, default=0)
    t.add_argument("--episodes", type=int, default=500)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--config", type=Path, default=None,
                   help="task INI file; defaults to the bundled presets")
    t.add_argument("--no-clock", action="store_true",
                   help="record 0 seconds so reruns give byte-identical CSVs")
    t.set_defaults(func=_cmd_train)

    b = sub.add_parser("theory-bench", help="tabular operator and Q-learning checks")
    b.add_argument("--list", action="store_true", help="print check names and exit")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--inject-fault", action="store_true",
                   help="use a wrong discount in the contraction bound (must fail)")
    b.set_defaults(func=_cmd_bench)

    s = sub.add_parser("summarize", help="checkpoint table from run CSVs")
    s.add_argument("--in", dest="inp", type=Path, required=True)
    s.add_argument("--checkpoints", type=_int_list, default=list(DEFAULT_CHECKPOINTS))
    s.set_defaults(func=_cmd_summarize)
    return p


def main(argv=None):
    level = os.environ.get("CBRL_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CbrlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
