"""Multi-seed experiments, CSV output, checkpoint summaries and the theory bench.

Task settings live in one INI file per task (``cbrl/presets/<task>.ini``)
with three sections:

``[variables]``
    Named initial variable vectors, one comma-separated row per name.
``[cost]``
    ``q_diag`` (comma-separated) and ``rho``.
``[learner]``
    Any :class:`~cbrl.learner.LearnerConfig` field.
"""

from configparser import ConfigParser
import csv
from dataclasses import dataclass, field, fields
from importlib import resources
import logging
import math
from pathlib import Path
import time

import numpy as np

from . import tabular
from .errors import CbrlError, ConfigError, RangeError
from .learner import LearnerConfig, train
from .policy import CostConfig, Task, VariableVector, get_template

__all__ = [
    "TaskConfig",
    "ExperimentConfig",
    "RunRecord",
    "RunReport",
    "SummaryRow",
    "BenchCheck",
    "load_task_config",
    "run_experiment",
    "summarize_runs",
    "read_run_csv",
    "read_runs",
    "write_summary_csv",
    "format_summary",
    "run_theory_bench",
    "bench_check_names",
    "DEFAULT_CHECKPOINTS",
]

log = logging.getLogger(__name__)

DEFAULT_CHECKPOINTS = tuple(range(50, 501, 50))

_LEARNER_FIELDS = {f.name: f.type for f in fields(LearnerConfig)}


# -- configuration ----------------------------------------------------------------

@dataclass(frozen=True)
class TaskConfig:
    """Presets, cost and learner settings read from a task file."""

    task: Task
    presets: dict
    cost: CostConfig
    learner: LearnerConfig


def _floats(text):
    return [float(s) for s in text.replace("\n", ",").split(",") if s.strip()]


def _parse_learner(section):
    kwargs = {}
    for key, raw in section.items():
        if key not in _LEARNER_FIELDS:
            raise ConfigError(f"unknown learner setting {key!r}")
        kind = _LEARNER_FIELDS[key]
        if kind in (bool, "bool"):
            kwargs[key] = section.getboolean(key)
        elif kind in (int, "int"):
            kwargs[key] = int(raw)
        else:
            kwargs[key] = float(raw)
    return LearnerConfig(**kwargs)


def load_task_config(task, path=None):
    """Read a task's settings from ``path`` or from the bundled preset file.

    Raises
    ------
    ConfigError
        If the file is missing, malformed, or a preset has the wrong length.
    """
    task = Task.parse(task)
    parser = ConfigParser()
    if path is None:
        text = resources.files("cbrl.presets").joinpath(f"{task.value}.ini").read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        parser.read_string(text)
    except Exception as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    d = get_template(task.value).d
    presets = {}
    if parser.has_section("variables"):
        for name, row in parser.items("variables"):
            vals = _floats(row)
            if len(vals) != d:
                raise ConfigError(f"preset {name} has {len(vals)} values, {task.value} needs {d}")
            presets[name.upper()] = tuple(vals)
    n = get_template(task.value).n
    if parser.has_section("cost"):
        sec = parser["cost"]
        q = tuple(_floats(sec.get("q_diag", ",".join(["1"] * n))))
        if len(q) != n:
            raise ConfigError(f"q_diag needs {n} entries")
        cost = CostConfig(q, sec.getfloat("rho", 0.1))
    else:
        cost = CostConfig((1.0,) * n, 0.1)
    try:
        learner = _parse_learner(parser["learner"]) if parser.has_section("learner") else LearnerConfig()
    except CbrlError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad learner setting: {exc}") from None
    return TaskConfig(task, presets, cost, learner)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    ``initial_variables`` maps an initialization name (e.g. ``"P1"``) to its
    vector; every initialization is run with every seed.
    """

    task: Task
    initial_variables: dict
    seeds: tuple = (0, 1, 2, 3, 4)
    episodes: int = 500
    learner: LearnerConfig = None
    cost: CostConfig = None
    output_dir: Path = None
    record_time: bool = True

    def __post_init__(self):
        try:
            task = Task.parse(self.task)
        except (ValueError, CbrlError):
            raise ConfigError(f"unknown task {self.task!r}") from None
        object.__setattr__(self, "task", task)
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds:
            raise ConfigError("at least one seed is required")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds must be distinct")
        object.__setattr__(self, "seeds", seeds)
        if self.episodes < 0:
            raise ConfigError("episodes must be nonnegative")
        if not self.initial_variables:
            raise ConfigError("no initial variables given")
        inits = {}
        for name, vals in self.initial_variables.items():
            try:
                inits[str(name)] = VariableVector(task.value, vals)
            except CbrlError as exc:
                raise ConfigError(f"initialization {name}: {exc}") from None
        object.__setattr__(self, "initial_variables", inits)
        if self.output_dir is not None:
            object.__setattr__(self, "output_dir", Path(self.output_dir))
        if self.learner is None or self.cost is None:
            defaults = load_task_config(task)
            if self.learner is None:
                object.__setattr__(self, "learner", defaults.learner)
            if self.cost is None:
                object.__setattr__(self, "cost", defaults.cost)

    @classmethod
    def from_presets(cls, task, names=("P1", "P2", "P3", "P4"), **kwargs):
        """Build a config from named presets of the bundled task file."""
        tc = load_task_config(task)
        missing = [n for n in names if n.upper() not in tc.presets]
        if missing:
            raise ConfigError(f"unknown presets {missing}; have {sorted(tc.presets)}")
        kwargs.setdefault("learner", tc.learner)
        kwargs.setdefault("cost", tc.cost)
        inits = {n.upper(): tc.presets[n.upper()] for n in names}
        return cls(task=tc.task, initial_variables=inits, **kwargs)


# -- reports ----------------------------------------------------------------------

@dataclass
class RunRecord:
    """Per-episode data of one (initialization, seed) run; episodes are 1-based."""

    task: Task
    init: str
    seed: int
    returns: np.ndarray
    seconds: np.ndarray
    etas: np.ndarray
    variables: np.ndarray  # (episodes, d)

    @property
    def episodes(self):
        return len(self.returns)

    def rows(self):
        for i in range(self.episodes):
            yield [i + 1, float(self.returns[i]), float(self.seconds[i]), float(self.etas[i]),
                   *map(float, self.variables[i])]


@dataclass(frozen=True)
class SummaryRow:
    episode: int
    mean: float
    std: float


@dataclass
class RunReport:
    config: ExperimentConfig
    runs: list = field(default_factory=list)
    summary: list = field(default_factory=list)
    paths: list = field(default_factory=list)


def _csv_header(d):
    return ["episode", "return", "seconds", "eta"] + [f"v_{j}" for j in range(d)]


def run_filename(task, init, seed):
    return f"{Task.parse(task).value}_{init}_seed{seed}.csv"


def write_run_csv(record, path):
    d = get_template(record.task.value).d
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_csv_header(d))
        for row in record.rows():
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])


def read_run_csv(path, task=None):
    """Parse a per-seed CSV written by :func:`run_experiment`.

    ``task``, ``init`` and ``seed`` are recovered from the file name when it
    follows the ``<task>_<init>_seed<seed>.csv`` pattern.
    """
    path = Path(path)
    stem = path.stem
    init, seed = "", 0
    parts = stem.split("_")
    if task is None:
        task = Task.parse(parts[0])
    else:
        task = Task.parse(task)
    if len(parts) >= 3 and parts[-1].startswith("seed"):
        init, seed = "_".join(parts[1:-1]), int(parts[-1][4:])
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = get_template(task.value).d
        if header != _csv_header(d):
            raise ConfigError(f"{path}: unexpected header {header}")
        rows = [[float(x) for x in r] for r in reader]
    data = np.array(rows, dtype=float).reshape(-1, 4 + d)
    if not np.array_equal(data[:, 0], np.arange(1, len(data) + 1)):
        raise ConfigError(f"{path}: episodes are not numbered 1..N")
    return RunRecord(task, init, seed, data[:, 1], data[:, 2], data[:, 3], data[:, 4:])


def read_runs(directory):
    """All per-seed CSVs in ``directory`` (the summary file is skipped)."""
    paths = sorted(p for p in Path(directory).glob("*.csv") if p.name != "summary.csv")
    return [read_run_csv(p) for p in paths]


def summarize_runs(runs, checkpoints=DEFAULT_CHECKPOINTS):
    """Mean and population std of the return at each checkpoint episode.

    ``runs`` may hold :class:`RunRecord` or :class:`RunReport` objects; all
    runs of all reports are pooled. Values are rounded to two decimals.

    Raises
    ------
    RangeError
        If a checkpoint is not covered by every run.
    """
    records = []
    for r in runs:
        records.extend(r.runs if isinstance(r, RunReport) else [r])
    if not records:
        return []
    shortest = min(rec.episodes for rec in records)
    table = []
    for ep in checkpoints:
        ep = int(ep)
        if ep < 1 or ep > shortest:
            raise RangeError(f"checkpoint {ep} outside recorded episodes 1..{shortest}")
        vals = np.array([rec.returns[ep - 1] for rec in records])
        table.append(SummaryRow(ep, round(float(vals.mean()), 2), round(float(vals.std()), 2)))
    return table


def write_summary_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "mean", "std"])
        for r in rows:
            w.writerow([r.episode, f"{r.mean:.2f}", f"{r.std:.2f}"])


def format_summary(rows):
    """Plain-text table in the 'Episode / Mean / Std. Dev.' layout."""
    lines = [f"{'Episode':>8} {'Mean':>10} {'Std. Dev.':>10}"]
    lines += [f"{r.episode:>8d} {r.mean:>10.2f} {r.std:>10.2f}" for r in rows]
    return "\n".join(lines)


def run_experiment(config, checkpoints=None, progress=None):
    """Train every (initialization, seed) pair and write the CSV files.

    Parameters
    ----------
    config : ExperimentConfig
    checkpoints : sequence of int, optional
        Episodes for the summary; defaults to every 50th episode that was
        run.
    progress : callable, optional
        Called as ``progress(init, seed, history)`` after each run.

    Returns
    -------
    RunReport
    """
    if checkpoints is None:
        checkpoints = [e for e in DEFAULT_CHECKPOINTS if e <= config.episodes]
        checkpoints += [e for e in range(550, config.episodes + 1, 50)]
    out = config.output_dir
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    clock = time.monotonic if config.record_time else (lambda: 0.0)
    d = get_template(config.task.value).d
    learner = config.learner.replace(episodes=config.episodes)
    report = RunReport(config)
    for init, v0 in config.initial_variables.items():
        for seed in config.seeds:
            log.info("training %s from %s with seed %d", config.task.value, init, seed)
            hist = train(config.task, v0, learner, seed, cost=config.cost, clock=clock)
            rec = RunRecord(
                config.task, init, seed,
                np.array(hist.returns, dtype=float),
                np.array(hist.seconds, dtype=float),
                np.array(hist.etas, dtype=float),
                np.array(hist.variables, dtype=float).reshape(-1, d))
            report.runs.append(rec)
            if out is not None:
                path = out / run_filename(config.task, init, seed)
                write_run_csv(rec, path)
                report.paths.append(path)
            if progress is not None:
                progress(init, seed, hist)
    report.summary = summarize_runs([report], checkpoints) if config.episodes else []
    if out is not None:
        write_summary_csv(report.summary, out / "summary.csv")
    return report


# -- theory bench -----------------------------------------------------------------

@dataclass(frozen=True)
class BenchCheck:
    name: str
    passed: bool
    detail: str


def _check_contraction(rng, fault):
    worst = -math.inf
    for _ in range(100):
        S, U = rng.integers(2, 7), rng.integers(1, 4)
        mdp = tabular.random_mdp(S, U, rng.uniform(0.1, 0.99), rng)
        ps = tabular.PolicySet(rng.integers(0, U, size=(rng.integers(1, 6), S)))
        q1 = rng.normal(size=(S, len(ps))) * 10
        q2 = rng.normal(size=(S, len(ps))) * 10
        lhs = np.max(np.abs(tabular.cbrl_operator_apply(mdp, ps, q1)
                            - tabular.cbrl_operator_apply(mdp, ps, q2)))
        g = mdp.gamma * (0.1 if fault else 1.0)
        # a little slack for rounding in the two operator evaluations
        worst = max(worst, lhs - g * np.max(np.abs(q1 - q2)) - 1e-12)
    return worst <= 0, f"max violation {worst:.3e}"


def _optimal_policy_set(mdp, rng, extra=4):
    opt = tabular.greedy_policy(tabular.bellman_optimal(mdp, 1e-13))
    others = rng.integers(0, mdp.n_actions, size=(extra, mdp.n_states))
    F = np.vstack([others[: extra // 2], opt, others[extra // 2:]])
    return tabular.PolicySet(F)


def _check_optimality(rng, fault):
    tol = 1e-8
    worst = 0.0
    for _ in range(20):
        mdp = tabular.random_mdp(rng.integers(2, 7), rng.integers(2, 4), rng.uniform(0.5, 0.95), rng)
        v_star = tabular.bellman_optimal(mdp, 1e-13).max(axis=1)
        q = tabular.cbrl_fixed_point(mdp, _optimal_policy_set(mdp, rng), tol).q
        worst = max(worst, float(np.max(np.abs(q.max(axis=1) - v_star))))
    return worst <= 10 * tol, f"max |max_v q - V*| = {worst:.3e}"


def _check_rate(rng, fault):
    worst = -math.inf
    for _ in range(20):
        mdp = tabular.random_mdp(rng.integers(2, 7), rng.integers(1, 4), rng.uniform(0.5, 0.95), rng)
        ps = tabular.PolicySet(rng.integers(0, mdp.n_actions, size=(3, mdp.n_states)))
        q0 = rng.normal(size=(mdp.n_states, 3)) * 5
        res = tabular.cbrl_fixed_point(mdp, ps, 1e-13, q0=q0, keep_iterates=True)
        star = tabular.cbrl_fixed_point(mdp, ps, 1e-14, q0=res.q).q
        d0 = np.max(np.abs(q0 - star))
        for t, qt in enumerate(res.iterates):
            gap = np.max(np.abs(qt - star))
            worst = max(worst, gap - mdp.gamma ** t * d0 - 1e-11)
    return worst <= 0, f"max excess over gamma^t bound {worst:.3e}"


def _check_q_learning(rng, fault):
    P = np.zeros((2, 2, 2))
    P[:, 0, 0] = 1.0
    P[:, 1, 1] = 1.0
    mdp = tabular.TabularMdp(P, [[1.0, 0.0], [0.0, 1.0]], 0.5)
    ps = tabular.PolicySet(tabular.all_deterministic_policies(2, 2))
    star = tabular.cbrl_fixed_point(mdp, ps, 1e-12).q
    q = tabular.cbrl_q_learning(mdp, ps, 10**6, rng)
    err = float(np.max(np.abs(q - star)))
    return err <= 1e-2, f"sup-norm error {err:.3e} after 1e6 steps"


def _check_refinement(rng, fault):
    mdp = tabular.random_mdp(6, 2, 0.9, rng)
    full = tabular.all_deterministic_policies(6, 2)
    order = rng.permutation(len(full))
    sets = [tabular.PolicySet(full[order[:k]]) for k in (1, 4, 16, 64)]
    gaps = tabular.refinement_experiment(mdp, sets, tol=1e-11)
    ok = all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:])) and gaps[-1] <= 1e-8
    return ok, "gaps " + ", ".join(f"{g:.2e}" for g in gaps)


_CHECKS = {
    "contraction": _check_contraction,
    "optimality": _check_optimality,
    "geometric_rate": _check_rate,
    "q_learning": _check_q_learning,
    "refinement": _check_refinement,
}


def bench_check_names():
    return list(_CHECKS)


def run_theory_bench(seed=0, inject_fault=False, only=None):
    """Run the tabular invariant suite on random instances.

    ``inject_fault`` shrinks the discount used by the contraction bound so
    that the check must fail.

    Returns
    -------
    list of BenchCheck
    """
    names = list(_CHECKS) if only is None else list(only)
    seqs = np.random.SeedSequence(seed).spawn(len(_CHECKS))
    by_name = dict(zip(_CHECKS, seqs))
    results = []
    for name in names:
        if name not in _CHECKS:
            raise ConfigError(f"unknown check {name!r}")
        passed, detail = _CHECKS[name](np.random.default_rng(by_name[name]), inject_fault)
        results.append(BenchCheck(name, bool(passed), detail))
    return results
