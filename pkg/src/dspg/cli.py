"""Command-line experiment harness.

Subcommands::

    dspg run      --config FILE [--out DIR] [--verbose]
    dspg sweep    --config FILE [--out DIR] [--verbose] [--parallel N]
    dspg diagnose --config FILE [--out DIR]

``run`` simulates trial 0 of the first grid cell, ``sweep`` every trial of
every ``(c, p_c)`` cell, and ``diagnose`` tabulates estimator moments. All
outputs are CSV files with a one-line header.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, MAX_TOTAL_TRIALS, load_config
from .consensus import run_consensus, simulate_consensus_batch
from .errors import ConfigError
from .estimator import (
    MAX_ENUMERATION_DIM,
    enumerate_diagnostics,
    sampled_diagnostics,
    variance_bound,
)
from .network import write_delivery_csv
from .runtime import BatchResult, run_simulation, simulate_dspg_batch

log = logging.getLogger("dspg")

SUMMARY_COLUMNS = ("c", "p_c", "mean_final_norm", "std_final_norm", "diverged_count", "trials")
EXIT_OK, EXIT_ALL_DIVERGED, EXIT_USAGE = 0, 1, 2


def _fmt(v) -> str:
    return repr(float(v))


@dataclass(frozen=True)
class TrialOutcome:
    trial: int
    seed: int
    c: float
    p_c: float
    final: np.ndarray
    status: str

    @property
    def final_norm(self) -> float:
        return float(np.linalg.norm(self.final))


@dataclass(frozen=True)
class SummaryRow:
    c: float
    p_c: float
    mean_final_norm: float
    std_final_norm: float
    diverged_count: int
    trials: int


@dataclass
class SweepSummary:
    rows: list[SummaryRow]
    outcomes: list[TrialOutcome]

    @property
    def exit_code(self) -> int:
        return EXIT_ALL_DIVERGED if any(r.diverged_count == r.trials for r in self.rows) else EXIT_OK

    def row(self, c: float, p_c: float) -> SummaryRow:
        for r in self.rows:
            if r.c == c and r.p_c == p_c:
                return r
        raise KeyError((c, p_c))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_COLUMNS)
            for r in self.rows:
                w.writerow(
                    [_fmt(r.c), _fmt(r.p_c), _fmt(r.mean_final_norm), _fmt(r.std_final_norm),
                     r.diverged_count, r.trials]
                )

    def write_finals(self, path) -> None:
        d = len(self.outcomes[0].final) if self.outcomes else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", "seed", "c", "p_c", "final_norm", "status"] + [f"x_{i}" for i in range(d)])
            for o in self.outcomes:
                w.writerow(
                    [o.trial, o.seed, _fmt(o.c), _fmt(o.p_c), _fmt(o.final_norm), o.status]
                    + [_fmt(v) for v in o.final]
                )


def summarize(config: ExperimentConfig, outcomes: list[TrialOutcome]) -> SweepSummary:
    """One row per cell; diverged trials are counted but never averaged."""
    by_cell: dict[tuple[float, float], list[TrialOutcome]] = {}
    for o in outcomes:
        by_cell.setdefault((o.c, o.p_c), []).append(o)
    rows = []
    for c, p in config.cells:
        cell = by_cell.get((c, p), [])
        norms = np.array([o.final_norm for o in cell if o.status == "ok"])
        mean = float(norms.mean()) if norms.size else math.nan
        std = float(norms.std(ddof=1)) if norms.size > 1 else (0.0 if norms.size else math.nan)
        rows.append(SummaryRow(c, p, mean, std, len(cell) - norms.size, len(cell)))
    return SweepSummary(rows, outcomes)


def _jobs(config: ExperimentConfig) -> list[tuple[int, int, float, float]]:
    return [
        (trial, config.trial_seed(trial, c, p), c, p)
        for c, p in config.cells
        for trial in range(config.trials)
    ]


def simulate_jobs(config: ExperimentConfig, jobs, record: bool = False) -> BatchResult:
    """Run a batch of ``(trial, seed, c, p_c)`` jobs in one vectorised pass."""
    seeds = [j[1] for j in jobs]
    c = np.array([j[2] for j in jobs])
    p = np.array([j[3] for j in jobs])
    common = dict(
        activation=config.activation_policy(),
        channels=config.channel_config(float(p[0])),
        iterations=config.iterations,
        x0=config.init,
        init_range=(config.init_low, config.init_high),
        stride=config.subsample_stride,
        record=record,
        guard=config.divergence_guard,
    )
    if config.mode == "consensus":
        return simulate_consensus_batch(
            config.objective_set(), seeds, c, p, config.step_schedule(), shares=config.shares, **common
        )
    return simulate_dspg_batch(config.objective_set(), seeds, c, p, config.step_schedule(), **common)


def _run_batch(args):
    config, jobs, record = args
    res = simulate_jobs(config, jobs, record)
    outcomes = [
        TrialOutcome(trial, seed, c, p, res.final[k].copy(), res.status[k])
        for k, (trial, seed, c, p) in enumerate(jobs)
    ]
    return outcomes, res.traces


def check_writable(out_dir) -> Path:
    """Create ``out_dir`` if needed and prove a file can be written there."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=out, prefix=".probe"):
            pass
    except OSError as exc:
        raise OSError(f"output path {str(out)!r} is not writable: {exc}") from exc
    return out


def run_sweep(
    config: ExperimentConfig,
    out_dir=None,
    parallel: int = 1,
    verbose: bool | None = None,
) -> SweepSummary:
    """Run every trial of every grid cell and aggregate per cell.

    Jobs are split into batches of at most ``config.batch_rows`` trials; a
    trial's result does not depend on the batch it lands in. With ``out_dir``
    the summary goes to ``summary.csv``; with ``verbose`` also the per-trial
    finals and one subsampled trace per trial.
    """
    if config.mode == "diagnostics":
        raise ValueError("diagnostics configs are run with the diagnose subcommand")
    if config.total_trials > MAX_TOTAL_TRIALS:
        raise ValueError(f"grid has {config.total_trials} trials; at most {MAX_TOTAL_TRIALS} are allowed")
    verbose = config.verbose if verbose is None else verbose
    out = check_writable(out_dir) if out_dir is not None else None
    record = verbose and out is not None
    jobs = _jobs(config)
    size = config.batch_rows
    if parallel > 1:
        size = max(1, min(size, math.ceil(len(jobs) / parallel)))
    batches = [(config, jobs[k:k + size], record) for k in range(0, len(jobs), size)]
    log.info("sweep: %d cells, %d trials, %d batches", len(config.cells), len(jobs), len(batches))

    if parallel > 1 and len(batches) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_batch, batches))
    else:
        results = [_run_batch(b) for b in batches]
    outcomes = [o for res, _ in results for o in res]
    summary = summarize(config, outcomes)

    if out is not None:
        summary.write_csv(out / "summary.csv")
        if verbose:
            summary.write_finals(out / "finals.csv")
            trace_dir = out / "traces"
            trace_dir.mkdir(exist_ok=True)
            for res, traces in results:
                for o, tr in zip(res, traces):
                    tr.to_csv(trace_dir / f"trace_c{o.c!r}_p{o.p_c!r}_t{o.trial}.csv")
    return summary


def run_single(config: ExperimentConfig, out_dir=None, verbose: bool | None = None):
    """Trial 0 of the first cell, with its full trace."""
    verbose = config.verbose if verbose is None else verbose
    out = check_writable(out_dir) if out_dir is not None else None
    cfg = config.replace(verbose=verbose)
    result = run_consensus(cfg) if config.mode == "consensus" else run_simulation(cfg)
    if out is not None:
        result.trace.to_csv(out / "trace.csv")
        outcome = TrialOutcome(0, result.seed, config.c[0], config.p_c[0], result.final, result.status)
        summary = summarize(config.replace(c=config.c[:1], p_c=config.p_c[:1], trials=1), [outcome])
        summary.write_csv(out / "summary.csv")
        summary.write_finals(out / "finals.csv")
        if verbose and result.deliveries is not None:
            write_delivery_csv(out / "deliveries.csv", result.deliveries)
    return result


DIAG_COLUMNS = (
    "point", "agent", "c", "enumerated_mean", "true_gradient", "bias", "variance",
    "variance_bound", "sampled_mean", "sampled_se", "samples",
)


def probe_points(config: ExperimentConfig) -> np.ndarray:
    """``config.init`` when given, else ``diag_points`` uniform draws on ``[-r, r]^d``."""
    if config.init is not None:
        return np.array([config.init], dtype=float)
    rng = np.random.default_rng(np.random.SeedSequence(config.master_seed, spawn_key=(0,)))
    return rng.uniform(-config.diag_radius, config.diag_radius, (config.diag_points, config.d))


def run_diagnostics(config: ExperimentConfig, out_dir=None) -> list[dict]:
    """Estimator moments at every probe point, agent and ``c``.

    Enumerated columns are left empty when ``d`` exceeds the enumeration
    limit; the sampled columns are always filled.
    """
    out = check_writable(out_dir) if out_dir is not None else None
    obj = config.objective_set()
    points = probe_points(config)
    rows = []
    for k, x in enumerate(points):
        for ci, c in enumerate(config.c):
            for i in range(obj.d):
                row = {"point": k, "agent": i, "c": c}
                row.update({f"x_{j}": v for j, v in enumerate(x)})
                if obj.d <= MAX_ENUMERATION_DIM:
                    ex = enumerate_diagnostics(obj, i, x, c)
                    row.update(
                        enumerated_mean=ex.mean, true_gradient=ex.true_gradient,
                        bias=ex.bias, variance=ex.variance,
                    )
                else:
                    row.update(enumerated_mean=None, bias=None, variance=None,
                               true_gradient=float(obj.analytic_gradient(i, x)[i]))
                row["variance_bound"] = variance_bound(obj, i, x)
                rng = np.random.default_rng(
                    np.random.SeedSequence(config.master_seed, spawn_key=(1, k, ci, i))
                )
                sm = sampled_diagnostics(obj, i, x, c, rng, config.diag_samples)
                row.update(sampled_mean=sm.mean, sampled_se=sm.standard_error, samples=sm.samples)
                rows.append(row)
    if out is not None:
        columns = list(DIAG_COLUMNS) + [f"x_{j}" for j in range(obj.d)]
        with open(out / "diagnostics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow(["" if r[k] is None else (_fmt(r[k]) if isinstance(r[k], float) else r[k])
                            for k in columns])
    return rows


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dspg", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("run", "simulate one trial of the first grid cell"),
        ("sweep", "run every trial of the c x p_c grid"),
        ("diagnose", "tabulate estimator bias and variance"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="TOML experiment config")
        p.add_argument("--out", default=None, help="output directory (default: output_path)")
        p.add_argument("--verbose", action="store_true", help="also write per-trial files")
        p.add_argument("--parallel", type=int, default=1, metavar="N", help="worker processes")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = args.out or config.output_path
    verbose = args.verbose or config.verbose
    if args.parallel < 1:
        print("--parallel must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    want_diag = args.command == "diagnose"
    if want_diag != (config.mode == "diagnostics"):
        print(f"subcommand {args.command!r} does not match config mode {config.mode!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if want_diag:
            run_diagnostics(config, out)
            return EXIT_OK
        if args.command == "run":
            result = run_single(config, out, verbose)
            return EXIT_ALL_DIVERGED if result.status == "diverged" else EXIT_OK
        summary = run_sweep(config, out, args.parallel, verbose)
    except OSError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    for r in summary.rows:
        if r.diverged_count:
            log.warning("c=%s p_c=%s: %d of %d trials diverged", r.c, r.p_c, r.diverged_count, r.trials)
    return summary.exit_code


if __name__ == "__main__":
    sys.exit(main())
