"""Replication harness and CLI for the variant comparison study.

One replication of a grid cell (setup, n, p) draws a training sample and a
test covariate sample, fits every requested variant on the *same* training
data, and scores each by the mean squared error of tau_hat against the known
tau on the test points (paired design).  Ratio summaries are geometric means
of per-replication MSE ratios with percentile-bootstrap confidence bands.

Seed derivation is a pure function of the grid position: every purpose-level
seed comes from

    SeedSequence(base_seed, spawn_key=(setup_code, n, p, rep, purpose))

with setup codes A=0..D=3 and purposes TRAIN=0, TEST=1, NUISANCE=2,
FOREST=3.  The forest seed is shared by all variants and honesty modes of a
replication so that paired variants see identical tree subsamples.

CLI exit codes: 0 ok, 1 configuration error, 2 runtime error.  By default
the runtime_ms column is written as 0.0 so that reruns are byte-identical;
pass --timings to record wall-clock fit times instead.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dgp import SETUPS, DgpSpec, generate
from .exceptions import HteForestError
from .forest import VARIANTS, HteForestConfig, fit_hte_forest, predict_tau
from .nuisance import (CENTER_OUTCOME, CENTER_TREATMENT, NuisanceEstimates,
                       RegressionForestConfig, estimate_m_hat, estimate_pi_hat)

SETUP_CODES = {"A": 0, "B": 1, "C": 2, "D": 3}
TRAIN_PURPOSE = 0
TEST_PURPOSE = 1
NUISANCE_PURPOSE = 2
FOREST_PURPOSE = 3

RESULT_HEADER = ["setup", "n", "p", "variant", "honest", "rep", "seed",
                 "mse", "runtime_ms"]
SUMMARY_HEADER = ["comparison", "setup", "n", "p", "honest", "ratio",
                  "ci_low", "ci_high"]

THREADS_ENV_VAR = "HTEFOREST_THREADS"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


@dataclass
class ExperimentGrid:
    setups: tuple = ("A", "B", "C", "D")
    n_values: tuple = (800,)
    p_values: tuple = (10,)
    variants: tuple = VARIANTS
    honest_modes: tuple = (False,)
    reps: int = 20
    test_n: int = 1000
    base_seed: int = 0
    n_trees: int = 500
    nuisance_trees: int = 500
    min_per_arm: int = 7
    pi_policy: str = "auto"     # "auto" | "estimate" | float literal

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.test_n < 1:
            raise ValueError("test_n must be >= 1")
        for s in self.setups:
            if s not in SETUPS:
                raise ValueError(f"unknown setup {s!r}")
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r}")

    def cells(self):
        for setup in self.setups:
            for n in self.n_values:
                for p in self.p_values:
                    yield setup, n, p


@dataclass
class ReplicationResult:
    setup: str
    n: int
    p: int
    variant: str
    honest: bool
    rep: int
    seed: int
    mse: float
    runtime_ms: float


@dataclass
class SummaryRow:
    comparison: str
    setup: str
    n: int
    p: int
    honest: bool
    ratio: float
    ci_low: float
    ci_high: float


def derive_seed(base_seed: int, setup: str, n: int, p: int, rep: int,
                purpose: int) -> int:
    """Purpose-level seed for one replication of one grid cell."""
    ss = np.random.SeedSequence(
        base_seed, spawn_key=(SETUP_CODES[setup], n, p, rep, purpose))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def resolve_pi_known(pi_policy, setup: str) -> float | None:
    """Translate the propensity policy into a known constant or None.

    "auto" centers by the design probability 0.5 on the randomized setup B
    and estimates propensities elsewhere; "estimate" always estimates; a
    float forces that constant."""
    if pi_policy == "auto":
        return 0.5 if setup == "B" else None
    if pi_policy == "estimate":
        return None
    return float(pi_policy)


def mse_against_truth(tau_hat, true_tau) -> float:
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    true_tau = np.asarray(true_tau, dtype=np.float64)
    return float(np.mean((tau_hat - true_tau) ** 2))


def run_replication(grid: ExperimentGrid, setup: str, n: int, p: int,
                    rep: int) -> list[ReplicationResult]:
    """Fit every requested variant/honesty mode on one shared dataset."""
    train_seed = derive_seed(grid.base_seed, setup, n, p, rep, TRAIN_PURPOSE)
    test_seed = derive_seed(grid.base_seed, setup, n, p, rep, TEST_PURPOSE)
    nuis_seed = derive_seed(grid.base_seed, setup, n, p, rep, NUISANCE_PURPOSE)
    forest_seed = derive_seed(grid.base_seed, setup, n, p, rep, FOREST_PURPOSE)

    sample = generate(DgpSpec(setup=setup, n=n, p=p, seed=train_seed))
    test = generate(DgpSpec(setup=setup, n=grid.test_n, p=p, seed=test_seed))
    pi_known = resolve_pi_known(grid.pi_policy, setup)
    nuis_cfg = RegressionForestConfig(n_trees=grid.nuisance_trees)

    # shared nuisance estimates: all variants of a replication center with
    # the same m_hat / pi_hat vectors
    need_m = any(v in CENTER_OUTCOME for v in grid.variants)
    need_pi = (any(v in CENTER_TREATMENT for v in grid.variants)
               and pi_known is None)
    m_vec = None
    pi_vec = None
    if need_m:
        m_vec, _ = estimate_m_hat(sample.X, sample.y, nuis_cfg, nuis_seed)
    if need_pi:
        pi_vec, _ = estimate_pi_hat(sample.X, sample.w, nuis_cfg, nuis_seed)

    results = []
    zeros = np.zeros(n)
    for honest in grid.honest_modes:
        for variant in grid.variants:
            if variant in CENTER_TREATMENT:
                if pi_known is not None:
                    pi_hat = np.full(n, pi_known)
                    pi_mode = "known"
                else:
                    pi_hat = pi_vec
                    pi_mode = "estimated"
            else:
                pi_hat = zeros
                pi_mode = "none"
            m_hat = m_vec if variant in CENTER_OUTCOME else zeros
            nuisance = NuisanceEstimates(m_hat=m_hat, pi_hat=pi_hat,
                                         pi_mode=pi_mode)
            cfg = HteForestConfig(variant=variant, n_trees=grid.n_trees,
                                  min_per_arm=grid.min_per_arm,
                                  honest=honest, seed=forest_seed)
            start = time.perf_counter()
            try:
                forest = fit_hte_forest(sample, cfg, nuisance=nuisance)
                tau_hat = predict_tau(forest, test.X)
                mse = mse_against_truth(tau_hat, test.true_tau)
            except HteForestError as exc:
                print(f"warning: fit failed for {variant} "
                      f"(setup={setup}, n={n}, p={p}, rep={rep}): {exc}",
                      file=sys.stderr)
                mse = float("nan")
            runtime_ms = (time.perf_counter() - start) * 1e3
            results.append(ReplicationResult(
                setup=setup, n=n, p=p, variant=variant, honest=honest,
                rep=rep, seed=train_seed, mse=mse, runtime_ms=runtime_ms))
    return results


def _replication_job(args):
    grid_kwargs, setup, n, p, rep = args
    grid = ExperimentGrid(**grid_kwargs)
    return run_replication(grid, setup, n, p, rep)


def run_grid(grid: ExperimentGrid, threads: int = 1,
             progress=None) -> list[ReplicationResult]:
    """Run all replications of all cells in deterministic grid order.

    Replications are independent; with threads > 1 they run in worker
    processes, and results are still collected in grid order.
    """
    jobs = [(setup, n, p, rep)
            for setup, n, p in grid.cells() for rep in range(grid.reps)]
    results: list[ReplicationResult] = []
    if threads <= 1:
        for setup, n, p, rep in jobs:
            results.extend(run_replication(grid, setup, n, p, rep))
            if progress is not None:
                progress(setup, n, p, rep)
    else:
        grid_kwargs = grid.__dict__.copy()
        packed = [(grid_kwargs, *job) for job in jobs]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for job, rows in zip(jobs, pool.map(_replication_job, packed)):
                results.extend(rows)
                if progress is not None:
                    progress(*job)
    return results


def estimate_grid_runtime(grid: ExperimentGrid, stream=None) -> float:
    """Measure one replication per cell and extrapolate linearly in reps.

    Returns the estimated total seconds for the full grid and prints a
    per-cell table to `stream` (stderr by default)."""
    stream = stream if stream is not None else sys.stderr
    total = 0.0
    for setup, n, p in grid.cells():
        start = time.perf_counter()
        run_replication(grid, setup, n, p, 0)
        per_rep = time.perf_counter() - start
        cell_total = per_rep * grid.reps
        total += cell_total
        print(f"cell setup={setup} n={n} p={p}: {per_rep:.2f} s/rep, "
              f"estimated {cell_total:.1f} s for {grid.reps} reps",
              file=stream)
    print(f"estimated total: {total:.1f} s", file=stream)
    return total


def summarize_ratios(results, pairs, boot_samples: int = 2000,
                     boot_seed: int = 2025) -> list[SummaryRow]:
    """Per-cell paired geometric-mean MSE ratios with bootstrap bands.

    For each (setup, n, p, honest) cell and pair (a, b), the estimate is
    exp(mean over reps of log(mse_a / mse_b)); the confidence band is a
    percentile bootstrap over replications.  Replications missing either side
    (or with non-finite mse) are dropped with a warning.
    """
    by_key = {}
    for r in results:
        by_key.setdefault((r.setup, r.n, r.p, r.honest, r.variant), {})[r.rep] = r.mse
    cells = sorted({(r.setup, r.n, r.p, r.honest) for r in results})
    rows = []
    rng = np.random.default_rng(boot_seed)
    for setup, n, p, honest in cells:
        for a, b in pairs:
            da = by_key.get((setup, n, p, honest, a))
            db = by_key.get((setup, n, p, honest, b))
            if da is None or db is None:
                continue
            reps = sorted(set(da) & set(db))
            logr = []
            for rep in reps:
                ma, mb = da[rep], db[rep]
                if np.isfinite(ma) and np.isfinite(mb) and ma > 0 and mb > 0:
                    logr.append(np.log(ma / mb))
                else:
                    print(f"warning: dropping unpaired/invalid rep {rep} for "
                          f"{a}:{b} in cell ({setup},{n},{p})", file=sys.stderr)
            if not logr:
                continue
            logr = np.asarray(logr)
            ratio = float(np.exp(logr.mean()))
            idx = rng.integers(0, logr.size, size=(boot_samples, logr.size))
            boot = np.exp(logr[idx].mean(axis=1))
            ci_low = float(np.percentile(boot, 2.5))
            ci_high = float(np.percentile(boot, 97.5))
            rows.append(SummaryRow(
                comparison=f"{a}:{b}", setup=setup, n=n, p=p, honest=honest,
                ratio=ratio, ci_low=min(ci_low, ratio),
                ci_high=max(ci_high, ratio)))
    return rows


def write_results_csv(results, path_or_file, timings: bool = True) -> None:
    def emit(fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_HEADER)
        for r in results:
            writer.writerow([r.setup, r.n, r.p, r.variant,
                             "true" if r.honest else "false", r.rep, r.seed,
                             repr(r.mse),
                             repr(r.runtime_ms if timings else 0.0)])
    if hasattr(path_or_file, "write"):
        emit(path_or_file)
    else:
        with open(path_or_file, "w", newline="", encoding="utf-8") as fh:
            emit(fh)


def read_results_csv(path) -> list[ReplicationResult]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RESULT_HEADER:
            raise ValueError(f"malformed results CSV: unexpected header {header}")
        out = []
        for line in reader:
            if len(line) != len(RESULT_HEADER):
                raise ValueError(f"malformed results CSV row: {line}")
            out.append(ReplicationResult(
                setup=line[0], n=int(line[1]), p=int(line[2]), variant=line[3],
                honest=line[4] == "true", rep=int(line[5]), seed=int(line[6]),
                mse=float(line[7]), runtime_ms=float(line[8])))
        return out


def write_summary_csv(rows, path_or_file) -> None:
    def emit(fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        for r in rows:
            writer.writerow([r.comparison, r.setup, r.n, r.p,
                             "true" if r.honest else "false",
                             repr(r.ratio), repr(r.ci_low), repr(r.ci_high)])
    if hasattr(path_or_file, "write"):
        emit(path_or_file)
    else:
        with open(path_or_file, "w", newline="", encoding="utf-8") as fh:
            emit(fh)


class _Parser(argparse.ArgumentParser):
    """argparse that reports configuration errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _parse_list(text, caster, valid=None, what="value"):
    items = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        val = caster(tok)
        if valid is not None and val not in valid:
            raise ValueError(f"unknown {what} {tok!r}")
        items.append(val)
    if not items:
        raise ValueError(f"no {what}s given")
    return tuple(items)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hteforest",
                     description="Treatment-effect forest benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run replications and write a results CSV")
    run.add_argument("--setup", default="A,B,C,D",
                     help="comma list of setups (A,B,C,D)")
    run.add_argument("--n", default="800", help="comma list of sample sizes")
    run.add_argument("--p", default="10", help="comma list of dimensions")
    run.add_argument("--variants", default="all",
                     help="comma list of variants (cf,mob,mobw,mobwy,mobcf) or 'all'")
    run.add_argument("--reps", type=int, default=20)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", required=True, help="output CSV path")
    run.add_argument("--trees", type=int, default=500)
    run.add_argument("--nuisance-trees", type=int, default=500)
    run.add_argument("--honest", choices=["true", "false", "both"],
                     default="false")
    run.add_argument("--test-n", type=int, default=1000)
    run.add_argument("--min-per-arm", type=int, default=7)
    run.add_argument("--threads", type=int, default=None,
                     help=f"worker processes (default ${THREADS_ENV_VAR} or 1)")
    run.add_argument("--pi-known", default="auto",
                     help="'auto' (0.5 on setup B, estimated elsewhere), "
                          "'estimate', or a constant in (0,1)")
    run.add_argument("--timings", action="store_true",
                     help="record wall-clock runtime_ms (breaks byte-identical reruns)")
    run.add_argument("--estimate-only", action="store_true",
                     help="measure one rep per cell and report the linear "
                          "runtime extrapolation instead of running the grid")

    summ = sub.add_parser("summarize", help="aggregate a results CSV into ratios")
    summ.add_argument("--in", dest="infile", required=True)
    summ.add_argument("--pairs", required=True,
                      help="comma list of variant pairs a:b")
    summ.add_argument("--out", required=True, help="output CSV path")
    summ.add_argument("--boot-samples", type=int, default=2000)
    summ.add_argument("--boot-seed", type=int, default=2025)
    return parser


def _grid_from_args(args) -> ExperimentGrid:
    setups = _parse_list(args.setup.upper(), str, valid=SETUPS, what="setup")
    n_values = _parse_list(args.n, int, what="sample size")
    p_values = _parse_list(args.p, int, what="dimension")
    if args.variants.strip().lower() == "all":
        variants = VARIANTS
    else:
        variants = _parse_list(args.variants.lower(), str, valid=VARIANTS,
                               what="variant")
    honest_modes = {"true": (True,), "false": (False,),
                    "both": (False, True)}[args.honest]
    pi_policy = args.pi_known
    if pi_policy not in ("auto", "estimate"):
        val = float(pi_policy)   # raises ValueError on junk
        if not 0.0 < val < 1.0:
            raise ValueError("--pi-known constant must lie in (0, 1)")
        pi_policy = val
    return ExperimentGrid(setups=setups, n_values=n_values, p_values=p_values,
                          variants=variants, honest_modes=honest_modes,
                          reps=args.reps, test_n=args.test_n,
                          base_seed=args.seed, n_trees=args.trees,
                          nuisance_trees=args.nuisance_trees,
                          min_per_arm=args.min_per_arm, pi_policy=pi_policy)


def _resolve_threads(arg_value) -> int:
    if arg_value is not None:
        return max(1, arg_value)
    env = os.environ.get(THREADS_ENV_VAR)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "run":
            try:
                grid = _grid_from_args(args)
            except ValueError as exc:
                print(f"hteforest: error: {exc}", file=sys.stderr)
                return EXIT_CONFIG
            try:
                out_fh = open(args.out, "w", newline="", encoding="utf-8")
            except OSError as exc:
                print(f"hteforest: error: cannot write {args.out}: {exc}",
                      file=sys.stderr)
                return EXIT_CONFIG
            with out_fh:
                if args.estimate_only:
                    estimate_grid_runtime(grid)
                    write_results_csv([], out_fh)
                    return EXIT_OK
                threads = _resolve_threads(args.threads)

                def progress(setup, n, p, rep):
                    print(f"done setup={setup} n={n} p={p} rep={rep}",
                          file=sys.stderr)

                results = run_grid(grid, threads=threads, progress=progress)
                write_results_csv(results, out_fh, timings=args.timings)
            return EXIT_OK
        # summarize
        try:
            pairs = []
            for tok in args.pairs.split(","):
                a, _, b = tok.strip().partition(":")
                if not a or not b or a not in VARIANTS or b not in VARIANTS:
                    raise ValueError(f"bad pair {tok!r}")
                pairs.append((a, b))
            if not pairs:
                raise ValueError("no pairs given")
        except ValueError as exc:
            print(f"hteforest: error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        results = read_results_csv(args.infile)
        rows = summarize_ratios(results, pairs,
                                boot_samples=args.boot_samples,
                                boot_seed=args.boot_seed)
        write_summary_csv(rows, args.out)
        return EXIT_OK
    except Exception as exc:   # runtime failures: IO, malformed CSV, fits
        print(f"hteforest: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(cli_main())
