"""Command-line interface: ``surrogate-sdr fit | simulate | sigma-u``.

Data files are CSV with a header row.  The first column is the response and
the remaining columns are covariates.  A covariate measured twice appears as
a pair of columns ``name_r1`` and ``name_r2``; the pair is averaged and, with
``--sigma-u replicates``, the error covariance of the average is estimated
from the replicate differences.  Unpaired covariates are treated as measured
without error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import warnings
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError, NonConvergenceError, NumericalDegeneracyError
from .estimators import (
    Method,
    SurrogateProblem,
    fit_clad,
    fit_il_lad,
    fit_il_save,
    fit_il_sir,
    fit_lad_moments,
)
from .evalmetrics import DIAG_TOL
from .matops import symmetrize
from .simlab import (
    default_threads,
    format_summary,
    load_scenarios,
    parse_method,
    run_scenario,
    write_summary_csv,
)
from .slices import DEFAULT_SLICES
from .sparse import fit_sclad

log = logging.getLogger("surrogate_sdr")

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_NONCONVERGENCE = 3
EXIT_DEGENERATE = 4

MISSING = {"", "na", "nan", "null", "none", "."}
REPLICATE_SUFFIXES = ("_r1", "_r2")


def package_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:  # pragma: no cover
        return "unknown"


# ---------------------------------------------------------------------------
# data ingestion
# ---------------------------------------------------------------------------


@dataclass
class DataTable:
    """Response, covariate blocks and bookkeeping from a CSV file."""

    response_name: str
    names: List[str]  # covariate names, replicate suffixes removed
    y: np.ndarray
    W1: np.ndarray  # first (or only) measurement
    W2: Optional[np.ndarray]  # second measurement; NaN columns where unreplicated
    replicated: np.ndarray  # bool per covariate
    n_dropped: int = 0
    error_free_columns: set = field(default_factory=set)

    @property
    def W(self) -> np.ndarray:
        """Averaged surrogate: mean of the replicates where available."""
        if self.W2 is None:
            return self.W1
        return np.where(self.replicated, 0.5 * (self.W1 + np.nan_to_num(self.W2)), self.W1)


def _parse_float(text: str) -> float:
    t = text.strip()
    if t.lower() in MISSING:
        return math.nan
    return float(t)


def read_table(path, error_free: Sequence[str] = ()) -> DataTable:
    """Read a CSV data file; rows with a missing entry are dropped."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InvalidArgumentError(f"cannot read {path}: {exc}") from None
    rows = [r for r in rows if any(c.strip() for c in r)]
    if len(rows) < 2:
        raise InvalidArgumentError(f"{path}: need a header row and at least one data row")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2:
        raise InvalidArgumentError(f"{path}: need a response column and at least one covariate")
    if len(set(header)) != len(header):
        raise InvalidArgumentError(f"{path}: duplicate column names")
    data = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise InvalidArgumentError(
                f"{path}: line {i} has {len(row)} fields, header has {len(header)}"
            )
        try:
            data[i - 2] = [_parse_float(c) for c in row]
        except ValueError:
            raise InvalidArgumentError(f"{path}: line {i} has a non-numeric entry") from None
    keep = ~np.isnan(data).any(axis=1)
    n_dropped = int((~keep).sum())
    data = data[keep]
    if n_dropped:
        log.warning("dropped %d row(s) with missing values", n_dropped)

    names: List[str] = []
    first, second = {}, {}
    for j, h in enumerate(header[1:], start=1):
        base, slot = h, None
        for k, suf in enumerate(REPLICATE_SUFFIXES):
            if h.endswith(suf) and len(h) > len(suf):
                base, slot = h[: -len(suf)], k
        if base not in first and base not in second:
            names.append(base)
        target = second if slot == 1 else first
        if base in target:
            raise InvalidArgumentError(f"{path}: column {h!r} duplicates covariate {base!r}")
        target[base] = j
    for base in names:
        if base not in first:
            raise InvalidArgumentError(f"{path}: {base}_r2 has no matching {base}_r1 column")
    replicated = np.array([b in second for b in names])
    W1 = data[:, [first[b] for b in names]]
    W2 = None
    if replicated.any():
        W2 = np.full_like(W1, np.nan)
        for k, b in enumerate(names):
            if b in second:
                W2[:, k] = data[:, second[b]]
    unknown = set(error_free) - set(names)
    if unknown:
        raise InvalidArgumentError(f"--error-free names unknown columns: {', '.join(sorted(unknown))}")
    ef = {names.index(b) for b in error_free}
    return DataTable(header[0], names, data[:, 0], W1, W2, replicated, n_dropped, ef)


def estimate_sigma_u(W1, W2, error_free_columns=()) -> np.ndarray:
    """Error covariance of the averaged surrogate ``(W1 + W2) / 2``.

    ``Sigma*_u = (2n)^{-1} sum (W1_i - W2_i)(W1_i - W2_i)'`` estimates the
    covariance of a single measurement; the average has half of it.  Rows and
    columns listed in ``error_free_columns`` are set to zero.
    """
    W1 = np.asarray(W1, dtype=float)
    W2 = np.asarray(W2, dtype=float)
    if W1.ndim != 2 or W1.shape != W2.shape:
        raise InvalidArgumentError(
            f"replicate blocks must have the same shape, got {W1.shape} and {W2.shape}"
        )
    n, p = W1.shape
    if n < p:
        warnings.warn(f"only {n} replicate pairs for {p} covariates; estimate is rank-deficient",
                      RuntimeWarning, stacklevel=2)
    D = W1 - W2
    sigma_star = D.T @ D / (2 * n)
    sigma_u = 0.5 * symmetrize(sigma_star)
    for j in error_free_columns:
        sigma_u[j, :] = 0.0
        sigma_u[:, j] = 0.0
    return sigma_u


def table_sigma_u(table: DataTable) -> np.ndarray:
    """Replicate-based error covariance; unreplicated covariates get zero rows."""
    if table.W2 is None:
        raise InvalidArgumentError("--sigma-u replicates needs *_r1 / *_r2 column pairs")
    zero = set(np.flatnonzero(~table.replicated).tolist()) | set(table.error_free_columns)
    W2 = np.where(table.replicated, table.W2, table.W1)
    return estimate_sigma_u(table.W1, W2, sorted(zero))


def read_matrix(path, p: int) -> np.ndarray:
    """A ``p x p`` numeric CSV; a non-numeric first row is taken as a header."""
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if any(c.strip() for c in r)]
    except OSError as exc:
        raise InvalidArgumentError(f"cannot read {path}: {exc}") from None
    try:
        A = np.array([[float(c) for c in r] for r in rows])
    except ValueError:
        try:
            A = np.array([[float(c) for c in r] for r in rows[1:]])
        except ValueError:
            raise InvalidArgumentError(f"{path}: non-numeric entry in sigma_u matrix") from None
    if A.shape != (p, p):
        raise InvalidArgumentError(f"{path}: sigma_u must be {p}x{p}, got {A.shape}")
    return A


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, Method):
        return obj.value
    if isinstance(obj, set):
        return sorted(_jsonable(v) for v in obj)
    return obj


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def _estimate_record(est) -> dict:
    return {
        "method": est.method_tag,
        "basis": est.basis.basis,
        "projection": est.projection,
        "objective_value": est.objective_value,
        "converged": est.converged,
        "iterations": est.iterations,
        "adjustment": est.adjustment,
        "diagnostics": est.diagnostics,
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


METHOD_CHOICES = ["lad", "clad", "il-lad", "il-sir", "il-save", "sclad"]


def _split_names(text: Optional[str]) -> List[str]:
    if not text:
        return []
    return [t.strip() for t in text.split(",") if t.strip()]


def cmd_fit(args) -> int:
    table = read_table(args.data, _split_names(args.error_free))
    p = len(table.names)
    if args.sigma_u == "replicates":
        sigma_u = table_sigma_u(table)
    elif args.sigma_u:
        sigma_u = read_matrix(args.sigma_u, p)
        for j in table.error_free_columns:
            sigma_u[j, :] = 0.0
            sigma_u[:, j] = 0.0
    else:
        sigma_u = np.zeros((p, p))
    method = parse_method(args.method)
    problem = SurrogateProblem(table.W, table.y, sigma_u, args.dim, args.slices, args.categorical)
    moments = problem.moments()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {
        "command": "fit",
        "data": str(args.data),
        "method": method.value,
        "dim": args.dim,
        "slices": args.slices,
        "categorical": args.categorical,
        "sigma_u_source": args.sigma_u or "zero",
        "error_free": sorted(table.names[j] for j in table.error_free_columns),
        "seed": args.seed,
        "diag_tol": args.diag_tol,
        "lambda_max": args.lambda_max,
        "grid_size": args.grid_size,
        "response": table.response_name,
        "covariates": table.names,
        "replicated": [table.names[j] for j in np.flatnonzero(table.replicated)],
        "n": problem.n,
        "n_dropped": table.n_dropped,
        "version": package_version(),
    }
    path = None
    if method is Method.LAD:
        est = fit_lad_moments(moments, problem.d)
    elif method is Method.CLAD:
        est = fit_clad(problem, moments=moments)
    elif method is Method.IL_LAD:
        est = fit_il_lad(problem, moments=moments)
    elif method is Method.IL_SIR:
        est = fit_il_sir(problem, moments=moments)
    elif method is Method.IL_SAVE:
        est = fit_il_save(problem, moments=moments)
    else:
        path = fit_sclad(problem, args.lambda_max, args.grid_size, args.diag_tol, moments=moments)
        est = path.selected

    record = {"config": config, "sigma_u": sigma_u, "estimate": _estimate_record(est)}
    if path is not None:
        record["path"] = {
            "lambdas": path.lambdas,
            "pic": path.pic_values,
            "support_sizes": path.support_sizes,
            "selected_index": path.selected_index,
            "selected_lambda": path.lambdas[path.selected_index],
            "support": [table.names[j] for j in sorted(path.support)],
            "support_indices": path.support,
            "failed": path.failed,
            "errors": path.errors,
        }
        with open(out / "path.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda", "pic", "support_size", "converged", "failed", "objective", "support"])
            for g, lam in enumerate(path.lambdas):
                e = path.estimates[g]
                supp = "" if e is None else ";".join(
                    table.names[j] for j in np.flatnonzero(np.diag(e.projection) > args.diag_tol))
                w.writerow([repr(float(lam)), repr(float(path.pic_values[g])), int(path.support_sizes[g]),
                            int(e is not None and e.converged), int(path.failed[g]),
                            "" if e is None else repr(float(e.objective_value)), supp])
    write_json(out / "estimate.json", record)

    T = est.sufficient_predictors(table.W)
    with open(out / "predictors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([table.response_name] + [f"T{k + 1}" for k in range(T.shape[1])])
        for yi, row in zip(table.y, T):
            w.writerow([repr(float(yi))] + [repr(float(v)) for v in row])

    print(f"{method.value}: objective {est.objective_value:.6g}, "
          f"{'converged' if est.converged else 'NOT converged'}; wrote {out}")
    if not est.converged:
        raise NonConvergenceError(f"{method.value} fit did not converge; see {out / 'estimate.json'}")
    return EXIT_OK


def cmd_sigma_u(args) -> int:
    table = read_table(args.data, _split_names(args.error_free))
    sigma_u = table_sigma_u(table)
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(table.names)
        for row in sigma_u:
            w.writerow([repr(float(v)) for v in row])
    p = len(table.names)
    print(f"wrote {p}x{p} error covariance to {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    scenarios = load_scenarios(args.scenario)
    if args.seed is not None:
        for sc in scenarios:
            sc.seed = args.seed
    threads = args.threads if args.threads else default_threads()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summaries = []
    for sc in scenarios:
        log.info("running %s (%d replicates, %d threads)", sc.name, sc.replicates, threads)
        summaries.append(run_scenario(sc, threads))
    write_summary_csv(summaries, out / "summary.csv")
    text = format_summary(summaries)
    (out / "summary.txt").write_text(text)
    write_json(out / "results.json", [s.to_dict() for s in summaries])
    write_json(out / "provenance.json", {
        "version": package_version(),
        "numpy": np.__version__,
        "scenario_file": str(args.scenario),
        "seeds": [sc.seed for sc in scenarios],
        "scenarios": [sc.to_dict() for sc in scenarios],
    })
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surrogate-sdr",
        description="Central-subspace estimation with error-contaminated covariates.",
        epilog=(
            "CSV convention: header row; first column is the response, the rest are "
            "covariates. Replicate measurements use column pairs NAME_r1, NAME_r2. "
            "Exit codes: 0 ok, 2 bad input, 3 non-convergence, 4 numerical degeneracy."
        ),
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit an estimator to a CSV data file")
    fit.add_argument("data", help="CSV file: response first, then covariates")
    fit.add_argument("--method", choices=METHOD_CHOICES, default="clad")
    fit.add_argument("--dim", type=int, default=1, help="structural dimension d")
    fit.add_argument("--slices", type=int, default=DEFAULT_SLICES, help="number of slices M")
    fit.add_argument("--categorical", action="store_true", help="one slice per response value")
    fit.add_argument("--sigma-u", default=None, metavar="FILE|replicates",
                     help="p x p CSV matrix, or 'replicates' to estimate the error covariance "
                          "of the averaged NAME_r1/NAME_r2 pairs; default: no measurement error. "
                          "IL methods use the uncentered second moment of W")
    fit.add_argument("--error-free", default=None, metavar="NAMES",
                     help="comma-separated covariates whose error variance is forced to zero")
    fit.add_argument("--seed", type=int, default=0, help="recorded for provenance; fits are deterministic")
    fit.add_argument("--diag-tol", type=float, default=DIAG_TOL)
    fit.add_argument("--lambda-max", type=float, default=1.0)
    fit.add_argument("--grid-size", type=int, default=40)
    fit.add_argument("--out", default="out", help="output directory")
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="run Monte-Carlo scenarios from a TOML/JSON file")
    sim.add_argument("scenario")
    sim.add_argument("--out", default="sim-out")
    sim.add_argument("--threads", type=int, default=None,
                     help="worker processes (default: available CPUs)")
    sim.add_argument("--seed", type=int, default=None, help="override the scenario seed(s)")
    sim.set_defaults(func=cmd_simulate)

    su = sub.add_parser("sigma-u", help="estimate Sigma_u of averaged replicate measurements")
    su.add_argument("data")
    su.add_argument("--error-free", default=None, metavar="NAMES")
    su.add_argument("--out", default="sigma_u.csv")
    su.set_defaults(func=cmd_sigma_u)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except NonConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (NumericalDegeneracyError, np.linalg.LinAlgError) as exc:
        print(f"error: numerical degeneracy: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
