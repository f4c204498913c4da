"""Simulation lab: the four index models with surrogate covariates and a
Monte-Carlo scenario runner.

Every replicate draws from its own substream of a ``numpy`` seed sequence,
so results do not depend on how replicates are spread over workers.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .estimators import (
    Method,
    SurrogateProblem,
    fit_clad,
    fit_il_lad,
    fit_il_save,
    fit_il_sir,
    fit_lad_moments,
)
from .evalmetrics import DIAG_TOL, projection_error, selection_counts, true_projection
from .slices import DEFAULT_SLICES
from .sparse import fit_sclad

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

AR_RHO = 0.5
SIGMA_U_RANGE = (0.2, 0.5)
T_DF = 3


class ErrorDraw(str, enum.Enum):
    """How the uniform draws ``u_j`` define ``Sigma_u``.

    ``SD``: ``u_j`` is the error standard deviation, ``Sigma_u = diag(u^2)``.
    ``VARIANCE``: ``Sigma_u = diag(u)``.
    """

    SD = "sd"
    VARIANCE = "variance"


class Model(str, enum.Enum):
    M1 = "M1"
    M2 = "M2"
    M3 = "M3"
    M4 = "M4"

    @property
    def d(self) -> int:
        return 1 if self in (Model.M1, Model.M2) else 2


class CovariateLaw(str, enum.Enum):
    GAUSSIAN = "gaussian"
    HALF_GAUSSIAN = "half_gaussian"
    T3 = "t3"


_METHOD_ALIASES = {m.value.lower(): m for m in Method}


def parse_method(tag) -> Method:
    if isinstance(tag, Method):
        return tag
    try:
        return _METHOD_ALIASES[str(tag).strip().lower()]
    except KeyError:
        raise InvalidArgumentError(
            f"unknown estimator {tag!r}; choose from {', '.join(m.value for m in Method)}"
        ) from None


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# data-generating process
# ---------------------------------------------------------------------------


def ar_covariance(p: int, rho: float = AR_RHO) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def true_directions(p: int, model) -> np.ndarray:
    """``beta_1 = (1,1,1,0,...)`` for M1/M2; ``[beta_1, beta_2]`` with
    ``beta_2 = (0,0,1,1,1,0,...)`` for M3/M4."""
    model = Model(model)
    if p < 5:
        raise InvalidArgumentError("the index models need p >= 5")
    b1 = np.zeros(p)
    b1[:3] = 1.0
    if model.d == 1:
        return b1[:, None]
    b2 = np.zeros(p)
    b2[2:5] = 1.0
    return np.column_stack([b1, b2])


def true_support(model) -> set:
    return set(range(3)) if Model(model).d == 1 else set(range(5))


def gen_covariates(law, n: int, p: int, seed=None) -> np.ndarray:
    """Draw ``n`` covariate vectors with AR(0.5) covariance structure.

    ``t3`` uses scale ``Sigma_x / 3`` so its covariance is ``Sigma_x``;
    ``half_gaussian`` is the entrywise absolute value of Gaussian draws.
    """
    law = CovariateLaw(law)
    if n < 1 or p < 1:
        raise InvalidArgumentError("n and p must be positive")
    rng = _rng(seed)
    C = np.linalg.cholesky(ar_covariance(p))
    Z = rng.standard_normal((n, p)) @ C.T
    if law is CovariateLaw.GAUSSIAN:
        return Z
    if law is CovariateLaw.HALF_GAUSSIAN:
        return np.abs(Z)
    g = rng.chisquare(T_DF, size=n) / T_DF
    return Z / np.sqrt(T_DF) / np.sqrt(g)[:, None]


def response_from_index(model, index: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Evaluate the index model on ``index = X @ B_true`` and noise ``eps``."""
    model = Model(model)
    index = np.asarray(index, dtype=float).reshape(len(eps), -1)
    t1 = index[:, 0]
    if model is Model.M1:
        return 0.5 * t1 ** 3 + 0.25 * np.abs(t1) * eps
    if model is Model.M2:
        return 3.0 * t1 / (1.0 + t1) ** 2 + 0.25 * eps
    t2 = index[:, 1]
    if model is Model.M3:
        return 4.0 * np.sin(t2 / 4.0) + 0.5 * t1 ** 2 + 0.25 * eps
    return 3.0 * t1 * np.exp(t2 + 0.25 * eps)


def gen_response(model, X, B_true, seed=None, noise: bool = True) -> np.ndarray:
    """Response of the index model; ``noise=False`` sets ``eps = 0``."""
    model = Model(model)
    X = np.asarray(X, dtype=float)
    B_true = np.asarray(B_true, dtype=float).reshape(X.shape[1], -1)
    if B_true.shape[1] != model.d:
        raise InvalidArgumentError(f"{model.value} needs {model.d} directions")
    n = X.shape[0]
    eps = _rng(seed).standard_normal(n) if noise else np.zeros(n)
    return response_from_index(model, X @ B_true, eps)


def gen_surrogates(X, seed=None, draw=ErrorDraw.SD, low: float = SIGMA_U_RANGE[0],
                   high: float = SIGMA_U_RANGE[1]):
    """``W = X + U`` with ``U ~ N(0, Sigma_u)``, ``Sigma_u`` diagonal built
    from ``u_j ~ U(low, high)`` as described by ``draw``.

    With the default ``draw="sd"`` the error standard deviations lie in
    ``[low, high]``; ``draw="variance"`` puts the variances there instead.

    Returns ``(W, sigma_u)``.
    """
    draw = ErrorDraw(draw)
    X = np.asarray(X, dtype=float)
    rng = _rng(seed)
    n, p = X.shape
    u = rng.uniform(low, high, size=p)
    var = u ** 2 if draw is ErrorDraw.SD else u
    U = rng.standard_normal((n, p)) * np.sqrt(var)
    return X + U, np.diag(var)


@dataclass
class GeneratedDataset:
    X: np.ndarray
    W: np.ndarray
    y: np.ndarray
    sigma_u: np.ndarray
    B_true: np.ndarray


def generate_dataset(model, law, n: int, p: int, seed=None,
                     error_draw=ErrorDraw.SD) -> GeneratedDataset:
    """One replicate: covariates, surrogates and response from independent substreams."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_x, s_u, s_y = ss.spawn(3)
    B = true_directions(p, model)
    X = gen_covariates(law, n, p, s_x)
    W, sigma_u = gen_surrogates(X, s_u, error_draw)
    y = gen_response(model, X, B, s_y)
    return GeneratedDataset(X, W, y, sigma_u, B)


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    model: Model = Model.M1
    covariate_law: CovariateLaw = CovariateLaw.GAUSSIAN
    n: int = 1000
    p: int = 40
    d: Optional[int] = None
    M_slices: int = DEFAULT_SLICES
    replicates: int = 100
    seed: int = 0
    estimators: List[Method] = field(default_factory=lambda: [Method.CLAD])
    lambda_max: float = 1.0
    grid_size: int = 40
    diag_tol: float = DIAG_TOL
    error_draw: ErrorDraw = ErrorDraw.SD
    name: str = ""

    def __post_init__(self):
        self.model = Model(self.model)
        self.covariate_law = CovariateLaw(self.covariate_law)
        self.error_draw = ErrorDraw(self.error_draw)
        if self.d is None:
            self.d = self.model.d
        if self.d != self.model.d:
            raise InvalidArgumentError(
                f"d={self.d} is inconsistent with {self.model.value} (d={self.model.d})"
            )
        if self.p < 5:
            raise InvalidArgumentError("p must be at least 5")
        if self.n <= self.p:
            raise InvalidArgumentError("n must exceed p")
        if self.replicates < 1:
            raise InvalidArgumentError("replicates must be positive")
        if self.M_slices < 2:
            raise InvalidArgumentError("M_slices must be at least 2")
        if isinstance(self.estimators, str):
            self.estimators = [self.estimators]
        self.estimators = [parse_method(e) for e in self.estimators]
        if not self.estimators:
            raise InvalidArgumentError("no estimators requested")
        if not self.name:
            self.name = f"{self.model.value}-{self.covariate_law.value}-n{self.n}-p{self.p}"

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise InvalidArgumentError(f"unknown scenario field(s): {', '.join(sorted(unknown))}")
        try:
            return cls(**data)
        except (ValueError, TypeError) as exc:
            raise InvalidArgumentError(str(exc)) from None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model"] = self.model.value
        out["covariate_law"] = self.covariate_law.value
        out["error_draw"] = self.error_draw.value
        out["estimators"] = [m.value for m in self.estimators]
        return out


def load_scenarios(path) -> List[Scenario]:
    """Read scenarios from a TOML or JSON file.

    Either a single top-level table of scenario fields, or a ``[defaults]``
    table plus a ``[[scenario]]`` array whose entries override it.
    """
    path = Path(path)
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise InvalidArgumentError(f"{path}: {exc}") from None
    if "scenario" in data:
        base = data.get("defaults", {})
        items = data["scenario"]
        if isinstance(items, dict):
            items = [items]
        out = []
        for k, item in enumerate(items):
            try:
                out.append(Scenario.from_dict({**base, **item}))
            except InvalidArgumentError as exc:
                raise InvalidArgumentError(f"{path}: scenario {k}: {exc}") from None
        return out
    try:
        return [Scenario.from_dict(data)]
    except InvalidArgumentError as exc:
        raise InvalidArgumentError(f"{path}: {exc}") from None


@dataclass
class ReplicateResult:
    index: int
    errors: Dict[str, float]
    f1: Dict[str, float]
    failures: Dict[str, str]


def _fit_one(method: Method, problem, moments, cache, scenario):
    if method is Method.LAD:
        return fit_lad_moments(moments, problem.d)
    if method is Method.CLAD:
        if "clad" not in cache:
            cache["clad"] = fit_clad(problem, moments=moments)
        return cache["clad"]
    if method is Method.IL_LAD:
        return fit_il_lad(problem, moments=moments)
    if method is Method.IL_SIR:
        return fit_il_sir(problem, moments=moments)
    if method is Method.IL_SAVE:
        return fit_il_save(problem, moments=moments)
    if "clad" not in cache:
        cache["clad"] = fit_clad(problem, moments=moments)
    path = fit_sclad(problem, scenario.lambda_max, scenario.grid_size, scenario.diag_tol,
                     clad=cache["clad"], moments=moments)
    return path.selected


def run_replicate(scenario: Scenario, index: int) -> ReplicateResult:
    """Generate replicate ``index`` of ``scenario`` and score every estimator."""
    ss = np.random.SeedSequence(scenario.seed, spawn_key=(index,))
    data = generate_dataset(scenario.model, scenario.covariate_law, scenario.n, scenario.p, ss,
                            scenario.error_draw)
    P_true = true_projection(data.B_true)
    support = true_support(scenario.model)
    errors, f1, failures = {}, {}, {}
    try:
        problem = SurrogateProblem(data.W, data.y, data.sigma_u, scenario.d, scenario.M_slices)
        moments = problem.moments()
    except (ValueError, ArithmeticError) as exc:
        return ReplicateResult(index, {}, {}, {m.value: str(exc) for m in scenario.estimators})
    cache = {}
    for method in scenario.estimators:
        try:
            est = _fit_one(method, problem, moments, cache, scenario)
        except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
            log.warning("replicate %d: %s failed: %s", index, method.value, exc)
            failures[method.value] = str(exc)
            continue
        errors[method.value] = projection_error(est.projection, P_true)
        if method is Method.SCLAD:
            f1[method.value] = selection_counts(est.projection, support, scenario.diag_tol).f1
    return ReplicateResult(index, errors, f1, failures)


def _run_replicate_args(args):
    return run_replicate(*args)


@dataclass
class EstimatorSummary:
    estimator: str
    mean_error: float
    se: float
    f1: Optional[float]
    n_ok: int
    n_failed: int


@dataclass
class ScenarioSummary:
    scenario: Scenario
    rows: List[EstimatorSummary]
    replicate_errors: Dict[str, List[float]]
    replicate_f1: Dict[str, List[float]]
    seeds: List[int]

    def row(self, method) -> EstimatorSummary:
        tag = parse_method(method).value
        for r in self.rows:
            if r.estimator == tag:
                return r
        raise KeyError(tag)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "rows": [asdict(r) for r in self.rows],
            "replicate_errors": self.replicate_errors,
            "replicate_f1": self.replicate_f1,
            "seeds": self.seeds,
        }


def _summarize(scenario: Scenario, results: Sequence[ReplicateResult]) -> ScenarioSummary:
    results = sorted(results, key=lambda r: r.index)
    rows, errs, f1s = [], {}, {}
    for method in scenario.estimators:
        tag = method.value
        e = [r.errors[tag] for r in results if tag in r.errors]
        f = [r.f1[tag] for r in results if tag in r.f1]
        n_failed = sum(tag in r.failures for r in results)
        arr = np.asarray(e)
        mean = float(arr.mean()) if arr.size else float("nan")
        se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else float("nan")
        rows.append(EstimatorSummary(tag, mean, se, float(np.mean(f)) if f else None,
                                     int(arr.size), int(n_failed)))
        errs[tag] = [float(v) for v in e]
        if f:
            f1s[tag] = [float(v) for v in f]
    return ScenarioSummary(scenario, rows, errs, f1s, [scenario.seed])


def default_threads() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover
        return max(1, os.cpu_count() or 1)


def run_scenario(scenario: Scenario, threads: Optional[int] = 1) -> ScenarioSummary:
    """Run every replicate of ``scenario`` and reduce by replicate index.

    Parameters
    ----------
    threads : int, optional
        Worker processes; ``None`` means all available CPUs.  Results do not
        depend on this value.
    """
    threads = default_threads() if threads is None else max(1, int(threads))
    jobs = [(scenario, r) for r in range(scenario.replicates)]
    if threads == 1 or scenario.replicates == 1:
        results = [run_replicate(*j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_replicate_args, jobs, chunksize=1))
    return _summarize(scenario, results)


SUMMARY_FIELDS = ["name", "model", "covariate_law", "n", "p", "d", "M_slices", "replicates",
                  "seed", "estimator", "mean_error", "se", "f1", "n_ok", "n_failed"]


def summary_rows(summaries: Sequence[ScenarioSummary]) -> List[dict]:
    out = []
    for s in summaries:
        sc = s.scenario.to_dict()
        for r in s.rows:
            row = {k: sc[k] for k in SUMMARY_FIELDS[:9]}
            row.update(estimator=r.estimator, mean_error=r.mean_error, se=r.se,
                       f1="" if r.f1 is None else r.f1, n_ok=r.n_ok, n_failed=r.n_failed)
            out.append(row)
    return out


def write_summary_csv(summaries: Sequence[ScenarioSummary], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        writer.writerows(summary_rows(summaries))


def format_summary(summaries: Sequence[ScenarioSummary]) -> str:
    buf = io.StringIO()
    for s in summaries:
        sc = s.scenario
        buf.write(f"{sc.name}: model {sc.model.value}, {sc.covariate_law.value}, n={sc.n}, "
                  f"p={sc.p}, d={sc.d}, M={sc.M_slices}, {sc.replicates} replicates, seed {sc.seed}\n")
        for r in s.rows:
            line = f"  {r.estimator:8s} error {r.mean_error:.4f} (se {r.se:.4f})"
            if r.f1 is not None:
                line += f"  F1 {r.f1:.3f}"
            if r.n_failed:
                line += f"  [{r.n_failed} failed]"
            buf.write(line + "\n")
    return buf.getvalue()
