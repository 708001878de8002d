#!/usr/bin/env python3

"""Simulated G x E survival data and replicated method comparisons.

Event times follow the multiplicative model

    t_i = exp(x_i' alpha + z_i' beta + (x_i (x) z_i)' xi) * eps_i

with uniform censoring calibrated to a target rate. All randomness comes
from a Philox generator seeded per scenario, so a (scenario, seed) pair
reproduces the same dataset on every platform.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from dotenv import dotenv_values
from joblib import Parallel, delayed
from scipy import linalg, optimize

from loss_functions import LossKind
from mm_cd_solver import SolverConfig, SolverError, lambda_grid, lambda_max, lambda_path
from model_selection import SelectionError, auc_over_path, cross_validate, hierarchy_refit, selection_metrics
from penalties import DEFAULT_GAMMA, PenaltyKind
from survival_data import (CoefficientVector, DataError, SurvivalDataset, build_design,
                           kaplan_meier_weights, sort_by_time)

logger = logging.getLogger(__name__)

DICHOTOMIZE_CUTS = (-1.0, 0.5)
UNIFORM_LOG_ERROR = 2.0
METRICS = ("auc", "se", "tpr", "fpr")


class ScenarioError(ValueError):
    """Raised for malformed scenario settings or impossible signal layouts."""
    pass


class CorrelationKind(str, Enum):
    INDEPENDENT = "independent"
    AR = "ar"
    BAND1 = "band1"
    BAND2 = "band2"


CORRELATION_TOKENS = "independent, ar:<rho>, band1, band2"


@dataclass(frozen=True)
class CorrelationSpec:
    """Gene correlation structure: rho_jk = rho^|j-k| for AR, fixed bands otherwise."""
    kind: CorrelationKind = CorrelationKind.INDEPENDENT
    rho: float = 0.0

    def __post_init__(self):
        if self.kind is CorrelationKind.AR and not -1 < self.rho < 1:
            raise ScenarioError(f"AR correlation must lie in (-1, 1), got {self.rho}")

    @classmethod
    def parse(cls, token: str) -> "CorrelationSpec":
        text = token.strip().lower()
        if text.startswith("ar:"):
            try:
                return cls(CorrelationKind.AR, float(text[3:]))
            except ValueError:
                raise ScenarioError(f"Bad AR coefficient in '{token}' (accepted: {CORRELATION_TOKENS})")
        if text in (CorrelationKind.INDEPENDENT.value, CorrelationKind.BAND1.value, CorrelationKind.BAND2.value):
            return cls(CorrelationKind(text))
        raise ScenarioError(f"Unknown correlation token '{token}' (accepted: {CORRELATION_TOKENS})")

    @property
    def token(self) -> str:
        if self.kind is CorrelationKind.AR:
            return f"ar:{self.rho:g}"
        return self.kind.value

    def matrix(self, p: int) -> np.ndarray:
        first = np.zeros(p)
        first[0] = 1.0
        if self.kind is CorrelationKind.AR:
            first = self.rho ** np.arange(p)
        elif self.kind is CorrelationKind.BAND1:
            first[1:2] = 0.3
        elif self.kind is CorrelationKind.BAND2:
            first[1:2] = 0.6
            first[2:3] = 0.3
        return linalg.toeplitz(first)


def correlation_matrix(spec: CorrelationSpec, p: int) -> np.ndarray:
    """Lower Cholesky factor L with L L' equal to the gene correlation matrix.

    Args:
        spec: Correlation structure
        p: Number of genes

    Returns:
        Lower-triangular (p, p) factor

    Raises:
        ScenarioError: If p < 1 or the matrix is not positive definite
    """
    if p < 1:
        raise ScenarioError(f"p must be at least 1, got {p}")
    sigma = spec.matrix(p)
    smallest = float(np.linalg.eigvalsh(sigma).min())
    if smallest <= 0:
        raise ScenarioError(f"{spec.token} correlation is not positive definite for p={p} "
                            f"(smallest eigenvalue {smallest:.3g})")
    return linalg.cholesky(sigma, lower=True)


class ErrorLaw(str, Enum):
    NORMAL = "normal"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation setting.

    ``error_law`` is the law of log(eps): N(0, 1) or Uniform(-2, 2).
    Interactions are drawn among the signal genes unless
    ``random_interactions`` is set. Signal counts left unset default to
    5 env, 10 gene and 20 interaction effects where the dimensions allow.
    """
    n: int = 200
    p: int = 500
    q: int = 5
    correlation: CorrelationSpec = field(default_factory=CorrelationSpec)
    n_env_signals: Optional[int] = None
    n_gene_signals: Optional[int] = None
    n_interaction_signals: Optional[int] = None
    coef_low: float = 0.4
    coef_high: float = 1.2
    error_law: ErrorLaw = ErrorLaw.NORMAL
    target_censor_rate: float = 0.20
    dichotomize: bool = False
    seed: int = 2024
    random_interactions: bool = False
    name: str = ""

    def __post_init__(self):
        if self.n < 1 or self.p < 1 or self.q < 1:
            raise ScenarioError(f"n, p and q must be positive (got n={self.n}, p={self.p}, q={self.q})")
        # unset signal counts default to 5 / 10 / 20, capped by what the dimensions allow
        if self.n_env_signals is None:
            object.__setattr__(self, "n_env_signals", min(5, self.q))
        if self.n_gene_signals is None:
            object.__setattr__(self, "n_gene_signals", min(10, self.p))
        if self.n_interaction_signals is None:
            object.__setattr__(self, "n_interaction_signals", min(20, self.interaction_pool_size))
        if not 0 <= self.n_env_signals <= self.q:
            raise ScenarioError(f"n_env_signals={self.n_env_signals} exceeds q={self.q}")
        if not 0 <= self.n_gene_signals <= self.p:
            raise ScenarioError(f"n_gene_signals={self.n_gene_signals} exceeds p={self.p}")
        if not 0 <= self.n_interaction_signals <= self.interaction_pool_size:
            raise ScenarioError(f"n_interaction_signals={self.n_interaction_signals} exceeds the "
                                f"{self.interaction_pool_size} available interaction pairs")
        if not self.coef_low < self.coef_high:
            raise ScenarioError(f"coef_low ({self.coef_low}) must be below coef_high ({self.coef_high})")
        if not 0 <= self.target_censor_rate < 1:
            raise ScenarioError(f"Censoring target must lie in [0, 1), got {self.target_censor_rate}")

    @property
    def interaction_pool_size(self) -> int:
        return self.q * (self.p if self.random_interactions else self.n_gene_signals)

    @property
    def label(self) -> str:
        return self.name or self.correlation.token

    @classmethod
    def full_scale(cls, **overrides) -> "ScenarioConfig":
        """n=200, q=5, p=500 with 5 env, 10 gene and 20 interaction signals."""
        return cls(**overrides)

    @classmethod
    def desk_scale(cls, **overrides) -> "ScenarioConfig":
        """n=200, q=5, p=50 with 2 env, 4 gene and 8 interaction signals."""
        settings = dict(p=50, n_env_signals=2, n_gene_signals=4, n_interaction_signals=8)
        settings.update(overrides)
        return cls(**settings)


_SCENARIO_KEYS = {
    "n": ("n", int),
    "p": ("p", int),
    "q": ("q", int),
    "env_signals": ("n_env_signals", int),
    "gene_signals": ("n_gene_signals", int),
    "interaction_signals": ("n_interaction_signals", int),
    "coef_low": ("coef_low", float),
    "coef_high": ("coef_high", float),
    "censor": ("target_censor_rate", float),
    "seed": ("seed", int),
    "name": ("name", str),
}
_FLAG_KEYS = {"dichotomize": "dichotomize", "random_interactions": "random_interactions"}


def _parse_flag(key: str, value: str) -> bool:
    text = value.strip().lower()
    if text in ("true", "1", "yes"):
        return True
    if text in ("false", "0", "no"):
        return False
    raise ScenarioError(f"Scenario key '{key}' must be true or false, got '{value}'")


def load_scenarios(path: Union[str, Path]) -> List[ScenarioConfig]:
    """Read a key=value scenario file.

    ``correlation`` may list several tokens separated by commas; one
    configuration is returned per token.

    Raises:
        ScenarioError: On unknown keys or malformed values
    """
    path = Path(path)
    if not path.is_file():
        raise ScenarioError(f"Scenario file not found: {path}")
    values = dotenv_values(path)
    accepted = sorted(list(_SCENARIO_KEYS) + list(_FLAG_KEYS) + ["correlation", "error"])

    settings: Dict[str, object] = {}
    correlations = [CorrelationSpec()]
    for key, raw in values.items():
        key = key.strip().lower()
        raw = "" if raw is None else raw.strip()
        if key in _SCENARIO_KEYS:
            name, cast = _SCENARIO_KEYS[key]
            try:
                settings[name] = cast(raw)
            except ValueError:
                raise ScenarioError(f"Scenario key '{key}' has malformed value '{raw}'")
        elif key in _FLAG_KEYS:
            settings[_FLAG_KEYS[key]] = _parse_flag(key, raw)
        elif key == "correlation":
            correlations = [CorrelationSpec.parse(token) for token in raw.split(",") if token.strip()]
        elif key == "error":
            try:
                settings["error_law"] = ErrorLaw(raw.lower())
            except ValueError:
                raise ScenarioError(f"Unknown error law '{raw}' (accepted: normal, uniform)")
        else:
            raise ScenarioError(f"Unknown scenario key '{key}' (accepted: {', '.join(accepted)})")

    if not correlations:
        raise ScenarioError(f"Scenario key 'correlation' is empty (accepted: {CORRELATION_TOKENS})")
    return [ScenarioConfig(correlation=spec, **settings) for spec in correlations]


def write_scenario(config: ScenarioConfig, path: Union[str, Path]) -> None:
    """Write ``config`` in the key=value layout read by load_scenarios."""
    lines = [f"{key}={getattr(config, name)}" for key, (name, _) in _SCENARIO_KEYS.items() if key != "name"]
    lines += [f"{key}={str(getattr(config, name)).lower()}" for key, name in _FLAG_KEYS.items()]
    lines += [f"correlation={config.correlation.token}", f"error={config.error_law.value}"]
    if config.name:
        lines.append(f"name={config.name}")
    Path(path).write_text("\n".join(lines) + "\n")


def dichotomize(latent: np.ndarray) -> np.ndarray:
    """Map latent values to levels {0, 1, 2} at the cuts -1 and 0.5."""
    low, high = DICHOTOMIZE_CUTS
    return (latent > low).astype(float) + (latent > high).astype(float)


def _standardize_columns(matrix: np.ndarray) -> np.ndarray:
    sd = matrix.std(axis=0)
    return (matrix - matrix.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def expected_censoring(event_times: np.ndarray, c_max: float) -> float:
    """Mean of P(c < t_i) for c ~ Uniform(0, c_max)."""
    return float(np.mean(np.minimum(event_times / c_max, 1.0)))


def calibrate_censoring(event_times: Sequence[float], target: float) -> float:
    """Upper bound c_max of Uniform(0, c_max) censoring giving ``target`` expected censoring.

    Solved by bisection on the realized event times. When the target lies
    below what c_max = 10 max(t) achieves, that boundary is returned.

    Args:
        event_times: Positive event times
        target: Censoring proportion in [0, 1)

    Returns:
        c_max
    """
    times = np.asarray(event_times, dtype=float)
    if times.size == 0 or np.any(times <= 0):
        raise ScenarioError("Event times must be positive and nonempty")
    if not 0 <= target < 1:
        raise ScenarioError(f"Censoring target must lie in [0, 1), got {target}")

    hi = 10.0 * times.max()
    lo = 1e-3 * times.min()
    if expected_censoring(times, hi) >= target:
        logger.warning(f"Censoring target {target} unreachable; using c_max={hi:.6g}")
        return hi
    return float(optimize.bisect(lambda c: expected_censoring(times, c) - target, lo, hi,
                                 xtol=1e-12 * hi, maxiter=500))


def _signal_layout(config: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    theta = CoefficientVector.zeros(config.q, config.p).values.copy()
    q, p = config.q, config.p
    positions = list(range(config.n_env_signals))
    positions += [q + k for k in range(config.n_gene_signals)]

    genes = config.p if config.random_interactions else config.n_gene_signals
    pool = np.array([(j, k) for j in range(q) for k in range(genes)], dtype=int).reshape(-1, 2)
    chosen = rng.choice(len(pool), size=config.n_interaction_signals, replace=False) if len(pool) else []
    positions += [q + p + j * p + k for j, k in pool[np.sort(np.asarray(chosen, dtype=int))]]

    theta[positions] = rng.uniform(config.coef_low, config.coef_high, size=len(positions))
    return theta


def generate_dataset(config: ScenarioConfig) -> Tuple[SurvivalDataset, CoefficientVector]:
    """Draw one dataset and its true coefficients.

    Returns:
        (time-sorted dataset, theta_true)
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed)))
    env = rng.standard_normal((config.n, config.q))
    genes = rng.standard_normal((config.n, config.p)) @ correlation_matrix(config.correlation, config.p).T
    if config.dichotomize:
        genes = _standardize_columns(dichotomize(genes))

    theta = _signal_layout(config, rng)
    eta = build_design(env, genes).rows @ theta
    if config.error_law is ErrorLaw.NORMAL:
        log_error = rng.standard_normal(config.n)
    else:
        log_error = rng.uniform(-UNIFORM_LOG_ERROR, UNIFORM_LOG_ERROR, config.n)
    event_times = np.exp(eta + log_error)

    if config.target_censor_rate == 0:
        times, status = event_times, np.ones(config.n, dtype=int)
    else:
        c_max = calibrate_censoring(event_times, config.target_censor_rate)
        censor_times = rng.uniform(0.0, c_max, config.n)
        times = np.minimum(event_times, censor_times)
        status = (event_times <= censor_times).astype(int)

    dataset = sort_by_time(SurvivalDataset(times, status, env, genes))
    logger.debug(f"Generated {config.label} seed={config.seed}: "
                 f"censoring {1 - dataset.n_events / dataset.n:.3f}")
    return dataset, CoefficientVector(theta, config.q, config.p)


@dataclass(frozen=True)
class EvaluationProtocol:
    """What to compute for each method on each replicate."""
    penalty_kind: PenaltyKind = PenaltyKind.MCP
    gamma: float = DEFAULT_GAMMA
    grid_size: int = 100
    ratio: float = 0.01
    K: int = 5
    compute_auc: bool = True
    compute_cv: bool = True
    hierarchy_refit: bool = False


@dataclass(frozen=True, eq=False)
class BenchResult:
    records: List[dict]
    summary: pd.DataFrame
    failures: int


def _evaluate_method(dataset: SurvivalDataset, theta_true: CoefficientVector, kind: LossKind,
                     protocol: EvaluationProtocol, config: SolverConfig) -> dict:
    weights = kaplan_meier_weights(dataset.status)
    design = build_design(dataset.env, dataset.genes)
    grid = lambda_grid(lambda_max(design, dataset, weights, kind, config), protocol.grid_size, protocol.ratio)
    path = lambda_path(design, dataset, weights, kind, protocol.penalty_kind, config=config,
                       gamma=protocol.gamma, grid=grid)
    record = {"auc": auc_over_path(path, theta_true) if protocol.compute_auc else np.nan}

    if protocol.compute_cv:
        cv = cross_validate(design, dataset, kind, protocol.penalty_kind, protocol.K,
                            grid=grid, config=config, gamma=protocol.gamma)
        fit = path[int(np.argmin(np.abs(grid - cv.lambda_opt)))]
        metrics = selection_metrics(fit.theta_hat, theta_true)
        record.update(se=metrics.se, tpr=metrics.tpr, fpr=metrics.fpr, lambda_opt=cv.lambda_opt)
        if protocol.hierarchy_refit:
            refit = hierarchy_refit(fit, design, dataset, weights, kind, config)
            refit_metrics = selection_metrics(refit.theta_hat, theta_true)
            record.update(se_refit=refit_metrics.se, tpr_refit=refit_metrics.tpr,
                          fpr_refit=refit_metrics.fpr)
    return record


def _run_replicate(config: ScenarioConfig, methods: Sequence[LossKind], replicate: int,
                   protocol: EvaluationProtocol, solver: SolverConfig) -> List[dict]:
    scenario = replace(config, seed=config.seed + replicate)
    dataset, theta_true = generate_dataset(scenario)
    solver = replace(solver, seed=solver.seed + replicate)
    censoring = 1.0 - dataset.n_events / dataset.n
    records = []
    for kind in methods:
        record = {"method": kind.value, "scenario": config.label, "replicate": replicate,
                  "censor_rate": censoring, "failed": False}
        try:
            record.update(_evaluate_method(dataset, theta_true, kind, protocol, solver))
        except (SolverError, SelectionError, DataError) as e:
            logger.warning(f"Replicate {replicate} ({kind.value}, {config.label}) failed: {e}")
            record.update(failed=True, error=str(e))
        records.append(record)
    logger.info(f"Replicate {replicate} of {config.label} done")
    return records


def _mean_sd(values: Iterable[Optional[float]]) -> Tuple[float, float]:
    """Compensated mean and sample sd of the finite values (sd is NaN for fewer than two)."""
    finite = [float(v) for v in values if v is not None and np.isfinite(v)]
    if not finite:
        return float("nan"), float("nan")
    mean = math.fsum(finite) / len(finite)
    if len(finite) < 2:
        return mean, float("nan")
    variance = math.fsum((v - mean) ** 2 for v in finite) / (len(finite) - 1)
    return mean, math.sqrt(variance)


def summarize_replicates(records: Sequence[dict]) -> pd.DataFrame:
    """Mean and sd per (scenario, method), one row per pair.

    Failed replicates are excluded from the aggregates and counted in ``failed``.
    """
    frame = pd.DataFrame(list(records))
    rows = []
    for (scenario, method), group in frame.groupby(["scenario", "method"], sort=False):
        ok = group[~group["failed"].astype(bool)]
        row = {"scenario": scenario, "method": method,
               "replicates": len(ok), "failed": int(len(group) - len(ok))}
        for metric in METRICS:
            column = ok[metric] if metric in ok else []
            row[f"{metric}_mean"], row[f"{metric}_sd"] = _mean_sd(column)
        rows.append(row)
    columns = ["scenario", "method"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "sd")]
    return pd.DataFrame(rows, columns=columns + ["replicates", "failed"])


def run_replicates(config: ScenarioConfig, methods: Iterable[LossKind], R: int,
                   protocol: Optional[EvaluationProtocol] = None,
                   solver: Optional[SolverConfig] = None) -> BenchResult:
    """Replicated comparison of ``methods`` on datasets drawn from ``config``.

    Replicate r uses seed ``config.seed + r`` and every method sees the same
    dataset. Replicates run in parallel up to ``solver.threads`` workers;
    folds inside a replicate run serially.

    Args:
        config: Scenario to simulate
        methods: Loss functions to compare
        R: Number of replicates
        protocol: Evaluation settings
        solver: Solver settings

    Returns:
        BenchResult with per-replicate records, the summary table and the failure count
    """
    if R < 1:
        raise ValueError(f"R must be at least 1, got {R}")
    methods = list(methods)
    protocol = protocol or EvaluationProtocol()
    solver = solver or SolverConfig()
    inner = replace(solver, threads=1)

    batches = Parallel(n_jobs=solver.threads)(
        delayed(_run_replicate)(config, methods, r, protocol, inner) for r in range(R)
    )
    records = [record for batch in batches for record in batch]
    failures = sum(bool(record["failed"]) for record in records)
    if failures:
        logger.warning(f"{failures} method fit(s) failed across {R} replicates of {config.label}")
    return BenchResult(records, summarize_replicates(records), failures)
