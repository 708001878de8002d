#!/usr/bin/env python3

"""Tuning and evaluation: cross-validation, ROC/AUC over a path, hierarchy refit,
stability selection and marginal prescreening."""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import stats
from sklearn.metrics import auc
from sklearn.model_selection import StratifiedKFold

from loss_functions import LossKind, objective_from_eta
from mm_cd_solver import (FitResult, SolverConfig, fit_penalized, lambda_grid, lambda_max,
                          lambda_path)
from penalties import DEFAULT_GAMMA, PenaltyKind, PenaltySpec
from survival_data import (CoefficientVector, CoordinateKey, CoordinateKind, DataError,
                           InteractionDesign, KMWeights, SurvivalDataset, kaplan_meier_weights,
                           time_order)

logger = logging.getLogger(__name__)

MAX_FOLD_RETRIES = 10
MAX_REDRAWS = 10

ArrayOrCoefficients = Union[np.ndarray, CoefficientVector]


class SelectionError(RuntimeError):
    """Raised when folds or resamples without events cannot be avoided."""
    pass


@dataclass(frozen=True)
class SelectionMetrics:
    """Squared error and support recovery of one estimate.

    ``tpr`` is None when the truth has no nonzeros, ``fpr`` when it has no zeros.
    """
    se: float
    tpr: Optional[float]
    fpr: Optional[float]


@dataclass(frozen=True, eq=False)
class StabilityReport:
    """Per-coordinate selection frequency over ``B`` leave-``drop``-out resamples."""
    frequency: np.ndarray
    B: int
    drop: int
    lam: float
    redraws: int
    index_map: tuple

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"coordinate_kind": key.kind.value, "j": key.j, "k": key.k, "frequency": freq}
            for key, freq in zip(self.index_map, self.frequency)
            if key.kind is not CoordinateKind.INTERCEPT
        ]
        return pd.DataFrame(rows, columns=["coordinate_kind", "j", "k", "frequency"])


class CrossValidation(NamedTuple):
    lambda_opt: float
    cv_curve: np.ndarray
    grid: np.ndarray
    fold_curves: np.ndarray


def _values(theta: ArrayOrCoefficients) -> np.ndarray:
    if isinstance(theta, CoefficientVector):
        return theta.values
    return np.asarray(theta, dtype=float)


def selection_metrics(theta_hat: ArrayOrCoefficients, theta_true: ArrayOrCoefficients) -> SelectionMetrics:
    """Compare an estimate with the truth over the full coefficient vector.

    Args:
        theta_hat: Estimated coefficients (already hard-thresholded)
        theta_true: True coefficients

    Returns:
        SelectionMetrics with se = ||theta_hat - theta_true||^2

    Raises:
        ValueError: If the lengths differ
    """
    estimate = _values(theta_hat)
    truth = _values(theta_true)
    if estimate.shape != truth.shape:
        raise ValueError(f"Length mismatch: estimate {estimate.shape[0]}, truth {truth.shape[0]}")

    selected = estimate != 0
    relevant = truth != 0
    n_relevant = int(relevant.sum())
    n_null = relevant.size - n_relevant
    tpr = float(np.sum(selected & relevant)) / n_relevant if n_relevant else None
    fpr = float(np.sum(selected & ~relevant)) / n_null if n_null else None
    return SelectionMetrics(se=float(np.sum((estimate - truth) ** 2)), tpr=tpr, fpr=fpr)


def auc_over_path(path: Sequence[FitResult], theta_true: ArrayOrCoefficients) -> float:
    """Area under the ROC curve traced by the supports along a lambda path.

    The endpoints (0, 0) and (1, 1) are always added; at equal FPR the
    largest TPR is kept. Returns NaN when TPR or FPR is undefined.
    """
    if not path:
        raise ValueError("auc_over_path needs a nonempty path")
    best: Dict[float, float] = {0.0: 0.0, 1.0: 1.0}
    for fit in path:
        metrics = selection_metrics(fit.theta_hat, theta_true)
        if metrics.tpr is None or metrics.fpr is None:
            return float("nan")
        best[metrics.fpr] = max(best.get(metrics.fpr, 0.0), metrics.tpr)
    fpr = np.array(sorted(best))
    tpr = np.array([best[x] for x in fpr])
    return float(auc(fpr, tpr))


def _sorted_subset(design: InteractionDesign, dataset: SurvivalDataset, rows: np.ndarray):
    """Rows of the data and design, re-sorted by time, with their KM weights."""
    subset = dataset.take(rows)
    order = time_order(subset)
    subset = subset.take(order)
    return design.take(rows[order]), subset, kaplan_meier_weights(subset.status)


def _stratified_folds(dataset: SurvivalDataset, K: int, seed: int) -> List[np.ndarray]:
    for attempt in range(MAX_FOLD_RETRIES):
        splitter = StratifiedKFold(n_splits=K, shuffle=True, random_state=seed + attempt)
        folds = [test for _, test in splitter.split(np.zeros(dataset.n), dataset.status)]
        if all(dataset.status[test].sum() > 0 for test in folds):
            return folds
        logger.warning(f"Fold without events for seed {seed + attempt}; re-stratifying")
    raise SelectionError(f"Could not build {K} folds with events in every fold "
                         f"after {MAX_FOLD_RETRIES} attempts")


def _fold_curve(design: InteractionDesign, dataset: SurvivalDataset, test: np.ndarray, kind: LossKind,
                penalty_kind: PenaltyKind, grid: np.ndarray, gamma: float, config: SolverConfig) -> np.ndarray:
    train = np.setdiff1d(np.arange(dataset.n), test)
    train_design, train_data, train_weights = _sorted_subset(design, dataset, train)
    test_design, test_data, test_weights = _sorted_subset(design, dataset, np.sort(test))
    path = lambda_path(train_design, train_data, train_weights, kind, penalty_kind,
                       config=config, gamma=gamma, grid=grid)
    return np.array([
        objective_from_eta(kind, test_data.times, test_design.rows @ fit.theta_hat.values, test_weights.weights)
        for fit in path
    ])


def cross_validate(design: InteractionDesign, dataset: SurvivalDataset, kind: LossKind,
                   penalty_kind: PenaltyKind = PenaltyKind.MCP, K: int = 5,
                   grid: Optional[Sequence[float]] = None, config: Optional[SolverConfig] = None,
                   gamma: float = DEFAULT_GAMMA, grid_size: int = 100, ratio: float = 0.01,
                   folds: Optional[Sequence[Sequence[int]]] = None) -> CrossValidation:
    """Choose lambda by K-fold cross-validation of the fitting criterion itself.

    Folds are stratified by status. Each held-out fold is sorted and gets its
    own Kaplan-Meier weights; the score is the held-out weighted loss of the
    same kind as the fit.

    Args:
        design: Interaction design aligned with ``dataset``
        dataset: Time-sorted observations
        kind: Loss used for fitting and scoring
        penalty_kind: MCP or Lasso
        K: Number of folds
        grid: Shared lambda grid (built from the full data when omitted)
        config: Solver settings; ``seed`` drives the fold assignment and
            ``threads`` bounds the parallel folds
        gamma: MCP regularization parameter
        grid_size: Grid size when ``grid`` is omitted
        ratio: Grid ratio when ``grid`` is omitted
        folds: Explicit held-out index sets (overrides stratification)

    Returns:
        CrossValidation with lambda_opt, the averaged curve, the grid and per-fold curves

    Raises:
        SelectionError: If no stratification with events in every fold is found
    """
    config = config or SolverConfig()
    if folds is None:
        if K < 2:
            raise ValueError(f"K must be at least 2, got {K}")
        folds = _stratified_folds(dataset, K, config.seed)
    else:
        folds = [np.asarray(f, dtype=int) for f in folds]
        if any(dataset.status[f].sum() == 0 for f in folds):
            raise SelectionError("Every held-out fold needs at least one event")

    if grid is None:
        weights = kaplan_meier_weights(dataset.status)
        grid = lambda_grid(lambda_max(design, dataset, weights, kind, config), grid_size, ratio)
    grid = np.sort(np.asarray(grid, dtype=float))[::-1]

    fold_curves = Parallel(n_jobs=config.threads)(
        delayed(_fold_curve)(design, dataset, np.asarray(test), kind, penalty_kind, grid, gamma, config)
        for test in folds
    )
    fold_curves = np.vstack(fold_curves)
    curve = fold_curves.mean(axis=0)
    # first minimum on a decreasing grid favours the sparser model
    best = int(np.argmin(curve))
    logger.info(f"{kind.value} CV over {len(folds)} folds: lambda_opt={grid[best]:.4g} "
                f"(grid index {best} of {len(grid)})")
    return CrossValidation(float(grid[best]), curve, grid, fold_curves)


def hierarchy_support(fit: FitResult, design: InteractionDesign) -> np.ndarray:
    """Active set closed under strong hierarchy, plus any unpenalized columns."""
    support = set(int(j) for j in fit.active_set)
    for column in list(support):
        key = design.key_of(column)
        if key.kind is CoordinateKind.INTERACTION:
            support.add(design.column_of(CoordinateKey(CoordinateKind.ENV_MAIN, j=key.j)))
            support.add(design.column_of(CoordinateKey(CoordinateKind.GENE_MAIN, k=key.k)))
    return np.array(sorted(support), dtype=int)


def hierarchy_refit(fit: FitResult, design: InteractionDesign, dataset: SurvivalDataset,
                    weights: KMWeights, kind: LossKind, config: Optional[SolverConfig] = None) -> FitResult:
    """Add back parent main effects of selected interactions and refit without penalty.

    Args:
        fit: Penalized fit to close under hierarchy
        design: Interaction design
        dataset: Time-sorted observations
        weights: Kaplan-Meier weights
        kind: Loss function
        config: Solver settings

    Returns:
        The unpenalized fit on the closed support, or ``fit`` flagged
        ``refit_refused`` when the support is not smaller than the number of events
    """
    config = config or SolverConfig()
    support = hierarchy_support(fit, design)
    if len(support) >= dataset.n_events:
        logger.warning(f"Hierarchy refit refused: |S|={len(support)} >= {dataset.n_events} events")
        return replace(fit, refit_refused=True)

    unpenalized = np.flatnonzero(design.penalty_factors() == 0)
    refit = fit_penalized(design, dataset, weights, kind, PenaltySpec.lasso(0.0), config,
                          theta_init=fit.theta_hat, support=np.union1d(support, unpenalized),
                          threshold_output=False)
    logger.info(f"Hierarchy refit: {len(fit.active_set)} -> {len(support)} coordinates")
    return replace(refit, active_set=support, refitted=True)


def _resample_support(design: InteractionDesign, dataset: SurvivalDataset, kind: LossKind,
                      spec: PenaltySpec, drop: int, seed: np.random.SeedSequence,
                      config: SolverConfig):
    rng = np.random.Generator(np.random.Philox(seed))
    for redraws in range(MAX_REDRAWS + 1):
        removed = rng.choice(dataset.n, size=drop, replace=False) if drop else np.array([], dtype=int)
        keep = np.setdiff1d(np.arange(dataset.n), removed)
        if dataset.status[keep].sum() > 0:
            sub_design, sub_data, sub_weights = _sorted_subset(design, dataset, keep)
            fit = fit_penalized(sub_design, sub_data, sub_weights, kind, spec, config)
            return fit.active_set, redraws
    raise SelectionError(f"No resample with events after {MAX_REDRAWS} redraws")


def stability_selection(design: InteractionDesign, dataset: SurvivalDataset, kind: LossKind,
                        penalty: PenaltySpec, lambda_fixed: float, B: int = 200, drop: int = 10,
                        config: Optional[SolverConfig] = None) -> StabilityReport:
    """Selection frequencies over B fits, each with ``drop`` random subjects removed.

    The same ``lambda_fixed`` is used for every resample. Resample seeds are
    spawned from ``config.seed`` so the frequencies do not depend on the
    number of workers.

    Raises:
        SelectionError: If a resample still has no events after 10 redraws
    """
    config = config or SolverConfig()
    if not 0 <= drop < dataset.n:
        raise ValueError(f"drop must lie in [0, n), got {drop} with n={dataset.n}")
    if B < 1:
        raise ValueError(f"B must be at least 1, got {B}")

    spec = penalty.with_lambda(lambda_fixed)
    seeds = np.random.SeedSequence(config.seed).spawn(B)
    results = Parallel(n_jobs=config.threads)(
        delayed(_resample_support)(design, dataset, kind, spec, drop, seed, config) for seed in seeds
    )
    counts = np.zeros(design.d)
    redraws = 0
    for active, n_redraws in results:
        counts[active] += 1
        redraws += n_redraws
    if redraws:
        logger.warning(f"{redraws} resample(s) redrawn for lack of events")
    logger.info(f"Stability selection: B={B}, drop={drop}, lambda={lambda_fixed:.4g}")
    return StabilityReport(counts / B, B, drop, float(lambda_fixed), redraws, design.index_map)


def prescreen(dataset: SurvivalDataset, p_threshold: float = 0.1) -> np.ndarray:
    """Marginal screen of gene columns.

    Gene k is kept when the Wald p-value of its slope in the KM-weighted
    least-squares regression of log y on (1, z_k) is at most ``p_threshold``
    and its interquartile range exceeds the median IQR over all genes.

    Args:
        dataset: Observations (sorted internally)
        p_threshold: Significance cutoff in (0, 1]

    Returns:
        Sorted 0-based indices of retained genes

    Raises:
        DataError: If fewer than three events are available
    """
    if not 0 < p_threshold <= 1:
        raise ValueError(f"p_threshold must lie in (0, 1], got {p_threshold}")
    data = dataset.take(time_order(dataset))
    weights = kaplan_meier_weights(data.status).weights
    events = weights > 0
    m = int(events.sum())
    if m < 3:
        raise DataError(f"Prescreening needs at least 3 events, got {m}")

    w = weights[events] / weights[events].sum()
    log_y = np.log(data.times[events])
    z = data.genes[events]

    constant = np.ptp(data.genes, axis=0) == 0
    if constant.any():
        logger.warning(f"{int(constant.sum())} constant gene column(s) excluded from prescreening")

    z_bar = w @ z
    y_bar = w @ log_y
    zc = z - z_bar
    sxx = w @ (zc ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = (w @ (zc * (log_y - y_bar)[:, None])) / sxx
        residuals = (log_y - y_bar)[:, None] - zc * slope
        sigma2 = (w @ (residuals ** 2)) * m / (m - 2)
        se = np.sqrt(sigma2 / (m * sxx))
        t_stat = np.where(se > 0, slope / se, np.inf)
    p_values = 2.0 * stats.t.sf(np.abs(t_stat), df=m - 2)
    p_values = np.where(sxx > 0, p_values, 1.0)

    iqr = stats.iqr(data.genes, axis=0)
    keep = (p_values <= p_threshold) & (iqr > np.median(iqr)) & ~constant
    retained = np.flatnonzero(keep)
    logger.info(f"Prescreening kept {len(retained)} of {data.p} genes (p <= {p_threshold})")
    return retained


def _count_label(columns: Sequence[int], design: InteractionDesign) -> str:
    kinds = [design.key_of(int(c)).kind for c in columns]
    mains = sum(kind in (CoordinateKind.ENV_MAIN, CoordinateKind.GENE_MAIN) for kind in kinds)
    interactions = sum(kind is CoordinateKind.INTERACTION for kind in kinds)
    return f"{mains}/{interactions}"


def compare_supports(fits: Mapping[str, FitResult], design: InteractionDesign) -> pd.DataFrame:
    """Counts of selected main effects / interactions per method and pairwise overlaps.

    The diagonal holds each method's own counts, off-diagonal cells the
    counts of coordinates selected by both methods.
    """
    methods = list(fits)
    table = pd.DataFrame(index=methods, columns=methods, dtype=object)
    for a in methods:
        for b in methods:
            shared = np.intersect1d(fits[a].active_set, fits[b].active_set)
            table.loc[a, b] = _count_label(shared, design)
    return table


def write_metrics_csv(records: Sequence[Mapping], path: Union[str, Path]) -> None:
    """One row per (method, scenario, replicate) with auc, se, tpr, fpr."""
    columns = ["method", "scenario", "replicate", "auc", "se", "tpr", "fpr"]
    pd.DataFrame(list(records), columns=columns).to_csv(path, index=False, float_format="%.10g")


def write_stability_csv(report: StabilityReport, path: Union[str, Path]) -> None:
    report.to_frame().to_csv(path, index=False, float_format="%.10g")
