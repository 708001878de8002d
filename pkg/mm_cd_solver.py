#!/usr/bin/env python3

"""Penalized relative-error estimation: MM outer loop, coordinate descent inner loop.

Each MM step rebuilds a surrogate at the current estimate theta_s:

* the data term is the LARE/LAD quadratic majorizer, or the exact LPRE/LS
  objective;
* each penalty term phi(theta_j) is replaced by its local quadratic
  approximation with coefficient phi'(|theta_s_j|) / |theta_s_j|.

One coordinate-descent pass then visits j = 1..d in index order and minimizes
the one-dimensional slice with a safeguarded Newton method, keeping the linear
predictors current so each update costs O(n). For LARE and LAD the pass is
followed by a joint Newton step on the same surrogate over the movable
coordinates, and the majorizer denominators are floored at a decreasing
schedule (1e-4, 1e-6, then eps_denom).

Coordinates with |theta_s_j| < eps_zero are held at zero for the step. Every
``refresh_every`` steps, and before the convergence rule is allowed to stop
the loop, held coordinates whose slice gradient exceeds phi'(0) re-enter
through a soft-thresholded Newton step on the surrogate plus phi'(0)|theta_j|.

When the step rule is met the iterate is finished on its kinks: residuals and
penalized coefficients sitting next to zero are held there while the other
coordinates take Newton steps on the smooth remainder. The result counts as
converged when its subgradient optimality conditions hold, or when no
coordinate offers a descent direction.
"""

import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from loss_functions import (EPS_DENOM, LossKind, Surrogate, eta_curvature_at, eta_gradient_at, kink_slope,
                            objective_from_eta)
from penalties import (DEFAULT_GAMMA, EPS_ZERO, PenaltyKind, PenaltySpec, local_quadratic_coefficient,
                       penalty_curvature, penalty_derivative, total_penalty)
from survival_data import CoefficientVector, DataError, InteractionDesign, KMWeights, SurvivalDataset

logger = logging.getLogger(__name__)

STATIONARY_GRADIENT = 1e-12
MAX_HALVINGS = 40
# Denominator floors used before config.eps_denom on the majorized losses.
EPS_CONTINUATION = (1e-4, 1e-6)
KINK_WIDTHS = tuple(10.0 ** -k for k in range(10, 1, -1))
KINK_WIDTH = 1e-7
KKT_TOL = 1e-9
MAX_RESTARTS = 3


class SolverError(RuntimeError):
    """Raised when the objective becomes NaN during the MM iterations."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class SolverConfig:
    """Numerical settings of the MM-CD solver.

    The defaults reproduce the convergence rule ||theta^(s+1) - theta^(s)||_2 < 1e-6.
    """
    tol: float = 1e-6
    max_mm_iters: int = 500
    max_cd_passes: int = 1
    newton_max: int = 20
    eps_zero: float = EPS_ZERO
    eps_denom: float = EPS_DENOM
    seed: int = 2024
    refresh_every: int = 10
    threads: int = 1

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_mm_iters < 1 or self.max_cd_passes < 1 or self.newton_max < 1:
            raise ValueError("Iteration limits must be at least 1")
        if not (self.eps_zero > 0 and self.eps_denom > 0):
            raise ValueError("eps_zero and eps_denom must be positive")
        if self.refresh_every < 1:
            raise ValueError("refresh_every must be at least 1")


@dataclass(frozen=True, eq=False)
class FitResult:
    """Outcome of one penalized fit."""
    theta_hat: CoefficientVector
    objective_trace: np.ndarray
    mm_iterations: int
    converged: bool
    active_set: np.ndarray
    kind: LossKind
    penalty: PenaltySpec
    objective: float
    stalled: bool = False
    failed_updates: int = 0
    init_iterations: int = 0
    refitted: bool = False
    refit_refused: bool = False

    @property
    def lam(self) -> float:
        return self.penalty.lam

    @property
    def total_iterations(self) -> int:
        return self.mm_iterations + self.init_iterations


class FitProblem:
    """Solver arrays restricted to observations with positive weight."""

    def __init__(self, design: InteractionDesign, dataset: SurvivalDataset, weights: KMWeights, kind: LossKind):
        if design.n != dataset.n or len(weights) != dataset.n:
            raise DataError(
                f"Design ({design.n}), dataset ({dataset.n}) and weights ({len(weights)}) differ in length"
            )
        keep = weights.weights > 0
        if not keep.any():
            raise DataError("no events; weights identically zero")
        self.design = design
        self.kind = kind
        self.U = np.asfortranarray(design.rows[keep])
        self.y = dataset.times[keep]
        self.log_y = np.log(self.y)
        self.w = weights.weights[keep]
        self.factors = design.penalty_factors()
        self.zero_columns = ~np.any(self.U != 0.0, axis=0)

    def eta(self, values: np.ndarray) -> np.ndarray:
        return self.U @ values

    def objective(self, values: np.ndarray, spec: PenaltySpec) -> float:
        data = objective_from_eta(self.kind, self.y, self.eta(values), self.w)
        return data + total_penalty(values, spec, self.factors)

    def coefficients(self, values: np.ndarray) -> CoefficientVector:
        return CoefficientVector.like(self.design, values)

    def data_kinks(self, eta: np.ndarray, width: float) -> np.ndarray:
        """Observations whose residual eta - log y lies within ``width`` of the kink."""
        if self.kind.is_smooth:
            return np.zeros(len(self.y), dtype=bool)
        return np.abs(eta - self.log_y) <= width


class MajorizerContext:
    """Surrogate of L_{n,lambda}(.; theta_s) plus the running state of a CD pass.

    ``theta`` and ``eta`` are updated in place as coordinates move.
    """

    def __init__(self, problem: FitProblem, theta_s: np.ndarray, spec: PenaltySpec,
                 config: SolverConfig, support: np.ndarray, refresh: bool,
                 eps_denom: Optional[float] = None):
        self.problem = problem
        self.spec = spec
        self.config = config
        self.support = support
        self.refresh = refresh
        floor = config.eps_denom if eps_denom is None else eps_denom
        self.surrogate = Surrogate.at(problem.kind, problem.y, problem.w, problem.eta(theta_s), floor)
        penalized = problem.factors > 0
        self.coefficients = np.where(
            penalized, local_quadratic_coefficient(theta_s, spec, config.eps_zero), 0.0
        )
        # phi'(0) scaled by the penalty factor
        self.entry_threshold = np.where(penalized, penalty_derivative(0.0, spec), 0.0)
        self.theta = theta_s.copy()
        self.eta = problem.eta(self.theta)
        self.entered = np.zeros_like(support)
        self.failed: List[int] = []

    def column(self, j: int) -> np.ndarray:
        return self.problem.U[:, j]

    def slice_value(self, j: int, t: float, base: np.ndarray) -> float:
        coefficient = self.coefficients[j]
        penalty = 0.5 * coefficient * t * t if np.isfinite(coefficient) else 0.0
        return self.surrogate.value(base + self.column(j) * t) + penalty

    def move(self, j: int, t: float) -> None:
        delta = t - self.theta[j]
        if delta != 0.0:
            self.eta += self.column(j) * delta
            self.theta[j] = t


def coordinate_update_1d(j: int, state: MajorizerContext) -> float:
    """Minimize the slice of the surrogate in coordinate ``j``.

    Safeguarded Newton: at most ``newton_max`` steps, each halved until the
    slice value does not increase. A nonfinite derivative leaves the
    coordinate where it is and records ``j`` in ``state.failed``.

    Args:
        j: Coordinate index
        state: Majorizer context holding the running theta and eta

    Returns:
        The new value of theta_j
    """
    u = state.column(j)
    coefficient = state.coefficients[j]
    if not np.isfinite(coefficient):
        return 0.0
    t = state.theta[j]
    base = state.eta - u * t
    f_t = state.slice_value(j, t, base)
    step_tol = state.config.tol * 1e-3

    for _ in range(state.config.newton_max):
        g_obs, h_obs = state.surrogate.eta_derivatives(base + u * t)
        grad = float(u @ g_obs) + coefficient * t
        hess = float((u * u) @ h_obs) + coefficient
        if not (np.isfinite(grad) and np.isfinite(hess)) or hess <= 0:
            state.failed.append(j)
            logger.debug(f"Newton update failed on coordinate {j} (grad={grad}, hess={hess})")
            return t
        if abs(grad) < STATIONARY_GRADIENT:
            break

        step = grad / hess
        candidate = t - step
        f_candidate = state.slice_value(j, candidate, base)
        halvings = 0
        while not f_candidate <= f_t and halvings < MAX_HALVINGS:
            step *= 0.5
            candidate = t - step
            f_candidate = state.slice_value(j, candidate, base)
            halvings += 1
        if not f_candidate <= f_t:
            break
        t, f_t = candidate, f_candidate
        if abs(step) <= step_tol:
            break
    return t


def _enter_coordinate(j: int, state: MajorizerContext) -> float:
    """Soft-thresholded Newton step for a coordinate held at zero."""
    threshold = state.entry_threshold[j]
    u = state.column(j)
    g_obs, h_obs = state.surrogate.eta_derivatives(state.eta)
    grad = float(u @ g_obs)
    if not abs(grad) > threshold:
        return 0.0
    hess = float((u * u) @ h_obs)
    if not (np.isfinite(grad) and np.isfinite(hess)) or hess <= 0:
        state.failed.append(j)
        return 0.0

    f_zero = state.surrogate.value(state.eta)
    t = -np.sign(grad) * (abs(grad) - threshold) / hess
    for _ in range(MAX_HALVINGS):
        if state.surrogate.value(state.eta + u * t) + threshold * abs(t) < f_zero:
            return t
        t *= 0.5
    return 0.0


def _reenter_coordinate(j: int, state: MajorizerContext) -> float:
    """Revisit an entered coordinate on the same soft-thresholded slice."""
    t_old = state.theta[j]
    u = state.column(j)
    threshold = state.entry_threshold[j]
    f_old = state.surrogate.value(state.eta) + threshold * abs(t_old)
    state.move(j, 0.0)
    t = _enter_coordinate(j, state)
    if state.surrogate.value(state.eta + u * t) + threshold * abs(t) <= f_old:
        return t
    return t_old


def _entry_candidates(state: MajorizerContext, held: np.ndarray) -> np.ndarray:
    """Screen held coordinates once per pass; exact checks happen in order."""
    if not held.any():
        return held
    g_obs, _ = state.surrogate.eta_derivatives(state.eta)
    gradient = np.zeros_like(state.theta)
    idx = np.flatnonzero(held)
    gradient[idx] = state.problem.U[:, idx].T @ g_obs
    return held & (np.abs(gradient) > 0.5 * state.entry_threshold)


def cd_pass(theta_s: CoefficientVector, context: MajorizerContext) -> CoefficientVector:
    """One coordinate-descent pass over j = 1..d on a frozen majorizer.

    Coordinates before j already carry their new values and those after j
    still carry the values the pass started from.

    Args:
        theta_s: Starting point of the pass
        context: Majorizer built at the current MM iterate

    Returns:
        The coefficients after the pass
    """
    if not np.array_equal(context.theta, theta_s.values):
        for j in np.flatnonzero(context.theta != theta_s.values):
            context.move(int(j), float(theta_s.values[j]))

    held = context.support & ~np.isfinite(context.coefficients) & ~context.entered
    candidates = _entry_candidates(context, held) if context.refresh else np.zeros_like(held)

    for j in np.flatnonzero(context.support):
        j = int(j)
        if context.problem.zero_columns[j]:
            context.move(j, 0.0)
        elif context.entered[j]:
            context.move(j, _reenter_coordinate(j, context))
        elif held[j]:
            t = _enter_coordinate(j, context) if candidates[j] else 0.0
            context.move(j, t)
            if t != 0.0:
                context.entered[j] = True
        else:
            context.move(j, coordinate_update_1d(j, context))
    return context.problem.coefficients(context.theta.copy())


def block_update(state: MajorizerContext) -> None:
    """Joint Newton step on the surrogate over every movable coordinate.

    A residual whose denominator sits at the floor can only stay at zero while
    two or more coordinates move together, which a single-coordinate pass
    never does. Skipped when the block is wider than the number of rows.
    """
    movable = state.support & np.isfinite(state.coefficients) & ~state.problem.zero_columns
    idx = np.flatnonzero(movable)
    if idx.size == 0 or idx.size > state.problem.U.shape[0]:
        return
    U = state.problem.U[:, idx]
    coefficients = state.coefficients[idx]
    t = state.theta[idx]
    eta = state.eta
    f_t = state.surrogate.value(eta) + 0.5 * float(coefficients @ (t * t))
    step_tol = state.config.tol * 1e-3

    for _ in range(state.config.newton_max):
        g_obs, h_obs = state.surrogate.eta_derivatives(eta)
        grad = U.T @ g_obs + coefficients * t
        hess = (U * h_obs[:, None]).T @ U + np.diag(coefficients)
        if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
            logger.debug("Block update skipped after nonfinite derivatives")
            break
        if np.max(np.abs(grad)) < STATIONARY_GRADIENT:
            break
        step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        accepted = False
        for _ in range(MAX_HALVINGS):
            candidate = t - step
            eta_candidate = eta - U @ step
            f_candidate = state.surrogate.value(eta_candidate) + 0.5 * float(coefficients @ (candidate * candidate))
            if f_candidate <= f_t:
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            break
        t, eta, f_t = candidate, eta_candidate, f_candidate
        if np.linalg.norm(step) <= step_tol:
            break

    state.theta[idx] = t
    state.eta = state.problem.eta(state.theta)


def _mm_step(problem: FitProblem, values: np.ndarray, spec: PenaltySpec, config: SolverConfig,
             support: np.ndarray, refresh: bool, eps_denom: float):
    context = MajorizerContext(problem, values, spec, config, support, refresh, eps_denom)
    theta = problem.coefficients(values)
    for _ in range(config.max_cd_passes):
        theta = cd_pass(theta, context)
    if not problem.kind.is_smooth:
        block_update(context)
        theta = problem.coefficients(context.theta.copy())
    return theta.values.copy(), len(context.failed)


def _support_mask(d: int, support: Optional[Sequence[int]]) -> np.ndarray:
    if support is None:
        return np.ones(d, dtype=bool)
    mask = np.zeros(d, dtype=bool)
    mask[np.asarray(list(support), dtype=int)] = True
    return mask


def directional_derivatives(problem: FitProblem, values: np.ndarray, spec: PenaltySpec,
                            kink_width: float = KINK_WIDTH) -> Tuple[np.ndarray, np.ndarray]:
    """One-sided derivatives of L_{n,lambda} along +e_j and -e_j for every coordinate.

    Residuals within ``kink_width`` of zero and coefficients exactly at zero
    contribute their full kink slope in both directions. A negative entry
    marks a coordinate along which the objective still decreases.

    Returns:
        Tuple (plus, minus)
    """
    eta = problem.eta(values)
    kinks = problem.data_kinks(eta, kink_width)
    g_obs = np.where(kinks, 0.0, problem.w * eta_gradient_at(problem.kind, problem.y, eta))
    smooth = problem.U.T @ g_obs
    spread = np.abs(problem.U[kinks]).T @ (problem.w[kinks] * kink_slope(problem.kind))
    slope = problem.factors * penalty_derivative(np.abs(values), spec)
    at_zero = values == 0.0
    signed = np.where(at_zero, 0.0, np.sign(values) * slope)
    corner = spread + np.where(at_zero, slope, 0.0)
    return smooth + signed + corner, -smooth - signed + corner


def _has_descent(problem: FitProblem, values: np.ndarray, spec: PenaltySpec, support: np.ndarray,
                 config: SolverConfig) -> bool:
    plus, minus = directional_derivatives(problem, values, spec)
    movable = support & ~problem.zero_columns
    return bool(np.any(np.minimum(plus, minus)[movable] < -config.tol))


@dataclass(frozen=True, eq=False)
class KinkSolution:
    """Iterate finished with a set of residuals and coefficients held on their kinks."""
    values: np.ndarray
    objective: float
    certified: bool


def _smooth_derivatives(problem: FitProblem, theta: np.ndarray, spec: PenaltySpec, idx: np.ndarray,
                        kinks: np.ndarray):
    """Gradient and Hessian over ``idx`` of everything except the kink terms."""
    eta = problem.eta(theta)
    g_obs = np.where(kinks, 0.0, problem.w * eta_gradient_at(problem.kind, problem.y, eta))
    h_obs = np.where(kinks, 0.0, problem.w * eta_curvature_at(problem.kind, problem.y, eta))
    U = problem.U[:, idx]
    t = theta[idx]
    factors = problem.factors[idx]
    grad = U.T @ g_obs + factors * np.sign(t) * penalty_derivative(np.abs(t), spec)
    hess = (U * h_obs[:, None]).T @ U + np.diag(factors * penalty_curvature(np.abs(t), spec))
    return grad, hess, g_obs


def _certify(problem: FitProblem, theta: np.ndarray, spec: PenaltySpec, idx: np.ndarray,
             zeroed: np.ndarray, kinks: np.ndarray) -> bool:
    """Check 0 lies in the subdifferential of L_{n,lambda} at ``theta``.

    Multipliers of the residual kinks come from the free coordinates and must
    stay within w_i times the kink slope; coefficients held at zero must feel a
    pull no larger than phi'(0).
    """
    grad, _, g_obs = _smooth_derivatives(problem, theta, spec, idx, kinks)
    n_kinks = int(kinks.sum())
    if n_kinks and idx.size:
        A = problem.U[np.ix_(kinks, idx)]
        mu = np.linalg.lstsq(A.T, -grad, rcond=None)[0]
        residual = grad + A.T @ mu
        bound = problem.w[kinks] * kink_slope(problem.kind)
        if np.any(np.abs(mu) > bound * (1.0 + KKT_TOL) + KKT_TOL):
            return False
    else:
        mu = np.zeros(n_kinks)
        residual = grad
    if np.max(np.abs(residual), initial=0.0) > KKT_TOL * (1.0 + np.max(np.abs(grad), initial=0.0)):
        return False
    if zeroed.any():
        z = np.flatnonzero(zeroed)
        pull = problem.U[:, z].T @ g_obs + problem.U[np.ix_(kinks, z)].T @ mu
        limit = problem.factors[z] * penalty_derivative(0.0, spec)
        if np.any(np.abs(pull) > limit * (1.0 + KKT_TOL) + KKT_TOL):
            return False
    return True


def _manifold_newton(problem: FitProblem, theta: np.ndarray, spec: PenaltySpec, config: SolverConfig,
                     idx: np.ndarray, kinks: np.ndarray, basis: np.ndarray) -> Optional[np.ndarray]:
    """Newton on the smooth part along the null space of the held residuals."""
    theta = theta.copy()
    f_theta = problem.objective(theta, spec)
    for _ in range(config.newton_max):
        grad, hess, _ = _smooth_derivatives(problem, theta, spec, idx, kinks)
        reduced = basis.T @ grad
        if np.max(np.abs(reduced)) <= KKT_TOL * 1e-3:
            break
        try:
            factor = linalg.cho_factor(basis.T @ hess @ basis)
        except linalg.LinAlgError:
            return None
        step = basis @ linalg.cho_solve(factor, reduced)
        accepted = False
        for _ in range(MAX_HALVINGS):
            candidate = theta.copy()
            candidate[idx] -= step
            f_candidate = problem.objective(candidate, spec)
            if f_candidate <= f_theta:
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            break
        theta, f_theta = candidate, f_candidate
        if np.linalg.norm(step) <= config.tol * 1e-6:
            break
    return theta


def _solve_on_kinks(problem: FitProblem, values: np.ndarray, spec: PenaltySpec, config: SolverConfig,
                    idx: np.ndarray, zeroed: np.ndarray, kinks: np.ndarray) -> Optional[KinkSolution]:
    theta = np.where(zeroed, 0.0, values)
    if idx.size:
        t = theta[idx]
        if kinks.any():
            A = problem.U[np.ix_(kinks, idx)]
            b = problem.log_y[kinks]
            if A.shape[0] > idx.size:
                return None
            t = t - np.linalg.lstsq(A, A @ t - b, rcond=None)[0]
            if np.max(np.abs(A @ t - b)) > KKT_TOL * (1.0 + np.max(np.abs(b))):
                return None
            basis = linalg.null_space(A)
        else:
            basis = np.eye(idx.size)
        theta[idx] = t
        if basis.shape[1]:
            theta = _manifold_newton(problem, theta, spec, config, idx, kinks, basis)
            if theta is None:
                return None
    objective = problem.objective(theta, spec)
    if not np.isfinite(objective):
        return None
    return KinkSolution(theta, objective, _certify(problem, theta, spec, idx, zeroed, kinks))


def _preferred(candidate: KinkSolution, best: KinkSolution) -> bool:
    slack = 1e-12 * (1.0 + abs(best.objective))
    if candidate.certified != best.certified and abs(candidate.objective - best.objective) <= slack:
        return candidate.certified
    return candidate.objective < best.objective


def kink_polish(problem: FitProblem, values: np.ndarray, spec: PenaltySpec, config: SolverConfig,
                support: np.ndarray) -> Optional[KinkSolution]:
    """Finish an iterate exactly on the kinks it sits near.

    For each width in KINK_WIDTHS, residuals and penalized coefficients within
    that width of zero are held at zero and the rest of the support takes
    Newton steps on the smooth remainder. The lowest objective wins, with
    certified solutions preferred on ties.

    Returns:
        The finished iterate, or None when nothing at least as good was found
    """
    movable = support & ~problem.zero_columns
    penalized = movable & (problem.factors > 0) if spec.lam > 0 else np.zeros_like(movable)
    eta = problem.eta(values)
    current = problem.objective(values, spec)
    best: Optional[KinkSolution] = None
    seen = set()
    for width in KINK_WIDTHS:
        kinks = problem.data_kinks(eta, width)
        zeroed = penalized & (np.abs(values) <= max(width, config.eps_zero))
        idx = np.flatnonzero(movable & ~zeroed)
        key = (kinks.tobytes(), zeroed.tobytes())
        if idx.size > problem.U.shape[0] or key in seen:
            continue
        seen.add(key)
        candidate = _solve_on_kinks(problem, values, spec, config, idx, zeroed, kinks)
        if candidate is not None and (best is None or _preferred(candidate, best)):
            best = candidate
    if best is None or best.objective > current + 1e-12 * (1.0 + abs(current)):
        return None
    return best


def _eps_schedule(kind: LossKind, config: SolverConfig) -> List[float]:
    if kind.is_smooth:
        return [config.eps_denom]
    return [eps for eps in EPS_CONTINUATION if eps > config.eps_denom] + [config.eps_denom]


def _run_mm(problem: FitProblem, theta0: np.ndarray, spec: PenaltySpec, config: SolverConfig,
            support: np.ndarray, threshold_output: bool) -> FitResult:
    values = np.where(support, theta0, 0.0)
    objective = problem.objective(values, spec)
    if np.isnan(objective):
        raise SolverError("NaN objective at MM iteration 0", iteration=0)
    trace = [objective]
    schedule = _eps_schedule(problem.kind, config)
    converged = stalled = pending_refresh = False
    stage = restarts = failed = iterations = 0

    for s in range(config.max_mm_iters):
        refresh = pending_refresh or s % config.refresh_every == 0
        new_values, n_failed = _mm_step(problem, values, spec, config, support, refresh, schedule[stage])
        failed += n_failed
        new_objective = problem.objective(new_values, spec)
        if np.isnan(new_objective):
            raise SolverError(f"NaN objective at MM iteration {s + 1}", iteration=s + 1)
        step = float(np.linalg.norm(new_values - values))

        rejected = new_objective > trace[-1]
        if rejected:
            # only the eps_denom clamp or the eta clamp can break MM descent
            logger.debug(f"MM step {s + 1} rejected: {new_objective:.12g} > {trace[-1]:.12g}")
        else:
            values = new_values
            trace.append(new_objective)
            iterations = s + 1
            logger.debug(f"MM iteration {iterations}: objective={new_objective:.12g} step={step:.3g}")
            if step >= config.tol:
                pending_refresh = False
                continue
            if not refresh:
                pending_refresh = True
                continue

        if stage < len(schedule) - 1:
            floored = problem.data_kinks(problem.eta(values), schedule[stage])
            if floored.any():
                stage += 1
                pending_refresh = False
                continue
            stage = len(schedule) - 1

        polished = kink_polish(problem, values, spec, config, support)
        if polished is not None:
            values = polished.values
            trace.append(polished.objective)
            if polished.certified:
                converged = True
                break
        descent = _has_descent(problem, values, spec, support, config)
        if descent and restarts < MAX_RESTARTS:
            restarts += 1
            stage = 0
            pending_refresh = False
            logger.debug(f"Descent direction left after MM iteration {s + 1}; restarting the floor schedule")
            continue
        stalled = rejected
        converged = not descent and (pending_refresh or not rejected)
        break
    else:
        polished = kink_polish(problem, values, spec, config, support)
        if polished is not None:
            values = polished.values
            trace.append(polished.objective)
            converged = polished.certified

    if not converged:
        logger.warning(f"{problem.kind.value} fit at lambda={spec.lam:.4g} did not converge "
                       f"after {iterations} MM iterations")
    if failed:
        logger.warning(f"{failed} coordinate update(s) left unchanged after nonfinite derivatives")

    if threshold_output:
        values = np.where(np.abs(values) < config.eps_zero, 0.0, values)
    active = np.flatnonzero((values != 0.0) & (problem.factors > 0))
    return FitResult(
        theta_hat=problem.coefficients(values),
        objective_trace=np.asarray(trace),
        mm_iterations=iterations,
        converged=converged,
        active_set=active,
        kind=problem.kind,
        penalty=spec,
        objective=problem.objective(values, spec),
        stalled=stalled,
        failed_updates=failed,
    )


def penalized_objective(theta: CoefficientVector, design: InteractionDesign, dataset: SurvivalDataset,
                        weights: KMWeights, kind: LossKind, spec: PenaltySpec) -> float:
    """L_{n,lambda}(theta) = Q_n(theta) + sum_j phi_lambda(theta_j)."""
    return FitProblem(design, dataset, weights, kind).objective(theta.values, spec)


def _lasso_fit(problem: FitProblem, lam: float, config: SolverConfig, support: np.ndarray) -> FitResult:
    return _run_mm(problem, np.zeros(problem.design.d), PenaltySpec.lasso(lam), config, support, True)


def lasso_init(design: InteractionDesign, dataset: SurvivalDataset, weights: KMWeights, kind: LossKind,
               lam: float, config: Optional[SolverConfig] = None,
               support: Optional[Sequence[int]] = None) -> CoefficientVector:
    """Lasso estimate at ``lam`` from the all-zero vector, used as theta^(0).

    A fit that does not converge within max_mm_iters still returns its best iterate.
    """
    config = config or SolverConfig()
    problem = FitProblem(design, dataset, weights, kind)
    return _lasso_fit(problem, lam, config, _support_mask(design.d, support)).theta_hat


def fit_penalized(design: InteractionDesign, dataset: SurvivalDataset, weights: KMWeights, kind: LossKind,
                  penalty: PenaltySpec, config: Optional[SolverConfig] = None,
                  theta_init: Optional[CoefficientVector] = None,
                  support: Optional[Sequence[int]] = None,
                  threshold_output: bool = True) -> FitResult:
    """Minimize L_{n,lambda}(theta) by MM with coordinate descent.

    Args:
        design: Interaction design aligned with ``dataset``
        dataset: Time-sorted observations
        weights: Kaplan-Meier weights
        kind: Loss function
        penalty: Penalty family and tuning parameter
        config: Solver settings
        theta_init: Starting point; the Lasso estimate at the same lambda when omitted
        support: Coordinates allowed to move (all others stay at zero)
        threshold_output: Set |theta_j| < eps_zero to exactly zero in the result

    Returns:
        FitResult with the estimate and its objective trace

    Raises:
        SolverError: If the objective becomes NaN
        DataError: If the inputs are inconsistent or carry no events
    """
    config = config or SolverConfig()
    problem = FitProblem(design, dataset, weights, kind)
    mask = _support_mask(design.d, support)

    init_iterations = 0
    if theta_init is not None:
        if theta_init.d != design.d:
            raise DataError(f"theta_init has length {theta_init.d}, design has {design.d} columns")
        theta0 = theta_init.values.copy()
    elif penalty.kind is PenaltyKind.LASSO:
        theta0 = np.zeros(design.d)
    else:
        initial = _lasso_fit(problem, penalty.lam, config, mask)
        theta0 = initial.theta_hat.values.copy()
        init_iterations = initial.mm_iterations

    result = _run_mm(problem, theta0, penalty, config, mask, threshold_output)
    logger.debug(f"{kind.value}/{penalty.kind.value} lambda={penalty.lam:.4g}: "
                 f"{result.mm_iterations} MM iterations, |active|={len(result.active_set)}, "
                 f"objective={result.objective:.8g}")
    return replace(result, init_iterations=init_iterations)


def _null_fit(problem: FitProblem, config: SolverConfig) -> np.ndarray:
    """Fit of the unpenalized columns alone (all-zero when there are none)."""
    unpenalized = problem.factors == 0
    if not unpenalized.any():
        return np.zeros(problem.design.d)
    fit = _run_mm(problem, np.zeros(problem.design.d), PenaltySpec.lasso(0.0), config, unpenalized, False)
    return fit.theta_hat.values.copy()


def lambda_max(design: InteractionDesign, dataset: SurvivalDataset, weights: KMWeights, kind: LossKind,
               config: Optional[SolverConfig] = None) -> float:
    """Largest |dQ_n / dtheta_j| over penalized coordinates at the null fit."""
    config = config or SolverConfig()
    problem = FitProblem(design, dataset, weights, kind)
    eta = problem.eta(_null_fit(problem, config))
    gradient = problem.U.T @ (problem.w * eta_gradient_at(kind, problem.y, eta))
    penalized = problem.factors > 0
    if not penalized.any():
        return 0.0
    return float(np.max(np.abs(gradient[penalized])))


def lambda_grid(lam_max: float, grid_size: int = 100, ratio: float = 0.01) -> np.ndarray:
    """Log-spaced grid from ``lam_max`` down to ``ratio * lam_max``; [0] when lam_max is 0."""
    if grid_size < 2:
        raise ValueError(f"grid_size must be at least 2, got {grid_size}")
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    if not lam_max > 0:
        return np.array([0.0])
    return lam_max * np.logspace(0.0, np.log10(ratio), grid_size)


def lambda_path(design: InteractionDesign, dataset: SurvivalDataset, weights: KMWeights, kind: LossKind,
                penalty_kind: PenaltyKind = PenaltyKind.MCP, grid_size: int = 100, ratio: float = 0.01,
                config: Optional[SolverConfig] = None, gamma: float = DEFAULT_GAMMA,
                grid: Optional[Sequence[float]] = None, warm_start: bool = True) -> List[FitResult]:
    """Fit a decreasing lambda sequence, warm-starting each fit from the previous one.

    Args:
        design: Interaction design
        dataset: Time-sorted observations
        weights: Kaplan-Meier weights
        kind: Loss function
        penalty_kind: MCP or Lasso
        grid_size: Number of lambda values
        ratio: Smallest lambda as a fraction of lambda_max
        config: Solver settings
        gamma: MCP regularization parameter
        grid: Explicit lambda values (overrides grid_size/ratio)
        warm_start: Start each fit from the previous estimate

    Returns:
        One FitResult per lambda, largest lambda first
    """
    config = config or SolverConfig()
    if grid is None:
        grid = lambda_grid(lambda_max(design, dataset, weights, kind, config), grid_size, ratio)
    grid = np.sort(np.asarray(grid, dtype=float))[::-1]

    problem = FitProblem(design, dataset, weights, kind)
    theta = problem.coefficients(_null_fit(problem, config))
    path: List[FitResult] = []
    for lam in grid:
        spec = PenaltySpec(penalty_kind, float(lam), gamma)
        fit = fit_penalized(design, dataset, weights, kind, spec, config,
                            theta_init=theta if warm_start else None)
        path.append(fit)
        theta = fit.theta_hat
    logger.info(f"{kind.value} path: {len(path)} lambdas, "
                f"{sum(f.total_iterations for f in path)} MM iterations in total")
    return path
