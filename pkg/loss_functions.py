#!/usr/bin/env python3

"""Relative-error losses (LARE, LPRE), the LS/LAD comparators and their MM majorizers.

LARE and LPRE are the two concrete instances g(a, b) = a + b and g(a, b) = ab of
the general relative error criterion, with

    a = |y - exp(eta)| / y,    b = |y - exp(eta)| / exp(eta).

LS and LAD work on log(y). Everything here is a pure function of its inputs.
"""

import logging
from enum import Enum
from typing import Tuple, Union

import numpy as np

from survival_data import CoefficientVector, DataError, InteractionDesign, KMWeights, SurvivalDataset

logger = logging.getLogger(__name__)

ETA_CLAMP = 700.0
EPS_DENOM = 1e-8

ArrayLike = Union[float, np.ndarray]


class LossKind(str, Enum):
    LARE = "lare"
    LPRE = "lpre"
    LAD = "lad"
    LS = "ls"

    @property
    def uses_log_time(self) -> bool:
        """LS and LAD operate on log(y); LARE and LPRE on y itself."""
        return self in (LossKind.LAD, LossKind.LS)

    @property
    def is_smooth(self) -> bool:
        """Smooth losses are minimized directly; the others through a majorizer."""
        return self in (LossKind.LPRE, LossKind.LS)

    @classmethod
    def parse(cls, token: str) -> "LossKind":
        try:
            return cls(token.strip().lower())
        except ValueError:
            accepted = ", ".join(kind.value for kind in cls)
            raise ValueError(f"Unknown method '{token}' (accepted: {accepted})")


def _check_times(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if np.any(~(y > 0)):
        raise DataError("Relative errors need strictly positive times")
    return y


def _ratios(y: np.ndarray, eta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Return (exp(eta) / y, y / exp(eta)) on the clamped predictor."""
    log_y = np.log(y)
    eta = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
    return np.exp(eta - log_y), np.exp(log_y - eta)


def relative_terms(y: ArrayLike, eta: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    """Relative errors with respect to the target (a) and the predictor (b).

    Args:
        y: Observed positive times
        eta: Linear predictors u_i' theta

    Returns:
        Tuple (a, b) with a = |y - e^eta| / y and b = |y - e^eta| / e^eta

    Raises:
        DataError: If any y is not strictly positive
    """
    y = _check_times(y)
    m, v = _ratios(y, np.asarray(eta, dtype=float))
    return np.abs(1.0 - m), np.abs(1.0 - v)


def observation_losses(kind: LossKind, y: ArrayLike, eta: ArrayLike) -> np.ndarray:
    """Unweighted per-observation loss for ``kind``."""
    y = _check_times(y)
    eta = np.asarray(eta, dtype=float)
    if kind is LossKind.LS:
        return (np.log(y) - eta) ** 2
    if kind is LossKind.LAD:
        return np.abs(np.log(y) - eta)
    a, b = relative_terms(y, eta)
    if kind is LossKind.LARE:
        return a + b
    return a * b


def objective_from_eta(kind: LossKind, y: np.ndarray, eta: np.ndarray, w: np.ndarray) -> float:
    """Weighted objective sum_i w_i loss_i; +inf once a weighted |eta| hits the clamp."""
    w = np.asarray(w, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if np.any(np.abs(eta[w > 0]) >= ETA_CLAMP):
        return np.inf
    return float(np.dot(w, observation_losses(kind, y, eta)))


def weighted_objective(kind: LossKind, theta: CoefficientVector, design: InteractionDesign,
                       dataset: SurvivalDataset, weights: KMWeights) -> float:
    """Q_n(theta) for LARE/LPRE, or the weighted LS/LAD criterion on log(y).

    Args:
        kind: Loss to evaluate
        theta: Coefficients aligned with the design columns
        design: Interaction design built from ``dataset``
        dataset: Time-sorted observations
        weights: Kaplan-Meier weights aligned with ``dataset``

    Returns:
        Nonnegative objective value
    """
    if design.d != theta.d or design.n != dataset.n or len(weights) != dataset.n:
        raise DataError("Dimensions of theta, design, dataset and weights do not agree")
    eta = design.rows @ theta.values
    return objective_from_eta(kind, dataset.times, eta, weights.weights)


def lpre_eta_derivatives(y: ArrayLike, eta: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient and Hessian of y e^{-eta} + e^{eta} / y - 2 with respect to eta."""
    y = _check_times(y)
    m, v = _ratios(y, np.asarray(eta, dtype=float))
    return m - v, m + v


def eta_gradient_at(kind: LossKind, y: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Per-observation (sub)gradient of the unweighted loss with respect to eta.

    At the kinks of LARE and LAD the zero subgradient is returned.
    """
    y = _check_times(y)
    eta = np.asarray(eta, dtype=float)
    if kind is LossKind.LS:
        return -2.0 * (np.log(y) - eta)
    if kind is LossKind.LAD:
        return -np.sign(np.log(y) - eta)
    m, v = _ratios(y, eta)
    if kind is LossKind.LPRE:
        return m - v
    return np.sign(m - 1.0) * m + np.sign(1.0 - v) * v


def eta_curvature_at(kind: LossKind, y: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Per-observation second derivative in eta away from the kinks.

    LARE equals |e^eta / y - y e^-eta|, so its curvature off the kink is the same
    expression; LAD is piecewise linear.
    """
    y = _check_times(y)
    eta = np.asarray(eta, dtype=float)
    if kind is LossKind.LS:
        return np.full_like(eta, 2.0)
    if kind is LossKind.LAD:
        return np.zeros_like(eta)
    m, v = _ratios(y, eta)
    if kind is LossKind.LPRE:
        return m + v
    return np.abs(m - v)


def kink_slope(kind: LossKind) -> float:
    """One-sided slope of the unweighted loss at a zero residual (0 for smooth losses)."""
    if kind is LossKind.LARE:
        return 2.0
    if kind is LossKind.LAD:
        return 1.0
    return 0.0


class Surrogate:
    """Data term of the MM surrogate as a function of the linear predictor.

    For LARE and LAD this is the quadratic majorizer built at eta_s, with
    every denominator clamped from below at ``eps_denom``; it includes the
    constant terms, so it equals the objective at eta_s whenever no clamp is
    active. For LPRE and LS it is the exact objective.
    """

    def __init__(self, kind: LossKind, y: np.ndarray, w: np.ndarray,
                 c1: np.ndarray = None, c2: np.ndarray = None, constant: float = 0.0):
        self.kind = kind
        self.y = y
        self.w = w
        self.log_y = np.log(y)
        self.c1 = c1
        self.c2 = c2
        self.constant = constant

    @classmethod
    def at(cls, kind: LossKind, y: np.ndarray, w: np.ndarray, eta_s: np.ndarray,
           eps_denom: float = EPS_DENOM) -> "Surrogate":
        y = _check_times(y)
        w = np.asarray(w, dtype=float)
        if kind is LossKind.LARE:
            m, v = _ratios(y, eta_s)
            d1 = np.maximum(np.abs(1.0 - m), eps_denom)
            d2 = np.maximum(np.abs(1.0 - v), eps_denom)
            return cls(kind, y, w, w / (2.0 * d1), w / (2.0 * d2), float(np.dot(w, d1 + d2)) / 2.0)
        if kind is LossKind.LAD:
            d = np.maximum(np.abs(np.log(y) - eta_s), eps_denom)
            return cls(kind, y, w, w / (2.0 * d), None, float(np.dot(w, d)) / 2.0)
        return cls(kind, y, w)

    def value(self, eta: np.ndarray) -> float:
        if np.any(np.abs(eta) >= ETA_CLAMP):
            return np.inf
        if self.kind is LossKind.LARE:
            m, v = _ratios(self.y, eta)
            return float(np.dot(self.c1, (1.0 - m) ** 2) + np.dot(self.c2, (1.0 - v) ** 2)) + self.constant
        if self.kind is LossKind.LAD:
            return float(np.dot(self.c1, (self.log_y - eta) ** 2)) + self.constant
        if self.kind is LossKind.LS:
            return float(np.dot(self.w, (self.log_y - eta) ** 2))
        m, v = _ratios(self.y, eta)
        return float(np.dot(self.w, v + m - 2.0))

    def eta_derivatives(self, eta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Per-observation first and (positive) second derivatives in eta."""
        if self.kind is LossKind.LARE:
            m, v = _ratios(self.y, eta)
            grad = -2.0 * self.c1 * m * (1.0 - m) + 2.0 * self.c2 * v * (1.0 - v)
            exact = 2.0 * self.c1 * m * (2.0 * m - 1.0) + 2.0 * self.c2 * v * (2.0 * v - 1.0)
            # exact curvature goes negative where m or v < 1/2
            gauss_newton = 2.0 * self.c1 * m * m + 2.0 * self.c2 * v * v
            return grad, np.maximum(exact, gauss_newton)
        if self.kind is LossKind.LAD:
            return -2.0 * self.c1 * (self.log_y - eta), 2.0 * self.c1
        if self.kind is LossKind.LS:
            return -2.0 * self.w * (self.log_y - eta), 2.0 * self.w
        m, v = _ratios(self.y, eta)
        return self.w * (m - v), self.w * (m + v)


def _majorizer(kind: LossKind, theta: CoefficientVector, theta_s: CoefficientVector,
               design: InteractionDesign, dataset: SurvivalDataset, weights: KMWeights,
               eps_denom: float) -> float:
    if theta.d != design.d or theta_s.d != design.d:
        raise DataError("Coefficient length does not match the design")
    eta_s = design.rows @ theta_s.values
    surrogate = Surrogate.at(kind, dataset.times, weights.weights, eta_s, eps_denom)
    return surrogate.value(design.rows @ theta.values)


def lare_majorizer(theta: CoefficientVector, theta_s: CoefficientVector, design: InteractionDesign,
                   dataset: SurvivalDataset, weights: KMWeights, eps_denom: float = EPS_DENOM) -> float:
    """Quadratic majorizer of the weighted LARE objective built at ``theta_s``.

    (1/2) sum_i w_i { r1^2 / d1 + d1 + r2^2 / d2 + d2 } with
    r1 = 1 - e^eta / y, r2 = 1 - y e^-eta and d = max(|r(theta_s)|, eps_denom).
    """
    return _majorizer(LossKind.LARE, theta, theta_s, design, dataset, weights, eps_denom)


def lad_majorizer(theta: CoefficientVector, theta_s: CoefficientVector, design: InteractionDesign,
                  dataset: SurvivalDataset, weights: KMWeights, eps_denom: float = EPS_DENOM) -> float:
    """sum_i w_i [ r^2 / (2 d) + d / 2 ] with r = log y - eta and d = max(|r_s|, eps_denom)."""
    return _majorizer(LossKind.LAD, theta, theta_s, design, dataset, weights, eps_denom)
