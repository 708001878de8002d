#!/usr/bin/env python3

"""MCP and Lasso penalties and the local quadratic approximation used inside MM."""

from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Union

import numpy as np

DEFAULT_GAMMA = 6.0
EPS_ZERO = 1e-6

# Coefficient marking a coordinate held at zero for the current MM step.
FROZEN = np.inf

ArrayLike = Union[float, np.ndarray]


class PenaltyKind(str, Enum):
    MCP = "mcp"
    LASSO = "lasso"


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty family with tuning parameter ``lam`` and MCP regularization ``gamma``."""
    kind: PenaltyKind = PenaltyKind.MCP
    lam: float = 0.0
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.kind is PenaltyKind.MCP and not self.gamma > 1:
            raise ValueError(f"MCP gamma must exceed 1, got {self.gamma}")

    @classmethod
    def mcp(cls, lam: float, gamma: float = DEFAULT_GAMMA) -> "PenaltySpec":
        return cls(PenaltyKind.MCP, lam, gamma)

    @classmethod
    def lasso(cls, lam: float) -> "PenaltySpec":
        return cls(PenaltyKind.LASSO, lam)

    def with_lambda(self, lam: float) -> "PenaltySpec":
        return replace(self, lam=float(lam))


def penalty_value(t: ArrayLike, spec: PenaltySpec) -> ArrayLike:
    """phi_lambda(t) = lambda * int_0^|t| (1 - x / (gamma lambda))_+ dx, or lambda |t|."""
    t_abs = np.abs(np.asarray(t, dtype=float))
    lam = spec.lam
    if spec.kind is PenaltyKind.LASSO:
        value = lam * t_abs
    else:
        knot = spec.gamma * lam
        value = np.where(t_abs <= knot, lam * t_abs - t_abs ** 2 / (2.0 * spec.gamma), 0.5 * spec.gamma * lam ** 2)
    return float(value) if np.ndim(value) == 0 else value


def penalty_derivative(t_abs: ArrayLike, spec: PenaltySpec) -> ArrayLike:
    """phi'_lambda(|t|): max(lambda - |t| / gamma, 0) for MCP, lambda for Lasso."""
    t_abs = np.asarray(t_abs, dtype=float)
    if spec.kind is PenaltyKind.LASSO:
        value = np.full_like(t_abs, spec.lam)
    else:
        value = np.maximum(spec.lam - t_abs / spec.gamma, 0.0)
    return float(value) if np.ndim(value) == 0 else value


def penalty_curvature(t_abs: ArrayLike, spec: PenaltySpec) -> ArrayLike:
    """phi''_lambda(|t|) for t != 0: -1 / gamma below the MCP knot, 0 otherwise."""
    t_abs = np.asarray(t_abs, dtype=float)
    if spec.kind is PenaltyKind.LASSO:
        value = np.zeros_like(t_abs)
    else:
        value = np.where(t_abs < spec.gamma * spec.lam, -1.0 / spec.gamma, 0.0)
    return float(value) if np.ndim(value) == 0 else value


def local_quadratic_coefficient(theta_s_j: ArrayLike, spec: PenaltySpec,
                                eps_zero: float = EPS_ZERO) -> ArrayLike:
    """phi'(|theta_s|) / |theta_s|, or FROZEN when |theta_s| < eps_zero.

    The penalty is approximated by phi(theta_s) + coeff / 2 * (theta^2 - theta_s^2).
    """
    t_abs = np.abs(np.asarray(theta_s_j, dtype=float))
    frozen = t_abs < eps_zero
    safe = np.where(frozen, 1.0, t_abs)
    value = np.where(frozen, FROZEN, penalty_derivative(safe, spec) / safe)
    return float(value) if np.ndim(value) == 0 else value


def total_penalty(values: np.ndarray, spec: PenaltySpec, factors: Optional[np.ndarray] = None) -> float:
    """sum_j factor_j * phi(theta_j); factors of 0 leave a coordinate unpenalized."""
    contributions = np.atleast_1d(penalty_value(values, spec))
    if factors is not None:
        contributions = contributions * factors
    return float(contributions.sum())
