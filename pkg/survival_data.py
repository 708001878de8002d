#!/usr/bin/env python3

"""Censored observations, the G x E interaction design and Kaplan-Meier weights."""

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Raised for malformed survival data or mismatched dimensions."""
    pass


class CoordinateKind(str, Enum):
    INTERCEPT = "intercept"
    ENV_MAIN = "env"
    GENE_MAIN = "gene"
    INTERACTION = "interaction"


@dataclass(frozen=True)
class CoordinateKey:
    """Label of one design column. ``j`` and ``k`` are 1-based; 0 means unused."""
    kind: CoordinateKind
    j: int = 0
    k: int = 0

    def __str__(self) -> str:
        if self.kind is CoordinateKind.INTERACTION:
            return f"x{self.j}:z{self.k}"
        if self.kind is CoordinateKind.ENV_MAIN:
            return f"x{self.j}"
        if self.kind is CoordinateKind.GENE_MAIN:
            return f"z{self.k}"
        return "intercept"


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Right-censored observations y_i = min(t_i, c_i) with E and G covariates.

    Args:
        times: Observed times, strictly positive, shape (n,)
        status: Event indicators (1 = event, 0 = censored), shape (n,)
        env: Environmental covariates X, shape (n, q)
        genes: Genetic covariates Z, shape (n, p)
    """
    times: np.ndarray
    status: np.ndarray
    env: np.ndarray
    genes: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        status = np.asarray(self.status)
        env = np.asarray(self.env, dtype=float)
        genes = np.asarray(self.genes, dtype=float)
        if env.ndim == 1:
            env = env.reshape(-1, 1)
        if genes.ndim == 1:
            genes = genes.reshape(-1, 1)

        n = times.shape[0]
        if status.reshape(-1).shape[0] != n or env.shape[0] != n or genes.shape[0] != n:
            raise DataError(
                f"Row counts differ: times={n}, status={status.reshape(-1).shape[0]}, "
                f"env={env.shape[0]}, genes={genes.shape[0]}"
            )
        if not np.all(np.isfinite(times)) or np.any(times <= 0):
            bad = int(np.flatnonzero(~(times > 0))[0]) + 1
            raise DataError(f"Observed times must be strictly positive (row {bad})")
        status = status.reshape(-1)
        if not np.all(np.isin(status, (0, 1))):
            raise DataError("Status values must be 0 or 1")

        object.__setattr__(self, "times", _frozen(times))
        status = status.astype(int)
        status.setflags(write=False)
        object.__setattr__(self, "status", status)
        object.__setattr__(self, "env", _frozen(env))
        object.__setattr__(self, "genes", _frozen(genes))

    @property
    def n(self) -> int:
        return self.times.shape[0]

    @property
    def q(self) -> int:
        return self.env.shape[1]

    @property
    def p(self) -> int:
        return self.genes.shape[1]

    @property
    def n_events(self) -> int:
        return int(self.status.sum())

    def take(self, rows: Sequence[int]) -> "SurvivalDataset":
        """Return the observations at ``rows`` in the given order."""
        rows = np.asarray(rows, dtype=int)
        return SurvivalDataset(
            times=self.times[rows],
            status=self.status[rows],
            env=self.env[rows],
            genes=self.genes[rows],
        )

    def select_genes(self, genes: Sequence[int]) -> "SurvivalDataset":
        """Return a dataset keeping only the given (0-based) gene columns."""
        genes = np.asarray(genes, dtype=int)
        return SurvivalDataset(self.times, self.status, self.env, self.genes[:, genes])

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.times) >= 0))


@dataclass(frozen=True, eq=False)
class KMWeights:
    """Kaplan-Meier weights aligned with a time-sorted dataset."""
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen(self.weights))

    def __len__(self) -> int:
        return self.weights.shape[0]

    @property
    def total(self) -> float:
        return float(self.weights.sum())


@dataclass(frozen=True, eq=False)
class InteractionDesign:
    """Expanded predictor rows u_i = (x_i, z_i, x_i (x) z_i).

    Interaction columns are x-major: (x1 z1, x1 z2, ..., x1 zp, x2 z1, ...).
    """
    rows: np.ndarray
    index_map: Tuple[CoordinateKey, ...]
    q: int
    p: int
    _columns: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "rows", _frozen(self.rows))
        if self.rows.shape[1] != len(self.index_map):
            raise DataError("Design width does not match its index map")
        object.__setattr__(self, "_columns", {key: idx for idx, key in enumerate(self.index_map)})

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    @property
    def has_intercept(self) -> bool:
        return bool(self.index_map) and self.index_map[0].kind is CoordinateKind.INTERCEPT

    @property
    def offset(self) -> int:
        """Number of columns placed before the X block."""
        return 1 if self.has_intercept else 0

    def key_of(self, column: int) -> CoordinateKey:
        return self.index_map[column]

    def column_of(self, key: CoordinateKey) -> int:
        try:
            return self._columns[key]
        except KeyError:
            raise DataError(f"No design column for {key}")

    def penalty_factors(self) -> np.ndarray:
        """1 for penalized columns, 0 for the intercept."""
        return np.array(
            [0.0 if key.kind is CoordinateKind.INTERCEPT else 1.0 for key in self.index_map]
        )

    def take(self, rows: Sequence[int]) -> "InteractionDesign":
        return InteractionDesign(self.rows[np.asarray(rows, dtype=int)], self.index_map, self.q, self.p)

    def regenerate(self, column: int, dataset: SurvivalDataset) -> np.ndarray:
        """Rebuild a column from its key and the raw matrices of ``dataset``."""
        key = self.key_of(column)
        if key.kind is CoordinateKind.INTERCEPT:
            return np.ones(dataset.n)
        if key.kind is CoordinateKind.ENV_MAIN:
            return dataset.env[:, key.j - 1]
        if key.kind is CoordinateKind.GENE_MAIN:
            return dataset.genes[:, key.k - 1]
        return dataset.env[:, key.j - 1] * dataset.genes[:, key.k - 1]


@dataclass(frozen=True, eq=False)
class CoefficientVector:
    """theta = (alpha, beta, xi) with an optional leading intercept.

    The partition views alias ``values``; ``values`` itself is read-only.
    """
    values: np.ndarray
    q: int
    p: int
    intercept: bool = False

    def __post_init__(self):
        values = _frozen(np.asarray(self.values, dtype=float).reshape(-1))
        expected = self.q + self.p + self.q * self.p + (1 if self.intercept else 0)
        if values.shape[0] != expected:
            raise DataError(f"Coefficient length {values.shape[0]} != {expected}")
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, q: int, p: int, intercept: bool = False) -> "CoefficientVector":
        return cls(np.zeros(q + p + q * p + (1 if intercept else 0)), q, p, intercept)

    @classmethod
    def like(cls, design: InteractionDesign, values: np.ndarray) -> "CoefficientVector":
        return cls(values, design.q, design.p, design.has_intercept)

    @property
    def _start(self) -> int:
        return 1 if self.intercept else 0

    @property
    def alpha(self) -> np.ndarray:
        return self.values[self._start:self._start + self.q]

    @property
    def beta(self) -> np.ndarray:
        start = self._start + self.q
        return self.values[start:start + self.p]

    @property
    def xi(self) -> np.ndarray:
        return self.values[self._start + self.q + self.p:]

    @property
    def xi_matrix(self) -> np.ndarray:
        """Interaction coefficients as a (q, p) matrix."""
        return self.xi.reshape(self.q, self.p)

    @property
    def d(self) -> int:
        return self.values.shape[0]

    def nnz(self) -> int:
        return int(np.count_nonzero(self.values))

    def support(self) -> np.ndarray:
        return np.flatnonzero(self.values)


def time_order(dataset: SurvivalDataset) -> np.ndarray:
    """Stable order by time, events before censored observations at ties."""
    # lexsort is stable and sorts by the last key first
    return np.lexsort((1 - dataset.status, dataset.times))


def sort_by_time(dataset: SurvivalDataset) -> SurvivalDataset:
    """Reorder observations so that observed times are nondecreasing."""
    return dataset.take(time_order(dataset))


def kaplan_meier_weights(status: Sequence[int], n: Optional[int] = None) -> KMWeights:
    """Compute Kaplan-Meier weights for a time-sorted status vector.

    w_1 = d_1 / n and w_i = d_i / (n - i + 1) * prod_{j<i} ((n - j) / (n - j + 1))^{d_j}.

    Args:
        status: Event indicators in time order
        n: Number of observations (defaults to len(status))

    Returns:
        KMWeights aligned with ``status``

    Raises:
        DataError: If there are no observations
    """
    status = np.asarray(status, dtype=float).reshape(-1)
    if n is None:
        n = status.shape[0]
    if n == 0 or status.shape[0] == 0:
        raise DataError("Cannot compute Kaplan-Meier weights for empty input")
    if status.shape[0] != n:
        raise DataError(f"Status length {status.shape[0]} != n={n}")

    i = np.arange(1, n + 1, dtype=float)
    ratio = (n - i) / (n - i + 1)
    factors = np.where(status > 0, ratio, 1.0)
    # product over j < i
    survival = np.concatenate(([1.0], np.cumprod(factors[:-1])))
    return KMWeights(status / (n - i + 1) * survival)


def build_design(env: np.ndarray, genes: np.ndarray, intercept: bool = False) -> InteractionDesign:
    """Expand (X, Z) into the interaction design (X, Z, X (x) Z).

    Args:
        env: Environmental matrix, shape (n, q)
        genes: Gene matrix, shape (n, p)
        intercept: Prepend an unpenalized all-ones column

    Returns:
        InteractionDesign with d = q + p + pq columns (plus one for the intercept)

    Raises:
        DataError: If the row counts differ
    """
    env = np.asarray(env, dtype=float)
    genes = np.asarray(genes, dtype=float)
    if env.ndim == 1:
        env = env.reshape(-1, 1)
    if genes.ndim == 1:
        genes = genes.reshape(-1, 1)
    if env.shape[0] != genes.shape[0]:
        raise DataError(f"Row count mismatch: env has {env.shape[0]}, genes has {genes.shape[0]}")

    n, q = env.shape
    p = genes.shape[1]
    interactions = (env[:, :, None] * genes[:, None, :]).reshape(n, q * p)
    blocks = [env, genes, interactions]

    keys: List[CoordinateKey] = []
    if intercept:
        blocks.insert(0, np.ones((n, 1)))
        keys.append(CoordinateKey(CoordinateKind.INTERCEPT))
    keys.extend(CoordinateKey(CoordinateKind.ENV_MAIN, j=j + 1) for j in range(q))
    keys.extend(CoordinateKey(CoordinateKind.GENE_MAIN, k=k + 1) for k in range(p))
    keys.extend(
        CoordinateKey(CoordinateKind.INTERACTION, j=j + 1, k=k + 1)
        for j in range(q) for k in range(p)
    )
    return InteractionDesign(np.hstack(blocks), tuple(keys), q, p)


def standardize_dataset(dataset: SurvivalDataset) -> SurvivalDataset:
    """Center env and gene columns to mean 0 and scale them to variance 1."""

    def _scale(matrix: np.ndarray, label: str) -> np.ndarray:
        centered = matrix - matrix.mean(axis=0)
        sd = matrix.std(axis=0)
        constant = sd == 0
        if np.any(constant):
            logger.warning(f"{int(constant.sum())} constant {label} column(s) centered but not scaled")
        return centered / np.where(constant, 1.0, sd)

    return SurvivalDataset(dataset.times, dataset.status,
                           _scale(dataset.env, "env"), _scale(dataset.genes, "gene"))


_ENV_COLUMN = re.compile(r"^x(\d+)$")
_GENE_COLUMN = re.compile(r"^z(\d+)$")


def read_csv(path: Union[str, Path]) -> SurvivalDataset:
    """Read a dataset from a ``time,status,x1..xq,z1..zp`` CSV file.

    Raises:
        DataError: On a malformed header, non-numeric cells, nonpositive
            times or status values other than 0/1 (row numbers are 1-based
            data rows)
    """
    frame = pd.read_csv(path)
    columns = [str(c).strip() for c in frame.columns]
    if columns[:2] != ["time", "status"]:
        raise DataError(f"CSV header must start with time,status (got {','.join(columns[:2])})")

    env_cols = [c for c in columns[2:] if _ENV_COLUMN.match(c)]
    gene_cols = [c for c in columns[2:] if _GENE_COLUMN.match(c)]
    expected = (["time", "status"]
                + [f"x{j}" for j in range(1, len(env_cols) + 1)]
                + [f"z{k}" for k in range(1, len(gene_cols) + 1)])
    if columns != expected:
        raise DataError(f"CSV header must be time,status,x1..xq,z1..zp (got {','.join(columns)})")
    if not env_cols or not gene_cols:
        raise DataError("CSV needs at least one x column and one z column")

    frame.columns = columns
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad_rows = numeric.isna().any(axis=1).to_numpy()
    if bad_rows.any():
        raise DataError(f"Non-numeric or missing value in row {int(np.flatnonzero(bad_rows)[0]) + 1}")

    times = numeric["time"].to_numpy(dtype=float)
    nonpositive = np.flatnonzero(times <= 0)
    if nonpositive.size:
        raise DataError(f"Nonpositive time {times[nonpositive[0]]} in row {int(nonpositive[0]) + 1}")
    status = numeric["status"].to_numpy()
    invalid = np.flatnonzero(~np.isin(status, (0, 1)))
    if invalid.size:
        raise DataError(f"Status must be 0 or 1 (row {int(invalid[0]) + 1})")

    dataset = SurvivalDataset(
        times=times,
        status=status.astype(int),
        env=numeric[env_cols].to_numpy(dtype=float),
        genes=numeric[gene_cols].to_numpy(dtype=float),
    )
    logger.info(f"Read {dataset.n} observations ({dataset.n_events} events), "
                f"q={dataset.q}, p={dataset.p} from {path}")
    return dataset


def write_csv(dataset: SurvivalDataset, path: Union[str, Path]) -> None:
    """Write a dataset in the ``time,status,x*,z*`` layout."""
    frame = pd.DataFrame({"time": dataset.times, "status": dataset.status})
    for j in range(dataset.q):
        frame[f"x{j + 1}"] = dataset.env[:, j]
    for k in range(dataset.p):
        frame[f"z{k + 1}"] = dataset.genes[:, k]
    frame.to_csv(path, index=False, float_format="%.10g")
