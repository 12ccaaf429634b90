"""Observed-data containers, validation, CSV ingestion and cross-fitting plans."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_EPS = 0.01


class DataValidationError(ValueError):
    """Raised when a dataset violates the observed-data contract."""


class RoleDegenerateError(ValueError):
    """A nuisance role lacks the treatment group its fit requires."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dataset:
    """Observed sample ``(Y, A, X, M)``.

    ``x`` holds the covariates (first column is the intercept when
    ``intercept_flag`` is set) and ``m`` the mediators. Arrays are stored
    read-only so a dataset can be shared freely across tasks.
    """

    y: np.ndarray
    a: np.ndarray
    x: np.ndarray
    m: np.ndarray
    intercept_flag: bool = True

    def __post_init__(self):
        object.__setattr__(self, "y", _frozen(np.asarray(self.y).reshape(-1)))
        object.__setattr__(self, "a", _frozen(np.asarray(self.a).reshape(-1)))
        x = np.asarray(self.x, dtype=np.float64)
        m = np.asarray(self.m, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if m.ndim == 1:
            m = m[:, None]
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "m", _frozen(m))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d1(self) -> int:
        return self.x.shape[1]

    @property
    def d2(self) -> int:
        return self.m.shape[1]

    @property
    def s(self) -> np.ndarray:
        """Covariates and mediators stacked column-wise, shape (n, d1 + d2)."""
        cached = self.__dict__.get("_s")
        if cached is None:
            cached = _frozen(np.hstack([self.x, self.m]))
            object.__setattr__(self, "_s", cached)
        return cached

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.a[idx], self.x[idx], self.m[idx],
                       self.intercept_flag)

    def with_outcome(self, y) -> "Dataset":
        return Dataset(y, self.a, self.x, self.m, self.intercept_flag)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.intercept_flag == other.intercept_flag
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("y", "a", "x", "m")))

    __hash__ = None


def validate_dataset(raw: Dataset, k_folds: Optional[int] = None) -> Dataset:
    """Check every observed-data invariant and return the dataset unchanged."""
    n = raw.y.shape[0]
    if raw.a.shape[0] != n or raw.x.shape[0] != n or raw.m.shape[0] != n:
        raise DataValidationError(
            f"dimension mismatch: y={n}, a={raw.a.shape[0]}, "
            f"x={raw.x.shape[0]}, m={raw.m.shape[0]}")
    for name in ("y", "a", "x", "m"):
        if not np.all(np.isfinite(getattr(raw, name))):
            raise DataValidationError(f"non-finite entries in {name}")
    if not np.all((raw.a == 0) | (raw.a == 1)):
        raise DataValidationError("non-binary treatment: a must take values in {0, 1}")
    n_treated = int(raw.a.sum())
    if n_treated == 0 or n_treated == n:
        raise DataValidationError("single-group sample: both treatment arms must be present")
    if raw.intercept_flag and not np.all(raw.x[:, 0] == 1.0):
        raise DataValidationError("intercept_flag set but x[:, 0] is not identically 1")
    if k_folds is not None and n < 2 * k_folds:
        raise DataValidationError(f"n={n} is below 2K={2 * k_folds}")
    return raw


# ---------------------------------------------------------------------------
# CSV schema: y,a,x1..x{d1},m1..m{d2}
# ---------------------------------------------------------------------------

def csv_header(d1: int, d2: int) -> list[str]:
    return ["y", "a"] + [f"x{j}" for j in range(1, d1 + 1)] + [f"m{j}" for j in range(1, d2 + 1)]


def write_csv(dataset: Dataset, path) -> None:
    rows = np.column_stack([dataset.y, dataset.a, dataset.x, dataset.m])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_header(dataset.d1, dataset.d2))
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])


def _parse_header(header: Sequence[str]) -> tuple[int, int]:
    if len(header) < 4 or header[0] != "y" or header[1] != "a":
        raise DataValidationError("line 1: header must start with 'y,a'")
    d1 = d2 = 0
    for col, name in enumerate(header[2:], start=3):
        if name == f"x{d1 + 1}" and d2 == 0:
            d1 += 1
        elif name == f"m{d2 + 1}":
            d2 += 1
        else:
            raise DataValidationError(f"line 1, column {col}: unexpected header field {name!r}")
    if d1 == 0 or d2 == 0:
        raise DataValidationError("line 1: need at least one x and one m column")
    return d1, d2


def read_csv(path, intercept_flag: Optional[bool] = None) -> Dataset:
    """Load a dataset from the ``y,a,x1..,m1..`` CSV schema.

    When ``intercept_flag`` is None it is inferred from whether ``x1`` is
    identically one.
    """
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataValidationError("empty CSV file") from None
    d1, d2 = _parse_header([h.strip() for h in header])
    width = 2 + d1 + d2
    values = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != width:
            raise DataValidationError(f"line {lineno}: expected {width} fields, got {len(row)}")
        parsed = []
        for col, field_ in enumerate(row, start=1):
            where = f"line {lineno}, column {col} ({header[col - 1].strip()})"
            try:
                value = float(field_)
            except ValueError:
                raise DataValidationError(
                    f"{where}: cannot parse {field_!r} as a number") from None
            if not math.isfinite(value):
                raise DataValidationError(f"{where}: non-finite value {field_!r}")
            if col == 2 and value not in (0.0, 1.0):
                raise DataValidationError(f"{where}: treatment must be 0 or 1, got {field_!r}")
            parsed.append(value)
        values.append(parsed)
    if not values:
        raise DataValidationError("CSV has no data rows")
    arr = np.asarray(values)
    x = arr[:, 2:2 + d1]
    if intercept_flag is None:
        intercept_flag = bool(np.all(x[:, 0] == 1.0))
    ds = Dataset(arr[:, 0], arr[:, 1], x, arr[:, 2 + d1:], intercept_flag)
    return validate_dataset(ds)


# ---------------------------------------------------------------------------
# Cross-fitting plans
# ---------------------------------------------------------------------------

class Scheme(str, Enum):
    QR3 = "QR3"
    MQR5 = "MQR5"
    FULL = "FULL"

    @property
    def n_roles(self) -> int:
        return {"QR3": 3, "MQR5": 5, "FULL": 1}[self.value]


QR3_ROLES = ("I0", "I1", "I2")
MQR5_ROLES = ("pi", "q", "mu", "tau_n", "tau")


@dataclass(frozen=True)
class FoldPlan:
    """K-fold partition with per-fold nuisance role assignments.

    ``roles[k]`` is a tuple of index arrays partitioning the complement of
    fold ``k``; its length is the role count of ``scheme``.
    """

    n: int
    k_folds: int
    scheme: Scheme
    seed: int
    eval_fold_of: np.ndarray
    roles: tuple = field(repr=False)

    def eval_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.eval_fold_of == k)

    def train_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.eval_fold_of != k)

    def role(self, k: int, name: str) -> np.ndarray:
        """Index array of a named role; every name maps to the full complement under FULL."""
        if self.scheme is Scheme.FULL:
            return self.roles[k][0]
        names = QR3_ROLES if self.scheme is Scheme.QR3 else MQR5_ROLES
        return self.roles[k][names.index(name)]


def _round_robin(perm: np.ndarray, parts: int) -> list[np.ndarray]:
    return [np.sort(perm[j::parts]) for j in range(parts)]


def build_fold_plan(n: int, k: int, scheme="FULL", seed: int = 0) -> FoldPlan:
    """Shuffle ``range(n)`` into ``k`` evaluation folds and split each complement into roles.

    Fold and role sizes differ by at most one (shuffled round-robin). The plan
    is a deterministic function of ``(n, k, scheme, seed)``.
    """
    scheme = Scheme(scheme)
    if k < 2:
        raise ValueError("k must be at least 2")
    if n < 2 * k:
        raise ValueError(f"n={n} too small for k={k} folds (need n >= 2k)")
    min_train = n - (n + k - 1) // k
    if min_train < scheme.n_roles:
        raise ValueError(f"n={n} too small for scheme {scheme.value}: "
                         f"each of {scheme.n_roles} roles needs an index")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), n, k]))
    perm = rng.permutation(n)
    eval_fold_of = np.empty(n, dtype=np.int64)
    eval_fold_of[perm] = np.arange(n) % k
    eval_fold_of.setflags(write=False)
    roles = []
    for fold in range(k):
        train = np.flatnonzero(eval_fold_of != fold)
        parts = _round_robin(rng.permutation(train), scheme.n_roles)
        for p in parts:
            p.setflags(write=False)
        roles.append(tuple(parts))
    return FoldPlan(n, k, scheme, int(seed), eval_fold_of, tuple(roles))


# ---------------------------------------------------------------------------
# Nuisances and reports
# ---------------------------------------------------------------------------

Evaluator = Callable[[np.ndarray], np.ndarray]


def clip_probability(p, eps: float = DEFAULT_EPS) -> np.ndarray:
    return np.clip(p, eps, 1.0 - eps)


def clip_ratio(q, eps: float = DEFAULT_EPS) -> np.ndarray:
    return np.clip(q, eps ** 2, eps ** -2)


@dataclass(frozen=True)
class NuisanceSet:
    """Fitted nuisance sextet.

    ``pi_a``/``pi_b``/``tau_n``/``tau`` take the covariate matrix, ``q`` and
    ``mu`` take the stacked ``(X, M)`` matrix. Probability and ratio outputs
    are clipped on evaluation.
    """

    pi_a: Evaluator
    pi_b: Evaluator
    q: Evaluator
    mu: Evaluator
    tau_n: Evaluator
    tau: Evaluator
    coefficients: Optional[tuple] = None
    eps: float = DEFAULT_EPS

    def evaluate(self, dataset: Dataset) -> dict:
        x, s = dataset.x, dataset.s
        return {
            "pi_a": clip_probability(self.pi_a(x), self.eps),
            "pi_b": clip_probability(self.pi_b(x), self.eps),
            "q": clip_ratio(self.q(s), self.eps),
            "mu": np.asarray(self.mu(s), dtype=float),
            "tau_n": np.asarray(self.tau_n(x), dtype=float),
            "tau": np.asarray(self.tau(x), dtype=float),
        }


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate with its per-observation scores and Wald interval."""

    theta_hat: float
    scores: np.ndarray = field(repr=False)
    sigma2_hat: float
    ci_low: float
    ci_high: float
    level: float
    n: int
    method_tag: str
    diagnostics: dict = field(default_factory=dict, repr=False)

    @property
    def se(self) -> float:
        return float(np.sqrt(self.sigma2_hat / self.n))

    def covers(self, truth: float) -> bool:
        return self.ci_low <= truth <= self.ci_high

    def to_dict(self) -> dict:
        return {"method": self.method_tag, "theta_hat": self.theta_hat, "se": self.se,
                "sigma2_hat": self.sigma2_hat, "ci_low": self.ci_low,
                "ci_high": self.ci_high, "level": self.level, "n": self.n,
                **{k: self.diagnostics[k] for k in ("repeats", "repeat_estimates")
                   if k in self.diagnostics}}
