"""Nuisance learners: bagged regression trees, lasso GLMs and density ratios."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np
from sklearn.tree import DecisionTreeRegressor

from .data import DEFAULT_EPS, clip_probability, clip_ratio
from .losses import logistic
from .optim import (DEFAULT_TOL, PenalizedProblem, cv_select_lambda, lambda_grid,
                    solve_l1)


MTRY_RULES = {"sqrt": lambda d: math.ceil(math.sqrt(d)), "third": lambda d: math.ceil(d / 3)}


@dataclass(frozen=True)
class ForestOptions:
    """Bagged-CART settings.

    ``mtry`` is a count or one of the rules ``"sqrt"`` (``ceil(sqrt(d))``, also
    the meaning of ``None``) and ``"third"`` (``ceil(d/3)``).
    """

    n_trees: int = 200
    min_leaf: int = 5
    mtry: Optional[Union[int, str]] = None
    max_depth: Optional[int] = None
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if isinstance(self.mtry, str) and self.mtry not in MTRY_RULES:
            raise ValueError(f"unknown mtry rule {self.mtry!r}")

    def resolve_mtry(self, d: int) -> int:
        if self.mtry is None or isinstance(self.mtry, str):
            return min(d, max(1, MTRY_RULES[self.mtry or "sqrt"](d)))
        return min(d, int(self.mtry))


@dataclass
class RegressionModel:
    predictor: Callable[[np.ndarray], np.ndarray]
    meta: dict = field(default_factory=dict)

    def __call__(self, features):
        return self.predictor(np.asarray(features, dtype=float))


@dataclass
class ProbabilityModel:
    predictor: Callable[[np.ndarray], np.ndarray]
    eps: float = DEFAULT_EPS
    meta: dict = field(default_factory=dict)

    def __call__(self, features):
        return clip_probability(self.predictor(np.asarray(features, dtype=float)), self.eps)


def _as_2d(features):
    features = np.asarray(features, dtype=float)
    return features[:, None] if features.ndim == 1 else features


class _Forest:
    def __init__(self, trees, n_features):
        self.trees = trees
        self.n_features = n_features

    def __call__(self, features):
        features = _as_2d(features)
        if features.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {features.shape[1]}")
        out = np.zeros(features.shape[0])
        for tree in self.trees:
            out += tree.predict(features)
        return out / len(self.trees)


def bootstrap_counts(n: int, n_trees: int, seed) -> np.ndarray:
    """Per-tree bootstrap multiplicities, shape (n_trees, n)."""
    rng = np.random.default_rng(seed)
    return np.stack([np.bincount(rng.integers(0, n, n), minlength=n) for _ in range(n_trees)])


def _fit_forest(features, targets, opts: ForestOptions, seed, counts=None):
    features = _as_2d(features)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    n, d = features.shape
    if d == 0:
        raise ValueError("empty feature set")
    if n != targets.shape[0]:
        raise ValueError("features and targets have different lengths")
    if n == 0:
        raise ValueError("no training rows")
    mtry = opts.resolve_mtry(d)
    ss = np.random.SeedSequence(seed if isinstance(seed, (list, tuple)) else int(seed) & (2**64 - 1))
    boot_seed, tree_seed = ss.spawn(2)
    if counts is None:
        counts = bootstrap_counts(n, opts.n_trees, boot_seed)
    tree_states = np.random.default_rng(tree_seed).integers(0, 2**31 - 1, opts.n_trees)
    if np.all(targets == targets[0]):
        c = float(targets[0])
        return (lambda f: np.full(_as_2d(f).shape[0], c)), {"n_trees": 0, "constant": c}
    trees = []
    depth = 0
    for t in range(opts.n_trees):
        w = counts[t]
        if not w.any():
            continue
        tree = DecisionTreeRegressor(min_samples_leaf=opts.min_leaf, max_features=mtry,
                                     max_depth=opts.max_depth,
                                     random_state=int(tree_states[t]))
        tree.fit(features, targets, sample_weight=w.astype(float))
        depth = max(depth, tree.get_depth())
        trees.append(tree)
    return _Forest(trees, d), {"n_trees": len(trees), "max_depth": depth, "mtry": mtry}


def fit_regression_forest(features, targets, opts: ForestOptions = ForestOptions(),
                          seed=0, counts=None) -> RegressionModel:
    """Bagged CART regression forest, deterministic in ``seed``.

    ``counts`` optionally fixes the per-tree bootstrap multiplicities.
    """
    predictor, meta = _fit_forest(features, targets, opts, seed, counts)
    return RegressionModel(predictor, meta)


def fit_probability_forest(features, labels, opts: ForestOptions = ForestOptions(),
                           seed=0, counts=None) -> ProbabilityModel:
    """Average of leaf label proportions over bagged trees, clipped to ``[eps, 1 - eps]``."""
    labels = np.asarray(labels, dtype=float).reshape(-1)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary")
    predictor, meta = _fit_forest(features, labels, opts, seed, counts)
    return ProbabilityModel(predictor, opts.eps, meta)


# ---------------------------------------------------------------------------
# Density ratios
# ---------------------------------------------------------------------------

def density_ratio_from_odds(pi_model, p_model, d1: int, eps: float = DEFAULT_EPS):
    """Evaluator of ``f(M|A=0,X)/f(M|A=1,X)`` on ``S = (X, M)`` via Bayes odds.

    ``pi_model`` predicts ``P(A=1|X)`` from the first ``d1`` columns of ``S``;
    ``p_model`` predicts ``P(A=1|S)``.
    """
    def q(s):
        s = _as_2d(s)
        pi = clip_probability(pi_model(s[:, :d1]), eps)
        p = clip_probability(p_model(s), eps)
        return clip_ratio(pi / (1 - pi) * (1 - p) / p, eps)
    return q


def mediator_levels(m, max_levels: int = 32) -> np.ndarray:
    """Distinct joint mediator values, or ValueError when the support looks continuous."""
    levels = np.unique(_as_2d(m), axis=0)
    if levels.shape[0] > max_levels:
        raise ValueError(f"mediator has {levels.shape[0]} distinct values (> {max_levels}); "
                         "continuous mediators are not supported here")
    return levels


def _level_codes(m, levels):
    m = _as_2d(m)
    codes = np.full(m.shape[0], -1)
    for k, lev in enumerate(levels):
        codes[np.all(m == lev, axis=1)] = k
    return codes


@dataclass
class DiscreteConditional:
    """``P(M = level | X)`` over a finite set of levels, one-vs-rest and renormalized."""

    levels: np.ndarray
    models: list
    eps: float = DEFAULT_EPS

    def probabilities(self, x) -> np.ndarray:
        x = _as_2d(x)
        if len(self.levels) == 1:
            return np.ones((x.shape[0], 1))
        if len(self.levels) == 2:
            p1 = self.models[0](x)
            return np.column_stack([1 - p1, p1])
        raw = np.column_stack([mod(x) for mod in self.models])
        return raw / raw.sum(axis=1, keepdims=True)

    def prob_of(self, x, m) -> np.ndarray:
        codes = _level_codes(m, self.levels)
        if np.any(codes < 0):
            raise ValueError("mediator value outside the fitted support")
        probs = self.probabilities(x)
        return np.clip(probs[np.arange(len(codes)), codes], self.eps, 1.0)


def fit_discrete_conditional(x, m, levels, opts: ForestOptions = ForestOptions(),
                             seed=0) -> DiscreteConditional:
    codes = _level_codes(m, levels)
    if len(levels) == 1:
        return DiscreteConditional(levels, [], opts.eps)
    seeds = np.random.SeedSequence(int(seed) & (2**64 - 1)).generate_state(len(levels))
    if len(levels) == 2:
        return DiscreteConditional(levels, [fit_probability_forest(x, codes == 1, opts, int(seeds[1]))],
                                   opts.eps)
    models = [fit_probability_forest(x, codes == k, opts, int(seeds[k])) for k in range(len(levels))]
    return DiscreteConditional(levels, models, opts.eps)


def discrete_density_ratio(f0: DiscreteConditional, f1: DiscreteConditional, d1: int,
                           eps: float = DEFAULT_EPS):
    """Evaluator of ``P(M|A=0,X) / P(M|A=1,X)`` on ``S`` for finitely supported mediators."""
    def q(s):
        s = _as_2d(s)
        x, m = s[:, :d1], s[:, d1:]
        return clip_ratio(f0.prob_of(x, m) / f1.prob_of(x, m), eps)
    return q


# ---------------------------------------------------------------------------
# Linear models
# ---------------------------------------------------------------------------

def fit_ols(features, targets, weights=None) -> np.ndarray:
    """(Weighted) least squares via ``lstsq``; minimum-norm when rank deficient."""
    features = _as_2d(features)
    targets = np.asarray(targets, dtype=float)
    if weights is not None:
        sw = np.sqrt(np.asarray(weights, dtype=float))
        features, targets = features * sw[:, None], targets * sw
    return np.linalg.lstsq(features, targets, rcond=None)[0]


def linear_model(coef) -> RegressionModel:
    coef = np.asarray(coef, dtype=float)
    return RegressionModel(lambda f: _as_2d(f) @ coef, {"coef": coef})


@dataclass(frozen=True)
class LassoTuning:
    """How the L1 weight is chosen: a fixed ``lam`` or cross-validation over a grid."""

    lam: Optional[float] = None
    cv_folds: int = 5
    grid_size: int = 50
    grid_decades: float = 4.0
    penalize_intercept: bool = True
    intercept: bool = True
    tol: float = DEFAULT_TOL
    cv_tol: float = 1e-4
    max_iter: int = 10_000

    def mask(self, dim: int) -> np.ndarray:
        mask = np.ones(dim, bool)
        if self.intercept and not self.penalize_intercept:
            mask[0] = False
        return mask


class _SquaredLoss:
    def __init__(self, z, y, w):
        self.z, self.y, self.w = z, y, w
        self.dim = z.shape[1]

    def subset(self, idx):
        return _SquaredLoss(self.z[idx], self.y[idx], self.w[idx])

    def value_and_grad(self, beta):
        r = self.z @ beta - self.y
        wr = self.w * r
        return float(wr @ r) / len(r), 2.0 * (self.z.T @ wr) / len(r)

    def value(self, beta):
        r = self.z @ beta - self.y
        return float((self.w * r) @ r) / len(r)

    def grad(self, beta):
        return self.value_and_grad(beta)[1]


class _LogisticLoss:
    def __init__(self, z, y):
        self.z, self.y = z, y
        self.dim = z.shape[1]

    def subset(self, idx):
        return _LogisticLoss(self.z[idx], self.y[idx])

    def value_and_grad(self, beta):
        u = self.z @ beta
        # log(1 + e^u) - y u, computed stably
        val = np.logaddexp(0.0, u) - self.y * u
        return float(val.mean()), self.z.T @ (logistic(u) - self.y) / len(u)

    def value(self, beta):
        u = self.z @ beta
        return float((np.logaddexp(0.0, u) - self.y * u).mean())

    def grad(self, beta):
        return self.value_and_grad(beta)[1]


def _problem(loss, lam=0.0, mask=None, init=None):
    return PenalizedProblem(loss.dim, loss.value, loss.grad, lam, mask, init,
                            value_and_grad=loss.value_and_grad)


def fit_penalized(loss, tuning: LassoTuning = LassoTuning(), seed=0):
    """Solve ``loss + lam * ||beta||_1`` with ``lam`` fixed or chosen by CV.

    Returns ``(coef, info)`` where ``info`` records the chosen weight and
    solver diagnostics.
    """
    mask = tuning.mask(loss.dim)
    if tuning.lam is not None:
        lam = float(tuning.lam)
        cv = None
    else:
        grid = lambda_grid(loss.grad(np.zeros(loss.dim)), mask, tuning.grid_size,
                           tuning.grid_decades)
        cv = cv_select_lambda(lambda idx: _problem(loss.subset(idx)), loss.z.shape[0], grid,
                              tuning.cv_folds, seed, mask, tuning.cv_tol, tuning.max_iter)
        lam = cv.lambda_star
    res = solve_l1(_problem(loss, lam, mask), tol=tuning.tol, max_iter=tuning.max_iter)
    return res.coef, {"lambda": lam, "cv": cv, "solver": res}


def fit_lasso_linear(features, targets, weights=None, tuning: LassoTuning = LassoTuning(),
                     seed=0) -> np.ndarray:
    """L1-penalized (weighted) least squares, average loss ``mean(w (y - Z b)^2)``."""
    features = _as_2d(features)
    targets = np.asarray(targets, dtype=float)
    w = np.ones(len(targets)) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    return fit_penalized(_SquaredLoss(features, targets, w), tuning, seed)[0]


def fit_lasso_logistic(features, labels, tuning: LassoTuning = LassoTuning(),
                       seed=0) -> np.ndarray:
    """L1-penalized logistic regression (mean negative log-likelihood)."""
    labels = np.asarray(labels, dtype=float)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary")
    return fit_penalized(_LogisticLoss(_as_2d(features), labels), tuning, seed)[0]


def logistic_model(coef, eps: float = DEFAULT_EPS) -> ProbabilityModel:
    coef = np.asarray(coef, dtype=float)
    return ProbabilityModel(lambda f: logistic(_as_2d(f) @ coef), eps, {"coef": coef})


# ---------------------------------------------------------------------------
# Learner specs used by the estimators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LearnerSpec:
    """Which learner family fits a nuisance: ``forest``, ``linear`` (OLS) or ``lasso``."""

    kind: str = "forest"
    forest: ForestOptions = ForestOptions()
    lasso: LassoTuning = LassoTuning()

    def __post_init__(self):
        if self.kind not in ("forest", "linear", "lasso"):
            raise ValueError(f"unknown learner kind {self.kind!r}")

    def with_trees(self, n_trees: int) -> "LearnerSpec":
        return replace(self, forest=replace(self.forest, n_trees=n_trees))

    def with_mtry(self, mtry) -> "LearnerSpec":
        return replace(self, forest=replace(self.forest, mtry=mtry))


def fit_regression(spec: LearnerSpec, features, targets, seed=0) -> RegressionModel:
    if spec.kind == "forest":
        return fit_regression_forest(features, targets, spec.forest, seed)
    if spec.kind == "linear":
        return linear_model(fit_ols(features, targets))
    return linear_model(fit_lasso_linear(features, targets, tuning=spec.lasso, seed=seed))


def fit_probability(spec: LearnerSpec, features, labels, seed=0) -> ProbabilityModel:
    eps = spec.forest.eps
    if spec.kind == "forest":
        return fit_probability_forest(features, labels, spec.forest, seed)
    tuning = spec.lasso if spec.kind == "lasso" else replace(spec.lasso, lam=0.0)
    return logistic_model(fit_lasso_logistic(features, labels, tuning, seed), eps)
