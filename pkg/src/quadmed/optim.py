"""L1-penalized convex M-estimation: accelerated proximal gradient and CV tuning.

The solver minimizes ``loss(beta) + lam * sum(|beta_j| for penalized j)`` by
monotone FISTA with backtracking. Losses are supplied as callables, so the
same engine serves the lasso learners and the six sequential nuisance losses.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 10_000
GRID_SIZE = 50
GRID_DECADES = 4.0


class SolverError(RuntimeError):
    """Non-finite loss or gradient met during optimization."""

    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


class ConvergenceWarning(UserWarning):
    pass


def soft_threshold(z, t):
    """Proximal map of ``t * |.|``: ``sign(z) * max(|z| - t, 0)``."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("threshold must be non-negative")
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def kkt_residual(coef, grad, lam, mask=None) -> float:
    """Largest violation of the L1 optimality conditions."""
    coef = np.atleast_1d(np.asarray(coef, dtype=float))
    grad = np.atleast_1d(np.asarray(grad, dtype=float))
    if coef.shape != grad.shape:
        raise ValueError("coef and grad dimensions differ")
    if coef.size == 0:
        return 0.0
    pen = np.where(coef == 0, np.maximum(np.abs(grad) - lam, 0.0),
                   np.abs(grad + lam * np.sign(coef)))
    if mask is not None:
        pen = np.where(mask, pen, np.abs(grad))
    return float(pen.max())


@dataclass
class PenalizedProblem:
    """Smooth convex loss plus a masked L1 penalty.

    ``value_and_grad`` is optional; when given it is used instead of two
    separate calls, which halves the work for most losses.
    """

    dim: int
    loss_eval: Callable[[np.ndarray], float]
    grad_eval: Callable[[np.ndarray], np.ndarray]
    lam: float = 0.0
    penalty_mask: Optional[np.ndarray] = None
    init: Optional[np.ndarray] = None
    value_and_grad: Optional[Callable] = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.penalty_mask is None:
            self.penalty_mask = np.ones(self.dim, bool)
        self.penalty_mask = np.asarray(self.penalty_mask, bool)
        if self.penalty_mask.shape != (self.dim,):
            raise ValueError("penalty_mask has the wrong dimension")
        self.init = (np.zeros(self.dim) if self.init is None
                     else np.array(self.init, dtype=float).reshape(self.dim))

    def fg(self, beta):
        if self.value_and_grad is not None:
            return self.value_and_grad(beta)
        return self.loss_eval(beta), self.grad_eval(beta)

    def penalty(self, beta) -> float:
        return self.lam * float(np.abs(beta[self.penalty_mask]).sum())


@dataclass
class SolverResult:
    coef: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list, repr=False)


def _prox(z, thresh):
    return np.sign(z) * np.maximum(np.abs(z) - thresh, 0.0)


def _initial_step(problem, x, gx):
    """Inverse of a secant curvature estimate along the gradient direction."""
    gnorm = np.linalg.norm(gx)
    if gnorm == 0:
        return 1.0
    h = 1e-4 / gnorm * max(1.0, np.linalg.norm(x))
    _, g2 = problem.fg(x - h * gx)
    curv = np.linalg.norm(g2 - gx) / (h * gnorm)
    if not np.isfinite(curv) or curv <= 0:
        return 1.0
    return 1.0 / curv


def _nonfinite(beta, what):
    return SolverError(f"non-finite {what} at iterate {np.array2string(beta, precision=4)}",
                       iterate=beta.copy())


def solve_l1(problem: PenalizedProblem, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER, step_init: Optional[float] = None) -> SolverResult:
    """Monotone FISTA with backtracking.

    Returns the first iterate whose KKT residual is at most ``tol``. If
    ``max_iter`` is exhausted the best iterate is returned with
    ``converged=False`` and a :class:`ConvergenceWarning` is issued.

    The gradient at the current iterate is only formed when the prox-gradient
    step is small enough for the KKT test to plausibly pass (or every 20
    iterations), which saves one product with the design per iteration.
    """
    lam = problem.lam
    mask = problem.penalty_mask
    all_pen = bool(mask.all())
    weights = mask.astype(float)
    x = problem.init.copy()
    fx, gx = problem.fg(x)
    if not math.isfinite(fx) or not np.isfinite(gx).all():
        raise _nonfinite(x, "loss/gradient")
    obj = fx + problem.penalty(x)
    history = [obj]
    kkt = kkt_residual(x, gx, lam, None if all_pen else mask)
    if kkt <= tol:
        return SolverResult(x, obj, kkt, 0, True, history)
    step = step_init if step_init is not None else _initial_step(problem, x, gx)
    y, fy, gy = x, fx, gx
    t = 1.0
    for it in range(1, max_iter + 1):
        while True:
            z = _prox(y - step * gy, step * lam * weights)
            diff = z - y
            fz = problem.loss_eval(z)
            if math.isfinite(fz) and fz <= fy + gy @ diff + (diff @ diff) / (2 * step) + 1e-12 * abs(fy):
                break
            step *= 0.5
            if step < 1e-300:
                raise SolverError("step size underflow", iterate=z)
        obj_z = fz + problem.penalty(z)
        t_next = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        accepted = obj_z <= obj
        if accepted:
            x_prev, x, fx, gx, obj = x, z, fz, None, obj_z
            beta_mom = (t - 1) / t_next
            y = x if beta_mom == 0 else x + beta_mom * (x - x_prev)
        else:
            # Monotone variant: keep x, extrapolate through the rejected point.
            y = x + (t / t_next) * (z - x)
        t = t_next
        history.append(obj)
        if gx is None and y is x:
            fx, gx = problem.fg(x)
        small = float(np.abs(diff).max()) <= 10 * tol * step
        if gx is None and (small or it % 20 == 0):
            _, gx = problem.fg(x)
        if gx is not None:
            if not np.isfinite(gx).all():
                raise _nonfinite(x, "gradient")
            kkt = kkt_residual(x, gx, lam, None if all_pen else mask)
            if kkt <= tol:
                return SolverResult(x, obj, kkt, it, True, history)
        if y is x:
            fy, gy = fx, gx
        else:
            fy, gy = problem.fg(y)
            if not math.isfinite(fy) or not np.isfinite(gy).all():
                # Extrapolation left the finite region; restart from x.
                if gx is None:
                    fx, gx = problem.fg(x)
                y, fy, gy, t = x, fx, gx, 1.0
        if not accepted and float(np.abs(z - x).max()) == 0.0:
            # Stalled at machine precision; restart momentum.
            if gx is None:
                fx, gx = problem.fg(x)
            y, fy, gy, t = x, fx, gx, 1.0
    if gx is None:
        _, gx = problem.fg(x)
    kkt = kkt_residual(x, gx, lam, None if all_pen else mask)
    warnings.warn(f"solve_l1 hit max_iter={max_iter} with KKT residual {kkt:.3g}",
                  ConvergenceWarning, stacklevel=2)
    return SolverResult(x, obj, kkt, max_iter, kkt <= tol, history)


# ---------------------------------------------------------------------------
# Tuning
# ---------------------------------------------------------------------------

def lambda_max(grad0, mask=None) -> float:
    grad0 = np.asarray(grad0, dtype=float)
    mask = np.ones(grad0.shape, bool) if mask is None else np.asarray(mask, bool)
    return float(np.abs(grad0[mask]).max()) if mask.any() else 0.0


def lambda_grid(grad0, mask=None, size: int = GRID_SIZE, decades: float = GRID_DECADES):
    """Descending log-spaced grid from ``||grad(0)||_inf`` down ``decades`` orders."""
    top = lambda_max(grad0, mask)
    if top <= 0:
        top = 1e-8
    return np.logspace(np.log10(top), np.log10(top) - decades, size)


@dataclass
class CVResult:
    lambda_star: float
    grid: np.ndarray
    cv_curve: np.ndarray


LossFamily = Callable[[np.ndarray], PenalizedProblem]
"""Maps a row-index array to an unpenalized problem over those rows."""


def cv_split(n: int, cv_folds: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[rng.permutation(n)] = np.arange(n) % cv_folds
    return fold_of


def cv_select_lambda(loss_family: LossFamily, n: int, grid, cv_folds: int = 5, seed=0,
                     mask=None, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                     solver=None) -> CVResult:
    """Pick the grid value minimizing mean held-out unpenalized loss.

    ``loss_family(idx)`` builds the problem restricted to rows ``idx``. Each
    training split walks the grid from the largest value with warm starts.
    Ties go to the larger lambda.
    """
    grid = np.unique(np.asarray(grid, dtype=float))[::-1]
    if grid.size == 0:
        raise ValueError("empty lambda grid")
    if grid.size == 1:
        return CVResult(float(grid[0]), grid, np.array([np.nan]))
    if n < cv_folds:
        raise ValueError(f"{n} rows cannot be split into {cv_folds} CV folds")
    solver = solver or solve_l1
    fold_of = cv_split(n, cv_folds, seed)
    losses = np.full((cv_folds, grid.size), np.inf)
    for f in range(cv_folds):
        train = np.flatnonzero(fold_of != f)
        test = np.flatnonzero(fold_of == f)
        prob = loss_family(train)
        held = loss_family(test)
        beta = np.zeros(prob.dim)
        for j, lam in enumerate(grid):
            prob.lam = lam
            prob.penalty_mask = np.ones(prob.dim, bool) if mask is None else np.asarray(mask, bool)
            prob.init = beta
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", ConvergenceWarning)
                    res = solver(prob, tol=tol, max_iter=max_iter)
            except SolverError:
                continue
            beta = res.coef
            val = held.loss_eval(beta)
            if np.isfinite(val):
                losses[f, j] = val
    curve = losses.mean(axis=0)
    if not np.any(np.isfinite(curve)):
        raise SolverError("all candidate fits diverged during cross-validation")
    best = int(np.argmin(curve))  # first minimum = largest lambda among ties
    return CVResult(float(grid[best]), grid, curve)
