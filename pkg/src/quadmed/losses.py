"""The six sequential nuisance losses of the model-based estimator.

Every loss is a per-observation scalar function of a single linear index
``u_i = Z_i' beta`` (``Z`` is the covariate matrix ``X`` or the stacked matrix
``S = (X, M)``). Weights and offsets that depend on previously fitted blocks
are computed once when the context is built, so evaluating a loss costs one
matrix-vector product and one gradient costs one more.

``g^{-1}`` in these formulas denotes the reciprocal ``1/g(u) = 1 + exp(-u)``,
not the functional inverse of the logistic map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset, RoleDegenerateError
from .optim import PenalizedProblem

EXP_CLAMP = 30.0

BLOCKS = ("pi_a", "pi_b", "q", "mu", "tau_n", "tau")
REQUIRED = {
    1: (),
    2: (),
    3: ("pi_a", "pi_b"),
    4: ("pi_a", "q"),
    5: ("pi_b", "mu"),
    6: ("pi_a", "q", "mu", "tau_n"),
}
# Block fitted by each loss, and whether it lives on X or on S.
TARGET = {1: "pi_a", 2: "pi_b", 3: "q", 4: "mu", 5: "tau_n", 6: "tau"}
ON_S = {"q", "mu"}


def logistic(u):
    """``1 / (1 + exp(-u))`` evaluated without overflow."""
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def safe_exp(u):
    """``exp(u)`` for ``u <= 30``, continued linearly (C1) above.

    The linear continuation keeps every loss convex and differentiable while
    ruling out overflow during line searches.
    """
    u = np.asarray(u, dtype=float)
    return np.exp(np.minimum(u, EXP_CLAMP)) * (1.0 + np.maximum(u - EXP_CLAMP, 0.0))


def safe_exp_deriv(u):
    return np.exp(np.minimum(np.asarray(u, dtype=float), EXP_CLAMP))


def _exp_pair(u):
    """``(safe_exp(u), safe_exp_deriv(u))`` sharing one exponential."""
    d = np.exp(np.minimum(u, EXP_CLAMP))
    over = u > EXP_CLAMP
    if over.any():
        return d * (1.0 + np.where(over, u - EXP_CLAMP, 0.0)), d
    return d, d


def clamp_active(u) -> bool:
    return bool(np.any(np.asarray(u) > EXP_CLAMP))


@dataclass(frozen=True)
class LossContext:
    """A role subsample plus the previously fitted coefficient blocks a loss needs."""

    slice: Dataset
    fixed: dict = field(default_factory=dict)

    def check(self, j: int) -> None:
        if j not in REQUIRED:
            raise ValueError(f"loss index must be in 1..6, got {j}")
        missing = [b for b in REQUIRED[j] if b not in self.fixed]
        if missing:
            raise ValueError(f"loss {j} requires fixed blocks {missing}")


@dataclass
class IndexLoss:
    """Average of ``h_i(Z_i' beta)`` with per-row constants.

    ``kind`` selects the scalar function; ``c1``, ``c2`` and ``r`` are the
    precomputed per-row weights and offsets.
    """

    j: int
    z: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    r: np.ndarray

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    @property
    def n(self) -> int:
        return self.z.shape[0]

    def subset(self, idx) -> "IndexLoss":
        return IndexLoss(self.j, self.z[idx], self.c1[idx], self.c2[idx], self.r[idx])

    def _check_dim(self, beta):
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (self.dim,):
            raise ValueError(f"loss {self.j}: beta has shape {beta.shape}, expected ({self.dim},)")
        return beta

    def h(self, u):
        """Per-row values and derivatives with respect to the index."""
        j, c1, c2, r = self.j, self.c1, self.c2, self.r
        if j == 1:
            # c1 = 1 - A, c2 = A
            e, de = _exp_pair(-u)
            return c1 * u + c2 * e, c1 - c2 * de
        if j <= 3:
            # j = 2: c1 = 1 - A, c2 = A
            # j = 3: c1 = A / g(X'b_pia), c2 = (1 - A) / (1 - g(X'b_pib))
            e, de = _exp_pair(u)
            return c1 * e - c2 * u, c1 * de - c2
        # Weighted squares: c1 is the weight, r the target.
        wr = c1 * (u - r)
        return wr * (u - r), 2.0 * wr

    def value(self, beta) -> float:
        beta = self._check_dim(beta)
        return float(self.h(self.z @ beta)[0].sum()) / self.n

    def grad(self, beta) -> np.ndarray:
        beta = self._check_dim(beta)
        return self.z.T @ self.h(self.z @ beta)[1] / self.n

    def value_and_grad(self, beta):
        val, der = self.h(self.z @ beta)
        return float(val.sum()) / self.n, self.z.T @ der / self.n

    def _value(self, beta):
        return float(self.h(self.z @ beta)[0].sum()) / self.n

    def per_obs_grad(self, beta) -> np.ndarray:
        beta = self._check_dim(beta)
        return self.h(self.z @ beta)[1][:, None] * self.z

    def clamp_active(self, beta) -> bool:
        u = self.z @ beta
        return clamp_active(-u if self.j == 1 else u) if self.j <= 3 else False

    def problem(self, lam: float = 0.0, mask=None, init=None) -> PenalizedProblem:
        return PenalizedProblem(self.dim, self._value, self.grad, lam, mask, init,
                                value_and_grad=self.value_and_grad)


def build_loss(j: int, ctx: LossContext) -> IndexLoss:
    """Precompute the per-row constants of loss ``j`` on the context slice."""
    ctx.check(j)
    ds, fx = ctx.slice, ctx.fixed
    a = ds.a
    x, s = ds.x, ds.s
    zeros = np.zeros(ds.n)

    def lin(block, mat):
        beta = np.asarray(fx[block], dtype=float)
        if beta.shape != (mat.shape[1],):
            raise ValueError(f"fixed block {block} has shape {beta.shape}, "
                             f"expected ({mat.shape[1]},)")
        return mat @ beta

    if j == 1:
        return IndexLoss(1, x, 1.0 - a, a.copy(), zeros)
    if j == 2:
        return IndexLoss(2, x, 1.0 - a, a.copy(), zeros)
    if j == 3:
        c1 = a * (1.0 + safe_exp(-lin("pi_a", x)))
        c2 = (1.0 - a) * (1.0 + safe_exp(lin("pi_b", x)))
        return IndexLoss(3, s, c1, c2, zeros)
    if j == 4:
        w = a * (1.0 + safe_exp(-lin("pi_a", x))) * safe_exp(lin("q", s))
        return IndexLoss(4, s, w, zeros, ds.y.copy())
    if j == 5:
        w = (1.0 - a) * safe_exp(lin("pi_b", x))
        return IndexLoss(5, x, w, zeros, lin("mu", s))
    w = a * safe_exp(-lin("pi_a", x))
    r = safe_exp(lin("q", s)) * (ds.y - lin("mu", s)) + lin("tau_n", x)
    return IndexLoss(6, x, w, zeros, r)


def check_role(j: int, ds: Dataset) -> None:
    """Raise when the slice lacks the treatment group loss ``j`` depends on."""
    n1 = int(ds.a.sum())
    n0 = ds.n - n1
    if j in (4, 6) and n1 == 0:
        raise RoleDegenerateError(f"loss {j}: role slice has no A=1 rows")
    if j == 5 and n0 == 0:
        raise RoleDegenerateError(f"loss {j}: role slice has no A=0 rows")
    if j in (1, 2, 3) and (n0 == 0 or n1 == 0):
        raise RoleDegenerateError(
            f"loss {j}: role slice needs both treatment groups (A=1: {n1}, A=0: {n0})")


def loss_eval(j: int, ctx: LossContext, beta) -> float:
    return build_loss(j, ctx).value(beta)


def loss_grad(j: int, ctx: LossContext, beta) -> np.ndarray:
    return build_loss(j, ctx).grad(beta)


def loss_per_obs_grad(j: int, ctx: LossContext, beta) -> np.ndarray:
    return build_loss(j, ctx).per_obs_grad(beta)


# ---------------------------------------------------------------------------
# Score and its coefficient gradient
# ---------------------------------------------------------------------------

def _indices(ds: Dataset, nu: dict):
    x, s = ds.x, ds.s
    return {"pi_a": x @ nu["pi_a"], "pi_b": x @ nu["pi_b"], "q": s @ nu["q"],
            "mu": s @ nu["mu"], "tau_n": x @ nu["tau_n"], "tau": x @ nu["tau"]}


def score_gradient(ds: Dataset, nu: dict, per_obs: bool = False) -> dict:
    """Gradient of the model-based score with respect to each coefficient block.

    Unclipped weights are used so that the block-wise identities with the
    loss gradients hold exactly. Returns row averages unless ``per_obs``.
    """
    a, y, x, s = ds.a, ds.y, ds.x, ds.s
    u = _indices(ds, nu)
    inv_ga = 1.0 + safe_exp(-u["pi_a"])
    inv_1mgb = 1.0 + safe_exp(u["pi_b"])
    eq = safe_exp(u["q"])
    resid = y - u["mu"]
    bracket = eq * resid + u["tau_n"] - u["tau"]
    parts = {
        "pi_a": (-a * safe_exp(-u["pi_a"]) * bracket, x),
        "pi_b": ((1 - a) * safe_exp(u["pi_b"]) * (u["mu"] - u["tau_n"]), x),
        "q": (a * inv_ga * eq * resid, s),
        "mu": (-a * inv_ga * eq + (1 - a) * inv_1mgb, s),
        "tau_n": (-(1 - a) * inv_1mgb + a * inv_ga, x),
        "tau": (1.0 - a * inv_ga, x),
    }
    out = {}
    for name, (w, mat) in parts.items():
        out[name] = w[:, None] * mat if per_obs else mat.T @ w / ds.n
    return out
