"""Simulation designs with counterfactual draws and analytic nuisance functions.

Four designs are available:

``S1``  truncated-normal covariates, non-logistic propensity, outcome nonlinear
        in the mediator noise.
``S2``  Gaussian covariates, non-logistic propensity, treated mediator shift
        whose sign depends on a covariate (so the density ratio is not
        log-linear), linear outcome.
``S3``  correlated Gaussian covariates, one binary mediator, nonlinear outcome.
``EX1`` one uniform covariate, Gaussian mediator, quadratic outcome; the
        cross-world mean is exactly 1.

Covariate matrices carry an intercept in column 0. In the nonlinear formulas
``z_j`` denotes the j-th non-intercept covariate (column ``j`` of ``x``), while
coefficient vectors act on the full ``x`` including the intercept.

Every draw also returns ``y_cross``, the outcome under treatment with the
mediator at its untreated value, built from the same latent noise as the
observed data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Optional

import numpy as np

from .data import Dataset
from .losses import logistic

SETTINGS = ("S1", "S2", "S3", "EX1")
DEFAULT_DIMS = {"S1": (101, 50), "S2": (101, 50), "S3": (50, 1), "EX1": (2, 1)}
MIN_DIMS = {"S1": (5, 3), "S2": (5, 3), "S3": (4, 1), "EX1": (2, 1)}
TRUNCATION = 1.2
CHUNK = 100_000
N_MC_FLOOR = 10_000

OVERRIDABLE = {
    "S1": ("delta1", "delta2", "sigma_corr", "noise_sd"),
    "S2": ("delta2", "sigma_corr", "noise_sd"),
    "S3": ("noise_sd",),
    "EX1": ("noise_sd",),
}


def g_tilde(x):
    """Non-logistic link ``(0.1 + |x| + sin x) / (0.7 + |x| + sin x)``."""
    x = np.asarray(x, dtype=float)
    core = np.abs(x) + np.sin(x)
    out = (0.1 + core) / (0.7 + core)
    return out if out.ndim else float(out)


def truncated_normal(lo: float, hi: float, seed=0):
    """Sampler for the standard normal restricted to ``[lo, hi]`` (rejection)."""
    if not lo < hi:
        raise ValueError("need lo < hi")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def sample(size):
        out = rng.standard_normal(size)
        bad = (out < lo) | (out > hi)
        while bad.any():
            out[bad] = rng.standard_normal(int(bad.sum()))
            bad = (out < lo) | (out > hi)
        return out
    return sample


def truncated_normal_variance(lo: float, hi: float) -> float:
    pdf = lambda t: math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
    cdf = lambda t: 0.5 * math.erfc(-t / math.sqrt(2))
    z = cdf(hi) - cdf(lo)
    mean = (pdf(lo) - pdf(hi)) / z
    return 1 + (lo * pdf(lo) - hi * pdf(hi)) / z - mean ** 2


@dataclass(frozen=True)
class DgpSpec:
    setting: str
    n: int
    d1: Optional[int] = None
    d2: Optional[int] = None
    seed: int = 0
    overrides: Optional[dict] = None

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}; choose from {SETTINGS}")
        d1, d2 = DEFAULT_DIMS[self.setting]
        object.__setattr__(self, "d1", d1 if self.d1 is None else int(self.d1))
        object.__setattr__(self, "d2", d2 if self.d2 is None else int(self.d2))
        lo1, lo2 = MIN_DIMS[self.setting]
        if self.d1 < lo1 or self.d2 < lo2:
            raise ValueError(f"{self.setting} needs d1 >= {lo1} and d2 >= {lo2}, "
                             f"got ({self.d1}, {self.d2})")
        if self.setting in ("S3", "EX1") and self.d2 != 1:
            raise ValueError(f"{self.setting} has a univariate mediator (d2 = 1)")
        if self.n < 1:
            raise ValueError("n must be positive")
        bad = set(self.overrides or {}) - set(OVERRIDABLE[self.setting])
        if bad:
            raise ValueError(f"unsupported overrides for {self.setting}: {sorted(bad)}")

    def param(self, name, default):
        return (self.overrides or {}).get(name, default)


@dataclass(frozen=True)
class TruthFunctions:
    """Analytic nuisances. ``pi``/``tau`` take ``x``; ``mu``/``q`` take ``s = (x, m)``."""

    pi: Callable
    mu: Callable
    q: Callable
    tau: Callable
    theta: Optional[float] = None


@dataclass(frozen=True)
class OracleDraw:
    dataset: Dataset
    y_cross: np.ndarray = field(repr=False)
    truth: TruthFunctions = field(repr=False)


# ---------------------------------------------------------------------------
# Shared Gaussian-mediator pieces (S1, S2)
# ---------------------------------------------------------------------------

def _phi(d1, d2):
    j, k = np.meshgrid(np.arange(d1), np.arange(d2), indexing="ij")
    return np.where(j == k, 0.6, np.where(np.abs(j - k) == 1, 0.3, 0.0))


def _sigma(d2, corr):
    sigma = np.eye(d2)
    sigma[0, 1] = sigma[1, 0] = corr
    return sigma


def _head(values, d):
    out = np.zeros(d)
    out[:len(values)] = values
    return out


def _beta_pi(d1):
    return _head(np.ones(4), d1)


class _Gaussian:
    """Mediator noise ``U ~ N(mean, sigma)`` with a fixed covariance."""

    def __init__(self, sigma):
        self.chol = np.linalg.cholesky(sigma)
        self.prec = np.linalg.inv(sigma)

    def log_ratio(self, u, mean0, mean1):
        """``log N(u; mean0) - log N(u; mean1)`` row-wise."""
        r0, r1 = u - mean0, u - mean1
        return -0.5 * (np.einsum("ij,jk,ik->i", r0, self.prec, r0)
                       - np.einsum("ij,jk,ik->i", r1, self.prec, r1))


def _eta(x):
    sign = 2.0 * (x[:, 4] > 0) - 1.0
    eta = np.zeros((x.shape[0], 3))
    eta[:, 0] = logistic(x[:, 1])
    eta[:, 1] = 0.6 * logistic(x[:, 2])
    eta[:, 2] = 0.6 * logistic(x[:, 3])
    return sign[:, None] * eta


def _gen_s1_s2(spec, rng):
    n, d1, d2 = spec.n, spec.d1, spec.d2
    s1 = spec.setting == "S1"
    if s1:
        z = truncated_normal(-TRUNCATION, TRUNCATION, rng)((n, d1 - 1))
    else:
        z = rng.standard_normal((n, d1 - 1))
    x = np.column_stack([np.ones(n), z])
    pi = g_tilde(x @ _beta_pi(d1))
    a = (rng.random(n) < pi).astype(float)
    phi = _phi(d1, d2)
    gauss = _Gaussian(_sigma(d2, spec.param("sigma_corr", 0.3)))
    delta2 = _head(spec.param("delta2", [0.4, 0.4, 0.4]), d2)
    if s1:
        delta1 = _head(spec.param("delta1", [1.2, 0.6, 0.6]), d2)
        mean1 = np.broadcast_to(delta1, (n, d2))
    else:
        mean1 = np.zeros((n, d2))
        mean1[:, :3] = _eta(x)
    xi = rng.standard_normal((n, d2)) @ gauss.chol.T
    eps = spec.param("noise_sd", 1.0) * rng.standard_normal(n)
    u0 = delta2 + xi
    u = np.where(a[:, None] == 1, mean1 + xi, u0)
    base = x @ phi
    m = base + u
    m0 = base + u0
    if s1:
        y = _s1_outcome(z, u, m) + eps
        y_cross = _s1_outcome(z, u0, m0) + eps
    else:
        beta = _s2_beta(d1, d2)
        y = np.column_stack([x, m]) @ beta + eps
        y_cross = np.column_stack([x, m0]) @ beta + eps
    return x, a, m, y, y_cross, _truth_s1_s2(spec, phi, gauss, delta2)


def _s1_outcome(z, u, m):
    ind = (u[:, 0] > 0.4).astype(float)
    zz = z[:, :3]
    uu = u[:, :3]
    w = zz * (uu + ind[:, None]) + zz ** 2 * (uu - 0.4)
    return 1.0 + w.sum(axis=1) + m[:, :3].sum(axis=1)


def _s2_beta(d1, d2):
    return np.concatenate([_head([1.0, -0.6, -0.6, -0.6], d1), _head(np.ones(3), d2)])


def _truth_s1_s2(spec, phi, gauss, delta2):
    d1, d2 = spec.d1, spec.d2
    s1 = spec.setting == "S1"
    bpi = _beta_pi(d1)
    pi = lambda x: g_tilde(np.asarray(x) @ bpi)

    if s1:
        delta1 = _head(spec.param("delta1", [1.2, 0.6, 0.6]), d2)

        def mu(s):
            x, m = s[:, :d1], s[:, d1:]
            return _s1_outcome(x[:, 1:], m - x @ phi, m)

        def q(s):
            x, m = s[:, :d1], s[:, d1:]
            return np.exp(gauss.log_ratio(m - x @ phi, delta2, delta1))

        # E over U ~ N(delta2, sigma) of the outcome: E[U_j] = delta2_j and
        # P(U_1 > 0.4) is a normal tail probability.
        p_ind = 0.5 * math.erfc((0.4 - delta2[0]) / math.sqrt(2.0))

        def tau(x):
            z = x[:, 1:4]
            w = z * (delta2[:3] + p_ind) + z ** 2 * (delta2[:3] - 0.4)
            return 1.0 + w.sum(axis=1) + (x @ phi)[:, :3].sum(axis=1) + delta2[:3].sum()

        var_z = truncated_normal_variance(-TRUNCATION, TRUNCATION)
        theta = (1.0 + var_z * (delta2[:3] - 0.4).sum() + phi[0, :3].sum()
                 + delta2[:3].sum())
        return TruthFunctions(pi, mu, q, tau, theta)

    beta = _s2_beta(d1, d2)
    bx, bm = beta[:d1], beta[d1:]

    def mu(s):
        return s @ beta

    def q(s):
        x, m = s[:, :d1], s[:, d1:]
        mean1 = np.zeros((x.shape[0], d2))
        mean1[:, :3] = _eta(x)
        return np.exp(gauss.log_ratio(m - x @ phi, delta2, mean1))

    def tau(x):
        return x @ bx + (x @ phi + delta2) @ bm

    theta = 1.0 + float((phi[0] + delta2) @ bm)
    return TruthFunctions(pi, mu, q, tau, theta)


# ---------------------------------------------------------------------------
# S3: binary mediator
# ---------------------------------------------------------------------------

def _s3_mediator_prob(a, x):
    z = x[:, 1:]
    return (0.2 + 0.15 * (1 - a) * (1 + (z[:, 1] > 0))
            + 0.3 * logistic(z[:, 0] + z[:, 1] + z[:, 2]))


def _s3_outcome_mean(x, m):
    z = x[:, 1:4]
    omega = 0.3 * (z > 0) + (1 - m)[:, None] * z
    return (1.0 + omega[:, 2] * z[:, 0] + omega[:, 1] * z[:, 1] + omega[:, 0] * z[:, 2]
            + 0.5 * np.abs(z - 1).sum(axis=1))


def _gen_s3(spec, rng):
    n, d1 = spec.n, spec.d1
    k = d1 - 1
    idx = np.arange(k)
    cov = 0.3 ** np.abs(idx[:, None] - idx[None, :])
    z = rng.standard_normal((n, k)) @ np.linalg.cholesky(cov).T
    x = np.column_stack([np.ones(n), z])
    a = (rng.random(n) < g_tilde(x @ _beta_pi(d1))).astype(float)
    v = rng.random(n)
    m = (v < _s3_mediator_prob(a, x)).astype(float)
    m0 = (v < _s3_mediator_prob(np.zeros(n), x)).astype(float)
    eps = spec.param("noise_sd", 1.0) * rng.standard_normal(n)
    y = _s3_outcome_mean(x, m) + eps
    y_cross = _s3_outcome_mean(x, m0) + eps

    pi = lambda xx: g_tilde(np.asarray(xx) @ _beta_pi(d1))

    def mu(s):
        return _s3_outcome_mean(s[:, :d1], s[:, d1])

    def q(s):
        xx, mm = s[:, :d1], s[:, d1]
        p0 = _s3_mediator_prob(np.zeros(len(mm)), xx)
        p1 = _s3_mediator_prob(np.ones(len(mm)), xx)
        return np.where(mm == 1, p0 / p1, (1 - p0) / (1 - p1))

    def tau(xx):
        p0 = _s3_mediator_prob(np.zeros(xx.shape[0]), xx)
        ones = np.ones(xx.shape[0])
        return p0 * _s3_outcome_mean(xx, ones) + (1 - p0) * _s3_outcome_mean(xx, 0 * ones)

    return x, a, m[:, None], y, y_cross, TruthFunctions(pi, mu, q, tau, None)


def s3_mediator_prob(a, x):
    """``P(M = 1 | A = a, X = x)`` for the binary-mediator design."""
    a = np.broadcast_to(np.asarray(a, dtype=float), (np.asarray(x).shape[0],))
    return _s3_mediator_prob(a, np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# EX1
# ---------------------------------------------------------------------------

def _gen_ex1(spec, rng):
    n, d1 = spec.n, spec.d1
    z = rng.uniform(-1.0, 1.0, (n, d1 - 1))
    x = np.column_stack([np.ones(n), z])
    x1 = z[:, 0]
    a = (rng.random(n) < 0.3 * x1 + 0.5).astype(float)
    sd = spec.param("noise_sd", 1.0)
    e1 = rng.standard_normal(n)
    e2 = sd * rng.standard_normal(n)
    m = x1 + a + e1
    y = x1 + m + 1 - a + (m - x1) ** 2 + e2
    m0 = x1 + e1
    y_cross = x1 + m0 + (m0 - x1) ** 2 + e2
    return x, a, m[:, None], y, y_cross, ex1_truth()


def ex1_truth() -> TruthFunctions:
    """Analytic nuisances of the uniform-covariate design (theta = 1)."""
    def mu(s):
        x1, m = s[:, 1], s[:, -1]
        return x1 + m + (m - x1) ** 2

    def q(s):
        return np.exp(-(s[:, -1] - s[:, 1]) + 0.5)

    return TruthFunctions(lambda x: 0.3 * np.asarray(x)[:, 1] + 0.5, mu, q,
                          lambda x: 2 * np.asarray(x)[:, 1] + 1, 1.0)


_GENERATORS = {"S1": _gen_s1_s2, "S2": _gen_s1_s2, "S3": _gen_s3, "EX1": _gen_ex1}


def _rng(seed):
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1)))


def generate(spec: DgpSpec) -> OracleDraw:
    """Draw ``spec.n`` observations plus their cross-world outcomes."""
    x, a, m, y, y_cross, truth = _GENERATORS[spec.setting](spec, _rng(spec.seed))
    return OracleDraw(Dataset(y, a, x, m, True), y_cross, truth)


def truth_functions(spec: DgpSpec) -> TruthFunctions:
    return generate(DgpSpec(spec.setting, 1, spec.d1, spec.d2, 0, spec.overrides)).truth


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------

def oracle_theta(spec: DgpSpec, n_mc: int, seed: int = 0, chunk: int = CHUNK) -> dict:
    """Monte Carlo mean and standard error of the cross-world outcome.

    Draws are generated in chunks with child seeds spawned from ``seed``; the
    result depends only on ``(spec setting, dims, overrides, n_mc, seed)``.
    """
    if n_mc < N_MC_FLOOR:
        raise ValueError(f"n_mc must be at least {N_MC_FLOOR}")
    children = np.random.SeedSequence(int(seed) & (2**64 - 1)).spawn(-(-n_mc // chunk))
    total = total_sq = 0.0
    done = 0
    for child in children:
        size = min(chunk, n_mc - done)
        draw = _GENERATORS[spec.setting](
            DgpSpec(spec.setting, size, spec.d1, spec.d2, 0, spec.overrides), _rng(child))
        yc = draw[4]
        total += float(yc.sum())
        total_sq += float(yc @ yc)
        done += size
    mean = total / n_mc
    var = max(total_sq / n_mc - mean ** 2, 0.0)
    return {"theta": mean, "mc_se": math.sqrt(var / n_mc), "n_mc": n_mc, "seed": int(seed)}


def load_fixtures() -> dict:
    path = resources.files("quadmed").joinpath("fixtures/oracle_theta.json")
    return json.loads(path.read_text(encoding="utf-8"))


def fixture_theta(setting: str) -> float:
    """Stored ground truth for a setting; EX1 is exact."""
    if setting == "EX1":
        return 1.0
    return float(load_fixtures()[setting]["theta"])
