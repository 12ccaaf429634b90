"""Cross-fitted estimators of the cross-world mean E[Y(1, M(0))] and effect contrasts.

Two proposed estimators:

* ``estimate_qr`` plugs generic (forest by default) nuisance fits into the
  quadruply robust score, with the cross-world regression refined by a
  doubly robust correction.
* ``estimate_mqr`` fits linear/log-linear/logistic working models by the six
  sequential penalized losses, which makes the score's coefficient gradient
  vanish on average.

Baselines: the efficient-score oracle, a discrete-mediator triply robust
estimator, the odds-based lasso variant and AIPW for ``E[Y(a, M(a))]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .data import (DEFAULT_EPS, Dataset, EstimateReport, NuisanceSet, RoleDegenerateError,
                   Scheme, build_fold_plan, clip_probability, clip_ratio, validate_dataset)
from .inference import confidence_interval, variance_hat, z_test
from .learners import (LassoTuning, LearnerSpec, density_ratio_from_odds,
                       discrete_density_ratio, fit_discrete_conditional, fit_lasso_linear,
                       fit_lasso_logistic, fit_probability, fit_regression, linear_model,
                       logistic_model, mediator_levels)
from .losses import (BLOCKS, ON_S, TARGET, LossContext, build_loss, check_role, logistic,
                     safe_exp)
from .optim import SolverError, cv_select_lambda, lambda_grid, solve_l1


def child_seed(seed, *keys) -> int:
    """Deterministic 32-bit seed derived from ``seed`` and integer keys."""
    return int(np.random.SeedSequence([int(seed) & (2**64 - 1), *keys]).generate_state(1)[0])


def make_report(scores, method_tag: str, level: float = 0.95, diagnostics=None) -> EstimateReport:
    scores = np.asarray(scores, dtype=float)
    theta = float(np.mean(scores))
    sigma2 = variance_hat(scores, theta)
    lo, hi = confidence_interval(theta, sigma2, scores.size, level)
    return EstimateReport(theta, scores, sigma2, lo, hi, level, scores.size, method_tag,
                          diagnostics or {})


def _require_groups(ds: Dataset, need1: bool, need0: bool, what: str):
    n1 = int(ds.a.sum())
    if need1 and n1 == 0:
        raise RoleDegenerateError(f"{what}: no A=1 rows")
    if need0 and n1 == ds.n:
        raise RoleDegenerateError(f"{what}: no A=0 rows")


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------

def score_terms(a, y, pi_a, pi_b, q, mu, tau_n, tau):
    """Quadruply robust score from evaluated nuisances.

    ``pi_a`` weights the treated terms and ``pi_b`` the control term; the two
    coincide for the generic estimator.
    """
    return (a * q * (y - mu) / pi_a + (1 - a) * (mu - tau_n) / (1 - pi_b)
            + a * (tau_n - tau) / pi_a + tau)


def qr_score(ds: Dataset, nuis) -> np.ndarray:
    """Per-observation quadruply robust score.

    ``nuis`` is a :class:`NuisanceSet` or a dict of already evaluated arrays
    with keys ``pi_a, pi_b, q, mu, tau_n, tau``.
    """
    ev = nuis.evaluate(ds) if isinstance(nuis, NuisanceSet) else nuis
    return score_terms(ds.a, ds.y, ev["pi_a"], ev["pi_b"], ev["q"], ev["mu"], ev["tau_n"],
                       ev["tau"])


def eif_score(ds: Dataset, pi, q, mu, tau, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Efficient influence function score with evaluator nuisances (``tau_n = tau``)."""
    p = clip_probability(pi(ds.x), eps)
    t = tau(ds.x)
    return score_terms(ds.a, ds.y, p, p, clip_ratio(q(ds.s), eps), mu(ds.s), t, t)


def mqr_nuisance_set(nu: dict, eps: float = DEFAULT_EPS) -> NuisanceSet:
    """Evaluators of the parametric working models for a coefficient sextet."""
    nu = {k: np.asarray(v, dtype=float) for k, v in nu.items()}
    return NuisanceSet(
        pi_a=lambda x: logistic(x @ nu["pi_a"]),
        pi_b=lambda x: logistic(x @ nu["pi_b"]),
        q=lambda s: safe_exp(s @ nu["q"]),
        mu=lambda s: s @ nu["mu"],
        tau_n=lambda x: x @ nu["tau_n"],
        tau=lambda x: x @ nu["tau"],
        coefficients=tuple(nu[b] for b in BLOCKS),
        eps=eps,
    )


def mqr_score(ds: Dataset, nu: dict, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Score of the model-based estimator at coefficients ``nu`` (keys as in ``BLOCKS``)."""
    d1, d = ds.d1, ds.d1 + ds.d2
    for b in BLOCKS:
        want = d if b in ON_S else d1
        if np.shape(nu[b]) != (want,):
            raise ValueError(f"block {b} has shape {np.shape(nu[b])}, expected ({want},)")
    return qr_score(ds, mqr_nuisance_set(nu, eps))


# ---------------------------------------------------------------------------
# Generic (QR) estimator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QROptions:
    """Learners per nuisance. ``tau`` is used for both cross-world regressions.

    ``tau_method`` is ``"dr"`` (regress the corrected pseudo-outcome) or
    ``"difference"`` (regress only the correction and add it to the nested fit).
    ``ratio`` selects the density ratio estimator: ``"discrete"`` divides
    per-arm conditional probabilities of the mediator levels, ``"odds"`` uses
    the Bayes-odds identity with a classifier of A on S, and ``"auto"`` takes
    the discrete route whenever the mediator has at most ``max_levels``
    distinct values. ``p`` is the classifier used by either route.
    """

    variant: str = "QR2"
    pi: LearnerSpec = LearnerSpec()
    mu: LearnerSpec = LearnerSpec()
    p: LearnerSpec = LearnerSpec()
    tau: LearnerSpec = LearnerSpec()
    tau_method: str = "dr"
    ratio: str = "auto"
    max_levels: int = 32
    eps: float = DEFAULT_EPS
    level: float = 0.95

    def __post_init__(self):
        if self.variant not in ("QR1", "QR2"):
            raise ValueError(f"unknown QR variant {self.variant!r}")
        if self.tau_method not in ("dr", "difference"):
            raise ValueError(f"unknown tau_method {self.tau_method!r}")
        if self.ratio not in ("auto", "odds", "discrete"):
            raise ValueError(f"unknown ratio route {self.ratio!r}")

    def mediator_levels(self, m):
        """Levels for the discrete route, or None when the odds route applies."""
        if self.ratio == "odds":
            return None
        try:
            return mediator_levels(m, self.max_levels)
        except ValueError:
            if self.ratio == "discrete":
                raise
            return None

    def with_trees(self, n_trees: int) -> "QROptions":
        return replace(self, pi=self.pi.with_trees(n_trees), mu=self.mu.with_trees(n_trees),
                       p=self.p.with_trees(n_trees), tau=self.tau.with_trees(n_trees))


def fit_tau_nested(ds: Dataset, mu, spec: LearnerSpec, seed=0):
    """Regress ``mu(S)`` on ``X`` over the control rows."""
    _require_groups(ds, False, True, "nested regression")
    ctrl = ds.a == 0
    return fit_regression(spec, ds.x[ctrl], mu(ds.s[ctrl]), seed)


def fit_tau_dr(ds: Dataset, tau_n, q, mu, spec: LearnerSpec, seed=0, eps: float = DEFAULT_EPS):
    """Regress ``tau_n(X) + q(S) (Y - mu(S))`` on ``X`` over the treated rows."""
    _require_groups(ds, True, False, "doubly robust regression")
    tr = ds.a == 1
    x, s = ds.x[tr], ds.s[tr]
    target = tau_n(x) + clip_ratio(q(s), eps) * (ds.y[tr] - mu(s))
    return fit_regression(spec, x, target, seed)


def estimate_tau_difference(ds: Dataset, tau_n, q, mu, spec: LearnerSpec = LearnerSpec(),
                            seed=0, eps: float = DEFAULT_EPS):
    """``tau_n + Delta`` where ``Delta`` regresses ``q(S)(Y - mu(S))`` on ``X`` over A=1."""
    _require_groups(ds, True, False, "difference regression")
    tr = ds.a == 1
    s = ds.s[tr]
    delta = fit_regression(spec, ds.x[tr], clip_ratio(q(s), eps) * (ds.y[tr] - mu(s)), seed)
    return lambda x: tau_n(x) + delta(x)


def fit_density_ratio(ds: Dataset, opts: QROptions, seed=0, pi=None, levels=None):
    """Nonparametric ``q`` on one subsample, by the route chosen in ``opts``.

    ``levels`` fixes the mediator support of the discrete route (pass the
    levels of the full sample so that held-out rows are always covered).
    """
    _require_groups(ds, True, True, "density ratio role")
    if levels is None:
        levels = opts.mediator_levels(ds.m)
    if levels is not None:
        mopts = replace(opts.p.forest, eps=opts.eps)
        tr, ctrl = ds.a == 1, ds.a == 0
        f0 = fit_discrete_conditional(ds.x[ctrl], ds.m[ctrl], levels, mopts,
                                      child_seed(seed, 5))
        f1 = fit_discrete_conditional(ds.x[tr], ds.m[tr], levels, mopts, child_seed(seed, 6))
        return discrete_density_ratio(f0, f1, ds.d1, opts.eps)
    if pi is None:
        pi = fit_probability(opts.pi, ds.x, ds.a, child_seed(seed, 0))
    p = fit_probability(opts.p, ds.s, ds.a, child_seed(seed, 2))
    return density_ratio_from_odds(pi, p, ds.d1, opts.eps)


def fit_qr_nuisances(roles, opts: QROptions = QROptions(), seed=0, pi=None, mu=None,
                     q=None, levels=None) -> NuisanceSet:
    """Fit the generic nuisances on three role subsamples ``(I0, I1, I2)``.

    ``pi``, ``mu`` and ``q`` may be supplied to skip the corresponding fits
    (used with analytic functions in identification checks).
    """
    r0, r1, r2 = roles
    if pi is None or q is None:
        _require_groups(r0, True, True, "propensity role")
    if pi is None:
        pi = fit_probability(opts.pi, r0.x, r0.a, child_seed(seed, 0))
    if mu is None:
        _require_groups(r0, True, False, "outcome role")
        tr = r0.a == 1
        mu = fit_regression(opts.mu, r0.s[tr], r0.y[tr], child_seed(seed, 1))
    if q is None:
        q = fit_density_ratio(r0, opts, seed, pi, levels)
    tau_n = fit_tau_nested(r1, mu, opts.tau, child_seed(seed, 3))
    if opts.tau_method == "dr":
        tau = fit_tau_dr(r2, tau_n, q, mu, opts.tau, child_seed(seed, 4), opts.eps)
    else:
        tau = estimate_tau_difference(r2, tau_n, q, mu, opts.tau, child_seed(seed, 4), opts.eps)
    return NuisanceSet(pi, pi, q, mu, tau_n, tau, eps=opts.eps)


def _cross_fit(ds, k_folds, scheme, seed, fit_fold, tag, level, role_names=None):
    """Shared cross-fitting loop; ``fit_fold(roles, fold_seed)`` returns a score function."""
    plan = build_fold_plan(ds.n, k_folds, scheme, seed)
    scores = np.empty(ds.n)
    diags = []
    for k in range(k_folds):
        if role_names is None or plan.scheme is Scheme.FULL:
            train = ds.subset(plan.train_indices(k))
            roles = {name: train for name in (role_names or ["all"])}
        else:
            roles = {name: ds.subset(plan.role(k, name)) for name in role_names}
        score_fn, diag = fit_fold(roles, child_seed(seed, 1000 + k))
        ev = plan.eval_indices(k)
        scores[ev] = score_fn(ds.subset(ev))
        diags.append(diag)
    return make_report(scores, tag, level, {"folds": diags, "k_folds": k_folds, "seed": seed})


def estimate_qr(ds: Dataset, k_folds: int = 5, opts: QROptions = QROptions(), seed=0,
                pi=None, mu=None, q=None) -> EstimateReport:
    """Cross-fitted generic quadruply robust estimator (variants QR1/QR2)."""
    validate_dataset(ds, k_folds)
    scheme = "QR3" if opts.variant == "QR1" else "FULL"
    levels = opts.mediator_levels(ds.m) if q is None else None

    def fit_fold(roles, fold_seed):
        if scheme == "QR3":
            trio = (roles["I0"], roles["I1"], roles["I2"])
        else:
            trio = (roles["I0"],) * 3
        nuis = fit_qr_nuisances(trio, opts, fold_seed, pi, mu, q, levels)
        return (lambda part: qr_score(part, nuis)), {}

    return _cross_fit(ds, k_folds, scheme, seed, fit_fold, opts.variant, opts.level,
                      ["I0", "I1", "I2"])


# ---------------------------------------------------------------------------
# Model-based (MQR) estimator
# ---------------------------------------------------------------------------

MQR_ROLE_OF = {"pi_a": "pi", "pi_b": "pi", "q": "q", "mu": "mu", "tau_n": "tau_n", "tau": "tau"}


@dataclass(frozen=True)
class MQRTuning:
    """Penalty selection for the six sequential fits.

    ``lam`` fixes every penalty (``0`` gives unpenalized fits); otherwise each
    is chosen by ``cv_folds``-fold CV inside its role subsample, one at a
    time, with earlier fits frozen. Fits along the CV path stop at KKT
    residual ``cv_tol``; the final fit uses ``tol``.
    """

    variant: str = "MQR2"
    lam: Optional[float] = None
    cv_folds: int = 5
    grid_size: int = 50
    grid_decades: float = 4.0
    penalize_intercept: bool = True
    tol: float = 1e-6
    cv_tol: float = 1e-4
    max_iter: int = 10_000
    eps: float = DEFAULT_EPS
    level: float = 0.95

    def __post_init__(self):
        if self.variant not in ("MQR1", "MQR2"):
            raise ValueError(f"unknown MQR variant {self.variant!r}")

    def mask(self, dim: int, intercept: bool) -> np.ndarray:
        mask = np.ones(dim, bool)
        if intercept and not self.penalize_intercept:
            mask[0] = False
        return mask


def fit_mqr_nuisances(roles: dict, tuning: MQRTuning = MQRTuning(), seed=0):
    """Sequentially fit the coefficient sextet by the six penalized losses.

    ``roles`` maps ``pi, q, mu, tau_n, tau`` to datasets. Returns
    ``(nu, diagnostics)``; ``nu`` maps each block name to its coefficients.
    """
    fixed = {}
    diags = {}
    for j in range(1, 7):
        block = TARGET[j]
        ds = roles[MQR_ROLE_OF[block]]
        check_role(j, ds)
        loss = build_loss(j, LossContext(ds, dict(fixed)))
        mask = tuning.mask(loss.dim, ds.intercept_flag)
        try:
            if tuning.lam is not None:
                lam = float(tuning.lam)
            else:
                grid = lambda_grid(loss.grad(np.zeros(loss.dim)), mask, tuning.grid_size,
                                   tuning.grid_decades)
                lam = cv_select_lambda(lambda idx: loss.subset(idx).problem(), loss.n, grid,
                                       tuning.cv_folds, child_seed(seed, j), mask,
                                       tuning.cv_tol, tuning.max_iter).lambda_star
            res = solve_l1(loss.problem(lam, mask), tol=tuning.tol, max_iter=tuning.max_iter)
        except SolverError as exc:
            raise SolverError(f"loss {j} ({block}): {exc}", exc.iterate) from exc
        fixed[block] = res.coef
        diags[block] = {"lambda": lam, "iterations": res.iterations,
                        "kkt_residual": res.kkt_residual, "converged": res.converged,
                        "clamp_active": loss.clamp_active(res.coef)}
    return fixed, diags


def estimate_mqr(ds: Dataset, k_folds: int = 5, tuning: MQRTuning = MQRTuning(),
                 seed=0) -> EstimateReport:
    """Cross-fitted model-based quadruply robust estimator (variants MQR1/MQR2)."""
    validate_dataset(ds, k_folds)
    scheme = "MQR5" if tuning.variant == "MQR1" else "FULL"

    def fit_fold(roles, fold_seed):
        nu, diag = fit_mqr_nuisances(roles, tuning, fold_seed)
        return (lambda part: mqr_score(part, nu, tuning.eps)), diag

    return _cross_fit(ds, k_folds, scheme, seed, fit_fold, tuning.variant, tuning.level,
                      ["pi", "q", "mu", "tau_n", "tau"])


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def estimate_oracle(ds: Dataset, truth, eps: float = DEFAULT_EPS,
                    level: float = 0.95) -> EstimateReport:
    """Efficient-score estimator with the true nuisance functions plugged in."""
    return make_report(eif_score(ds, truth.pi, truth.q, truth.mu, truth.tau, eps), "Oracle",
                       level)


@dataclass(frozen=True)
class AIPWOptions:
    pi: LearnerSpec = LearnerSpec()
    outcome: LearnerSpec = LearnerSpec()
    eps: float = DEFAULT_EPS
    level: float = 0.95


def estimate_aipw(ds: Dataset, arm: int, k_folds: int = 5, opts: AIPWOptions = AIPWOptions(),
                  seed=0, pi=None, outcome=None) -> EstimateReport:
    """Cross-fitted augmented IPW estimate of ``E[Y(arm, M(arm))]``.

    ``pi`` (a function of ``x`` giving ``P(A=1|X)``) and ``outcome`` (giving
    ``E[Y|A=arm, X]``) may be supplied to skip the fits.
    """
    if arm not in (0, 1):
        raise ValueError("arm must be 0 or 1")
    validate_dataset(ds, k_folds)

    def fit_fold(roles, fold_seed):
        train = roles["all"]
        pi_hat = pi or fit_probability(opts.pi, train.x, train.a, child_seed(fold_seed, 0))
        if outcome is None:
            sel = train.a == arm
            if not sel.any():
                raise RoleDegenerateError(f"no rows with A={arm} in training fold")
            m_hat = fit_regression(opts.outcome, train.x[sel], train.y[sel],
                                   child_seed(fold_seed, 1))
        else:
            m_hat = outcome

        def score(part):
            p1 = clip_probability(pi_hat(part.x), opts.eps)
            pa = p1 if arm == 1 else 1 - p1
            m = m_hat(part.x)
            return (part.a == arm) * (part.y - m) / pa + m
        return score, {}

    return _cross_fit(ds, k_folds, "FULL", seed, fit_fold, f"AIPW{arm}", opts.level)


@dataclass(frozen=True)
class OTROptions:
    lasso: LassoTuning = LassoTuning()
    eps: float = DEFAULT_EPS
    level: float = 0.95


def fit_otr_nested(ds: Dataset, lasso: LassoTuning = LassoTuning(), seed=0):
    """Lasso outcome regression on ``S`` over A=1, then nested lasso of its fit on ``X`` over A=0.

    Returns ``(mu_coef, tau_coef)``.
    """
    _require_groups(ds, True, True, "odds-based nested fit")
    tr, ctrl = ds.a == 1, ds.a == 0
    mu_coef = fit_lasso_linear(ds.s[tr], ds.y[tr], tuning=lasso, seed=child_seed(seed, 1))
    tau_coef = fit_lasso_linear(ds.x[ctrl], ds.s[ctrl] @ mu_coef, tuning=lasso,
                                seed=child_seed(seed, 2))
    return mu_coef, tau_coef


def estimate_otr_prime(ds: Dataset, k_folds: int = 5, opts: OTROptions = OTROptions(),
                       seed=0) -> EstimateReport:
    """Odds-based triply robust estimator with lasso (logistic) working models."""
    validate_dataset(ds, k_folds)

    def fit_fold(roles, fold_seed):
        train = roles["all"]
        _require_groups(train, True, True, "O-TR' training fold")
        pi = logistic_model(fit_lasso_logistic(train.x, train.a, opts.lasso,
                                               child_seed(fold_seed, 3)), opts.eps)
        p = logistic_model(fit_lasso_logistic(train.s, train.a, opts.lasso,
                                              child_seed(fold_seed, 4)), opts.eps)
        q = density_ratio_from_odds(pi, p, train.d1, opts.eps)
        mu_coef, tau_coef = fit_otr_nested(train, opts.lasso, fold_seed)
        mu, tau = linear_model(mu_coef), linear_model(tau_coef)
        return (lambda part: eif_score(part, pi, q, mu, tau, opts.eps)), {}

    return _cross_fit(ds, k_folds, "FULL", seed, fit_fold, "O-TR'", opts.level)


def estimate_otr(ds: Dataset, k_folds: int = 5, opts: QROptions = QROptions(),
                 seed=0) -> EstimateReport:
    """Odds-based triply robust estimator with the learners of ``opts``.

    The cross-world regression is only the nested fit of ``mu`` on the
    controls, with no doubly robust correction.
    """
    validate_dataset(ds, k_folds)

    def fit_fold(roles, fold_seed):
        train = roles["all"]
        _require_groups(train, True, True, "O-TR training fold")
        tr = train.a == 1
        pi = fit_probability(opts.pi, train.x, train.a, child_seed(fold_seed, 0))
        mu = fit_regression(opts.mu, train.s[tr], train.y[tr], child_seed(fold_seed, 1))
        p = fit_probability(opts.p, train.s, train.a, child_seed(fold_seed, 2))
        q = density_ratio_from_odds(pi, p, train.d1, opts.eps)
        tau = fit_tau_nested(train, mu, opts.tau, child_seed(fold_seed, 3))
        return (lambda part: eif_score(part, pi, q, mu, tau, opts.eps)), {}

    return _cross_fit(ds, k_folds, "FULL", seed, fit_fold, "O-TR", opts.level)


@dataclass(frozen=True)
class TROptions:
    pi: LearnerSpec = LearnerSpec()
    mu: LearnerSpec = LearnerSpec()
    mediator: LearnerSpec = LearnerSpec()
    max_levels: int = 32
    eps: float = DEFAULT_EPS
    level: float = 0.95


def tau_from_levels(mu, f0, d1_levels):
    """``tau(X) = sum_m mu(X, m) P(M = m | A = 0, X)`` over the fitted levels."""
    def tau(x):
        probs = f0.probabilities(x)
        out = np.zeros(x.shape[0])
        for k, lev in enumerate(f0.levels):
            s = np.column_stack([x, np.broadcast_to(lev, (x.shape[0], len(lev)))])
            out += probs[:, k] * mu(s)
        return out
    return tau


def estimate_tr_discrete(ds: Dataset, k_folds: int = 5, opts: TROptions = TROptions(),
                         seed=0) -> EstimateReport:
    """Triply robust estimator for finitely supported mediators.

    The cross-world regression is the finite sum of the outcome regression
    against the fitted control-arm mediator law; the density ratio is the
    ratio of the fitted arm-specific mediator laws.
    """
    validate_dataset(ds, k_folds)
    levels = mediator_levels(ds.m, opts.max_levels)
    mopts = replace(opts.mediator.forest, eps=opts.eps)

    def fit_fold(roles, fold_seed):
        train = roles["all"]
        _require_groups(train, True, True, "TR training fold")
        tr, ctrl = train.a == 1, train.a == 0
        pi = fit_probability(opts.pi, train.x, train.a, child_seed(fold_seed, 0))
        mu = fit_regression(opts.mu, train.s[tr], train.y[tr], child_seed(fold_seed, 1))
        f0 = fit_discrete_conditional(train.x[ctrl], train.m[ctrl], levels, mopts,
                                      child_seed(fold_seed, 5))
        f1 = fit_discrete_conditional(train.x[tr], train.m[tr], levels, mopts,
                                      child_seed(fold_seed, 6))
        q = discrete_density_ratio(f0, f1, train.d1, opts.eps)
        tau = tau_from_levels(mu, f0, levels)
        return (lambda part: eif_score(part, pi, q, mu, tau, opts.eps)), {}

    return _cross_fit(ds, k_folds, "FULL", seed, fit_fold, "TR", opts.level)


# ---------------------------------------------------------------------------
# Effects and aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Contrast:
    estimate: float
    se: float
    ci: tuple
    p_value: float


@dataclass(frozen=True)
class EffectReport:
    """Natural direct/indirect and total effects from three cross-world means.

    Contrast variances treat the component estimates as independent, so the
    intervals and p-values are approximate.
    """

    theta_10: EstimateReport
    theta_11: EstimateReport
    theta_00: EstimateReport
    nde: Contrast
    nie: Contrast
    ate: Contrast
    mediation_proportion: Optional[float]
    variance_note: str = "independent-sum approximation"

    def to_dict(self) -> dict:
        c = lambda v: {"estimate": v.estimate, "se": v.se, "ci_low": v.ci[0],
                       "ci_high": v.ci[1], "p_value": v.p_value}
        return {"theta_10": self.theta_10.to_dict(), "theta_11": self.theta_11.to_dict(),
                "theta_00": self.theta_00.to_dict(), "nde": c(self.nde), "nie": c(self.nie),
                "ate": c(self.ate), "mediation_proportion": self.mediation_proportion,
                "variance_note": self.variance_note}


def _contrast(plus: EstimateReport, minus: EstimateReport, level: float) -> Contrast:
    est = plus.theta_hat - minus.theta_hat
    var = plus.sigma2_hat / plus.n + minus.sigma2_hat / minus.n
    half = confidence_interval(0.0, var, 1, level)[1]
    return Contrast(est, math.sqrt(var), (est - half, est + half), z_test(est, var, 1, 0.0))


def mediation_effects(r10: EstimateReport, r11: EstimateReport, r00: EstimateReport,
                      level: Optional[float] = None) -> EffectReport:
    if not (r10.n == r11.n == r00.n):
        raise ValueError("reports must come from samples of the same size")
    level = r10.level if level is None else level
    nde = _contrast(r10, r00, level)
    nie = _contrast(r11, r10, level)
    ate = _contrast(r11, r00, level)
    prop = nie.estimate / ate.estimate if ate.estimate != 0 else None
    return EffectReport(r10, r11, r00, nde, nie, ate, prop)


def repeat_median(estimator: Callable[[Dataset, int], EstimateReport], ds: Dataset,
                  repeats: int, base_seed: int = 0, jobs: int = 1) -> EstimateReport:
    """Median over ``repeats`` cross-fitting runs with seeds ``base_seed + r``.

    Even counts use the midpoint of the two central estimates. The variance
    and scores come from the run closest to the median (lower seed on ties),
    with scores shifted so that their mean is the reported estimate.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    if jobs > 1 and repeats > 1:
        from joblib import Parallel, delayed
        runs = Parallel(n_jobs=jobs)(delayed(estimator)(ds, base_seed + r)
                                     for r in range(repeats))
    else:
        runs = [estimator(ds, base_seed + r) for r in range(repeats)]
    if repeats == 1:
        return runs[0]
    est = np.array([r.theta_hat for r in runs])
    med = float(np.median(est))
    pick = runs[int(np.argmin(np.abs(est - med)))]
    scores = pick.scores + (med - pick.theta_hat)
    theta = float(np.mean(scores))
    lo, hi = confidence_interval(theta, pick.sigma2_hat, pick.n, pick.level)
    diag = dict(pick.diagnostics, repeats=repeats, repeat_estimates=est.tolist(),
                median=med)
    return EstimateReport(theta, scores, pick.sigma2_hat, lo, hi, pick.level, pick.n,
                          pick.method_tag, diag)
