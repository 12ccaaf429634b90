"""Variance, Wald intervals and two-sided z-tests from per-observation scores."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ContractViolation(ValueError):
    pass


# Rational approximation of the standard normal quantile (P. J. Acklam),
# relative error about 1.15e-9, refined below by one Halley step.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF for ``p`` in (0, 1)."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    if p > 0.5:
        # 1 - p is exact here, so the upper tail keeps full relative precision.
        return -normal_quantile(1.0 - p)
    if p < _P_LOW:
        r = math.sqrt(-2.0 * math.log(p))
        x = ((((( _C[0] * r + _C[1]) * r + _C[2]) * r + _C[3]) * r + _C[4]) * r + _C[5]) / \
            ((((_D[0] * r + _D[1]) * r + _D[2]) * r + _D[3]) * r + 1.0)
    else:
        r = p - 0.5
        t = r * r
        x = (((((_A[0] * t + _A[1]) * t + _A[2]) * t + _A[3]) * t + _A[4]) * t + _A[5]) * r / \
            (((((_B[0] * t + _B[1]) * t + _B[2]) * t + _B[3]) * t + _B[4]) * t + 1.0)
    # Halley refinement against the erfc-based CDF.
    e = normal_cdf(x) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def variance_hat(scores, theta_hat: float) -> float:
    """``mean((scores - theta_hat)^2)``, dividing by N.

    ``theta_hat`` must be the mean of ``scores``; anything else is a caller bug.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("scores must be non-empty")
    mean = float(np.mean(scores))
    if abs(theta_hat - mean) > 1e-10 * max(1.0, abs(mean)):
        raise ContractViolation(f"theta_hat={theta_hat!r} differs from mean(scores)={mean!r}")
    # Centre on the first score first so constant inputs give exactly zero.
    shifted = scores - scores[0]
    dev = shifted - shifted.mean()
    return float(dev @ dev) / scores.size


def confidence_interval(theta_hat: float, sigma2: float, n: int, level: float = 0.95):
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    half = normal_quantile(0.5 * (1.0 + level)) * math.sqrt(sigma2 / n)
    return theta_hat - half, theta_hat + half


def z_test(theta_hat: float, sigma2: float, n: int, null_value: float = 0.0) -> float:
    """Two-sided normal p-value for ``H0: theta = null_value``."""
    diff = theta_hat - null_value
    if diff == 0:
        return 1.0
    se = math.sqrt(sigma2 / n)
    if se == 0:
        return 0.0
    return math.erfc(abs(diff / se) / math.sqrt(2.0))


@dataclass(frozen=True)
class InferenceResult:
    sigma2: float
    se: float
    ci: tuple
    z: float
    p_value: float


def infer(theta_hat: float, sigma2: float, n: int, level: float = 0.95,
          null_value: float = 0.0) -> InferenceResult:
    se = math.sqrt(sigma2 / n)
    diff = theta_hat - null_value
    if diff == 0:
        z = 0.0
    else:
        z = diff / se if se > 0 else math.copysign(math.inf, diff)
    return InferenceResult(sigma2, se, confidence_interval(theta_hat, sigma2, n, level), z,
                           z_test(theta_hat, sigma2, n, null_value))
