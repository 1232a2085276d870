"""Two-sample variance-equality testing and the special functions behind it.

All operations are pure functions; the incomplete beta continued fraction
keeps this module free of heavyweight dependencies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DegenerateVarianceError",
    "LeveneResult",
    "levene_test",
    "normal_inverse_cdf",
    "regularized_incomplete_beta",
    "student_t_cdf",
]

_BETA_CF_TOL = 1e-12
_BETA_CF_MAX_ITER = 300
_CF_TINY = 1e-300


class DegenerateVarianceError(ValueError):
    """Pooled deviation variance is exactly zero; the test is undefined."""


@dataclass(frozen=True)
class LeveneResult:
    """Outcome of the two-sample spread-equality test."""

    statistic: float
    degrees_of_freedom: int
    p_value: float


def levene_test(e_left, e_right) -> LeveneResult:
    """Test whether two residual groups have equal variance.

    Each group is reduced to absolute deviations from its own mean, and the
    statistic is the pooled-variance t statistic comparing the two deviation
    samples:

        T = (zbar_L - zbar_R) / (w_pool * sqrt(1/n_L + 1/n_R))

    with sample variances on the n-1 convention and n_L + n_R - 2 degrees of
    freedom. The p-value is two-sided: either direction of variance
    inequality counts as evidence against equality.

    Raises ValueError if a group has fewer than 2 elements and
    DegenerateVarianceError if the pooled deviation variance is zero (callers
    searching over split candidates should skip such candidates).
    """
    left = np.asarray(e_left, dtype=float)
    right = np.asarray(e_right, dtype=float)
    if left.ndim != 1 or right.ndim != 1:
        raise ValueError("residual groups must be one-dimensional")
    n_l, n_r = left.size, right.size
    if n_l < 2 or n_r < 2:
        raise ValueError("each residual group needs at least 2 elements")
    if not (np.all(np.isfinite(left)) and np.all(np.isfinite(right))):
        raise ValueError("residuals must be finite")

    z_left = np.abs(left - left.mean())
    z_right = np.abs(right - right.mean())
    w2_left = float(z_left.var(ddof=1))
    w2_right = float(z_right.var(ddof=1))
    df = n_l + n_r - 2
    pooled = ((n_l - 1) * w2_left + (n_r - 1) * w2_right) / df
    if pooled <= 0.0:
        raise DegenerateVarianceError(
            "zero pooled deviation variance (both groups have constant spread)"
        )
    statistic = (float(z_left.mean()) - float(z_right.mean())) / math.sqrt(
        pooled * (1.0 / n_l + 1.0 / n_r)
    )
    p_value = 2.0 * (1.0 - student_t_cdf(abs(statistic), df))
    return LeveneResult(
        statistic=statistic,
        degrees_of_freedom=df,
        p_value=min(p_value, 1.0),
    )


def student_t_cdf(t: float, df: int) -> float:
    """Student-t distribution function via the regularized incomplete beta.

    For t >= 0, F(t) = 1 - I_x(df/2, 1/2) / 2 with x = df / (df + t^2); the
    t < 0 branch follows by symmetry. Absolute accuracy is well below 1e-10
    over the df range used here.
    """
    if df < 1:
        raise ValueError("degrees of freedom must be at least 1")
    t = float(t)
    if t == 0.0:
        return 0.5
    x = df / (df + t * t)
    tail = 0.5 * regularized_incomplete_beta(0.5 * df, 0.5, x)
    return 1.0 - tail if t > 0.0 else tail


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b).

    Evaluated with a Lentz-style continued fraction, switching to the
    symmetric form when x is past (a+1)/(a+b+2) so the fraction converges.
    """
    if a <= 0.0 or b <= 0.0:
        raise ValueError("beta parameters must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_CF_MAX_ITER + 1):
        m2 = 2 * m
        numerator = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + numerator * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + numerator / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        numerator = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + numerator * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + numerator / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_CF_TOL:
            return h
    raise RuntimeError(
        f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})"
    )


# Acklam's rational approximation for the standard normal quantile; the
# raw approximation is good to ~1.2e-9 and one Newton step pushes it to
# machine precision.
_ACKLAM_A = (
    -3.969683028665376e01,
    2.209460984245205e02,
    -2.759285104469687e02,
    1.383577518672690e02,
    -3.066479806614716e01,
    2.506628277459239e00,
)
_ACKLAM_B = (
    -5.447609879822406e01,
    1.615858368580409e02,
    -1.556989798598866e02,
    6.680131188771972e01,
    -1.328068155288572e01,
)
_ACKLAM_C = (
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e00,
    -2.549732539343734e00,
    4.374664141464968e00,
    2.938163982698783e00,
)
_ACKLAM_D = (
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e00,
    3.754408661907416e00,
)
_ACKLAM_LOW = 0.02425


def normal_inverse_cdf(tau: float) -> float:
    """Standard normal quantile function.

    Rational approximation refined by one Newton step against the erfc-based
    distribution function; absolute error is far below 1e-9.
    """
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie strictly between 0 and 1")
    a, b, c, d = _ACKLAM_A, _ACKLAM_B, _ACKLAM_C, _ACKLAM_D
    if tau < _ACKLAM_LOW:
        q = math.sqrt(-2.0 * math.log(tau))
        x = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
        x /= (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
    elif tau <= 1.0 - _ACKLAM_LOW:
        q = tau - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q
        x /= ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
    else:
        q = math.sqrt(-2.0 * math.log1p(-tau))
        x = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
        x = -x / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    # One Newton step: x -= (Phi(x) - tau) / phi(x).
    cdf = 0.5 * math.erfc(-x / math.sqrt(2.0))
    pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return x - (cdf - tau) / pdf
