"""Paired t-test with a continued-fraction incomplete beta function."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import LengthMismatch, NumericalError, ZeroVariance

CF_TOL = 1e-12
CF_MAX_ITER = 10_000
_TINY = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b) by the modified Lentz method."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < CF_TOL:
            return h
    raise NumericalError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the fraction converges fast only below the mean of the beta density
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, dof: float) -> float:
    """Two-sided tail probability of Student's t."""
    if dof <= 0:
        raise ValueError("degrees of freedom must be positive")
    x = dof / (dof + t * t)
    return betainc_regularized(dof / 2.0, 0.5, x)


@dataclass(frozen=True)
class TTestResult:
    t: float
    dof: int
    p_two_sided: float
    mean_difference: float


def paired_ttest(a, b) -> TTestResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"paired samples need equal 1D lengths, got {a.shape} and {b.shape}")
    n = len(a)
    if n < 2:
        raise LengthMismatch("need at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        raise ZeroVariance("paired differences are all identical")
    t = float(d.mean() / (sd / math.sqrt(n)))
    dof = n - 1
    return TTestResult(t, dof, t_two_sided_p(t, dof), float(d.mean()))


def permutation_paired_p(a, b, draws: int = 10_000, seed: int = 0) -> float:
    """Sign-flip randomization p-value for the paired mean difference (t statistic)."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    n = len(d)
    rng = np.random.default_rng(seed)
    signs = rng.choice((-1.0, 1.0), size=(draws, n))
    flipped = signs * d
    means = flipped.mean(axis=1)
    sds = flipped.std(axis=1, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_perm = np.where(sds > 0, means / (sds / math.sqrt(n)), 0.0)
    t_obs = abs(d.mean() / (d.std(ddof=1) / math.sqrt(n)))
    return float(np.mean(np.abs(t_perm) >= t_obs - 1e-12))
