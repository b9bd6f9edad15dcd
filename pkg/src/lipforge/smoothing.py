"""Randomized-smoothing certification with Gaussian input noise.

Includes a self-contained regularized incomplete beta function (for the
one-sided Clopper-Pearson bound) and an inverse standard normal CDF.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .network import Model
from .tensor import ContractError

ABSTAIN = -1


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = 0.25
    n0: int = 100
    n: int = 1000
    alpha: float = 0.001
    seed: int = 0
    batch_size: int = 1000

    def __post_init__(self):
        if not self.sigma > 0:
            raise ContractError(f"sigma must be > 0, got {self.sigma}")
        if not 0 < self.alpha < 1:
            raise ContractError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.n0 < 1 or self.n < 1:
            raise ContractError(f"n0 and n must be >= 1, got {self.n0}, {self.n}")

    def describe(self) -> str:
        return f"sigma={self.sigma!r};n0={self.n0};n={self.n};alpha={self.alpha!r};seed={self.seed}"


# -- special functions ---------------------------------------------------------


def _betacf(a: float, b: float, x: float, max_iter: int = 10000, eps: float = 1e-16) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise ContractError(f"betainc needs a, b > 0, got {a}, {b}")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def clopper_pearson_lower(k: int, n: int, alpha: float, tol: float = 1e-12) -> float:
    """One-sided ``(1 - alpha)`` lower confidence bound on a binomial proportion.

    Solves ``I_p(k, n - k + 1) = alpha`` for ``p`` by bisection.
    """
    if not 0 <= k <= n or n < 1:
        raise ContractError(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")
    if k == 0:
        return 0.0
    lo, hi = 0.0, k / n
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if betainc(k, n - k + 1, mid) < alpha:
            lo = mid
        else:
            hi = mid
    return lo


# Acklam's rational approximation, refined with one Halley step on erfc.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def norm_ppf(p: float) -> float:
    """Inverse of the standard normal CDF."""
    if not 0.0 < p < 1.0:
        if p == 0.0:
            return -math.inf
        if p == 1.0:
            return math.inf
        raise ContractError(f"norm_ppf needs p in [0, 1], got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        )
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
            ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        )
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        )
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


# -- certification -------------------------------------------------------------


@dataclass(frozen=True)
class CertificationResult:
    prediction: int
    radius: float
    pa_lower: float

    @property
    def abstained(self) -> bool:
        return self.prediction == ABSTAIN


def _noisy_counts(model: Model, x: np.ndarray, num: int, cfg: SmoothingConfig,
                  rng: np.random.Generator) -> np.ndarray:
    counts = np.zeros(model.classes, dtype=np.int64)
    remaining = num
    while remaining > 0:
        b = min(cfg.batch_size, remaining)
        noise = rng.standard_normal((b, *x.shape)) * cfg.sigma
        preds = model.forward(x[None] + noise).data.argmax(axis=1)
        counts += np.bincount(preds, minlength=model.classes)
        remaining -= b
    return counts


def certify(model: Model, x, config: SmoothingConfig, index: int = 0) -> CertificationResult:
    """Monte Carlo certificate for the smoothed classifier at ``x``.

    The top class is chosen from ``n0`` noisy predictions; its probability is
    lower-bounded from ``n`` fresh ones.  The noise generator is seeded with
    ``index ^ seed`` so per-sample results do not depend on evaluation order.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(int(index) ^ int(config.seed))
    top = int(_noisy_counts(model, x, config.n0, config, rng).argmax())
    n_top = int(_noisy_counts(model, x, config.n, config, rng)[top])
    pa = clopper_pearson_lower(n_top, config.n, config.alpha)
    if pa <= 0.5:
        return CertificationResult(ABSTAIN, 0.0, pa)
    return CertificationResult(top, config.sigma * norm_ppf(pa), pa)


@dataclass
class CertifiedCurve:
    radii: np.ndarray
    accuracy: np.ndarray
    certificates: list = field(repr=False)
    labels: np.ndarray = field(repr=False)

    @property
    def smoothed_accuracy(self) -> float:
        return float(np.mean([c.prediction == y for c, y in zip(self.certificates, self.labels)]))


def certified_accuracy_curve(model: Model, x, y, radii: Sequence[float],
                             config: SmoothingConfig) -> CertifiedCurve:
    """Fraction of samples whose smoothed prediction is correct with radius >= r."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ContractError("certified accuracy needs a non-empty dataset")
    radii = np.asarray(radii, dtype=np.float64)
    if radii.size == 0 or np.any(np.diff(radii) < 0):
        raise ContractError("radii must be a non-empty non-decreasing sequence")
    certs = [certify(model, xi, config, index=i) for i, xi in enumerate(x)]
    rad = np.array([c.radius for c in certs])
    ok = np.array([c.prediction == yi for c, yi in zip(certs, y)])
    acc = np.array([float(np.mean(ok & (rad >= r))) for r in radii])
    return CertifiedCurve(radii, acc, certs, y)
