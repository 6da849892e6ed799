"""Renyi DP of the Poisson-subsampled Gaussian mechanism and conversion to (eps, delta).

Integer orders use the binomial expansion of the mixture moment; fractional orders
use the two-sided erfc series. Both follow Mironov, Talwar & Zhang (2019).
"""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np
from scipy import special

DEFAULT_ORDERS: tuple[float, ...] = (1.25, 1.5, 1.75) + tuple(float(a) for a in range(2, 65)) + (128.0, 256.0, 512.0)


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = max(a, b), min(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def _log_sub(a: float, b: float) -> float:
    if b == -math.inf:
        return a
    if a <= b:
        return -math.inf
    return a + math.log1p(-math.exp(b - a))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    i = np.arange(alpha + 1, dtype=np.float64)
    terms = (
        special.gammaln(alpha + 1) - special.gammaln(i + 1) - special.gammaln(alpha - i + 1)
        + i * math.log(q)
        + (alpha - i) * math.log1p(-q)
        + (i * i - i) / (2.0 * sigma * sigma)
    )
    return float(special.logsumexp(terms))


def _log_erfc(x: float) -> float:
    return float(special.log_ndtr(-x * math.sqrt(2.0))) + math.log(2.0)


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    log_a0 = log_a1 = -math.inf
    z0 = sigma * sigma * math.log(1.0 / q - 1.0) + 0.5
    i = 0
    while True:
        coef = special.binom(alpha, i)
        log_coef = math.log(abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2.0) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2.0) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2.0 * sigma * sigma) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1
        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        if max(log_s0, log_s1) < -30 or i > 10_000:
            break
    return _log_add(log_a0, log_a1)


def rdp_subsampled_gaussian(q: float, noise_multiplier: float, orders: Iterable[float] = DEFAULT_ORDERS) -> np.ndarray:
    """RDP of one round at each order, for sampling rate ``q`` and noise multiplier ``z``."""
    orders = np.asarray(tuple(orders), dtype=np.float64)
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    if noise_multiplier < 0:
        raise ValueError("noise multiplier must be nonnegative")
    if q == 0.0:
        return np.zeros_like(orders)
    if noise_multiplier == 0.0:
        return np.full_like(orders, np.inf)
    if q == 1.0:
        return orders / (2.0 * noise_multiplier**2)
    out = np.empty_like(orders)
    for n, a in enumerate(orders):
        if float(a).is_integer():
            log_a = _log_a_int(q, noise_multiplier, int(a))
        else:
            log_a = _log_a_frac(q, noise_multiplier, float(a))
        out[n] = log_a / (a - 1.0)
    return out


def rdp_to_epsilon(orders: Iterable[float], rdp: np.ndarray, delta: float) -> tuple[float, float]:
    """Smallest epsilon over the order grid, and the order achieving it.

    Uses eps = rdp + log((a-1)/a) - (log(delta) + log(a)) / (a-1), which is never
    looser than the plain rdp + log(1/delta)/(a-1).
    """
    orders = np.asarray(tuple(orders), dtype=np.float64)
    rdp = np.asarray(rdp, dtype=np.float64)
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    with np.errstate(invalid="ignore"):
        eps = rdp + np.log((orders - 1.0) / orders) - (math.log(delta) + np.log(orders)) / (orders - 1.0)
    eps = np.where(np.isnan(eps), np.inf, eps)
    best = int(np.argmin(eps))
    return max(0.0, float(eps[best])), float(orders[best])
