"""Black-Scholes call machinery shared by the QRM oracle and the synthetic pricer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc


@dataclass(frozen=True)
class BsParams:
    s: float
    strike: float
    sigma: float
    tau: float
    r: float = 0.0

    def __post_init__(self):
        if not (self.s > 0 and self.strike > 0 and self.sigma > 0):
            raise ValueError(f"s, strike and sigma must be positive: {self}")
        if self.tau < 0 or self.r < 0:
            raise ValueError(f"tau and r must be nonnegative: {self}")


def payoff(s, strike):
    """Call payoff max(s - K, 0); works on scalars and arrays."""
    out = np.maximum(np.subtract(s, strike, dtype=float), 0.0)
    return float(out) if out.ndim == 0 else out


def norm_cdf(x):
    """Standard normal CDF.

    Uses the complementary error function so the lower tail keeps full
    relative precision (1 + erf loses it below about -5).
    """
    if np.ndim(x):
        return 0.5 * erfc(-np.asarray(x, dtype=float) / math.sqrt(2.0))
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def bs_call(p: BsParams) -> float:
    """Closed-form European call price; tau == 0 returns the payoff exactly."""
    if p.tau == 0:
        return payoff(p.s, p.strike)
    vol_t = p.sigma * math.sqrt(p.tau)
    theta_plus = (math.log(p.s / p.strike) + (p.r + 0.5 * p.sigma ** 2) * p.tau) / vol_t
    theta_minus = theta_plus - vol_t
    return p.s * norm_cdf(theta_plus) - math.exp(-p.r * p.tau) * p.strike * norm_cdf(theta_minus)


def bs_call_surface(s, strike, sigma, tau, r=0.0):
    """Vectorized bs_call over broadcastable arrays of s and tau (all tau > 0)."""
    s = np.asarray(s, dtype=float)
    tau = np.asarray(tau, dtype=float)
    vol_t = sigma * np.sqrt(tau)
    theta_plus = (np.log(s / strike) + (r + 0.5 * sigma ** 2) * tau) / vol_t
    theta_minus = theta_plus - vol_t
    return s * norm_cdf(theta_plus) - np.exp(-r * tau) * strike * norm_cdf(theta_minus)
