"""Decision layers that consume a parameter estimate, and excess-risk
estimation against the oracle's decisions.

Newsvendor: demand is N(theta, sigma^2); ordering x costs
``b * E(demand - x)_+ + h * E(x - demand)_+``.  The optimal order given a
point estimate is the estimate shifted by the critical fractile quantile.
With b = h the shift is zero and the order equals the estimate.

Pricing: posting price x earns expected revenue x * (theta - nu * x); the
revenue-maximising price given an estimate is estimate / (2 nu).

Excess risk is oriented so the oracle scores zero and worse decisions score
positive, regardless of whether the objective is a cost or a revenue.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr, ndtri

from .oracle import _norm_pdf


def newsvendor_order(theta_hat, sigma: float, b: float = 2.0, h: float = 2.0):
    """Optimal order quantity for N(theta_hat, sigma^2) demand."""
    if not (b > 0 and h > 0):
        raise ValueError("penalty rates must be positive")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return np.asarray(theta_hat, dtype=float) + sigma * ndtri(b / (b + h))


def expected_newsvendor_cost(x, theta, sigma: float, b: float = 2.0, h: float = 2.0):
    """Exact expected cost of ordering x when demand is N(theta, sigma^2)."""
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    z = (theta - x) / sigma
    under = (theta - x) * ndtr(z) + sigma * _norm_pdf(z)
    over = (x - theta) * ndtr(-z) + sigma * _norm_pdf(z)
    return b * under + h * over


def pricing_price(theta_hat, nu: float):
    """Revenue-maximising price when expected demand at price x is
    theta - nu * x."""
    if not nu > 0:
        raise ValueError("price sensitivity must be positive")
    return np.asarray(theta_hat, dtype=float) / (2.0 * nu)


def pricing_revenue(x, theta, nu: float):
    """Expected revenue of posting price x under true parameter theta."""
    x = np.asarray(x, dtype=float)
    return x * np.asarray(theta, dtype=float) - nu * x * x


def excess_risk(decision_values: np.ndarray, oracle_values: np.ndarray,
                higher_is_better: bool = False) -> tuple[float, float]:
    """Mean regret (and its standard error) of realized objective values
    against the oracle's, oriented so that worse is positive."""
    dv = np.asarray(decision_values, dtype=float).ravel()
    ov = np.asarray(oracle_values, dtype=float).ravel()
    if dv.shape != ov.shape:
        raise ValueError("decision/oracle value shapes differ")
    gap = (ov - dv) if higher_is_better else (dv - ov)
    se = float(gap.std(ddof=1) / np.sqrt(gap.size)) if gap.size > 1 else 0.0
    return float(gap.mean()), se


def newsvendor_excess_risk(estimates, oracle_estimates, theta, sigma: float,
                           b: float = 2.0, h: float = 2.0) -> tuple[float, float]:
    """Excess expected newsvendor cost of acting on ``estimates`` instead of
    the oracle's estimates, averaged over the test instances."""
    x_hat = newsvendor_order(estimates, sigma, b, h)
    x_star = newsvendor_order(oracle_estimates, sigma, b, h)
    cost_hat = expected_newsvendor_cost(x_hat, theta, sigma, b, h)
    cost_star = expected_newsvendor_cost(x_star, theta, sigma, b, h)
    return excess_risk(cost_hat, cost_star, higher_is_better=False)


def pricing_excess_risk(estimates, oracle_estimates, theta,
                        nu: float = 1.0) -> tuple[float, float]:
    """Expected revenue shortfall of pricing from ``estimates`` instead of
    the oracle's estimates."""
    r_hat = pricing_revenue(pricing_price(estimates, nu), theta, nu)
    r_star = pricing_revenue(pricing_price(oracle_estimates, nu), theta, nu)
    return excess_risk(r_hat, r_star, higher_is_better=True)
