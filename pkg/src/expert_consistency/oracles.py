"""Independent reference computations used to check the production code.

None of these call the production routine for the quantity they check:
influence is checked by refitting, AUC by counting pairs, the normal quantile
by bisection, and the agreement bound by simulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit


@dataclass(frozen=True)
class OracleResult:
    """``cost`` counts the elementary operations the oracle performed (fits'
    iterations, pair comparisons, simulated draws)."""

    value: float
    method: str
    cost: int

    def __post_init__(self):
        if not self.method:
            raise ValueError("oracle method must be described")


def _fit_reference(X, y, weights, ridge, tol):
    """Weighted ridge logistic fit by quasi-Newton followed by Newton polish."""
    Xd = np.hstack([X, np.ones((X.shape[0], 1))])
    mask = np.ones(Xd.shape[1])
    mask[-1] = 0.0

    def f(t):
        z = Xd @ t
        return np.sum(weights * (np.logaddexp(0.0, z) - y * z)) + 0.5 * ridge * np.sum((mask * t) ** 2)

    def g(t):
        return Xd.T @ (weights * (expit(Xd @ t) - y)) + ridge * mask * t

    res = minimize(f, np.zeros(Xd.shape[1]), jac=g, method="BFGS", options={"gtol": 1e-6, "maxiter": 2000})
    t = res.x
    steps = int(res.nit)
    for _ in range(50):
        grad = g(t)
        if np.linalg.norm(grad) <= tol:
            break
        s = expit(Xd @ t)
        H = (Xd.T * (weights * s * (1 - s))) @ Xd + np.diag(ridge * mask)
        t = t - np.linalg.solve(H, grad)
        steps += 1
    else:
        raise ArithmeticError("reference fit did not reach the gradient tolerance")
    return t, steps


def retraining_influence_oracle(X, decisions, expert_ids, expert: int, x_query, epsilon: float = 1e-4,
                                ridge: float = 1e-2, tol: float = 1e-11, weights=None) -> OracleResult:
    """Finite-difference influence: refit with expert ``expert`` up-weighted by
    ``1 + epsilon`` and difference the class-1 probability at ``x_query``.

    With base ``weights`` the expert's cases are scaled by ``1 + epsilon`` on
    top of them and the difference is normalized by the expert's weight mass.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    X = np.asarray(X, dtype=float)
    y = np.asarray(decisions, dtype=float)
    a = np.asarray(expert_ids)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    members = a == expert
    if not members.any():
        raise ValueError(f"expert {expert} has no cases")
    size = float(w[members].sum())
    base, n1 = _fit_reference(X, y, w, ridge, tol)
    pert, n2 = _fit_reference(X, y, np.where(members, 1.0 + epsilon, 1.0) * w, ridge, tol)
    xq = np.append(np.asarray(x_query, dtype=float), 1.0)
    delta = expit(xq @ pert) - expit(xq @ base)
    return OracleResult(float(delta / (epsilon * size)), "refit finite difference", n1 + n2)


def pairwise_auc_oracle(scores, labels) -> OracleResult:
    """AUC as the share of positive/negative pairs ordered correctly, ties half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    pos = s[y == 1]
    neg = s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs both classes")
    wins = 0
    ties = 0
    for v in pos:
        wins += int(np.sum(v > neg))
        ties += int(np.sum(v == neg))
    value = (wins + 0.5 * ties) / (pos.size * neg.size)
    return OracleResult(float(value), "pair count", int(pos.size * neg.size))


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def inverse_normal_oracle(p: float, tol: float = 1e-13) -> float:
    """Standard normal quantile by bisection on the erfc-based CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    lo, hi = -40.0, 40.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if normal_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def agreement_bound_oracle(delta: float, sigma: float, set_size: int, confidence: float) -> float:
    alpha = (1.0 - confidence) / 2.0
    z = inverse_normal_oracle(1.0 - alpha / 2.0)
    return 1.0 - delta - z * sigma / math.sqrt(set_size)


def ci_coverage_oracle(delta: float, true_rate: float, set_size: int, confidence: float = 0.95,
                       trials: int = 500, seed: int = 0) -> OracleResult:
    """Share of simulated sets whose agreement rate is at or above the bound.

    Each trial draws ``set_size`` agreements with probability ``true_rate``;
    sigma is the sample standard deviation of those agreements.
    """
    rng = np.random.default_rng(seed)
    covered = 0
    for _ in range(trials):
        agree = (rng.random(set_size) < true_rate).astype(float)
        bound = agreement_bound_oracle(delta, float(agree.std()), set_size, confidence)
        covered += agree.mean() >= bound
    return OracleResult(covered / trials, "simulation", trials * set_size)
