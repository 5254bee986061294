"""Consistency-set membership and its agreement-rate bound."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from scipy.stats import norm

from .glm import CalibratedModel
from .influence import InfluenceEngine, InfluenceTable


class Membership(IntEnum):
    OUTSIDE = 0
    NEGATIVE = 1  # consistent on decision 0 (A0)
    POSITIVE = 2  # consistent on decision 1 (A1)


@dataclass(frozen=True)
class ConsistencyParams:
    """Thresholds (delta, gamma1, gamma2, gamma3); gamma3 None turns the
    negligible-influence branch off."""

    delta: float = 0.05
    gamma1: float = 10.0
    gamma2: float = 1.0
    gamma3: float | None = None

    def __post_init__(self):
        if not 0.0 < self.delta < 0.5:
            raise ValueError(f"delta must lie in (0, 0.5), got {self.delta}")
        if self.gamma1 < 0:
            raise ValueError(f"gamma1 must be non-negative, got {self.gamma1}")
        if not 0.0 <= self.gamma2 <= 1.0:
            raise ValueError(f"gamma2 must lie in [0, 1], got {self.gamma2}")
        if self.gamma3 is not None and not self.gamma3 > 0:
            raise ValueError(f"gamma3 must be positive or off, got {self.gamma3}")

    @classmethod
    def conservative(cls, k: int, gamma3: float | None = None) -> "ConsistencyParams":
        """Defaults that demand many experts behind a consensus."""
        return cls(0.05, float(k // 2), 1.0, gamma3)

    @classmethod
    def parse(cls, text: str) -> "ConsistencyParams":
        """Parse ``"delta,gamma1,gamma2,gamma3"``; gamma3 may be ``off``."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 4:
            raise ValueError("expected four comma-separated values delta,gamma1,gamma2,gamma3")
        g3 = None if parts[3].lower() in ("off", "none", "") else float(parts[3])
        return cls(float(parts[0]), float(parts[1]), float(parts[2]), g3)

    def format(self) -> str:
        g3 = "off" if self.gamma3 is None else repr(self.gamma3)
        return f"{self.delta!r},{self.gamma1!r},{self.gamma2!r},{g3}"


@dataclass(frozen=True, eq=False)
class ConsistencyAssignment:
    membership: np.ndarray
    params: ConsistencyParams
    table: InfluenceTable

    @property
    def in_set(self) -> np.ndarray:
        return self.membership != Membership.OUTSIDE

    @property
    def positive(self) -> np.ndarray:
        return self.membership == Membership.POSITIVE

    @property
    def negative(self) -> np.ndarray:
        return self.membership == Membership.NEGATIVE

    @property
    def fraction(self) -> float:
        return float(np.mean(self.in_set)) if self.membership.size else 0.0


def robust_mask(table: InfluenceTable, params: ConsistencyParams) -> np.ndarray:
    """Influence condition: broad and aligned support, or no material influence."""
    with np.errstate(invalid="ignore"):
        broad = (table.center_of_mass > params.gamma1) & (table.aligned_share > params.gamma2)
    if params.gamma3 is not None:
        broad |= table.max_abs < params.gamma3
    return broad


def build_consistency_set(table: InfluenceTable, params: ConsistencyParams,
                          decisions: np.ndarray | None = None) -> ConsistencyAssignment:
    """Assign each query to A1, A0 or outside.

    With ``decisions`` the gate requires the probability to lie within delta of
    the recorded decision; without them (prediction time) it requires the
    probability to lie within delta of 0 or 1.
    """
    p = table.query_prob
    robust = robust_mask(table, params)
    hi = p > 1.0 - params.delta
    lo = p < params.delta
    if decisions is not None:
        d = np.asarray(decisions)
        if d.shape != p.shape:
            raise ValueError("one decision per query is required")
        gate = np.abs(p - d) < params.delta
        hi &= gate & (d == 1)
        lo &= gate & (d == 0)
    member = np.full(p.shape, Membership.OUTSIDE, dtype=np.int8)
    member[hi & robust] = Membership.POSITIVE
    member[lo & robust] = Membership.NEGATIVE
    return ConsistencyAssignment(member, params, table)


class ConsistencyEstimator:
    """A fitted decision model together with its influence engine.

    ``model`` supplies the probabilities used by the gates (calibrated when a
    Platt layer is present); influences come from its base logistic model.
    """

    def __init__(self, model: CalibratedModel, X_train, decisions, expert_ids,
                 params: ConsistencyParams, k: int | None = None):
        self.model = model
        self.params = params
        self.engine = InfluenceEngine(model.base, X_train, decisions, expert_ids, k=k)

    def table(self, X) -> InfluenceTable:
        return self.engine.table(X, self.model.predict_proba(X))

    def assign(self, X, decisions=None, table: InfluenceTable | None = None,
               params: ConsistencyParams | None = None) -> ConsistencyAssignment:
        table = self.table(X) if table is None else table
        return build_consistency_set(table, params or self.params, decisions)


def agreement_lower_bound(delta: float, sigma: float, set_size: int, confidence: float = 0.95) -> float:
    """Lower confidence limit for the decision agreement rate inside a
    consistency set of ``set_size`` cases with agreement spread ``sigma``."""
    if set_size < 1:
        raise ValueError("set_size must be positive")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    alpha = (1.0 - confidence) / 2.0
    z = float(norm.ppf(1.0 - alpha / 2.0))
    return 1.0 - delta - z * sigma / math.sqrt(set_size)


@dataclass(frozen=True)
class AgreementCheck:
    side: str
    set_size: int
    agreement_rate: float
    sigma: float
    lower_bound: float
    passed: bool

    @property
    def status(self) -> str:
        """``unvalidatable`` when the direction has no hold-out members."""
        if self.set_size == 0:
            return "unvalidatable"
        return "passed" if self.passed else "failed"


def agreement_check(decisions: np.ndarray, side: int, delta: float, confidence: float) -> AgreementCheck:
    """Compare the share of ``decisions`` equal to ``side`` with the bound."""
    agree = (np.asarray(decisions) == side).astype(float)
    n = agree.size
    name = "positive" if side == 1 else "negative"
    if n == 0:
        return AgreementCheck(name, 0, float("nan"), float("nan"), float("nan"), True)
    rate = float(agree.mean())
    sigma = float(agree.std())
    bound = agreement_lower_bound(delta, sigma, n, confidence)
    return AgreementCheck(name, n, rate, sigma, bound, rate >= bound)


def validate_consistency(estimator: ConsistencyEstimator, X_holdout, decisions_holdout,
                         confidence: float = 0.95) -> list[AgreementCheck]:
    """Recompute membership on held-out cases (prediction-time gates) and test
    whether the recorded decisions agree at the bounded rate."""
    assignment = estimator.assign(X_holdout)
    d = np.asarray(decisions_holdout)
    delta = estimator.params.delta
    return [
        agreement_check(d[assignment.positive], 1, delta, confidence),
        agreement_check(d[assignment.negative], 0, delta, confidence),
    ]
