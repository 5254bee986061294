"""Amalgamated labels and the predictors built on top of them."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum

import numpy as np

from .consistency import ConsistencyAssignment, ConsistencyEstimator
from .data import DecisionDataset
from .glm import CalibratedModel, fit_model


class Mode(str, Enum):
    FULL = "full"
    POSITIVE_ONLY = "positive"
    NEGATIVE_ONLY = "negative"


class Provenance(IntEnum):
    NONE = 0
    FROM_DECISION = 1
    FROM_OUTCOME = 2


@dataclass(frozen=True)
class GlmConfig:
    ridge: float | None = None  # None: smallest well-conditioned value on the grid
    tol: float = 1e-8
    max_iter: int = 100
    calibrate: bool = True

    def fit(self, X, y) -> CalibratedModel:
        return fit_model(X, y, ridge=self.ridge, tol=self.tol, max_iter=self.max_iter,
                         calibrate=self.calibrate)


@dataclass(frozen=True, eq=False)
class AmalgamationPlan:
    """One label per case; ``usable`` is False where the label is undefined
    (outcome censored outside the consistency set)."""

    labels: np.ndarray
    provenance: np.ndarray
    mode: Mode

    @property
    def usable(self) -> np.ndarray:
        return self.provenance != Provenance.NONE

    @property
    def from_decision(self) -> np.ndarray:
        return self.provenance == Provenance.FROM_DECISION

    @property
    def amalgamated_fraction(self) -> float:
        return float(np.mean(self.from_decision))


def selected_region(assignment: ConsistencyAssignment, mode: Mode | str) -> np.ndarray:
    mode = Mode(mode)
    if mode is Mode.FULL:
        return assignment.in_set
    if mode is Mode.POSITIVE_ONLY:
        return assignment.positive
    return assignment.negative


def amalgamate(ds: DecisionDataset, assignment: ConsistencyAssignment, mode: Mode | str = Mode.FULL
               ) -> AmalgamationPlan:
    """Take the decision inside the selected consistency region, the observed
    outcome elsewhere."""
    if not ds.has_outcomes:
        raise ValueError("amalgamation needs an outcome column")
    if assignment.membership.shape != (ds.n,):
        raise ValueError("assignment does not cover the dataset")
    mode = Mode(mode)
    region = selected_region(assignment, mode)
    labels = np.where(region, ds.decisions, ds.outcomes).astype(np.int8)
    prov = np.where(region, Provenance.FROM_DECISION,
                    np.where(ds.outcome_observed, Provenance.FROM_OUTCOME, Provenance.NONE)).astype(np.int8)
    labels[prov == Provenance.NONE] = 0
    return AmalgamationPlan(labels, prov, mode)


def fit_amalgam_model(ds: DecisionDataset, plan: AmalgamationPlan, config: GlmConfig = GlmConfig()
                      ) -> CalibratedModel:
    use = plan.usable
    _require_two_classes(plan.labels[use], "amalgamated labels")
    return config.fit(ds.features[use], plan.labels[use])


def _require_two_classes(labels: np.ndarray, what: str) -> None:
    if labels.size == 0 or labels.min() == labels.max():
        raise ValueError(f"{what} contain a single class; nothing to fit")


class Kind(str, Enum):
    OUTCOME = "outcome"
    DECISION = "decision"
    AMALGAM = "amalgam"
    HYBRID = "hybrid"
    DEFERRAL = "deferral"


DEFER = None  # marker carried by Prediction.value for deferred cases


@dataclass(frozen=True)
class Prediction:
    value: float | None

    @property
    def deferred(self) -> bool:
        return self.value is None


@dataclass(frozen=True, eq=False)
class PredictorOutput:
    """Scores for a batch; ``deferred`` marks rows handed back to the expert,
    whose score entries are NaN and must not be read as numbers."""

    scores: np.ndarray
    deferred: np.ndarray

    def predictions(self) -> list[Prediction]:
        return [Prediction(None if dfr else float(s)) for s, dfr in zip(self.scores, self.deferred)]


@dataclass(frozen=True, eq=False)
class LeveragedPredictor:
    """Single model, hybrid (expert model inside the consistency region) or
    deferral (abstain inside it)."""

    kind: Kind
    model: CalibratedModel | None
    decision_model: CalibratedModel | None = None
    rule: ConsistencyEstimator | None = None
    mode: Mode = Mode.FULL

    def region(self, X) -> np.ndarray:
        return selected_region(self.rule.assign(X), self.mode)

    def predict(self, X) -> PredictorOutput:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = X.shape[0]
        if self.kind in (Kind.OUTCOME, Kind.AMALGAM):
            return PredictorOutput(self.model.predict_proba(X), np.zeros(n, dtype=bool))
        if self.kind is Kind.DECISION:
            return PredictorOutput(self.decision_model.predict_proba(X), np.zeros(n, dtype=bool))
        inside = self.region(X)
        if self.kind is Kind.HYBRID:
            scores = np.where(inside, self.decision_model.predict_proba(X), self.model.predict_proba(X))
            return PredictorOutput(scores, np.zeros(n, dtype=bool))
        scores = np.where(inside, np.nan, self.model.predict_proba(X))
        return PredictorOutput(scores, inside)

    def predict_one(self, x) -> Prediction:
        return self.predict(np.atleast_2d(x)).predictions()[0]


def outcome_predictor(model: CalibratedModel) -> LeveragedPredictor:
    return LeveragedPredictor(Kind.OUTCOME, model)


def hybrid_predictor(rule: ConsistencyEstimator, outcome_model: CalibratedModel,
                     mode: Mode = Mode.FULL) -> LeveragedPredictor:
    """Expert-decision model inside the region, ``outcome_model`` outside.

    Pass a model trained only outside the region for the retrained variant.
    """
    return LeveragedPredictor(Kind.HYBRID, outcome_model, rule.model, rule, mode)


def deferral_predictor(rule: ConsistencyEstimator, outside_model: CalibratedModel,
                       mode: Mode = Mode.FULL) -> LeveragedPredictor:
    return LeveragedPredictor(Kind.DEFERRAL, outside_model, rule.model, rule, mode)


def fit_outside_model(ds: DecisionDataset, assignment: ConsistencyAssignment, mode: Mode = Mode.FULL,
                      config: GlmConfig = GlmConfig()) -> CalibratedModel:
    """Outcome model trained on observed cases outside the consistency region."""
    use = ~selected_region(assignment, mode) & ds.outcome_observed
    _require_two_classes(ds.outcomes[use], "outcomes outside the consistency region")
    return config.fit(ds.features[use], ds.outcomes[use])


@dataclass(frozen=True)
class DominanceReport:
    """Error of amalgamated and observed labels against a reference label."""

    n: int
    n_region: int
    region_agree_amalgam: int
    region_agree_observed: int
    error_amalgam: float
    error_observed: float

    @property
    def premise(self) -> bool:
        return self.region_agree_amalgam >= self.region_agree_observed

    @property
    def conclusion(self) -> bool:
        return self.error_amalgam <= self.error_observed


def dominance_check(reference: np.ndarray, observed: np.ndarray, plan: AmalgamationPlan,
                    observed_mask: np.ndarray | None = None) -> DominanceReport:
    """If amalgamated labels match ``reference`` at least as often as the
    observed outcome inside the region, their mean absolute error over all
    evaluable cases is no larger. Raises if the premise holds and the
    conclusion fails."""
    ref = np.asarray(reference)
    obs_y = np.asarray(observed)
    keep = plan.usable if observed_mask is None else plan.usable & np.asarray(observed_mask, dtype=bool)
    region = plan.from_decision & keep
    err_a = int(np.sum((ref != plan.labels) & keep))
    err_o = int(np.sum((ref != obs_y) & keep))
    n = int(keep.sum())
    report = DominanceReport(
        n=n,
        n_region=int(region.sum()),
        region_agree_amalgam=int(np.sum((ref == plan.labels) & region)),
        region_agree_observed=int(np.sum((ref == obs_y) & region)),
        error_amalgam=err_a / n if n else 0.0,
        error_observed=err_o / n if n else 0.0,
    )
    if report.premise and not report.conclusion:
        raise AssertionError("amalgamated labels agree more often inside the region but err more overall")
    return report
