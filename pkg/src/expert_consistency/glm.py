"""Weighted ridge logistic regression, Platt calibration and model serialization.

The coefficient vector stores the intercept last; the ridge penalty
``ridge/2 * ||theta[:-1]||^2`` leaves the intercept free.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import expit

RIDGE_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0)
MAX_CONDITION = 1e10
PROB_FLOOR = 1e-12
MODEL_FORMAT = "expert-consistency/logistic-model"
MODEL_VERSION = 1


class NumericalError(RuntimeError):
    """Base class for numeric failures in fitting."""


class ConvergenceError(NumericalError):
    pass


class SeparationError(ConvergenceError):
    """Coefficients diverge: the data are (quasi-)separable and unpenalized."""


class IllConditionedError(NumericalError):
    def __init__(self, message: str, condition_numbers: dict[float, float]):
        super().__init__(message)
        self.condition_numbers = condition_numbers


def add_intercept(X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _penalty_mask(p: int) -> np.ndarray:
    mask = np.ones(p)
    mask[-1] = 0.0
    return mask


def objective(theta, Xd, y, w, ridge) -> float:
    z = Xd @ theta
    loss = np.sum(w * (np.logaddexp(0.0, z) - y * z))
    return float(loss + 0.5 * ridge * np.sum(theta[:-1] ** 2))


def gradient(theta, Xd, y, w, ridge) -> np.ndarray:
    r = w * (expit(Xd @ theta) - y)
    return Xd.T @ r + ridge * _penalty_mask(Xd.shape[1]) * theta


def hessian(theta, Xd, w, ridge) -> np.ndarray:
    s = expit(Xd @ theta)
    c = w * s * (1.0 - s)
    return (Xd.T * c) @ Xd + np.diag(ridge * _penalty_mask(Xd.shape[1]))


def _solve(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    try:
        return cho_solve(cho_factor(H), g)
    except (LinAlgError, ValueError):
        return np.linalg.lstsq(H, g, rcond=None)[0]


@dataclass(frozen=True, eq=False)
class WeightedLogisticModel:
    theta: np.ndarray
    ridge: float
    grad_norm: float
    iterations: int

    @property
    def n_features(self) -> int:
        return self.theta.size - 1

    @property
    def coef(self) -> np.ndarray:
        return self.theta[:-1]

    @property
    def intercept(self) -> float:
        return float(self.theta[-1])

    def decision_function(self, X) -> np.ndarray:
        Xd = add_intercept(X)
        if Xd.shape[1] != self.theta.size:
            raise ValueError(f"expected {self.n_features} features, got {Xd.shape[1] - 1}")
        return Xd @ self.theta

    def predict_proba(self, X) -> np.ndarray:
        return np.clip(expit(self.decision_function(X)), PROB_FLOOR, 1.0 - PROB_FLOOR)


def fit(X, y, weights=None, ridge: float = 0.0, tol: float = 1e-8, max_iter: int = 100,
        coef_limit: float = 1e6) -> WeightedLogisticModel:
    """Newton's method with step halving on the weighted penalized log-loss.

    Converged when the gradient norm is below ``tol`` (and, without a penalty,
    the Newton step is negligible). Divergent coefficients (separable data without a penalty) raise
    SeparationError.
    """
    Xd = add_intercept(X)
    y = np.asarray(y, dtype=float)
    n, p = Xd.shape
    if y.shape != (n,):
        raise ValueError("label vector must have one entry per row")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0):
        raise ValueError("weights must be non-negative, one per row")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    theta = np.zeros(p)
    f = objective(theta, Xd, y, w, ridge)
    for it in range(1, max_iter + 1):
        g = gradient(theta, Xd, y, w, ridge)
        step = _solve(hessian(theta, Xd, w, ridge), g)
        gnorm = float(np.linalg.norm(g))
        # Without a penalty a vanishing gradient can also mean diverging
        # coefficients, so the Newton step must have settled as well.
        if gnorm <= tol and (ridge > 0 or np.linalg.norm(step) <= 1e-4 * (1.0 + np.linalg.norm(theta))):
            return WeightedLogisticModel(theta, float(ridge), gnorm, it - 1)
        t = 1.0
        slack = 1e-13 * max(1.0, abs(f))
        while True:
            cand = theta - t * step
            fc = objective(cand, Xd, y, w, ridge)
            if fc <= f + slack or t < 1e-10:
                break
            t *= 0.5
        if fc > f + slack:
            raise ConvergenceError(f"line search failed at iteration {it} (gradient norm {gnorm:.3g})")
        theta, f = cand, fc
        if np.max(np.abs(theta)) > coef_limit:
            raise SeparationError(
                f"coefficient norm exceeded {coef_limit:g}; the data look separable, use a ridge penalty")
    g = gradient(theta, Xd, y, w, ridge)
    gnorm = float(np.linalg.norm(g))
    if gnorm <= tol:
        step = _solve(hessian(theta, Xd, w, ridge), g)
        if np.linalg.norm(step) <= 1e-4 * (1.0 + np.linalg.norm(theta)):
            return WeightedLogisticModel(theta, float(ridge), gnorm, max_iter)
        if ridge == 0.0:
            raise SeparationError("Newton steps do not shrink; the data look separable")
    raise ConvergenceError(f"no convergence after {max_iter} iterations (gradient norm {gnorm:.3g})")


def risk_gradient(model: WeightedLogisticModel, X, y, weights=None) -> np.ndarray:
    """Gradient of the penalized weighted risk at the model's coefficients."""
    Xd = add_intercept(X)
    w = np.ones(Xd.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    return gradient(model.theta, Xd, np.asarray(y, dtype=float), w, model.ridge)


def risk_hessian(model: WeightedLogisticModel, X, weights=None) -> np.ndarray:
    """Hessian of the penalized weighted risk, penalty included."""
    Xd = add_intercept(X)
    w = np.ones(Xd.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    return hessian(model.theta, Xd, w, model.ridge)


def ensure_invertible_fit(X, y, weights=None, tol: float = 1e-8, max_iter: int = 100,
                          grid=RIDGE_GRID, max_condition: float = MAX_CONDITION
                          ) -> tuple[WeightedLogisticModel, float]:
    """Fit with the smallest ridge on ``grid`` whose Hessian is well conditioned."""
    conds: dict[float, float] = {}
    for ridge in grid:
        try:
            model = fit(X, y, weights, ridge=ridge, tol=tol, max_iter=max_iter)
        except ConvergenceError:
            conds[ridge] = float("inf")
            continue
        cond = float(np.linalg.cond(risk_hessian(model, X, weights)))
        conds[ridge] = cond
        if cond < max_condition:
            return model, float(ridge)
    raise IllConditionedError(
        f"no ridge value on the grid gives a Hessian condition number below {max_condition:g}", conds)


@dataclass(frozen=True)
class SigmoidCalibrator:
    """Maps a raw score s to sigmoid(slope * s + offset); identity is (1, 0)."""

    slope: float
    offset: float

    @property
    def anti_calibrated(self) -> bool:
        return self.slope < 0

    def apply(self, scores) -> np.ndarray:
        return expit(self.slope * np.asarray(scores, dtype=float) + self.offset)


def fit_calibrator(scores, labels, tol: float = 1e-10, max_iter: int = 100) -> SigmoidCalibrator:
    """Platt scaling with Bayesian-smoothed targets."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d arrays of equal length")
    if s.size < 10:
        raise ValueError("calibration needs at least 10 labelled points")
    n_pos = int(np.sum(y == 1))
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("calibration needs both classes")
    t = np.where(y == 1, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    if np.ptp(s) == 0.0:
        prior = float(np.mean(t))
        return SigmoidCalibrator(0.0, float(np.log(prior / (1.0 - prior))))

    A = np.column_stack([s, np.ones_like(s)])

    def loss(ab):
        z = A @ ab
        return float(np.sum(np.logaddexp(0.0, z) - t * z))

    ab = np.array([1.0, 0.0])
    f = loss(ab)
    for _ in range(max_iter):
        p = expit(A @ ab)
        g = A.T @ (p - t)
        if np.linalg.norm(g) <= tol:
            break
        H = (A.T * (p * (1 - p))) @ A + 1e-12 * np.eye(2)
        step = np.linalg.solve(H, g)
        lr = 1.0
        while lr > 1e-10:
            cand = ab - lr * step
            fc = loss(cand)
            if fc <= f:
                break
            lr *= 0.5
        else:
            break
        ab, f = cand, fc
    return SigmoidCalibrator(float(ab[0]), float(ab[1]))


@dataclass(frozen=True, eq=False)
class CalibratedModel:
    """A fitted logistic model with an optional Platt layer on its raw logit."""

    base: WeightedLogisticModel
    calibrator: SigmoidCalibrator | None = None

    def raw_score(self, X) -> np.ndarray:
        return self.base.decision_function(X)

    def predict_proba(self, X) -> np.ndarray:
        if self.calibrator is None:
            return self.base.predict_proba(X)
        p = self.calibrator.apply(self.raw_score(X))
        return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


def predict_proba(model, X) -> np.ndarray:
    return model.predict_proba(X)


def fit_model(X, y, weights=None, ridge: float | None = None, tol: float = 1e-8,
              max_iter: int = 100, calibrate: bool = True) -> CalibratedModel:
    """Fit a logistic model (ridge chosen by the invertibility grid when None)
    and, if requested and possible, a Platt layer on its in-sample logits."""
    if ridge is None:
        base, _ = ensure_invertible_fit(X, y, weights, tol=tol, max_iter=max_iter)
    else:
        base = fit(X, y, weights, ridge=ridge, tol=tol, max_iter=max_iter)
    cal = None
    y = np.asarray(y)
    if calibrate and y.size >= 10 and 0 < int(np.sum(y == 1)) < y.size:
        cal = fit_calibrator(base.decision_function(X), y)
    return CalibratedModel(base, cal)


def model_to_dict(model: CalibratedModel | WeightedLogisticModel) -> dict:
    if isinstance(model, WeightedLogisticModel):
        model = CalibratedModel(model)
    base = model.base
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "coefficients": [float(v) for v in base.theta],
        "ridge": base.ridge,
        "gradient_norm": base.grad_norm,
        "iterations": base.iterations,
        "calibrator": None if model.calibrator is None else
        {"slope": model.calibrator.slope, "offset": model.calibrator.offset},
    }


def model_from_dict(payload: dict) -> CalibratedModel:
    if payload.get("format") != MODEL_FORMAT:
        raise ValueError("not a serialized logistic model")
    if payload.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {payload.get('version')}")
    base = WeightedLogisticModel(
        theta=np.array(payload["coefficients"], dtype=float),
        ridge=float(payload["ridge"]),
        grad_norm=float(payload["gradient_norm"]),
        iterations=int(payload["iterations"]),
    )
    cal = payload.get("calibrator")
    return CalibratedModel(base, None if cal is None else SigmoidCalibrator(cal["slope"], cal["offset"]))


def save_model(model, path: str | Path, extra: dict | None = None) -> None:
    payload = model_to_dict(model)
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_model(path: str | Path) -> CalibratedModel:
    return model_from_dict(json.loads(Path(path).read_text()))
