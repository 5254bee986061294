"""Per-expert influence on a decision model's predicted probability.

For expert h with training cases E_h, the influence on query x is the
first-order change of P(D=1 | x) when every case of E_h is up-weighted by a
small epsilon, divided by epsilon * |E_h|:

    I_h(x) = -(1/|E_h|) * grad_theta P(x)^T  H^{-1}  sum_{i in E_h} grad_theta L_i

with H the Hessian of the full penalized training risk (sum of losses plus
penalty) and L_i the unpenalized log-loss of case i.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit

from .glm import WeightedLogisticModel, add_intercept, risk_hessian


@dataclass(frozen=True, eq=False)
class InfluenceTable:
    """Influence of every expert on a batch of query points.

    ``influence`` has shape (q, k); column h-1 belongs to expert h. ``query_prob``
    is the probability used to orient the aligned-influence metric. Metric
    arrays hold NaN for the centre of mass and aligned share when every
    influence is zero.
    """

    influence: np.ndarray
    query_prob: np.ndarray
    center_of_mass: np.ndarray
    aligned_share: np.ndarray
    max_abs: np.ndarray

    @property
    def k(self) -> int:
        return self.influence.shape[1]

    def __len__(self) -> int:
        return self.influence.shape[0]

    def profile(self, i: int) -> "InfluenceProfile":
        return InfluenceProfile(self.influence[i].copy(), float(self.query_prob[i]))

    def take(self, idx) -> "InfluenceTable":
        return InfluenceTable(self.influence[idx], self.query_prob[idx], self.center_of_mass[idx],
                              self.aligned_share[idx], self.max_abs[idx])


@dataclass(frozen=True, eq=False)
class InfluenceProfile:
    """Influence vector of all k experts on a single query."""

    per_expert: np.ndarray
    query_prob: float

    @property
    def sorted_abs(self) -> np.ndarray:
        return sort_abs(self.per_expert[None, :])[0]

    @property
    def negligible(self) -> bool:
        return not np.any(self.per_expert != 0.0)


def sort_abs(influence: np.ndarray) -> np.ndarray:
    """Absolute influences sorted descending; ties keep ascending expert id."""
    a = np.abs(np.atleast_2d(influence))
    order = np.argsort(-a, axis=1, kind="stable")
    return np.take_along_axis(a, order, axis=1)


def center_of_mass_values(influence: np.ndarray) -> np.ndarray:
    s = sort_abs(influence)
    total = s.sum(axis=1)
    ranks = np.arange(1, s.shape[1] + 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, (s @ ranks) / np.where(total > 0, total, 1.0), np.nan)


def aligned_share_values(influence: np.ndarray, query_prob: np.ndarray) -> np.ndarray:
    I = np.atleast_2d(influence)
    direction = np.asarray(query_prob, dtype=float).reshape(-1, 1) - 0.5
    a = np.abs(I)
    total = a.sum(axis=1)
    aligned = np.where(I * direction > 0, a, 0.0).sum(axis=1)
    return np.where(total > 0, aligned / np.where(total > 0, total, 1.0), np.nan)


def center_of_mass(profile: InfluenceProfile) -> float | None:
    """Influence-weighted mean rank of the sorted absolute influences.

    Returns None (negligible influence) when every influence is zero.
    """
    v = float(center_of_mass_values(profile.per_expert[None, :])[0])
    return None if np.isnan(v) else v


def aligned_influence(profile: InfluenceProfile) -> float | None:
    """Share of absolute influence pushing the prediction further from 0.5."""
    v = float(aligned_share_values(profile.per_expert[None, :], np.array([profile.query_prob]))[0])
    return None if np.isnan(v) else v


def negligible_influence(profile: InfluenceProfile) -> float:
    """Largest absolute influence."""
    return float(np.max(np.abs(profile.per_expert)))


def build_table(influence: np.ndarray, query_prob: np.ndarray) -> InfluenceTable:
    influence = np.atleast_2d(np.asarray(influence, dtype=float))
    query_prob = np.asarray(query_prob, dtype=float).reshape(-1)
    return InfluenceTable(
        influence=influence,
        query_prob=query_prob,
        center_of_mass=center_of_mass_values(influence),
        aligned_share=aligned_share_values(influence, query_prob),
        max_abs=np.abs(influence).max(axis=1),
    )


class InfluenceEngine:
    """Caches the factorized training Hessian and per-expert gradient sums.

    ``directions[:, h-1]`` is the normalized parameter response to up-weighting
    expert h; influences on any query are then one matrix product away.
    """

    def __init__(self, model: WeightedLogisticModel, X, decisions, expert_ids, k: int | None = None,
                 weights=None):
        X = np.asarray(X, dtype=float)
        d = np.asarray(decisions, dtype=float)
        a = np.asarray(expert_ids, dtype=np.int64)
        w = np.ones(len(d)) if weights is None else np.asarray(weights, dtype=float)
        self.model = model
        self.k = int(a.max()) if k is None else int(k)
        H = risk_hessian(model, X, w)
        self._factor = cho_factor(H)
        Xd = add_intercept(X)
        resid = w * (expit(Xd @ model.theta) - d)
        G = np.zeros((self.k, Xd.shape[1]))
        np.add.at(G, a - 1, resid[:, None] * Xd)
        # |E_h| is the weight mass of expert h (the case count when unweighted)
        sizes = np.bincount(a, weights=w, minlength=self.k + 1)[1:]
        if np.any(sizes == 0):
            raise ValueError(f"expert {int(np.flatnonzero(sizes == 0)[0]) + 1} has no training cases")
        self.expert_sizes = sizes
        self.directions = -cho_solve(self._factor, G.T) / sizes

    def hessian_solve(self, v: np.ndarray) -> np.ndarray:
        return cho_solve(self._factor, v)

    def influence(self, X_query) -> np.ndarray:
        Xq = add_intercept(X_query)
        p = expit(Xq @ self.model.theta)
        J = (p * (1.0 - p))[:, None] * Xq
        return J @ self.directions

    def table(self, X_query, query_prob=None, chunk: int = 50000) -> InfluenceTable:
        """Influences and consistency metrics for every row of ``X_query``.

        ``query_prob`` defaults to the base model's probability; pass the
        calibrated probability when the gates use it.
        """
        Xq = np.atleast_2d(np.asarray(X_query, dtype=float))
        parts = [self.influence(Xq[s:s + chunk]) for s in range(0, Xq.shape[0], chunk)]
        infl = np.vstack(parts) if parts else np.zeros((0, self.k))
        if query_prob is None:
            query_prob = self.model.predict_proba(Xq)
        return build_table(infl, query_prob)


def expert_influence(model: WeightedLogisticModel, X_train, decisions, expert_ids, x_query,
                     engine: InfluenceEngine | None = None, query_prob: float | None = None
                     ) -> InfluenceProfile:
    """Influence profile of one query point."""
    engine = engine or InfluenceEngine(model, X_train, decisions, expert_ids)
    x = np.atleast_2d(np.asarray(x_query, dtype=float))
    infl = engine.influence(x)[0]
    prob = float(model.predict_proba(x)[0]) if query_prob is None else float(query_prob)
    return InfluenceProfile(infl, prob)


def table_to_json(table: InfluenceTable, case_ids, provenance: dict) -> dict:
    def num(v):
        return None if np.isnan(v) else float(v)

    rows = []
    for i, cid in enumerate(case_ids):
        rows.append({
            "case_id": str(cid),
            "query_prob": float(table.query_prob[i]),
            "influence": [float(v) for v in table.influence[i]],
            "center_of_mass": num(table.center_of_mass[i]),
            "aligned_share": num(table.aligned_share[i]),
            "max_abs": float(table.max_abs[i]),
        })
    return {"provenance": provenance, "k": table.k, "cases": rows}


def write_table(table: InfluenceTable, case_ids, path: str | Path, provenance: dict) -> None:
    Path(path).write_text(json.dumps(table_to_json(table, case_ids, provenance), sort_keys=True) + "\n")


def read_table(path: str | Path) -> tuple[InfluenceTable, list[str], dict]:
    payload = json.loads(Path(path).read_text())
    cases = payload["cases"]
    infl = np.array([c["influence"] for c in cases], dtype=float).reshape(len(cases), payload["k"])
    prob = np.array([c["query_prob"] for c in cases], dtype=float)
    return build_table(infl, prob), [c["case_id"] for c in cases], payload["provenance"]
