"""Ranking and fairness metrics plus the repeated train/test evaluation harness."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .amalgamation import (GlmConfig, Kind, LeveragedPredictor, Mode, amalgamate, deferral_predictor,
                           fit_amalgam_model, fit_outside_model, hybrid_predictor, outcome_predictor)
from .consistency import ConsistencyEstimator, ConsistencyParams
from .data import DataError, DecisionDataset, monte_carlo_split
from .glm import NumericalError

MODEL_NAMES = ("f_Y", "f_h", "f_A", "f_hyb", "f_defer")
OPTIONAL_MODELS = ("f_hyb_plain",)


def auc(scores, labels) -> float:
    """Rank-statistic AUC with ties counted one half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def screen_out_order(scores) -> np.ndarray:
    """Row order from first to last screened out: ascending score, then row."""
    s = np.asarray(scores, dtype=float)
    return np.lexsort((np.arange(s.size), s))


def screen_out_mask(scores, rate: float) -> np.ndarray:
    if not 0.0 < rate < 1.0:
        raise ValueError("screen-out rate must lie in (0, 1)")
    s = np.asarray(scores, dtype=float)
    count = int(math.floor(rate * s.size + 0.5))
    mask = np.zeros(s.size, dtype=bool)
    mask[screen_out_order(s)[:count]] = True
    return mask


def screen_out_threshold(scores, rate: float) -> float:
    """Largest screened-out score (minus infinity when nothing is screened out)."""
    s = np.asarray(scores, dtype=float)
    mask = screen_out_mask(s, rate)
    return float(s[mask].max()) if mask.any() else -math.inf


def tnr_at_screenout(scores, labels, group_mask, screenout_rate: float) -> float:
    """Share of true negatives in the group that are screened out."""
    out = screen_out_mask(scores, screenout_rate)
    g = np.asarray(group_mask, dtype=bool)
    neg = g & (np.asarray(labels) == 0)
    if not neg.any():
        raise ValueError("no negatives in the group")
    return float(out[neg].mean())


def npv_at_screenout(scores, labels, group_mask, screenout_rate: float) -> float:
    """Share of screened-out group cases that are truly negative."""
    out = screen_out_mask(scores, screenout_rate) & np.asarray(group_mask, dtype=bool)
    if not out.any():
        return float("nan")
    return float(np.mean(np.asarray(labels)[out] == 0))


def precision_at_top(scores, labels, p: float, restrict_mask=None) -> float:
    """Precision among the ceil(p * n_eligible) highest-scored eligible cases."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    elig = np.ones(s.size, dtype=bool) if restrict_mask is None else np.asarray(restrict_mask, dtype=bool)
    idx = np.flatnonzero(elig)
    if idx.size == 0:
        raise ValueError("no eligible cases")
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    count = max(1, math.ceil(p * idx.size - 1e-9))
    order = np.lexsort((idx, -s[idx]))
    return float(np.mean(y[idx[order[:count]]] == 1))


def dem_parity_gap(scores, group_mask, tau: float) -> float:
    """Selection-rate difference (group minus rest) at threshold ``tau``."""
    s = np.asarray(scores, dtype=float)
    g = np.asarray(group_mask, dtype=bool)
    if not g.any() or g.all():
        raise ValueError("both the group and its complement must be non-empty")
    sel = s > tau
    return float(sel[g].mean() - sel[~g].mean())


def gap_shift(scores_a, tau_a, scores_y, tau_y, group_mask) -> float:
    return dem_parity_gap(scores_a, group_mask, tau_a) - dem_parity_gap(scores_y, group_mask, tau_y)


def half_width(values) -> float | None:
    """95% normal half-width of the mean; None for fewer than two values."""
    v = np.asarray([x for x in values if x is not None and not np.isnan(x)], dtype=float)
    if v.size < 2:
        return None
    return float(1.96 * v.std(ddof=1) / math.sqrt(v.size))


@dataclass(frozen=True)
class Protocol:
    repetitions: int = 10
    train_fraction: float = 0.75
    seed: int = 0
    screenout_rate: float = 0.3
    precision_grid: tuple[float, ...] = (0.1, 0.25, 0.5, 0.75, 1.0)
    precision_eligibility: str = "all"  # or "screened_in": decision 1 with observed outcome
    workers: int = 1

    def repetition_seeds(self) -> list[int]:
        children = np.random.SeedSequence(self.seed).spawn(self.repetitions)
        return [int(c.generate_state(1)[0]) for c in children]


@dataclass(frozen=True)
class SuiteConfig:
    params: ConsistencyParams
    models: tuple[str, ...] = MODEL_NAMES
    mode: Mode = Mode.FULL
    glm: GlmConfig = GlmConfig()
    decision_glm: GlmConfig = GlmConfig()


@dataclass(eq=False)
class FittedSuite:
    predictors: dict[str, LeveragedPredictor]
    estimator: ConsistencyEstimator
    amalgamated_fraction: float
    ridge_used: dict[str, float] = field(default_factory=dict)


def fit_suite(train: DecisionDataset, cfg: SuiteConfig) -> FittedSuite:
    """Fit the outcome, decision, amalgamated and leveraged predictors."""
    if not train.has_outcomes:
        raise DataError("training data has no outcome column")
    X = train.features
    obs = train.outcome_observed
    f_y = cfg.glm.fit(X[obs], train.outcomes[obs])
    f_h = cfg.decision_glm.fit(X, train.decisions)
    estimator = ConsistencyEstimator(f_h, X, train.decisions, train.expert_ids, cfg.params, k=train.k)
    assignment = estimator.assign(X, decisions=train.decisions)
    plan = amalgamate(train, assignment, cfg.mode)
    preds: dict[str, LeveragedPredictor] = {
        "f_Y": outcome_predictor(f_y),
        "f_h": LeveragedPredictor(Kind.DECISION, None, f_h),
    }
    ridge = {"f_Y": f_y.base.ridge, "f_h": f_h.base.ridge}
    if "f_A" in cfg.models:
        f_a = fit_amalgam_model(train, plan, cfg.glm)
        preds["f_A"] = LeveragedPredictor(Kind.AMALGAM, f_a)
        ridge["f_A"] = f_a.base.ridge
    if "f_hyb" in cfg.models or "f_defer" in cfg.models:
        f_out = fit_outside_model(train, assignment, cfg.mode, cfg.glm)
        ridge["f_outside"] = f_out.base.ridge
        if "f_hyb" in cfg.models:
            preds["f_hyb"] = hybrid_predictor(estimator, f_out, cfg.mode)
        if "f_defer" in cfg.models:
            preds["f_defer"] = deferral_predictor(estimator, f_out, cfg.mode)
    if "f_hyb_plain" in cfg.models:
        preds["f_hyb_plain"] = hybrid_predictor(estimator, f_y, cfg.mode)
    preds = {name: preds[name] for name in cfg.models if name in preds}
    return FittedSuite(preds, estimator, plan.amalgamated_fraction, ridge)


def score_model(pred: LeveragedPredictor, test: DecisionDataset, protocol: Protocol) -> dict:
    """All metrics of one fitted predictor on the test fold."""
    out = pred.predict(test.features)
    scores = np.where(out.deferred, test.decisions.astype(float), out.scores)
    if test.construct is not None:
        labels, eval_rows = test.construct, np.ones(test.n, dtype=bool)
    else:
        labels, eval_rows = test.outcomes, test.outcome_observed
    s, y = scores[eval_rows], labels[eval_rows]
    rate = protocol.screenout_rate
    res = {"auc": auc(s, y)}
    if test.group is not None:
        g = test.group[eval_rows].astype(bool)
        tnr, npv = {}, {}
        for name, mask in (("minority", g), ("majority", ~g)):
            try:
                tnr[name] = tnr_at_screenout(s, y, mask, rate)
            except ValueError:
                tnr[name] = None
            npv[name] = npv_at_screenout(s, y, mask, rate)
        res["tnr_by_group"] = tnr
        res["npv_by_group"] = npv
        if g.any() and not g.all():
            res["gap_dp"] = dem_parity_gap(s, g, screen_out_threshold(s, rate))
    if protocol.precision_eligibility == "screened_in":
        elig = (test.decisions == 1) & test.outcome_observed
        prec_labels = test.outcomes
        prec_scores = scores
    else:
        elig, prec_labels, prec_scores = None, y, s
    res["precision_curve"] = [[p, precision_at_top(prec_scores, prec_labels, p, elig)]
                              for p in protocol.precision_grid]
    if pred.kind is Kind.DEFERRAL:
        keep = ~out.deferred[eval_rows]
        res["coverage"] = float(keep.mean())
        try:
            res["auc_non_deferred"] = auc(s[keep], y[keep])
        except ValueError:
            res["auc_non_deferred"] = None
    return res


@dataclass(frozen=True)
class RepetitionResult:
    index: int
    seed: int
    metrics: dict | None
    amalgamated_fraction: float | None
    error: str | None = None


def run_repetition(ds: DecisionDataset, cfg: SuiteConfig, protocol: Protocol, index: int, seed: int
                   ) -> RepetitionResult:
    try:
        split = monte_carlo_split(ds, protocol.train_fraction, seed)
        train, test = ds.subset(split.train_indices), ds.subset(split.test_indices)
        suite = fit_suite(train, cfg)
        metrics = {name: score_model(pred, test, protocol) for name, pred in suite.predictors.items()}
    except (NumericalError, DataError, ValueError, np.linalg.LinAlgError) as exc:
        return RepetitionResult(index, seed, None, None, f"{type(exc).__name__}: {exc}")
    return RepetitionResult(index, seed, metrics, suite.amalgamated_fraction)


def _run_star(args):
    return run_repetition(*args)


def run_repetitions(ds: DecisionDataset, cfg: SuiteConfig, protocol: Protocol) -> list[RepetitionResult]:
    seeds = protocol.repetition_seeds()
    jobs = [(ds, cfg, protocol, i, s) for i, s in enumerate(seeds)]
    if protocol.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=protocol.workers) as pool:
            results = list(pool.map(_run_star, jobs))
    else:
        results = [_run_star(j) for j in jobs]
    return sorted(results, key=lambda r: r.index)


def _mean(values):
    v = [x for x in values if x is not None and not (isinstance(x, float) and np.isnan(x))]
    return float(np.mean(v)) if v else None


@dataclass(frozen=True)
class EvaluationReport:
    model: str
    auc: float | None
    tnr_by_group: dict
    npv_by_group: dict
    precision_curve: list
    gap_dp: float | None
    gap_shift: float | None
    runs: int
    dispersion: dict
    extra: dict
    per_run: list

    def to_dict(self) -> dict:
        return {
            "model": self.model, "auc": self.auc, "tnr_by_group": self.tnr_by_group,
            "npv_by_group": self.npv_by_group, "precision_curve": self.precision_curve,
            "gap_dp": self.gap_dp, "gap_shift": self.gap_shift, "runs": self.runs,
            "dispersion": self.dispersion, "extra": self.extra, "per_run": self.per_run,
        }


def aggregate(results: list[RepetitionResult], models) -> dict[str, EvaluationReport]:
    done = [r for r in results if r.metrics is not None]
    reports = {}
    base_gaps = [r.metrics["f_Y"].get("gap_dp") for r in done if "f_Y" in r.metrics]
    for name in models:
        runs = [r.metrics[name] for r in done if name in r.metrics]
        aucs = [m["auc"] for m in runs]
        groups = sorted({g for m in runs for g in m.get("tnr_by_group", {})})
        tnr = {g: _mean([m["tnr_by_group"][g] for m in runs]) for g in groups}
        npv = {g: _mean([m["npv_by_group"][g] for m in runs]) for g in groups}
        gaps = [m.get("gap_dp") for m in runs]
        shifts = [None if a is None or b is None else a - b for a, b in zip(gaps, base_gaps)]
        grid = [p for p, _ in runs[0]["precision_curve"]] if runs else []
        curve = [[p, _mean([m["precision_curve"][j][1] for m in runs])] for j, p in enumerate(grid)]
        disp = {"auc": half_width(aucs), "gap_dp": half_width(gaps), "gap_shift": half_width(shifts)}
        for g in groups:
            disp[f"tnr_{g}"] = half_width([m["tnr_by_group"][g] for m in runs])
        extra = {}
        if name == "f_A":
            extra["amalgamated_fraction"] = _mean([r.amalgamated_fraction for r in done])
        if runs and "coverage" in runs[0]:
            extra["coverage"] = _mean([m["coverage"] for m in runs])
            extra["auc_non_deferred"] = _mean([m["auc_non_deferred"] for m in runs])
        per_run = [{"repetition": r.index, "seed": r.seed, **r.metrics[name]} for r in done if name in r.metrics]
        reports[name] = EvaluationReport(
            model=name, auc=_mean(aucs), tnr_by_group=tnr, npv_by_group=npv, precision_curve=curve,
            gap_dp=_mean(gaps), gap_shift=_mean(shifts), runs=len(runs), dispersion=disp,
            extra=extra, per_run=per_run,
        )
    return reports


def run_evaluation(ds: DecisionDataset, cfg: SuiteConfig, protocol: Protocol
                   ) -> tuple[dict[str, EvaluationReport], list[RepetitionResult]]:
    """Repeat split / fit / score and aggregate per model.

    Failed repetitions are kept in the returned list with their error and left
    out of the aggregates.
    """
    results = run_repetitions(ds, cfg, protocol)
    return aggregate(results, cfg.models), results
