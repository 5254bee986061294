"""Synthetic decision scenarios with known ground truth.

Two threshold rules on disjoint covariates define the observed-proxy outcome
Y1 (rule 1) and an unproxied need Y2 (rule 2); the construct is Y1 or Y2.
Experts start from an accurate rule for the construct and are then corrupted
according to the chosen scenario.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .data import DataError, DecisionDataset, write_dataset


class Scenario(str, Enum):
    CHO = "CHo"     # random decisions on the hard subgroup
    CIHO = "CIHo"   # shared wrong decisions on most of the hard subgroup
    CIHE = "CIHe"   # per-expert error rates on the hard subgroup
    DEP = "DeP"     # half the experts screen out every minority case
    HOF = "HoF"     # all experts screen out most minority cases
    NRND = "nRnD"   # one expert sees nearly all minority cases, screens them out
    DES = "DeS"     # every expert screens out every minority case

    @property
    def biased(self) -> bool:
        return self in (Scenario.DEP, Scenario.HOF, Scenario.NRND, Scenario.DES)


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: Scenario | str = Scenario.CHO
    n: int = 5000
    m: int = 6
    k: int = 20
    seed: int = 0
    selective: bool = False
    error_range: tuple[float, float] = (0.3, 0.6)
    minority_fraction: float = 0.5
    base_accuracy: float = 0.95
    label_noise: float = 0.02
    rule1_rate: float = 0.75
    rule2_rate: float = 0.3
    need_spread: float = 0.8
    boundary_width: float = 0.3
    cho_rate: float = 0.5
    ciho_rate: float = 0.75
    hof_rate: float = 0.8
    nrnd_rate: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        object.__setattr__(self, "error_range", tuple(float(v) for v in self.error_range))
        a, b = self.error_range
        if not 0.0 <= a <= b <= 1.0:
            raise ValueError("error_range must satisfy 0 <= a <= b <= 1")
        if self.m < 3:
            raise ValueError("at least three covariates are needed for the two rules")
        if not (0.0 < self.rule1_rate < 1.0 and 0.0 < self.rule2_rate < 1.0):
            raise ValueError("rule rates must lie in (0, 1)")
        if self.need_spread <= 0:
            raise ValueError("need_spread must be positive")
        if self.k < 1 or (self.scenario.biased and self.k < 2):
            raise ValueError("biased scenarios need k >= 2")
        if self.n < 2 * self.k:
            raise ValueError("need at least two cases per expert")
        if not 0.0 < self.minority_fraction < 1.0:
            raise ValueError("minority_fraction must lie in (0, 1)")
        if not 0.5 < self.base_accuracy <= 1.0:
            raise ValueError("base_accuracy must lie in (0.5, 1]")
        if not 0.0 <= self.label_noise <= 0.05:
            raise ValueError("label_noise must lie in [0, 0.05]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenario"] = self.scenario.value
        d["error_range"] = list(self.error_range)
        return d


@dataclass(frozen=True, eq=False)
class GroundTruthBundle:
    dataset: DecisionDataset
    y1: np.ndarray
    y2: np.ndarray
    hard: np.ndarray
    minority: np.ndarray
    corrupted: np.ndarray
    spec: ScenarioSpec = field(repr=False)

    @property
    def construct(self) -> np.ndarray:
        return self.dataset.construct


def _agreement_scale(agree: np.ndarray, weight: np.ndarray, target: float) -> float:
    """Scale c so that flipping with probability min(c*w, 1/2) leaves the
    expected agreement at ``target``."""
    base = float(agree.mean())
    if base <= target:
        return 0.0
    sign = 2.0 * agree - 1.0

    def gap(c):
        return base - float(np.mean(np.minimum(c * weight, 0.5) * sign)) - target

    hi = 1.0
    while gap(hi) > 0 and hi < 1e8:
        hi *= 2.0
    if gap(hi) > 0:
        return hi
    return brentq(gap, 0.0, hi, xtol=1e-12)


def generate(spec: ScenarioSpec) -> GroundTruthBundle:
    """Draw one scenario dataset; identical specs give identical bundles."""
    rng = np.random.default_rng(spec.seed)
    n, k = spec.n, spec.k
    # Rule 1 thresholds z1 = x0 + x2/2 ~ N(0, 1.25); rule 2 thresholds the
    # log-normal covariate x1 = exp(need_spread * N(0, 1)).
    t1 = np.sqrt(1.25) * norm.ppf(1.0 - spec.rule1_rate)
    t2 = np.exp(spec.need_spread * norm.ppf(1.0 - spec.rule2_rate))
    for _ in range(10):
        X = rng.standard_normal((n, spec.m))
        X[:, 1] = np.exp(spec.need_spread * X[:, 1])
        z1 = X[:, 0] + 0.5 * X[:, 2] - t1
        z2 = X[:, 1] - t2
        rule1 = z1 > 0
        rule2 = z2 > 0
        y1 = (rule1 ^ (rng.random(n) < spec.label_noise)).astype(np.int8)
        y2 = (rule2 ^ (rng.random(n) < spec.label_noise)).astype(np.int8)
        if 0 < y1.sum() < n:
            break
    else:
        raise DataError("outcome rule stayed single-class after 10 draws")
    construct = (y1 | y2).astype(np.int8)
    hard = rule1 & ~rule2
    minority = rng.random(n) < spec.minority_fraction
    experts = 1 + rng.permutation(n) % k

    margin = np.maximum(z1, z2)
    decisions = (margin > 0).astype(np.int8)
    weight = np.exp(-np.abs(margin) / spec.boundary_width)
    calib = ~hard & ~minority
    c = _agreement_scale((decisions == construct)[calib].astype(float), weight[calib], spec.base_accuracy)
    flip = rng.random(n) < np.minimum(c * weight, 0.5)
    decisions = np.where(flip, 1 - decisions, decisions).astype(np.int8)

    corrupted = np.zeros(n, dtype=bool)
    sc = spec.scenario
    hard_idx = np.flatnonzero(hard)
    if sc is Scenario.CHO:
        decisions[hard_idx] = (rng.random(hard_idx.size) < spec.cho_rate).astype(np.int8)
        corrupted[hard_idx] = True
    elif sc is Scenario.CIHO:
        chosen = rng.choice(hard_idx, size=int(round(spec.ciho_rate * hard_idx.size)), replace=False)
        decisions[chosen] = 1 - y1[chosen]
        corrupted[chosen] = True
    elif sc is Scenario.CIHE:
        a, b = spec.error_range
        rates = rng.uniform(a, b, size=k)
        for h in range(1, k + 1):
            own = hard_idx[experts[hard_idx] == h]
            chosen = rng.choice(own, size=int(round(rates[h - 1] * own.size)), replace=False)
            decisions[chosen] = 1 - y1[chosen]
            corrupted[chosen] = True
    elif sc is Scenario.DEP:
        chosen = minority & (experts <= k // 2)
        decisions[chosen] = 0
        corrupted |= chosen
    elif sc is Scenario.HOF:
        idx = np.flatnonzero(minority)
        chosen = rng.choice(idx, size=int(round(spec.hof_rate * idx.size)), replace=False)
        decisions[chosen] = 0
        corrupted[chosen] = True
    elif sc is Scenario.NRND:
        idx = np.flatnonzero(minority)
        chosen = rng.choice(idx, size=int(round(spec.nrnd_rate * idx.size)), replace=False)
        experts[chosen] = 1
        decisions[chosen] = 0
        corrupted[chosen] = True
    elif sc is Scenario.DES:
        decisions[minority] = 0
        corrupted |= minority

    features = X
    names = tuple(f"x{j}" for j in range(spec.m))
    if sc.biased:
        features = np.hstack([X, minority[:, None].astype(float)])
        names = names + ("minority",)
    observed = decisions == 1 if spec.selective else np.ones(n, dtype=bool)
    width = len(str(n - 1))
    ds = DecisionDataset(
        features=features,
        decisions=decisions,
        expert_ids=experts,
        outcomes=y1,
        outcome_observed=observed,
        group=minority.astype(np.int8),
        construct=construct,
        case_ids=np.array([f"case{i:0{width}d}" for i in range(n)]),
        feature_names=names,
        extras={"need": y2, "hard": hard.astype(np.int8)},
    )
    return GroundTruthBundle(ds, y1, y2, hard, minority, corrupted, spec)


def toy_clusters(n: int = 1500, k: int = 10, seed: int = 0, spread: float = 0.2) -> DecisionDataset:
    """Three Gaussian clusters in two covariates with censored outcomes.

    The construct is 1 exactly when x1 > 0. Experts decide 1 on the cluster
    at (1.5, 1.5), 0 on the cluster at (1.5, -1.5), and flip a coin on the
    cluster at (-1.5, 1.5). The outcome is seen only after a decision of 1,
    and it misses the construct on the first cluster (recorded as 0), so the
    observed outcome trends with x0 alone.
    """
    rng = np.random.default_rng(seed)
    centers = np.array([[1.5, 1.5], [1.5, -1.5], [-1.5, 1.5]])
    cluster = rng.integers(0, 3, size=n)
    X = centers[cluster] + spread * rng.standard_normal((n, 2))
    construct = (X[:, 1] > 0).astype(np.int8)
    decisions = np.select([cluster == 0, cluster == 1], [1, 0], rng.integers(0, 2, size=n)).astype(np.int8)
    outcomes = np.where(cluster == 0, 0, construct).astype(np.int8)
    return DecisionDataset(
        features=X,
        decisions=decisions,
        expert_ids=1 + rng.permutation(n) % k,
        outcomes=outcomes,
        outcome_observed=decisions == 1,
        construct=construct,
        case_ids=np.array([f"toy{i:0{len(str(n - 1))}d}" for i in range(n)]),
        feature_names=("x0", "x1"),
        extras={"cluster": cluster.astype(np.int8)},
    )


def scenario_suite(base: ScenarioSpec, seeds) -> list[GroundTruthBundle]:
    from dataclasses import replace

    return [generate(replace(base, seed=int(s))) for s in seeds]


def write_bundle(bundle: GroundTruthBundle, directory: str | Path, provenance: dict | None = None
                 ) -> tuple[Path, Path]:
    """Write the bundle CSV and a manifest (INI) holding the column roles,
    the scenario spec and the seed. ``provenance`` entries go into both the
    manifest and the CSV preamble."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data_path = directory / "bundle.csv"
    schema = write_dataset(bundle.dataset, data_path, preamble=provenance)
    cfg = schema.to_config()
    spec = bundle.spec.to_dict()
    cfg["scenario"] = {key: json.dumps(v) for key, v in spec.items()}
    if provenance:
        cfg["provenance"] = {key: str(v) for key, v in provenance.items()}
    manifest = directory / "manifest.ini"
    with open(manifest, "w") as fh:
        cfg.write(fh)
    return data_path, manifest
