"""Tabular decision datasets: ingestion, validation, writing and CV splits."""

from __future__ import annotations

import configparser
import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd


class DataError(ValueError):
    """Raised when input data violates the dataset contract."""


@dataclass(frozen=True)
class DatasetSchema:
    """Maps column roles to column names in a CSV file."""

    features: tuple[str, ...]
    decision: str
    expert: str
    outcome: str | None = None
    group: str | None = None
    construct: str | None = None
    case_id: str | None = None
    extras: tuple[str, ...] = ()

    def to_config(self) -> configparser.ConfigParser:
        cfg = configparser.ConfigParser()
        cols = {"features": ", ".join(self.features), "decision": self.decision, "expert": self.expert}
        for role in ("outcome", "group", "construct", "case_id"):
            value = getattr(self, role)
            if value is not None:
                cols[role] = value
        if self.extras:
            cols["extras"] = ", ".join(self.extras)
        cfg["columns"] = cols
        return cfg


def _split_list(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def schema_from_config(cfg: configparser.ConfigParser | Mapping[str, Mapping[str, str]]) -> DatasetSchema:
    if "columns" not in cfg:
        raise DataError("schema config has no [columns] section")
    cols = cfg["columns"]
    missing = [r for r in ("features", "decision", "expert") if r not in cols]
    if missing:
        raise DataError(f"schema config missing required roles: {', '.join(missing)}")
    return DatasetSchema(
        features=_split_list(cols["features"]),
        decision=cols["decision"],
        expert=cols["expert"],
        outcome=cols.get("outcome"),
        group=cols.get("group"),
        construct=cols.get("construct"),
        case_id=cols.get("case_id"),
        extras=_split_list(cols.get("extras", "")),
    )


def load_schema(path: str | Path) -> DatasetSchema:
    cfg = configparser.ConfigParser()
    if not cfg.read(path):
        raise DataError(f"cannot read schema config {path}")
    return schema_from_config(cfg)


def write_schema(schema: DatasetSchema, path: str | Path) -> None:
    with open(path, "w") as fh:
        schema.to_config().write(fh)


@dataclass(frozen=True, eq=False)
class DecisionDataset:
    """Covariates plus one expert decision per case.

    ``outcomes`` holds values only where ``outcome_observed`` is True; censored
    entries are carried by the mask, never by a sentinel value.
    """

    features: np.ndarray
    decisions: np.ndarray
    expert_ids: np.ndarray
    outcomes: np.ndarray | None = None
    outcome_observed: np.ndarray | None = None
    group: np.ndarray | None = None
    construct: np.ndarray | None = None
    case_ids: np.ndarray | None = None
    feature_names: tuple[str, ...] = ()
    expert_labels: tuple[str, ...] = ()
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        X = np.asarray(self.features, dtype=float)
        if X.ndim != 2:
            raise DataError("features must be a 2-d matrix")
        n, m = X.shape
        if n < 1 or m < 1:
            raise DataError("dataset needs at least one row and one feature")
        object.__setattr__(self, "features", X)
        d = _binary(self.decisions, "decision")
        object.__setattr__(self, "decisions", d)
        a = np.asarray(self.expert_ids, dtype=np.int64)
        object.__setattr__(self, "expert_ids", a)
        if a.shape != (n,) or d.shape != (n,):
            raise DataError("decision and expert vectors must have length n")
        k = int(a.max())
        if a.min() < 1 or np.unique(a).size != k:
            raise DataError("expert ids must be dense in [1, k]")
        if self.outcomes is not None:
            obs = (np.ones(n, dtype=bool) if self.outcome_observed is None
                   else np.asarray(self.outcome_observed, dtype=bool))
            y = np.asarray(self.outcomes)
            if y.shape != (n,) or obs.shape != (n,):
                raise DataError("outcome vector must have length n")
            y = np.where(obs, y, 0)
            object.__setattr__(self, "outcomes", _binary(y, "outcome"))
            object.__setattr__(self, "outcome_observed", obs)
        elif self.outcome_observed is not None:
            raise DataError("outcome mask given without outcomes")
        for name in ("group", "construct"):
            v = getattr(self, name)
            if v is not None:
                v = _binary(v, name)
                if v.shape != (n,):
                    raise DataError(f"{name} vector must have length n")
                object.__setattr__(self, name, v)
        ids = (np.arange(n).astype(str) if self.case_ids is None
               else np.asarray(self.case_ids).astype(str))
        if ids.shape != (n,) or np.unique(ids).size != n:
            raise DataError("case ids must be unique, one per row")
        object.__setattr__(self, "case_ids", ids)
        if not self.feature_names:
            object.__setattr__(self, "feature_names", tuple(f"x{j}" for j in range(m)))
        elif len(self.feature_names) != m:
            raise DataError("feature_names length does not match feature count")
        if not self.expert_labels:
            object.__setattr__(self, "expert_labels", tuple(str(h) for h in range(1, k + 1)))
        elif len(self.expert_labels) != k:
            raise DataError("expert_labels must have one entry per expert")
        for key, v in self.extras.items():
            if np.asarray(v).shape != (n,):
                raise DataError(f"extra column {key!r} must have length n")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def m(self) -> int:
        return self.features.shape[1]

    @property
    def k(self) -> int:
        return int(self.expert_ids.max())

    @property
    def has_outcomes(self) -> bool:
        return self.outcomes is not None

    def observed_outcomes(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (row indices, values) of the observed outcomes."""
        if self.outcomes is None:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int8)
        idx = np.flatnonzero(self.outcome_observed)
        return idx, self.outcomes[idx]

    def subset(self, indices: Sequence[int] | np.ndarray) -> "DecisionDataset":
        """Row subset. Expert ids keep their numbering; experts absent from the
        subset are not re-indexed, so only use this on representation-preserving
        splits."""
        idx = np.asarray(indices, dtype=np.int64)
        take = lambda v: None if v is None else v[idx]  # noqa: E731
        return DecisionDataset(
            features=self.features[idx],
            decisions=self.decisions[idx],
            expert_ids=self.expert_ids[idx],
            outcomes=take(self.outcomes),
            outcome_observed=take(self.outcome_observed),
            group=take(self.group),
            construct=take(self.construct),
            case_ids=self.case_ids[idx],
            feature_names=self.feature_names,
            expert_labels=self.expert_labels,
            extras={key: np.asarray(v)[idx] for key, v in self.extras.items()},
        )

    def with_outcomes(self, outcomes: np.ndarray, observed: np.ndarray) -> "DecisionDataset":
        return replace(self, outcomes=outcomes, outcome_observed=observed)

    def check_selective(self, observing_decision: int) -> None:
        """Reject rows whose outcome is present although the decision censors it."""
        if self.outcomes is None:
            return
        bad = np.flatnonzero(self.outcome_observed & (self.decisions != observing_decision))
        if bad.size:
            raise DataError(
                f"row {int(bad[0])}: outcome present but decision={int(self.decisions[bad[0]])} "
                f"censors it (selective mode observes only decision={observing_decision})"
            )


def _binary(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype.kind == "f":
        if not np.all(np.isin(arr, (0.0, 1.0))):
            raise DataError(f"{name} values must be 0/1")
    elif arr.dtype.kind == "b":
        arr = arr.astype(np.int8)
    elif arr.dtype.kind not in "iu" or not np.all(np.isin(arr, (0, 1))):
        raise DataError(f"{name} values must be 0/1")
    return arr.astype(np.int8)


def _parse_binary_column(raw: pd.Series, name: str, allow_empty: bool) -> tuple[np.ndarray, np.ndarray]:
    text = raw.astype(str).str.strip().to_numpy()
    empty = text == ""
    if empty.any() and not allow_empty:
        raise DataError(f"row {int(np.flatnonzero(empty)[0])}: empty {name} value")
    ok = np.isin(text, ("0", "1", "0.0", "1.0", ""))
    if not ok.all():
        row = int(np.flatnonzero(~ok)[0])
        raise DataError(f"row {row}: non-binary {name} value {text[row]!r}")
    values = np.where(empty, 0, np.char.startswith(text.astype(str), "1")).astype(np.int8)
    return values, ~empty


def load_dataset(path: str | Path, schema: DatasetSchema, selective_mode: int | None = None) -> DecisionDataset:
    """Read a CSV file into a validated DecisionDataset.

    Expert ids are re-indexed densely to 1..k in order of first appearance after
    sorting the original labels; the original labels are kept in
    ``expert_labels``. With ``selective_mode`` set to the observing decision,
    outcomes present on other rows are rejected.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    dtypes = {c: float for c in schema.features}
    skip = _preamble_lines(path)
    try:
        frame = pd.read_csv(path, dtype=dtypes, keep_default_na=False, na_filter=False, skiprows=skip,
                            float_precision="round_trip",
                            converters={c: str for c in _role_columns(schema)})
    except pd.errors.EmptyDataError as exc:
        raise DataError(f"empty file: {path}") from exc
    except ValueError as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    if len(frame) == 0:
        raise DataError(f"empty file: {path}")
    required = list(schema.features) + [schema.decision, schema.expert]
    optional = [c for c in (schema.outcome, schema.group, schema.construct, schema.case_id) if c]
    missing = [c for c in required + optional + list(schema.extras) if c not in frame.columns]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}")

    X = frame[list(schema.features)].to_numpy(dtype=float)
    d, _ = _parse_binary_column(frame[schema.decision], "decision", allow_empty=False)
    raw_experts = frame[schema.expert].astype(str).str.strip().to_numpy()
    labels = sorted(set(raw_experts), key=_natural_key)
    index = {lab: i + 1 for i, lab in enumerate(labels)}
    a = np.array([index[v] for v in raw_experts], dtype=np.int64)

    y = obs = None
    if schema.outcome:
        y, obs = _parse_binary_column(frame[schema.outcome], "outcome", allow_empty=True)
    group = _parse_binary_column(frame[schema.group], "group", False)[0] if schema.group else None
    construct = (_parse_binary_column(frame[schema.construct], "construct", False)[0]
                 if schema.construct else None)
    ids = frame[schema.case_id].astype(str).to_numpy() if schema.case_id else None
    extras = {c: frame[c].to_numpy() for c in schema.extras}
    ds = DecisionDataset(
        features=X, decisions=d, expert_ids=a, outcomes=y, outcome_observed=obs,
        group=group, construct=construct, case_ids=ids,
        feature_names=tuple(schema.features), expert_labels=tuple(labels), extras=extras,
    )
    if selective_mode is not None:
        ds.check_selective(selective_mode)
    return ds


def _preamble_lines(path: Path) -> int:
    """Number of leading ``#`` provenance lines."""
    count = 0
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            count += 1
    return count


def read_preamble(path: str | Path) -> dict[str, str]:
    """Key/value pairs from the leading ``# key=value`` lines of a CSV file."""
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            out[key.strip()] = value.strip()
    return out


def _role_columns(schema: DatasetSchema) -> list[str]:
    return [c for c in (schema.decision, schema.expert, schema.outcome, schema.group,
                        schema.construct, schema.case_id) if c] + list(schema.extras)


def _natural_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def default_schema(ds: DecisionDataset) -> DatasetSchema:
    return DatasetSchema(
        features=ds.feature_names,
        decision="decision",
        expert="expert",
        outcome="outcome" if ds.has_outcomes else None,
        group="group" if ds.group is not None else None,
        construct="construct" if ds.construct is not None else None,
        case_id="case_id",
        extras=tuple(ds.extras),
    )


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_dataset(ds: DecisionDataset, path: str | Path, schema: DatasetSchema | None = None,
                  preamble: Mapping[str, object] | None = None) -> DatasetSchema:
    """Write ``ds`` as CSV (header row, empty field for censored outcomes).

    Column order is case id, features, decision, outcome, expert, group,
    construct, extras. ``preamble`` entries are written first as
    ``# key=value`` lines, which ``load_dataset`` skips. Returns the schema
    describing the written file.
    """
    schema = schema or default_schema(ds)
    header = [schema.case_id or "case_id", *schema.features, schema.decision]
    if ds.has_outcomes:
        header.append(schema.outcome or "outcome")
    header.append(schema.expert)
    if ds.group is not None:
        header.append(schema.group or "group")
    if ds.construct is not None:
        header.append(schema.construct or "construct")
    header.extend(ds.extras)
    labels = np.asarray(ds.expert_labels)[ds.expert_ids - 1]
    with open(path, "w", newline="") as fh:
        for key, value in (preamble or {}).items():
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(ds.n):
            row = [ds.case_ids[i], *(repr(float(v)) for v in ds.features[i]), int(ds.decisions[i])]
            if ds.has_outcomes:
                row.append(int(ds.outcomes[i]) if ds.outcome_observed[i] else "")
            row.append(labels[i])
            if ds.group is not None:
                row.append(int(ds.group[i]))
            if ds.construct is not None:
                row.append(int(ds.construct[i]))
            row.extend(_fmt(ds.extras[c][i]) for c in ds.extras)
            writer.writerow(row)
    return replace(schema, case_id=schema.case_id or "case_id")


@dataclass(frozen=True)
class SplitPlan:
    train_indices: np.ndarray
    test_indices: np.ndarray
    seed: int
    train_fraction: float

    def __eq__(self, other) -> bool:
        if not isinstance(other, SplitPlan):
            return NotImplemented
        return (self.seed == other.seed and self.train_fraction == other.train_fraction
                and np.array_equal(self.train_indices, other.train_indices)
                and np.array_equal(self.test_indices, other.test_indices))


def monte_carlo_split(ds: DecisionDataset, train_fraction: float, seed: int,
                      linkage: Sequence | np.ndarray | None = None) -> SplitPlan:
    """Random train/test split that keeps every expert on both sides.

    After the random draw, any expert missing from a fold gets one case (the
    lowest row index, together with its linkage group) moved across. Rows that
    share a linkage key always land in the same fold.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    counts = np.bincount(ds.expert_ids, minlength=ds.k + 1)[1:]
    lonely = np.flatnonzero(counts < 2)
    if lonely.size:
        raise DataError(f"expert {int(lonely[0]) + 1} has a single case; it cannot appear in both folds")

    n = ds.n
    if linkage is None:
        unit = np.arange(n)
    else:
        keys = np.asarray(linkage)
        if keys.shape != (n,):
            raise DataError("linkage key vector must have length n")
        _, unit = np.unique(keys, return_inverse=True)
    n_units = int(unit.max()) + 1
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_units)
    sizes = np.bincount(unit, minlength=n_units)
    target = int(round(train_fraction * n))
    in_train_unit = np.zeros(n_units, dtype=bool)
    total = 0
    for u in order:
        if total >= target:
            break
        in_train_unit[u] = True
        total += sizes[u]

    for _ in range(2 * ds.k + 1):
        in_train = in_train_unit[unit]
        changed = False
        for h in range(1, ds.k + 1):
            rows = np.flatnonzero(ds.expert_ids == h)
            side = in_train[rows]
            if side.all():
                in_train_unit[unit[rows[0]]] = False
                changed = True
            elif not side.any():
                in_train_unit[unit[rows[0]]] = True
                changed = True
            if changed:
                break
        if not changed:
            break
    in_train = in_train_unit[unit]
    train = np.flatnonzero(in_train)
    test = np.flatnonzero(~in_train)
    for h in range(1, ds.k + 1):
        if not (np.any(ds.expert_ids[train] == h) and np.any(ds.expert_ids[test] == h)):
            raise DataError(f"cannot place expert {h} in both folds under the given linkage")
    return SplitPlan(train, test, int(seed), float(train_fraction))
