"""Run configuration and the staged, reproducible end-to-end pipeline.

A run is fully described by one INI document. Every artifact a run writes
carries the configuration hash and seed, and no artifact contains timestamps
or host details, so a rerun of the same configuration reproduces each file
byte for byte.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .amalgamation import (GlmConfig, Kind, LeveragedPredictor, Mode, amalgamate, fit_amalgam_model,
                           fit_outside_model)
from .consistency import ConsistencyEstimator, ConsistencyParams, build_consistency_set, validate_consistency
from .data import DataError, DecisionDataset, load_dataset, load_schema, monte_carlo_split, write_dataset
from .evaluation import (MODEL_NAMES, OPTIONAL_MODELS, EvaluationReport, Protocol, SuiteConfig, run_evaluation,
                         score_model)
from .glm import NumericalError, save_model
from .influence import write_table
from .simulate import Scenario, ScenarioSpec, generate, write_bundle

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SWEEP_PARAMS = ("delta", "gamma1", "gamma2", "gamma3")
# Direction in which the amalgamated fraction must move as the value grows.
SWEEP_DIRECTION = {"delta": 1, "gamma3": 1, "gamma1": -1, "gamma2": -1}


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (a usage error)."""


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException, exit_code: int):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = exit_code


# ---------------------------------------------------------------- config


def _fmt(value) -> str:
    if value is None:
        return "off"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (Scenario, Mode)):
        return value.value
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def _parse_like(text: str, default, key: str):
    """Parse ``text`` into the type of ``default``."""
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for '{key}': {text!r}") from exc
    return text


def _optional_float(text: str, key: str, off_words=("off", "none", "auto", "")) -> float | None:
    if text.strip().lower() in off_words:
        return None
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for '{key}': {text!r}") from exc


@dataclass(frozen=True)
class DataConfig:
    """Exactly one source: ``simulate`` (scenario spec) or ``file`` (path)."""

    source: str = "simulate"
    path: str = ""
    schema: str = ""
    selective_mode: int | None = None
    scenario: ScenarioSpec = ScenarioSpec()

    def __post_init__(self):
        if self.source not in ("simulate", "file"):
            raise ConfigError(f"data source must be 'simulate' or 'file', got {self.source!r}")
        if self.source == "file" and not self.path:
            raise ConfigError("data source 'file' needs a path")
        if self.source == "simulate" and self.path:
            raise ConfigError("give either a scenario or a path, not both")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    params: ConsistencyParams = ConsistencyParams(0.05, 6.0, 0.95, 0.002)
    mode: Mode = Mode.FULL
    models: tuple[str, ...] = MODEL_NAMES
    glm: GlmConfig = GlmConfig()
    protocol: Protocol = Protocol()
    output: str = "run"
    sweep_param: str | None = None
    sweep_values: tuple = ()

    def __post_init__(self):
        known = MODEL_NAMES + OPTIONAL_MODELS
        bad = [m for m in self.models if m not in known]
        if bad:
            raise ConfigError(f"unknown model(s): {', '.join(bad)}")
        for needed in ("f_Y", "f_h"):
            if needed not in self.models:
                raise ConfigError(f"model set must include {needed}")
        if self.sweep_param is not None and self.sweep_param not in SWEEP_PARAMS:
            raise ConfigError(f"sweep parameter must be one of {', '.join(SWEEP_PARAMS)}")
        if self.protocol.precision_eligibility not in ("all", "screened_in"):
            raise ConfigError("precision_eligibility must be 'all' or 'screened_in'")

    # -- serialisation

    def to_parser(self, reproducible_only: bool = False) -> configparser.ConfigParser:
        """Sections in a fixed order. ``reproducible_only`` drops settings that
        do not affect results (output location and worker count)."""
        cp = configparser.ConfigParser(interpolation=None)
        d = self.data
        data = {"source": d.source, "path": d.path, "schema": d.schema,
                "selective_mode": _fmt(d.selective_mode)}
        for f in fields(ScenarioSpec):
            data[f.name] = _fmt(getattr(d.scenario, f.name))
        cp["data"] = data
        p = self.params
        cp["consistency"] = {"delta": _fmt(p.delta), "gamma1": _fmt(p.gamma1),
                             "gamma2": _fmt(p.gamma2), "gamma3": _fmt(p.gamma3)}
        cp["amalgamation"] = {"mode": self.mode.value}
        cp["models"] = {"build": _fmt(self.models)}
        g = self.glm
        cp["glm"] = {"ridge": "auto" if g.ridge is None else _fmt(g.ridge), "tol": _fmt(g.tol),
                     "max_iter": _fmt(g.max_iter), "calibrate": _fmt(g.calibrate)}
        pr = self.protocol
        proto = {"repetitions": _fmt(pr.repetitions), "train_fraction": _fmt(pr.train_fraction),
                 "seed": _fmt(pr.seed), "screenout_rate": _fmt(pr.screenout_rate),
                 "precision_grid": _fmt(pr.precision_grid),
                 "precision_eligibility": pr.precision_eligibility}
        if not reproducible_only:
            proto["workers"] = _fmt(pr.workers)
        cp["protocol"] = proto
        if not reproducible_only:
            cp["output"] = {"directory": self.output}
        cp["sweep"] = {"param": self.sweep_param or "",
                       "values": ", ".join(_fmt(v) for v in self.sweep_values)}
        return cp

    def to_ini(self, reproducible_only: bool = False) -> str:
        buf = io.StringIO()
        self.to_parser(reproducible_only).write(buf)
        return buf.getvalue()

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini(reproducible_only=True).encode()).hexdigest()[:16]

    @property
    def seed(self) -> int:
        return self.protocol.seed

    def provenance(self, stage: str) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed, "stage": stage,
                "version": __version__}

    def with_overrides(self, seed: int | None = None, out: str | None = None,
                       scenario: str | None = None, params: ConsistencyParams | None = None
                       ) -> "RunConfig":
        """Apply command-line overrides; ``seed`` sets both the data and protocol seeds."""
        cfg = self
        if scenario is not None:
            spec = replace(cfg.data.scenario, scenario=Scenario(scenario))
            cfg = replace(cfg, data=DataConfig("simulate", "", "", cfg.data.selective_mode, spec))
        if seed is not None:
            spec = replace(cfg.data.scenario, seed=int(seed))
            cfg = replace(cfg, data=replace(cfg.data, scenario=spec),
                          protocol=replace(cfg.protocol, seed=int(seed)))
        if out is not None:
            cfg = replace(cfg, output=str(out))
        if params is not None:
            cfg = replace(cfg, params=params)
        return cfg

    @property
    def suite(self) -> SuiteConfig:
        return SuiteConfig(self.params, self.models, self.mode, self.glm, self.glm)


def _section(cp: configparser.ConfigParser, name: str) -> dict:
    return dict(cp[name]) if cp.has_section(name) else {}


def _reject_unknown(section: str, got: dict, allowed) -> None:
    extra = sorted(set(got) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(extra)}")


def parse_config(text: str) -> RunConfig:
    """Build a RunConfig from INI text; missing keys take their defaults."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    known_sections = {"data", "consistency", "amalgamation", "models", "glm", "protocol", "output", "sweep"}
    extra = sorted(set(cp.sections()) - known_sections)
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(extra)}")
    base = RunConfig()
    try:
        data = _section(cp, "data")
        spec_defaults = ScenarioSpec()
        spec_keys = [f.name for f in fields(ScenarioSpec)]
        _reject_unknown("data", data, ["source", "path", "schema", "selective_mode", *spec_keys])
        spec_kw = {}
        for key in spec_keys:
            if key in data:
                spec_kw[key] = _parse_like(data[key], getattr(spec_defaults, key), key)
        sel = _optional_float(data.get("selective_mode", "off"), "selective_mode")
        data_cfg = DataConfig(
            source=data.get("source", "file" if data.get("path") else "simulate").strip(),
            path=data.get("path", "").strip(),
            schema=data.get("schema", "").strip(),
            selective_mode=None if sel is None else int(sel),
            scenario=ScenarioSpec(**spec_kw),
        )

        cons = _section(cp, "consistency")
        _reject_unknown("consistency", cons, ["delta", "gamma1", "gamma2", "gamma3", "params"])
        params = base.params
        if "params" in cons:
            params = ConsistencyParams.parse(cons["params"])
        params = ConsistencyParams(
            float(cons.get("delta", params.delta)),
            float(cons.get("gamma1", params.gamma1)),
            float(cons.get("gamma2", params.gamma2)),
            _optional_float(cons["gamma3"], "gamma3") if "gamma3" in cons else params.gamma3,
        )

        amal = _section(cp, "amalgamation")
        _reject_unknown("amalgamation", amal, ["mode"])
        mode = Mode(amal.get("mode", base.mode.value).strip())

        mods = _section(cp, "models")
        _reject_unknown("models", mods, ["build"])
        models = base.models
        if "build" in mods:
            models = tuple(m.strip() for m in mods["build"].split(",") if m.strip())

        g = _section(cp, "glm")
        _reject_unknown("glm", g, ["ridge", "tol", "max_iter", "calibrate"])
        glm = GlmConfig(
            ridge=_optional_float(g.get("ridge", "auto"), "ridge"),
            tol=float(g.get("tol", base.glm.tol)),
            max_iter=int(g.get("max_iter", base.glm.max_iter)),
            calibrate=_parse_like(g.get("calibrate", "true"), True, "calibrate"),
        )

        pr = _section(cp, "protocol")
        proto_defaults = base.protocol
        proto_keys = [f.name for f in fields(Protocol)]
        _reject_unknown("protocol", pr, proto_keys)
        proto_kw = {key: _parse_like(pr[key], getattr(proto_defaults, key), key)
                    for key in proto_keys if key in pr}
        protocol = Protocol(**proto_kw)

        out = _section(cp, "output")
        _reject_unknown("output", out, ["directory"])

        sw = _section(cp, "sweep")
        _reject_unknown("sweep", sw, ["param", "values"])
        sweep_param = sw.get("param", "").strip() or None
        sweep_values = parse_sweep_values(sweep_param, sw.get("values", "")) if sweep_param else ()
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(data_cfg, params, mode, models, glm, protocol,
                     out.get("directory", base.output).strip(), sweep_param, sweep_values)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such config file: {path}")
    return parse_config(path.read_text())


def parse_sweep_values(param: str, text) -> tuple:
    """Comma list (or sequence) of values; ``off`` is accepted for gamma3."""
    items = [v.strip() for v in text.split(",")] if isinstance(text, str) else list(text)
    items = [v for v in items if v != ""]
    if not items:
        raise ConfigError("sweep needs at least one value")
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {', '.join(SWEEP_PARAMS)}")
    out = []
    for v in items:
        if param == "gamma3":
            out.append(_optional_float(str(v), param, ("off", "none")))
        else:
            try:
                out.append(float(v))
            except ValueError as exc:
                raise ConfigError(f"bad sweep value {v!r}") from exc
    return tuple(out)


def default_config_text() -> str:
    return RunConfig().to_ini()


# ---------------------------------------------------------------- output


def _clean(obj):
    """JSON-ready copy: numpy scalars to Python, NaN to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if math.isnan(v) or math.isinf(v) else v
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(payload), indent=1, sort_keys=True, allow_nan=False) + "\n")


def _write_csv(path: Path, header: list[str], rows, provenance: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {k}={v}" for k, v in provenance.items()]
    lines.append(",".join(header))
    lines.extend(",".join(str(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@contextmanager
def stage(name: str):
    """Translate failures inside a stage into PipelineError with an exit code."""
    try:
        yield
    except PipelineError:
        raise
    except (DataError, FileNotFoundError) as exc:
        raise PipelineError(name, exc, EXIT_DATA) from exc
    except (NumericalError, np.linalg.LinAlgError, ArithmeticError) as exc:
        raise PipelineError(name, exc, EXIT_NUMERIC) from exc
    except ConfigError as exc:
        raise PipelineError(name, exc, EXIT_USAGE) from exc
    except ValueError as exc:
        raise PipelineError(name, exc, EXIT_DATA) from exc


# ---------------------------------------------------------------- workspace


@dataclass(eq=False)
class Workspace:
    """Holds one run's configuration, output directory and stage results.

    Stages compute on demand and cache in memory; every stage writes its
    artifacts and records them for the run manifest.
    """

    config: RunConfig
    out: Path
    written: list[Path] = field(default_factory=list)
    _cache: dict = field(default_factory=dict)

    @classmethod
    def open(cls, config: RunConfig, out: str | Path | None = None) -> "Workspace":
        target = Path(out if out is not None else config.output)
        try:
            target.mkdir(parents=True, exist_ok=True)
            probe = target / ".write-probe"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise ConfigError(f"output directory not writable: {target} ({exc})") from exc
        return cls(config, target)

    def _record(self, path: Path) -> Path:
        if path not in self.written:
            self.written.append(path)
        return path

    def prov(self, stage_name: str) -> dict:
        return self.config.provenance(stage_name)

    # -- stages

    def dataset(self) -> DecisionDataset:
        if "dataset" in self._cache:
            return self._cache["dataset"]
        d = self.config.data
        with stage("data"):
            if d.source == "simulate":
                bundle = generate(d.scenario)
                csv_path, manifest = write_bundle(bundle, self.out / "data", self.prov("data"))
                self._record(csv_path)
                self._record(manifest)
                ds = bundle.dataset
            else:
                if not Path(d.path).exists():
                    raise DataError(f"no such file: {d.path}")
                schema_path = Path(d.schema) if d.schema else Path(d.path).with_name("manifest.ini")
                if not schema_path.exists():
                    raise DataError(f"no column schema found (looked for {schema_path})")
                ds = load_dataset(d.path, load_schema(schema_path), d.selective_mode)
                (self.out / "data").mkdir(parents=True, exist_ok=True)
                write_dataset(ds, self.out / "data" / "dataset.csv", preamble=self.prov("data"))
                self._record(self.out / "data" / "dataset.csv")
        self._cache["dataset"] = ds
        return ds

    def reference_split(self):
        """The first repetition's split; the staged commands work on it."""
        if "split" in self._cache:
            return self._cache["split"]
        ds = self.dataset()
        proto = self.config.protocol
        with stage("split"):
            split = monte_carlo_split(ds, proto.train_fraction, proto.repetition_seeds()[0])
            train, test = ds.subset(split.train_indices), ds.subset(split.test_indices)
            if not train.has_outcomes:
                raise DataError("dataset has no outcome column")
            path = self.out / "split" / "split.json"
            write_json(path, {"provenance": self.prov("split"), "split_seed": split.seed,
                              "train_fraction": split.train_fraction,
                              "train": [str(c) for c in train.case_ids],
                              "test": [str(c) for c in test.case_ids]})
            self._record(path)
        self._cache["split"] = (train, test)
        return train, test

    def models(self) -> dict:
        """Outcome and decision models on the reference training fold."""
        if "models" in self._cache:
            return self._cache["models"]
        train, _ = self.reference_split()
        glm = self.config.glm
        with stage("fit"):
            obs = train.outcome_observed
            fitted = {"f_Y": glm.fit(train.features[obs], train.outcomes[obs]),
                      "f_h": glm.fit(train.features, train.decisions)}
            for name, model in fitted.items():
                path = self.out / "models" / f"{name}.json"
                path.parent.mkdir(parents=True, exist_ok=True)
                save_model(model, path, {"provenance": self.prov("fit"),
                                         "feature_names": list(train.feature_names)})
                self._record(path)
        self._cache["models"] = fitted
        return fitted

    def estimator(self) -> ConsistencyEstimator:
        if "estimator" not in self._cache:
            train, _ = self.reference_split()
            f_h = self.models()["f_h"]
            with stage("influence"):
                self._cache["estimator"] = ConsistencyEstimator(
                    f_h, train.features, train.decisions, train.expert_ids, self.config.params, k=train.k)
        return self._cache["estimator"]

    def influence(self):
        """Influence tables for the training fold (decisions known) and the test fold."""
        if "tables" in self._cache:
            return self._cache["tables"]
        train, test = self.reference_split()
        est = self.estimator()
        with stage("influence"):
            tables = {"train": est.table(train.features), "test": est.table(test.features)}
            for name, ds in (("train", train), ("test", test)):
                path = self.out / "influence" / f"{name}.json"
                path.parent.mkdir(parents=True, exist_ok=True)
                write_table(tables[name], ds.case_ids, path, self.prov("influence"))
                self._record(path)
        self._cache["tables"] = tables
        return tables

    def consistency(self):
        if "assignment" in self._cache:
            return self._cache["assignment"]
        train, test = self.reference_split()
        tables = self.influence()
        with stage("consistency"):
            assignment = build_consistency_set(tables["train"], self.config.params, train.decisions)
            rows = [(cid, int(d), repr(float(p)), int(m)) for cid, d, p, m in
                    zip(train.case_ids, train.decisions, tables["train"].query_prob, assignment.membership)]
            path = self.out / "consistency" / "membership.csv"
            _write_csv(path, ["case_id", "decision", "query_prob", "membership"], rows,
                       self.prov("consistency"))
            self._record(path)
            checks = validate_consistency(self.estimator(), test.features, test.decisions,
                                          confidence=0.95)
            path = self.out / "consistency" / "agreement.json"
            write_json(path, {
                "provenance": self.prov("consistency"),
                "params": self.config.params.format(),
                "train_fraction_in_set": assignment.fraction,
                "train_positive": int(assignment.positive.sum()),
                "train_negative": int(assignment.negative.sum()),
                "holdout_checks": [{**c.__dict__, "status": c.status} for c in checks],
            })
            self._record(path)
        self._cache["assignment"] = assignment
        return assignment

    def amalgamation(self):
        if "plan" in self._cache:
            return self._cache["plan"]
        train, _ = self.reference_split()
        assignment = self.consistency()
        with stage("amalgamate"):
            plan = amalgamate(train, assignment, self.config.mode)
            rows = [(cid, int(lab) if ok else "", int(pv)) for cid, lab, ok, pv in
                    zip(train.case_ids, plan.labels, plan.usable, plan.provenance)]
            path = self.out / "amalgamation" / "labels.csv"
            _write_csv(path, ["case_id", "label", "provenance"], rows, self.prov("amalgamate"))
            self._record(path)
            models = {}
            if "f_A" in self.config.models:
                models["f_A"] = fit_amalgam_model(train, plan, self.config.glm)
            if "f_hyb" in self.config.models or "f_defer" in self.config.models:
                models["f_outside"] = fit_outside_model(train, assignment, self.config.mode, self.config.glm)
            for name, model in models.items():
                path = self.out / "models" / f"{name}.json"
                path.parent.mkdir(parents=True, exist_ok=True)
                save_model(model, path, {"provenance": self.prov("amalgamate"),
                                         "amalgamated_fraction": plan.amalgamated_fraction})
                self._record(path)
        self._cache["plan"] = plan
        return plan

    def evaluate(self, params: ConsistencyParams | None = None, tag: str = "report") -> dict:
        ds = self.dataset()
        cfg = self.config if params is None else replace(self.config, params=params)
        with stage("evaluate"):
            reports, results = run_evaluation(ds, cfg.suite, cfg.protocol)
            if not any(r.metrics is not None for r in results):
                first = next(r.error for r in results if r.error)
                raise NumericalError(f"every repetition failed; first error: {first}")
            payload = report_payload(cfg, reports, results)
            json_path = self.out / "report" / f"{tag}.json"
            write_json(json_path, payload)
            txt_path = self.out / "report" / f"{tag}.txt"
            txt_path.write_text(format_report(cfg, reports, results))
            self._record(json_path)
            self._record(txt_path)
        return reports

    def write_manifest(self, status: str, failed: PipelineError | None = None) -> Path:
        files = sorted(p for p in self.written if p.exists())
        payload = {
            "config_hash": self.config.config_hash,
            "seed": self.config.seed,
            "status": status,
            "failed_stage": failed.stage if failed else None,
            "error": str(failed) if failed else None,
            "files": {str(p.relative_to(self.out)): _sha256(p) for p in files},
        }
        path = self.out / "manifest.json"
        write_json(path, payload)
        run_ini = self.out / "run.ini"
        run_ini.write_text(f"# config_hash={self.config.config_hash}\n# seed={self.config.seed}\n"
                           + self.config.to_ini(reproducible_only=True))
        return path


# ---------------------------------------------------------------- reports


def report_payload(cfg: RunConfig, reports: dict[str, EvaluationReport], results) -> dict:
    return {
        "provenance": cfg.provenance("evaluate"),
        "params": cfg.params.format(),
        "mode": cfg.mode.value,
        "models": {name: rep.to_dict() for name, rep in reports.items()},
        "repetitions": [{"index": r.index, "seed": r.seed, "error": r.error,
                         "amalgamated_fraction": r.amalgamated_fraction} for r in results],
        "not_assessed": ["learning-to-defer baseline (out of scope)"],
    }


def _num(v, width=7, digits=3) -> str:
    return f"{'-':>{width}}" if v is None else f"{v:>{width}.{digits}f}"


def format_report(cfg: RunConfig, reports: dict[str, EvaluationReport], results) -> str:
    lines = [f"# config_hash={cfg.config_hash}", f"# seed={cfg.seed}",
             f"params {cfg.params.format()}  mode {cfg.mode.value}  "
             f"repetitions {sum(r.metrics is not None for r in results)}/{len(results)}",
             f"{'model':<12}{'AUC':>7}{'+-':>7}{'TNR min':>9}{'TNR maj':>9}{'gap_dp':>8}{'dgap':>8}"]
    for name, rep in reports.items():
        lines.append(
            f"{name:<12}{_num(rep.auc)}{_num(rep.dispersion.get('auc'))}"
            f"{_num(rep.tnr_by_group.get('minority'), 9)}{_num(rep.tnr_by_group.get('majority'), 9)}"
            f"{_num(rep.gap_dp, 8)}{_num(rep.gap_shift, 8)}"
        )
    amal = reports.get("f_A")
    if amal is not None and amal.extra.get("amalgamated_fraction") is not None:
        lines.append(f"amalgamated fraction {amal.extra['amalgamated_fraction']:.4f}")
    defer = reports.get("f_defer")
    if defer is not None and defer.extra.get("coverage") is not None:
        lines.append(f"deferral coverage {defer.extra['coverage']:.4f}")
    for r in results:
        if r.error:
            lines.append(f"repetition {r.index} failed: {r.error}")
    lines.append("not assessed: learning-to-defer baseline (out of scope)")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- sweep


@dataclass(frozen=True)
class SweepPoint:
    value: float | None
    amalgamated_fraction: float
    auc: float | None
    tnr_minority: float | None
    gap_shift: float | None
    per_repetition_fraction: tuple


@dataclass(frozen=True)
class SweepResult:
    param: str
    points: tuple[SweepPoint, ...]
    direction: int
    monotone: bool
    violations: tuple

    def to_dict(self) -> dict:
        return {
            "param": self.param,
            "direction": "non-decreasing" if self.direction > 0 else "non-increasing",
            "monotone": self.monotone,
            "violations": [list(v) for v in self.violations],
            "points": [p.__dict__ for p in self.points],
        }


def _sort_key(value):
    return -math.inf if value is None else value


def _sweep_repetition(args):
    ds, cfg, param, values, index, seed = args
    proto = cfg.protocol
    split = monte_carlo_split(ds, proto.train_fraction, seed)
    train, test = ds.subset(split.train_indices), ds.subset(split.test_indices)
    obs = train.outcome_observed
    f_y = cfg.glm.fit(train.features[obs], train.outcomes[obs])
    f_h = cfg.glm.fit(train.features, train.decisions)
    est = ConsistencyEstimator(f_h, train.features, train.decisions, train.expert_ids, cfg.params, k=train.k)
    table = est.table(train.features)  # computed once, reused for every value
    base = score_model(LeveragedPredictor(Kind.OUTCOME, f_y), test, proto)
    out = []
    for v in values:
        params = replace(cfg.params, **{param: v})
        plan = amalgamate(train, build_consistency_set(table, params, train.decisions), cfg.mode)
        f_a = fit_amalgam_model(train, plan, cfg.glm)
        m = score_model(LeveragedPredictor(Kind.AMALGAM, f_a), test, proto)
        shift = None
        if m.get("gap_dp") is not None and base.get("gap_dp") is not None:
            shift = m["gap_dp"] - base["gap_dp"]
        out.append((plan.amalgamated_fraction, m["auc"], m.get("tnr_by_group", {}).get("minority"), shift))
    return index, out


def sweep(ds: DecisionDataset, cfg: RunConfig, param: str, values) -> SweepResult:
    """Amalgamated fraction and headline f_A metrics for each value of one
    consistency parameter, with a check of the expected monotone direction.

    Influence tables are computed once per repetition and shared by all values.
    """
    values = parse_sweep_values(param, values) if isinstance(values, str) else tuple(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {', '.join(SWEEP_PARAMS)}")
    values = tuple(sorted(values, key=_sort_key))
    for v in values:
        replace(cfg.params, **{param: v})  # validates each value up front
    proto = cfg.protocol
    jobs = [(ds, cfg, param, values, i, s) for i, s in enumerate(proto.repetition_seeds())]
    if proto.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=proto.workers) as pool:
            results = list(pool.map(_sweep_repetition, jobs))
    else:
        results = [_sweep_repetition(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    direction = SWEEP_DIRECTION[param]
    violations = []
    for index, rows in results:
        fr = [r[0] for r in rows]
        for j in range(1, len(fr)):
            if direction * (fr[j] - fr[j - 1]) < 0:
                violations.append((index, values[j - 1], values[j]))
    points = []
    for j, v in enumerate(values):
        col = [rows[j] for _, rows in results]
        vals = [c[3] for c in col if c[3] is not None]
        tnrs = [c[2] for c in col if c[2] is not None]
        points.append(SweepPoint(
            value=v,
            amalgamated_fraction=float(np.mean([c[0] for c in col])),
            auc=float(np.mean([c[1] for c in col])),
            tnr_minority=float(np.mean(tnrs)) if tnrs else None,
            gap_shift=float(np.mean(vals)) if vals else None,
            per_repetition_fraction=tuple(c[0] for c in col),
        ))
    return SweepResult(param, tuple(points), direction, not violations, tuple(violations))


def format_sweep(cfg: RunConfig, result: SweepResult) -> str:
    lines = [f"# config_hash={cfg.config_hash}", f"# seed={cfg.seed}",
             f"{result.param:<10}{'amalg':>8}{'AUC_A':>8}{'TNR min':>9}{'dgap':>8}"]
    for p in result.points:
        label = "off" if p.value is None else f"{p.value:g}"
        lines.append(f"{label:<10}{_num(p.amalgamated_fraction, 8, 4)}{_num(p.auc, 8)}"
                     f"{_num(p.tnr_minority, 9)}{_num(p.gap_shift, 8)}")
    state = "holds" if result.monotone else f"VIOLATED at {list(result.violations)}"
    lines.append(f"monotonicity ({result.to_dict()['direction']}): {state}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- commands


def _guarded(ws: Workspace, body):
    try:
        result = body()
    except PipelineError as exc:
        ws.write_manifest("partial", exc)
        raise
    ws.write_manifest("complete")
    return result


def run_simulate(cfg: RunConfig, out: str | Path | None = None) -> tuple[Path, Path]:
    if cfg.data.source != "simulate":
        raise ConfigError("simulate needs a scenario data source")
    target = Path(out if out is not None else cfg.output)
    with stage("simulate"):
        bundle = generate(cfg.data.scenario)
        return write_bundle(bundle, target, cfg.provenance("simulate"))


def run_stage(cfg: RunConfig, name: str) -> Workspace:
    """Run the pipeline up to stage ``name`` (fit, influence, consistency,
    amalgamate or evaluate) and write its artifacts."""
    ws = Workspace.open(cfg)
    steps = {"fit": ws.models, "influence": ws.influence, "consistency": ws.consistency,
             "amalgamate": ws.amalgamation, "evaluate": ws.evaluate}
    if name not in steps:
        raise ConfigError(f"unknown stage {name!r}")
    _guarded(ws, steps[name])
    return ws


def run_pipeline(cfg: RunConfig) -> Workspace:
    """Every stage in order, then the evaluation report (one per sweep value
    when the config carries a sweep list)."""
    ws = Workspace.open(cfg)

    def body():
        ws.amalgamation()
        ws.evaluate()
        if cfg.sweep_param:
            for v in cfg.sweep_values:
                params = replace(cfg.params, **{cfg.sweep_param: v})
                ws.evaluate(params, tag=f"{cfg.sweep_param}={_fmt(v)}")

    _guarded(ws, body)
    return ws


def run_sweep(cfg: RunConfig, param: str | None = None, values=None) -> SweepResult:
    param = param or cfg.sweep_param
    values = values if values is not None else cfg.sweep_values
    if not param:
        raise ConfigError("no sweep parameter given")
    values = parse_sweep_values(param, values) if isinstance(values, str) else tuple(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    ws = Workspace.open(cfg)

    def body():
        ds = ws.dataset()
        with stage("sweep"):
            res = sweep(ds, cfg, param, values)
            path = ws.out / "sweep" / f"{param}.json"
            write_json(path, {"provenance": cfg.provenance("sweep"), **res.to_dict()})
            txt = ws.out / "sweep" / f"{param}.txt"
            txt.write_text(format_sweep(cfg, res))
            ws._record(path)
            ws._record(txt)
        return res

    return _guarded(ws, body)

