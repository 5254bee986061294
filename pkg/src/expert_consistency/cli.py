"""Command-line front end: ``expert-consistency <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .consistency import ConsistencyParams
from .data import DataError
from .pipeline import (EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, ConfigError, PipelineError, RunConfig,
                       SWEEP_PARAMS, format_sweep, load_config, parse_sweep_values, run_pipeline, run_simulate,
                       run_stage, run_sweep)
from .glm import NumericalError
from .simulate import Scenario

STAGES = ("fit", "influence", "consistency", "amalgamate", "evaluate")


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that exits with the usage code (1) instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _params(text: str) -> ConsistencyParams:
    try:
        return ConsistencyParams.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected two comma-separated numbers") from exc
    return a, b


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run configuration (INI); defaults apply to missing keys")
    p.add_argument("--seed", type=int, help="seed for both simulation and repetitions")
    p.add_argument("--out", help="output directory")
    p.add_argument("--scenario", choices=[s.value for s in Scenario],
                   help="simulate this scenario instead of the configured data source")
    p.add_argument("--params", type=_params, metavar="D,G1,G2,G3",
                   help="consistency thresholds delta,gamma1,gamma2,gamma3 (gamma3 may be 'off')")
    p.add_argument("--workers", type=int, help="parallel worker processes for repetitions")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="expert-consistency",
                     description="Expert-consistency label amalgamation: simulate, fit, evaluate.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", help="write a synthetic scenario bundle and manifest")
    _common(p)
    p.add_argument("--n", type=int, help="number of cases")
    p.add_argument("--m", type=int, help="number of covariates")
    p.add_argument("--k", type=int, help="number of experts")
    p.add_argument("--selective", action="store_true", help="censor outcomes where the decision is 0")
    p.add_argument("--error-range", type=_pair, metavar="A,B", help="per-expert error range for CIHe")

    helps = {
        "fit": "fit the outcome and decision models on the reference split",
        "influence": "per-expert influence tables for the reference split",
        "consistency": "consistency-set membership and hold-out agreement checks",
        "amalgamate": "amalgamated labels and the models trained on them",
        "evaluate": "repeated train/test evaluation report",
    }
    for name in STAGES:
        _common(sub.add_parser(name, help=helps[name]))

    _common(sub.add_parser("pipeline", help="all stages plus the report (and per-value sweep reports)"))

    p = sub.add_parser("sweep", help="amalgamated fraction across values of one threshold")
    _common(p)
    p.add_argument("--param", choices=SWEEP_PARAMS, help="threshold to vary (default: config [sweep])")
    p.add_argument("--values", help="comma-separated values (default: config [sweep])")

    _common(sub.add_parser("print-config", help="print the full configuration with all defaults"))
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = cfg.with_overrides(seed=args.seed, out=args.out, scenario=args.scenario, params=args.params)
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        cfg = replace(cfg, protocol=replace(cfg.protocol, workers=args.workers))
    if args.command == "simulate":
        spec_kw = {}
        for key in ("n", "m", "k"):
            if getattr(args, key) is not None:
                spec_kw[key] = getattr(args, key)
        if args.selective:
            spec_kw["selective"] = True
        if args.error_range is not None:
            spec_kw["error_range"] = args.error_range
        if spec_kw:
            try:
                spec = replace(cfg.data.scenario, **spec_kw)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            cfg = replace(cfg, data=replace(cfg.data, scenario=spec))
    return cfg


def _run(args, out) -> int:
    cfg = resolve_config(args)
    cmd = args.command
    if cmd == "print-config":
        out.write(cfg.to_ini())
        return EXIT_OK
    if cmd == "simulate":
        data_path, manifest = run_simulate(cfg)
        out.write(f"{data_path}\n{manifest}\n")
        return EXIT_OK
    if cmd in STAGES:
        ws = run_stage(cfg, cmd)
        if cmd == "evaluate":
            out.write((ws.out / "report" / "report.txt").read_text())
        for path in ws.written:
            out.write(f"wrote {path}\n")
        return EXIT_OK
    if cmd == "pipeline":
        ws = run_pipeline(cfg)
        out.write((ws.out / "report" / "report.txt").read_text())
        out.write(f"manifest {ws.out / 'manifest.json'}\n")
        return EXIT_OK
    if cmd == "sweep":
        param = args.param or cfg.sweep_param
        if not param:
            raise ConfigError("give --param or a [sweep] param in the config")
        if args.values is not None:
            values = parse_sweep_values(param, args.values)
        elif param == cfg.sweep_param:
            values = cfg.sweep_values
        else:
            raise ConfigError("give --values for this parameter")
        result = run_sweep(cfg, param, values)
        out.write(format_sweep(cfg, result))
        return EXIT_OK
    raise ConfigError(f"unknown command {cmd!r}")


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _run(args, out)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
