"""Command-line entry point: ``napsumq {generate,analyze,experiment,calibrate}``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

from napsumq.pipeline import (
    MODES,
    NUMERIC_ERRORS,
    ConfigError,
    DownstreamSpec,
    PipelineConfig,
    StageError,
    emit_plot_data,
    run_coverage_experiment,
    run_mi_analysis,
    run_napsu_mq,
    stand_in_setting,
    toy_setting,
)
from napsumq.privacy import NoisyRelease, PrivacyBudget, calibrate_sigma, delta_of
from napsumq.queries import QueryError, canonicalize, full_marginal_sets, sensitivity
from napsumq.schema import Schema, SchemaError, load_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

def _json_arg(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"not valid JSON: {exc}") from exc


def _scopes_arg(text: str):
    """``x1,x2;x2,x3`` or a JSON list of lists."""
    text = text.strip()
    if text.startswith("["):
        return _json_arg(text)
    return [[v.strip() for v in part.split(",") if v.strip()] for part in text.split(";")]


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    return raw


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--queries", type=_scopes_arg, help="scopes, e.g. 'x1,x2,x3' or JSON")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--m", type=int, help="number of synthetic datasets")
    p.add_argument("--n-syn", type=int, help="rows per synthetic dataset")
    p.add_argument("--schema-path")
    p.add_argument("--data-path")
    p.add_argument("--missing-policy", choices=("drop_rows", "error"))
    p.add_argument("--toy-n", type=int, help="use the built-in toy generator with n rows")
    p.add_argument("--inference", choices=("laplace", "nuts"))
    p.add_argument("--nuts", type=_json_arg, help="NUTS settings as JSON")
    p.add_argument("--prior-std", type=float)
    p.add_argument("--canonical", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--backend", choices=("auto", "enumeration", "junction_tree"))
    p.add_argument("--seed", type=int)
    p.add_argument("--downstream", type=_json_arg, help="downstream analysis spec as JSON")
    p.add_argument("--output-dir")


def _pipeline_config(args) -> PipelineConfig:
    raw = _read_config(args.config)
    for f in fields(PipelineConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            raw[f.name] = value
    missing = [k for k in ("queries", "epsilon", "delta") if k not in raw]
    if missing:
        raise ConfigError(f"missing required settings: {missing}")
    try:
        config = PipelineConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from exc
    config.validate()
    return config


def cmd_generate(args) -> dict:
    config = _pipeline_config(args)
    run = run_napsu_mq(config)
    gen = run.generator
    out = {
        "n": run.n,
        "m": len(run.datasets),
        "n_syn": run.datasets[0].n,
        "sigma_dp": gen.release_.sigma_dp,
        "sensitivity": gen.release_.sensitivity,
        "n_queries": len(gen.queries_),
        "output_dir": config.output_dir,
    }
    if gen.samples_ is not None:
        out["nuts_flagged"] = bool(gen.samples_.flagged)
    return out


def cmd_analyze(args) -> dict:
    raw = _read_config(args.config)
    run_dir = Path(args.run_dir or raw.get("output_dir") or ".")
    downstream = dict(raw.get("downstream") or {})
    for key in ("dependent", "reg_lambda", "variance_method", "n_bootstrap", "drop_threshold"):
        value = getattr(args, key)
        if value is not None:
            downstream[key] = value
    if args.independents is not None:
        downstream["independents"] = args.independents
    if args.levels is not None:
        downstream["levels"] = args.levels
    try:
        spec = DownstreamSpec.from_dict(downstream)
    except TypeError as exc:
        raise ConfigError(f"bad downstream spec: {exc}") from exc

    schema_path = args.schema_path or raw.get("schema_path") or run_dir / "schema.json"
    try:
        schema = Schema.from_json(schema_path)
    except OSError as exc:
        raise ConfigError(f"cannot read schema: {exc}") from exc
    syn_dir = Path(args.synthetic_dir) if args.synthetic_dir else run_dir / "synthetic"
    paths = sorted(syn_dir.glob("*.csv"))
    if len(paths) < 2:
        raise ConfigError(f"need at least 2 synthetic CSV files in {syn_dir}")
    datasets = [load_csv(p, schema) for p in paths]

    n = args.n
    if n is None:
        try:
            n = NoisyRelease.load(run_dir / "release.json").n
        except OSError as exc:
            raise ConfigError("pass --n or point --run-dir at a generate output") from exc
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    ce, rows = run_mi_analysis(datasets, spec, int(n), seed)
    result = {
        "m": len(datasets),
        "n": int(ce.n),
        "n_syn": int(ce.n_syn),
        "coefficients": rows,
    }
    if args.output:
        Path(args.output).write_text(json.dumps(result, indent=2))
    return result


def cmd_experiment(args) -> dict:
    raw = _read_config(args.config)

    def get(key, default):
        value = getattr(args, key)
        return value if value is not None else raw.get(key, default)

    setting_name = get("setting", "toy")
    mode = get("mode", "na_mi")
    epsilons = get("epsilons", [0.1, 0.5, 1.0])
    repeats = int(get("repeats", 100))
    seed = get("seed", 0)
    levels = tuple(get("levels", (0.5, 0.8, 0.9, 0.95, 0.99)))
    n = get("n", None)
    m = int(get("m", 100))
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if setting_name == "toy":
        setting = toy_setting(n=int(n or 2000), m=m)
    elif setting_name == "stand_in":
        setting = stand_in_setting(n=int(n or 20000), m=m)
    else:
        raise ConfigError(f"unknown setting {setting_name!r}")
    report = run_coverage_experiment(
        repeats, epsilons, mode, seed, setting, levels, n_jobs=int(get("n_jobs", 1))
    )
    out_dir = get("output_dir", None)
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "report.json").write_text(json.dumps(report.to_json(), indent=2))
        if report.records:
            emit_plot_data(report, out_dir)
    return {"summary": report.summary(), "failures": len(report.failures)}


def cmd_calibrate(args) -> dict:
    raw = _read_config(args.config)
    epsilon = args.epsilon if args.epsilon is not None else raw.get("epsilon")
    delta = args.delta if args.delta is not None else raw.get("delta")
    if epsilon is None or delta is None:
        raise ConfigError("epsilon and delta are required")
    try:
        budget = PrivacyBudget(float(epsilon), float(delta))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    sens = args.sensitivity
    if sens is None:
        scopes = args.queries or raw.get("queries")
        schema_path = args.schema_path or raw.get("schema_path")
        if not scopes or not schema_path:
            raise ConfigError("give --sensitivity, or --queries with --schema-path")
        qc = full_marginal_sets(Schema.from_json(schema_path), scopes)
        if raw.get("canonical", True) if args.canonical is None else args.canonical:
            qc = canonicalize(qc)
        sens = sensitivity(qc)
    if not (sens > 0 and math.isfinite(sens)):
        raise ConfigError("sensitivity must be positive and finite")
    sigma = calibrate_sigma(budget, sens)
    return {
        "epsilon": budget.epsilon,
        "delta": budget.delta,
        "sensitivity": sens,
        "sigma": sigma,
        "delta_achieved": delta_of(budget.epsilon, sigma, sens),
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="napsumq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="release noisy marginals and draw synthetic datasets")
    g.add_argument("--config", help="JSON config file; flags override its entries")
    _add_pipeline_flags(g)
    g.set_defaults(func=cmd_generate)

    a = sub.add_parser("analyze", help="logistic regression on each dataset + Rubin's rules")
    a.add_argument("--config")
    a.add_argument("--run-dir", help="output directory of a previous generate run")
    a.add_argument("--synthetic-dir")
    a.add_argument("--schema-path")
    a.add_argument("--n", type=int, help="size of the original dataset")
    a.add_argument("--dependent")
    a.add_argument("--independents", type=lambda s: [v.strip() for v in s.split(",")])
    a.add_argument("--reg-lambda", dest="reg_lambda", type=float)
    a.add_argument("--variance-method", choices=("observed_information", "bootstrap"))
    a.add_argument("--n-bootstrap", type=int)
    a.add_argument("--drop-threshold", type=float)
    a.add_argument("--levels", type=_floats)
    a.add_argument("--seed", type=int)
    a.add_argument("--output", help="write the combined estimate JSON here")
    a.set_defaults(func=cmd_analyze)

    e = sub.add_parser("experiment", help="repeated coverage experiment")
    e.add_argument("--config")
    e.add_argument("--setting", choices=("toy", "stand_in"))
    e.add_argument("--mode", choices=MODES)
    e.add_argument("--epsilons", type=_floats)
    e.add_argument("--repeats", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--levels", type=_floats)
    e.add_argument("--n", type=int)
    e.add_argument("--m", type=int)
    e.add_argument("--n-jobs", type=int)
    e.add_argument("--output-dir")
    e.set_defaults(func=cmd_experiment)

    c = sub.add_parser("calibrate", help="Gaussian-mechanism noise scale for a budget")
    c.add_argument("--config")
    c.add_argument("--epsilon", type=float)
    c.add_argument("--delta", type=float)
    c.add_argument("--sensitivity", type=float)
    c.add_argument("--queries", type=_scopes_arg)
    c.add_argument("--schema-path")
    c.add_argument("--canonical", action=argparse.BooleanOptionalAction, default=None)
    c.set_defaults(func=cmd_calibrate)
    return parser


def _is_numeric(exc: BaseException) -> bool:
    if isinstance(exc, StageError):
        exc = exc.cause
    return isinstance(exc, NUMERIC_ERRORS)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        result = args.func(args)
    except Exception as exc:
        if _is_numeric(exc):
            print(f"numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(exc, (ConfigError, SchemaError, QueryError, StageError, ValueError, OSError)):
            print(f"configuration error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        raise
    print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
