"""End-to-end orchestration: generation, MI analysis and coverage experiments."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed

from napsumq._random import derive_seed
from napsumq.estimators import NapsuMQ, PGMGenerator
from napsumq.inference import NUTSConfig, OptimizationError
from napsumq.inference.posterior import NotPositiveDefiniteError
from napsumq.med import FitError
from napsumq.mi_analysis import (
    CombineError,
    CombinedEstimate,
    combine,
    drop_outlier_variances,
    interval,
    logistic_fit,
    naive_interval,
)
from napsumq.privacy import CalibrationError
from napsumq.schema import (
    Dataset,
    Schema,
    StandInSpec,
    load_csv,
    sample_stand_in_data,
    sample_toy_data,
    toy_schema,
)

logger = logging.getLogger(__name__)

MODES = ("na_mi", "minus_na", "minus_mi", "minus_both", "pgm_mle_baseline")
NUMERIC_ERRORS = (
    OptimizationError,
    FitError,
    CombineError,
    CalibrationError,
    NotPositiveDefiniteError,
    np.linalg.LinAlgError,
    FloatingPointError,
)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class DownstreamSpec:
    dependent: str
    independents: list[str]
    reg_lambda: float = 0.0
    variance_method: str = "observed_information"
    n_bootstrap: int = 50
    drop_threshold: float | None = None
    levels: tuple[float, ...] = (0.95,)

    @classmethod
    def from_dict(cls, d: dict) -> "DownstreamSpec":
        d = dict(d)
        if "levels" in d:
            d["levels"] = tuple(d["levels"])
        return cls(**d)


@dataclass
class PipelineConfig:
    """Everything one generation run needs. Loadable from JSON."""

    queries: list[list[str]]
    epsilon: float
    delta: float
    m: int = 100
    n_syn: int | None = None
    schema_path: str | None = None
    data_path: str | None = None
    missing_policy: str = "drop_rows"
    toy_n: int | None = None
    inference: str = "laplace"
    nuts: dict = field(default_factory=dict)
    prior_std: float = 10.0
    canonical: bool = True
    backend: str = "auto"
    seed: int = 0
    downstream: dict | None = None
    output_dir: str | None = None

    def validate(self) -> None:
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ConfigError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.downstream is not None and self.m < 2:
            raise ConfigError("multiple-imputation analysis needs m >= 2")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if self.n_syn is not None and self.n_syn < 1:
            raise ConfigError("n_syn must be >= 1")
        if self.inference not in ("laplace", "nuts"):
            raise ConfigError(f"unknown inference {self.inference!r}")
        if self.toy_n is None and (self.data_path is None or self.schema_path is None):
            raise ConfigError("give either toy_n or both data_path and schema_path")
        if not self.queries:
            raise ConfigError("at least one query scope is required")
        if self.downstream is not None:
            try:
                DownstreamSpec.from_dict(self.downstream)
            except TypeError as exc:
                raise ConfigError(f"bad downstream spec: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from exc

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class NapsuRun:
    generator: NapsuMQ
    datasets: list[Dataset]
    schema: Schema
    n: int


def _load_input(config: PipelineConfig) -> Dataset:
    if config.toy_n is not None:
        return sample_toy_data(config.toy_n, derive_seed(config.seed, 100))
    schema = Schema.from_json(config.schema_path)
    return load_csv(config.data_path, schema, config.missing_policy)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (ConfigError, StageError):
        raise
    except Exception as exc:  # tagged and re-raised
        raise StageError(name, exc) from exc


def run_napsu_mq(config: PipelineConfig, data: Dataset | None = None) -> NapsuRun:
    """Release noisy marginals, infer the posterior and draw ``m`` datasets.

    The real data is read only while computing the released counts.
    Outputs go to ``config.output_dir`` when set.
    """
    config.validate()
    if data is None:
        data = _stage("load", _load_input, config)
    n_syn = config.n_syn or data.n
    gen = NapsuMQ(
        queries=config.queries,
        epsilon=config.epsilon,
        delta=config.delta,
        inference=config.inference,
        prior_std=config.prior_std,
        nuts_config=NUTSConfig(**config.nuts) if config.nuts else None,
        canonical=config.canonical,
        backend=config.backend,
        random_state=config.seed,
    )
    _stage("release+inference", gen.fit, data)
    n = data.n
    schema = data.schema
    del data
    datasets = _stage("synthesis", gen.generate, config.m, n_syn)
    run = NapsuRun(gen, datasets, schema, n)
    if config.output_dir:
        _stage("persist", _persist_run, run, config)
    return run


def _persist_run(run: NapsuRun, config: PipelineConfig) -> None:
    out = Path(config.output_dir)
    (out / "synthetic").mkdir(parents=True, exist_ok=True)
    gen = run.generator
    (out / "config.json").write_text(json.dumps(config.to_json(), indent=2, sort_keys=True))
    (out / "schema.json").write_text(json.dumps(run.schema.to_json(), indent=2))
    gen.release_.save(out / "release.json")
    meta = gen.posterior_json()
    meta["n"] = run.n
    (out / "posterior.json").write_text(json.dumps(meta, indent=2))
    if gen.samples_ is not None:
        gen.samples_.to_csv(out / "posterior_samples.csv")
        diag = {k: gen.samples_.diagnostics[k] for k in ("r_hat", "ess", "divergences")}
        (out / "diagnostics.json").write_text(json.dumps(diag, indent=2))
    for i, ds in enumerate(run.datasets):
        ds.to_csv(out / "synthetic" / f"synthetic_{i:03d}.csv")


def run_mi_analysis(
    datasets: Sequence[Dataset],
    downstream: DownstreamSpec,
    n: int,
    rng_seed=None,
) -> tuple[CombinedEstimate, list[dict]]:
    """Fit the downstream model on each dataset and combine with Rubin's rules."""
    if len(datasets) < 2:
        raise ConfigError("multiple-imputation analysis needs at least 2 datasets")
    results = [
        logistic_fit(
            ds,
            downstream.dependent,
            downstream.independents,
            downstream.reg_lambda,
            downstream.variance_method,
            downstream.n_bootstrap,
            derive_seed(rng_seed, i),
        )
        for i, ds in enumerate(datasets)
    ]
    stacked = results
    if downstream.drop_threshold is not None:
        stacked = drop_outlier_variances(results, downstream.drop_threshold)
    ce = combine(stacked, n_syn=datasets[0].n, n=n)
    return ce, ce.to_json(downstream.levels)


# -- coverage experiments ----------------------------------------------------


@dataclass(frozen=True)
class ExperimentSetting:
    """A data-generating process with known downstream coefficients."""

    name: str
    schema: Schema
    n: int
    scopes: tuple[tuple[str, ...], ...]
    dependent: str
    independents: tuple[str, ...]
    true_coef: dict
    m: int = 100
    inference: str = "laplace"
    nuts: NUTSConfig | None = None

    def sample(self, seed) -> Dataset:
        if self.name == "toy":
            return sample_toy_data(self.n, seed)
        return sample_stand_in_data(self.n, seed)

    @property
    def delta(self) -> float:
        return float(self.n) ** -2


def toy_setting(n: int = 2000, m: int = 100) -> ExperimentSetting:
    return ExperimentSetting(
        name="toy",
        schema=toy_schema(),
        n=n,
        scopes=(("x1", "x2", "x3"),),
        dependent="x3",
        independents=("x1", "x2"),
        true_coef={"intercept": 0.0, "x1": 1.0, "x2": 0.0},
        m=m,
    )


def stand_in_setting(
    n: int = 20000, m: int = 100, nuts: NUTSConfig | None = None
) -> ExperimentSetting:
    spec = StandInSpec()
    return ExperimentSetting(
        name="stand_in",
        schema=spec.schema,
        n=n,
        scopes=spec.scopes,
        dependent="C",
        independents=("B", "E"),
        true_coef=dict(zip(("intercept", "B", "E"), spec.coef)),
        m=m,
        inference="nuts",
        nuts=nuts or NUTSConfig(num_chains=2, num_warmup=400, num_samples=1000),
    )


DEFAULT_LEVELS = (0.5, 0.8, 0.9, 0.95, 0.99)


@dataclass
class ExperimentReport:
    records: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    runtimes: list[dict] = field(default_factory=list)
    setting: str = "toy"

    def _select(self, mode=None, epsilon=None, coefficient=None, level=None):
        out = self.records
        if mode is not None:
            out = [r for r in out if r["mode"] == mode]
        if epsilon is not None:
            out = [r for r in out if r["epsilon"] == epsilon]
        if coefficient is not None:
            out = [r for r in out if r["coefficient"] == coefficient]
        if level is not None:
            out = [r for r in out if r["level"] == level]
        return out

    def coverage(self, mode, epsilon, coefficient, level=0.95) -> float:
        recs = self._select(mode, epsilon, coefficient, level)
        if not recs:
            return float("nan")
        return float(np.mean([r["contains"] for r in recs]))

    def median_width(self, mode, epsilon, coefficient, level=0.95) -> float:
        recs = self._select(mode, epsilon, coefficient, level)
        return float(np.median([r["width"] for r in recs])) if recs else float("nan")

    def median_width_ratio(self, mode, epsilon, coefficient, level=0.95) -> float:
        recs = self._select(mode, epsilon, coefficient, level)
        return float(np.median([r["width_ratio"] for r in recs])) if recs else float("nan")

    @property
    def modes(self):
        return sorted({r["mode"] for r in self.records})

    @property
    def epsilons(self):
        return sorted({r["epsilon"] for r in self.records})

    @property
    def coefficients(self):
        seen = []
        for r in self.records:
            if r["coefficient"] not in seen:
                seen.append(r["coefficient"])
        return seen

    @property
    def levels(self):
        return sorted({r["level"] for r in self.records})

    def merge(self, other: "ExperimentReport") -> "ExperimentReport":
        return ExperimentReport(
            self.records + other.records,
            self.failures + other.failures,
            self.runtimes + other.runtimes,
            self.setting,
        )

    def summary(self) -> list[dict]:
        rows = []
        for mode in self.modes:
            for eps in self.epsilons:
                for coef in self.coefficients:
                    for level in self.levels:
                        recs = self._select(mode, eps, coef, level)
                        if not recs:
                            continue
                        rows.append(
                            {
                                "mode": mode,
                                "epsilon": eps,
                                "coefficient": coef,
                                "level": level,
                                "coverage": self.coverage(mode, eps, coef, level),
                                "median_width": self.median_width(mode, eps, coef, level),
                                "median_width_ratio": self.median_width_ratio(
                                    mode, eps, coef, level
                                ),
                                "n_repeats": len(recs),
                            }
                        )
        return rows

    def to_json(self) -> dict:
        return {
            "setting": self.setting,
            "summary": self.summary(),
            "records": self.records,
            "failures": self.failures,
            "runtimes": self.runtimes,
        }


def _make_generator(mode, setting: ExperimentSetting, epsilon, seed):
    common = dict(
        queries=[list(s) for s in setting.scopes],
        epsilon=epsilon,
        delta=setting.delta,
        random_state=seed,
    )
    if mode in ("na_mi", "minus_mi"):
        return NapsuMQ(inference=setting.inference, nuts_config=setting.nuts, **common)
    if mode in ("minus_na", "minus_both"):
        return PGMGenerator(canonical=True, **common)
    if mode == "pgm_mle_baseline":
        return PGMGenerator(canonical=False, **common)
    raise ConfigError(f"unknown mode {mode!r}")


def _one_repeat(setting: ExperimentSetting, mode: str, epsilon: float, repeat: int, seed, levels):
    base = derive_seed(seed, repeat)
    t0 = time.perf_counter()
    stage = "data"
    try:
        data = setting.sample(derive_seed(base, 0))
        real = logistic_fit(data, setting.dependent, setting.independents)
        stage = "release+inference"
        gen = _make_generator(mode, setting, epsilon, derive_seed(base, 1))
        gen.fit(data)
        del data
        stage = "synthesis"
        multiple = mode in ("na_mi", "minus_na")
        m = setting.m if multiple else 1
        datasets = gen.generate(m, setting.n, derive_seed(base, 2))
        stage = "analysis"
        results = [
            logistic_fit(ds, setting.dependent, setting.independents)
            for ds in datasets
        ]
        names = results[0].names
        intervals = {}
        dropped = np.zeros(len(names))
        if multiple:
            ce = combine(results, n_syn=setting.n, n=setting.n)
            dropped = ce.dropped_fraction
            for level in levels:
                intervals[level] = interval(ce, level)
        else:
            for level in levels:
                intervals[level] = naive_interval(results[0], level)
    except NUMERIC_ERRORS as exc:
        return [], [
            {
                "mode": mode,
                "epsilon": epsilon,
                "repeat": repeat,
                "stage": stage,
                "error": f"{type(exc).__name__}: {exc}",
            }
        ], None
    records = []
    for level in levels:
        lo, hi = intervals[level]
        real_lo, real_hi = naive_interval(real, level)
        for j, name in enumerate(names):
            truth = setting.true_coef.get(name, float("nan"))
            width = float(hi[j] - lo[j])
            real_width = float(real_hi[j] - real_lo[j])
            records.append(
                {
                    "mode": mode,
                    "epsilon": epsilon,
                    "repeat": repeat,
                    "coefficient": name,
                    "true_value": truth,
                    "level": level,
                    "lo": float(lo[j]),
                    "hi": float(hi[j]),
                    "contains": bool(lo[j] <= truth <= hi[j]),
                    "width": width,
                    "width_ratio": width / real_width if real_width > 0 else float("inf"),
                    "dropped_fraction": float(dropped[j]),
                }
            )
    runtime = {
        "mode": mode,
        "epsilon": epsilon,
        "repeat": repeat,
        "seconds": time.perf_counter() - t0,
    }
    return records, [], runtime


def run_coverage_experiment(
    repeats: int,
    epsilons: Sequence[float],
    mode: str = "na_mi",
    seed=0,
    setting: ExperimentSetting | None = None,
    levels: Sequence[float] = DEFAULT_LEVELS,
    n_jobs: int = 1,
) -> ExperimentReport:
    """Repeat the whole pipeline on fresh data and record interval coverage.

    Repeat ``i`` draws every random stream from ``derive_seed(seed, i)``, so
    all modes and epsilons see the same real datasets, and adding repeats
    leaves earlier ones unchanged.
    """
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    if not epsilons:
        raise ConfigError("at least one epsilon is required")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    setting = setting or toy_setting()
    tasks = [(eps, r) for eps in epsilons for r in range(repeats)]
    outputs = Parallel(n_jobs=n_jobs)(
        delayed(_one_repeat)(setting, mode, float(eps), r, seed, tuple(levels))
        for eps, r in tasks
    )
    report = ExperimentReport(setting=setting.name)
    for recs, fails, runtime in outputs:
        report.records.extend(recs)
        report.failures.extend(fails)
        if runtime:
            report.runtimes.append(runtime)
    if report.failures:
        logger.warning("%d repeats failed and were excluded", len(report.failures))
    return report


def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def emit_plot_data(report: ExperimentReport, path, strip_epsilon: float | None = None) -> list[Path]:
    """Write coverage-vs-level, width-ratio-vs-epsilon and interval-strip CSVs."""
    if not report.records:
        raise ValueError("report has no records")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    summary = report.summary()
    files = [
        out / "coverage_vs_level.csv",
        out / "width_ratio_vs_epsilon.csv",
    ]
    _write_csv(
        files[0],
        ["mode", "epsilon", "coefficient", "level", "coverage", "n_repeats"],
        [
            (s["mode"], s["epsilon"], s["coefficient"], s["level"], s["coverage"], s["n_repeats"])
            for s in summary
        ],
    )
    _write_csv(
        files[1],
        ["mode", "epsilon", "coefficient", "median_width", "median_width_ratio"],
        [
            (s["mode"], s["epsilon"], s["coefficient"], s["median_width"], s["median_width_ratio"])
            for s in summary
            if s["level"] == 0.95
        ],
    )
    eps = strip_epsilon if strip_epsilon is not None else report.epsilons[0]
    strip = out / f"interval_strips_eps{eps:g}.csv"
    files.append(strip)
    _write_csv(
        strip,
        ["mode", "repeat", "coefficient", "true_value", "lo", "hi", "contains"],
        [
            (r["mode"], r["repeat"], r["coefficient"], r["true_value"], r["lo"], r["hi"], r["contains"])
            for r in report.records
            if r["epsilon"] == eps and r["level"] == 0.95
        ],
    )
    return files
