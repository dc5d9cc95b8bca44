"""Command-line entry point: ``ipdprior {weights,fit,simulate}``.

Configuration is a flat ``key = value`` file with dotted section keys;
command-line flags override file values. Every output file starts with
``#`` header lines carrying the resolved configuration, its SHA-256 and
the seed.

Exit codes: 0 success, 2 parse error, 3 validation failure, 4 numerical
failure, 5 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .data_model import CovariateSchema, StudyCollection, SubjectRecord, validate_collection
from .models import (
    ConfigurationError,
    DomainError,
    Hyperprior,
    MapNormalModel,
    NonFiniteKernelError,
    NormalLinearModel,
    PriorConstruction,
    PriorKind,
    WeibullModel,
    WeightingSettings,
    posterior_mode,
    resolve_weights,
)
from .sampler import InitializationError, PosteriorDraws, SamplerConfig, diagnostics, sample
from .simulation import DEFAULT_SIZES, METHODS, SCENARIOS, AnalysisSettings, GridSpec, MetricsRow, run_grid
from .weighting import NumericalRankError, surviving_fractions

log = logging.getLogger("ipdprior")

EXIT_OK, EXIT_PARSE, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_CONFIG = 0, 2, 3, 4, 5

DEFAULTS: dict[str, str] = {
    "data.path": "",
    "data.current_study": "",
    "schema.categorical": "",
    "schema.include_outcome": "true",
    "schema.include_event": "true",
    "weights.route": "mahalanobis",
    "weights.quantile": "0.05",
    "weights.ridge": "",
    "weights.min_category_count": "5",
    "fit.model": "normal",
    "fit.method": "tiw",
    "fit.draws": "false",
    "fit.time_points": "50",
    "prior.tau": "half-normal",
    "prior.pp_power": "",
    "sampler.chains": "4",
    "sampler.warmup": "2000",
    "sampler.iterations": "5000",
    "simulate.scenarios": ",".join(SCENARIOS),
    "simulate.methods": ",".join(METHODS),
    "simulate.sizes": ",".join(str(n) for n in DEFAULT_SIZES),
    "simulate.reps": "200",
    "simulate.mixture_fraction": "0.5",
    "simulate.n_historical": "100",
    "simulate.warmup": "2000",
    "simulate.iterations": "5000",
    "simulate.workers": "1",
    "seed": "0",
    "strict": "false",
}
# keys that say where things go rather than what is computed
_NOT_ECHOED = {"out"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(EXIT_CONFIG, f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise CliError(EXIT_CONFIG, f"{source}:{lineno}: empty key")
        if key in out:
            raise CliError(EXIT_CONFIG, f"{source}:{lineno}: duplicate key {key!r}")
        if key not in DEFAULTS and not key.startswith("schema.levels.") and key != "out":
            raise CliError(EXIT_CONFIG, f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, str]

    def get(self, key: str) -> str:
        return self.values.get(key, DEFAULTS.get(key, ""))

    def text(self, key: str) -> str:
        return self.get(key).strip()

    def integer(self, key: str, minimum: int | None = None) -> int:
        try:
            v = int(self.text(key))
        except ValueError:
            raise CliError(EXIT_CONFIG, f"{key} must be an integer, got {self.get(key)!r}") from None
        if minimum is not None and v < minimum:
            raise CliError(EXIT_CONFIG, f"{key} must be >= {minimum}, got {v}")
        return v

    def number(self, key: str, optional: bool = False) -> float | None:
        raw = self.text(key)
        if optional and not raw:
            return None
        try:
            v = float(raw)
        except ValueError:
            raise CliError(EXIT_CONFIG, f"{key} must be a number, got {raw!r}") from None
        if not math.isfinite(v):
            raise CliError(EXIT_CONFIG, f"{key} must be finite")
        return v

    def flag(self, key: str) -> bool:
        raw = self.text(key).lower()
        if raw in ("true", "yes", "1", "on"):
            return True
        if raw in ("false", "no", "0", "off", ""):
            return False
        raise CliError(EXIT_CONFIG, f"{key} must be true or false, got {raw!r}")

    def items(self, key: str) -> list[str]:
        return [p.strip() for p in self.get(key).split(",") if p.strip()]

    def echoed(self, command: str) -> list[tuple[str, str]]:
        keys = {k for k in DEFAULTS} | {k for k in self.values}
        section = {"weights": ("data.", "schema.", "weights."), "fit": ("data.", "schema.", "weights.", "fit.", "prior.", "sampler."),
                   "simulate": ("simulate.", "prior.", "weights.quantile")}[command]
        picked = [k for k in keys if k.startswith(section) or k in ("seed", "strict")]
        return [(k, self.get(k)) for k in sorted(picked) if k not in _NOT_ECHOED]

    def digest(self, command: str) -> str:
        body = "".join(f"{k}={v}\n" for k, v in self.echoed(command))
        return hashlib.sha256(f"{command}\n{body}".encode()).hexdigest()


def header_lines(config: RunConfig, command: str) -> list[str]:
    lines = [
        f"# ipdprior {__version__} {command}",
        f"# config_sha256: {config.digest(command)}",
        f"# seed: {config.text('seed')}",
    ]
    lines += [f"# {k} = {v}" for k, v in config.echoed(command)]
    return lines


def fmt(value: object) -> str:
    """Shortest round-trip text for floats; plain ``str`` otherwise."""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_table(path: Path, header: Sequence[str], columns: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in header:
            fh.write(line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


# ---------------------------------------------------------------------------
# Data ingestion
# ---------------------------------------------------------------------------


def schema_from_config(config: RunConfig, covariates: Sequence[str]) -> CovariateSchema:
    categorical = config.items("schema.categorical")
    for name in categorical:
        if name not in covariates:
            raise CliError(EXIT_CONFIG, f"categorical covariate {name!r} is not a data column")
    levels = {}
    for name in categorical:
        lv = config.items(f"schema.levels.{name}")
        if not lv:
            raise CliError(EXIT_CONFIG, f"declare levels with schema.levels.{name} = a,b,...")
        levels[name] = tuple(lv)
    try:
        return CovariateSchema(
            continuous_names=tuple(c for c in covariates if c not in categorical),
            categorical_names=tuple(categorical),
            categorical_levels=levels,
            include_outcome_in_similarity=config.flag("schema.include_outcome"),
            include_event_in_similarity=config.flag("schema.include_event"),
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


@dataclass(frozen=True)
class Dataset:
    collection: StudyCollection
    schema: CovariateSchema
    has_event: bool
    line_numbers: Mapping[tuple[str, int], int]


def ingest(path: str | Path, config: RunConfig, survival: bool = False) -> Dataset:
    """Parse and validate a comma-separated dataset; violations carry file line numbers."""
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_PARSE, f"data file not found: {p}")
    try:
        text = p.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CliError(EXIT_PARSE, f"cannot read {p}: {exc}") from None
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        raise CliError(EXIT_PARSE, f"{p}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        dup = sorted({h for h in header if header.count(h) > 1})
        raise CliError(EXIT_PARSE, f"{p}:1: duplicate header column(s) {dup}")
    for required in ("study_id", "arm", "outcome"):
        if required not in header:
            raise CliError(EXIT_PARSE, f"{p}:1: missing required column {required!r}")
    has_event = "event" in header
    covariates = [h for h in header if h not in ("study_id", "arm", "outcome", "event")]
    schema = schema_from_config(config, covariates)
    col = {h: i for i, h in enumerate(header)}

    def number(cell: str, lineno: int, name: str) -> float:
        try:
            return float(cell)
        except ValueError:
            raise CliError(EXIT_PARSE, f"{p}:{lineno}: column {name!r} is not numeric: {cell!r}") from None

    def integer(cell: str, lineno: int, name: str) -> int:
        v = number(cell, lineno, name)
        if not float(v).is_integer():
            raise CliError(EXIT_PARSE, f"{p}:{lineno}: column {name!r} must be an integer: {cell!r}")
        return int(v)

    by_study: dict[str, list[SubjectRecord]] = {}
    lines: dict[tuple[str, int], int] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise CliError(EXIT_PARSE, f"{p}:{lineno}: expected {len(header)} fields, got {len(row)}")
        cells = [c.strip() for c in row]
        sid = cells[col["study_id"]]
        rec = SubjectRecord(
            study_id=sid,
            arm=integer(cells[col["arm"]], lineno, "arm"),
            outcome=number(cells[col["outcome"]], lineno, "outcome"),
            event=integer(cells[col["event"]], lineno, "event") if has_event and cells[col["event"]] != "" else None,
            continuous=tuple(number(cells[col[c]], lineno, c) if cells[col[c]] != "" else math.nan for c in schema.continuous_names),
            categorical=tuple(cells[col[c]] for c in schema.categorical_names),
        )
        studies = by_study.setdefault(sid, [])
        lines[(sid, len(studies))] = lineno
        studies.append(rec)
    if not by_study:
        raise CliError(EXIT_PARSE, f"{p}: no data rows")
    current = config.text("data.current_study") or next(iter(by_study))
    if current not in by_study:
        raise CliError(EXIT_CONFIG, f"current study {current!r} not found in data")
    collection = StudyCollection(
        tuple(by_study[current]), {s: tuple(r) for s, r in by_study.items() if s != current}
    )
    violations = validate_collection(collection, schema, survival=survival)
    if violations:
        for v in violations:
            where = lines.get((v.study_id, v.index))
            loc = f"{p}:{where}" if where is not None else str(p)
            print(f"{loc}: {v}", file=sys.stderr)
        raise CliError(EXIT_VALIDATION, f"{len(violations)} validation violation(s)")
    return Dataset(collection, schema, has_event, lines)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _weighting_settings(config: RunConfig) -> WeightingSettings:
    route = config.text("weights.route")
    if route not in ("mahalanobis", "model", "predictive"):
        raise CliError(EXIT_CONFIG, f"weights.route must be mahalanobis, model or predictive, got {route!r}")
    q = config.number("weights.quantile")
    if not 0.0 < q < 1.0:
        raise CliError(EXIT_CONFIG, "weights.quantile must lie in (0, 1)")
    return WeightingSettings(
        route=route,
        quantile=q,
        ridge=config.number("weights.ridge", optional=True),
        min_category_count=config.integer("weights.min_category_count", 1),
    )


def _out_dir(config: RunConfig) -> Path:
    return Path(config.get("out") or ".")


def cmd_weights(config: RunConfig) -> list[Path]:
    from .models import compute_assignments

    data = ingest(_require_data(config), config)
    settings = _weighting_settings(config)
    try:
        assignments = compute_assignments(data.collection, data.schema, settings)
    except NumericalRankError as exc:
        raise CliError(EXIT_NUMERICAL, str(exc)) from None
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    header = header_lines(config, "weights")
    out = _out_dir(config)
    per_subject = write_table(
        out / "weights.csv",
        header,
        ["study_id", "row", "concurrent", "scored", "raw_score", "weight", "truncated_weight", "threshold"],
        (
            [a.study_id, a.index, a.concurrent, a.scored, a.raw_score, a.weight, a.truncated_weight, a.threshold]
            for a in assignments
        ),
    )
    fractions = surviving_fractions(assignments)
    counts: dict[str, list[float]] = {}
    for a in assignments:
        if a.scored:
            counts.setdefault(a.study_id, []).append(a.weight)
    summary = write_table(
        out / "weights_summary.csv",
        header,
        ["study_id", "role", "n_scored", "mean_weight", "surviving_fraction"],
        (
            [sid, "concurrent" if sid == data.collection.concurrent_id else "historical", len(w), float(np.mean(w)), fractions.get(sid, math.nan)]
            for sid, w in counts.items()
        ),
    )
    for sid, f in fractions.items():
        log.info("%s: surviving fraction %.3f", sid, f)
    return [per_subject, summary]


def _require_data(config: RunConfig) -> str:
    path = config.text("data.path")
    if not path:
        raise CliError(EXIT_CONFIG, "no data file given (--data or data.path)")
    return path


def _hyperprior(config: RunConfig) -> Hyperprior:
    tau = config.text("prior.tau")
    if tau not in ("half-normal", "half-cauchy"):
        raise CliError(EXIT_CONFIG, f"prior.tau must be half-normal or half-cauchy, got {tau!r}")
    return Hyperprior(tau_prior=tau)


def _sampler_config(config: RunConfig) -> SamplerConfig:
    return SamplerConfig(
        chains=config.integer("sampler.chains", 1),
        warmup=config.integer("sampler.warmup", 0),
        iterations=config.integer("sampler.iterations", 1),
        seed=config.integer("seed", 0),
    )


def _quantiles(x: np.ndarray) -> tuple[float, float]:
    lo, hi = np.quantile(x, [0.025, 0.975])
    return float(lo), float(hi)


def cmd_fit(config: RunConfig) -> list[Path]:
    model_kind = config.text("fit.model")
    if model_kind not in ("normal", "weibull"):
        raise CliError(EXIT_CONFIG, f"fit.model must be normal or weibull, got {model_kind!r}")
    try:
        kind = PriorKind.parse(config.text("fit.method"))
    except ValueError:
        raise CliError(EXIT_CONFIG, f"unknown method {config.text('fit.method')!r}") from None
    survival = model_kind == "weibull"
    data = ingest(_require_data(config), config, survival=survival)
    if survival and not data.has_event:
        raise CliError(EXIT_PARSE, "the Weibull model needs an 'event' column")
    hp = _hyperprior(config)
    pp = config.number("prior.pp_power", optional=True)
    prior = PriorConstruction(kind, pp_power=pp, hyperprior=hp)
    scfg = _sampler_config(config)
    try:
        powers = resolve_weights(
            prior, data.collection, data.schema, _weighting_settings(config), model=model_kind
        )
        if model_kind == "normal":
            model = (
                MapNormalModel(data.collection, data.schema, hp)
                if powers.hierarchical
                else NormalLinearModel(data.collection, powers.historical, data.schema, hp)
            )
            start = model.initial_point() if powers.hierarchical else model.mode()
        else:
            model = WeibullModel(data.collection, powers.historical, data.schema, hp, hierarchical=powers.hierarchical)
            start = model.initial_point()
        mode = posterior_mode(model, start)
        draws = sample(model, mode.point, scfg, step_scale=mode.proposal)
    except ConfigurationError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    except (NonFiniteKernelError, InitializationError, NumericalRankError, DomainError, np.linalg.LinAlgError) as exc:
        raise CliError(EXIT_NUMERICAL, f"{type(exc).__name__}: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None

    report = diagnostics(draws)
    header = header_lines(config, "fit")
    out = _out_dir(config)
    summary = draws.summary()
    paths = [
        write_table(
            out / "summary.csv",
            header,
            ["parameter", "mean", "sd", "q2.5", "q97.5", "rhat", "ess"],
            ([n, s.mean, s.sd, s.q025, s.q975, s.rhat, s.ess] for n, s in summary.items()),
        )
    ]
    if survival and "theta" in draws.names:
        theta = draws["theta"]
        lo, hi = _quantiles(theta)
        hr = np.exp(theta)
        paths.append(
            write_table(
                out / "hazard_ratio.csv",
                header,
                ["quantity", "mean", "median", "q2.5", "q97.5"],
                [["hazard_ratio", float(hr.mean()), float(math.exp(np.median(theta))), math.exp(lo), math.exp(hi)]],
            )
        )
        point = np.array([summary[n].mean for n in draws.names])
        t_max = max(r.outcome for r in data.collection.concurrent)
        grid = np.linspace(0.0, t_max, config.integer("fit.time_points", 2))
        rows = []
        for arm in (0, 1):
            surv = model.survival(grid, point, z=arm)
            rows += [[arm, float(t), float(s)] for t, s in zip(grid, surv)]
        paths.append(write_table(out / "survival_curves.csv", header, ["arm", "time", "survival"], rows))
    if config.flag("fit.draws"):
        paths.append(_write_draws(out / "draws.csv", header, draws))
    for w in draws.warnings:
        log.warning(w)
    if not report.ok:
        msg = f"diagnostics flagged {list(report.flagged)}"
        if config.flag("strict"):
            raise CliError(EXIT_NUMERICAL, msg)
        log.warning(msg)
    return paths


def _write_draws(path: Path, header: list[str], draws: PosteriorDraws) -> Path:
    C, S, _ = draws.draws.shape
    rows = ([c, i, *draws.draws[c, i]] for c in range(C) for i in range(S))
    return write_table(path, header, ["chain", "iteration", *draws.names], rows)


_METRIC_COLUMNS = ("power", "rmse", "bias", "ci_width")


def cmd_simulate(config: RunConfig) -> list[Path]:
    scenarios = config.items("simulate.scenarios")
    for s in scenarios:
        if s not in SCENARIOS:
            raise CliError(EXIT_CONFIG, f"unknown scenario {s!r}; choose from {', '.join(SCENARIOS)}")
    try:
        methods = [PriorKind.parse(m).value for m in config.items("simulate.methods")]
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"unknown method: {exc}") from None
    try:
        sizes = [int(s) for s in config.items("simulate.sizes")]
    except ValueError:
        raise CliError(EXIT_CONFIG, "simulate.sizes must be integers") from None
    if not scenarios or not methods or not sizes or min(sizes) < 4:
        raise CliError(EXIT_CONFIG, "need at least one scenario, method and size (sizes >= 4)")
    frac = config.number("simulate.mixture_fraction")
    if not 0.0 <= frac <= 1.0:
        raise CliError(EXIT_CONFIG, "simulate.mixture_fraction must lie in [0, 1]")
    settings = AnalysisSettings(
        warmup=config.integer("simulate.warmup", 0),
        iterations=config.integer("simulate.iterations", 4),
        quantile=config.number("weights.quantile"),
        hyperprior=_hyperprior(config),
    )
    spec = GridSpec(
        scenarios=tuple(scenarios),
        methods=tuple(methods),
        sizes=tuple(sizes),
        replications=config.integer("simulate.reps", 1),
        seed=config.integer("seed", 0),
        mixture_fraction=frac,
        n_historical=config.integer("simulate.n_historical", 0),
        settings=settings,
    )

    def progress(scenario: str, size: int, rows: list[MetricsRow]) -> None:
        log.info("finished %s N_c=%d (%d methods)", scenario, size, len(rows))

    rows = run_grid(spec, workers=config.integer("simulate.workers", 1), progress=progress)
    header = header_lines(config, "simulate")
    out = _out_dir(config)
    cols = ["scenario", "method", "n_concurrent"]
    for m in _METRIC_COLUMNS:
        cols += [m, f"{m}_se"]
    cols += ["replications_used", "replications_excluded", "error"]
    metrics = write_table(
        out / "metrics.csv",
        header,
        cols,
        (
            [r.scenario, r.method, r.n_concurrent]
            + [v for m in _METRIC_COLUMNS for v in (getattr(r, m), getattr(r, f"{m}_se"))]
            + [r.replications_used, r.replications_excluded, r.error]
            for r in rows
        ),
    )
    long = write_table(
        out / "metrics_long.csv",
        header,
        ["scenario", "method", "n_concurrent", "metric", "value", "se"],
        (
            [r.scenario, r.method, r.n_concurrent, m, getattr(r, m), getattr(r, f"{m}_se")]
            for r in rows
            for m in _METRIC_COLUMNS
        ),
    )
    failed = [r for r in rows if r.error]
    if failed:
        log.warning("%d cell(s) failed; see the error column", len(failed))
    return [metrics, long]


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--data", dest="data.path", help="comma-separated dataset")
    common.add_argument("--current-study", dest="data.current_study")
    common.add_argument("--seed", dest="seed")
    common.add_argument("--out", dest="out", help="output directory")
    common.add_argument("--strict", dest="strict", action="store_const", const="true")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ipdprior", description="Individually weighted historical-control priors")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    w = sub.add_parser("weights", parents=[common], help="per-subject borrowing weights")
    w.add_argument("--route", dest="weights.route", choices=["mahalanobis", "model", "predictive"])
    w.add_argument("--quantile", dest="weights.quantile")
    w.add_argument("--ridge", dest="weights.ridge")

    f = sub.add_parser("fit", parents=[common], help="posterior fit under a borrowing prior")
    f.add_argument("--model", dest="fit.model", choices=["normal", "weibull"])
    f.add_argument("--method", dest="fit.method", type=str.lower, choices=[m.lower() for m in METHODS])
    f.add_argument("--route", dest="weights.route", choices=["mahalanobis", "model", "predictive"])
    f.add_argument("--quantile", dest="weights.quantile")
    f.add_argument("--chains", dest="sampler.chains")
    f.add_argument("--warmup", dest="sampler.warmup")
    f.add_argument("--iters", dest="sampler.iterations")
    f.add_argument("--draws", dest="fit.draws", action="store_const", const="true", help="also write raw draws")

    s = sub.add_parser("simulate", parents=[common], help="six-scenario simulation grid")
    s.add_argument("--scenarios", dest="simulate.scenarios")
    s.add_argument("--methods", dest="simulate.methods")
    s.add_argument("--sizes", dest="simulate.sizes")
    s.add_argument("--reps", dest="simulate.reps")
    s.add_argument("--mixture-fraction", dest="simulate.mixture_fraction")
    s.add_argument("--warmup", dest="simulate.warmup")
    s.add_argument("--iters", dest="simulate.iterations")
    s.add_argument("--workers", dest="simulate.workers")
    return parser


COMMANDS: dict[str, Callable[[RunConfig], list[Path]]] = {
    "weights": cmd_weights,
    "fit": cmd_fit,
    "simulate": cmd_simulate,
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict[str, str] = {}
    if args.config:
        p = Path(args.config)
        try:
            values.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
        except OSError as exc:
            raise CliError(EXIT_CONFIG, f"cannot read config {p}: {exc}") from None
    for key, value in vars(args).items():
        if key in ("config", "command", "verbose") or value is None:
            continue
        values[key] = str(value)
    return RunConfig(values)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = resolve_config(args)
        paths = COMMANDS[args.command](config)
    except CliError as exc:
        print(f"ipdprior: {exc}", file=sys.stderr)
        return exc.code
    for path in paths:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
