"""Six-scenario borrowing study for the normal-linear model.

Concurrent subjects: ``x ~ N(1, 1)``, ``z ~ Bernoulli(1/2)``,
``y = intercept + beta*x + theta*z + e``. Historical controls:
``x ~ N(mu_xh, 1)``, ``y = intercept + delta_h + beta*x + e``. In the partially
exchangeable scenarios each historical subject draws the shifted component
of ``mu_xh`` or ``delta_h`` with probability ``mixture_fraction``.

All replications and chains of one (scenario, size, method) cell are sampled
as a single vectorized batch. Every chain owns a random stream keyed by
``(base_seed, scenario, size, method, replication, chain)``, so a
replication's draws do not depend on how the batch is formed.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from .data_model import StudyCollection, SubjectRecord
from .models import (
    BatchedNormalKernel,
    Hyperprior,
    MapNormalModel,
    NormalLinearModel,
    PriorKind,
    RegressionStats,
    optimal_power,
)
from .sampler import RHAT_THRESHOLD, PosteriorDraws, SamplerConfig, chain_rngs, run_chains, split_rhat
from .weighting import DEFAULT_QUANTILE, mahalanobis_weight_arrays

log = logging.getLogger(__name__)

SCENARIOS = ("exchangeable", "partial1", "partial2", "unex1", "unex2", "unex3")
METHODS = tuple(k.value for k in PriorKind)
DEFAULT_SIZES = (25, 50, 100)


@dataclass(frozen=True)
class Mixture:
    """Two-point mixture; ``shifted`` is drawn with probability ``mixture_fraction``."""

    base: float
    shifted: float


# (mu_xh, delta_h)
SCENARIO_TABLE: dict[str, tuple[float | Mixture, float | Mixture]] = {
    "exchangeable": (1.0, 0.0),
    "partial1": (Mixture(1.0, 6.0), 0.0),
    "partial2": (1.0, Mixture(0.0, 5.0)),
    "unex1": (6.0, 0.0),
    "unex2": (1.0, 5.0),
    "unex3": (1.0, 1.0),
}


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    mu_xh: float | Mixture
    delta_h: float | Mixture
    mixture_fraction: float = 0.5
    n_concurrent: int = 50
    n_historical: int = 100
    theta_true: float = 0.5
    beta_true: float = 1.0
    intercept: float = 0.0
    replications: int = 200
    base_seed: int = 0

    def __post_init__(self) -> None:
        if self.name not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.name!r}")
        if not 0.0 <= self.mixture_fraction <= 1.0:
            raise ValueError("mixture_fraction must lie in [0, 1]")
        if self.n_concurrent < 2 or self.n_historical < 0:
            raise ValueError("need at least two concurrent subjects")

    @classmethod
    def named(cls, name: str, **overrides) -> ScenarioConfig:
        mu, delta = SCENARIO_TABLE[name]
        return cls(name=name, mu_xh=mu, delta_h=delta, **overrides)

    @property
    def scenario_index(self) -> int:
        return SCENARIOS.index(self.name)


@dataclass(frozen=True)
class AnalysisSettings:
    chains: int = 4
    warmup: int = 2000
    iterations: int = 5000
    quantile: float = DEFAULT_QUANTILE
    ridge: float | None = None
    rhat_threshold: float = RHAT_THRESHOLD
    pp_grid: int = 1001
    hyperprior: Hyperprior = field(default_factory=Hyperprior)
    initial_step_scale: float = 0.1


def _draw_component(rng: np.random.Generator, value: float | Mixture, n: int, frac: float) -> NDArray[np.float64]:
    if isinstance(value, Mixture):
        return np.where(rng.random(n) < frac, value.shifted, value.base)
    return np.full(n, float(value))


def generate_replication(config: ScenarioConfig, rep_index: int) -> StudyCollection:
    rng = np.random.default_rng(
        np.random.SeedSequence(
            entropy=config.base_seed, spawn_key=(0, config.scenario_index, config.n_concurrent, rep_index)
        )
    )
    n = config.n_concurrent
    x = rng.normal(1.0, 1.0, n)
    z = rng.integers(0, 2, n)
    while z.min() == z.max():
        z = rng.integers(0, 2, n)
    y = config.intercept + config.beta_true * x + config.theta_true * z + rng.standard_normal(n)
    conc = tuple(SubjectRecord("concurrent", int(zi), float(yi), None, (float(xi),)) for xi, zi, yi in zip(x, z, y))
    m = config.n_historical
    if m == 0:
        return StudyCollection(conc, {})
    mu = _draw_component(rng, config.mu_xh, m, config.mixture_fraction)
    delta = _draw_component(rng, config.delta_h, m, config.mixture_fraction)
    xh = rng.normal(mu, 1.0)
    yh = config.intercept + delta + config.beta_true * xh + rng.standard_normal(m)
    hist = tuple(SubjectRecord("historical", 0, float(yi), None, (float(xi),)) for xi, yi in zip(xh, yh))
    return StudyCollection(conc, {"historical": hist})


# ---------------------------------------------------------------------------
# Method dispatch
# ---------------------------------------------------------------------------


def _xy(records: Iterable[SubjectRecord]) -> NDArray[np.float64]:
    recs = list(records)
    return np.array([[*r.continuous, r.outcome] for r in recs], dtype=float).reshape(len(recs), -1)


def historical_powers_for(collection: StudyCollection, method: str | PriorKind, settings: AnalysisSettings) -> NDArray[np.float64]:
    """Per-subject historical powers (all historical records in order)."""
    kind = PriorKind.parse(method)
    n_h = collection.n_historical
    if kind is PriorKind.NP or n_h == 0:
        return np.zeros(n_h)
    if kind is PriorKind.FH:
        return np.ones(n_h)
    if kind is PriorKind.PP:
        out = []
        for sid, recs in collection.historical.items():
            sub = StudyCollection(collection.concurrent, {sid: recs})
            out.append(np.full(len(recs), optimal_power(sub, grid_resolution=settings.pp_grid).omega))
        return np.concatenate(out)
    if kind in (PriorKind.IW, PriorKind.TIW):
        arrays = mahalanobis_weight_arrays(
            _xy(collection.concurrent), _xy(collection.historical_records()), settings.quantile, settings.ridge
        )
        return arrays.historical_truncated if kind is PriorKind.TIW else arrays.historical_weights
    raise ValueError(f"{kind.value} does not use historical powers")


@dataclass
class ThetaBatch:
    """Treatment-effect draws for a batch of replications: ``draws`` is (R, chains, iterations)."""

    draws: NDArray[np.float64]
    rhat: NDArray[np.float64]
    acceptance: NDArray[np.float64]  # (R, chains)


def _map_batch(models: Sequence[MapNormalModel], repeats: int) -> MapNormalModel:
    first = models[0]
    batched = object.__new__(MapNormalModel)
    batched.__dict__.update(first.__dict__)
    batched.blocks = [
        RegressionStats.stack([m.blocks[j] for m in models], repeats) for j in range(len(first.blocks))
    ]
    return batched


def run_method_batch(
    collections: Sequence[StudyCollection],
    method: str | PriorKind,
    settings: AnalysisSettings = AnalysisSettings(),
    seed: int = 0,
    keys: Sequence[tuple[int, ...]] | None = None,
) -> ThetaBatch:
    """Sample the treatment-effect posterior for many datasets in one vectorized run.

    ``keys[r]`` extends the seed for replication ``r``; chain ``c`` of that
    replication uses the stream ``(seed, *keys[r], c)``.
    """
    kind = PriorKind.parse(method)
    R, C = len(collections), settings.chains
    keys = list(keys) if keys is not None else [(r,) for r in range(R)]
    if kind is PriorKind.MAP:
        models = [MapNormalModel(col, hyperprior=settings.hyperprior) for col in collections]
        kernel = _map_batch(models, C)
        inits = np.stack([m.initial_point() for m in models])
        scales = np.full(inits.shape, settings.initial_step_scale)
    else:
        models = [
            NormalLinearModel(col, historical_powers_for(col, kind, settings), hyperprior=settings.hyperprior)
            for col in collections
        ]
        kernel = BatchedNormalKernel(models, C)
        inits = np.stack([m.mode() for m in models])
        scales = np.stack([m.proposal_scale() for m in models])
    names = models[0].names
    if any(m.names != names for m in models):
        raise ValueError("replications in a batch must share a parameter layout")
    theta_col = names.index("theta")
    rngs = [g for key in keys for g in chain_rngs(seed, C, *key)]
    init_rows = np.repeat(inits, C, axis=0)
    run = run_chains(
        kernel, init_rows, kernel.positive, rngs, settings.warmup, settings.iterations,
        np.repeat(scales, C, axis=0), keep=[theta_col],
    )
    draws = run.draws[:, :, 0].reshape(R, C, settings.iterations)
    rhat = np.array([split_rhat(d) for d in draws])
    return ThetaBatch(draws, rhat, run.acceptance.reshape(R, C))


def run_method(
    collection: StudyCollection,
    method: str | PriorKind,
    settings: AnalysisSettings = AnalysisSettings(),
    seed: int = 0,
    key: tuple[int, ...] = (),
) -> PosteriorDraws:
    """Treatment-effect posterior for one dataset."""
    batch = run_method_batch([collection], method, settings, seed, [key])
    config = SamplerConfig(chains=settings.chains, warmup=settings.warmup, iterations=settings.iterations, seed=seed)
    return PosteriorDraws(("theta",), batch.draws[0][:, :, None], batch.acceptance[0], config=config)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRow:
    scenario: str
    method: str
    n_concurrent: int
    power: float
    rmse: float
    bias: float
    ci_width: float
    power_se: float
    rmse_se: float
    bias_se: float
    ci_width_se: float
    replications_used: int
    replications_excluded: int
    error: str = ""

    @classmethod
    def failed(cls, scenario: str, method: str, n: int, message: str) -> MetricsRow:
        nan = float("nan")
        return cls(scenario, method, n, nan, nan, nan, nan, nan, nan, nan, nan, 0, 0, message)


@dataclass(frozen=True)
class ReplicationSummary:
    """Per-replication quantities behind the cell metrics."""

    mean: NDArray[np.float64]
    rmse: NDArray[np.float64]
    lower: NDArray[np.float64]
    upper: NDArray[np.float64]


def summarize_replications(draws: NDArray[np.float64], theta_true: float) -> ReplicationSummary:
    """``draws`` is (R, n_draws) or (R, chains, iterations)."""
    flat = np.asarray(draws, dtype=float).reshape(len(draws), -1)
    lo, hi = np.quantile(flat, [0.025, 0.975], axis=1)
    return ReplicationSummary(
        flat.mean(axis=1), np.sqrt(np.mean((flat - theta_true) ** 2, axis=1)), lo, hi
    )


def compute_metrics(
    draws: NDArray[np.float64] | Sequence[NDArray[np.float64]],
    theta_true: float,
    rhat: NDArray[np.float64] | None = None,
    rhat_threshold: float = RHAT_THRESHOLD,
    scenario: str = "",
    method: str = "",
    n_concurrent: int = 0,
) -> MetricsRow:
    """Power, RMSE, bias and interval width over usable replications.

    Replications whose ``rhat`` exceeds the threshold (or is NaN while other
    replications have one) are excluded and counted.
    """
    arr = np.stack([np.asarray(d, dtype=float).reshape(-1) for d in draws]) if not isinstance(draws, np.ndarray) else draws
    R = len(arr)
    if rhat is None:
        usable = np.ones(R, dtype=bool)
    else:
        rh = np.asarray(rhat, dtype=float)
        usable = ~(rh > rhat_threshold)
    n_ok = int(usable.sum())
    if n_ok == 0:
        raise ValueError("no usable replications")
    s = summarize_replications(arr[usable], theta_true)
    hits = (s.lower > 0).astype(float)
    power = float(hits.mean())
    err = s.mean - theta_true
    width = s.upper - s.lower

    def se(v: NDArray[np.float64]) -> float:
        # jackknife standard error of a mean reduces to sd / sqrt(n)
        return float(np.std(v, ddof=1) / math.sqrt(len(v))) if len(v) > 1 else float("nan")

    return MetricsRow(
        scenario=scenario,
        method=method,
        n_concurrent=n_concurrent,
        power=power,
        rmse=float(s.rmse.mean()),
        bias=float(err.mean()),
        ci_width=float(width.mean()),
        power_se=math.sqrt(power * (1 - power) / n_ok),
        rmse_se=se(s.rmse),
        bias_se=se(err),
        ci_width_se=se(width),
        replications_used=n_ok,
        replications_excluded=R - n_ok,
    )


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    scenarios: tuple[str, ...] = SCENARIOS
    methods: tuple[str, ...] = METHODS
    sizes: tuple[int, ...] = DEFAULT_SIZES
    replications: int = 200
    seed: int = 0
    mixture_fraction: float = 0.5
    n_historical: int = 100
    theta_true: float = 0.5
    beta_true: float = 1.0
    intercept: float = 0.0
    settings: AnalysisSettings = field(default_factory=AnalysisSettings)

    def __post_init__(self) -> None:
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise ValueError(f"unknown scenario {s!r}")
        object.__setattr__(self, "methods", tuple(PriorKind.parse(m).value for m in self.methods))
        if self.replications < 1:
            raise ValueError("need at least one replication")

    def scenario(self, name: str, size: int) -> ScenarioConfig:
        return ScenarioConfig.named(
            name,
            mixture_fraction=self.mixture_fraction,
            n_concurrent=size,
            n_historical=self.n_historical,
            theta_true=self.theta_true,
            beta_true=self.beta_true,
            intercept=self.intercept,
            replications=self.replications,
            base_seed=self.seed,
        )


def run_cell(spec: GridSpec, scenario: str, size: int) -> list[MetricsRow]:
    """All methods for one (scenario, size) cell; one row per method in ``spec.methods`` order."""
    cfg = spec.scenario(scenario, size)
    rows = []
    try:
        data = [generate_replication(cfg, r) for r in range(spec.replications)]
    except Exception as exc:  # report, keep the grid going
        return [MetricsRow.failed(scenario, m, size, f"{type(exc).__name__}: {exc}") for m in spec.methods]
    for method in spec.methods:
        midx = METHODS.index(method)
        keys = [(1, cfg.scenario_index, size, midx, r) for r in range(spec.replications)]
        try:
            batch = run_method_batch(data, method, spec.settings, spec.seed, keys)
            row = compute_metrics(
                batch.draws, cfg.theta_true, batch.rhat, spec.settings.rhat_threshold, scenario, method, size
            )
        except Exception as exc:
            row = MetricsRow.failed(scenario, method, size, f"{type(exc).__name__}: {exc}")
        log.info(
            "%s N_c=%d %s: power=%.3f (se %.3f) bias=%.3f excluded=%d",
            scenario, size, method, row.power, row.power_se, row.bias, row.replications_excluded,
        )
        rows.append(row)
    return rows


def _cell_task(args: tuple[GridSpec, str, int]) -> list[MetricsRow]:
    return run_cell(*args)


def run_grid(
    spec: GridSpec = GridSpec(),
    workers: int = 1,
    progress: Callable[[str, int, list[MetricsRow]], None] | None = None,
) -> list[MetricsRow]:
    """Full factorial over scenarios x sizes x methods, in that nesting order.

    Output order and values do not depend on ``workers``.
    """
    cells = [(spec, s, n) for s in spec.scenarios for n in spec.sizes]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_task, cells))
    else:
        results = []
        for cell in cells:
            results.append(_cell_task(cell))
            if progress is not None:
                progress(cell[1], cell[2], results[-1])
    if workers > 1 and progress is not None:
        for (_, s, n), rows in zip(cells, results):
            progress(s, n, rows)
    return [row for rows in results for row in rows]
