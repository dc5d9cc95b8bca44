"""Adaptive random-walk Metropolis with multi-chain diagnostics.

Chains are advanced together as rows of one array, so a log-kernel must
accept an ``(m, d)`` array of parameter points on the natural scale and
return ``m`` log densities. Positive parameters are sampled on the log
scale with the Jacobian added to the target.

Each chain draws from its own stream, seeded from ``(seed, chain)``.
During warmup the proposal keeps a per-chain diagonal scale (re-estimated
at the end of each adaptation window) and a global step multiplier tuned
by Robbins-Monro toward the target acceptance rate; both are frozen once
warmup ends.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import ndtri
from scipy.stats import rankdata

from .data_model import CovariateSchema, StudyCollection, default_schema, design_matrix

LogKernel = Callable[[NDArray[np.float64]], NDArray[np.float64]]

RHAT_THRESHOLD = 1.05
LOW_ACCEPTANCE = 0.05
_WINDOW_ENDS = (0.15, 0.3, 0.5, 0.8)


class InitializationError(RuntimeError):
    """The log-kernel is not finite at the initial point."""


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup: int = 2000
    iterations: int = 5000
    initial_step_scale: float = 0.1
    target_accept: float = 0.234
    seed: int = 0
    init_jitter: float = 1.0
    block: int = 512

    def __post_init__(self) -> None:
        if self.chains < 1:
            raise ValueError("need at least one chain")
        if self.iterations < 1:
            raise ValueError("need at least one sampling iteration")
        if self.warmup < 0:
            raise ValueError("warmup must be nonnegative")
        if not 0 < self.target_accept < 1:
            raise ValueError("target acceptance must lie in (0, 1)")


def chain_rngs(seed: int, n_chains: int, *key: int) -> list[np.random.Generator]:
    """Independent generators, one per chain, derived from ``(seed, *key, chain)``."""
    return [
        np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(*key, c)))
        for c in range(n_chains)
    ]


@dataclass
class ChainRun:
    draws: NDArray[np.float64]  # (K, iterations, d_kept), natural scale
    acceptance: NDArray[np.float64]  # (K,)
    proposal_factors: NDArray[np.float64]  # (K, d, d)


def _adapted_factor(cov: NDArray[np.float64], old: NDArray[np.float64], d: int) -> NDArray[np.float64]:
    """Cholesky factors of the scaled window covariances; chains that did not move keep ``old``."""
    out = old.copy()
    jitter = 1e-10 * np.eye(d)
    for k in range(len(cov)):
        c = cov[k]
        if not np.all(np.isfinite(c)) or np.trace(c) <= 0:
            continue
        c = c + jitter * max(np.trace(c) / d, 1e-300)
        try:
            out[k] = np.linalg.cholesky(c) * (2.38 / math.sqrt(d))
        except np.linalg.LinAlgError:
            out[k] = np.diag(np.sqrt(np.maximum(np.diag(c), 0))) * (2.38 / math.sqrt(d))
    return out


def run_chains(
    log_kernel: LogKernel,
    init: ArrayLike,
    positive: Sequence[bool],
    rngs: Sequence[np.random.Generator],
    warmup: int,
    iterations: int,
    step_scale: ArrayLike,
    target_accept: float = 0.234,
    keep: Sequence[int] | None = None,
    block: int = 512,
    factor: ArrayLike | None = None,
) -> ChainRun:
    """Advance ``K = len(rngs)`` chains from the rows of ``init`` (natural scale).

    ``step_scale`` holds the initial proposal sds on the unconstrained
    scale, broadcast to ``(K, d)``; ``factor`` (a Cholesky factor of shape
    ``(d, d)`` or ``(K, d, d)``) replaces it when given. Warmup re-estimates
    a full covariance per chain. ``keep`` selects which parameter columns are stored.
    """
    x0 = np.atleast_2d(np.asarray(init, dtype=float))
    K, d = x0.shape
    if len(rngs) != K:
        raise ValueError("one generator per chain is required")
    pos = np.asarray(positive, dtype=bool)
    if pos.shape != (d,):
        raise ValueError("positive mask must have one entry per parameter")
    keep_idx = np.arange(d) if keep is None else np.asarray(keep, dtype=int)
    if np.any(x0[:, pos] <= 0):
        raise InitializationError("positive parameters must start above zero")

    def to_natural(u: NDArray[np.float64]) -> NDArray[np.float64]:
        if not pos.any():
            return u
        x = u.copy()
        x[:, pos] = np.exp(u[:, pos])
        return x

    def target(u: NDArray[np.float64]) -> NDArray[np.float64]:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            lp = np.asarray(log_kernel(to_natural(u)), dtype=float)
            if pos.any():
                lp = lp + u[:, pos].sum(axis=1)
        return np.where(np.isnan(lp), -np.inf, lp)

    u = x0.copy()
    u[:, pos] = np.log(x0[:, pos])
    lp = target(u)
    if not np.all(np.isfinite(lp)):
        bad = np.flatnonzero(~np.isfinite(lp))
        raise InitializationError(f"log-kernel not finite at the initial point of chain(s) {bad.tolist()}")

    if factor is not None:
        chol = np.broadcast_to(np.asarray(factor, dtype=float), (K, d, d)).copy()
    else:
        chol = np.zeros((K, d, d))
        chol[:, np.arange(d), np.arange(d)] = np.broadcast_to(np.asarray(step_scale, dtype=float), (K, d))
    log_eps = np.zeros(K)
    ends = sorted({int(round(f * warmup)) for f in _WINDOW_ENDS if int(round(f * warmup)) > 0})
    rm_t = 0
    w_n, w_mean, w_m2 = 0, np.zeros((K, d)), np.zeros((K, d, d))

    out = np.empty((K, iterations, len(keep_idx)))
    n_acc = np.zeros(K)
    total = warmup + iterations
    t = 0
    while t < total:
        b = min(block, total - t)
        noise = np.stack([g.standard_normal((b, d)) for g in rngs], axis=1)  # (b, K, d)
        log_u = np.log(np.stack([g.random(b) for g in rngs], axis=1))  # (b, K)
        steps = np.einsum("kij,bkj->bki", chol, noise)
        for i in range(b):
            prop = u + np.exp(log_eps)[:, None] * steps[i]
            lp_prop = target(prop)
            log_ratio = lp_prop - lp
            accept = log_u[i] < log_ratio
            u = np.where(accept[:, None], prop, u)
            lp = np.where(accept, lp_prop, lp)
            if t < warmup:
                rm_t += 1
                alpha = np.exp(np.minimum(log_ratio, 0.0))
                log_eps += (alpha - target_accept) / rm_t**0.6
                w_n += 1
                delta = u - w_mean
                w_mean += delta / w_n
                w_m2 += delta[:, :, None] * (u - w_mean)[:, None, :]
                if ends and t + 1 == ends[0]:
                    ends.pop(0)
                    if w_n >= 2 * d + 10:
                        chol = _adapted_factor(w_m2 / (w_n - 1), chol, d)
                        log_eps[:] = 0.0
                    rm_t, w_n = 0, 0
                    w_mean, w_m2 = np.zeros((K, d)), np.zeros((K, d, d))
                    steps[i + 1 :] = np.einsum("kij,bkj->bki", chol, noise[i + 1 :])
            else:
                n_acc += accept
                out[:, t - warmup, :] = u[:, keep_idx]
            t += 1
    kept_pos = pos[keep_idx]
    if kept_pos.any():
        out[:, :, kept_pos] = np.exp(out[:, :, kept_pos])
    return ChainRun(out, n_acc / iterations, np.exp(log_eps)[:, None, None] * chol)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def _autocovariance(x: NDArray[np.float64]) -> NDArray[np.float64]:
    """Biased autocovariance of each row (FFT)."""
    n = x.shape[-1]
    m = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, n=m, axis=-1)
    return np.fft.irfft(f * np.conjugate(f), n=m, axis=-1)[..., :n] / n


def _ess_raw(chains: NDArray[np.float64]) -> float:
    """Effective sample size with Geyer's initial monotone sequence."""
    M, N = chains.shape
    if N < 4:
        return float("nan")
    acov = _autocovariance(chains)
    chain_var = acov[:, 0] * N / (N - 1)
    mean_var = chain_var.mean()
    var_plus = mean_var * (N - 1) / N
    if M > 1:
        var_plus += chains.mean(axis=1).var(ddof=1)
    if not var_plus > 0:
        return float(M * N)
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pair sums, truncated at the first negative pair, then made monotone
    n_pairs = N // 2
    pairs = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    neg = np.flatnonzero(pairs < 0)
    if neg.size:
        pairs = pairs[: neg[0]]
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / math.log10(M * N))
    return float(M * N / tau)


def _split(chains: NDArray[np.float64]) -> NDArray[np.float64]:
    M, N = chains.shape
    h = N // 2
    return np.vstack([chains[:, :h], chains[:, N - h :]])


def _rank_normalize(chains: NDArray[np.float64]) -> NDArray[np.float64]:
    r = rankdata(chains, method="average").reshape(chains.shape)
    return ndtri((r - 0.375) / (chains.size + 0.25))


def _rhat_basic(chains: NDArray[np.float64]) -> float:
    M, N = chains.shape
    w = chains.var(axis=1, ddof=1).mean()
    b_over_n = chains.mean(axis=1).var(ddof=1)
    if not w > 0:
        return float("nan") if not b_over_n > 0 else float("inf")
    return float(math.sqrt(((N - 1) / N * w + b_over_n) / w))


def split_rhat(chains: ArrayLike) -> float:
    """Rank-normalized split-R-hat (max of bulk and folded); NaN for one chain."""
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 4:
        return float("nan")
    s = _split(x)
    bulk = _rhat_basic(_rank_normalize(s))
    folded = _rhat_basic(_rank_normalize(np.abs(s - np.median(s))))
    return float(np.nanmax([bulk, folded]))


def ess_bulk(chains: ArrayLike) -> float:
    x = np.atleast_2d(np.asarray(chains, dtype=float))
    return _ess_raw(_rank_normalize(_split(x)))


def ess_mean(chains: ArrayLike) -> float:
    x = np.atleast_2d(np.asarray(chains, dtype=float))
    return _ess_raw(_split(x))


def mcse_mean(chains: ArrayLike) -> float:
    x = np.atleast_2d(np.asarray(chains, dtype=float))
    return float(x.std(ddof=1) / math.sqrt(ess_mean(x)))


def mcse_sd(chains: ArrayLike) -> float:
    """Monte Carlo standard error of the posterior sd (delta method on the variance)."""
    x = np.atleast_2d(np.asarray(chains, dtype=float))
    sq = (x - x.mean()) ** 2
    var = sq.mean()
    se_var = sq.std(ddof=1) / math.sqrt(ess_mean(sq))
    return float(se_var / (2.0 * math.sqrt(var)))


@dataclass(frozen=True)
class ParameterSummary:
    mean: float
    sd: float
    q025: float
    q975: float
    rhat: float
    ess: float


@dataclass(frozen=True)
class DiagnosticsReport:
    rhat: dict[str, float]
    ess: dict[str, float]
    acceptance: tuple[float, ...]
    flagged: tuple[str, ...]
    rhat_available: bool
    ok: bool


@dataclass
class PosteriorDraws:
    """Draws indexed ``(chain, iteration, parameter)`` on the natural scale."""

    names: tuple[str, ...]
    draws: NDArray[np.float64]
    acceptance: NDArray[np.float64]
    warnings: list[str] = field(default_factory=list)
    config: SamplerConfig | None = None

    def __post_init__(self) -> None:
        self.names = tuple(self.names)
        if self.draws.ndim != 3 or self.draws.shape[2] != len(self.names):
            raise ValueError("draws must have shape (chains, iterations, len(names))")

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    def chains_of(self, name: str) -> NDArray[np.float64]:
        return self.draws[:, :, self.names.index(name)]

    def __getitem__(self, name: str) -> NDArray[np.float64]:
        return self.chains_of(name).reshape(-1)

    def summary(self) -> dict[str, ParameterSummary]:
        out = {}
        for j, name in enumerate(self.names):
            c = self.draws[:, :, j]
            flat = c.reshape(-1)
            lo, hi = np.quantile(flat, [0.025, 0.975])
            out[name] = ParameterSummary(
                float(flat.mean()), float(flat.std(ddof=1)) if flat.size > 1 else 0.0,
                float(lo), float(hi), split_rhat(c), ess_bulk(c),
            )
        return out


def diagnostics(draws: PosteriorDraws) -> DiagnosticsReport:
    """Split-R-hat and bulk ESS per parameter; flags R-hat above 1.05."""
    rhat = {n: split_rhat(draws.chains_of(n)) for n in draws.names}
    ess = {n: ess_bulk(draws.chains_of(n)) for n in draws.names}
    available = draws.n_chains >= 2
    flagged = tuple(n for n, r in rhat.items() if available and not r <= RHAT_THRESHOLD)
    low = any(a < LOW_ACCEPTANCE for a in draws.acceptance)
    return DiagnosticsReport(
        rhat, ess, tuple(float(a) for a in draws.acceptance), flagged, available,
        ok=not flagged and not low,
    )


# ---------------------------------------------------------------------------
# Front end
# ---------------------------------------------------------------------------


def _as_point(init: Mapping[str, float] | ArrayLike, names: Sequence[str]) -> NDArray[np.float64]:
    if isinstance(init, Mapping):
        return np.array([float(init[n]) for n in names])
    return np.asarray(init, dtype=float).reshape(-1)


def sample(
    kernel: LogKernel,
    init: Mapping[str, float] | ArrayLike,
    config: SamplerConfig = SamplerConfig(),
    names: Sequence[str] | None = None,
    positive: Sequence[bool] | None = None,
    step_scale: ArrayLike | None = None,
) -> PosteriorDraws:
    """Sample ``kernel`` starting near ``init``.

    ``names`` and ``positive`` default to the kernel's ``names`` and
    ``positive`` attributes when present. ``step_scale`` (unconstrained
    scale; per-parameter sds or a ``(d, d)`` Cholesky factor) defaults to
    ``config.initial_step_scale``; chains start at ``init`` jittered by
    ``init_jitter`` proposal sds.
    """
    names = tuple(names if names is not None else getattr(kernel, "names"))
    d = len(names)
    pos = np.asarray(positive if positive is not None else getattr(kernel, "positive", [False] * d), dtype=bool)
    x0 = _as_point(init, names)
    if step_scale is None:
        scale = np.full(d, config.initial_step_scale)
    else:
        scale = np.asarray(step_scale, dtype=float)
        if scale.ndim < 2:
            scale = np.broadcast_to(scale, (d,))
    jitter = np.sqrt(np.sum(scale**2, axis=1)) if scale.ndim == 2 else scale
    x0_row = x0[None, :]
    lp0 = np.asarray(kernel(x0_row), dtype=float)
    if not np.all(np.isfinite(lp0)):
        raise InitializationError("log-kernel is not finite at the initial point")
    rngs = chain_rngs(config.seed, config.chains)
    u0 = x0.copy()
    u0[pos] = np.log(x0[pos])
    starts = np.empty((config.chains, d))
    for c, g in enumerate(rngs):
        # the first normal draws of each stream set the start; fall back to init if not finite
        cand = u0 + config.init_jitter * jitter * g.standard_normal(d)
        x = cand.copy()
        x[pos] = np.exp(cand[pos])
        ok = np.isfinite(np.asarray(kernel(x[None, :]), dtype=float)[0])
        starts[c] = x if ok else x0
    run = run_chains(
        kernel, starts, pos, rngs, config.warmup, config.iterations,
        jitter if scale.ndim == 2 else scale, config.target_accept, block=config.block,
        factor=scale if scale.ndim == 2 else None,
    )
    out = PosteriorDraws(names, run.draws, run.acceptance, config=config)
    low = np.flatnonzero(run.acceptance < LOW_ACCEPTANCE)
    if low.size:
        msg = f"acceptance below {LOW_ACCEPTANCE} in chain(s) {low.tolist()}"
        out.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return out


# ---------------------------------------------------------------------------
# Closed-form oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianPosterior:
    names: tuple[str, ...]
    mean: NDArray[np.float64]
    cov: NDArray[np.float64]

    @property
    def sd(self) -> NDArray[np.float64]:
        return np.sqrt(np.diag(self.cov))

    def __getitem__(self, name: str) -> tuple[float, float]:
        j = self.names.index(name)
        return float(self.mean[j]), float(self.sd[j])


def weighted_gaussian_posterior(
    X: ArrayLike, y: ArrayLike, w: ArrayLike, sigma2: float, names: Sequence[str] | None = None
) -> GaussianPosterior:
    """Flat-prior posterior of regression coefficients with per-row powers and known variance."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    keep = w > 0
    Xw = X[keep] * w[keep, None]
    G = X[keep].T @ Xw
    if np.linalg.matrix_rank(G) < X.shape[1]:
        raise RankDeficientError("weighted design is rank deficient")
    cov = sigma2 * np.linalg.inv(G)
    mean = np.linalg.solve(G, Xw.T @ y[keep])
    names = tuple(names) if names is not None else tuple(f"b{j}" for j in range(X.shape[1]))
    return GaussianPosterior(names, mean, (cov + cov.T) / 2)


def regression_rows(
    collection: StudyCollection,
    weights: Mapping[str, ArrayLike] | ArrayLike | None,
    schema: CovariateSchema | None = None,
) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64], list[str]]:
    """Stacked design ``[1, covariates, z]``, outcomes and row powers.

    Concurrent rows carry power one. Historical rows carry their power times
    ``1 - z`` and a zero treatment column. The treatment column is dropped
    when no concurrent subject is treated.
    """
    schema = schema or default_schema(collection)
    conc = list(collection.concurrent)
    hist = collection.historical_records()
    Xc, cov_names = design_matrix(conc, schema)
    zc = np.array([r.arm for r in conc], dtype=float)
    with_theta = bool(zc.any())
    rows_c = [np.ones(len(conc)), *Xc.T] + ([zc] if with_theta else [])
    Xh, _ = design_matrix(hist, schema)
    zh = np.array([r.arm for r in hist], dtype=float)
    rows_h = [np.ones(len(hist)), *Xh.T] + ([np.zeros(len(hist))] if with_theta else [])
    X = np.vstack([np.column_stack(rows_c), np.column_stack(rows_h).reshape(len(hist), len(rows_c))])
    y = np.array([r.outcome for r in conc] + [r.outcome for r in hist], dtype=float)
    if weights is None:
        wh = np.zeros(len(hist))
    elif isinstance(weights, Mapping):
        wh = np.concatenate(
            [np.broadcast_to(np.asarray(weights.get(sid, 0.0), dtype=float), (len(recs),)) for sid, recs in collection.historical.items()]
        ) if hist else np.zeros(0)
    else:
        wh = np.broadcast_to(np.asarray(weights, dtype=float), (len(hist),))
    w = np.concatenate([np.ones(len(conc)), wh * (1.0 - zh)])
    names = ["beta0"] + [f"beta[{n}]" for n in cov_names] + (["theta"] if with_theta else [])
    return X, y, w, names


def conjugate_normal_posterior(
    collection: StudyCollection,
    weights: Mapping[str, ArrayLike] | ArrayLike | None,
    known_sigma2: float,
    schema: CovariateSchema | None = None,
) -> GaussianPosterior:
    """Exact location posterior of the weighted normal-linear model (flat prior, known variance).

    ``weights`` gives historical powers: a per-study mapping, one array over
    all historical records, or a scalar.
    """
    X, y, w, names = regression_rows(collection, weights, schema)
    return weighted_gaussian_posterior(X, y, w, known_sigma2, names)
