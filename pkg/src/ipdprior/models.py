"""Log-posterior kernels for the analysis models under each prior construction.

Kernels are callables on an ``(m, d)`` array of natural-scale parameter
points (see :mod:`ipdprior.sampler`) and expose ``names`` and ``positive``.

Normal-linear model
    y = beta0 + x'beta + theta*z + e, e ~ N(0, sigma2). Historical rows enter
    with power ``omega * (1 - z)``; the likelihood is evaluated through
    weighted sufficient statistics.

Meta-analytic predictive (MAP) model
    Study-specific intercepts ``delta_s ~ N(mu_delta, tau2)`` for the
    concurrent study and every historical study; beta and sigma2 shared;
    historical controls enter with full weight.

Weibull proportional hazards
    hazard ``alpha * t**(alpha - 1) * exp(eta)`` with
    ``eta = delta + x'beta + z*theta``, so the hazard ratio between arms is
    ``exp(theta)``. Right-censored rows contribute the survival term only.

Vague baseline: location parameters N(0, 1e6); alpha the same normal
truncated at zero; sigma2 ~ inverse-gamma(0.01, 0.01); tau ~ half-normal(0, 5**2)
(or half-Cauchy(0, 1)).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import optimize
from scipy.special import gammaln

from .data_model import CovariateSchema, StudyCollection, default_schema, design_matrix
from .sampler import RankDeficientError, regression_rows
from .weighting import (
    DEFAULT_MIN_CATEGORY_COUNT,
    DEFAULT_QUANTILE,
    NIWPrior,
    WeightAssignment,
    historical_powers,
    mahalanobis_weights,
    model_weights,
)

_LOG_2PI = math.log(2 * math.pi)


class ConfigurationError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteKernelError(FloatingPointError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class PriorKind(str, Enum):
    NP = "NP"
    FH = "FH"
    PP = "PP"
    IW = "IW"
    TIW = "TIW"
    MAP = "MAP"

    @classmethod
    def parse(cls, value: str | PriorKind) -> PriorKind:
        return value if isinstance(value, PriorKind) else cls(str(value).upper())


@dataclass(frozen=True)
class Hyperprior:
    normal_variance: float = 1e6
    sigma2_shape: float = 0.01
    sigma2_rate: float = 0.01
    tau_prior: str = "half-normal"
    tau_scale: float | None = None
    flat: bool = False
    known_sigma2: float | None = None

    def __post_init__(self) -> None:
        if self.tau_prior not in ("half-normal", "half-cauchy"):
            raise ConfigurationError(f"unknown tau prior {self.tau_prior!r}")

    @property
    def resolved_tau_scale(self) -> float:
        if self.tau_scale is not None:
            return self.tau_scale
        return 5.0 if self.tau_prior == "half-normal" else 1.0


@dataclass(frozen=True)
class WeightingSettings:
    route: str = "mahalanobis"  # mahalanobis | model | predictive
    quantile: float = DEFAULT_QUANTILE
    ridge: float | None = None
    min_category_count: int = DEFAULT_MIN_CATEGORY_COUNT
    niw: NIWPrior | None = None


@dataclass(frozen=True)
class PriorConstruction:
    kind: PriorKind
    weights: Sequence[WeightAssignment] | None = None
    pp_power: float | Mapping[str, float] | None = None
    hyperprior: Hyperprior = field(default_factory=Hyperprior)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PriorKind.parse(self.kind))


@dataclass(frozen=True)
class NormalModelParams:
    theta: float
    beta0: float
    beta: tuple[float, ...] = ()
    sigma2: float = 1.0


@dataclass(frozen=True)
class MapModelParams(NormalModelParams):
    delta_c: float = 0.0
    delta_h: tuple[float, ...] = ()
    mu_delta: float = 0.0
    tau2: float = 1.0


@dataclass(frozen=True)
class WeibullModelParams:
    alpha: float
    delta: float
    beta: tuple[float, ...] = ()
    theta: float = 0.0


# ---------------------------------------------------------------------------
# Prior pieces
# ---------------------------------------------------------------------------


def _normal_logpdf(x: NDArray[np.float64], var: float) -> NDArray[np.float64]:
    return -0.5 * (_LOG_2PI + math.log(var)) - 0.5 * x * x / var


def _inv_gamma_logpdf(x: NDArray[np.float64], a: float, b: float) -> NDArray[np.float64]:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a * math.log(b) - gammaln(a) - (a + 1) * np.log(x) - b / x
    return np.where(x > 0, out, -np.inf)


def _tau2_logprior(tau2: NDArray[np.float64], hp: Hyperprior) -> NDArray[np.float64]:
    """Log density of tau2 implied by a half-normal or half-Cauchy prior on tau."""
    s = hp.resolved_tau_scale
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.sqrt(tau2)
        if hp.tau_prior == "half-normal":
            lt = math.log(2.0) + _normal_logpdf(tau, s * s)
        else:
            lt = math.log(2.0 / (math.pi * s)) - np.log1p((tau / s) ** 2)
        out = lt - np.log(2.0 * tau)
    return np.where(tau2 > 0, out, -np.inf)


def _location_logprior(P: NDArray[np.float64], hp: Hyperprior) -> NDArray[np.float64]:
    if hp.flat:
        return np.zeros(P.shape[0])
    return _normal_logpdf(P, hp.normal_variance).sum(axis=1)


# ---------------------------------------------------------------------------
# Weighted Gaussian regression statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegressionStats:
    """Weighted statistics so that RSS(c) = rss_min + (c - c_hat)' G (c - c_hat).

    Arrays carry a leading batch axis (one entry per dataset).
    """

    G: NDArray[np.float64]  # (B, p, p)
    c_hat: NDArray[np.float64]  # (B, p)
    rss_min: NDArray[np.float64]  # (B,)
    sum_w: NDArray[np.float64]  # (B,)

    @classmethod
    def from_rows(cls, X: ArrayLike, y: ArrayLike, w: ArrayLike) -> RegressionStats:
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        w = np.asarray(w, dtype=float)
        p = X.shape[1]
        keep = w > 0
        if not keep.any():
            return cls(np.zeros((1, p, p)), np.zeros((1, p)), np.zeros(1), np.zeros(1))
        Xk, yk, wk = X[keep], y[keep], w[keep]
        sw = np.sqrt(wk)
        c_hat, *_ = np.linalg.lstsq(Xk * sw[:, None], yk * sw, rcond=None)
        r = yk - Xk @ c_hat
        G = Xk.T @ (Xk * wk[:, None])
        return cls(G[None], c_hat[None], np.array([float(np.sum(wk * r * r))]), np.array([float(wk.sum())]))

    @classmethod
    def stack(cls, items: Sequence[RegressionStats], repeats: int = 1) -> RegressionStats:
        return cls(
            np.repeat(np.concatenate([s.G for s in items]), repeats, axis=0),
            np.repeat(np.concatenate([s.c_hat for s in items]), repeats, axis=0),
            np.repeat(np.concatenate([s.rss_min for s in items]), repeats, axis=0),
            np.repeat(np.concatenate([s.sum_w for s in items]), repeats, axis=0),
        )

    def rss(self, c: NDArray[np.float64]) -> NDArray[np.float64]:
        dc = c - self.c_hat
        return self.rss_min + np.einsum("bi,bij,bj->b", dc, self.G, dc)

    def log_likelihood(self, c: NDArray[np.float64], sigma2: NDArray[np.float64]) -> NDArray[np.float64]:
        with np.errstate(divide="ignore", invalid="ignore"):
            ll = -0.5 * self.sum_w * (_LOG_2PI + np.log(sigma2)) - 0.5 * self.rss(c) / sigma2
        return np.where(self.sum_w > 0, ll, 0.0)


def _powers_array(collection: StudyCollection, powers: Mapping[str, ArrayLike] | ArrayLike | None) -> NDArray[np.float64]:
    hist = collection.historical_records()
    if powers is None:
        return np.zeros(len(hist))
    if isinstance(powers, Mapping):
        parts = [
            np.broadcast_to(np.asarray(powers.get(sid, 0.0), dtype=float), (len(recs),))
            for sid, recs in collection.historical.items()
        ]
        return np.concatenate(parts) if parts else np.zeros(0)
    return np.broadcast_to(np.asarray(powers, dtype=float), (len(hist),)).copy()


class NormalLinearModel:
    """Weighted normal-linear log-posterior kernel.

    Parameters are ``beta0, beta[...], theta, sigma2`` (``sigma2`` is dropped
    when the hyperprior fixes it).
    """

    def __init__(
        self,
        collection: StudyCollection,
        powers: Mapping[str, ArrayLike] | ArrayLike | None,
        schema: CovariateSchema | None = None,
        hyperprior: Hyperprior = Hyperprior(),
    ):
        self.collection = collection
        self.schema = schema or default_schema(collection)
        self.hyperprior = hyperprior
        powers_arr = _powers_array(collection, powers)
        if np.any((powers_arr < 0) | (powers_arr > 1)) or not np.all(np.isfinite(powers_arr)):
            raise ValueError("historical powers must lie in [0, 1]")
        self.X, self.y, self.w, loc = regression_rows(collection, powers_arr, self.schema)
        self.stats = RegressionStats.from_rows(self.X, self.y, self.w)
        self.n_location = len(loc)
        self.names = tuple(loc) + (() if hyperprior.known_sigma2 is not None else ("sigma2",))
        self.positive = tuple(n == "sigma2" for n in self.names)

    def _split(self, P: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        c = P[:, : self.n_location]
        if self.hyperprior.known_sigma2 is not None:
            return c, np.full(P.shape[0], self.hyperprior.known_sigma2)
        return c, P[:, self.n_location]

    def __call__(self, P: ArrayLike) -> NDArray[np.float64]:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        return batched_normal_kernel(P, self.stats, self.n_location, self.hyperprior)

    def per_subject_log_likelihood(self, point: ArrayLike) -> NDArray[np.float64]:
        """Row contributions ``w_n * log phi(y_n | ...)``; zero-power rows give exactly 0."""
        c, s2 = self._split(np.atleast_2d(np.asarray(point, dtype=float)))
        mu = self.X @ c[0]
        lp = -0.5 * (_LOG_2PI + math.log(s2[0])) - 0.5 * (self.y - mu) ** 2 / s2[0]
        return np.where(self.w > 0, self.w * lp, 0.0)

    def log_prior(self, point: ArrayLike) -> float:
        P = np.atleast_2d(np.asarray(point, dtype=float))
        return float(_normal_prior(P, self.n_location, self.hyperprior)[0])

    def log_kernel(self, point: Mapping[str, float] | ArrayLike) -> float:
        """Scalar kernel; raises :class:`NonFiniteKernelError` naming the offending row."""
        x = _point(point, self.names)
        val = float(self(x[None, :])[0])
        if not math.isfinite(val):
            terms = self.per_subject_log_likelihood(x)
            bad = np.flatnonzero(~np.isfinite(terms))
            idx = int(bad[0]) if bad.size else None
            raise NonFiniteKernelError(f"non-finite normal kernel (row {idx})", idx)
        return val

    def mode(self) -> NDArray[np.float64]:
        """Weighted least squares with the ML variance (prior ignored)."""
        c = self.stats.c_hat[0]
        if self.hyperprior.known_sigma2 is not None:
            return c.copy()
        s2 = max(self.stats.rss_min[0] / max(self.stats.sum_w[0], 1.0), 1e-8)
        return np.append(c, s2)

    def proposal_scale(self) -> NDArray[np.float64]:
        """Approximate posterior sd on the sampler's scale (log for sigma2)."""
        s2 = self.hyperprior.known_sigma2 or self.mode()[-1]
        G = self.stats.G[0]
        try:
            sd = np.sqrt(np.maximum(np.diag(np.linalg.pinv(G)) * s2, 1e-12))
        except np.linalg.LinAlgError:
            sd = np.full(self.n_location, 0.1)
        if self.hyperprior.known_sigma2 is None:
            sd = np.append(sd, math.sqrt(2.0 / max(self.stats.sum_w[0], 1.0)))
        return sd


def _normal_prior(P: NDArray[np.float64], n_loc: int, hp: Hyperprior) -> NDArray[np.float64]:
    lp = _location_logprior(P[:, :n_loc], hp)
    if hp.known_sigma2 is None and not hp.flat:
        lp = lp + _inv_gamma_logpdf(P[:, n_loc], hp.sigma2_shape, hp.sigma2_rate)
    elif hp.known_sigma2 is None:
        lp = lp + np.where(P[:, n_loc] > 0, -np.log(np.maximum(P[:, n_loc], 1e-300)), -np.inf)
    return lp


def batched_normal_kernel(
    P: NDArray[np.float64], stats: RegressionStats, n_location: int, hp: Hyperprior
) -> NDArray[np.float64]:
    """Kernel for rows of ``P`` matched one-to-one (or broadcast) with ``stats``."""
    c = P[:, :n_location]
    s2 = np.full(P.shape[0], hp.known_sigma2) if hp.known_sigma2 is not None else P[:, n_location]
    return _normal_prior(P, n_location, hp) + stats.log_likelihood(c, s2)


class BatchedNormalKernel:
    """Normal kernel over many datasets at once; row ``i`` uses dataset ``i``."""

    def __init__(self, models: Sequence[NormalLinearModel], repeats: int = 1):
        first = models[0]
        self.names, self.positive = first.names, first.positive
        self.n_location = first.n_location
        self.hyperprior = first.hyperprior
        self.stats = RegressionStats.stack([m.stats for m in models], repeats)

    def __call__(self, P: NDArray[np.float64]) -> NDArray[np.float64]:
        return batched_normal_kernel(P, self.stats, self.n_location, self.hyperprior)


def normal_log_kernel(
    params: NormalModelParams,
    collection: StudyCollection,
    prior: PriorConstruction,
    schema: CovariateSchema | None = None,
    settings: WeightingSettings | None = None,
) -> float:
    powers = resolve_weights(prior, collection, schema, settings)
    if powers.hierarchical:
        raise ConfigurationError("MAP priors use map_log_kernel")
    model = NormalLinearModel(collection, powers.historical, schema, prior.hyperprior)
    vec = [params.beta0, *params.beta]
    if "theta" in model.names:
        vec.append(params.theta)
    if "sigma2" in model.names:
        vec.append(params.sigma2)
    return model.log_kernel(np.asarray(vec, dtype=float))


# ---------------------------------------------------------------------------
# MAP (hierarchical intercepts)
# ---------------------------------------------------------------------------


class MapNormalModel:
    """Normal-linear model with study intercepts drawn from N(mu_delta, tau2).

    Parameters: ``delta_c, delta_h[<id>]..., beta[...], theta, sigma2, mu_delta, tau2``.
    """

    def __init__(
        self,
        collection: StudyCollection,
        schema: CovariateSchema | None = None,
        hyperprior: Hyperprior = Hyperprior(),
    ):
        self.collection = collection
        self.schema = schema or default_schema(collection)
        self.hyperprior = hyperprior
        conc = list(collection.concurrent)
        Xc, cov_names = design_matrix(conc, self.schema)
        zc = np.array([r.arm for r in conc], dtype=float)
        self.with_theta = bool(zc.any())
        self.p = len(cov_names)
        self.H = len(collection.historical)
        cols = [np.ones(len(conc)), *Xc.T] + ([zc] if self.with_theta else [])
        self.blocks = [RegressionStats.from_rows(np.column_stack(cols), [r.outcome for r in conc], np.ones(len(conc)))]
        for sid, recs in collection.historical.items():
            Xh, _ = design_matrix(list(recs), self.schema)
            w = np.array([1.0 - r.arm for r in recs])
            X = np.column_stack([np.ones(len(recs)), *Xh.T]).reshape(len(recs), 1 + self.p)
            self.blocks.append(RegressionStats.from_rows(X, [r.outcome for r in recs], w))
        self.names = (
            ("delta_c",)
            + tuple(f"delta_h[{sid}]" for sid in collection.historical)
            + tuple(f"beta[{n}]" for n in cov_names)
            + (("theta",) if self.with_theta else ())
            + (() if hyperprior.known_sigma2 is not None else ("sigma2",))
            + ("mu_delta", "tau2")
        )
        self.positive = tuple(n in ("sigma2", "tau2") for n in self.names)

    def _unpack(self, P: NDArray[np.float64]):
        H, p = self.H, self.p
        deltas = P[:, : 1 + H]
        beta = P[:, 1 + H : 1 + H + p]
        j = 1 + H + p
        theta = P[:, j : j + 1] if self.with_theta else P[:, :0]
        j += int(self.with_theta)
        if self.hyperprior.known_sigma2 is not None:
            s2 = np.full(P.shape[0], self.hyperprior.known_sigma2)
        else:
            s2 = P[:, j]
            j += 1
        return deltas, beta, theta, s2, P[:, j], P[:, j + 1]

    def log_likelihood(self, P: ArrayLike) -> NDArray[np.float64]:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        deltas, beta, theta, s2, _, _ = self._unpack(P)
        ll = self.blocks[0].log_likelihood(np.column_stack([deltas[:, 0], beta, theta]), s2)
        for h, blk in enumerate(self.blocks[1:], start=1):
            ll = ll + blk.log_likelihood(np.column_stack([deltas[:, h], beta]), s2)
        return ll

    def log_prior(self, P: ArrayLike) -> NDArray[np.float64]:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        hp = self.hyperprior
        deltas, beta, theta, s2, mu, tau2 = self._unpack(P)
        loc = np.column_stack([beta, theta, mu])
        lp = _location_logprior(loc, hp)
        if hp.known_sigma2 is None:
            lp = lp + (
                _inv_gamma_logpdf(s2, hp.sigma2_shape, hp.sigma2_rate)
                if not hp.flat
                else np.where(s2 > 0, -np.log(np.maximum(s2, 1e-300)), -np.inf)
            )
        lp = lp + _tau2_logprior(tau2, hp)
        with np.errstate(divide="ignore", invalid="ignore"):
            dev = deltas - mu[:, None]
            lp = lp + np.sum(-0.5 * (_LOG_2PI + np.log(tau2))[:, None] - 0.5 * dev * dev / tau2[:, None], axis=1)
        return lp

    def __call__(self, P: ArrayLike) -> NDArray[np.float64]:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        return self.log_prior(P) + self.log_likelihood(P)

    def initial_point(self) -> NDArray[np.float64]:
        H, p = self.H, self.p
        c0 = self.blocks[0].c_hat[0]
        deltas = [c0[0]] + [b.c_hat[0][0] for b in self.blocks[1:]]
        beta = c0[1 : 1 + p]
        vec = list(deltas) + list(beta)
        if self.with_theta:
            vec.append(c0[-1])
        if self.hyperprior.known_sigma2 is None:
            n = sum(b.sum_w[0] for b in self.blocks)
            vec.append(max(sum(b.rss_min[0] for b in self.blocks) / max(n, 1.0), 1e-4))
        mu = float(np.mean(deltas))
        tau2 = float(np.var(deltas)) if len(deltas) > 1 else 1.0
        vec += [mu, max(tau2, 0.01)]
        return np.asarray(vec, dtype=float)


def map_log_kernel(
    params: MapModelParams,
    collection: StudyCollection,
    hyperprior: Hyperprior = Hyperprior(),
    schema: CovariateSchema | None = None,
) -> float:
    model = MapNormalModel(collection, schema, hyperprior)
    vec = [params.delta_c, *params.delta_h, *params.beta]
    if model.with_theta:
        vec.append(params.theta)
    if hyperprior.known_sigma2 is None:
        vec.append(params.sigma2)
    vec += [params.mu_delta, params.tau2]
    val = float(model(np.asarray(vec)[None, :])[0])
    if not math.isfinite(val):
        raise NonFiniteKernelError("non-finite MAP kernel")
    return val


# ---------------------------------------------------------------------------
# Weibull proportional hazards
# ---------------------------------------------------------------------------


class WeibullModel:
    """Weibull PH kernel with optional hierarchical (MAP) intercepts.

    Non-hierarchical parameters: ``alpha, delta, beta[...], theta``.
    Hierarchical: ``alpha, delta_c, delta_h[<id>]..., beta[...], theta, mu_delta, tau2``.
    Historical rows carry power ``omega * (1 - z)`` (all ones for MAP).
    """

    def __init__(
        self,
        collection: StudyCollection,
        powers: Mapping[str, ArrayLike] | ArrayLike | None,
        schema: CovariateSchema | None = None,
        hyperprior: Hyperprior = Hyperprior(),
        hierarchical: bool = False,
    ):
        self.collection = collection
        self.schema = schema or default_schema(collection)
        self.hyperprior = hyperprior
        self.hierarchical = hierarchical
        conc = list(collection.concurrent)
        hist = collection.historical_records()
        recs = conc + hist
        t = np.array([r.outcome for r in recs], dtype=float)
        if np.any(t <= 0) or not np.all(np.isfinite(t)):
            raise DomainError("survival times must be positive and finite")
        ev = np.array([r.event if r.event is not None else 1 for r in recs], dtype=float)
        X, cov_names = design_matrix(recs, self.schema)
        z = np.array([r.arm for r in conc] + [0] * len(hist), dtype=float)
        zh = np.array([r.arm for r in hist], dtype=float)
        wh = np.ones(len(hist)) if hierarchical else _powers_array(collection, powers)
        self.w = np.concatenate([np.ones(len(conc)), wh * (1.0 - zh)])
        active = self.w > 0
        self.t, self.event, self.X, self.z = t[active], ev[active], X[active], z[active]
        self.w = self.w[active]
        self.log_t = np.log(self.t)
        self.p = len(cov_names)
        study_idx = np.array([0] * len(conc) + [1 + h for h, recs_h in enumerate(collection.historical.values()) for _ in recs_h])
        self.study = study_idx[active]
        self.H = len(collection.historical)
        if hierarchical:
            intercepts = ("delta_c",) + tuple(f"delta_h[{s}]" for s in collection.historical)
        else:
            intercepts = ("delta",)
        self.names = ("alpha",) + intercepts + tuple(f"beta[{n}]" for n in cov_names) + ("theta",)
        if hierarchical:
            self.names += ("mu_delta", "tau2")
        self.positive = tuple(n in ("alpha", "tau2") for n in self.names)
        self.n_intercepts = len(intercepts)

    def _eta(self, P: NDArray[np.float64]) -> NDArray[np.float64]:
        k = 1 + self.n_intercepts
        intercept = P[:, 1:k][:, self.study] if self.hierarchical else P[:, [1]]
        beta = P[:, k : k + self.p]
        theta = P[:, k + self.p]
        return intercept + beta @ self.X.T + theta[:, None] * self.z[None, :]

    def log_likelihood(self, P: ArrayLike) -> NDArray[np.float64]:
        """Power-weighted censored Weibull log-likelihood."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        alpha = P[:, [0]]
        eta = self._eta(P)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            cum = np.exp(alpha * self.log_t + eta)
            terms = self.event * (np.log(alpha) + (alpha - 1) * self.log_t + eta) - cum
            ll = terms @ self.w
        return np.where(P[:, 0] > 0, ll, -np.inf)

    def log_prior(self, P: ArrayLike) -> NDArray[np.float64]:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        hp = self.hyperprior
        alpha = P[:, 0]
        k = 1 + self.n_intercepts + self.p + 1
        if self.hierarchical:
            loc = np.column_stack([P[:, 1 + self.n_intercepts : k], P[:, k]])
        else:
            loc = P[:, 1:k]
        lp = _location_logprior(loc, hp)
        if not hp.flat:
            lp = lp + math.log(2.0) + _normal_logpdf(alpha, hp.normal_variance)
        lp = np.where(alpha > 0, lp, -np.inf)
        if self.hierarchical:
            mu, tau2 = P[:, k], P[:, k + 1]
            lp = lp + _tau2_logprior(tau2, hp)
            with np.errstate(divide="ignore", invalid="ignore"):
                dev = P[:, 1 : 1 + self.n_intercepts] - mu[:, None]
                lp = lp + np.sum(-0.5 * (_LOG_2PI + np.log(tau2))[:, None] - 0.5 * dev * dev / tau2[:, None], axis=1)
        return lp

    def __call__(self, P: ArrayLike) -> NDArray[np.float64]:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        return self.log_prior(P) + self.log_likelihood(P)

    def gradient(self, point: ArrayLike) -> NDArray[np.float64]:
        """Analytic gradient of the full kernel (non-hierarchical layout)."""
        if self.hierarchical:
            raise NotImplementedError("gradient is provided for the non-hierarchical layout")
        x = np.asarray(point, dtype=float).reshape(-1)
        alpha = x[0]
        eta = self._eta(x[None, :])[0]
        cum = np.exp(alpha * self.log_t + eta)
        w = self.w
        d_alpha = np.sum(w * (self.event * (1.0 / alpha + self.log_t) - cum * self.log_t))
        d_eta = w * (self.event - cum)
        design = np.column_stack([np.ones_like(self.t), self.X, self.z])
        g = np.concatenate([[d_alpha], design.T @ d_eta])
        if not self.hyperprior.flat:
            g = g - x / self.hyperprior.normal_variance
        return g

    def log_kernel(self, point: Mapping[str, float] | ArrayLike) -> float:
        x = _point(point, self.names)
        val = float(self(x[None, :])[0])
        if not math.isfinite(val):
            eta = self._eta(x[None, :])[0]
            cum = np.exp(x[0] * self.log_t + eta)
            bad = np.flatnonzero(~np.isfinite(cum))
            idx = int(bad[0]) if bad.size else None
            raise NonFiniteKernelError(f"non-finite Weibull kernel (row {idx})", idx)
        return val

    def initial_point(self) -> NDArray[np.float64]:
        rate = max(self.event.sum(), 1.0) / self.t.sum()
        k = self.n_intercepts
        vec = [1.0] + [math.log(rate)] * k + [0.0] * self.p + [0.0]
        if self.hierarchical:
            vec += [math.log(rate), 1.0]
        return np.asarray(vec)

    def survival(self, t: ArrayLike, point: ArrayLike, x: ArrayLike | None = None, z: int = 0) -> NDArray[np.float64]:
        """S(t) = exp(-t**alpha * exp(eta)) for covariates ``x`` (default: concurrent mean) and arm ``z``."""
        pt = np.asarray(point, dtype=float).reshape(-1)
        if x is None:
            nc = len(self.collection.concurrent)
            x = self.X[:nc].mean(axis=0) if self.p else np.zeros(0)
        k = 1 + self.n_intercepts
        eta = pt[1] + np.dot(pt[k : k + self.p], np.asarray(x, dtype=float)) + z * pt[k + self.p]
        return np.exp(-np.asarray(t, dtype=float) ** pt[0] * math.exp(eta))


def weibull_log_kernel(
    params: WeibullModelParams,
    collection: StudyCollection,
    prior: PriorConstruction,
    schema: CovariateSchema | None = None,
    settings: WeightingSettings | None = None,
) -> float:
    powers = resolve_weights(prior, collection, schema, settings, model="weibull")
    model = WeibullModel(collection, powers.historical, schema, prior.hyperprior)
    return model.log_kernel(np.array([params.alpha, params.delta, *params.beta, params.theta]))


def _point(point: Mapping[str, float] | ArrayLike, names: Sequence[str]) -> NDArray[np.float64]:
    if isinstance(point, Mapping):
        return np.array([float(point[n]) for n in names])
    return np.asarray(point, dtype=float).reshape(-1)


# ---------------------------------------------------------------------------
# Power-prior strength
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PowerSelection:
    omega: float
    grid: NDArray[np.float64]
    log_criterion: NDArray[np.float64]
    concave: bool
    warning: str | None = None


@dataclass(frozen=True)
class PowerCriterion:
    """Log marginal likelihood of the concurrent data under an omega-power prior.

    Flat initial prior on the regression coefficients, known residual
    variance, and a flat prior on the treatment effect (which the historical
    controls carry no information about). Writing ``S`` for the concurrent
    information about the shared coefficients after integrating out
    ``theta``, the criterion is

        log L(c_hat | D) + log sqrt(2 pi / A_tt) + (p/2) log 2 pi - 1/2 log|S|
        + log N(b_hat ; b0_hat, S^-1 + (omega I0)^-1)

    i.e. the likelihood at the concurrent maximum minus an Occam penalty that
    grows with prior-data conflict.
    """

    b_hat: NDArray[np.float64]
    b0_hat: NDArray[np.float64]
    S: NDArray[np.float64]
    I0: NDArray[np.float64]
    constant: float
    empty: bool = False

    def __call__(self, omega: ArrayLike) -> NDArray[np.float64]:
        om = np.atleast_1d(np.asarray(omega, dtype=float))
        if self.empty:
            return np.full(om.shape, self.constant)
        out = np.full(om.shape, -np.inf)
        pos = om > 0
        if not pos.any():
            return out
        S_inv = np.linalg.inv(self.S)
        I0_inv = np.linalg.inv(self.I0)
        diff = self.b_hat - self.b0_hat
        V = S_inv[None] + I0_inv[None] / om[pos][:, None, None]
        _, logdet = np.linalg.slogdet(V)
        quad = np.einsum("i,ki->k", diff, np.linalg.solve(V, np.broadcast_to(diff, (len(V), len(diff)))[..., None])[..., 0])
        out[pos] = self.constant - 0.5 * (len(diff) * _LOG_2PI + logdet + quad)
        return out


def power_criterion(
    concurrent_X: ArrayLike,
    concurrent_z: ArrayLike | None,
    concurrent_y: ArrayLike,
    historical_X: ArrayLike,
    historical_y: ArrayLike,
    sigma2: float,
) -> PowerCriterion:
    """Build the closed-form criterion from design matrices.

    ``concurrent_X`` and ``historical_X`` hold the shared columns (intercept
    included); ``concurrent_z`` is the treatment column or None.
    """
    Xc = np.asarray(concurrent_X, dtype=float)
    yc = np.asarray(concurrent_y, dtype=float)
    Xh = np.asarray(historical_X, dtype=float).reshape(-1, Xc.shape[1])
    yh = np.asarray(historical_y, dtype=float)
    with_theta = concurrent_z is not None and np.any(np.asarray(concurrent_z) != 0)
    Xf = np.column_stack([Xc, concurrent_z]) if with_theta else Xc
    A = Xf.T @ Xf / sigma2
    if np.linalg.matrix_rank(A) < A.shape[0]:
        raise RankDeficientError("concurrent design is rank deficient")
    c_hat = np.linalg.solve(A * sigma2, Xf.T @ yc)
    r = yc - Xf @ c_hat
    n = len(yc)
    const = -0.5 * n * (_LOG_2PI + math.log(sigma2)) - 0.5 * float(r @ r) / sigma2
    p = Xc.shape[1]
    if with_theta:
        a_tt = A[-1, -1]
        S = A[:p, :p] - np.outer(A[:p, -1], A[-1, :p]) / a_tt
        const += 0.5 * (_LOG_2PI - math.log(a_tt))
        b_hat = c_hat[:p]
    else:
        S = A
        b_hat = c_hat
    sign, logdet_S = np.linalg.slogdet(S)
    const += 0.5 * p * _LOG_2PI - 0.5 * logdet_S
    if len(yh) == 0:
        return PowerCriterion(b_hat, b_hat, S, np.eye(p), const, empty=True)
    I0 = Xh.T @ Xh / sigma2
    if np.linalg.matrix_rank(I0) < p:
        raise RankDeficientError("historical design is rank deficient; the power prior is improper")
    b0_hat = np.linalg.solve(I0 * sigma2, Xh.T @ yh)
    return PowerCriterion(b_hat, b0_hat, S, I0, const)


def _concavity(values: NDArray[np.float64]) -> bool:
    finite = values[np.isfinite(values)]
    if finite.size < 3:
        return True
    d = np.sign(np.diff(finite))
    d = d[d != 0]
    # unimodal profile: increases then decreases
    return bool(np.sum(np.diff(d) > 0) == 0)


def optimal_power(
    collection: StudyCollection,
    model: str = "normal",
    grid_resolution: int = 1001,
    schema: CovariateSchema | None = None,
    sigma2: float | None = None,
    penalty: Callable[[NDArray[np.float64]], NDArray[np.float64]] | None = None,
) -> PowerSelection:
    """Grid maximizer of the power criterion over [0, 1].

    All historical controls are treated as one historical dataset; call once
    per study for study-specific powers. ``sigma2`` defaults to the ML
    residual variance of the concurrent regression. ``penalty`` is
    subtracted from the log criterion when given.
    """
    if model != "normal":
        raise ConfigurationError("the closed-form power criterion covers the normal model only")
    if grid_resolution < 2:
        raise ValueError("grid needs at least two points")
    schema = schema or default_schema(collection)
    conc = list(collection.concurrent)
    hist = [r for r in collection.historical_records() if r.arm == 0]
    grid = np.linspace(0.0, 1.0, grid_resolution)
    Xc, _ = design_matrix(conc, schema)
    Xc = np.column_stack([np.ones(len(conc)), Xc])
    zc = np.array([r.arm for r in conc], dtype=float)
    yc = np.array([r.outcome for r in conc], dtype=float)
    if sigma2 is None:
        Xf = np.column_stack([Xc, zc]) if zc.any() else Xc
        coef, *_ = np.linalg.lstsq(Xf, yc, rcond=None)
        sigma2 = float(np.mean((yc - Xf @ coef) ** 2))
    if not hist:
        return PowerSelection(0.0, grid, np.zeros_like(grid), True)
    Xh, _ = design_matrix(hist, schema)
    Xh = np.column_stack([np.ones(len(hist)), Xh])
    yh = np.array([r.outcome for r in hist], dtype=float)
    crit = power_criterion(Xc, zc, yc, Xh, yh, sigma2)
    values = crit(grid)
    if penalty is not None:
        values = values - np.asarray(penalty(grid), dtype=float)
    concave = _concavity(values)
    omega = float(grid[int(np.argmax(values))])
    msg = None
    if not concave:
        msg = "criterion profile is not unimodal; returning the grid maximizer"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return PowerSelection(omega, grid, values, concave, msg)


# ---------------------------------------------------------------------------
# Weight resolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResolvedPowers:
    historical: dict[str, NDArray[np.float64]] | None
    hierarchical: bool = False
    assignments: tuple[WeightAssignment, ...] = ()
    pp_power: dict[str, float] | None = None


def compute_assignments(
    collection: StudyCollection, schema: CovariateSchema, settings: WeightingSettings
) -> list[WeightAssignment]:
    if settings.route == "mahalanobis":
        return mahalanobis_weights(collection, schema, settings.quantile, settings.ridge)
    if settings.route in ("model", "empirical-bayes"):
        return model_weights(
            collection, schema, settings.quantile, "empirical-bayes", settings.ridge, settings.min_category_count
        )
    if settings.route in ("predictive", "posterior-predictive"):
        return model_weights(
            collection, schema, settings.quantile, "posterior-predictive", settings.ridge,
            settings.min_category_count, settings.niw,
        )
    raise ConfigurationError(f"unknown weighting route {settings.route!r}")


def resolve_weights(
    prior: PriorConstruction,
    collection: StudyCollection,
    schema: CovariateSchema | None = None,
    settings: WeightingSettings | None = None,
    model: str = "normal",
) -> ResolvedPowers:
    """Historical analysis powers per study for the chosen construction.

    NP: 0. FH: 1. PP: the study's optimal power. IW: raw weights.
    TIW: truncated weights. MAP: flagged as hierarchical, no powers.
    """
    kind = prior.kind
    sizes = {sid: len(recs) for sid, recs in collection.historical.items()}
    if kind is PriorKind.MAP:
        return ResolvedPowers(None, hierarchical=True)
    if kind is PriorKind.NP:
        return ResolvedPowers({s: np.zeros(n) for s, n in sizes.items()})
    if kind is PriorKind.FH:
        return ResolvedPowers({s: np.ones(n) for s, n in sizes.items()})
    if kind is PriorKind.PP:
        if prior.pp_power is not None:
            if isinstance(prior.pp_power, Mapping):
                pw = {s: float(prior.pp_power[s]) for s in sizes}
            else:
                pw = {s: float(prior.pp_power) for s in sizes}
        else:
            if model != "normal":
                raise ConfigurationError("PP with the Weibull model needs an explicit pp_power")
            schema = schema or default_schema(collection)
            pw = {}
            for sid, recs in collection.historical.items():
                sub = StudyCollection(collection.concurrent, {sid: recs})
                pw[sid] = optimal_power(sub, schema=schema).omega
        if any(not 0.0 <= v <= 1.0 for v in pw.values()):
            raise ConfigurationError("pp_power must lie in [0, 1]")
        return ResolvedPowers({s: np.full(n, pw[s]) for s, n in sizes.items()}, pp_power=pw)
    # IW / TIW
    if prior.weights is not None:
        assignments = list(prior.weights)
    elif settings is not None:
        assignments = compute_assignments(collection, schema or default_schema(collection), settings)
    else:
        raise ConfigurationError(f"{kind.value} needs weight assignments or weighting settings")
    powers = historical_powers(assignments, truncated=kind is PriorKind.TIW)
    out = {s: powers.get(s, np.zeros(n)) for s, n in sizes.items()}
    return ResolvedPowers(out, assignments=tuple(assignments))


# ---------------------------------------------------------------------------
# Starting points
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModeFit:
    point: NDArray[np.float64]  # natural scale
    proposal: NDArray[np.float64]  # Cholesky factor on the sampler's unconstrained scale
    converged: bool


def _numeric_hessian(f: Callable[[NDArray[np.float64]], float], u: NDArray[np.float64]) -> NDArray[np.float64]:
    d = len(u)
    h = 1e-4 * np.maximum(1.0, np.abs(u))
    H = np.empty((d, d))
    f0 = f(u)
    for i in range(d):
        for j in range(i, d):
            ei = np.zeros(d)
            ej = np.zeros(d)
            ei[i], ej[j] = h[i], h[j]
            if i == j:
                H[i, i] = (f(u + ei) - 2 * f0 + f(u - ei)) / h[i] ** 2
            else:
                H[i, j] = H[j, i] = (f(u + ei + ej) - f(u + ei - ej) - f(u - ei + ej) + f(u - ei - ej)) / (4 * h[i] * h[j])
    return H


def posterior_mode(kernel: Callable, start: ArrayLike, positive: Sequence[bool] | None = None) -> ModeFit:
    """Maximize the kernel on the sampler's unconstrained scale (log for positive parameters).

    The log-Jacobian is included so the mode and the inverse-Hessian proposal
    match what the sampler targets. Falls back to ``start`` if the optimizer
    leaves the support.
    """
    x0 = np.asarray(start, dtype=float).reshape(-1)
    pos = np.asarray(positive if positive is not None else getattr(kernel, "positive"), dtype=bool)
    u0 = x0.copy()
    u0[pos] = np.log(x0[pos])

    def neg(u: NDArray[np.float64]) -> float:
        x = u.copy()
        x[pos] = np.exp(u[pos])
        with np.errstate(all="ignore"):
            v = float(np.asarray(kernel(x[None, :]))[0]) + float(u[pos].sum())
        return -v if math.isfinite(v) else 1e300

    res = optimize.minimize(neg, u0, method="BFGS", options={"maxiter": 2000, "gtol": 1e-6})
    u = res.x if res.fun < neg(u0) else u0
    x = u.copy()
    x[pos] = np.exp(u[pos])
    H = _numeric_hessian(neg, u)
    try:
        chol = np.linalg.cholesky(np.linalg.inv(H))
    except np.linalg.LinAlgError:
        cov = np.asarray(res.hess_inv, dtype=float)
        chol = np.diag(np.sqrt(np.clip(np.abs(np.diag(cov)), 1e-8, None)))
    return ModeFit(x, chol, bool(res.success))
