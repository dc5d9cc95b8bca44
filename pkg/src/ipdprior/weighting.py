"""Per-subject similarity weights for historical patients.

Two routes produce a raw score for every subject:

* Mahalanobis distance of the continuous similarity vector to the
  concurrent study's sample mean and covariance;
* a similarity model over the concurrent control arm (a multinomial over
  categorical level combinations with a Gaussian continuous block per
  category), evaluated either at plug-in estimates or as a closed-form
  posterior predictive density.

Raw scores are mapped to [0, 1] with a min-max transform whose extrema are
pooled over ALL scored subjects, concurrent ones included. Distances map to
``1 - G(d)`` and densities to ``G(p)``. The truncation threshold is an
empirical quantile (numpy's default linear interpolation) of the
concurrent subjects' weights; historical weights at or below it are
zeroed. Concurrent subjects always enter the analysis with power one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import gammaln

from .data_model import (
    CovariateSchema,
    StudyCollection,
    SubjectRecord,
    categorical_radices,
    similarity_matrix,
)

DEFAULT_QUANTILE = 0.05
DEFAULT_MIN_CATEGORY_COUNT = 5
_RELATIVE_RIDGE = 1e-8


class NumericalRankError(np.linalg.LinAlgError):
    """Covariance is singular or too small a sample to estimate it."""


class Orientation(str, Enum):
    DISTANCE = "distance-like"
    SIMILARITY = "similarity-like"


class ScoreMode(str, Enum):
    EMPIRICAL_BAYES = "empirical-bayes"
    POSTERIOR_PREDICTIVE = "posterior-predictive"


@dataclass(frozen=True)
class WeightAssignment:
    """Weight of one subject.

    ``scored`` is False for rows that never receive a similarity score
    (historical treatment-arm subjects, and concurrent treatment-arm
    subjects on the similarity-model route); those carry a NaN raw score
    and zero weights.
    """

    study_id: str
    index: int
    raw_score: float
    weight: float
    truncated_weight: float
    threshold: float
    concurrent: bool
    scored: bool = True


@dataclass(frozen=True)
class TransformContext:
    pooled_min: float
    pooled_max: float

    @property
    def degenerate(self) -> bool:
        return self.pooled_max <= self.pooled_min

    def g(self, x: ArrayLike) -> NDArray[np.float64]:
        """Min-max map onto [0, 1]; identically 0 when the extrema coincide."""
        x = np.asarray(x, dtype=float)
        if self.degenerate:
            return np.zeros_like(x)
        return (x - self.pooled_min) / (self.pooled_max - self.pooled_min)

    def g_inverse(self, u: ArrayLike) -> NDArray[np.float64]:
        u = np.asarray(u, dtype=float)
        return self.pooled_min + u * (self.pooled_max - self.pooled_min)


# ---------------------------------------------------------------------------
# Mahalanobis route
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MahalanobisReference:
    mean: NDArray[np.float64]
    covariance: NDArray[np.float64]
    regularization: float = 0.0
    _chol: NDArray[np.float64] = field(repr=False, compare=False, default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self._chol is None:
            try:
                chol = np.linalg.cholesky(self.covariance)
            except np.linalg.LinAlgError:
                raise NumericalRankError(
                    "covariance is not positive definite; increase the ridge"
                ) from None
            object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return len(self.mean)

    def distances(self, points: ArrayLike) -> NDArray[np.float64]:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[-1] != self.dim:
            raise ValueError(f"dimension {pts.shape[-1]} does not match reference dimension {self.dim}")
        z = np.linalg.solve(self._chol, (pts - self.mean).T)
        return np.sqrt(np.sum(z * z, axis=0))


def default_ridge(cov: NDArray[np.float64]) -> float:
    return _RELATIVE_RIDGE * float(np.mean(np.diag(cov))) if cov.size else 0.0


def reference_from_points(points: ArrayLike, ridge: float | None = None) -> MahalanobisReference:
    pts = np.asarray(points, dtype=float)
    n, d = pts.shape
    if n < d + 1:
        raise NumericalRankError(
            f"{n} points cannot support a {d}-dimensional covariance (need at least {d + 1})"
        )
    mean = pts.mean(axis=0)
    cov = np.atleast_2d(np.cov(pts, rowvar=False, ddof=1))
    if ridge is None:
        ridge = default_ridge(cov)
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    cov = cov + ridge * np.eye(d)
    return MahalanobisReference(mean=mean, covariance=cov, regularization=float(ridge))


def fit_mahalanobis_reference(
    concurrent: Sequence[SubjectRecord], schema: CovariateSchema, ridge: float | None = None
) -> MahalanobisReference:
    """Sample mean and (n - 1)-denominator covariance of the concurrent study, plus ``ridge * I``.

    ``ridge=None`` uses 1e-8 times the mean diagonal of the sample covariance.
    """
    cont, _ = similarity_matrix(concurrent, schema)
    return reference_from_points(cont, ridge)


def mahalanobis_distance(v: ArrayLike, ref: MahalanobisReference) -> float:
    return float(ref.distances(np.asarray(v, dtype=float)[None, :])[0])


def pooled_transform(
    scores: ArrayLike, orientation: Orientation | str
) -> tuple[NDArray[np.float64], TransformContext]:
    """Weights for a pooled score vector; see module docstring for orientation."""
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise ValueError("cannot transform an empty score set")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    ctx = TransformContext(float(s.min()), float(s.max()))
    if ctx.degenerate:
        return np.zeros_like(s), ctx
    g = ctx.g(s)
    if Orientation(orientation) is Orientation.DISTANCE:
        return 1.0 - g, ctx
    return g, ctx


def transform_scores(
    raw: Sequence[tuple[tuple[str, int], float]], orientation: Orientation | str
) -> list[WeightAssignment]:
    """Map ``((study_id, index), score)`` pairs to weights; threshold left as NaN."""
    if not raw:
        raise ValueError("cannot transform an empty score set")
    weights, _ = pooled_transform([s for _, s in raw], orientation)
    return [
        WeightAssignment(sid, idx, float(s), float(w), float(w), math.nan, concurrent=False)
        for ((sid, idx), s), w in zip(raw, weights)
    ]


def compute_threshold(concurrent_weights: ArrayLike, quantile: float = DEFAULT_QUANTILE) -> float:
    """Linear-interpolation empirical quantile of the concurrent weights."""
    if not 0.0 < quantile < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {quantile}")
    w = np.asarray(concurrent_weights, dtype=float)
    if w.size == 0:
        raise ValueError("no concurrent weights to calibrate the threshold")
    return float(np.quantile(w, quantile, method="linear"))


def truncate(weights: ArrayLike, threshold: float) -> NDArray[np.float64]:
    w = np.asarray(weights, dtype=float)
    return np.where(w > threshold, w, 0.0)


@dataclass(frozen=True)
class WeightArrays:
    """Array form of a weighting pass (concurrent and pooled historical)."""

    concurrent_scores: NDArray[np.float64]
    concurrent_weights: NDArray[np.float64]
    historical_scores: NDArray[np.float64]
    historical_weights: NDArray[np.float64]
    threshold: float
    context: TransformContext

    @property
    def historical_truncated(self) -> NDArray[np.float64]:
        return truncate(self.historical_weights, self.threshold)


def weights_from_scores(
    concurrent_scores: ArrayLike,
    historical_scores: ArrayLike,
    orientation: Orientation | str,
    quantile: float = DEFAULT_QUANTILE,
) -> WeightArrays:
    cs = np.asarray(concurrent_scores, dtype=float)
    hs = np.asarray(historical_scores, dtype=float)
    w, ctx = pooled_transform(np.concatenate([cs, hs]), orientation)
    wc, wh = w[: len(cs)], w[len(cs) :]
    rho = compute_threshold(wc, quantile)
    return WeightArrays(cs, wc, hs, wh, rho, ctx)


def mahalanobis_weight_arrays(
    concurrent_points: ArrayLike,
    historical_points: ArrayLike,
    quantile: float = DEFAULT_QUANTILE,
    ridge: float | None = None,
) -> WeightArrays:
    ref = reference_from_points(concurrent_points, ridge)
    hp = np.asarray(historical_points, dtype=float).reshape(-1, ref.dim)
    return weights_from_scores(
        ref.distances(concurrent_points), ref.distances(hp) if len(hp) else np.empty(0),
        Orientation.DISTANCE, quantile,
    )


def _assemble(
    collection: StudyCollection,
    conc_mask: NDArray[np.bool_],
    hist_mask: NDArray[np.bool_],
    arrays: WeightArrays,
) -> list[WeightAssignment]:
    out: list[WeightAssignment] = []
    rho = arrays.threshold
    it = iter(zip(arrays.concurrent_scores, arrays.concurrent_weights))
    for i, rec in enumerate(collection.concurrent):
        if conc_mask[i]:
            s, w = next(it)
            out.append(WeightAssignment(rec.study_id, i, float(s), float(w), float(truncate(w, rho)), rho, True))
        else:
            out.append(WeightAssignment(rec.study_id, i, math.nan, 0.0, 0.0, rho, True, scored=False))
    hist = iter(zip(arrays.historical_scores, arrays.historical_weights))
    j = 0
    for sid, recs in collection.historical.items():
        for i, rec in enumerate(recs):
            if hist_mask[j]:
                s, w = next(hist)
                out.append(WeightAssignment(sid, i, float(s), float(w), float(truncate(w, rho)), rho, False))
            else:
                out.append(WeightAssignment(sid, i, math.nan, 0.0, 0.0, rho, False, scored=False))
            j += 1
    return out


def mahalanobis_weights(
    collection: StudyCollection,
    schema: CovariateSchema,
    quantile: float = DEFAULT_QUANTILE,
    ridge: float | None = None,
) -> list[WeightAssignment]:
    """Distance-route weights for every subject in the collection.

    The reference is fitted on all concurrent subjects (both arms).
    Historical treatment-arm records are not scored.
    """
    conc = list(collection.concurrent)
    hist = collection.historical_records()
    hist_mask = np.array([r.arm == 0 for r in hist], dtype=bool)
    cp, cat = similarity_matrix(conc, schema)
    if cat.shape[1]:
        raise ValueError(
            "Mahalanobis weights need continuous-only similarity vectors (categorical "
            "covariates or event flags present); use the similarity-model route"
        )
    hp, _ = similarity_matrix([r for r, m in zip(hist, hist_mask) if m], schema)
    arrays = mahalanobis_weight_arrays(cp, hp.reshape(-1, cp.shape[1]), quantile, ridge)
    return _assemble(collection, np.ones(len(conc), dtype=bool), hist_mask, arrays)


# ---------------------------------------------------------------------------
# Similarity-model route
# ---------------------------------------------------------------------------


def category_codes(cat: NDArray[np.int64], radices: Sequence[int]) -> NDArray[np.int64]:
    """Mixed-radix code of each row's level combination."""
    cat = np.asarray(cat, dtype=np.int64).reshape(len(cat), -1)
    code = np.zeros(len(cat), dtype=np.int64)
    for j, r in enumerate(radices):
        code = code * r + cat[:, j]
    return code


def _mvn_logpdf(x: NDArray[np.float64], mean: NDArray[np.float64], cov: NDArray[np.float64]) -> NDArray[np.float64]:
    d = len(mean)
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, (x - mean).T)
    return -0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(chol))) - 0.5 * d * math.log(2 * math.pi)


def _mvt_logpdf(
    x: NDArray[np.float64], loc: NDArray[np.float64], shape: NDArray[np.float64], df: float
) -> NDArray[np.float64]:
    d = len(loc)
    chol = np.linalg.cholesky(shape)
    z = np.linalg.solve(chol, (x - loc).T)
    maha = np.sum(z * z, axis=0)
    return (
        gammaln((df + d) / 2)
        - gammaln(df / 2)
        - 0.5 * d * math.log(df * math.pi)
        - np.sum(np.log(np.diag(chol)))
        - 0.5 * (df + d) * np.log1p(maha / df)
    )


@dataclass(frozen=True)
class SimilarityModel:
    """Plug-in multinomial-by-Gaussian model of the concurrent controls."""

    category_probs: NDArray[np.float64]
    component_means: NDArray[np.float64]
    component_covariances: NDArray[np.float64]
    pooled_covariance: NDArray[np.float64]
    radices: tuple[int, ...]
    counts: NDArray[np.int64]

    @property
    def n_categories(self) -> int:
        return len(self.category_probs)

    def log_density(self, cont: ArrayLike, codes: ArrayLike) -> NDArray[np.float64]:
        x = np.asarray(cont, dtype=float).reshape(len(np.atleast_1d(codes)), -1)
        codes = np.asarray(codes, dtype=np.int64).reshape(-1)
        out = np.full(len(codes), -np.inf)
        for k in np.unique(codes):
            p = self.category_probs[k]
            if p <= 0:
                continue
            rows = codes == k
            out[rows] = math.log(p) + _mvn_logpdf(
                x[rows], self.component_means[k], self.component_covariances[k]
            )
        return out

    def density(self, cont: ArrayLike, codes: ArrayLike) -> NDArray[np.float64]:
        return np.exp(self.log_density(cont, codes))


def _pooled_within(x: NDArray[np.float64], codes: NDArray[np.int64]) -> NDArray[np.float64] | None:
    d = x.shape[1]
    scatter = np.zeros((d, d))
    dof = 0
    for k in np.unique(codes):
        xk = x[codes == k]
        if len(xk) >= 2:
            r = xk - xk.mean(axis=0)
            scatter += r.T @ r
            dof += len(xk) - 1
    if dof < d:
        return None
    return scatter / dof


def fit_similarity_arrays(
    cont: ArrayLike,
    codes: ArrayLike,
    radices: Sequence[int],
    ridge: float | None = None,
    min_category_count: int = DEFAULT_MIN_CATEGORY_COUNT,
) -> SimilarityModel:
    x = np.asarray(cont, dtype=float)
    codes = np.asarray(codes, dtype=np.int64)
    n, d = x.shape
    K = int(np.prod(radices)) if len(radices) else 1
    if n < 2:
        raise NumericalRankError("need at least two subjects to fit the similarity model")
    total_cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    if ridge is None:
        ridge = default_ridge(total_cov)
    pooled = _pooled_within(x, codes)
    if pooled is None:
        pooled = total_cov
    eye = np.eye(d)
    pooled = pooled + ridge * eye
    try:
        np.linalg.cholesky(pooled)
    except np.linalg.LinAlgError:
        raise NumericalRankError("pooled covariance is singular; increase the ridge") from None
    counts = np.bincount(codes, minlength=K)
    probs = counts / n
    grand_mean = x.mean(axis=0)
    means = np.tile(grand_mean, (K, 1))
    covs = np.tile(pooled, (K, 1, 1))
    for k in np.flatnonzero(counts):
        xk = x[codes == k]
        means[k] = xk.mean(axis=0)
        if counts[k] >= max(min_category_count, 2):
            ck = np.atleast_2d(np.cov(xk, rowvar=False, ddof=1)) + ridge * eye
            try:
                np.linalg.cholesky(ck)
                covs[k] = ck
            except np.linalg.LinAlgError:
                pass  # keep the pooled fallback
    return SimilarityModel(probs, means, covs, pooled, tuple(radices), counts)


def _category_inputs(
    records: Sequence[SubjectRecord], schema: CovariateSchema
) -> tuple[NDArray[np.float64], NDArray[np.int64], tuple[int, ...]]:
    cont, cat = similarity_matrix(records, schema)
    with_event = any(r.event is not None for r in records)
    radices = categorical_radices(schema, with_event)
    if cat.shape[1] != len(radices):
        raise ValueError("event flags must be present on all records or none")
    codes = category_codes(cat, radices) if radices else np.zeros(len(records), dtype=np.int64)
    return cont, codes, radices


def fit_similarity_model(
    concurrent: Sequence[SubjectRecord],
    schema: CovariateSchema,
    ridge: float | None = None,
    min_category_count: int = DEFAULT_MIN_CATEGORY_COUNT,
) -> SimilarityModel:
    """Category proportions and within-category Gaussian moments.

    Categories with fewer than ``min_category_count`` subjects use the pooled
    within-category covariance; empty categories get probability zero.
    """
    cont, codes, radices = _category_inputs(concurrent, schema)
    return fit_similarity_arrays(cont, codes, radices, ridge, min_category_count)


def similarity_density(record: SubjectRecord, model: SimilarityModel, schema: CovariateSchema) -> float:
    cont, codes, _ = _category_inputs([record], schema)
    return float(model.density(cont, codes)[0])


@dataclass(frozen=True)
class NIWPrior:
    """Dirichlet and normal-inverse-Wishart hyperparameters.

    ``None`` entries default to data-based values: ``df = dim + 2``,
    ``scale`` = sample covariance, ``mean`` = sample mean.
    """

    concentration: float = 1.0
    kappa: float = 0.01
    df: float | None = None
    scale: NDArray[np.float64] | None = None
    mean: NDArray[np.float64] | None = None


@dataclass(frozen=True)
class PredictiveModel:
    """Closed-form posterior predictive of the similarity model."""

    log_category_probs: NDArray[np.float64]
    locs: NDArray[np.float64]
    shapes: NDArray[np.float64]
    dfs: NDArray[np.float64]
    radices: tuple[int, ...]

    def log_density(self, cont: ArrayLike, codes: ArrayLike) -> NDArray[np.float64]:
        codes = np.asarray(codes, dtype=np.int64).reshape(-1)
        x = np.asarray(cont, dtype=float).reshape(len(codes), -1)
        out = np.empty(len(codes))
        for k in np.unique(codes):
            rows = codes == k
            out[rows] = self.log_category_probs[k] + _mvt_logpdf(
                x[rows], self.locs[k], self.shapes[k], self.dfs[k]
            )
        return out

    def density(self, cont: ArrayLike, codes: ArrayLike) -> NDArray[np.float64]:
        return np.exp(self.log_density(cont, codes))


def fit_predictive_arrays(
    cont: ArrayLike, codes: ArrayLike, radices: Sequence[int], prior: NIWPrior | None = None
) -> PredictiveModel:
    prior = prior or NIWPrior()
    x = np.asarray(cont, dtype=float)
    codes = np.asarray(codes, dtype=np.int64)
    n, d = x.shape
    if d == 0:
        raise ValueError("posterior-predictive weights need a non-empty continuous block")
    K = int(np.prod(radices)) if len(radices) else 1
    nu0 = float(d + 2 if prior.df is None else prior.df)
    if nu0 <= d - 1:
        raise ValueError(f"inverse-Wishart degrees of freedom {nu0} must exceed dim - 1 = {d - 1}")
    if prior.concentration <= 0 or prior.kappa <= 0:
        raise ValueError("concentration and kappa must be positive")
    m0 = x.mean(axis=0) if prior.mean is None else np.asarray(prior.mean, dtype=float)
    if prior.scale is None:
        if n < d + 1:
            raise NumericalRankError("too few subjects for a data-based prior scale; pass one explicitly")
        psi0 = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
        psi0 = psi0 + default_ridge(psi0) * np.eye(d)
    else:
        psi0 = np.atleast_2d(np.asarray(prior.scale, dtype=float))
    k0 = float(prior.kappa)
    counts = np.bincount(codes, minlength=K)
    a = float(prior.concentration)
    log_p = np.log((counts + a) / (n + K * a))
    locs = np.empty((K, d))
    shapes = np.empty((K, d, d))
    dfs = np.empty(K)
    for k in range(K):
        xk = x[codes == k]
        nk = len(xk)
        kn, nun = k0 + nk, nu0 + nk
        if nk:
            xbar = xk.mean(axis=0)
            r = xk - xbar
            dev = (xbar - m0)[:, None]
            psin = psi0 + r.T @ r + (k0 * nk / kn) * (dev @ dev.T)
            mn = (k0 * m0 + nk * xbar) / kn
        else:
            psin, mn = psi0, m0
        df = nun - d + 1
        locs[k] = mn
        shapes[k] = psin * (kn + 1) / (kn * df)
        dfs[k] = df
    return PredictiveModel(log_p, locs, shapes, dfs, tuple(radices))


def predictive_density(
    record: SubjectRecord,
    concurrent: Sequence[SubjectRecord],
    schema: CovariateSchema,
    prior: NIWPrior | None = None,
) -> float:
    cont, codes, radices = _category_inputs(concurrent, schema)
    model = fit_predictive_arrays(cont, codes, radices, prior)
    rc, rcodes, _ = _category_inputs([record], schema)
    return float(model.density(rc, rcodes)[0])


def model_weights(
    collection: StudyCollection,
    schema: CovariateSchema,
    quantile: float = DEFAULT_QUANTILE,
    mode: ScoreMode | str = ScoreMode.EMPIRICAL_BAYES,
    ridge: float | None = None,
    min_category_count: int = DEFAULT_MIN_CATEGORY_COUNT,
    prior: NIWPrior | None = None,
) -> list[WeightAssignment]:
    """Similarity-model weights, fitted on concurrent controls only.

    Concurrent controls and historical controls are scored; treatment-arm
    subjects are left unscored. The threshold comes from the concurrent
    controls' weights.
    """
    mode = ScoreMode(mode)
    conc_mask = np.array([r.arm == 0 for r in collection.concurrent], dtype=bool)
    hist = collection.historical_records()
    hist_mask = np.array([r.arm == 0 for r in hist], dtype=bool)
    ctrl = [r for r, m in zip(collection.concurrent, conc_mask) if m]
    hctrl = [r for r, m in zip(hist, hist_mask) if m]
    cont, codes, radices = _category_inputs(ctrl, schema)
    if mode is ScoreMode.EMPIRICAL_BAYES:
        model = fit_similarity_arrays(cont, codes, radices, ridge, min_category_count)
    else:
        model = fit_predictive_arrays(cont, codes, radices, prior)
    c_scores = model.density(cont, codes)
    if hctrl:
        hc, hcodes, _ = _category_inputs(hctrl, schema)
        h_scores = model.density(hc, hcodes)
    else:
        h_scores = np.empty(0)
    arrays = weights_from_scores(c_scores, h_scores, Orientation.SIMILARITY, quantile)
    return _assemble(collection, conc_mask, hist_mask, arrays)


def historical_powers(assignments: Sequence[WeightAssignment], truncated: bool = True) -> dict[str, NDArray[np.float64]]:
    """Per-study arrays of historical weights, in record order."""
    out: dict[str, list[float]] = {}
    for a in assignments:
        if a.concurrent:
            continue
        out.setdefault(a.study_id, []).append(a.truncated_weight if truncated else a.weight)
    return {k: np.asarray(v) for k, v in out.items()}


def surviving_fractions(assignments: Sequence[WeightAssignment]) -> dict[str, float]:
    """Fraction of scored subjects per study whose truncated weight is positive."""
    tally: dict[str, list[int]] = {}
    for a in assignments:
        if not a.scored:
            continue
        t = tally.setdefault(a.study_id, [0, 0])
        t[0] += a.truncated_weight > 0
        t[1] += 1
    return {k: v[0] / v[1] for k, v in tally.items()}
