import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from ipdprior.data_model import CovariateSchema, StudyCollection, SubjectRecord
from ipdprior.simulation import ScenarioConfig, generate_replication
from ipdprior.weighting import (
    NIWPrior,
    NumericalRankError,
    SimilarityModel,
    compute_threshold,
    fit_mahalanobis_reference,
    fit_predictive_arrays,
    fit_similarity_arrays,
    fit_similarity_model,
    mahalanobis_distance,
    mahalanobis_weights,
    model_weights,
    pooled_transform,
    predictive_density,
    reference_from_points,
    similarity_density,
    surviving_fractions,
    transform_scores,
    truncate,
)

XY = CovariateSchema(continuous_names=("x",))


def records(points, sid="C", arms=None):
    arms = arms if arms is not None else [0] * len(points)
    return tuple(SubjectRecord(sid, a, float(p[-1]), None, tuple(float(v) for v in p[:-1])) for p, a in zip(points, arms))


# -- reference and distance ------------------------------------------------


def test_reference_moments_by_hand():
    ref = reference_from_points([[0, 0], [2, 0], [0, 2], [2, 2]], ridge=0.0)
    assert np.allclose(ref.mean, [1, 1])
    assert np.allclose(ref.covariance, np.diag([4 / 3, 4 / 3]), atol=1e-15)


def test_reference_from_records_uses_outcome_column():
    recs = records([[0, 0], [2, 0], [0, 2], [2, 2]])
    ref = fit_mahalanobis_reference(recs, XY, ridge=0.0)
    assert np.allclose(ref.covariance, np.diag([4 / 3, 4 / 3]), atol=1e-15)


def test_repeated_point_leaves_only_the_ridge():
    ref = reference_from_points([[1.0, 2.0]] * 3, ridge=1e-6)
    assert np.allclose(ref.covariance, 1e-6 * np.eye(2), rtol=0, atol=1e-20)


def test_too_few_points_is_rank_error():
    with pytest.raises(NumericalRankError):
        reference_from_points(np.zeros((2, 3)), ridge=0.0)
    with pytest.raises(NumericalRankError):
        reference_from_points([[1.0, 2.0]] * 3, ridge=0.0)


def test_distance_examples():
    ref = reference_from_points([[0, 0], [2, 0], [0, 2], [2, 2]], ridge=0.0)
    assert mahalanobis_distance(ref.mean, ref) == 0.0
    from ipdprior.weighting import MahalanobisReference

    r2 = MahalanobisReference(np.zeros(2), np.diag([9.0, 1.0]))
    assert mahalanobis_distance([3.0, 0.0], r2) == pytest.approx(1.0, rel=1e-15)
    r3 = MahalanobisReference(np.zeros(2), np.eye(2))
    assert mahalanobis_distance([1.0, 1.0], r3) == pytest.approx(math.sqrt(2), rel=1e-15)


def well_conditioned(rng, d):
    while True:
        A = rng.standard_normal((d, d))
        if np.linalg.cond(A) < 1e3:
            return A


def test_affine_invariance_random_maps():
    rng = np.random.default_rng(11)
    for _ in range(25):
        d = int(rng.integers(1, 5))
        pts = rng.standard_normal((30, d)) @ rng.standard_normal((d, d))
        other = rng.standard_normal((20, d)) * 3
        A, b = well_conditioned(rng, d), rng.standard_normal(d) * 5
        d0 = reference_from_points(pts, ridge=0.0).distances(other)
        d1 = reference_from_points(pts @ A.T + b, ridge=0.0).distances(other @ A.T + b)
        assert np.max(np.abs(d1 - d0) / d0) < 1e-8


# -- transform and threshold ----------------------------------------------


def test_transform_examples():
    raw = [(("C", i), s) for i, s in enumerate([0.0, 5.0, 10.0])]
    assert [a.weight for a in transform_scores(raw, "distance-like")] == [1.0, 0.5, 0.0]
    dens = [(("C", i), s) for i, s in enumerate([0.1, 0.2, 0.4])]
    w = [a.weight for a in transform_scores(dens, "similarity-like")]
    assert w[0] == 0.0 and w[2] == 1.0 and w[1] == pytest.approx(1 / 3, rel=1e-14)
    same = [(("C", i), 2.5) for i in range(4)]
    assert [a.weight for a in transform_scores(same, "distance-like")] == [0.0] * 4
    with pytest.raises(ValueError):
        transform_scores([], "distance-like")


def test_threshold_examples():
    w = np.linspace(0.1, 1.0, 10)
    # linear interpolation: position 0.05 * 9 = 0.45 between 0.1 and 0.2
    assert compute_threshold(w, 0.05) == pytest.approx(0.145, abs=1e-15)
    assert compute_threshold([0.3] * 7, 0.4) == 0.3
    for q in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            compute_threshold(w, q)


score_sets = arrays(np.float64, st.integers(2, 60), elements=st.floats(0, 1e3, allow_nan=False))


@given(score_sets)
def test_pooled_extremes_get_exact_weights(s):
    assume(s.max() > s.min())
    w, _ = pooled_transform(s, "distance-like")
    assert w[np.argmin(s)] == 1.0 and w[np.argmax(s)] == 0.0
    w2, _ = pooled_transform(s, "similarity-like")
    assert w2[np.argmin(s)] == 0.0 and w2[np.argmax(s)] == 1.0


@given(score_sets)
def test_weights_monotone_in_score(s):
    w, _ = pooled_transform(s, "distance-like")
    order = np.argsort(s, kind="stable")
    assert np.all(np.diff(w[order]) <= 0)
    assert np.all((w >= 0) & (w <= 1))


@given(score_sets, st.floats(0.001, 0.999))
def test_threshold_equivalence(s, omega0):
    assume(s.max() > s.min())
    w, ctx = pooled_transform(s, "distance-like")
    cut = ctx.g_inverse(1.0 - omega0)
    # ignore scores that sit on the cut to within rounding
    assume(np.all(np.abs(s - cut) > 1e-9 * max(1.0, ctx.pooled_max)))
    assert np.array_equal(w > omega0, s < cut)


@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1)), st.floats(0, 1))
def test_truncation_idempotent_and_strict(w, rho):
    t = truncate(w, rho)
    assert np.array_equal(truncate(t, rho), t)
    assert np.all((t == 0) | ((t > rho) & (t == w)))


# -- Mahalanobis weights ---------------------------------------------------


def _two_study(rng, n_c=40, n_h=40, shift=0.0):
    c = rng.standard_normal((n_c, 2))
    h = rng.standard_normal((n_h, 2)) + shift
    return StudyCollection(records(c, "C", arms=list(rng.integers(0, 2, n_c))), {"H": records(h, "H")})


def test_mahalanobis_weights_structure():
    rng = np.random.default_rng(3)
    col = _two_study(rng)
    ref = fit_mahalanobis_reference(col.concurrent, XY)
    centre = SubjectRecord("H", 0, float(ref.mean[1]), None, (float(ref.mean[0]),))
    far = SubjectRecord("H", 0, 50.0, None, (50.0,))
    col = StudyCollection(col.concurrent, {"H": col.historical["H"] + (centre, far)})
    out = mahalanobis_weights(col, XY)
    hist = [a for a in out if not a.concurrent]
    assert hist[-2].weight == 1.0 and hist[-2].raw_score == 0.0
    assert hist[-1].weight == 0.0 and hist[-1].truncated_weight == 0.0
    rho = out[0].threshold
    conc_w = [a.weight for a in out if a.concurrent]
    assert rho == compute_threshold(conc_w, 0.05)
    assert all(a.threshold == rho for a in out)


def test_mahalanobis_route_rejects_categoricals():
    s = CovariateSchema(("x",), ("g",), {"g": ("a", "b")})
    recs = tuple(SubjectRecord("C", 0, float(i), None, (float(i % 3),), ("a",)) for i in range(5))
    with pytest.raises(ValueError, match="similarity-model"):
        mahalanobis_weights(StudyCollection(recs, {}), s)


def test_unexchangeable_covariate_shift_truncates_nearly_everyone():
    cfg = ScenarioConfig.named("unex1", n_historical=10_000, base_seed=5)
    col = generate_replication(cfg, 0)
    frac = surviving_fractions(mahalanobis_weights(col, XY))["historical"]
    assert frac < 0.05


# -- similarity model ------------------------------------------------------


def test_category_proportions_and_fallbacks():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((100, 2))
    codes = np.array([0] * 30 + [1] * 70)
    m = fit_similarity_arrays(x, codes, (3,), ridge=0.0)
    assert m.category_probs.tolist() == [0.3, 0.7, 0.0]
    assert abs(m.category_probs.sum() - 1) < 1e-12
    assert m.density(np.zeros((1, 2)), [2])[0] == 0.0
    codes1 = np.array([0] * 99 + [1])
    m1 = fit_similarity_arrays(x, codes1, (2,), ridge=0.0)
    assert np.array_equal(m1.component_covariances[1], m1.pooled_covariance)
    assert np.allclose(m1.component_means[1], x[99])


def test_similarity_density_at_mode():
    m = SimilarityModel(
        np.array([0.5, 0.5]), np.zeros((2, 2)), np.tile(np.eye(2), (2, 1, 1)), np.eye(2), (2,), np.array([1, 1])
    )
    assert m.density(np.zeros((1, 2)), [0])[0] == pytest.approx(0.5 / (2 * math.pi), rel=1e-14)


def test_continuous_only_model_is_a_single_gaussian():
    rng = np.random.default_rng(1)
    pts = rng.standard_normal((50, 2))
    m = fit_similarity_model(records(pts), XY, ridge=0.0)
    r = SubjectRecord("H", 0, 0.3, None, (-0.2,))
    expected = stats.multivariate_normal(pts.mean(axis=0), np.cov(pts, rowvar=False)).pdf([-0.2, 0.3])
    assert similarity_density(r, m, XY) == pytest.approx(expected, rel=1e-12)


def _cat_collection(rng, order):
    levels = {"g": ("a", "b"), "k": ("u", "v", "w")}
    out = []
    for sid, n, arms in (("C", 80, True), ("H", 60, False)):
        recs = []
        for _ in range(n):
            g, k = str(rng.choice(levels["g"])), str(rng.choice(levels["k"]))
            cats = (g, k) if order == ("g", "k") else (k, g)
            recs.append(SubjectRecord(sid, int(arms and rng.random() < 0.5), float(rng.normal()), None, (float(rng.normal()),), cats))
        out.append(tuple(recs))
    return StudyCollection(out[0], {"H": out[1]}), CovariateSchema(("x",), order, levels)


def test_category_order_invariance():
    a_col, a_s = _cat_collection(np.random.default_rng(9), ("g", "k"))
    b_col, b_s = _cat_collection(np.random.default_rng(9), ("k", "g"))
    for mode in ("empirical-bayes", "posterior-predictive"):
        wa = model_weights(a_col, a_s, mode=mode, min_category_count=3)
        wb = model_weights(b_col, b_s, mode=mode, min_category_count=3)
        ra = np.array([w.raw_score for w in wa])
        rb = np.array([w.raw_score for w in wb])
        assert np.allclose(ra, rb, rtol=1e-10, equal_nan=True)


def test_model_route_skips_treated_subjects():
    rng = np.random.default_rng(4)
    conc = records(rng.standard_normal((40, 2)), "C", arms=[i % 2 for i in range(40)])
    hist = records(rng.standard_normal((10, 2)), "H", arms=[1] * 3 + [0] * 7)
    out = model_weights(StudyCollection(conc, {"H": hist}), XY)
    treated = [a for a in out if not a.scored]
    assert len(treated) == 20 + 3
    assert all(a.weight == 0.0 and a.truncated_weight == 0.0 and math.isnan(a.raw_score) for a in treated)


# -- posterior predictive --------------------------------------------------


def test_predictive_matches_monte_carlo_integration():
    # one observation, explicit unit-scale NIW prior; oracle integrates the
    # Gaussian density over posterior draws of (mean, covariance)
    d, x1, m0, k0, nu0 = 2, np.array([0.5, -0.3]), np.zeros(2), 0.5, 5.0
    model = fit_predictive_arrays(x1[None, :], [0], (), NIWPrior(kappa=k0, df=nu0, scale=np.eye(d), mean=m0))
    kn, nun = k0 + 1, nu0 + 1
    mn = (k0 * m0 + x1) / kn
    dev = (x1 - m0)[:, None]
    psin = np.eye(d) + (k0 / kn) * dev @ dev.T
    rng = np.random.default_rng(0)
    sig = stats.invwishart(df=nun, scale=psin).rvs(size=200_000, random_state=rng)
    mu = mn + np.einsum("nij,nj->ni", np.linalg.cholesky(sig / kn), rng.standard_normal((len(sig), d)))
    for point in ([0.2, -0.1], [1.0, 0.5]):
        diff = np.asarray(point) - mu
        quad = np.einsum("ni,nij,nj->n", diff, np.linalg.inv(sig), diff)
        dens = np.exp(-0.5 * quad) / (2 * np.pi * np.sqrt(np.linalg.det(sig)))
        oracle, se = dens.mean(), dens.std() / math.sqrt(len(dens))
        got = model.density(np.asarray(point)[None, :], [0])[0]
        assert abs(got - oracle) < 4 * se


def test_predictive_single_observation_student_t():
    d, x1, k0, nu0 = 2, np.array([1.0, 2.0]), 1.0, 4.0
    model = fit_predictive_arrays(x1[None, :], [0], (), NIWPrior(kappa=k0, df=nu0, scale=np.eye(d), mean=np.zeros(d)))
    # hand-derived: kn = 2, nun = 5, mn = x1/2, psin = I + 0.5 x1 x1', df = 4
    shape = (np.eye(d) + 0.5 * np.outer(x1, x1)) * 3 / (2 * 4)
    ref = stats.multivariate_t(loc=x1 / 2, shape=shape, df=4)
    assert model.density(np.array([[0.3, 0.7]]), [0])[0] == pytest.approx(ref.pdf([0.3, 0.7]), rel=1e-12)


def test_predictive_degenerate_df_rejected():
    with pytest.raises(ValueError):
        fit_predictive_arrays(np.zeros((3, 3)), [0, 0, 0], (), NIWPrior(df=1.5, scale=np.eye(3)))


def test_dirichlet_smoothing_of_empty_category():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((20, 1))
    m = fit_predictive_arrays(x, np.zeros(20, dtype=int), (2,))
    assert math.exp(m.log_category_probs[1]) == pytest.approx(1 / 22)
    assert m.density(np.zeros((1, 1)), [1])[0] > 0


def test_predictive_approaches_plug_in():
    rng = np.random.default_rng(8)
    pts = rng.standard_normal((20_000, 2)) @ np.array([[1.0, 0.3], [0.0, 0.8]])
    probe = SubjectRecord("H", 0, 0.1, None, (0.2,))
    gaps = []
    for n in (30, 300, 3000, 20_000):
        conc = records(pts[:n])
        pred = predictive_density(probe, conc, XY)
        plug = similarity_density(probe, fit_similarity_model(conc, XY), XY)
        gaps.append(abs(math.log(pred / plug)))
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-3


# -- surviving fractions ---------------------------------------------------


@pytest.mark.slow
def test_exchangeable_history_survives_like_concurrent_controls():
    diffs = []
    for rep in range(20):
        cfg = ScenarioConfig.named("exchangeable", n_concurrent=200, n_historical=200, base_seed=77)
        col = generate_replication(cfg, rep)
        out = model_weights(col, XY)
        fr = surviving_fractions(out)
        diffs.append(fr["historical"] - fr["concurrent"])
    # Monte Carlo error of a difference of two ~0.95 proportions of ~100 and 200 subjects
    assert abs(np.mean(diffs)) < 3 * np.std(diffs, ddof=1) / math.sqrt(len(diffs)) + 0.01
