import math
import warnings

import numpy as np
import pytest
from scipy import stats

from ipdprior.sampler import (
    InitializationError,
    PosteriorDraws,
    SamplerConfig,
    chain_rngs,
    diagnostics,
    ess_bulk,
    mcse_mean,
    run_chains,
    sample,
    split_rhat,
    weighted_gaussian_posterior,
)

CFG = SamplerConfig(chains=4, warmup=1000, iterations=5000, seed=1)


def normal_kernel(y, w=None, sigma2=1.0):
    y = np.asarray(y, float)
    w = np.ones_like(y) if w is None else np.asarray(w, float)

    def kernel(P):
        mu = P[:, :1]
        return -0.5 * np.sum(w * (y - mu) ** 2, axis=1) / sigma2

    return kernel


def test_standard_normal_target():
    d = sample(lambda P: -0.5 * np.sum(P**2, axis=1), [0.0, 0.0], CFG, names=("a", "b"))
    for n in ("a", "b"):
        flat = d[n]
        assert abs(flat.mean()) < 4 * mcse_mean(d.chains_of(n))
        assert flat.std() == pytest.approx(1.0, abs=0.05)
    assert diagnostics(d).ok


@pytest.mark.parametrize(
    "y, w, mean, sd",
    [
        ((1.0, 2.0, 3.0), None, 2.0, 1 / math.sqrt(3)),
        ((1.0, 2.0, 3.0, 0.0), (1.0, 1.0, 1.0, 0.5), 6 / 3.5, 1 / math.sqrt(3.5)),
    ],
)
def test_conjugate_location_recovered(y, w, mean, sd):
    oracle = weighted_gaussian_posterior(np.ones((len(y), 1)), y, np.ones(len(y)) if w is None else w, 1.0)
    assert oracle.mean[0] == pytest.approx(mean, rel=1e-14)
    assert oracle.sd[0] == pytest.approx(sd, rel=1e-14)
    d = sample(normal_kernel(y, w), [0.0], CFG, names=("mu",))
    flat = d["mu"]
    assert abs(flat.mean() - mean) < 4 * mcse_mean(d.chains_of("mu"))
    assert flat.std() == pytest.approx(sd, rel=0.05)


def test_positive_parameter_uses_log_jacobian():
    a, b = 6.0, 5.0
    ig = stats.invgamma(a, scale=b)
    d = sample(lambda P: ig.logpdf(P[:, 0]), [1.0], CFG, names=("s2",), positive=[True])
    flat = d["s2"]
    assert np.all(flat > 0)
    assert flat.mean() == pytest.approx(ig.mean(), abs=0.04)
    qs = np.quantile(flat, [0.1, 0.5, 0.9])
    assert np.allclose(qs, ig.ppf([0.1, 0.5, 0.9]), rtol=0.05)


def test_rhat_identical_and_separated_chains():
    rng = np.random.default_rng(0)
    one = rng.standard_normal(2000)
    assert 0.99 <= split_rhat(np.tile(one, (4, 1))) <= 1.01
    split = np.stack([rng.normal(m, 1.0, 2000) for m in (-10, 10, -10, 10)])
    assert split_rhat(split) > 1.05
    names = ("theta",)
    rep = diagnostics(PosteriorDraws(names, split[:, :, None], np.full(4, 0.3)))
    assert rep.flagged == ("theta",) and not rep.ok


def test_single_chain_rhat_unavailable():
    rng = np.random.default_rng(1)
    rep = diagnostics(PosteriorDraws(("a",), rng.standard_normal((1, 500, 1)), np.array([0.3])))
    assert not rep.rhat_available and rep.flagged == ()


def test_ess_of_iid_draws_near_total():
    rng = np.random.default_rng(2)
    ess = ess_bulk(rng.standard_normal((4, 1000)))
    assert 3000 < ess < 5000


def test_same_seed_same_draws_and_new_seed_differs():
    k = normal_kernel((1.0, 2.0))
    cfg = SamplerConfig(chains=2, warmup=200, iterations=300, seed=42)
    a = sample(k, [0.0], cfg, names=("mu",))
    b = sample(k, [0.0], cfg, names=("mu",))
    c = sample(k, [0.0], SamplerConfig(chains=2, warmup=200, iterations=300, seed=43), names=("mu",))
    assert np.array_equal(a.draws, b.draws)
    assert not np.array_equal(a.draws, c.draws)


def test_chains_do_not_depend_on_batch_companions():
    k = lambda P: -0.5 * np.sum(P**2, axis=1)
    rngs = chain_rngs(7, 3, 5)
    init = np.array([[0.1, 0.2], [0.3, -0.1], [1.0, 1.0]])
    together = run_chains(k, init, [False, False], rngs, 300, 200, 0.5)
    alone = run_chains(k, init[1:2], [False, False], chain_rngs(7, 3, 5)[1:2], 300, 200, 0.5)
    assert np.array_equal(together.draws[1], alone.draws[0])


def test_initialization_errors():
    k = lambda P: np.where(P[:, 0] > 0, 0.0, -np.inf)
    with pytest.raises(InitializationError):
        sample(k, [-1.0], CFG, names=("a",))
    with pytest.raises(InitializationError):
        run_chains(k, [[0.0]], [True], chain_rngs(0, 1), 10, 10, 0.1)


def test_low_acceptance_warns():
    cfg = SamplerConfig(chains=2, warmup=0, iterations=300, seed=0)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        d = sample(lambda P: -0.5 * np.sum(P**2, axis=1) * 1e6, [0.0], cfg, names=("a",), step_scale=[10.0])
    assert any("acceptance" in str(w.message) for w in caught)
    assert d.warnings and not diagnostics(d).ok


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(chains=0)
    with pytest.raises(ValueError):
        SamplerConfig(target_accept=1.0)
