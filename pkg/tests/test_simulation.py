import math

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from ipdprior import simulation
from ipdprior.simulation import (
    SCENARIO_TABLE,
    AnalysisSettings,
    GridSpec,
    Mixture,
    ScenarioConfig,
    compute_metrics,
    generate_replication,
    historical_powers_for,
    run_cell,
    run_grid,
    run_method,
    run_method_batch,
)

QUICK = AnalysisSettings(chains=2, warmup=300, iterations=400)


def test_scenario_table_shifts():
    assert SCENARIO_TABLE == {
        "exchangeable": (1.0, 0.0),
        "partial1": (Mixture(1.0, 6.0), 0.0),
        "partial2": (1.0, Mixture(0.0, 5.0)),
        "unex1": (6.0, 0.0),
        "unex2": (1.0, 5.0),
        "unex3": (1.0, 1.0),
    }


def _arrays(col):
    c = np.array([[r.continuous[0], r.outcome, r.arm] for r in col.concurrent])
    h = np.array([[r.continuous[0], r.outcome, r.arm] for r in col.historical_records()])
    return c, h


def test_outcome_shift_in_unexchangeable_history():
    col = generate_replication(ScenarioConfig.named("unex2", n_concurrent=20_000, n_historical=20_000), 0)
    c, h = _arrays(col)
    ctrl = c[c[:, 2] == 0]
    # residual outcome after the covariate slope
    diff = (h[:, 1] - h[:, 0]).mean() - (ctrl[:, 1] - ctrl[:, 0]).mean()
    se = math.sqrt(1 / len(h) + 1 / len(ctrl))
    assert abs(diff - 5.0) < 4 * se


def test_treatment_effect_only_in_treated_concurrent_subjects():
    col = generate_replication(ScenarioConfig.named("exchangeable", n_concurrent=20_000, n_historical=10), 1)
    c, h = _arrays(col)
    assert np.all(h[:, 2] == 0)
    X = np.column_stack([np.ones(len(c)), c[:, 0], c[:, 2]])
    coef = np.linalg.lstsq(X, c[:, 1], rcond=None)[0]
    assert coef[2] == pytest.approx(0.5, abs=4 * math.sqrt(4 / len(c)))


def test_mixture_fraction_controls_shifted_share():
    cfg = ScenarioConfig.named("partial1", n_historical=20_000, mixture_fraction=0.3)
    _, h = _arrays(generate_replication(cfg, 0))
    share = np.mean(h[:, 0] > 3.5)
    assert share == pytest.approx(0.3, abs=0.02)


def _energy(a, b):
    return 2 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean()


def test_exchangeable_history_matches_concurrent_controls():
    col = generate_replication(ScenarioConfig.named("exchangeable", n_concurrent=300, n_historical=150), 2)
    c, h = _arrays(col)
    a, b = c[c[:, 2] == 0, :2], h[:, :2]
    obs = _energy(a, b)
    pooled = np.vstack([a, b])
    rng = np.random.default_rng(0)
    perms = []
    for _ in range(300):
        idx = rng.permutation(len(pooled))
        perms.append(_energy(pooled[idx[: len(a)]], pooled[idx[len(a) :]]))
    p = (1 + np.sum(np.array(perms) >= obs)) / 301
    assert p > 0.01
    shifted = generate_replication(ScenarioConfig.named("unex2", n_concurrent=300, n_historical=150), 2)
    c2, h2 = _arrays(shifted)
    assert _energy(c2[c2[:, 2] == 0, :2], h2[:, :2]) > max(perms)


def test_replications_are_deterministic_and_distinct():
    cfg = ScenarioConfig.named("partial2", base_seed=4)
    assert generate_replication(cfg, 3) == generate_replication(cfg, 3)
    assert generate_replication(cfg, 3) != generate_replication(cfg, 4)
    z = np.array([r.arm for r in generate_replication(ScenarioConfig.named("exchangeable", n_concurrent=2), 0).concurrent])
    assert sorted(z) == [0, 1]


def test_run_method_is_reproducible():
    col = generate_replication(ScenarioConfig.named("unex3", n_concurrent=25), 0)
    a = run_method(col, "TIW", QUICK, seed=3, key=(1, 2))
    b = run_method(col, "TIW", QUICK, seed=3, key=(1, 2))
    assert np.array_equal(a.draws, b.draws)


@pytest.mark.parametrize("method", ["NP", "TIW", "MAP"])
def test_replication_draws_do_not_depend_on_batch(method):
    cfg = ScenarioConfig.named("partial1", n_concurrent=25)
    data = [generate_replication(cfg, r) for r in range(3)]
    keys = [(9, r) for r in range(3)]
    together = run_method_batch(data, method, QUICK, seed=1, keys=keys)
    alone = run_method_batch(data[2:], method, QUICK, seed=1, keys=keys[2:])
    assert np.allclose(together.draws[2], alone.draws[0], rtol=1e-10, atol=1e-12)


def test_methods_agree_without_history():
    col = generate_replication(ScenarioConfig.named("exchangeable", n_concurrent=30, n_historical=0), 0)
    runs = [run_method(col, m, QUICK, seed=2, key=(5,)).draws for m in ("NP", "FH", "IW", "TIW")]
    for r in runs[1:]:
        assert np.array_equal(r, runs[0])


def test_powers_per_method():
    col = generate_replication(ScenarioConfig.named("unex1", n_concurrent=50), 0)
    s = AnalysisSettings()
    assert np.all(historical_powers_for(col, "NP", s) == 0)
    assert np.all(historical_powers_for(col, "FH", s) == 1)
    iw, tiw = historical_powers_for(col, "IW", s), historical_powers_for(col, "TIW", s)
    assert np.all((tiw == 0) | (tiw == iw))
    assert np.mean(tiw > 0) < 0.2
    pp = historical_powers_for(col, "PP", s)
    assert np.all(pp == pp[0]) and 0 <= pp[0] <= 1


def test_metrics_for_degenerate_draws():
    const = np.full((5, 2, 10), 0.7)
    row = compute_metrics(const, 0.5)
    assert row.power == 1.0 and row.ci_width == 0.0
    assert row.bias == pytest.approx(0.2) and row.rmse == pytest.approx(0.2)
    assert row.bias_se == 0.0 and row.power_se == 0.0
    neg = compute_metrics(np.full((4, 1, 10), -1.0), 0.5)
    assert neg.power == 0.0


def test_metrics_exclusion():
    rng = np.random.default_rng(0)
    draws = rng.normal(0.5, 0.1, (4, 2, 50))
    row = compute_metrics(draws, 0.5, rhat=np.array([1.0, 1.2, np.nan, 1.01]))
    assert row.replications_used == 3 and row.replications_excluded == 1
    with pytest.raises(ValueError):
        compute_metrics(draws, 0.5, rhat=np.full(4, 2.0))


def test_metrics_by_hand():
    draws = np.array([np.linspace(0.0, 1.0, 101), np.linspace(-1.0, 0.5, 101)])
    row = compute_metrics(draws, 0.5)
    means = np.array([0.5, -0.25])
    assert row.bias == pytest.approx(np.mean(means - 0.5))
    assert row.bias_se == pytest.approx(np.std(means - 0.5, ddof=1) / math.sqrt(2))
    assert row.power == 0.5 and row.power_se == pytest.approx(0.5 / math.sqrt(2))
    lo = np.quantile(draws, 0.025, axis=1)
    hi = np.quantile(draws, 0.975, axis=1)
    assert row.ci_width == pytest.approx(np.mean(hi - lo))


def _tiny_spec(**kw):
    base = dict(
        scenarios=("exchangeable", "unex2"), methods=("NP", "TIW"), sizes=(25,), replications=3,
        settings=QUICK, seed=5,
    )
    base.update(kw)
    return GridSpec(**base)


def test_grid_shape_order_and_worker_independence():
    spec = _tiny_spec()
    rows = run_grid(spec)
    assert [(r.scenario, r.n_concurrent, r.method) for r in rows] == [
        ("exchangeable", 25, "NP"), ("exchangeable", 25, "TIW"), ("unex2", 25, "NP"), ("unex2", 25, "TIW"),
    ]
    assert all(r.error == "" and r.replications_used + r.replications_excluded == 3 for r in rows)
    # repr so that NaN standard errors compare equal
    assert repr(run_grid(spec, workers=2)) == repr(rows)


def test_failed_method_is_reported_not_raised(monkeypatch):
    real = simulation.run_method_batch

    def flaky(data, method, *a, **k):
        if method == "TIW":
            raise FloatingPointError("boom")
        return real(data, method, *a, **k)

    monkeypatch.setattr(simulation, "run_method_batch", flaky)
    rows = run_cell(_tiny_spec(), "unex2", 25)
    assert rows[0].error == "" and not math.isnan(rows[0].bias)
    assert "boom" in rows[1].error and math.isnan(rows[1].power)


def test_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig.named("unex1", mixture_fraction=1.5)
    with pytest.raises(ValueError):
        GridSpec(scenarios=("nope",))
    with pytest.raises(ValueError):
        GridSpec(methods=("XYZ",))
