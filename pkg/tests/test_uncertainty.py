import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hydrocascade import uncertainty as U
from hydrocascade.hydro import Bathymetry, CascadeTopology, ContractError, DefectError, Reach
from hydrocascade.uncertainty import (
    DAY, ForecastModel, Seasonal, SignalModel, build_scenario_fan, cascade_level_solvers, derive_seed,
    mc_estimate, mlmc_estimate, sample_path,
)


def noisy(std=1.0, ar=0.7):
    return ForecastModel(SignalModel(5.0, (Seasonal(DAY, 2.0),), ar, std), SignalModel(40.0, (), 0.5, 3.0))


def test_model_contracts():
    with pytest.raises(ContractError):
        SignalModel(1.0, (), 1.0, 0.1)
    with pytest.raises(ContractError):
        SignalModel(1.0, (), 0.5, -0.1)
    with pytest.raises(ContractError):
        Seasonal(0.0, 1.0)
    with pytest.raises(ContractError):
        Seasonal(10.0, -1.0)
    with pytest.raises(ContractError):
        sample_path(noisy(), 0.0, 1.0, 0)


def test_noise_free_path_is_the_seasonal_sum():
    m = ForecastModel.default().deterministic()
    p = sample_path(m, 7 * DAY, 3600.0, seed=3)
    t = p.times
    expect = 5.0 + 1.5 * np.sin(2 * np.pi * t / DAY) + 0.5 * np.sin(2 * np.pi * t / (7 * DAY))
    np.testing.assert_allclose(p.inflow, np.maximum(expect, 0.0), rtol=0, atol=1e-12)


def test_same_seed_same_path_and_clamped_inflow():
    m = ForecastModel(SignalModel(0.5, (), 0.8, 2.0), SignalModel(40.0, (), 0.5, 3.0))
    a, b = sample_path(m, 3600.0, 60.0, 11), sample_path(m, 3600.0, 60.0, 11)
    assert np.array_equal(a.inflow, b.inflow) and np.array_equal(a.price, b.price)
    assert not np.array_equal(a.inflow, sample_path(m, 3600.0, 60.0, 12).inflow)
    assert a.inflow.min() == 0.0  # base 0.5 with std 2 goes negative before clamping


def test_empirical_mean_matches_seasonal_mean():
    m = noisy(std=1.0)
    vals = np.array([sample_path(m, 3 * 3600.0, 3600.0, s).inflow[2] for s in range(10_000)])
    assert abs(vals.mean() - float(m.inflow.mean(7200.0))) <= 3 * 1.0 / 100


def test_derive_seed_is_a_pure_function():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 2, 4)
    assert 0 <= derive_seed(0) < 2**32


def test_fan_examples():
    m = noisy()
    live = sample_path(m, 3600.0, 60.0, 5)
    one = build_scenario_fan(m, live.prefix(10), 1, 1800.0, seed=1)
    assert one.N == 1 and one.weights.tolist() == [1.0]
    free = build_scenario_fan(m, None, 3, 600.0, dt=60.0, seed=1)
    assert free.prefix_length == 0 and free.branch_time == 0.0
    assert not np.array_equal(free.scenarios[0].inflow, free.scenarios[1].inflow)
    with pytest.raises(ContractError):
        build_scenario_fan(m, None, 0, 600.0, dt=60.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_fan_prefix_is_bitwise_shared(k, N, seed):
    m = noisy()
    live = sample_path(m, 3600.0, 60.0, seed)
    fan = build_scenario_fan(m, live.prefix(k), N, 3600.0, dt=60.0, seed=seed + 1)
    assert fan.prefix_length == k
    assert np.allclose(fan.weights.sum(), 1.0)
    for p in fan.scenarios:
        assert np.array_equal(p.inflow[:k], live.inflow[:k])
        assert np.array_equal(p.price[:k], live.price[:k])
        assert np.array_equal(p.times[:k], live.times[:k])
        assert len(p) == 61


def test_fan_variance_is_zero_at_branch_and_grows():
    m = noisy(std=1.0, ar=0.9)
    live = sample_path(m, 1200.0, 60.0, 0)
    k = 5
    cols = np.array([
        [p.inflow for p in build_scenario_fan(m, live.prefix(k), 2, 1200.0, seed=s).scenarios]
        for s in range(1000)
    ]).reshape(-1, 21)
    var = cols.var(axis=0)
    assert np.all(np.ptp(cols[:, :k], axis=0) == 0.0)
    # AR(1) continuation j steps past the branch: variance std^2 (1 - phi^(2j))
    j = np.arange(1, 21 - k + 1)
    theory = 1.0 - 0.9 ** (2 * j)
    tol = 4.0 * np.sqrt(2.0 / cols.shape[0]) * theory
    assert np.all(np.abs(var[k:] - theory) <= tol)
    assert np.all(np.diff(var[k - 1:k + 4]) > 0)


# ----------------------------------------------------------------------------
# Monte Carlo


def channel():
    r = Reach(Bathymetry.uniform(400.0, 32, lambda x: 1.0 - 0.5 * x / 400.0), 0.03, 4.0)
    return CascadeTopology((r,), outlet_coefficient=0.5, outlet_stage=1.0)


def mean_area(states):
    return float(np.mean(np.concatenate([s.A for s in states])))


FLOW = ForecastModel(SignalModel(5.0, (), 0.5, 2.0), SignalModel(50.0, (), 0.5, 0.0))


def test_single_level_is_plain_monte_carlo():
    solvers = cascade_level_solvers(channel(), [2.0], [], 300.0, 1)
    res = mlmc_estimate(solvers, [12], mean_area, FLOW, 4, 300.0, 60.0)
    est, var = mc_estimate(solvers[0][0], 12, mean_area, FLOW, 4, 300.0, 60.0)
    assert res.estimate == est
    assert res.variances[0] == var


def test_deterministic_qoi_gives_fine_level_value():
    solvers = cascade_level_solvers(channel(), [2.0], [], 300.0, 2)
    model = FLOW.deterministic()
    res = mlmc_estimate(solvers, [3, 2], mean_area, model, 0, 300.0, 60.0)
    path = sample_path(model, 300.0, 60.0, 0)
    fine, coarse = mean_area(solvers[1][0](path)), mean_area(solvers[0][0](path))
    assert res.estimate == pytest.approx(fine, abs=1e-12)
    assert res.level_means[1] == pytest.approx(fine - coarse, abs=1e-14)
    np.testing.assert_allclose(res.variances, 0.0, atol=1e-24)


def test_correction_variance_decreases_with_level():
    solvers = cascade_level_solvers(channel(), [2.0], [], 300.0, 3)
    res = mlmc_estimate(solvers, [40, 20, 10], mean_area, FLOW, 7, 300.0, 60.0)
    assert res.variances[0] >= res.variances[1] >= res.variances[2]


def test_two_level_estimate_agrees_with_fine_monte_carlo():
    solvers = cascade_level_solvers(channel(), [2.0], [], 300.0, 2)
    ml = mlmc_estimate(solvers, [60, 15], mean_area, FLOW, 9, 300.0, 60.0)
    est, var = mc_estimate(solvers[1][0], 60, mean_area, FLOW, 9, 300.0, 60.0)
    combined = np.sqrt(ml.standard_error**2 + var / 60)
    assert abs(ml.estimate - est) <= 3 * combined


def test_failed_samples_are_redrawn_and_counted():
    solvers = cascade_level_solvers(channel(), [2.0], [], 120.0, 1)
    calls = {"n": 0}

    def flaky(path):
        calls["n"] += 1
        if calls["n"] % 3 == 1:
            raise DefectError("synthetic failure")
        return solvers[0][0](path)

    res = mlmc_estimate([(flaky, 1.0)], [4], mean_area, FLOW, 0, 120.0, 60.0)
    assert res.failures.tolist() == [2]
    assert np.isfinite(res.estimate)


def test_mlmc_contracts():
    solvers = cascade_level_solvers(channel(), [2.0], [], 60.0, 2)
    with pytest.raises(ContractError):
        mlmc_estimate(solvers, [3], mean_area, FLOW, 0, 60.0, 60.0)
    with pytest.raises(ContractError):
        mlmc_estimate(solvers, [3, 0], mean_area, FLOW, 0, 60.0, 60.0)


def test_path_csv(tmp_path):
    p = sample_path(noisy(), 180.0, 60.0, 1)
    p.to_csv(tmp_path / "p.csv")
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "t,inflow,price" and len(rows) == 5
    assert float(rows[2].split(",")[1]) == p.inflow[1]
    assert U.MAX_ATTEMPTS >= 2
