import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hydrocascade import plsi
from hydrocascade.cases import demo_cascade, lake_states
from hydrocascade.hydro import (
    Bathymetry, CascadeTopology, ContractError, Reach, ReachState, cascade_cfl_dt, lake_state,
    run_explicit, total_volume,
)
from hydrocascade.plsi import (
    NonconvergenceError, PLSystem, assemble_reach, assemble_semi_implicit, nested_newton_solve,
    positivity_clip, run_semi_implicit, step_semi_implicit, step_semi_implicit_detailed,
)


def walled(n=100, length=100.0, bed=0.0, manning=0.0, outlet=0.0, stage=0.0):
    r = Reach(Bathymetry.uniform(length, n, bed), manning, 1.0)
    return CascadeTopology((r,), outlet_coefficient=outlet, outlet_stage=stage)


def dam_break(topo, left=1.0, right=0.1):
    x = topo.reaches[0].bathymetry.cell_centers
    return [ReachState(np.where(x < 50.0, left, right), np.zeros(x.size))]


def test_positivity_clip_examples():
    assert positivity_clip(-2.0, 2.0) == 0.0
    assert positivity_clip(1.0, 2.0) == 3.0
    assert positivity_clip(-5.0, 2.0) == 0.0
    np.testing.assert_array_equal(positivity_clip([0.5, -3.0], [1.0, 1.0]), [1.5, 0.0])


def test_single_cell_hand_solve():
    # one cell, no faces: level = bed + old depth + dt * source / area
    lo, di, up, b, blk = assemble_reach([2.0], np.zeros(0), [0.5], 1.0, 10.0, 0.0, 2.0, sources=[3.0])
    sys_ = PLSystem(lo, di, up, b, np.array([0.5]), [blk], 2.0)
    eta, sigma, it = nested_newton_solve(sys_)
    assert eta[0] == pytest.approx(0.5 + 1.5 + 2.0 * 3.0 / 10.0, abs=1e-14)
    assert sigma.tolist() == [True]
    assert it == 1


def test_flat_lake_is_reproduced_in_one_iteration():
    topo = walled(20)
    s = [ReachState(np.full(20, 2.0), np.zeros(20))]
    system = assemble_semi_implicit(s, topo, 5.0)
    # identity plus a discrete Laplacian on wet cells
    assert np.all(system.diag >= 0) and np.all(system.lower[1:] <= 0)
    eta, _, it = nested_newton_solve(system)
    np.testing.assert_allclose(eta, 2.0, atol=1e-12)
    assert it == 1
    _, _, it0 = nested_newton_solve(system, eta)
    assert it0 == 0


def test_tolerance_must_be_positive():
    topo = walled(5)
    system = assemble_semi_implicit([ReachState(np.ones(5), np.zeros(5))], topo, 1.0)
    with pytest.raises(ContractError):
        nested_newton_solve(system, tol=0.0)
    with pytest.raises(ContractError):
        assemble_semi_implicit([ReachState(np.ones(5), np.zeros(5))], topo, 0.0)


def test_iteration_cap_raises_with_residual(monkeypatch):
    topo = walled(6, bed=lambda x: 0.1 * x)
    s = [lake_state(topo.reaches[0], 0.3)]
    system = assemble_semi_implicit(s, topo, 1.0)
    flip = {"n": 0}

    def alternating(sys_, sigma):
        flip["n"] += 1
        return sys_.zb + (1.0 if flip["n"] % 2 else -1.0)

    monkeypatch.setattr(plsi, "_solve_frozen", alternating)
    with pytest.raises(NonconvergenceError) as info:
        nested_newton_solve(system)
    assert flip["n"] == 2 * system.n_cells


def test_reduced_solution_solves_the_stacked_system():
    topo = walled(30, bed=lambda x: 0.2 * np.sin(x / 7.0), manning=0.03)
    states = dam_break(topo, 1.0, 0.3)
    states = run_semi_implicit(topo, states, [], 0.0, 2.0, 0.5)
    system = assemble_semi_implicit(states, topo, 0.5)
    eta, sigma, _ = nested_newton_solve(system)
    M, rhs = system.full_matrix(sigma)
    q = np.concatenate(system.face_discharges(eta))
    x = np.concatenate((eta, q))
    np.testing.assert_allclose(M @ x, rhs, atol=1e-10)


def test_lake_at_rest_is_a_fixed_point():
    topo = walled(40, bed=lambda x: 0.4 * np.sin(x / 6.0), manning=0.03)
    s = [lake_state(topo.reaches[0], 0.25)]  # partly dry
    for _ in range(20):
        s = step_semi_implicit(s, topo, [], 0.0, 10.0)
    np.testing.assert_allclose(s[0].A, lake_state(topo.reaches[0], 0.25).A, atol=1e-12)
    assert np.abs(s[0].Q).max() <= 1e-12


def test_large_steps_are_stable_and_conservative():
    topo = walled(100, manning=0.03)
    s = dam_break(topo, 1.0, 0.0)
    V0 = total_volume(topo, s)
    dt = 10.0 * cascade_cfl_dt(topo, s)
    for _ in range(50):
        s = step_semi_implicit(s, topo, [], 0.0, dt)
        assert s[0].A.min() >= 0.0
        assert np.all(np.isfinite(s[0].Q))
        assert abs(total_volume(topo, s) - V0) <= 1e-10 * V0


def test_cascade_volume_balance_per_step():
    topo, levels = demo_cascade(n_cells=10)
    states = lake_states(topo, levels)
    for _ in range(20):
        V0 = total_volume(topo, states)
        res = step_semi_implicit_detailed(states, topo, [(0.8, 1.0), (0.3, 1.0)], 6.0, 30.0)
        V1 = total_volume(topo, res.states)
        assert V1 - V0 == pytest.approx(30.0 * (6.0 - res.outflow), abs=1e-10 * V0)
        states = res.states


def test_wet_dam_break_matches_explicit():
    topo = walled(200)
    ref = run_explicit(topo, dam_break(topo), [], 0.0, 4.0)[0]
    got = run_semi_implicit(topo, dam_break(topo), [], 0.0, 4.0, 0.02)[0]
    assert np.mean(np.abs(got.A - ref.A)) <= 2e-2


def test_joint_refinement_approaches_explicit():
    # the two schemes differ in space, so dx and dt shrink together
    errs = []
    for n in (50, 100, 200, 400):
        topo = walled(n)
        ref = run_explicit(topo, dam_break(topo), [], 0.0, 3.0)[0]
        got = run_semi_implicit(topo, dam_break(topo), [], 0.0, 3.0, 10.0 / n)[0]
        errs.append(np.mean(np.abs(got.A - ref.A)))
    assert all(a > b for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 0.5 * errs[0]


def test_draining_basin_against_explicit():
    # the bed rises upstream and the outlet draws the level down
    bed = lambda x: 1.0 - x / 100.0
    topo = walled(100, bed=bed, manning=0.02, outlet=0.1, stage=0.0)
    s0 = [lake_state(topo.reaches[0], 0.6)]
    si = [s.copy() for s in s0]
    volumes, wet = [total_volume(topo, si)], [int((si[0].A > 0).sum())]
    for _ in range(240):
        si = step_semi_implicit(si, topo, [], 0.0, 0.25)
        volumes.append(total_volume(topo, si))
        wet.append(int((si[0].A > 0).sum()))
    ref = run_explicit(CascadeTopology(topo.reaches, (), topo.outlet_coefficient, topo.outlet_stage, cfl=0.2),
                       [s.copy() for s in s0], [], 0.0, 60.0)[0]
    assert np.max(np.abs(si[0].A - ref.A)) <= 5e-2
    assert all(a > b for a, b in zip(volumes, volumes[1:]))
    # no cell upstream of the shoreline gets wetted
    assert all(a >= b for a, b in zip(wet, wet[1:]))
    assert si[0].A.min() >= 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 40), st.integers(0, 2**31 - 1), st.floats(0.1, 50.0))
def test_random_basins_terminate_finitely(n, seed, dt):
    rng = np.random.default_rng(seed)
    bed = rng.uniform(0.0, 1.0, n)
    topo = CascadeTopology((Reach(Bathymetry(np.arange(n) + 0.5, bed, 1.0), 0.03, 1.0),))
    h = np.where(rng.random(n) < 0.3, 0.0, rng.uniform(0.0, 1.0, n))
    q = rng.normal(0.0, 0.2, n) * (h > 0)
    s = [ReachState(h, q)]
    system = assemble_semi_implicit(s, topo, dt)
    eta, sigma, it = nested_newton_solve(system)
    assert it <= 2 * n
    assert np.abs(system.residual(eta)).max() <= 1e-9 * max(1.0, np.abs(system.b).max())
    np.testing.assert_array_equal(sigma, eta > system.zb)
