import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import null_space

from hydrocascade import sqcqp
from hydrocascade.hydro import ContractError
from hydrocascade.sqcqp import (
    FilterSet, LocalModels, NLPProblem, TrustRegionState, filter_acceptable, filter_insert, normal_step,
    restoration, sqcqp_solve, stationarity, tangential_step, tr_update,
)

from .oracles import pareto_front


def models(x, g=None, H=None, c=None, J=None, s=None, Js=None):
    n = len(x)
    c = np.zeros(0) if c is None else np.asarray(c, float)
    s = np.zeros(0) if s is None else np.asarray(s, float)
    m = LocalModels(np.asarray(x, float), 0.0, np.zeros(n) if g is None else np.asarray(g, float),
                    np.eye(n) if H is None else np.asarray(H, float), c,
                    np.zeros((0, n)) if J is None else np.atleast_2d(J), s,
                    np.zeros((0, n)) if Js is None else np.atleast_2d(Js))
    return m


# ----------------------------------------------------------------------------
# filter and radius


def test_filter_examples():
    assert filter_acceptable(FilterSet(), 1e9, 1e9)
    f = FilterSet([(10.0, 1.0)])
    assert filter_acceptable(f, 9.0, 2.0)
    assert filter_acceptable(f, 11.0, 0.5)
    assert not filter_acceptable(f, 11.0, 2.0)
    assert not filter_acceptable(f, float("inf"), 0.0)
    g = filter_insert(f, 9.0, 0.5)
    assert g.entries == [(9.0, 0.5)]
    assert f.entries == [(10.0, 1.0)]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(0, 100)), min_size=1, max_size=100))
def test_filter_stream_is_the_pareto_front(points):
    flt = FilterSet()
    for F, phi in points:
        flt.insert(F, phi)
        assert flt.is_pareto()
    assert sorted(set(flt.entries)) == pareto_front(points)


def test_tr_update_branches():
    s = TrustRegionState(delta=1.0)
    assert tr_update(0.9, s).delta == 2.0
    assert tr_update(0.01, s).delta == 0.5
    assert tr_update(0.5, s).delta == 1.0
    assert tr_update(-np.inf, s).delta == 0.5
    top = TrustRegionState(delta=80.0)
    assert tr_update(1.0, top).delta == 100.0
    bottom = TrustRegionState(delta=1e-8)
    assert tr_update(0.0, bottom).delta == 1e-8
    with pytest.raises(ContractError):
        TrustRegionState(rho_bad=0.8, rho_good=0.5)
    with pytest.raises(ContractError):
        TrustRegionState(delta=1e3)


# ----------------------------------------------------------------------------
# composite step pieces


def test_normal_step_at_a_feasible_point_is_zero():
    ns = normal_step(models([1.0, 2.0], c=[0.0], J=[[1.0, 1.0]]), 1.0)
    assert ns.n.tolist() == [0.0, 0.0] and ns.kind == "zero"


def test_normal_step_projects_onto_a_violated_line():
    a, b = np.array([1.0, 2.0, -1.0]), 4.0
    x = np.array([0.3, -0.2, 0.5])
    ns = normal_step(models(x, c=[a @ x - b], J=[a]), 100.0)
    # closed-form minimum-norm correction
    want = a * (b - a @ x) / (a @ a)
    np.testing.assert_allclose(ns.n, want, atol=1e-12)
    assert abs(a @ (x + ns.n) - b) <= 1e-12


def test_tiny_radius_normal_step_follows_steepest_descent():
    a = np.array([3.0, -4.0])
    x = np.zeros(2)
    r = a @ x - 10.0
    ns = normal_step(models(x, c=[r], J=[a]), 1e-3)
    assert np.linalg.norm(ns.n) == pytest.approx(1e-3, rel=1e-12)
    np.testing.assert_allclose(ns.n / 1e-3, -np.sign(r) * a / 5.0, atol=1e-12)
    assert ns.model_decrease >= ns.cauchy_decrease - 1e-15


def test_tangential_step_is_zero_without_objective():
    m = models(np.zeros(3), g=np.zeros(3), H=np.zeros((3, 3)))
    ts = tangential_step(m, np.zeros(3), 1.0, 0.5, m)
    assert ts.t.tolist() == [0.0, 0.0, 0.0]
    with pytest.raises(ContractError):
        tangential_step(m, np.zeros(3), 1.0, 1.0, m)


def test_unconstrained_tangential_step_is_the_newton_step():
    rng = np.random.default_rng(5)
    M = rng.normal(size=(5, 5))
    H = M @ M.T + np.eye(5)
    g = 0.01 * rng.normal(size=5)
    m = models(np.zeros(5), g=g, H=H)
    ts = tangential_step(m, np.zeros(5), 10.0, 0.9, m)
    np.testing.assert_allclose(ts.t, -np.linalg.solve(H, g), rtol=1e-10, atol=1e-14)


def test_zero_windows_confine_the_step_to_the_null_space():
    rng = np.random.default_rng(6)
    J = rng.normal(size=(2, 6))
    g = rng.normal(size=6)
    # normal step bought nothing: windows have width zero
    m = models(np.zeros(6), g=g, H=np.eye(6), c=[0.2, -0.1], J=J)
    ts = tangential_step(m, np.zeros(6), 0.5, 0.9, m)
    assert np.abs(J @ ts.t).max() <= 1e-8
    Z = null_space(J)
    np.testing.assert_allclose(ts.t, Z @ (Z.T @ ts.t), atol=1e-8)
    assert ts.model_decrease > 0


# ----------------------------------------------------------------------------
# full solves


def random_qp(seed, n_ineq=0, hooks=True):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 21))
    m = int(rng.integers(1, n // 2 + 1))
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * n * np.eye(n)
    g = rng.normal(size=n)
    A, b = rng.normal(size=(m, n)), rng.normal(size=m)
    C, d = rng.normal(size=(n_ineq, n)), rng.normal(size=n_ineq) + 0.5
    kw = dict(grad=lambda x: H @ x + g, eq_jac=lambda x: A, ineq_jac=lambda x: C, hess=lambda x: H) if hooks else {}
    prob = NLPProblem(n, lambda x: (0.5 * x @ H @ x + g @ x, A @ x - b, C @ x - d), **kw)
    return prob, (H, g, A, b, C, d)


def kkt_oracle(H, g, A, b, C, d):
    """Dense KKT solve over every active subset of the inequalities."""
    n, m = H.shape[0], A.shape[0]
    best = None
    for k in range(C.shape[0] + 1):
        for act in itertools.combinations(range(C.shape[0]), k):
            E = np.vstack((A, C[list(act)]))
            rhs = np.concatenate((b, d[list(act)]))
            K = np.block([[H, E.T], [E, np.zeros((E.shape[0], E.shape[0]))]])
            try:
                sol = np.linalg.solve(K, np.concatenate((-g, rhs)))
            except np.linalg.LinAlgError:
                continue
            x, mult = sol[:n], sol[n:]
            # inequality multipliers of the form g + Hx + A'l - C'mu = 0 need mu >= 0
            if np.all(C @ x - d >= -1e-10) and np.all(-mult[m:] >= -1e-10):
                best = x
    return best


def kkt_residual(x, H, g, A, b, C, d):
    act = np.abs(C @ x - d) <= 1e-7
    E = np.vstack((A, C[act]))
    lam = np.linalg.lstsq(E.T, -(H @ x + g), rcond=None)[0]
    return max(np.abs(H @ x + g + E.T @ lam).max(), np.abs(A @ x - b).max(),
               float(np.maximum(d - C @ x, 0.0).max(initial=0.0)))


@pytest.fixture
def watched_filter(monkeypatch):
    """Wrap filter_insert so every insert is checked against the Pareto oracle."""
    seen = {"inserts": 0}
    real = sqcqp.filter_insert

    def checked(flt, F, phi):
        out = real(flt, F, phi)
        assert sorted(set(out.entries)) == pareto_front(list(flt.entries) + [(F, phi)])
        seen["inserts"] += 1
        return out

    monkeypatch.setattr(sqcqp, "filter_insert", checked)
    return seen


def test_convex_qp_battery(watched_filter):
    for seed in range(10):
        hooks = seed % 2 == 0
        prob, data = random_qp(seed, n_ineq=seed % 4, hooks=hooks)
        # difference noise floors the stationarity measure near 1e-9
        res = sqcqp_solve(prob, np.zeros(prob.n), tol=1e-9 if hooks else 1e-7, max_iter=300, tr=TrustRegionState(delta=0.05))
        assert res.status == "converged", (seed, res.status)
        assert kkt_residual(res.x, *data) <= 1e-6
        np.testing.assert_allclose(res.x, kkt_oracle(*data), atol=1e-5)
        assert res.filter.is_pareto()
    assert watched_filter["inserts"] > 10


def test_history_envelope_and_ratios():
    prob, data = random_qp(3, n_ineq=2)
    xs = kkt_oracle(*data)
    Fs = prob.eval(xs)[0]
    res = sqcqp_solve(prob, np.zeros(prob.n), tol=1e-9, max_iter=300, tr=TrustRegionState(delta=0.05))
    env = np.minimum.accumulate([max(h.F - Fs, h.phi) for h in res.history if h.accepted])
    assert np.all(np.diff(env) <= 0)
    assert all(np.isfinite(h.rho) for h in res.history if h.accepted and not h.restoration)


def test_accepted_iterates_were_acceptable_to_the_filter():
    prob, _ = random_qp(4, n_ineq=1)
    flt_at = []
    real = sqcqp.filter_acceptable

    def spy(flt, F, phi, *a, **k):
        ok = real(flt, F, phi, *a, **k)
        if ok:
            flt_at.append((list(flt.entries), F, phi))
        return ok

    sqcqp.filter_acceptable = spy
    try:
        sqcqp_solve(prob, np.zeros(prob.n), tol=1e-9, max_iter=300, tr=TrustRegionState(delta=0.05))
    finally:
        sqcqp.filter_acceptable = real
    assert flt_at
    for entries, F, phi in flt_at:
        assert not any(Fj <= F and pj <= phi for Fj, pj in entries)


def test_start_at_the_optimum_accepts_immediately():
    prob, data = random_qp(7)
    res = sqcqp_solve(prob, kkt_oracle(*data), tol=1e-8)
    assert res.status == "converged" and res.iterations <= 1


def test_inconsistent_constraints_stall_at_least_squares_level():
    # x0 + x1 = 1 and x0 + x1 = 3 cannot both hold; min phi = |r1| + |r2| = 2
    A, b = np.array([[1.0, 1.0], [1.0, 1.0]]), np.array([1.0, 3.0])
    prob = NLPProblem(2, lambda x: (float(x @ x), A @ x - b, np.zeros(0)), eq_blocks=[slice(0, 1), slice(1, 2)])
    res = sqcqp_solve(prob, np.array([5.0, -4.0]), tol=1e-8, max_iter=500)
    assert res.status == "infeasible_stall"
    assert res.phi == pytest.approx(2.0, abs=1e-6)


def test_restoration_examples():
    A, b = np.array([[1.0, 2.0, 0.0], [0.0, 1.0, -1.0]]), np.array([1.0, 0.5])
    prob = NLPProblem(3, lambda x: (float(x.sum()), A @ x - b, np.zeros(0)), lower=np.full(3, -0.5), upper=np.full(3, 2.0))
    x0 = np.array([2.0, 2.0, -0.5])
    x_same, _, status, _ = restoration(np.array([0.0, 0.5, 0.0]), prob, TrustRegionState(delta=0.1), FilterSet(), np.eye(3))
    assert status == "feasible" and x_same.tolist() == [0.0, 0.5, 0.0]
    x, _, status, phis = restoration(x0, prob, TrustRegionState(delta=0.1), FilterSet([(-1e9, 0.0)]), np.eye(3))
    assert np.all(np.diff(phis) < 0)
    # the filter entry (-inf, 0) can never be beaten, so restoration drives phi to its minimum
    assert phis[-1] <= 1e-8
    assert np.all(x >= -0.5) and np.all(x <= 2.0)


def test_restoration_reaches_least_squares_minimiser():
    # phi = |Ax - b| with a full-column-rank A: least-squares minimiser
    rng = np.random.default_rng(1)
    A, b = rng.normal(size=(5, 3)), rng.normal(size=5)
    prob = NLPProblem(3, lambda x: (0.0, A @ x - b, np.zeros(0)))
    x, _, _, phis = restoration(np.zeros(3), prob, TrustRegionState(delta=1.0), FilterSet([(-1e9, 0.0)]), np.eye(3))
    np.testing.assert_allclose(x, np.linalg.lstsq(A, b, rcond=None)[0], atol=1e-6)


def test_history_csv(tmp_path):
    prob, _ = random_qp(2)
    res = sqcqp_solve(prob, np.zeros(prob.n), tr=TrustRegionState(delta=0.05))
    res.to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "k,F,phi,delta,rho,accepted,restoration_flag"
    assert len(lines) == len(res.history) + 1


def test_stationarity_is_zero_at_the_optimum():
    prob, data = random_qp(8)
    H, g, A, b, _, _ = data
    x = kkt_oracle(*data)
    m = models(x, g=H @ x + g, H=H, c=A @ x - b, J=A)
    assert stationarity(m, prob.lower, prob.upper) <= 1e-10
    with pytest.raises(ContractError):
        sqcqp_solve(prob, x, tol=0.0)
