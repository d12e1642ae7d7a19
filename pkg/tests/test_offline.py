import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hydrocascade.cases import demo_cascade
from hydrocascade.hydro import ContractError
from hydrocascade.ocp import ControlSchedule, ObjectiveParams, SolverChoice
from hydrocascade.offline import (
    BucketedPolicy, CatalogBuildConfig, CatalogEntry, CatalogStore, FeasibilityClassifier, SwitchProblem,
    ToyCascade, bb_solve, build_catalog, catalog_insert, catalog_query_value, classifier_fit,
    classifier_predict, classifier_update, domains_of_attraction, enumerate_binary, greedy_improve,
    hierarchical_solve, open_fraction, prefix_deviation, q_update, rl_episode, sum_up_rounding,
)
from hydrocascade.sqcqp import NLPProblem, sqcqp_solve

# ----------------------------------------------------------------------------
# sum-up rounding


def test_sur_examples():
    grid = np.arange(6.0)
    assert sum_up_rounding(np.ones((1, 5)), grid).tolist() == [[1, 1, 1, 1, 1]]
    # hand run of the accumulator: 0.6 open, 0.2 shut, 0.8 open, 0.4 shut, 1.0 open
    assert sum_up_rounding(np.full((1, 5), 0.6), grid).tolist() == [[1, 0, 1, 0, 1]]
    with pytest.raises(ContractError):
        sum_up_rounding(np.full((1, 5), 1.2), grid)
    with pytest.raises(ContractError):
        sum_up_rounding(np.full((1, 4), 0.5), grid)


def test_sur_prefix_bound_on_random_schedules():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        grid = np.concatenate(([0.0], np.cumsum(rng.uniform(0.1, 3.0, n))))
        zbar = rng.uniform(0, 1, (int(rng.integers(1, 4)), n))
        z = sum_up_rounding(zbar, grid)
        assert set(np.unique(z)) <= {0.0, 1.0}
        assert np.all(prefix_deviation(zbar, z, grid) <= np.diff(grid).max() + 1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_sur_prefix_bound_uniform_grid(zs):
    grid = np.arange(len(zs) + 1.0)
    z = sum_up_rounding([zs], grid)
    assert prefix_deviation([zs], z, grid)[0] <= 1.0 + 1e-12


# ----------------------------------------------------------------------------
# branch and bound


def test_fully_fixed_instance_is_one_node():
    p = ToyCascade.random(np.random.default_rng(1), 2, 3)
    z = np.array([1, 0, 1, 0, 0, 1], float)
    r = bb_solve(p, lower=z, upper=z)
    assert r.nodes == 1 and r.status == "optimal"
    assert r.J == p.evaluate_integer(z)


def test_eight_binary_toy_matches_enumeration():
    p = ToyCascade.random(np.random.default_rng(11), 2, 4)
    r = bb_solve(p)
    z_star, J_star = enumerate_binary(p)
    assert r.status == "optimal"
    assert r.J == J_star


def test_integral_root_certifies_immediately():
    # no storage term and zero switch cost: the relaxation is linear, prices >= 0,
    # so every z goes to 1 at the root
    p = ToyCascade([1.0, 2.0], [1.0], [1.0], 0.5, [2.0], [2.0], storage_weight=0.0, switch_weight=0.0)
    r = bb_solve(p)
    assert r.nodes == 1 and r.z.tolist() == [[1.0, 1.0]]


def test_budget_exhaustion_returns_incumbent_with_status():
    p = ToyCascade.random(np.random.default_rng(3), 2, 6)
    r = bb_solve(p, node_budget=3)
    assert r.status == "budget" and r.nodes == 3


def test_random_toy_cascades_are_solved_exactly():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        D = int(rng.integers(1, 4))
        T = int(rng.integers(2, 12 // D + 1))
        p = ToyCascade.random(rng, D, T)
        r = bb_solve(p, node_budget=10_000)
        assert r.status == "optimal"
        assert r.J == enumerate_binary(p)[1]


# ----------------------------------------------------------------------------
# greedy and hierarchical search


class Target(SwitchProblem):
    """J = |z - z*|^2 for a planted relaxed target."""

    def __init__(self, target, grid):
        self.target = np.atleast_2d(np.asarray(target, float))
        self.shape = self.target.shape
        self.grid = np.asarray(grid, float)

    def objective(self, z):
        return float(np.sum((np.asarray(z, float).reshape(self.shape) - self.target) ** 2))


def test_greedy_keeps_a_local_optimum():
    p = ToyCascade.random(np.random.default_rng(5), 2, 4)
    z_star, _ = enumerate_binary(p)
    sched = ControlSchedule(p.grid, np.zeros(z_star.shape), z_star)
    res = greedy_improve(sched, lambda s: p.objective(s.z), budget=100)
    assert np.array_equal(res.schedule.z, z_star) and res.moves == []


def test_greedy_finds_a_planted_flip_first():
    target = np.array([[1.0, 1.0, 0.0, 1.0]])
    p = Target(target, np.arange(5.0))
    start = ControlSchedule(p.grid, np.zeros((1, 4)), [[1.0, 1.0, 1.0, 1.0]])
    res = greedy_improve(start, lambda s: p.objective(s.z), budget=100)
    assert res.moves[0] == ("z", 0, 2, 0)
    assert res.J == 0.0
    assert all(a > b for a, b in zip(res.trace, res.trace[1:]))


def test_greedy_never_worsens_and_moves_v():
    rng = np.random.default_rng(8)
    target = rng.uniform(0, 1, (2, 3))

    def J(s):
        return float(np.sum((s.v - target) ** 2) + s.z.sum())

    start = ControlSchedule(np.arange(4.0), np.full((2, 3), 0.5), np.ones((2, 3)))
    res = greedy_improve(start, J, budget=400, v_step=0.25, v_max=1.0)
    assert res.J <= J(start)
    assert np.all(np.diff(res.trace) < 0)
    assert res.schedule.z.sum() == 0.0
    assert np.all(np.abs(res.schedule.v - target) <= 0.125 + 1e-12)


def test_open_fraction():
    grid = np.arange(5.0)
    assert open_fraction(0, [1.5, 3.0], grid).tolist() == [0.0, 0.5, 1.0, 0.0]
    assert open_fraction(1, [], grid).tolist() == [1.0] * 4


def test_hierarchical_without_switches_is_constant():
    p = ToyCascade.random(np.random.default_rng(4), 2, 4)
    h = hierarchical_solve(p, 0)
    assert h.counts.tolist() == [0, 0]
    assert all(t.size == 0 for t in h.times)
    assert np.all((h.z == 0) | (h.z == 1))
    assert np.all(h.z == h.z[:, :1])
    with pytest.raises(ContractError):
        hierarchical_solve(p, -1)


def test_hierarchical_recovers_a_planted_switch_time():
    grid = np.arange(6.0)
    p = Target(open_fraction(0, [2.3], grid)[None, :], grid)
    h = hierarchical_solve(p, 2)
    # brute-force oracle over switch times on a fine grid
    taus = np.linspace(0.0, 5.0, 5001)
    best = taus[np.argmin([p.objective(open_fraction(0, [t], grid)) for t in taus])]
    assert h.counts.tolist() == [1] and h.initial.tolist() == [0]
    assert abs(h.times[0][0] - best) <= 1.0
    assert abs(best - 2.3) <= 1e-3


def test_hierarchical_is_no_worse_than_bb_on_the_same_grid():
    for seed in range(3):
        p = ToyCascade.random(np.random.default_rng(100 + seed), 2, 4)
        bb = bb_solve(p)
        h = hierarchical_solve(p, 3, max_iter=10)
        assert h.J <= bb.J + 1e-12


# ----------------------------------------------------------------------------
# learners


def test_untrained_classifier_is_undecided():
    c = FeasibilityClassifier.zeros(3)
    assert classifier_predict(c, [1.0, -2.0, 3.0]) == 0.5
    np.testing.assert_array_equal(classifier_predict(c, np.ones((4, 3))), 0.5)


def test_classifier_learns_a_separable_set():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 3))
    w = np.array([1.5, -2.0, 0.5])
    y = (X @ w + 0.3 > 0).astype(float)
    c, losses = classifier_fit(FeasibilityClassifier.zeros(3, rate=5.0), X, y, epochs=100)
    acc = np.mean((classifier_predict(c, X) > 0.5) == (y == 1))
    assert acc >= 0.95
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.floats(-1e3, 1e3))
def test_classifier_output_is_a_probability(w, b):
    c = FeasibilityClassifier(np.array(w), b)
    p = classifier_predict(c, [1.0, -1.0, 2.0])
    assert 0.0 <= p <= 1.0


def test_classifier_update_contracts():
    c = FeasibilityClassifier.zeros(2)
    with pytest.raises(ContractError):
        classifier_update(c, [[1.0, 2.0]], [0.5])
    c2 = classifier_update(c, [1.0, 2.0], 1)
    assert c2.count == 1 and classifier_predict(c2, [1.0, 2.0]) > 0.5


def test_q_update_examples():
    pol = BucketedPolicy([[0.0]], [[0.0, 0.5, 1.0]], rate=1.0)
    pol, ok = q_update(pol, 1, 2, -3.5)
    assert ok and pol.Q[1, 2] == -3.5
    pol, ok = q_update(pol, 1, 2, -math.inf)
    assert not ok and pol.Q[1, 2] == -3.5
    with pytest.raises(ContractError):
        BucketedPolicy([], [[0.0]], epsilon=1.5)


def test_q_value_converges_to_mean_reward():
    rng = np.random.default_rng(1)
    n = 10_000
    pol = BucketedPolicy([], [[0.0]], rate=1.0)
    k = 0
    for i in range(n):
        # 1/k rates turn the update into a running mean
        pol.rate = 1.0 / (i + 1)
        q_update(pol, 0, 0, float(rng.normal(2.0, 1.0)))
        k += 1
    assert abs(pol.Q[0, 0] - 2.0) <= 3.0 / np.sqrt(n)


def test_bandit_learns_the_best_bucket():
    rng = np.random.default_rng(2)
    means = {0.0: 1.0, 0.5: 3.0, 1.0: 2.0}  # J per bucket; best is the lowest
    pol = BucketedPolicy([], [[0.0, 0.5, 1.0]], epsilon=0.3, rate=0.1)
    clf = FeasibilityClassifier.zeros(1)
    for _ in range(500):
        pol, clf, a, J = rl_episode(pol, clf, [], lambda act: means[float(act[0])] + rng.normal(0, 0.3), rng)
    assert pol.greedy(0) == 0


def test_infeasible_episode_feeds_the_classifier():
    rng = np.random.default_rng(0)
    pol = BucketedPolicy([], [[0.0, 1.0]], epsilon=1.0)
    clf = FeasibilityClassifier.zeros(1)
    pol, clf, a, J = rl_episode(pol, clf, [], lambda act: math.inf, rng)
    assert J == math.inf and pol.visits.sum() == 0 and clf.count == 1
    assert classifier_predict(clf, pol.action(a)) <= 0.5


def descent(f, grad):
    def solve(x0):
        prob = NLPProblem(1, lambda x: (f(x[0]), np.zeros(0), np.zeros(0)), grad=lambda x: np.array([grad(x[0])]),
                          lower=np.array([-3.0]), upper=np.array([3.0]))
        r = sqcqp_solve(prob, x0, tol=1e-10, max_iter=200)
        return r.x, r.F, r.status == "converged"
    return solve


def test_convex_landscape_has_one_domain():
    solve = descent(lambda x: (x - 0.7) ** 2, lambda x: 2 * (x - 0.7))
    cl = domains_of_attraction(np.linspace(-2.5, 2.5, 15), solve)
    assert len(cl) == 1 and len(cl.members[0]) == 15


def test_double_well_splits_at_the_ridge():
    f = lambda x: (x * x - 1.0) ** 2 + 0.1 * x
    df = lambda x: 4 * x * (x * x - 1.0) + 0.1
    samples = np.linspace(-2.0, 2.0, 41)
    cl = domains_of_attraction(samples, descent(f, df))
    assert len(cl) == 2 and len(cl) <= len(samples)
    # ridge from a brute-force scan of the landscape: the interior local max
    xs = np.linspace(-0.9, 0.9, 180001)
    ridge = xs[np.argmax(f(xs))]
    reps = sorted(float(r[0]) for r in cl.representatives)
    for i, x0 in enumerate(samples):
        if abs(x0 - ridge) < 0.05:
            continue  # descent from right at the ridge can go either way
        expect = reps[0] if x0 < ridge else reps[1]
        assert abs(cl.representatives[cl.labels[i]][0] - expect) <= 1e-3


def test_unresolved_samples_are_labelled():
    def solver(x0):
        if x0[0] > 0:
            raise ArithmeticError("boom")
        return x0 * 0, 0.0, True

    cl = domains_of_attraction([-1.0, 1.0, -2.0], solver)
    assert cl.labels.tolist() == [0, -1, 0] and cl.unresolved == [1]


# ----------------------------------------------------------------------------
# catalog


def entry(x, tail, prov="bb", seed=0):
    return CatalogEntry([1.0], [0.0, 1.0], [[0.5]], [[1.0]], tail - 1.0, tail, list(map(float, x)), 1, seed, prov)


def test_query_at_a_stored_point_returns_its_tail():
    st_ = CatalogStore(3, kappa=2.0)
    catalog_insert(st_, entry([1, 2, 3], 4.0))
    catalog_insert(st_, entry([0, 0, 0], 9.0))
    assert catalog_query_value(st_, [1, 2, 3]) == 4.0


def test_zero_kappa_single_entry_is_constant():
    st_ = CatalogStore(2, kappa=0.0)
    st_.insert(entry([1, 1], -2.5))
    for x in ([0, 0], [10, -4], [1e6, 3]):
        assert catalog_query_value(st_, x) == -2.5


def test_hundred_entries_match_a_linear_scan():
    rng = np.random.default_rng(0)
    scale = rng.uniform(0.5, 2.0, 4)
    st_ = CatalogStore(4, kappa=1.7, scale=scale)
    rows = []
    for i in range(100):
        x, t = rng.normal(size=4), float(rng.normal())
        st_.insert(entry(x, t, seed=i))
        rows.append((x, t))
    for _ in range(200):
        q = rng.normal(size=4) * 2
        scan = math.inf
        for x, t in rows:
            scan = min(scan, t + 1.7 * math.sqrt(sum(((a - b) / s) ** 2 for a, b, s in zip(q, x, scale))))
        assert catalog_query_value(st_, q) == pytest.approx(scan, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(-10, 10)), min_size=1, max_size=20),
       st.floats(-5, 5), st.floats(-5, 5))
def test_adding_entries_never_raises_the_value(rows, qx, qy):
    st_ = CatalogStore(2, kappa=0.5)
    prev = math.inf
    for x, y, t in rows:
        st_.insert(entry([x, y], t))
        v = catalog_query_value(st_, [qx, qy])
        assert v <= prev
        prev = v


def test_empty_store_warns_and_returns_default():
    st_ = CatalogStore(2, default_value=7.0)
    with pytest.warns(RuntimeWarning):
        assert catalog_query_value(st_, [0, 0]) == 7.0


def test_catalog_file_round_trip_and_compaction(tmp_path):
    path = str(tmp_path / "cat.jsonl")
    st_ = CatalogStore(2, path, kappa=0.3, scale=[1.0, 2.0], default_value=1.5)
    st_.insert(entry([1, 2], 3.0, "greedy"))
    st_.insert(entry([4, 5], 6.0, "sur"))
    with open(path) as fh:
        lines = fh.read().splitlines()
    head = json.loads(lines[0])
    assert head["format"] == "hydrocascade-catalog" and head["version"] == 1 and head["dim"] == 2
    with open(path, "a") as fh:
        fh.write(lines[1] + "\n")  # duplicate record
    back = CatalogStore.load(path)
    assert len(back) == 2 and back.kappa == 0.3 and back.scale.tolist() == [1.0, 2.0]
    assert [e.provenance for e in back.entries] == ["greedy", "sur"]
    with open(path) as fh:
        assert len(fh.read().splitlines()) == 3
    assert catalog_query_value(back, [1, 2]) == catalog_query_value(st_, [1, 2])


def test_catalog_contracts(tmp_path):
    with pytest.raises(ContractError):
        entry([1], 0.0, prov="oracle")
    with pytest.raises(ContractError):
        CatalogStore(2).insert(entry([1, 2, 3], 0.0))
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"format": "hydrocascade-catalog", "version": 99}) + "\n")
    with pytest.raises(ContractError):
        CatalogStore.load(str(bad))


# ----------------------------------------------------------------------------
# catalog construction


def small_build_config(**kw):
    topo, levels = demo_cascade(n_cells=4, depth=4.0)
    base = dict(topology=topo, base_levels=levels, n_intervals=2, node_budget=3, greedy_budget=8,
                hierarchical_iter=2, solver=SolverChoice(dt=300.0, substeps=2), params=ObjectiveParams())
    base.update(kw)
    return CatalogBuildConfig(**base)


def test_build_one_point_gives_entries_and_min_over_methods():
    store, report = build_catalog(small_build_config(), 1, seed=3)
    assert report.points == 1
    assert len(store) >= 1 or report.failures
    best_tail = min(e.J_tail for e in store.entries)
    for m in {e.provenance for e in store.entries}:
        assert best_tail <= min(e.J_tail for e in store.entries if e.provenance == m)
    assert report.per_method and all(n >= 1 for n, _ in report.per_method.values())


def test_build_is_deterministic_per_seed(tmp_path):
    cfg = small_build_config(methods=("greedy", "sur"))
    a, b = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
    build_catalog(cfg, 2, seed=5, path=a)
    build_catalog(small_build_config(methods=("greedy", "sur"), workers=2), 2, seed=5, path=b)
    with open(a, "rb") as fa, open(b, "rb") as fb:
        assert fa.read() == fb.read()
