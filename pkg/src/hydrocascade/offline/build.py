"""Catalog construction over a lattice of initial states and inflow regimes."""
from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ..cases import lake_states
from ..ocp import ControlSchedule, ObjectiveParams, OCPInstance, SolverChoice
from ..uncertainty import ForecastModel, derive_seed as _seed, rng_for, sample_path
from .bb import bb_solve
from .catalog import CatalogStore
from .features import entry_from_evaluation, feature_scale, terminal_dim
from .heuristics import greedy_improve, hierarchical_solve, sum_up_rounding
from .problems import OCPSwitchProblem

log = logging.getLogger(__name__)

METHODS = ("bb", "hierarchical", "greedy", "sur")


@dataclass
class CatalogBuildConfig:
    topology: object
    base_levels: list
    forecast: ForecastModel = field(default_factory=ForecastModel.default)
    params: ObjectiveParams = field(default_factory=ObjectiveParams)
    solver: SolverChoice = field(default_factory=lambda: SolverChoice(dt=300.0, substeps=4))
    n_intervals: int = 4
    interval: float = 600.0
    depth_offsets: tuple = (-0.3, 0.0, 0.3)
    inflow_regimes: tuple = (3.0, 5.0, 8.0)
    n_scenarios: int = 2
    v_level: float = 0.5
    node_budget: int = 6
    zmax: int = 1
    hierarchical_iter: int = 5
    greedy_budget: int = 40
    greedy_v_step: float = 0.25
    methods: tuple = METHODS
    kappa: float = 1.0
    default_value: float = 0.0
    workers: int = 1


@dataclass
class BuildReport:
    points: int
    entries: int
    per_method: dict
    failures: list

    def lines(self):
        out = [f"lattice points: {self.points}, entries: {self.entries}"]
        for m, (n, best) in sorted(self.per_method.items()):
            out.append(f"  {m:<13} entries={n:<4d} best J={best:.6g}")
        for f in self.failures:
            out.append(f"  failure: {f}")
        return out


def lattice(cfg, seed):
    """Lattice points (per-reach depth offsets, inflow regime) in a seeded order."""
    R = len(cfg.topology.reaches)
    pts = list(itertools.product(*([cfg.depth_offsets] * R), cfg.inflow_regimes))
    order = rng_for(seed, 7).permutation(len(pts))
    return [(tuple(pts[i][:R]), pts[i][R]) for i in order]


def lattice_instance(cfg, offsets, inflow, seed, index):
    topo = cfg.topology
    levels = [lv + off for lv, off in zip(cfg.base_levels, offsets)]
    model = replace(cfg.forecast, inflow=replace(cfg.forecast.inflow, base=float(inflow)))
    horizon = cfg.n_intervals * cfg.interval
    paths = [sample_path(model, horizon, cfg.interval, _seed(seed, index, s)) for s in range(cfg.n_scenarios)]
    grid = cfg.interval * np.arange(cfg.n_intervals + 1, dtype=float)
    return OCPInstance(topo, lake_states(topo, levels), paths, cfg.params, grid, cfg.solver)


def _point(cfg, seed, index, offsets, inflow):
    """All methods on one lattice point -> (entries, per-method best, failures)."""
    inst = lattice_instance(cfg, offsets, inflow, seed, index)
    vmax = np.array([d.max_opening for d in cfg.topology.dams])
    D, T = cfg.topology.n_dams, cfg.n_intervals
    v = np.repeat((cfg.v_level * vmax)[:, None], T, axis=1)
    prob = OCPSwitchProblem(inst, v)
    found = []  # (provenance, schedule)
    failures = []
    root_relax = None

    if "bb" in cfg.methods:
        try:
            r = bb_solve(prob, cfg.node_budget)
            root_relax = r.root_relaxation
            found += [("bb", prob.schedule(z)) for z, _ in r.additions]
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            failures.append(f"point {index} bb: {exc}")
    if "sur" in cfg.methods:
        try:
            if root_relax is None:
                root_relax = prob.relax(np.zeros(prob.n_binary), np.ones(prob.n_binary)).z
            z = sum_up_rounding(root_relax.reshape(D, T), inst.grid)
            found.append(("sur", prob.schedule(z)))
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            failures.append(f"point {index} sur: {exc}")
    if "hierarchical" in cfg.methods:
        try:
            h = hierarchical_solve(prob, cfg.zmax, max_iter=cfg.hierarchical_iter)
            found.append(("hierarchical", prob.schedule(h.z)))
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            failures.append(f"point {index} hierarchical: {exc}")
    if "greedy" in cfg.methods:
        try:
            start = ControlSchedule(inst.grid.copy(), v.copy(), np.ones((D, T)))
            g = greedy_improve(start, inst.J, cfg.greedy_budget, cfg.greedy_v_step, vmax)
            found.append(("greedy", g.schedule))
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            failures.append(f"point {index} greedy: {exc}")

    entries = []
    for prov, sched in found:
        value, bundle = inst.evaluate(sched)
        e = entry_from_evaluation(inst, sched, value, bundle, prov, _seed(seed, index))
        if e is None:
            failures.append(f"point {index} {prov}: infeasible schedule (chi = 0)")
        else:
            entries.append(e)
    return entries, failures


def build_catalog(cfg, budget, seed=0, path=None):
    """Run every configured method on ``budget`` lattice points.

    Points are solved concurrently when ``cfg.workers > 1``; entries are
    inserted in lattice order, so the store is a function of the seed.
    Individual failures are reported, never raised.
    """
    pts = lattice(cfg, seed)[: max(int(budget), 0)]
    store = CatalogStore(terminal_dim(cfg.topology), path, cfg.kappa,
                         feature_scale(cfg.topology), cfg.default_value)
    jobs = [(cfg, seed, i, off, q) for i, (off, q) in enumerate(pts)]
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(lambda a: _point(*a), jobs))
    else:
        results = [_point(*a) for a in jobs]
    per_method = {}
    failures = []
    for entries, fails in results:
        failures += fails
        for e in entries:
            store.insert(e)
            n, best = per_method.get(e.provenance, (0, math.inf))
            per_method[e.provenance] = (n + 1, min(best, e.J))
    for f in failures:
        log.info(f)
    return store, BuildReport(len(pts), len(store), per_method, failures)
