"""Closed-loop orchestration: a fine explicit plant driven by a realized
noise path, controlled by the meso ensemble and the real-time layer.

The controller side only ever sees ``Observer.prefix(t)``, the samples of
the realized path up to the current time, plus the forecast model. Every
random stream is keyed by the master seed, so a run is a pure function of
(config, seed). Files written by a run:

    metrics.json       deterministic run metrics
    timing.json        wall clock per layer and RT latency percentiles
    plant_steps.csv    one row per RT interval (price, inflow, controls, energy)
    plant_states.csv   fine-grid cell states after every RT interval
    meso_log.csv       one row per meso generation
    rt_log.csv         one row per RT step (deterministic columns)
    rt_latency.csv     one row per RT step (solve time, budget flag)
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .cases import demo_cascade, lake_states
from .hydro.config import topology_from_dict
from .hydro.core import ContractError, advance_cascade_detailed, cascade_cfl_dt, power_output, restrict_state
from .meso import MesoConfig, MesoContext, advance_window, init_ensemble, meso_iterate
from .ocp import ObjectiveParams, SolverChoice
from .offline import CatalogBuildConfig, CatalogStore, build_catalog, value_function
from .realtime import (
    RTConfig, RTIState, RTIWeights, SemiImplicitMap, StateVector, linearize_along,
    nominal_trajectory, pod_basis, run_realtime_segment,
)
from .uncertainty import ForecastModel, build_scenario_fan, derive_seed, sample_path

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# stream keys under the master seed
PLANT_STREAM, FAN_STREAM, ENSEMBLE_STREAM, OFFLINE_STREAM = 1, 2, 3, 4


# ----------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Everything a closed-loop run depends on besides the master seed.

    ``topology`` is either ``{"demo": {...}}`` (keyword arguments of
    ``demo_cascade``) or an explicit topology mapping plus
    ``initial_levels``. The controller works on the plant grid coarsened
    by ``coarsen``.
    """

    topology: dict = field(default_factory=lambda: {"demo": {"n_cells": 16, "depth": 4.0}})
    forecast: ForecastModel = field(default_factory=ForecastModel.default)
    params: ObjectiveParams = field(default_factory=ObjectiveParams)
    coarsen: int = 2
    rt_interval: float = 60.0
    meso_interval: float = 600.0
    meso_horizon: int = 3
    ticks: int = 6
    offline_budget: int = 0
    catalog_path: str | None = None
    offline_node_budget: int = 6
    meso_P: int = 8
    meso_generations: int = 1
    meso_fan_size: int = 2
    meso_max_iter: int = 6
    meso_tol: float = 1e-6
    meso_dt: float = 300.0
    substeps: int = 4
    meso_workers: int = 1
    rt_horizon: int = 5
    rt_K_z: int = 5
    rt_epsilon: float = 1.0
    rt_budget: float = 0.05
    rt_R: float = 1e-2
    pod_energy: float = 0.999999
    compare_cold: bool = False
    seed: int = 0
    out: str | None = None
    # keyword options for single-layer subcommands
    simulate: dict = field(default_factory=dict)
    mlmc: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def rt_per_meso(self):
        return int(round(self.meso_interval / self.rt_interval))

    @property
    def duration(self):
        return self.ticks * self.meso_interval

    def validate(self):
        if self.rt_interval <= 0 or self.meso_interval <= 0:
            raise ContractError("intervals must be positive")
        ratio = self.meso_interval / self.rt_interval
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ContractError("the RT interval must divide the meso interval")
        if self.meso_tol <= 0 or self.rt_budget <= 0 or self.meso_dt <= 0:
            raise ContractError("tolerances and budgets must be positive")
        if not 0 < self.pod_energy <= 1:
            raise ContractError("pod_energy must lie in (0, 1]")
        if self.meso_horizon < 2:
            raise ContractError("the meso horizon needs a binary prefix and a relaxed tail")
        if self.meso_P < 4:
            raise ContractError("the meso ensemble needs at least 4 particles")
        if self.ticks < 1 or self.coarsen < 1 or self.rt_horizon < 1:
            raise ContractError("ticks, coarsen and rt_horizon must be at least 1")

    @classmethod
    def from_dict(cls, doc):
        """Build from the YAML document layout (see configs/nominal.yaml)."""
        if not isinstance(doc, dict):
            raise ContractError("config must be a mapping")
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ContractError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        known = {"schema_version", "topology", "forecast", "objective", "cadence", "offline",
                 "meso", "realtime", "seed", "out", "simulate", "mlmc"}
        extra = set(doc) - known
        if extra:
            raise ContractError(f"unknown config sections: {sorted(extra)}")
        kw = {}
        try:
            if "topology" in doc:
                kw["topology"] = dict(doc["topology"])
            if "forecast" in doc:
                kw["forecast"] = ForecastModel.from_dict(doc["forecast"])
            if "objective" in doc:
                kw["params"] = ObjectiveParams.from_dict(doc["objective"])
            sections = {
                "cadence": {"rt_interval": float, "meso_interval": float, "meso_horizon": int,
                            "ticks": int, "coarsen": int},
                "offline": {"budget": ("offline_budget", int), "catalog": ("catalog_path", str),
                            "node_budget": ("offline_node_budget", int)},
                "meso": {"P": ("meso_P", int), "generations": ("meso_generations", int),
                         "fan_size": ("meso_fan_size", int), "max_iter": ("meso_max_iter", int),
                         "tol": ("meso_tol", float), "dt": ("meso_dt", float),
                         "substeps": int, "workers": ("meso_workers", int)},
                "realtime": {"horizon": ("rt_horizon", int), "K_z": ("rt_K_z", int),
                             "epsilon": ("rt_epsilon", float), "budget": ("rt_budget", float),
                             "R": ("rt_R", float), "pod_energy": float, "compare_cold": bool},
            }
            for name, keys in sections.items():
                sec = doc.get(name) or {}
                unknown = set(sec) - set(keys)
                if unknown:
                    raise ContractError(f"unknown keys in {name}: {sorted(unknown)}")
                for k, spec in keys.items():
                    if k in sec:
                        attr, conv = spec if isinstance(spec, tuple) else (k, spec)
                        kw[attr] = None if sec[k] is None else conv(sec[k])
            for k in ("seed", "out"):
                if k in doc:
                    kw[k] = doc[k] if k == "out" else int(doc[k])
            for k in ("simulate", "mlmc"):
                if k in doc:
                    kw[k] = dict(doc[k] or {})
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ContractError):
                raise
            raise ContractError(f"malformed config: {exc}") from exc
        return cls(**kw)


def load_config(path):
    import yaml

    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ContractError(f"cannot parse {path}: {exc}") from exc
    return RunConfig.from_dict(doc)


def build_topology(cfg):
    """(fine topology, coarse topology, initial levels)."""
    spec = dict(cfg.topology)
    if "demo" in spec:
        fine, levels = demo_cascade(**(spec["demo"] or {}))
    else:
        levels = spec.pop("initial_levels", None)
        if levels is None:
            raise ContractError("explicit topologies need initial_levels")
        fine = topology_from_dict(spec)
        levels = [float(v) for v in levels]
    if len(levels) != len(fine.reaches):
        raise ContractError("one initial level per reach required")
    for r in fine.reaches:
        if r.bathymetry.n_cells % cfg.coarsen or r.bathymetry.n_cells // cfg.coarsen < 3:
            raise ContractError("coarsening must divide every cell count and leave at least 3 cells")
    coarse = fine.coarsened(cfg.coarsen) if cfg.coarsen > 1 else fine
    return fine, coarse, levels


# ----------------------------------------------------------------------------
# plant and observation


class Observer:
    """Controller-side view of the realized path: past samples only."""

    def __init__(self, path):
        self._path = path

    def prefix(self, t):
        k = int(np.searchsorted(self._path.times, t + 1e-9, side="right"))
        return self._path.prefix(max(k, 1))


@dataclass
class PlantStep:
    step: int
    t: float
    price: float
    inflow: float
    controls: list
    energy: list


class TruthPlant:
    """Fine-grid explicit solver on the realized path.

    ``apply`` advances one RT interval with CFL-limited sub-steps; the
    inflow and price are the path samples at the interval start.
    ``measure`` averages the fine state onto the controller grid.
    """

    def __init__(self, fine, coarse, states, path, rt_interval, factor):
        self.fine = fine
        self.sv = StateVector(coarse)
        self.states = [s.copy() for s in states]
        self._path = path
        self.dt = float(rt_interval)
        self.factor = int(factor)
        self.t = 0.0
        self.steps = []
        self.snapshots = [[s.copy() for s in self.states]]
        self.vmax = np.array([d.max_opening for d in fine.dams])

    def measure(self):
        coarse = [restrict_state(s, self.factor) if self.factor > 1 else s for s in self.states]
        return self.sv.pack(coarse)

    def coarse_states(self):
        return self.sv.unpack(self.measure(), self.t)

    def _sanitize(self, controls):
        out = []
        for d, (v, z) in enumerate(controls):
            v = float(np.clip(v, 0.0, self.vmax[d])) if math.isfinite(v) else 0.5 * self.vmax[d]
            out.append((v, 1.0 if z >= 0.5 else 0.0))
        return out

    def apply(self, controls):
        ctrl = self._sanitize(controls)
        t0 = self.t
        t_end = t0 + self.dt
        q_in = float(self._path.value_at(t0, "inflow"))
        price = float(self._path.value_at(t0, "price"))
        energy = np.zeros(len(ctrl))
        states = self.states
        t = t0
        while t < t_end - 1e-9:
            dt = min(cascade_cfl_dt(self.fine, states), t_end - t)
            res = advance_cascade_detailed(self.fine, states, ctrl, q_in, dt)
            energy += np.array([power_output(q, h, dam, self.fine.g)
                                for q, h, dam in zip(res.gate_flows, res.heads, self.fine.dams)]) * dt / 3600.0
            states = res.states
            t += dt
        for s in states:
            s.t = t_end
        self.states = states
        self.t = t_end
        self.steps.append(PlantStep(len(self.steps), t0, price, q_in, ctrl, energy.tolist()))
        self.snapshots.append([s.copy() for s in states])
        return ctrl


# ----------------------------------------------------------------------------
# metrics


@dataclass
class RunMetrics:
    profit: float
    energy: float
    violations: int
    max_excursion: float
    switch_counts: list
    steps: int
    degraded_steps: int
    degraded: bool
    min_adp_margin: float = math.inf
    wall_clock: dict = field(default_factory=dict)
    latency: dict = field(default_factory=dict)

    def deterministic(self):
        d = asdict(self)
        d.pop("wall_clock")
        d.pop("latency")
        return d


def profit_of(steps):
    """Sum over RT intervals of price times the energy of all turbines."""
    total = 0.0
    for s in steps:
        total += s.price * float(np.sum(s.energy))
    return total


def bound_violations(topology, snapshots, params):
    """(count, max excursion) of plant cells outside the depth and speed bounds."""
    count = 0
    worst = 0.0
    for snap in snapshots:
        for r, s in zip(topology.reaches, snap):
            h = s.A / r.width
            wet = s.A > 0
            u = np.where(wet, s.Q / np.where(wet, s.A, 1.0), 0.0)
            exc = np.maximum.reduce([params.h_min - h, h - params.h_max, np.abs(u) - params.u_max,
                                     np.zeros_like(h)])
            count += int(np.count_nonzero(exc > 0))
            worst = max(worst, float(exc.max()))
    return count, worst


def switch_counts(steps, n_dams, z_prev=None):
    out = []
    for d in range(n_dams):
        zs = [z_prev[d]] if z_prev is not None else []
        zs += [s.controls[d][1] for s in steps]
        out.append(int(np.count_nonzero(np.diff(zs))) if len(zs) > 1 else 0)
    return out


def plant_metrics(plant, params, degraded_steps=0, min_margin=math.inf):
    n, worst = bound_violations(plant.fine, plant.snapshots, params)
    return RunMetrics(
        profit=profit_of(plant.steps),
        energy=float(sum(float(np.sum(s.energy)) for s in plant.steps)),
        violations=n, max_excursion=worst,
        switch_counts=switch_counts(plant.steps, plant.fine.n_dams, [1.0] * plant.fine.n_dams),
        steps=len(plant.steps), degraded_steps=degraded_steps, degraded=degraded_steps > 0,
        min_adp_margin=min_margin,
    )


def latency_percentiles(times):
    t = np.asarray(times, float)
    if t.size == 0:
        return {}
    return {"p50": float(np.percentile(t, 50)), "p95": float(np.percentile(t, 95)),
            "p99": float(np.percentile(t, 99)), "max": float(t.max())}


# ----------------------------------------------------------------------------
# output


def write_plant_csv(out, plant):
    D = plant.fine.n_dams
    with open(os.path.join(out, "plant_steps.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t", "price", "inflow"] + [f"v{d}" for d in range(D)]
                   + [f"z{d}" for d in range(D)] + [f"energy{d}" for d in range(D)])
        for s in plant.steps:
            w.writerow([s.step, repr(s.t), repr(s.price), repr(s.inflow)]
                       + [repr(c[0]) for c in s.controls] + [repr(c[1]) for c in s.controls]
                       + [repr(e) for e in s.energy])
    with open(os.path.join(out, "plant_states.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["snapshot", "reach", "cell", "width", "A", "Q"])
        for k, snap in enumerate(plant.snapshots):
            for r_i, (r, s) in enumerate(zip(plant.fine.reaches, snap)):
                for c in range(s.A.size):
                    w.writerow([k, r_i, c, repr(float(r.width)), repr(float(s.A[c])), repr(float(s.Q[c]))])


def write_metrics(out, metrics, name="metrics.json"):
    with open(os.path.join(out, name), "w") as fh:
        json.dump(metrics.deterministic(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(os.path.join(out, "timing.json"), "w") as fh:
        json.dump({"wall_clock": metrics.wall_clock, "latency": metrics.latency}, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _write_rt_logs(out, rows):
    with open(os.path.join(out, "rt_log.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tick", "step", "qp_iterations", "cold_iterations", "tracking_error", "fallback",
                    "discrepancy", "kkt"])
        for tick, r in rows:
            w.writerow([tick, r.step, r.iterations, r.cold_iterations, repr(r.tracking_error),
                        int(r.fallback), repr(r.discrepancy), repr(r.kkt)])
    with open(os.path.join(out, "rt_latency.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tick", "step", "solve_time", "over_budget"])
        for tick, r in rows:
            w.writerow([tick, r.step, repr(r.solve_time), int(r.over_budget)])


# ----------------------------------------------------------------------------
# runs


def _realized_path(cfg):
    return sample_path(cfg.forecast, cfg.duration, cfg.rt_interval, derive_seed(cfg.seed, PLANT_STREAM))


def _make_plant(cfg):
    fine, coarse, levels = build_topology(cfg)
    path = _realized_path(cfg)
    plant = TruthPlant(fine, coarse, lake_states(fine, levels), path, cfg.rt_interval, cfg.coarsen)
    return plant, Observer(path), coarse


def run_fixed_policy(cfg, controls, out=None):
    """Apply constant per-dam (v, z) controls to the plant for the whole run."""
    t0 = time.perf_counter()
    plant, _, _ = _make_plant(cfg)
    for _ in range(cfg.ticks * cfg.rt_per_meso):
        plant.apply(controls)
    m = plant_metrics(plant, cfg.params)
    m.wall_clock = {"plant": time.perf_counter() - t0}
    if out:
        os.makedirs(out, exist_ok=True)
        write_plant_csv(out, plant)
        write_metrics(out, m)
    return m


def baseline_policy(cfg, out=None):
    """Every gate at half its maximum opening and open, on the same plant and path."""
    fine, _, _ = build_topology(cfg)
    return run_fixed_policy(cfg, [(0.5 * d.max_opening, 1.0) for d in fine.dams], out)


def offline_catalog(cfg, coarse, levels_coarse=None):
    """Load the configured catalog, or build one inline when a budget is set."""
    if cfg.catalog_path and os.path.exists(cfg.catalog_path):
        return CatalogStore.load(cfg.catalog_path)
    if cfg.offline_budget <= 0:
        return None
    _, _, levels = build_topology(cfg)
    bc = CatalogBuildConfig(
        topology=coarse, base_levels=levels, forecast=cfg.forecast, params=cfg.params,
        solver=SolverChoice(dt=cfg.meso_dt, substeps=cfg.substeps), n_intervals=cfg.meso_horizon + 1,
        interval=cfg.meso_interval, n_scenarios=cfg.meso_fan_size, node_budget=cfg.offline_node_budget,
    )
    store, report = build_catalog(bc, cfg.offline_budget, derive_seed(cfg.seed, OFFLINE_STREAM), cfg.catalog_path)
    for line in report.lines():
        log.info(line)
    return store


@dataclass
class ClosedLoopResult:
    metrics: RunMetrics
    plant: TruthPlant
    generation_logs: list
    rt_logs: list
    adp_margins: list


class _SegmentPlant:
    """Plant adapter for one RT segment that remembers the last control."""

    def __init__(self, plant, last):
        self.plant = plant
        self.last = last
        self.applied = 0

    def measure(self):
        return self.plant.measure()

    def apply(self, control):
        self.last = self.plant.apply(control)
        self.applied += 1


def _fan_builder(cfg, tick):
    def build(prefix):
        t_c = tick * cfg.meso_interval
        return build_scenario_fan(cfg.forecast, prefix, cfg.meso_fan_size,
                                  t_c + cfg.meso_horizon * cfg.meso_interval, dt=cfg.rt_interval,
                                  seed=derive_seed(cfg.seed, FAN_STREAM, tick))
    return build


def _plan_controls(best, cfg, n_steps):
    """Per-RT-step (v, z) vectors that hold each meso interval's plan."""
    spi = cfg.rt_per_meso
    T = best.v.shape[1]
    return [np.concatenate((best.v[:, min(s // spi, T - 1)], best.z[:, min(s // spi, T - 1)]))
            for s in range(n_steps)]


def run_closed_loop(cfg, out=None, catalog=None):
    """Three-tier closed loop on the fine plant; returns ClosedLoopResult.

    Per meso tick: build a fan from the observed prefix, evolve the
    ensemble, take the best plan, build its nominal trajectory, POD basis
    and linearisation, then run RT steps against the plant until the next
    tick. A failing layer holds the last applied control for the rest of
    the tick and is counted in ``degraded_steps``.
    """
    clock = {"offline": 0.0, "meso": 0.0, "linearize": 0.0, "realtime": 0.0}
    t0 = time.perf_counter()
    plant, observer, coarse = _make_plant(cfg)
    if catalog is None:
        catalog = offline_catalog(cfg, coarse)
    clock["offline"] = time.perf_counter() - t0
    value_fn = value_function(catalog) if catalog is not None and len(catalog) else None
    D = coarse.n_dams
    vmax = np.array([d.max_opening for d in coarse.dams])
    spi = cfg.rt_per_meso
    mcfg = MesoConfig(P=cfg.meso_P, workers=cfg.meso_workers)
    rcfg = RTConfig(horizon=cfg.rt_horizon, K_z=cfg.rt_K_z, epsilon=cfg.rt_epsilon, compare_cold=cfg.compare_cold)
    weights = RTIWeights(R=cfg.rt_R, budget=cfg.rt_budget)
    last = [(0.5 * v, 1.0) for v in vmax]
    ensemble = None
    fan = None
    gen_logs, rt_rows, margins = [], [], []
    degraded = 0
    for tick in range(cfg.ticks):
        t_c = tick * cfg.meso_interval
        states = plant.coarse_states()
        grid = t_c + cfg.meso_interval * np.arange(cfg.meso_horizon + 1, dtype=float)
        ctx = MesoContext(coarse, states, grid, cfg.params, SolverChoice(dt=cfg.meso_dt, substeps=cfg.substeps),
                          np.array([c[0] for c in last]), np.array([c[1] for c in last]),
                          max_iter=cfg.meso_max_iter, tol=cfg.meso_tol)
        # meso layer
        t1 = time.perf_counter()
        best = None
        try:
            if fan is None:
                fan = _fan_builder(cfg, tick)(observer.prefix(t_c))
            if ensemble is None:
                ensemble = init_ensemble(ctx, cfg.meso_P, derive_seed(cfg.seed, ENSEMBLE_STREAM), catalog)
            for attempt in range(2):
                for _ in range(cfg.meso_generations):
                    ensemble, best, glog, results = meso_iterate(ensemble, fan, catalog, ctx, mcfg, value_fn)
                    gen_logs.append((tick, glog))
                    for r in results:
                        if r is not None and math.isfinite(r.J):
                            margins.extend(r.accepted_margins)
                if math.isfinite(best.J):
                    break
                # every particle started infeasible: restart from a fresh spread of openings
                log.info("tick %d: restarting the ensemble", tick)
                ensemble = init_ensemble(ctx, cfg.meso_P, derive_seed(cfg.seed, ENSEMBLE_STREAM, tick), catalog)
            if best is None or not math.isfinite(best.J):
                raise RuntimeError("no particle with a finite value")
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            log.warning("tick %d: meso layer failed (%s); holding the last control", tick, exc)
            best = None
        clock["meso"] += time.perf_counter() - t1
        # real-time layer
        seg = _SegmentPlant(plant, last)
        if best is not None:
            try:
                t2 = time.perf_counter()
                mean_inflow = lambda s, fan=fan, t_c=t_c: float(np.mean(
                    [p.value_at(t_c + s * cfg.rt_interval, "inflow") for p in fan.scenarios]))
                step_map = SemiImplicitMap(coarse, cfg.rt_interval, cfg.substeps, mean_inflow)
                ubar = _plan_controls(best, cfg, spi + cfg.rt_horizon)
                xs = nominal_trajectory(step_map, plant.measure(), ubar)
                basis = pod_basis(np.array(xs).T, cfg.pod_energy)
                lin = linearize_along(xs, ubar, basis, step_map, vmax)
                clock["linearize"] += time.perf_counter() - t2
                t3 = time.perf_counter()
                res = run_realtime_segment(seg, lin, spi, weights, rcfg, RTIState.cold(cfg.rt_horizon, D))
                clock["realtime"] += time.perf_counter() - t3
                rt_rows.extend((tick, r) for r in res.logs)
            except (ArithmeticError, ValueError, RuntimeError) as exc:
                log.warning("tick %d: real-time layer failed after %d steps (%s); holding the last control",
                            tick, seg.applied, exc)
        while seg.applied < spi:
            seg.apply(seg.last)
            degraded += 1
        last = seg.last
        # slide the window and rebuild the fan from what was observed
        if ensemble is not None:
            t_next = t_c + cfg.meso_interval
            try:
                ensemble, _, fan = advance_window(ensemble, observer.prefix(t_next), _fan_builder(cfg, tick + 1))
            except (ArithmeticError, ValueError, RuntimeError) as exc:
                log.warning("tick %d: window shift failed (%s); restarting the ensemble", tick, exc)
                ensemble, fan = None, None
    m = plant_metrics(plant, cfg.params, degraded, min(margins) if margins else math.inf)
    clock["total"] = time.perf_counter() - t0
    clock["plant"] = clock["total"] - sum(v for k, v in clock.items() if k != "total")
    m.wall_clock = clock
    m.latency = latency_percentiles([r.solve_time for _, r in rt_rows])
    result = ClosedLoopResult(m, plant, gen_logs, rt_rows, margins)
    if out:
        write_run(out, result)
    return result


def write_run(out, result):
    os.makedirs(out, exist_ok=True)
    write_plant_csv(out, result.plant)
    write_metrics(out, result.metrics)
    _write_rt_logs(out, result.rt_logs)
    with open(os.path.join(out, "meso_log.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tick", "generation", "best_J", "median_J", "replacements", "mutations",
                    "validation_discrepancy"])
        for tick, g in result.generation_logs:
            w.writerow([tick, g.generation, repr(g.best_J), repr(g.median_J), g.replacements, g.mutations,
                        repr(g.validation_discrepancy)])
