"""Meso layer: a particle ensemble of switch schedules scored by a short
ADP horizon problem.

Each particle fixes binary switch decisions on every interval but the
last, where z is relaxed to [0, 1]. Scoring a particle optimises its gate
openings and its relaxed final z with sqcqp against a scenario fan, adding
the catalog's terminal value at the end of the horizon. Generations rank,
replace, mutate and keep elites; the window then slides one interval.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .hydro.core import ContractError
from .ocp import (
    ControlSchedule,
    ScheduleCodec,
    objective_eval,
    simulate_schedule,
)
from .offline.catalog import value_function
from .offline.features import initial_summary, terminal_state
from .sqcqp import NLPProblem, sqcqp_solve

log = logging.getLogger(__name__)

INF = math.inf
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
SILVER = math.sqrt(2.0) - 1.0
BRONZE = math.sqrt(3.0) - 1.0


@dataclass
class Particle:
    v: np.ndarray
    z: np.ndarray
    J: float = INF
    age: int = 0
    provenance: str = "init"

    def __post_init__(self):
        self.v = np.atleast_2d(np.asarray(self.v, float)).copy()
        self.z = np.atleast_2d(np.asarray(self.z, float)).copy()
        if self.v.shape != self.z.shape:
            raise ContractError("v and z must have the same shape")
        self.validate()

    def validate(self):
        pre = self.z[:, :-1]
        if np.any((pre != 0) & (pre != 1)):
            raise ContractError("binary prefix holds a fractional value")
        if np.any(self.z[:, -1] < 0) or np.any(self.z[:, -1] > 1):
            raise ContractError("relaxed tail outside [0, 1]")
        if not (math.isfinite(self.J) or self.J == INF):
            raise ContractError("J must be finite or +inf")

    def copy(self):
        return Particle(self.v.copy(), self.z.copy(), self.J, self.age, self.provenance)

    def schedule(self, grid):
        return ControlSchedule(np.asarray(grid, float), self.v.copy(), self.z.copy(), relaxed=True)


@dataclass
class Ensemble:
    particles: list
    generation: int = 0
    seed: int = 0
    mutations: int = 0

    def __post_init__(self):
        if len(self.particles) < 4:
            raise ContractError("an ensemble needs at least 4 particles")

    @property
    def P(self):
        return len(self.particles)

    def best(self):
        return min(self.particles, key=lambda p: p.J)


@dataclass
class MesoContext:
    """Model side of the horizon problem: coarse topology, start state,
    interval grid (absolute times), objective weights and solver."""

    topology: object
    initial_states: list
    grid: np.ndarray
    params: object
    solver: object
    v_prev: np.ndarray = None
    z_prev: np.ndarray = None
    max_iter: int = 8
    tol: float = 1e-6


@dataclass
class MesoConfig:
    P: int = 12
    replace_frac: float = 0.25
    mutation_frac: float = 0.5
    K_val: int = 5
    workers: int = 1
    validator: object = None


@dataclass
class ADPResult:
    J: float
    v: np.ndarray
    z_tail: np.ndarray
    status: str
    accepted_margins: list = field(default_factory=list)
    iterations: int = 0


# ----------------------------------------------------------------------------
# scoring


def horizon_objective(particle, fan, value_fn, params, ctx):
    """(codec, f, margins) where f(x) is the ADP value of packed decisions.

    ``margins`` maps evaluated points to their smallest state margin.
    """
    sched = particle.schedule(ctx.grid)
    free = np.zeros(sched.z.shape, dtype=bool)
    free[:, -1] = True
    codec = ScheduleCodec.for_schedule(sched, free)
    scen = list(fan.scenarios)
    t_end = float(ctx.grid[-1])
    margins = {}

    def f(x):
        s = codec.unpack(x)
        bundle = simulate_schedule(ctx.topology, s, scen, ctx.solver, ctx.initial_states)
        ov = objective_eval(bundle, s, params, ctx.v_prev, ctx.z_prev)
        margins[np.asarray(x, float).tobytes()] = ov.min_margin
        if not ov.finite:
            return INF
        if value_fn is None:
            return ov.J
        tv = [value_fn(terminal_state(ctx.topology, sc.snapshots[-1], s.v[:, -1], s.z[:, -1],
                                      p.value_at(t_end, "inflow"), p.value_at(t_end, "price")))
              for sc, p in zip(bundle.scenarios, scen)]
        return ov.J + float(np.mean(tv))

    return codec, f, margins


def adp_evaluate(particle, fan, value_fn, params, ctx):
    """Optimise v and the relaxed final z of one particle.

    J is the fan-mean stage cost plus barrier plus the mean terminal value;
    an infeasible start or an infeasible stall yields J = +inf and leaves
    the particle's controls as they were.
    """
    if ctx.grid.size - 1 > 10:
        raise ContractError("ADP horizons are limited to 10 intervals")
    codec, f, margins = horizon_objective(particle, fan, value_fn, params, ctx)
    lo, hi = codec.bounds(ctx.topology.dams)
    x0 = np.clip(codec.pack(particle.schedule(ctx.grid)), lo, hi)
    prob = NLPProblem(codec.size, lambda x: (f(x), np.zeros(0), np.zeros(0)),
                      lower=lo, upper=hi, scale=np.maximum(hi - lo, 1e-12))
    F0 = prob.eval(x0)[0]
    if not math.isfinite(F0):
        return ADPResult(INF, particle.v.copy(), particle.z[:, -1].copy(), "infeasible start")
    res = sqcqp_solve(prob, x0, tol=ctx.tol, max_iter=ctx.max_iter)
    acc = [margins.get(np.asarray(x, float).tobytes(), INF) for x, _, _ in res.accepted_points]
    if res.status == "infeasible_stall":
        return ADPResult(INF, particle.v.copy(), particle.z[:, -1].copy(), res.status, acc, res.iterations)
    s = codec.unpack(res.x)
    return ADPResult(float(res.F), s.v, s.z[:, -1].copy(), res.status, acc, res.iterations)


# ----------------------------------------------------------------------------
# variation


class WeylSequence:
    """Integer low-discrepancy draws from frac(n * alpha) for fixed irrationals."""

    def __init__(self, start=0):
        self.n = int(start)

    def draw(self, m):
        """A list of 1 or 2 distinct indices in range(m)."""
        n = self.n = self.n + 1
        i1 = int(((n * GOLDEN) % 1.0) * m)
        if m == 1:
            return [i1]
        count = 1 + int(((n * SILVER) % 1.0) * 2)
        if count == 1:
            return [i1]
        i2 = (i1 + 1 + int(((n * BRONZE) % 1.0) * (m - 1))) % m
        return [i1, i2]


def mutate(particle, seq):
    """Flip 1 or 2 distinct binary-prefix entries chosen by ``seq``."""
    D, T = particle.z.shape
    m = D * (T - 1)
    if m == 0:
        raise ContractError("mutation needs a nonempty binary prefix")
    out = particle.copy()
    for idx in seq.draw(m):
        d, k = divmod(idx, T - 1)
        out.z[d, k] = 1.0 - out.z[d, k]
    out.J = INF
    out.age = 0
    out.provenance = "mutation"
    return out


def resample_schedule(entry_grid, v, z, grid):
    """Nearest-interval resampling of a catalog schedule onto ``grid``.

    Times are relative to each grid's start; the binary prefix is rounded.
    """
    eg = np.asarray(entry_grid, float)
    eg = eg - eg[0]
    g = np.asarray(grid, float)
    mid = 0.5 * (g[:-1] + g[1:]) - g[0]
    k = np.clip(np.searchsorted(eg, mid, side="right") - 1, 0, eg.size - 2)
    v = np.asarray(v, float)[:, k]
    z = np.asarray(z, float)[:, k].copy()
    z[:, :-1] = np.round(z[:, :-1])
    return v, z


def catalog_seeds(catalog, ctx, count):
    """Up to ``count`` particles from the catalog entries nearest the current state."""
    if catalog is None or len(catalog) == 0 or count <= 0:
        return []
    summary = initial_summary(ctx.topology, ctx.initial_states)
    vmax = np.array([d.max_opening for d in ctx.topology.dams])[:, None]
    out = []
    for e in catalog.nearest(summary, k=len(catalog)):
        v, z = resample_schedule(e.grid, e.v, e.z, ctx.grid)
        p = Particle(np.clip(v, 0.0, vmax), np.clip(z, 0.0, 1.0), INF, 0, "catalog")
        if any(np.array_equal(p.v, q.v) and np.array_equal(p.z, q.z) for q in out):
            continue
        out.append(p)
        if len(out) == count:
            break
    return out


def init_ensemble(ctx, P=12, seed=0, catalog=None):
    """Constant openings spread over [0, v_max] with all gates open,
    plus catalog seeds in place of the last particles."""
    D = ctx.topology.n_dams
    T = ctx.grid.size - 1
    vmax = np.array([d.max_opening for d in ctx.topology.dams])
    parts = []
    for i in range(P):
        frac = (i + 1) / (P + 1)
        parts.append(Particle(np.repeat((frac * vmax)[:, None], T, axis=1), np.ones((D, T))))
    seeds = catalog_seeds(catalog, ctx, P // 4)
    if seeds:
        parts[P - len(seeds):] = seeds
    return Ensemble(parts, 0, seed)


# ----------------------------------------------------------------------------
# generation


@dataclass
class GenerationLog:
    generation: int
    best_J: float
    median_J: float
    replacements: int
    mutations: int
    validation_discrepancy: float = math.nan


def _score(p, fan, value_fn, params, ctx):
    try:
        r = adp_evaluate(p, fan, value_fn, params, ctx)
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        log.info("particle evaluation failed: %s", exc)
        return None
    return r


def meso_iterate(ensemble, fan, catalog, ctx, cfg=None, value_fn=None):
    """One generation: score, rank, replace the worst quarter from the
    catalog, mutate a fraction, keep the top quarter, validate periodically.

    Returns (ensemble', best particle, GenerationLog, ADP results).
    """
    cfg = cfg or MesoConfig(P=ensemble.P)
    if value_fn is None and catalog is not None and len(catalog):
        value_fn = value_function(catalog)
    P = ensemble.P
    parts = [p.copy() for p in ensemble.particles]
    # (S1) score
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(lambda p: _score(p, fan, value_fn, ctx.params, ctx), parts))
    else:
        results = [_score(p, fan, value_fn, ctx.params, ctx) for p in parts]
    for p, r in zip(parts, results):
        p.age += 1
        if r is None or not math.isfinite(r.J):
            p.J = INF
            continue
        p.v = r.v
        p.z[:, -1] = r.z_tail
        p.J = r.J
    # (S2) rank, stable on ties
    order = sorted(range(P), key=lambda i: (parts[i].J, i))
    ranked = [parts[i] for i in order]
    best = ranked[0].copy()
    n_keep = math.ceil(P / 4)
    n_repl = math.ceil(cfg.replace_frac * P)
    n_mut = min(math.ceil(cfg.mutation_frac * P), P - n_keep - n_repl)
    # (S3) replace the worst from the catalog, mutated elites when it runs dry
    seeds = catalog_seeds(catalog, ctx, n_repl)
    seq = WeylSequence(ensemble.mutations)
    new = ranked[: P - n_repl]
    for j in range(n_repl):
        if j < len(seeds):
            new.append(seeds[j])
        else:
            new.append(mutate(ranked[j % n_keep], seq))
    # (S4) mutate the middle ranks; (S5) elites stay as they are
    for i in range(n_keep, n_keep + n_mut):
        new[i] = mutate(new[i], seq)
    gen = ensemble.generation + 1
    J_all = np.array([p.J for p in ranked])
    fin = J_all[np.isfinite(J_all)]
    entry = GenerationLog(gen, best.J, float(np.median(fin)) if fin.size else INF, n_repl, n_mut)
    # (S6) fine-model check of the best particle
    if cfg.validator is not None and gen % cfg.K_val == 0 and math.isfinite(best.J):
        try:
            entry.validation_discrepancy = float(cfg.validator(best) - best.J)
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            log.info("validation failed: %s", exc)
    out = Ensemble(new, gen, ensemble.seed, seq.n)
    return out, best, entry, results


def write_generation_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["generation", "best_J", "median_J", "replacements", "mutations", "validation_discrepancy"])
        for r in rows:
            w.writerow([r.generation, repr(r.best_J), repr(r.median_J), r.replacements, r.mutations,
                        repr(r.validation_discrepancy)])


# ----------------------------------------------------------------------------
# receding horizon


def shift_particle(p):
    """(a, b, c) -> (b, c, c): drop the first interval, repeat the last.

    The old relaxed column joins the binary prefix, so it is rounded
    there; the new tail keeps its relaxed value.
    """
    v = np.concatenate((p.v[:, 1:], p.v[:, -1:]), axis=1)
    z = np.concatenate((p.z[:, 1:], p.z[:, -1:]), axis=1)
    z[:, :-1] = np.round(z[:, :-1])
    return Particle(v, z, INF, p.age, p.provenance)


def advance_window(ensemble, observed_prefix=None, fan_builder=None):
    """Commit the best particle's first interval and slide every schedule.

    Returns (ensemble', committed (v, z) per dam, fan or None); the fan is
    rebuilt from ``observed_prefix`` when a builder is given.
    """
    best = ensemble.best()
    if not math.isfinite(best.J) and all(not math.isfinite(p.J) for p in ensemble.particles):
        log.info("no particle has a finite value; committing the first particle")
        best = ensemble.particles[0]
    committed = [(float(best.v[d, 0]), float(best.z[d, 0])) for d in range(best.v.shape[0])]
    out = Ensemble([shift_particle(p) for p in ensemble.particles], ensemble.generation,
                   ensemble.seed, ensemble.mutations)
    fan = fan_builder(observed_prefix) if fan_builder is not None else None
    return out, committed, fan
